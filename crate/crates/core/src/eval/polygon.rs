use crate::raster::BinaryMask;

/// Scanline fill of a polygon given as `[x0, y0, x1, y1, ...]` in pixel
/// coordinates. A pixel is foreground when its centre lies inside under the
/// even-odd rule.
pub fn rasterize_polygon(points: &[f64], width: u32, height: u32) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    fill_polygon(&mut mask, points);
    mask
}

/// Union of several polygons, as in a multi-part COCO segmentation.
pub fn rasterize_polygons(polygons: &[Vec<f64>], width: u32, height: u32) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    for p in polygons {
        fill_polygon(&mut mask, p);
    }
    mask
}

fn fill_polygon(mask: &mut BinaryMask, points: &[f64]) {
    let n = points.len() / 2;
    if n < 3 {
        return;
    }
    let (w, h) = mask.dimensions();
    let vertex = |i: usize| (points[2 * (i % n)], points[2 * (i % n) + 1]);
    let mut xs = Vec::new();
    for y in 0..h {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (x0, y0) = vertex(i);
            let (x1, y1) = vertex(i + 1);
            if (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0) {
                xs.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            // pixel centres in [a, b)
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = ((pair[1] - 0.5).ceil()).min(w as f64);
            let mut x = start;
            while x < end {
                mask.set(x as u32, y, true);
                x += 1.0;
            }
        }
    }
}

/// Shoelace area.
pub fn polygon_area(points: &[f64]) -> f64 {
    let n = points.len() / 2;
    let mut s = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        s += points[2 * i] * points[2 * j + 1] - points[2 * j] * points[2 * i + 1];
    }
    s.abs() / 2.0
}

pub fn polygon_perimeter(points: &[f64]) -> f64 {
    let n = points.len() / 2;
    (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            (points[2 * j] - points[2 * i]).hypot(points[2 * j + 1] - points[2 * i + 1])
        })
        .sum()
}
