use crate::raster::BinaryMask;
use crate::{Error, Result};

/// Morphological dilation with a `kernel x kernel` square structuring
/// element. Pixels outside the image count as background.
///
/// Implemented as two separable running-max passes.
pub fn dilate_mask(mask: &BinaryMask, kernel: u32) -> Result<BinaryMask> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidRequest(format!(
            "dilation kernel must be odd and >= 1, got {kernel}"
        )));
    }
    if kernel == 1 {
        return Ok(mask.clone());
    }
    let r = (kernel / 2) as i64;
    let (w, h) = (mask.width() as i64, mask.height() as i64);

    let mut horizontal = BinaryMask::new(mask.width(), mask.height());
    for y in 0..h {
        // distance to the last foreground pixel seen, scanning in each direction
        let mut last: i64 = i64::MIN / 2;
        for x in 0..w + r {
            if x < w && mask.get(x as u32, y as u32) {
                last = x;
            }
            let target = x - r;
            if target >= 0 && target < w && x - last <= 2 * r {
                horizontal.set(target as u32, y as u32, true);
            }
        }
    }

    let mut out = BinaryMask::new(mask.width(), mask.height());
    for x in 0..w {
        let mut last: i64 = i64::MIN / 2;
        for y in 0..h + r {
            if y < h && horizontal.get(x as u32, y as u32) {
                last = y;
            }
            let target = y - r;
            if target >= 0 && target < h && y - last <= 2 * r {
                out.set(x as u32, target as u32, true);
            }
        }
    }
    Ok(out)
}

/// Max-pool to latent resolution: a latent cell is masked if any pixel in
/// its block is. Partial edge blocks pool over the pixels they contain.
pub fn downscale_mask(mask: &BinaryMask, factor: u32) -> BinaryMask {
    let lw = mask.width().div_ceil(factor);
    let lh = mask.height().div_ceil(factor);
    let mut out = BinaryMask::new(lw, lh);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                out.set(x / factor, y / factor, true);
            }
        }
    }
    out
}

/// Nearest-neighbour expansion of a latent mask back to pixel resolution.
pub fn upscale_mask(latent: &BinaryMask, factor: u32, width: u32, height: u32) -> BinaryMask {
    BinaryMask::from_fn(width, height, |x, y| latent.get(x / factor, y / factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(mask: &BinaryMask, k: u32) -> BinaryMask {
        let r = (k / 2) as i64;
        BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
            let mut any = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0
                        && ny >= 0
                        && nx < mask.width() as i64
                        && ny < mask.height() as i64
                        && mask.get(nx as u32, ny as u32)
                    {
                        any = true;
                    }
                }
            }
            any
        })
    }

    #[test]
    fn unit_kernel_is_identity() {
        let m = BinaryMask::from_fn(7, 5, |x, y| (x * y) % 3 == 1);
        assert_eq!(dilate_mask(&m, 1).unwrap(), m);
    }

    #[test]
    fn single_pixel_becomes_block() {
        let mut m = BinaryMask::new(11, 11);
        m.set(5, 5, true);
        let d = dilate_mask(&m, 5).unwrap();
        let expected = BinaryMask::from_fn(11, 11, |x, y| (3..=7).contains(&x) && (3..=7).contains(&y));
        assert_eq!(d, expected);
    }

    #[test]
    fn even_kernel_rejected() {
        let m = BinaryMask::new(3, 3);
        assert!(dilate_mask(&m, 4).is_err());
        assert!(dilate_mask(&m, 0).is_err());
    }

    #[test]
    fn random_mask_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        let m = BinaryMask::from_fn(32, 32, |_, _| rng.random_bool(0.05));
        assert_eq!(dilate_mask(&m, 5).unwrap(), brute_force(&m, 5));
    }

    #[test]
    fn downscale_is_conservative() {
        let mut m = BinaryMask::new(20, 12);
        m.set(17, 11, true);
        let l = downscale_mask(&m, 8);
        assert_eq!(l.dimensions(), (3, 2));
        assert!(l.get(2, 1));
        assert_eq!(l.count(), 1);
        let up = upscale_mask(&l, 8, 20, 12);
        assert!(m.is_subset_of(&up));
    }

    proptest! {
        #[test]
        fn dilation_matches_oracle_and_nests(
            w in 1u32..24, h in 1u32..24, density in 0.0f64..0.3, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density));
            let mut prev = m.clone();
            for k in [1, 3, 5, 7] {
                let d = dilate_mask(&m, k).unwrap();
                prop_assert_eq!(&d, &brute_force(&m, k));
                prop_assert!(prev.is_subset_of(&d));
                prev = d;
            }
        }
    }
}
