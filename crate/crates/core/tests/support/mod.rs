//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use clipaway_core::adapter::Mlp;
use clipaway_core::raster::BinaryMask;
use rand::Rng;

/// Published adapter layer table as (in, out, has norm + GELU).
pub const REFERENCE_LAYERS: [(usize, usize, bool); 7] = [
    (768, 768, true),
    (768, 768, true),
    (768, 1024, true),
    (1024, 1024, true),
    (1024, 1024, true),
    (1024, 1024, true),
    (1024, 1024, false),
];

pub const REFERENCE_LN_EPS: f64 = 1e-5;

fn gelu_erf(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Plain loops over the stored parameters: affine, then per-row layer
/// normalization with population variance, then exact GELU.
pub fn reference_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in &mlp.layers {
        let w = &layer.linear.weight_t;
        let (din, dout) = (w.nrows(), w.ncols());
        assert_eq!(h.len(), din);
        let mut z = vec![0.0; dout];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = layer.linear.bias[j];
            for (i, hi) in h.iter().enumerate() {
                s += hi * w[(i, j)];
            }
            *zj = s;
        }
        if let Some(n) = &layer.norm {
            let mean = z.iter().sum::<f64>() / dout as f64;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dout as f64;
            let inv = 1.0 / (var + REFERENCE_LN_EPS).sqrt();
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = gelu_erf((*zj - mean) * inv * n.gamma[j] + n.beta[j]);
            }
        }
        h = z;
    }
    h
}

/// Square-neighbourhood maximum, clipped at the borders.
pub fn brute_force_dilate(mask: &BinaryMask, k: u32) -> BinaryMask {
    let r = (k / 2) as i64;
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h && mask.get(nx as u32, ny as u32) {
                    return true;
                }
            }
        }
        false
    })
}

/// Mixed masks: sparse noise, rectangles, discs, plus the empty and full
/// extremes now and then.
pub fn random_mask<R: Rng>(rng: &mut R) -> BinaryMask {
    let w = rng.random_range(1..48u32);
    let h = rng.random_range(1..48u32);
    match rng.random_range(0..10) {
        0 => BinaryMask::filled(w, h, false),
        1 => BinaryMask::filled(w, h, true),
        2..=4 => {
            let p = rng.random_range(0.01..0.2);
            BinaryMask::from_fn(w, h, |_, _| rng.random_bool(p))
        }
        5..=7 => {
            let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
            let (x1, y1) = (rng.random_range(x0..w), rng.random_range(y0..h));
            BinaryMask::from_fn(w, h, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1)
        }
        _ => {
            let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let r = rng.random_range(0.5..w.max(h) as f64 / 2.0);
            BinaryMask::from_fn(w, h, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            })
        }
    }
}

pub fn random_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn norm64(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

/// Squared Fréchet distance between two 1-d Gaussians.
pub fn fid_1d(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    (mu1 - mu2).powi(2) + (s1 - s2).powi(2)
}

/// Two-point-mass MMD² under an RBF kernel with bandwidth `sigma`.
pub fn mmd_point_masses(dist: f64, sigma: f64) -> f64 {
    2.0 * (1.0 - (-(dist * dist) / (2.0 * sigma * sigma)).exp())
}

fn close(a: &[f32], b: &[f32], tol: f64, scale: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| ((*x as f64) - (*y as f64)).abs() <= tol * scale.max(1e-30))
}

/// Every rejection property on one random pair of dimension `dim`.
pub fn check_rejection_pair<R: Rng>(rng: &mut R, dim: usize) -> Result<(), String> {
    use clipaway_core::embedding::reject;
    let b = random_vec(rng, dim);
    let f = random_vec(rng, dim);
    let out = reject(&b, &f).map_err(|e| e.to_string())?;
    let (nb, nf, no) = (norm64(&b), norm64(&f), norm64(&out));

    let residual = dot64(&out, &f).abs();
    if residual > 1e-5 * no * nf {
        return Err(format!("orthogonality: |out.f| = {residual:e} > 1e-5 |out||f|"));
    }
    let again = reject(&out, &f).map_err(|e| e.to_string())?;
    if !close(&again, &out, 1e-6, no) {
        return Err("idempotence".into());
    }
    // pairwise rotation of f: g.f sums terms f[i+1]f[i] - f[i]f[i+1], exactly zero
    let g: Vec<f32> = f
        .chunks_exact(2)
        .flat_map(|p| [p[1], -p[0]])
        .collect();
    if reject(&g, &f).unwrap() != g {
        return Err("fixed point".into());
    }
    let c = rng.random_range(0.1f32..10.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
    let scaled_f: Vec<f32> = f.iter().map(|v| v * c).collect();
    if !close(&reject(&b, &scaled_f).unwrap(), &out, 1e-5, no) {
        return Err("scale invariance in the foreground".into());
    }
    let scaled_b: Vec<f32> = b.iter().map(|v| v * c).collect();
    let expect: Vec<f32> = out.iter().map(|v| v * c).collect();
    if !close(&reject(&scaled_b, &f).unwrap(), &expect, 1e-5, no * c.abs() as f64) {
        return Err("homogeneity in the background".into());
    }
    let b2 = random_vec(rng, dim);
    let sum: Vec<f32> = b.iter().zip(&b2).map(|(x, y)| x + y).collect();
    let lhs = reject(&sum, &f).unwrap();
    let rhs: Vec<f32> = out.iter().zip(reject(&b2, &f).unwrap()).map(|(x, y)| x + y).collect();
    if !close(&lhs, &rhs, 1e-5, norm64(&lhs).max(no)) {
        return Err("linearity".into());
    }
    let along = dot64(&b, &f) / nf;
    let pyth = no * no + along * along;
    if (pyth - nb * nb).abs() > 1e-5 * nb * nb {
        return Err(format!("pythagoras: {pyth} vs {}", nb * nb));
    }
    Ok(())
}

/// Same block structure as the adapter (three input-width layers, a width
/// change, four output-width layers) at a size where every parameter can be
/// perturbed.
pub const TINY_ADAPTER: [usize; 8] = [6, 6, 6, 8, 8, 8, 8, 8];

/// Gradient magnitudes below this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-7;

/// Analytic gradients of the mean-squared loss against central differences
/// on every parameter; returns the number of parameters checked and the
/// worst relative error.
pub fn gradient_check(seed: u64) -> Result<(usize, f64), String> {
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut mlp = Mlp::new(&TINY_ADAPTER, &mut rng);
    for l in &mut mlp.layers {
        if let Some(n) = &mut l.norm {
            n.gamma.iter_mut().for_each(|g| *g += rng.random_range(-0.5..0.5));
            n.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    let x = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
    let t = DMatrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
    let loss = |m: &Mlp| {
        let d = m.forward(&x) - &t;
        d.norm_squared() / d.len() as f64
    };
    let (l0, grads) = mlp.mse_loss_and_grad(&x, &t);
    if (l0 - loss(&mlp)).abs() > 1e-12 * l0.max(1.0) {
        return Err(format!("loss mismatch {l0} vs {}", loss(&mlp)));
    }
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let names = mlp.tensor_names();
    let h = 1e-5;
    let (mut checked, mut worst) = (0, 0.0f64);
    for (ti, a_t) in analytic.iter().enumerate() {
        for (pi, &a) in a_t.iter().enumerate() {
            let mut plus = mlp.clone();
            plus.tensors_mut()[ti][pi] += h;
            let mut minus = mlp.clone();
            minus.tensors_mut()[ti][pi] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > 1e-4 {
                return Err(format!("{}[{pi}]: analytic {a:e}, numeric {numeric:e}", names[ti]));
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    if checked != mlp.param_count() {
        return Err(format!("checked {checked} of {} parameters", mlp.param_count()));
    }
    Ok((checked, worst))
}

/// A 64x64 colour gradient used as the single memorization image.
pub fn memorization_image() -> image::RgbImage {
    image::RgbImage::from_fn(64, 64, |x, y| image::Rgb([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8]))
}

/// Full-size adapter trained on one image with mock encoders at the default
/// hyperparameters (batch 1); returns the per-step losses.
pub fn memorize(steps: u64) -> Vec<f64> {
    use clipaway_core::adapter::{train_projection_adapter, AdapterTrainingConfig};
    use clipaway_core::encoders::mock::{MockPlainEncoder, MockRegionEncoder};
    let images = vec![memorization_image()];
    let cfg = AdapterTrainingConfig {
        batch_size: 1,
        total_steps: steps,
        checkpoint_interval: 0,
        seed: 7,
        ..Default::default()
    };
    let run = train_projection_adapter(
        &images,
        &MockRegionEncoder::new(0),
        &MockPlainEncoder::new(0),
        &cfg,
        None,
    )
    .expect("training runs");
    run.losses
}

/// Dilation against the brute-force oracle over `n` random masks for each
/// odd kernel in `kernels`, including nesting of successive kernels.
pub fn check_dilation(seed: u64, n: usize, kernels: &[u32]) -> Result<usize, String> {
    use clipaway_core::pipeline::dilate_mask;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for i in 0..n {
        let mask = random_mask(&mut rng);
        let mut previous = mask.clone();
        for &k in kernels {
            let got = dilate_mask(&mask, k).map_err(|e| e.to_string())?;
            if got != brute_force_dilate(&mask, k) {
                return Err(format!("mask {i} ({:?}), kernel {k}: differs from oracle", mask.dimensions()));
            }
            if !previous.is_subset_of(&got) {
                return Err(format!("mask {i}, kernel {k}: not a superset of the smaller kernel"));
            }
            previous = got;
            cases += 1;
        }
    }
    Ok(cases)
}

fn normal_samples<R: Rng>(rng: &mut R, n: usize, mean: f64, sd: f64) -> Vec<Vec<f64>> {
    let d = rand_distr::Normal::new(mean, sd).unwrap();
    (0..n).map(|_| vec![rng.sample(d)]).collect()
}

/// Closed-form checks of FID and the RBF MMD.
pub fn check_metric_oracles(seed: u64) -> Result<(), String> {
    use clipaway_core::eval::{fid, mmd_squared, MmdEstimator};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let err = |e: clipaway_core::Error| e.to_string();

    let a: Vec<Vec<f64>> = (0..64).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let b: Vec<Vec<f64>> = (0..64).map(|_| (0..5).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
    let self_fid = fid(&a, &a).map_err(err)?.value;
    if self_fid.abs() > 1e-6 {
        return Err(format!("fid(A, A) = {self_fid:e}"));
    }
    let (ab, ba) = (fid(&a, &b).map_err(err)?.value, fid(&b, &a).map_err(err)?.value);
    if (ab - ba).abs() > 1e-9 * ab.abs().max(1.0) || ab <= 0.0 {
        return Err(format!("fid asymmetric or non-positive: {ab} vs {ba}"));
    }

    let x = normal_samples(&mut rng, 20_000, 0.0, 1.0);
    let y = normal_samples(&mut rng, 20_000, 3.0, 1.0);
    let sampled = fid(&x, &y).map_err(err)?.value;
    let exact = fid_1d(0.0, 1.0, 3.0, 1.0);
    if (sampled - exact).abs() > 0.2 {
        return Err(format!("1-d Gaussian fid {sampled}, expected {exact} +- 0.2"));
    }
    let s = normal_samples(&mut rng, 20_000, 1.0, 2.0);
    let sampled = fid(&x, &s).map_err(err)?.value;
    let exact = fid_1d(0.0, 1.0, 1.0, 2.0);
    if (sampled - exact).abs() > 0.2 {
        return Err(format!("1-d Gaussian fid {sampled}, expected {exact} +- 0.2"));
    }

    for (dist, sigma) in [(0.5, 1.0), (1.0, 10.0), (3.0, 0.7)] {
        let p = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let q = vec![vec![dist, 0.0], vec![dist, 0.0]];
        let got = mmd_squared(&p, &q, sigma, MmdEstimator::Biased).map_err(err)?;
        let want = mmd_point_masses(dist, sigma);
        if (got - want).abs() > 1e-9 {
            return Err(format!("two-point mmd2 {got}, expected {want}"));
        }
    }
    let same = mmd_squared(&a, &a, 1.0, MmdEstimator::Biased).map_err(err)?;
    if same.abs() > 1e-12 {
        return Err(format!("mmd2(A, A) = {same:e}"));
    }
    Ok(())
}

/// Mock models small enough for benchmark runs.
pub fn mock_eval_models() -> clipaway_core::eval::EvalModels {
    use clipaway_core::adapter::ProjectionAdapter;
    use clipaway_core::encoders::mock::{MockPlainEncoder, MockRegionEncoder, MockTextEncoder};
    use clipaway_core::eval::{EvalModels, MockFeatureExtractor};
    use clipaway_core::pipeline::{ImagePromptProjection, RemovalPipeline};
    use std::sync::Arc;
    EvalModels {
        pipeline: RemovalPipeline::new(
            Arc::new(MockRegionEncoder::with_resolution(1, 64)),
            Arc::new(ProjectionAdapter::new(2)),
            Arc::new(ImagePromptProjection::random(3)),
        ),
        plain_encoder: Arc::new(MockPlainEncoder::new(4)),
        text_encoder: Arc::new(MockTextEncoder::new(5)),
        features: Arc::new(MockFeatureExtractor),
    }
}

/// Benchmark the identity backend and a mock backend on a synthetic COCO
/// layout; the identity report comes first.
pub fn identity_and_mock_reports(
    dir: &std::path::Path,
) -> Result<Vec<clipaway_core::eval::MetricReport>, String> {
    use clipaway_core::eval::{ingest_coco, run_benchmark, BenchmarkConfig, BenchmarkEntry, IngestOptions};
    use clipaway_core::pipeline::{BackendKind, ConditioningMode, IdentityBackend, MockBackend};
    use std::sync::Arc;
    let err = |e: clipaway_core::Error| e.to_string();
    let ds = clipaway_core::eval::synthetic::write_synthetic_coco(dir, 4, 2, 9).map_err(err)?;
    let classes: Vec<String> = ds.dataset.thing_classes().iter().map(|c| c.name.clone()).collect();
    let entries = [
        BenchmarkEntry::new(Arc::new(IdentityBackend::new(BackendKind::SdInpaint)), ConditioningMode::Clipaway),
        BenchmarkEntry::new(Arc::new(MockBackend::new(BackendKind::BlendedLatent)), ConditioningMode::Clipaway),
        BenchmarkEntry::new(Arc::new(MockBackend::new(BackendKind::Unipaint)), ConditioningMode::Unconditioned),
    ];
    let cfg = BenchmarkConfig {
        output_dir: Some(dir.join("out")),
        options: clipaway_core::pipeline::RemovalOptions {
            steps: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut it = ingest_coco(&ds.annotation_file, &ds.image_dir, IngestOptions::default()).map_err(err)?;
    run_benchmark(&mut it, &classes, &mock_eval_models(), &entries, &cfg).map_err(err)
}
