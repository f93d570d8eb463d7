//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Added to both covariances when either is numerically singular.
pub const FID_REGULARIZATION: f64 = 1e-6;

/// Relative eigenvalue floor below which a covariance counts as singular.
const SINGULAR_RATIO: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// Whether `FID_REGULARIZATION * I` was added to the covariances.
    pub regularized: bool,
}

/// Sample mean and unbiased covariance.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianFit {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 samples, got {n}")));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::Metric("feature dimensions differ".into()));
        }
        let x = DMatrix::from_fn(n, d, |r, c| samples[r][c]);
        let mean = DVector::from_fn(d, |c, _| x.column(c).sum() / n as f64);
        let mut centred = x;
        for c in 0..d {
            let m = mean[c];
            centred.column_mut(c).add_scalar_mut(-m);
        }
        let cov = centred.tr_mul(&centred) / (n as f64 - 1.0);
        Ok(Self { mean, cov, n })
    }
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric PSD square root by eigendecomposition, clamping negative
/// eigenvalues to zero. Also returns the extreme eigenvalues.
fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64, f64) {
    let eig = SymmetricEigen::new(symmetric(m));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), min, max)
}

/// `Tr((Σa Σb)^{1/2})` as the nuclear norm of `Σa^{1/2} Σb^{1/2}`; the
/// eigenvalues of `Σa Σb` are the squared singular values of that product.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (f64, bool) {
    let (sa, amin, amax) = psd_sqrt(a);
    let (sb, bmin, bmax) = psd_sqrt(b);
    let singular = amin <= SINGULAR_RATIO * amax.abs().max(f64::MIN_POSITIVE)
        || bmin <= SINGULAR_RATIO * bmax.abs().max(f64::MIN_POSITIVE);
    let sv = (sa * sb).singular_values();
    (sv.sum(), singular)
}

pub fn fid_from_fits(a: &GaussianFit, b: &GaussianFit) -> Result<FidResult> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Metric(format!(
            "feature dims differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let (tr, singular) = trace_sqrt_product(&a.cov, &b.cov);
    let mut value = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr;
    let mut regularized = false;
    if singular || !value.is_finite() {
        let d = a.mean.len();
        let eps = DMatrix::<f64>::identity(d, d) * FID_REGULARIZATION;
        let ra = &a.cov + &eps;
        let rb = &b.cov + &eps;
        let (tr, _) = trace_sqrt_product(&ra, &rb);
        value = diff + ra.trace() + rb.trace() - 2.0 * tr;
        regularized = true;
    }
    if !value.is_finite() {
        return Err(Error::Metric("FID is not finite".into()));
    }
    // Roundoff can leave a tiny negative for matching distributions.
    Ok(FidResult {
        value: value.max(0.0),
        regularized,
    })
}

pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<FidResult> {
    fid_from_fits(
        &GaussianFit::from_samples(features_a)?,
        &GaussianFit::from_samples(features_b)?,
    )
}
