//! Dense MLP with per-layer `Linear -> LayerNorm -> GELU` blocks and a bare
//! affine output layer, with explicit backpropagation.
//!
//! Weights are held transposed (`in x out`) so the column-major storage of
//! each matrix reads like a row-major `[out][in]` array.

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`.
    pub weight_t: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight_t: DMatrix::zeros(in_dim, out_dim),
            bias: DVector::zeros(out_dim),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        // draw row-major over [out][in] so the stream order is layout independent
        let mut weight_t = DMatrix::zeros(in_dim, out_dim);
        for o in 0..out_dim {
            for i in 0..in_dim {
                weight_t[(i, o)] = dist.sample(rng);
            }
        }
        let bias = DVector::from_fn(out_dim, |_, _| dist.sample(rng));
        Self { weight_t, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight_t.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight_t.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: DVector::from_element(dim, 1.0),
            beta: DVector::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gamma: DVector::zeros(dim),
            beta: DVector::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub linear: Linear,
    /// When present the layer is followed by layer normalization and GELU.
    pub norm: Option<LayerNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

struct LayerCache {
    input: DMatrix<f64>,
    // normalized pre-activations, 1/std per row, post-affine values
    xhat: Option<DMatrix<f64>>,
    rstd: Option<Vec<f64>>,
    pre_gelu: Option<DMatrix<f64>>,
}

impl Mlp {
    /// `widths` lists the input width then each layer's output width. Every
    /// layer but the last carries normalization and GELU.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| Layer {
                linear: Linear::init(widths[l], widths[l + 1], rng),
                norm: (l + 1 < n).then(|| LayerNorm::new(widths[l + 1])),
            })
            .collect();
        Self { layers }
    }

    /// Same architecture, every parameter zero. Used as the gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    linear: Linear::zeros(l.linear.in_dim(), l.linear.out_dim()),
                    norm: l.norm.as_ref().map(|n| LayerNorm::zeros(n.gamma.len())),
                })
                .collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].linear.in_dim()];
        w.extend(self.layers.iter().map(|l| l.linear.out_dim()));
        w
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].linear.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").linear.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in canonical order: per layer weight, bias, and
    /// (when normalized) gamma, beta.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.linear.weight_t.as_slice());
            out.push(l.linear.bias.as_slice());
            if let Some(n) = &l.norm {
                out.push(n.gamma.as_slice());
                out.push(n.beta.as_slice());
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.linear.weight_t.as_mut_slice());
            out.push(l.linear.bias.as_mut_slice());
            if let Some(n) = &mut l.norm {
                out.push(n.gamma.as_mut_slice());
                out.push(n.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("layers.{i}.linear.weight"));
            out.push(format!("layers.{i}.linear.bias"));
            if l.norm.is_some() {
                out.push(format!("layers.{i}.norm.weight"));
                out.push(format!("layers.{i}.norm.bias"));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Batched forward; rows of `input` are samples.
    pub fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(input, None)
    }

    fn forward_cached(
        &self,
        input: &DMatrix<f64>,
        mut caches: Option<&mut Vec<LayerCache>>,
    ) -> DMatrix<f64> {
        let mut act = input.clone();
        for layer in &self.layers {
            let mut z = &act * &layer.linear.weight_t;
            for mut row in z.row_iter_mut() {
                row += layer.linear.bias.transpose();
            }
            let (out, xhat, rstd, pre) = match &layer.norm {
                None => (z, None, None, None),
                Some(norm) => {
                    let (xhat, rstd) = normalize_rows(&z);
                    let mut y = xhat.clone();
                    for mut row in y.row_iter_mut() {
                        row.component_mul_assign(&norm.gamma.transpose());
                        row += norm.beta.transpose();
                    }
                    let a = y.map(gelu);
                    (a, Some(xhat), Some(rstd), Some(y))
                }
            };
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache {
                    input: act,
                    xhat,
                    rstd,
                    pre_gelu: pre,
                });
            }
            act = out;
        }
        act
    }

    /// Mean squared error over batch and output dimension, and its gradient
    /// with respect to every parameter.
    pub fn mse_loss_and_grad(&self, input: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, Mlp) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let out = self.forward_cached(input, Some(&mut caches));
        let diff = &out - target;
        let count = diff.len() as f64;
        let loss = diff.norm_squared() / count;
        let mut upstream = diff * (2.0 / count);

        let mut grads = self.zeros_like();
        for (idx, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let g = &mut grads.layers[idx];
            let dz = match (&layer.norm, cache.xhat, cache.rstd, cache.pre_gelu) {
                (Some(norm), Some(xhat), Some(rstd), Some(pre)) => {
                    let dy = upstream.zip_map(&pre, |d, y| d * gelu_grad(y));
                    let gnorm = g.norm.as_mut().expect("shapes match");
                    for r in 0..dy.nrows() {
                        for c in 0..dy.ncols() {
                            gnorm.gamma[c] += dy[(r, c)] * xhat[(r, c)];
                            gnorm.beta[c] += dy[(r, c)];
                        }
                    }
                    let mut dz = DMatrix::zeros(dy.nrows(), dy.ncols());
                    let width = dy.ncols() as f64;
                    for r in 0..dy.nrows() {
                        let mut mean_dx = 0.0;
                        let mut mean_dx_xhat = 0.0;
                        for c in 0..dy.ncols() {
                            let dx = dy[(r, c)] * norm.gamma[c];
                            mean_dx += dx;
                            mean_dx_xhat += dx * xhat[(r, c)];
                        }
                        mean_dx /= width;
                        mean_dx_xhat /= width;
                        for c in 0..dy.ncols() {
                            let dx = dy[(r, c)] * norm.gamma[c];
                            dz[(r, c)] = rstd[r] * (dx - mean_dx - xhat[(r, c)] * mean_dx_xhat);
                        }
                    }
                    dz
                }
                _ => upstream,
            };
            g.linear
                .weight_t
                .gemm(1.0, &cache.input.transpose(), &dz, 0.0);
            g.linear.bias = dz.row_sum().transpose();
            if idx > 0 {
                // (W dz^T)^T keeps the large operand in storage order.
                upstream = (&layer.linear.weight_t * dz.transpose()).transpose();
            } else {
                break;
            }
        }
        (loss, grads)
    }
}

fn normalize_rows(z: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let width = z.ncols() as f64;
    let mut xhat = z.clone();
    let mut rstd = Vec::with_capacity(z.nrows());
    for mut row in xhat.row_iter_mut() {
        let mean = row.sum() / width;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}
