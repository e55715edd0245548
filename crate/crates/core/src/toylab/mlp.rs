//! A small tanh MLP, the linear model, JVP embeddings and per-sample gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::dual::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::matstore::{GradientMatrix, Role};
use crate::rng::{self, Stream};

/// Fully connected network; tanh after every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMlp {
    pub widths: Vec<usize>,
    /// Per layer: weights (out x in, row-major) then biases.
    pub theta: Vec<f64>,
}

impl ToyMlp {
    pub fn new(widths: Vec<usize>, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("mlp needs at least two positive widths"));
        }
        let mut r = rng::stream(seed, Stream::ToyInit);
        let mut theta = Vec::new();
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            theta.extend((0..fan_in * fan_out).map(|_| scale * r.sample::<f64, _>(StandardNormal)));
            theta.extend((0..fan_out).map(|_| 0.1 * r.sample::<f64, _>(StandardNormal)));
        }
        Ok(Self { widths, theta })
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of parameters in layers `1..=ell`.
    pub fn params_upto(&self, ell: usize) -> usize {
        self.widths[..=ell].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        forward_generic(&self.widths, &self.theta, x, self.depth())
    }

    /// Output of layer `ell` (1-based).
    pub fn layer_output(&self, x: &[f64], ell: usize) -> Vec<f64> {
        forward_generic(&self.widths, &self.theta, x, ell)
    }
}

fn forward_generic<T: Scalar>(widths: &[usize], theta: &[T], x: &[f64], upto: usize) -> Vec<T> {
    let depth = widths.len() - 1;
    let mut h: Vec<T> = x.iter().map(|&v| T::constant(v)).collect();
    let mut off = 0;
    for l in 0..upto {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let w = &theta[off..off + fan_in * fan_out];
        let b = &theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        off += fan_in * fan_out + fan_out;
        h = (0..fan_out)
            .map(|o| {
                let mut s = b[o];
                for (i, &hi) in h.iter().enumerate() {
                    s = s + w[o * fan_in + i] * hi;
                }
                if l + 1 < depth {
                    s.tanh()
                } else {
                    s
                }
            })
            .collect();
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyModel {
    /// `N(x) = theta^T x`.
    Linear {
        theta: Vec<f64>,
    },
    Mlp(ToyMlp),
}

impl ToyModel {
    pub fn input_dim(&self) -> usize {
        match self {
            ToyModel::Linear { theta } => theta.len(),
            ToyModel::Mlp(m) => m.input_dim(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            ToyModel::Linear { .. } => 1,
            ToyModel::Mlp(m) => m.depth(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ToyModel::Linear { .. } => 1,
            ToyModel::Mlp(m) => m.output_dim(),
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            ToyModel::Linear { theta } => theta,
            ToyModel::Mlp(m) => &m.theta,
        }
    }

    /// Parameters that layer `ell`'s output depends on.
    fn params_upto(&self, ell: usize) -> usize {
        match self {
            ToyModel::Linear { theta } => theta.len(),
            ToyModel::Mlp(m) => m.params_upto(ell),
        }
    }

    fn layer_generic<T: Scalar>(&self, theta: &[T], x: &[f64], ell: usize) -> Vec<T> {
        match self {
            ToyModel::Linear { .. } => {
                let mut s = T::constant(0.0);
                for (&t, &xi) in theta.iter().zip(x) {
                    s = s + t * T::constant(xi);
                }
                vec![s]
            }
            ToyModel::Mlp(m) => forward_generic(&m.widths, theta, x, ell),
        }
    }

    /// Output of layer `ell` at parameters shifted by `h v` on the first
    /// `v.len()` parameters.
    pub fn layer_output_shifted(&self, x: &[f64], ell: usize, v: &[f64], h: f64) -> Vec<f64> {
        let mut theta = self.params().to_vec();
        for (t, &d) in theta.iter_mut().zip(v) {
            *t += h * d;
        }
        self.layer_generic(&theta, x, ell)
    }

    /// `d N_ell(x) / d theta_ell . v` by one dual-number forward pass.
    pub fn jvp(&self, x: &[f64], ell: usize, v: &[f64]) -> Vec<f64> {
        let theta: Vec<Dual> = self
            .params()
            .iter()
            .enumerate()
            .map(|(i, &t)| Dual::new(t, v.get(i).copied().unwrap_or(0.0)))
            .collect();
        self.layer_generic(&theta, x, ell).iter().map(|d| d.eps).collect()
    }
}

/// Seeded Gaussian directions over the parameters feeding layer `ell`.
pub fn jvp_directions(model: &ToyModel, ell: usize, num_v: usize, seed: u64) -> Vec<Vec<f64>> {
    let p = model.params_upto(ell);
    let mut r = rng::stream(seed, Stream::JvpDirections);
    (0..num_v)
        .map(|_| (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn check_layer(model: &ToyModel, ell: usize, num_v: usize) -> Result<()> {
    if ell == 0 || ell > model.depth() {
        return Err(Error::invalid(format!("layer {ell} must be in [1, {}]", model.depth())));
    }
    if num_v == 0 {
        return Err(Error::invalid("need at least one direction"));
    }
    Ok(())
}

/// `(1/|V|) sum_v (d N_ell(x) / d theta_ell) v` with seeded Gaussian `v`.
pub fn jvp_embed(model: &ToyModel, x: &[f64], ell: usize, num_v: usize, seed: u64) -> Result<Vec<f64>> {
    check_layer(model, ell, num_v)?;
    if x.len() != model.input_dim() {
        return Err(Error::dims("jvp input", model.input_dim(), x.len()));
    }
    let dirs = jvp_directions(model, ell, num_v, seed);
    Ok(average_jvp(model, x, ell, &dirs))
}

fn average_jvp(model: &ToyModel, x: &[f64], ell: usize, dirs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    for v in dirs {
        let j = model.jvp(x, ell, v);
        match &mut acc {
            None => acc = Some(j),
            Some(a) => a.iter_mut().zip(&j).for_each(|(s, t)| *s += t),
        }
    }
    let n = dirs.len() as f64;
    acc.unwrap().into_iter().map(|s| s / n).collect()
}

/// JVP embeddings of every row, sharing one set of directions.
pub fn jvp_embed_rows(
    model: &ToyModel,
    xs: &GradientMatrix,
    ell: usize,
    num_v: usize,
    seed: u64,
) -> Result<GradientMatrix> {
    check_layer(model, ell, num_v)?;
    if xs.cols() != model.input_dim() {
        return Err(Error::dims("jvp input", model.input_dim(), xs.cols()));
    }
    let dirs = jvp_directions(model, ell, num_v, seed);
    let rows: Vec<Vec<f64>> = (0..xs.rows())
        .into_par_iter()
        .map(|i| average_jvp(model, xs.row(i), ell, &dirs))
        .collect();
    GradientMatrix::from_rows(&rows, Role::Embedding)
}

/// Gradient of `|N(x) - y|^2` with respect to all parameters.
pub fn sample_grad(model: &ToyModel, x: &[f64], y: &[f64]) -> Vec<f64> {
    match model {
        ToyModel::Linear { theta } => {
            let r = crate::linalg::dot(theta, x) - y[0];
            x.iter().map(|&xi| 2.0 * r * xi).collect()
        }
        ToyModel::Mlp(m) => mlp_grad(m, x, y),
    }
}

fn mlp_grad(m: &ToyMlp, x: &[f64], y: &[f64]) -> Vec<f64> {
    let depth = m.depth();
    let mut acts = vec![x.to_vec()];
    let mut offsets = Vec::with_capacity(depth);
    let mut off = 0;
    for l in 0..depth {
        let (fan_in, fan_out) = (m.widths[l], m.widths[l + 1]);
        offsets.push(off);
        let w = &m.theta[off..off + fan_in * fan_out];
        let b = &m.theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        off += fan_in * fan_out + fan_out;
        let h = &acts[l];
        let out: Vec<f64> = (0..fan_out)
            .map(|o| {
                let s = b[o] + crate::linalg::dot(&w[o * fan_in..(o + 1) * fan_in], h);
                if l + 1 < depth {
                    s.tanh()
                } else {
                    s
                }
            })
            .collect();
        acts.push(out);
    }
    let mut grad = vec![0.0; m.theta.len()];
    // Gradient with respect to the pre-activation of the current layer.
    let mut delta: Vec<f64> = acts[depth].iter().zip(y).map(|(o, t)| 2.0 * (o - t)).collect();
    for l in (0..depth).rev() {
        let (fan_in, fan_out) = (m.widths[l], m.widths[l + 1]);
        let off = offsets[l];
        let h = &acts[l];
        for o in 0..fan_out {
            for i in 0..fan_in {
                grad[off + o * fan_in + i] = delta[o] * h[i];
            }
            grad[off + fan_in * fan_out + o] = delta[o];
        }
        if l > 0 {
            let w = &m.theta[off..off + fan_in * fan_out];
            delta = (0..fan_in)
                .map(|i| {
                    let back: f64 = (0..fan_out).map(|o| w[o * fan_in + i] * delta[o]).sum();
                    back * (1.0 - h[i] * h[i])
                })
                .collect();
        }
    }
    grad
}

/// Per-sample loss gradients as rows. `ys` has one row per sample with the
/// model's output width.
pub fn per_sample_grads(
    model: &ToyModel,
    xs: &GradientMatrix,
    ys: &GradientMatrix,
    role: Role,
) -> Result<GradientMatrix> {
    if xs.cols() != model.input_dim() {
        return Err(Error::dims("sample features", model.input_dim(), xs.cols()));
    }
    if ys.rows() != xs.rows() {
        return Err(Error::dims("label rows", xs.rows(), ys.rows()));
    }
    if ys.cols() != model.output_dim() {
        return Err(Error::dims("label width", model.output_dim(), ys.cols()));
    }
    let rows: Vec<Vec<f64>> = (0..xs.rows())
        .into_par_iter()
        .map(|i| sample_grad(model, xs.row(i), ys.row(i)))
        .collect();
    GradientMatrix::from_rows(&rows, role)
}

/// Squared-error loss `|N(x) - y|^2` at parameters shifted by `h v`.
pub fn shifted_loss(model: &ToyModel, x: &[f64], y: &[f64], v: &[f64], h: f64) -> f64 {
    let out = model.layer_output_shifted(x, model.depth(), v, h);
    out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum()
}
