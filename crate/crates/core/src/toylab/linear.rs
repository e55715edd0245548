//! Linear regression running example: two Gaussian clusters labelled 0/1 as
//! real data, moment-matched noise samples as synthetic data, and weighted
//! full-batch gradient descent on `(theta^T x - y)^2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{self, InfluenceObjects, Order, TargetGradient};
use crate::linalg;
use crate::matstore::{GradientMatrix, Role};
use crate::qpsolve::{self, QpProblem};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearToyConfig {
    /// Feature dimension including the constant bias feature.
    pub d: usize,
    pub n_source_real: usize,
    pub n_source_synth: usize,
    pub n_target: usize,
    pub n_val: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Distance of each cluster mean from the origin, before `feature_scale`.
    pub separation: f64,
    /// Multiplies every non-bias feature.
    pub feature_scale: f64,
}

impl Default for LinearToyConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_source_real: 256,
            n_source_synth: 256,
            n_target: 256,
            n_val: 256,
            lr: 1e-3,
            steps: 200,
            seed: 0,
            separation: 1.5,
            feature_scale: 0.5,
        }
    }
}

impl LinearToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::invalid("toy dimension must be at least 2"));
        }
        if [self.n_source_real, self.n_source_synth, self.n_target, self.n_val].contains(&0) {
            return Err(Error::invalid("toy sample counts must be >= 1"));
        }
        if !(self.feature_scale > 0.0) || !self.separation.is_finite() {
            return Err(Error::invalid("feature scale must be positive and separation finite"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn n_source(&self) -> usize {
        self.n_source_real + self.n_source_synth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "variant", content = "lambda")]
pub enum WeightVariant {
    Uniform,
    Unconstrained,
    Robust(f64),
}

/// Features and labels of one split.
#[derive(Debug, Clone)]
pub struct Split {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.x * theta - &self.y
    }

    /// Mean squared error.
    pub fn loss(&self, theta: &DVector<f64>) -> f64 {
        let r = self.residuals(theta);
        let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
        linalg::pairwise_sum(&sq) / self.len() as f64
    }

    /// Rows `2 (theta^T x_i - y_i) x_i`.
    pub fn grads(&self, theta: &DVector<f64>, role: Role) -> Result<GradientMatrix> {
        let r = self.residuals(theta);
        let mut g = self.x.clone();
        for (i, mut row) in g.row_iter_mut().enumerate() {
            row *= 2.0 * r[i];
        }
        GradientMatrix::from_dmatrix(&g, role)
    }

    /// Gradient of the mean loss.
    pub fn mean_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.x.transpose() * self.residuals(theta) * (2.0 / self.len() as f64)
    }

    /// Hessian of the mean loss, `(2/m) X^T X`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let mut h = self.x.transpose() * &self.x * (2.0 / self.len() as f64);
        linalg::symmetrize(&mut h);
        h
    }
}

#[derive(Debug, Clone)]
pub struct LinearToy {
    pub cfg: LinearToyConfig,
    pub source: Split,
    pub target: Split,
    pub val: Split,
    pub theta0: DVector<f64>,
}

fn real_split(n: usize, mu: &DVector<f64>, scale: f64, r: &mut impl Rng) -> Split {
    let d = mu.len() + 1;
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let label = r.random::<bool>();
        let sign = if label { 1.0 } else { -1.0 };
        for k in 0..d - 1 {
            x[(i, k)] = scale * (sign * mu[k] + r.sample::<f64, _>(StandardNormal));
        }
        x[(i, d - 1)] = 1.0;
        y[i] = if label { 1.0 } else { 0.0 };
    }
    Split { x, y }
}

impl LinearToy {
    pub fn generate(cfg: &LinearToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, Stream::ToyData);
        let dir: Vec<f64> = (0..cfg.d - 1).map(|_| r.sample(StandardNormal)).collect();
        let mu = DVector::from_vec(crate::matstore::normalize_vec(&dir)) * cfg.separation;

        let real = real_split(cfg.n_source_real, &mu, cfg.feature_scale, &mut r);
        // Synthetic samples: independent Gaussians with the per-feature mean and
        // standard deviation of the real samples, and coin-flip labels.
        let (d, m) = (cfg.d, cfg.n_source_synth);
        let mut synth = Split {
            x: DMatrix::zeros(m, d),
            y: DVector::zeros(m),
        };
        for k in 0..d {
            let col: Vec<f64> = real.x.column(k).iter().copied().collect();
            let mean = linalg::pairwise_sum(&col) / col.len() as f64;
            let var: Vec<f64> = col.iter().map(|v| (v - mean).powi(2)).collect();
            let std = (linalg::pairwise_sum(&var) / col.len() as f64).sqrt();
            for i in 0..m {
                synth.x[(i, k)] = mean + std * r.sample::<f64, _>(StandardNormal);
            }
        }
        for i in 0..m {
            synth.y[i] = if r.random::<bool>() { 1.0 } else { 0.0 };
        }
        let mut sx = DMatrix::zeros(cfg.n_source(), d);
        sx.rows_mut(0, cfg.n_source_real).copy_from(&real.x);
        sx.rows_mut(cfg.n_source_real, m).copy_from(&synth.x);
        let mut sy = DVector::zeros(cfg.n_source());
        sy.rows_mut(0, cfg.n_source_real).copy_from(&real.y);
        sy.rows_mut(cfg.n_source_real, m).copy_from(&synth.y);
        let source = Split { x: sx, y: sy };

        let target = real_split(cfg.n_target, &mu, cfg.feature_scale, &mut r);
        let val = real_split(cfg.n_val, &mu, cfg.feature_scale, &mut r);

        let mut ri = rng::stream(cfg.seed, Stream::ToyInit);
        let theta0 = DVector::from_fn(d, |_, _| ri.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
        Ok(Self {
            cfg: cfg.clone(),
            source,
            target,
            val,
            theta0,
        })
    }

    pub fn n(&self) -> usize {
        self.source.len()
    }

    pub fn target_gradient(&self, theta: &DVector<f64>) -> Result<TargetGradient> {
        TargetGradient::new(
            self.target.mean_grad(theta).iter().copied().collect(),
            Some(self.target.hessian()),
        )
    }

    /// Exact second-order objects at `theta` with `eta` equal to the learning rate.
    pub fn influence(&self, theta: &DVector<f64>) -> Result<InfluenceObjects> {
        let g_s = self.source.grads(theta, Role::Source)?;
        let g_t = self.target_gradient(theta)?;
        influence::influence_objects(&g_s, &g_t, false, self.cfg.lr, Order::Second)
    }

    /// One weighted step `theta - (lr/n) sum_i w_i g_i`.
    pub fn step(&self, theta: &DVector<f64>, w: &[f64]) -> DVector<f64> {
        let r = self.source.residuals(theta);
        let coeff = DVector::from_fn(self.n(), |i, _| 2.0 * r[i] * w[i]);
        theta - self.source.x.transpose() * coeff * (self.cfg.lr / self.n() as f64)
    }

    pub fn weights(&self, variant: WeightVariant) -> Result<Vec<f64>> {
        match variant {
            WeightVariant::Uniform => Ok(vec![1.0; self.n()]),
            WeightVariant::Unconstrained => {
                let obj = self.influence(&self.theta0)?;
                // Q has rank at most d here, so take the minimum-norm minimizer.
                qpsolve::solve_unconstrained_min_norm(&obj, 1e-10)
            }
            WeightVariant::Robust(lambda) => {
                let obj = self.influence(&self.theta0)?;
                Ok(qpsolve::solve_active_set(&QpProblem::from_objects(&obj, lambda))?.weights)
            }
        }
    }

    /// Validation loss at steps `0..=steps` of training with fixed weights.
    pub fn train(&self, w: &[f64], steps: usize) -> Result<LossCurve> {
        if w.len() != self.n() {
            return Err(Error::dims("toy weights", self.n(), w.len()));
        }
        let mut theta = self.theta0.clone();
        let mut losses = Vec::with_capacity(steps + 1);
        losses.push(self.val.loss(&theta));
        for _ in 0..steps {
            theta = self.step(&theta, w);
            losses.push(self.val.loss(&theta));
        }
        Ok(LossCurve { losses })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("curve has step 0")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    /// Largest increase between consecutive steps (0 for a non-increasing curve).
    pub fn max_increase(&self) -> f64 {
        self.losses.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

pub fn run_linear_example(cfg: &LinearToyConfig, variant: WeightVariant) -> Result<LossCurve> {
    let toy = LinearToy::generate(cfg)?;
    let w = toy.weights(variant)?;
    toy.train(&w, cfg.steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LinearToyConfig {
        LinearToyConfig {
            d: 6,
            n_source_real: 20,
            n_source_synth: 20,
            n_target: 30,
            n_val: 30,
            steps: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_is_flat() {
        let cfg = LinearToyConfig { lr: 0.0, ..small() };
        let c = run_linear_example(&cfg, WeightVariant::Uniform).unwrap();
        assert!(c.losses.iter().all(|&l| l == c.losses[0]));
    }

    #[test]
    fn surrogate_is_exact_for_random_weights() {
        let toy = LinearToy::generate(&small()).unwrap();
        let obj = toy.influence(&toy.theta0).unwrap();
        let mut r = rng::trial_rng(1, 0);
        for _ in 0..10 {
            let w: Vec<f64> = (0..toy.n()).map(|_| r.random_range(-3.0..3.0)).collect();
            let before = toy.target.loss(&toy.theta0);
            let after = toy.target.loss(&toy.step(&toy.theta0, &w));
            let pred = toy.cfg.lr / toy.n() as f64 * influence::eval_f(&w, &obj).unwrap();
            assert!((after - before - pred).abs() < 1e-8);
        }
    }

    #[test]
    fn unconstrained_step_hits_target_optimum() {
        let toy = LinearToy::generate(&small()).unwrap();
        let w = toy.weights(WeightVariant::Unconstrained).unwrap();
        let theta1 = toy.step(&toy.theta0, &w);
        let g = toy.target.mean_grad(&theta1);
        assert!(g.norm() < 1e-6, "{}", g.norm());
    }

    #[test]
    fn csv_shape() {
        let c = LossCurve { losses: vec![1.0, 0.5] };
        assert_eq!(c.to_csv(), "step,loss\n0,1\n1,0.5\n");
        assert_eq!(c.max_increase(), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = LinearToy::generate(&small()).unwrap();
        let b = LinearToy::generate(&small()).unwrap();
        assert_eq!(a.source.x, b.source.x);
        assert_eq!(a.theta0, b.theta0);
    }
}
