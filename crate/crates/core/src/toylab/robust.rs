//! Robust weighting for the linear toy: the first- and second-order terms of
//! the surrogate under a parameter perturbation, and the worst-case objective
//! obtained from a small step of size `eps` along the perturbation gradient.
//!
//! Everything uses sums over weighted samples, `g_w = sum w_i g_i` and
//! `H_w = sum w_i H_i`, with step size `eta = lr / n`, so that
//! `f(w; theta) = -g_w^T g_T + (eta/2) g_w^T H_T g_w` equals the surrogate
//! `-p^T w + (lr/2) w^T Q w`.

use nalgebra::{DMatrix, DVector};

use super::linear::LinearToy;
use crate::error::{Error, Result};
use crate::linalg;
use crate::qpsolve;

/// `a_w` and `B_w` with `f(w; theta + d) = f(w; theta) + a_w^T d + d^T B_w d`.
#[derive(Debug, Clone)]
pub struct RobustLinearTerms {
    pub a_w: DVector<f64>,
    pub b_w: DMatrix<f64>,
    pub epsilon: f64,
}

/// Quantities of the quadratic-loss toy at a fixed `theta`.
#[derive(Debug, Clone)]
pub struct RobustState {
    x: DMatrix<f64>,
    resid: DVector<f64>,
    g_t: DVector<f64>,
    h_t: DMatrix<f64>,
    eta: f64,
}

impl RobustState {
    pub fn new(toy: &LinearToy, theta: &DVector<f64>) -> Self {
        Self {
            x: toy.source.x.clone(),
            resid: toy.source.residuals(theta),
            g_t: toy.target.mean_grad(theta),
            h_t: toy.target.hessian(),
            eta: toy.cfg.lr / toy.n() as f64,
        }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    fn check(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.n() {
            return Err(Error::dims("robust weights", self.n(), w.len()));
        }
        Ok(())
    }

    /// `G^T y` with rows `g_i = 2 r_i x_i`.
    fn g_t_times(&self, y: &[f64]) -> DVector<f64> {
        let c = DVector::from_fn(self.n(), |i, _| 2.0 * self.resid[i] * y[i]);
        self.x.transpose() * c
    }

    /// `G v`.
    fn g_times(&self, v: &DVector<f64>) -> DVector<f64> {
        (&self.x * v).component_mul(&self.resid) * 2.0
    }

    fn h_w(&self, w: &[f64]) -> DMatrix<f64> {
        let mut xw = self.x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= 2.0 * w[i];
        }
        let mut h = self.x.transpose() * xw;
        linalg::symmetrize(&mut h);
        h
    }

    /// `H_w v = 2 X^T (w o (X v))` without forming `H_w`.
    fn h_w_times(&self, w: &[f64], v: &DVector<f64>) -> DVector<f64> {
        let xv = &self.x * v;
        let c = DVector::from_fn(self.n(), |i, _| 2.0 * w[i] * xv[i]);
        self.x.transpose() * c
    }

    pub fn f(&self, w: &[f64]) -> Result<f64> {
        self.check(w)?;
        let gw = self.g_t_times(w);
        Ok(-gw.dot(&self.g_t) + 0.5 * self.eta * gw.dot(&(&self.h_t * &gw)))
    }

    fn a_vec(&self, w: &[f64]) -> DVector<f64> {
        let gw = self.g_t_times(w);
        let u = &self.h_t * &gw;
        let c = &self.g_t - &u * self.eta;
        -self.h_w_times(w, &c) - u
    }

    pub fn terms(&self, w: &[f64], epsilon: f64) -> Result<RobustLinearTerms> {
        self.check(w)?;
        let h_w = self.h_w(w);
        let b_w = -(&self.h_t * &h_w) + (&h_w * &self.h_t * &h_w) * (0.5 * self.eta);
        Ok(RobustLinearTerms {
            a_w: self.a_vec(w),
            b_w,
            epsilon,
        })
    }

    /// `f + eps |a| + eps^2 a^T B a / |a|^2`, the `eps` terms taken as 0 when `a = 0`.
    pub fn objective(&self, w: &[f64], epsilon: f64) -> Result<f64> {
        let f = self.f(w)?;
        let a = self.a_vec(w);
        let na2 = a.norm_squared();
        if na2 == 0.0 || epsilon == 0.0 {
            return Ok(f);
        }
        let quad = self.quad_form(w, &a);
        Ok(f + epsilon * na2.sqrt() + epsilon * epsilon * quad / na2)
    }

    /// `a^T B_w a` from matrix-vector products.
    fn quad_form(&self, w: &[f64], a: &DVector<f64>) -> f64 {
        let hwa = self.h_w_times(w, a);
        let hta = &self.h_t * a;
        -hta.dot(&hwa) + 0.5 * self.eta * hwa.dot(&(&self.h_t * &hwa))
    }

    /// `J^T y` for `J = da/dw`, whose column `i` is
    /// `-H_i c + (eta H_w H_T - H_T) g_i` with `c = g_T - eta H_T g_w`.
    fn jac_t(&self, w: &[f64], y: &DVector<f64>) -> DVector<f64> {
        let gw = self.g_t_times(w);
        let c = &self.g_t - &self.h_t * &gw * self.eta;
        let xc = &self.x * &c;
        let xy = &self.x * y;
        // (eta H_w H_T - H_T)^T y = eta H_T H_w y - H_T y
        let m_t_y = &self.h_t * self.h_w_times(w, y) * self.eta - &self.h_t * y;
        let gm = self.g_times(&m_t_y);
        DVector::from_fn(self.n(), |i, _| -2.0 * xc[i] * xy[i] + gm[i])
    }

    pub fn gradient(&self, w: &[f64], epsilon: f64) -> Result<DVector<f64>> {
        self.check(w)?;
        let gw = self.g_t_times(w);
        let mut grad = self.g_times(&(&self.h_t * &gw * self.eta - &self.g_t));
        let a = self.a_vec(w);
        let na2 = a.norm_squared();
        if na2 == 0.0 || epsilon == 0.0 {
            return Ok(grad);
        }
        let na = na2.sqrt();
        grad += self.jac_t(w, &(&a / na)) * epsilon;

        let hwa = self.h_w_times(w, &a);
        let hta = &self.h_t * &a;
        let quad = -hta.dot(&hwa) + 0.5 * self.eta * hwa.dot(&(&self.h_t * &hwa));
        // (B + B^T) a with B = -H_T H_w + (eta/2) H_w H_T H_w.
        let bsym_a = -(&self.h_t * &hwa) - self.h_w_times(w, &hta) + self.h_w_times(w, &(&self.h_t * &hwa)) * self.eta;
        let mut d_quad = self.jac_t(w, &bsym_a);
        let v = &self.h_t * (&hwa * self.eta - &a);
        let xv = &self.x * &v;
        let xa = &self.x * &a;
        for i in 0..self.n() {
            d_quad[i] += 2.0 * xv[i] * xa[i];
        }
        let d_norm2 = self.jac_t(w, &a) * 2.0;
        grad += (d_quad / na2 - d_norm2 * (quad / (na2 * na2))) * (epsilon * epsilon);
        Ok(grad)
    }
}

pub fn robust_linear_terms(
    w: &[f64],
    toy: &LinearToy,
    theta: &DVector<f64>,
    epsilon: f64,
) -> Result<RobustLinearTerms> {
    RobustState::new(toy, theta).terms(w, epsilon)
}

pub fn robust_linear_objective(w: &[f64], epsilon: f64, toy: &LinearToy, theta: &DVector<f64>) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    RobustState::new(toy, theta).objective(w, epsilon)
}

/// Euclidean projection onto `{w >= 0, sum w = n}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    qpsolve::solve_first_order(v, 1.0)
        .expect("finite input projects")
        .weights
}

#[derive(Debug, Clone)]
pub struct PgdResult {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// `|R_k - R_{k-1}| / max(1, |R_k|)` at the last iteration.
    pub stationarity: f64,
}

/// Projected gradient descent with step `1 / (lr |Q|_F)` from uniform weights.
pub fn minimize_robust(toy: &LinearToy, epsilon: f64, iterations: usize) -> Result<PgdResult> {
    let state = RobustState::new(toy, &toy.theta0);
    let n = state.n();
    // lr Q = eta G H_T G^T; its Frobenius norm bounds the curvature of f.
    let g = toy
        .source
        .grads(&toy.theta0, crate::matstore::Role::Source)?
        .to_dmatrix();
    let curvature = (&g * &state.h_t * g.transpose() * state.eta).norm();
    let step = 1.0 / curvature.max(1e-12);
    let mut w = vec![1.0; n];
    let mut obj = state.objective(&w, epsilon)?;
    let mut stationarity = f64::INFINITY;
    for _ in 0..iterations {
        let grad = state.gradient(&w, epsilon)?;
        let trial: Vec<f64> = w.iter().zip(grad.iter()).map(|(x, g)| x - step * g).collect();
        w = project_simplex(&trial);
        let next = state.objective(&w, epsilon)?;
        stationarity = (next - obj).abs() / next.abs().max(1.0);
        obj = next;
    }
    Ok(PgdResult {
        weights: w,
        objective: obj,
        iterations,
        stationarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::linear::LinearToyConfig;
    use rand::Rng;

    fn toy() -> LinearToy {
        LinearToy::generate(&LinearToyConfig {
            d: 5,
            n_source_real: 8,
            n_source_synth: 7,
            n_target: 12,
            n_val: 10,
            lr: 0.05,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_weights_zero_terms() {
        let t = toy();
        let terms = robust_linear_terms(&vec![0.0; t.n()], &t, &t.theta0, 0.1).unwrap();
        assert_eq!(terms.a_w.norm(), 0.0);
        assert_eq!(terms.b_w.norm(), 0.0);
    }

    #[test]
    fn perturbation_identity() {
        let t = toy();
        let mut r = crate::rng::trial_rng(2, 0);
        let w: Vec<f64> = (0..t.n()).map(|_| r.random_range(0.0..2.0)).collect();
        let base = RobustState::new(&t, &t.theta0);
        let terms = base.terms(&w, 0.0).unwrap();
        let f0 = base.f(&w).unwrap();
        for _ in 0..100 {
            let d = DVector::from_fn(5, |_, _| r.random_range(-0.5..0.5));
            let shifted = RobustState::new(&t, &(&t.theta0 + &d));
            let lhs = shifted.f(&w).unwrap() - f0;
            let rhs = terms.a_w.dot(&d) + d.dot(&(&terms.b_w * &d));
            assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn zero_eta_reduces() {
        let t = LinearToy::generate(&LinearToyConfig { lr: 0.0, ..toy().cfg }).unwrap();
        let w = vec![1.0; t.n()];
        let s = RobustState::new(&t, &t.theta0);
        let terms = s.terms(&w, 0.0).unwrap();
        let h_w = s.h_w(&w);
        let gw = s.g_t_times(&w);
        let a = -(&h_w * &s.g_t) - &s.h_t * gw;
        assert!((terms.a_w - a).norm() < 1e-10);
        assert!((terms.b_w + &s.h_t * h_w).norm() < 1e-10);
    }

    #[test]
    fn objective_reductions() {
        let t = toy();
        let w = vec![1.0; t.n()];
        let s = RobustState::new(&t, &t.theta0);
        assert_eq!(
            robust_linear_objective(&w, 0.0, &t, &t.theta0).unwrap(),
            s.f(&w).unwrap()
        );
        let zero = vec![0.0; t.n()];
        assert_eq!(s.objective(&zero, 3.0).unwrap(), s.f(&zero).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = toy();
        let s = RobustState::new(&t, &t.theta0);
        let mut r = crate::rng::trial_rng(3, 0);
        let w: Vec<f64> = (0..t.n()).map(|_| r.random_range(0.2..2.0)).collect();
        for eps in [0.0, 1e-3, 0.1] {
            let g = s.gradient(&w, eps).unwrap();
            for i in 0..t.n() {
                let mut up = w.clone();
                let mut dn = w.clone();
                up[i] += 1e-6;
                dn[i] -= 1e-6;
                let fd = (s.objective(&up, eps).unwrap() - s.objective(&dn, eps).unwrap()) / 2e-6;
                assert!(
                    (g[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "eps {eps} i {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn surrogate_consistency() {
        let t = toy();
        let s = RobustState::new(&t, &t.theta0);
        let obj = t.influence(&t.theta0).unwrap();
        let w: Vec<f64> = (0..t.n()).map(|i| i as f64 * 0.1).collect();
        let want = crate::influence::eval_f(&w, &obj).unwrap();
        assert!((s.f(&w).unwrap() - want).abs() < 1e-10 * (1.0 + want.abs()));
    }

    #[test]
    fn projection_is_feasible() {
        let w = project_simplex(&[3.0, -1.0, 0.5, 0.2]);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }
}
