//! Influence objects: the score vector `p = G_S g_T`, the coupling matrix
//! `Q = (1/n) G_S H_T G_S^T`, their Adam-preconditioned variants, and the
//! quadratic surrogate `f(w) = -p^T w + (eta/2) w^T Q w`.
//!
//! `f` is the change in mean target loss after one weighted gradient step of
//! size `eta`, scaled by `n / eta`, to second order.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::matstore::{normalize_rows, normalize_vec, GradientMatrix, Role, ZeroPolicy};

/// Symmetry tolerance for Hessians, relative to `max(1, max|h|)`.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Largest Hessian dimension accepted; dense `d x d` storage only.
pub const MAX_HESSIAN_DIM: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    Second,
}

/// Target-side gradient `g_T` and, optionally, the dense Hessian `H_T`.
#[derive(Debug, Clone)]
pub struct TargetGradient {
    g: Vec<f64>,
    h: Option<DMatrix<f64>>,
}

impl TargetGradient {
    pub fn new(g: Vec<f64>, h: Option<DMatrix<f64>>) -> Result<Self> {
        if g.is_empty() {
            return Err(Error::EmptyMatrix { rows: 1, cols: 0 });
        }
        if let Some(h) = &h {
            check_hessian(h, g.len())?;
        }
        Ok(Self { g, h })
    }

    /// Mean of per-sample target gradients. With `normalize`, each sample is
    /// unit-normalized before averaging and the mean is re-normalized.
    pub fn from_rows(g_t: &GradientMatrix, normalize: bool) -> Result<Self> {
        let g = if normalize {
            let unit = normalize_rows(g_t, ZeroPolicy::Keep)?;
            normalize_vec(&unit.mean_row())
        } else {
            g_t.mean_row()
        };
        Self::new(g, None)
    }

    pub fn with_hessian(mut self, h: DMatrix<f64>) -> Result<Self> {
        check_hessian(&h, self.g.len())?;
        self.h = Some(h);
        Ok(self)
    }

    pub fn gradient(&self) -> &[f64] {
        &self.g
    }

    pub fn hessian(&self) -> Option<&DMatrix<f64>> {
        self.h.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }
}

fn check_hessian(h: &DMatrix<f64>, d: usize) -> Result<()> {
    if h.nrows() != d || h.ncols() != d {
        return Err(Error::dims("target hessian", d, h.nrows().max(h.ncols())));
    }
    if d > MAX_HESSIAN_DIM {
        return Err(Error::invalid(format!(
            "dense hessian of dimension {d} exceeds {MAX_HESSIAN_DIM}"
        )));
    }
    linalg::check_symmetric(h, SYMMETRY_TOL)
}

#[derive(Debug, Clone)]
pub struct InfluenceObjects {
    pub p: Vec<f64>,
    pub q: Option<DMatrix<f64>>,
    pub eta: f64,
    pub order: Order,
}

impl InfluenceObjects {
    pub fn first_order(p: Vec<f64>) -> Self {
        Self {
            p,
            q: None,
            eta: 0.0,
            order: Order::First,
        }
    }

    pub fn second_order(p: Vec<f64>, q: DMatrix<f64>, eta: f64) -> Result<Self> {
        if q.nrows() != p.len() || q.ncols() != p.len() {
            return Err(Error::dims("Q matrix", p.len(), q.nrows()));
        }
        Ok(Self {
            p,
            q: Some(q),
            eta,
            order: Order::Second,
        })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Preconditioner state of Adam after warm-up.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Warm-up steps already taken (`s >= 1`).
    pub steps: u32,
}

impl AdamState {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.m.len() != d {
            return Err(Error::dims("adam first moment", d, self.m.len()));
        }
        if self.v.len() != d {
            return Err(Error::dims("adam second moment", d, self.v.len()));
        }
        if let Some(index) = self.v.iter().position(|&x| x < 0.0) {
            return Err(Error::NegativeMoment {
                index,
                value: self.v[index],
            });
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) && !(name == "beta1" && b == 0.0) {
                return Err(Error::invalid(format!("{name} = {b} outside (0, 1)")));
            }
        }
        if self.eps < 0.0 {
            return Err(Error::invalid(format!("eps = {} is negative", self.eps)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("adam warm-up step count must be >= 1"));
        }
        Ok(())
    }

    /// Per-coordinate scale `a` and offset `b` of the frozen-moment Adam step.
    pub fn scale_and_offset(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(s);
        let c2 = 1.0 - self.beta2.powi(s);
        let mut a = Vec::with_capacity(self.v.len());
        let mut b = Vec::with_capacity(self.v.len());
        for (j, (&mj, &vj)) in self.m.iter().zip(&self.v).enumerate() {
            let denom = c1 * ((vj / c2).sqrt() + self.eps);
            if denom <= 0.0 || !denom.is_finite() {
                return Err(Error::invalid(format!(
                    "adam denominator vanishes at coordinate {j} (v = {vj}, eps = {})",
                    self.eps
                )));
            }
            a.push((1.0 - self.beta1) / denom);
            b.push(self.beta1 * mj / denom);
        }
        Ok((a, b))
    }
}

fn p_unchecked(g_s: &GradientMatrix, g: &[f64]) -> Vec<f64> {
    (0..g_s.rows())
        .into_par_iter()
        .map(|i| linalg::dot(g_s.row(i), g))
        .collect()
}

/// `p_i = <g_i, g_T>`, optionally on unit-normalized rows and target.
pub fn compute_p(g_s: &GradientMatrix, g_t: &TargetGradient, normalize: bool) -> Result<Vec<f64>> {
    if g_s.cols() != g_t.dim() {
        return Err(Error::dims("source gradient vs target gradient", g_s.cols(), g_t.dim()));
    }
    if normalize {
        let unit = normalize_rows(g_s, ZeroPolicy::Keep)?;
        Ok(p_unchecked(&unit, &normalize_vec(g_t.gradient())))
    } else {
        Ok(p_unchecked(g_s, g_t.gradient()))
    }
}

/// `Q = (1/n) G_S H_T G_S^T`, symmetrized.
pub fn compute_q(g_s: &GradientMatrix, h_t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_hessian(h_t, g_s.cols())?;
    Ok(q_unchecked(&g_s.to_dmatrix(), h_t, g_s.rows()))
}

fn q_unchecked(g: &DMatrix<f64>, h: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let gh = g * h;
    let mut q = gh * g.transpose();
    q /= n as f64;
    linalg::symmetrize(&mut q);
    q
}

/// Builds `p` and, for second order, `Q` from source gradients and a target.
pub fn influence_objects(
    g_s: &GradientMatrix,
    g_t: &TargetGradient,
    normalize: bool,
    eta: f64,
    order: Order,
) -> Result<InfluenceObjects> {
    let p = compute_p(g_s, g_t, normalize)?;
    match order {
        Order::First => Ok(InfluenceObjects {
            eta,
            ..InfluenceObjects::first_order(p)
        }),
        Order::Second => {
            let h = g_t
                .hessian()
                .ok_or_else(|| Error::invalid("second-order objects need a target hessian"))?;
            let src = if normalize {
                normalize_rows(g_s, ZeroPolicy::Keep)?
            } else {
                g_s.clone()
            };
            let q = compute_q(&src, h)?;
            InfluenceObjects::second_order(p, q, eta)
        }
    }
}

/// `f(w) = -p^T w + (eta/2) w^T Q w`; the quadratic term is dropped for first order.
pub fn eval_f(w: &[f64], obj: &InfluenceObjects) -> Result<f64> {
    if w.len() != obj.p.len() {
        return Err(Error::dims("weights vs p", obj.p.len(), w.len()));
    }
    let linear = -linalg::dot(&obj.p, w);
    match (obj.order, &obj.q) {
        (Order::Second, Some(q)) => {
            let wv = linalg::vec_from(w);
            let quad = wv.dot(&(q * &wv));
            Ok(linear + 0.5 * obj.eta * quad)
        }
        (Order::Second, None) => Err(Error::invalid("second-order objects without Q")),
        (Order::First, _) => Ok(linear),
    }
}

/// Adam-aware objects with moments frozen after warm-up.
///
/// Every gradient row is scaled elementwise by `a`; the target gradient is
/// shifted by `-(eta/n) H_T b` when a Hessian is available.
pub fn compute_adam_objects(
    g_s: &GradientMatrix,
    g_t: &TargetGradient,
    adam: &AdamState,
    eta: f64,
    n: usize,
    order: Order,
) -> Result<InfluenceObjects> {
    let d = g_s.cols();
    if g_t.dim() != d {
        return Err(Error::dims("source gradient vs target gradient", d, g_t.dim()));
    }
    if n == 0 {
        return Err(Error::invalid("source size n must be positive"));
    }
    adam.validate(d)?;
    let (a, b) = adam.scale_and_offset()?;
    let scaled: Vec<f64> = g_s
        .row_iter()
        .flat_map(|row| row.iter().zip(&a).map(|(g, s)| g * s))
        .collect();
    let g_adam = GradientMatrix::new(g_s.rows(), d, scaled, Role::Source)?;

    let target = match g_t.hessian() {
        Some(h) => {
            let hb = h * DVector::from_column_slice(&b);
            let c = eta / n as f64;
            g_t.gradient().iter().zip(hb.iter()).map(|(g, x)| g - c * x).collect()
        }
        None => g_t.gradient().to_vec(),
    };
    let p = p_unchecked(&g_adam, &target);
    match order {
        Order::First => Ok(InfluenceObjects {
            eta,
            ..InfluenceObjects::first_order(p)
        }),
        Order::Second => {
            let h = g_t
                .hessian()
                .ok_or_else(|| Error::invalid("second-order adam objects need a target hessian"))?;
            let q = q_unchecked(&g_adam.to_dmatrix(), h, n);
            InfluenceObjects::second_order(p, q, eta)
        }
    }
}

/// `|T| x |S|` matrix whose row `j` is `p` computed against target sample `j`.
pub fn per_target_scores(g_s: &GradientMatrix, g_t: &GradientMatrix, normalize: bool) -> Result<GradientMatrix> {
    if g_s.cols() != g_t.cols() {
        return Err(Error::dims("source vs target gradient dim", g_s.cols(), g_t.cols()));
    }
    let (src, tgt) = if normalize {
        (
            normalize_rows(g_s, ZeroPolicy::Keep)?,
            normalize_rows(g_t, ZeroPolicy::Keep)?,
        )
    } else {
        (g_s.clone(), g_t.clone())
    };
    let rows: Vec<Vec<f64>> = (0..tgt.rows())
        .into_par_iter()
        .map(|j| p_unchecked(&src, tgt.row(j)))
        .collect();
    let data = rows.into_iter().flatten().collect();
    GradientMatrix::new(tgt.rows(), src.rows(), data, Role::Target)
}
