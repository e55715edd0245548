//! Weight solvers for
//!
//! ```text
//! minimize  -p^T w + (eta/2) w^T Q w + (lambda/2) |w|^2
//! subject to w >= 0, sum(w) = n
//! ```
//!
//! plus the unconstrained closed form, lambda tuning to an exact support size,
//! and the final subset selection. Ties are always broken toward the lowest
//! index.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::InfluenceObjects;
use crate::linalg;
use crate::matstore::{GradientMatrix, IndexList};

/// Weights below this are reported as exactly zero.
pub const ZERO_CLAMP: f64 = 1e-12;

/// Condition number above which `Q` is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    pub lambda: f64,
    pub tau: f64,
    pub weights: Vec<f64>,
    pub support: Vec<usize>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl WeightSolution {
    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weight solution serializes")
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: Vec<f64>,
    pub q: Option<DMatrix<f64>>,
    pub eta: f64,
    pub lambda: f64,
}

impl QpProblem {
    pub fn from_objects(obj: &InfluenceObjects, lambda: f64) -> Self {
        Self {
            p: obj.p.clone(),
            q: obj.q.clone(),
            eta: obj.eta,
            lambda,
        }
    }

    /// `R = eta Q + lambda I`.
    pub fn regularized_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.p.len();
        let mut r = DMatrix::identity(n, n) * self.lambda;
        if let Some(q) = &self.q {
            if q.nrows() != n || q.ncols() != n {
                return Err(Error::dims("Q matrix", n, q.nrows()));
            }
            r += q * self.eta;
        }
        Ok(r)
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        let wv = linalg::vec_from(w);
        let mut val = -linalg::dot(&self.p, w) + 0.5 * self.lambda * wv.norm_squared();
        if let Some(q) = &self.q {
            val += 0.5 * self.eta * wv.dot(&(q * &wv));
        }
        val
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite values")))
    }
}

/// Unconstrained minimizer `(1/eta) Q^{-1} p` via a symmetric eigensolve.
pub fn solve_unconstrained(obj: &InfluenceObjects) -> Result<Vec<f64>> {
    let (q, eig) = unconstrained_setup(obj)?;
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if max == 0.0 || max / min > MAX_CONDITION {
        return Err(Error::Singular(format!(
            "Q condition estimate {:e} exceeds {MAX_CONDITION:e}",
            if max == 0.0 { f64::INFINITY } else { max / min }
        )));
    }
    let _ = q;
    Ok(apply_pinv(&eig, &obj.p, 0.0, obj.eta))
}

/// Minimum-norm minimizer `(1/eta) Q^+ p`, eigenvalues below
/// `rcond * max|eig|` treated as zero. Equals [`solve_unconstrained`] when `Q`
/// is well conditioned.
pub fn solve_unconstrained_min_norm(obj: &InfluenceObjects, rcond: f64) -> Result<Vec<f64>> {
    let (_, eig) = unconstrained_setup(obj)?;
    let cutoff = rcond * eig.eigenvalues.amax();
    Ok(apply_pinv(&eig, &obj.p, cutoff, obj.eta))
}

fn unconstrained_setup(obj: &InfluenceObjects) -> Result<(&DMatrix<f64>, SymmetricEigen<f64, nalgebra::Dyn>)> {
    let q = obj
        .q
        .as_ref()
        .ok_or_else(|| Error::invalid("unconstrained solve needs Q"))?;
    if !(obj.eta > 0.0) {
        return Err(Error::invalid(format!("eta must be positive, got {}", obj.eta)));
    }
    if q.nrows() != obj.p.len() {
        return Err(Error::dims("Q matrix", obj.p.len(), q.nrows()));
    }
    check_finite(&obj.p, "p")?;
    Ok((q, SymmetricEigen::new(q.clone())))
}

fn apply_pinv(eig: &SymmetricEigen<f64, nalgebra::Dyn>, p: &[f64], cutoff: f64, eta: f64) -> Vec<f64> {
    let v = &eig.eigenvectors;
    let coeffs = v.transpose() * DVector::from_column_slice(p);
    let scaled = DVector::from_iterator(
        coeffs.len(),
        coeffs
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(c, &l)| if l.abs() <= cutoff { 0.0 } else { c / (l * eta) }),
    );
    (v * scaled).iter().copied().collect()
}

/// Indices sorted by descending score, ties toward the lower index.
pub fn descending_order(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn finish(mut w: Vec<f64>, lambda: f64, tau: f64, iterations: usize, rw: &[f64], p: &[f64]) -> WeightSolution {
    for x in &mut w {
        if *x < ZERO_CLAMP {
            *x = 0.0;
        }
    }
    let support = w.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(i, _)| i).collect();
    let kkt_residual = kkt_residual(&w, p, rw, tau);
    WeightSolution {
        lambda,
        tau,
        weights: w,
        support,
        iterations,
        kkt_residual,
    }
}

/// Scaled KKT violation of `(w, tau)` given `rw = R w`.
///
/// Combines stationarity on the support, dual feasibility
/// (`alpha = Rw - p - tau >= 0`) off the support, complementarity, primal
/// feasibility and the sum constraint, all divided by
/// `max(1, |p|_inf, |Rw|_inf)`.
pub fn kkt_residual(w: &[f64], p: &[f64], rw: &[f64], tau: f64) -> f64 {
    let n = w.len() as f64;
    let scale = p.iter().chain(rw).fold(1.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let alpha = rw[i] - p[i] - tau;
        let v = if w[i] > 0.0 { alpha.abs() } else { (-alpha).max(0.0) };
        worst = worst.max(v / scale);
        worst = worst.max((-w[i]).max(0.0));
    }
    let sum = linalg::pairwise_sum(w);
    worst.max((sum - n).abs() / n)
}

/// Exact solution with the quadratic `Q` term dropped, by a sorted scan.
///
/// `lambda = 0` puts all mass on the largest score (lowest index on ties).
pub fn solve_first_order(p: &[f64], lambda: f64) -> Result<WeightSolution> {
    let n = p.len();
    if n == 0 {
        return Err(Error::invalid("empty score vector"));
    }
    check_finite(p, "p")?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let nf = n as f64;
    if lambda == 0.0 {
        let best = argmax(p);
        let mut w = vec![0.0; n];
        w[best] = nf;
        let tau = -p[best];
        let rw = vec![0.0; n];
        return Ok(finish(w, 0.0, tau, 1, &rw, p));
    }
    let order = descending_order(p);
    let budget = nf * lambda;
    let mut prefix = 0.0;
    let mut tau = budget - p[order[0]];
    for (k, &i) in order.iter().enumerate() {
        prefix += p[i];
        let cand = (budget - prefix) / (k + 1) as f64;
        if p[i] + cand > 0.0 {
            tau = cand;
        } else {
            break;
        }
    }
    let w: Vec<f64> = p.iter().map(|&pi| ((pi + tau) / lambda).max(0.0)).collect();
    let rw: Vec<f64> = w.iter().map(|x| x * lambda).collect();
    Ok(finish(w, lambda, tau, 1, &rw, p))
}

struct Subproblem {
    w: Vec<f64>,
    tau: f64,
}

/// Minimizes over the free set `B` with `w_A = 0` and `sum(w_B) = n`.
fn solve_on_free(r: &DMatrix<f64>, p: &[f64], free: &[usize]) -> Result<Subproblem> {
    let n = p.len();
    let m = free.len();
    if m == 0 {
        return Err(Error::Singular("active set emptied the free set".into()));
    }
    let rbb = DMatrix::from_fn(m, m, |a, b| r[(free[a], free[b])]);
    let chol = linalg::cholesky(rbb, "R restricted to the free set")?;
    let pb = DVector::from_iterator(m, free.iter().map(|&i| p[i]));
    let x = chol.solve(&pb);
    let y = chol.solve(&DVector::from_element(m, 1.0));
    let tau = (n as f64 - x.sum()) / y.sum();
    let mut w = vec![0.0; n];
    for (a, &i) in free.iter().enumerate() {
        w[i] = x[a] + tau * y[a];
    }
    Ok(Subproblem { w, tau })
}

fn mat_vec(r: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    (r * linalg::vec_from(w)).iter().copied().collect()
}

/// Primal-dual active-set solver for `R = eta Q + lambda I` positive definite.
///
/// Starts from `w = 1` with every index free and moves all violating indices
/// per iteration. If that has not settled after `10 n` iterations, it restarts
/// with a primal feasible active-set method that changes one index at a time.
pub fn solve_active_set(prob: &QpProblem) -> Result<WeightSolution> {
    let n = prob.p.len();
    if n == 0 {
        return Err(Error::invalid("empty score vector"));
    }
    check_finite(&prob.p, "p")?;
    if !(prob.lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be > 0, got {}", prob.lambda)));
    }
    if !(prob.eta >= 0.0) {
        return Err(Error::invalid(format!("eta must be >= 0, got {}", prob.eta)));
    }
    let r = prob.regularized_matrix()?;
    linalg::cholesky(r.clone(), "eta Q + lambda I")?;

    let scale = prob.p.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let cap = 10 * n;
    let mut free = vec![true; n];
    let mut last_support = n;
    for it in 1..=cap {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        last_support = idx.len();
        let sub = solve_on_free(&r, &prob.p, &idx)?;
        let wscale = sub.w.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let rw = mat_vec(&r, &sub.w);
        let mut changed = false;
        let mut next = free.clone();
        for i in 0..n {
            if free[i] {
                if sub.w[i] < -1e-13 * wscale {
                    next[i] = false;
                    changed = true;
                }
            } else {
                let alpha = rw[i] - prob.p[i] - sub.tau;
                if alpha < -1e-13 * scale {
                    next[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(finish(sub.w, prob.lambda, sub.tau, it, &rw, &prob.p));
        }
        if !next.iter().any(|&f| f) {
            break;
        }
        free = next;
    }
    let _ = last_support;
    solve_primal_active_set(prob, &r, cap)
}

/// Feasible-point active-set method with single index moves.
fn solve_primal_active_set(prob: &QpProblem, r: &DMatrix<f64>, offset: usize) -> Result<WeightSolution> {
    let n = prob.p.len();
    let cap = 50 * n + 100;
    let scale = prob.p.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut w = vec![1.0; n];
    let mut free = vec![true; n];
    for it in 1..=cap {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let sub = solve_on_free(r, &prob.p, &idx)?;
        let dir: Vec<f64> = sub.w.iter().zip(&w).map(|(a, b)| a - b).collect();
        let dmax = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dmax <= 1e-14 * w.iter().fold(1.0f64, |m, v| m.max(v.abs())) {
            let rw = mat_vec(r, &sub.w);
            let mut worst: Option<(usize, f64)> = None;
            for i in (0..n).filter(|&i| !free[i]) {
                let alpha = rw[i] - prob.p[i] - sub.tau;
                if alpha < -1e-13 * scale && worst.is_none_or(|(_, a)| alpha < a) {
                    worst = Some((i, alpha));
                }
            }
            match worst {
                None => return Ok(finish(sub.w, prob.lambda, sub.tau, offset + it, &rw, &prob.p)),
                Some((j, _)) => {
                    w = sub.w;
                    free[j] = true;
                }
            }
            continue;
        }
        let mut step = 1.0;
        let mut blocking = None;
        for &i in &idx {
            if dir[i] < 0.0 {
                let t = -w[i] / dir[i];
                if t < step {
                    step = t;
                    blocking = Some(i);
                }
            }
        }
        for i in 0..n {
            w[i] += step * dir[i];
        }
        if let Some(j) = blocking {
            w[j] = 0.0;
            free[j] = false;
        }
    }
    Err(Error::IterationCap {
        cap: offset + cap,
        last_support: free.iter().filter(|&&f| f).count(),
    })
}

/// Result of tuning lambda to a target support size.
#[derive(Debug, Clone)]
pub struct TunedLambda {
    pub lambda: f64,
    pub solution: WeightSolution,
    /// False when ties in `p` make a support of exactly `k` unattainable; the
    /// solution then has the smallest attainable support above `k`.
    pub exact: bool,
}

/// Finds lambda whose first-order solution has exactly `k` nonzero weights.
///
/// The support grows monotonically with lambda in the first-order problem, so
/// a geometric bracket followed by bisection (at most `max_iters` steps)
/// locates it. If bisection runs out, the threshold interval is computed
/// directly from the sorted scores.
pub fn tune_lambda(p: &[f64], k: usize, max_iters: usize) -> Result<TunedLambda> {
    let n = p.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("budget k = {k} must be in [1, {n}]")));
    }
    check_finite(p, "p")?;
    let support = |lambda: f64| solve_first_order(p, lambda).map(|s| (s.support_len(), s));

    let spread = p.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - p.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let mut hi = if spread > 0.0 { spread / n as f64 } else { 1.0 };
    let mut lo = 0.0;
    let (mut hi_size, mut hi_sol) = support(hi)?;
    let mut grow = 0;
    while hi_size < k {
        lo = hi;
        hi *= 2.0;
        (hi_size, hi_sol) = support(hi)?;
        grow += 1;
        if grow > 4000 {
            return Err(Error::Singular("lambda bracket failed to grow".into()));
        }
    }
    if hi_size == k {
        return Ok(TunedLambda {
            lambda: hi,
            solution: hi_sol,
            exact: true,
        });
    }
    for _ in 0..max_iters {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let (size, sol) = support(mid)?;
        if size == k {
            return Ok(TunedLambda {
                lambda: mid,
                solution: sol,
                exact: true,
            });
        }
        if size < k {
            lo = mid;
        } else {
            hi = mid;
            hi_sol = sol;
        }
    }
    if let Some(lambda) = analytic_lambda(p, k) {
        let (size, sol) = support(lambda)?;
        if size == k {
            return Ok(TunedLambda {
                lambda,
                solution: sol,
                exact: true,
            });
        }
    }
    if k == 1 {
        let sol = solve_first_order(p, 0.0)?;
        return Ok(TunedLambda {
            lambda: 0.0,
            solution: sol,
            exact: true,
        });
    }
    Ok(TunedLambda {
        lambda: hi,
        solution: hi_sol,
        exact: false,
    })
}

/// Midpoint of the open interval of lambda giving support `k`, if nonempty.
///
/// Support is at least `k` iff `n lambda > s_k - k p_(k)` with `s_k` the sum of
/// the top `k` scores.
fn analytic_lambda(p: &[f64], k: usize) -> Option<f64> {
    let order = descending_order(p);
    let n = p.len() as f64;
    let threshold = |k: usize| -> f64 {
        let top: f64 = order[..k].iter().map(|&i| p[i]).sum();
        top - k as f64 * p[order[k - 1]]
    };
    let lo = threshold(k);
    let hi = if k == p.len() {
        lo + 1.0 + lo.abs()
    } else {
        threshold(k + 1)
    };
    (hi > lo).then(|| 0.5 * (lo + hi) / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    Average,
    RoundRobin,
}

/// Outcome of [`select`]: the chosen indices and, for average mode, the tuned
/// weights that produced them.
#[derive(Debug, Clone)]
pub struct Selection {
    pub indices: IndexList,
    pub tuned: Option<TunedLambda>,
}

/// Average mode: tune lambda on the target-averaged scores and return the
/// support (ascending). Round-robin: cycle the target rows in order, each
/// taking its best remaining source index.
pub fn select(scores: &GradientMatrix, k: usize, mode: SelectMode, max_iters: usize) -> Result<Selection> {
    let n = scores.cols();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("budget k = {k} must be in [1, {n}]")));
    }
    match mode {
        SelectMode::Average => {
            let p = scores.mean_row();
            let (indices, tuned) = select_average(&p, k, max_iters)?;
            Ok(Selection {
                indices,
                tuned: Some(tuned),
            })
        }
        SelectMode::RoundRobin => Ok(Selection {
            indices: round_robin(scores, k),
            tuned: None,
        }),
    }
}

/// Tunes lambda on `p` and returns exactly `k` indices in ascending order,
/// truncating by descending `p` when ties make `k` unattainable.
pub fn select_average(p: &[f64], k: usize, max_iters: usize) -> Result<(IndexList, TunedLambda)> {
    let tuned = tune_lambda(p, k, max_iters)?;
    let mut chosen = tuned.solution.support.clone();
    if chosen.len() > k {
        let mut ranked = chosen.clone();
        ranked.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        ranked.truncate(k);
        ranked.sort_unstable();
        chosen = ranked;
    }
    Ok((IndexList::from_usize(chosen), tuned))
}

fn round_robin(scores: &GradientMatrix, k: usize) -> IndexList {
    let n = scores.cols();
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k);
    let mut j = 0;
    while out.len() < k {
        let row = scores.row(j % scores.rows());
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !taken[i] && best.is_none_or(|b| row[i] > row[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k <= n leaves an unselected index");
        taken[b] = true;
        out.push(b);
        j += 1;
    }
    IndexList::from_usize(out)
}
