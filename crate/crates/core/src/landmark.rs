//! Landmark approximation: every source gradient is modelled as a linear
//! combination of a few exactly computed landmark gradients, with coefficients
//! fitted on cheap embeddings.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{self, InfluenceObjects, Order, TargetGradient};
use crate::linalg;
use crate::matstore::{self, Dtype, GradientMatrix, IndexList, Role, ZeroPolicy};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    LinearLstsq,
    RbfKrr,
}

pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct LandmarkModel {
    pub landmark_indices: IndexList,
    /// `n x l` coefficient matrix.
    pub coefficients: GradientMatrix,
    pub kernel: Kernel,
    pub gamma: Option<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    indices: IndexList,
    kernel: Kernel,
    gamma: Option<f64>,
    delta: f64,
}

impl LandmarkModel {
    pub fn n(&self) -> usize {
        self.coefficients.rows()
    }

    pub fn ell(&self) -> usize {
        self.coefficients.cols()
    }

    /// Writes `C` as a matrix file and the rest as a JSON sidecar.
    pub fn save(&self, coeff_path: &Path, sidecar_path: &Path) -> Result<()> {
        matstore::write_matrix(&self.coefficients, coeff_path, Dtype::F64)?;
        let side = Sidecar {
            indices: self.landmark_indices.clone(),
            kernel: self.kernel,
            gamma: self.gamma,
            delta: self.delta,
        };
        let text = serde_json::to_string_pretty(&side)?;
        std::fs::write(sidecar_path, text + "\n").map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn load(coeff_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let coefficients = matstore::read_matrix(coeff_path, Role::Embedding)?;
        let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        if side.indices.len() != coefficients.cols() {
            return Err(Error::dims(
                "landmark sidecar indices",
                coefficients.cols(),
                side.indices.len(),
            ));
        }
        Ok(Self {
            landmark_indices: side.indices,
            coefficients,
            kernel: side.kernel,
            gamma: side.gamma,
            delta: side.delta,
        })
    }
}

/// `ell` distinct indices in `0..n`, uniform without replacement, sorted.
pub fn pick_landmarks(n: usize, ell: usize, seed: u64) -> Result<IndexList> {
    if ell == 0 || ell > n {
        return Err(Error::invalid(format!("landmark count {ell} must be in [1, {n}]")));
    }
    let mut r = rng::stream(seed, Stream::Landmarks);
    let mut idx = index::sample(&mut r, n, ell).into_vec();
    idx.sort_unstable();
    Ok(IndexList::from_usize(idx))
}

/// Median heuristic `1 / (2 median^2)` over pairwise distances of the rows.
/// Falls back to 1 for a single row or a zero median.
pub fn median_gamma(e_l: &GradientMatrix) -> f64 {
    let l = e_l.rows();
    let mut dists = Vec::with_capacity(l * l.saturating_sub(1) / 2);
    for i in 0..l {
        for j in (i + 1)..l {
            dists.push(linalg::sq_dist(e_l.row(i), e_l.row(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if med > 0.0 {
        1.0 / (2.0 * med * med)
    } else {
        1.0
    }
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * linalg::sq_dist(a, b)).exp()
}

/// Fits `C` so that `C E_L` approximates `E_S` (linear) or by kernel ridge
/// regression on an RBF kernel. `gamma = None` picks the median heuristic.
/// The returned model has empty landmark indices; see [`fit_landmarks`].
pub fn fit_coefficients(
    e_s: &GradientMatrix,
    e_l: &GradientMatrix,
    kernel: Kernel,
    gamma: Option<f64>,
    delta: f64,
) -> Result<LandmarkModel> {
    if e_s.cols() != e_l.cols() {
        return Err(Error::dims("source vs landmark embedding dim", e_l.cols(), e_s.cols()));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!(
            "dampening must be finite and >= 0, got {delta}"
        )));
    }
    let l = e_l.rows();
    let gamma = match kernel {
        Kernel::LinearLstsq => None,
        Kernel::RbfKrr => {
            let g = gamma.unwrap_or_else(|| median_gamma(e_l));
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::invalid(format!("rbf gamma must be positive, got {g}")));
            }
            Some(g)
        }
    };
    let k = |a: &[f64], b: &[f64]| match gamma {
        Some(g) => rbf(a, b, g),
        None => linalg::dot(a, b),
    };
    let mut block = DMatrix::from_fn(l, l, |i, j| k(e_l.row(i), e_l.row(j)));
    for i in 0..l {
        block[(i, i)] += delta;
    }
    let chol = linalg::cholesky(block, "landmark kernel block")
        .map_err(|_| Error::Singular(format!("landmark kernel block is singular (delta = {delta})")))?;
    if delta == 0.0 && linalg::cholesky_condition_estimate(&chol) > crate::qpsolve::MAX_CONDITION {
        return Err(Error::Singular(
            "landmark kernel block is numerically singular with delta = 0".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..e_s.rows())
        .into_par_iter()
        .map(|i| {
            let rhs = DVector::from_iterator(l, (0..l).map(|j| k(e_s.row(i), e_l.row(j))));
            chol.solve(&rhs).iter().copied().collect()
        })
        .collect();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let coefficients = GradientMatrix::new(e_s.rows(), l, data, Role::Embedding)
        .map_err(|_| Error::Singular("landmark coefficients are not finite".into()))?;
    Ok(LandmarkModel {
        landmark_indices: IndexList::new(Vec::new()),
        coefficients,
        kernel,
        gamma,
        delta,
    })
}

/// Fits against the rows of `e_s` listed in `landmarks`.
pub fn fit_landmarks(
    e_s: &GradientMatrix,
    landmarks: &IndexList,
    kernel: Kernel,
    gamma: Option<f64>,
    delta: f64,
) -> Result<LandmarkModel> {
    let e_l = e_s.select_rows(landmarks)?;
    let mut model = fit_coefficients(e_s, &e_l, kernel, gamma, delta)?;
    model.landmark_indices = landmarks.clone();
    Ok(model)
}

/// `G_hat = C G_L`. Rows are left unnormalized.
pub fn approx_gradients(model: &LandmarkModel, g_l: &GradientMatrix) -> Result<GradientMatrix> {
    let l = model.ell();
    if g_l.rows() != l {
        return Err(Error::dims("landmark gradient rows", l, g_l.rows()));
    }
    let d = g_l.cols();
    let c = &model.coefficients;
    let mut data = vec![0.0; model.n() * d];
    data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        for (j, &cij) in c.row(i).iter().enumerate() {
            if cij != 0.0 {
                for (o, &g) in out.iter_mut().zip(g_l.row(j)) {
                    *o += cij * g;
                }
            }
        }
    });
    GradientMatrix::new(model.n(), d, data, Role::Source)
}

/// Propagates landmark influence to all samples: `p_hat = C p(L)` and, when
/// the target carries a Hessian and `order` is second, `Q_hat = (l/n) C Q(L) C^T`
/// where `Q(L)` already carries its own `1/l`.
pub fn approx_influence(
    model: &LandmarkModel,
    g_l: &GradientMatrix,
    g_t: &TargetGradient,
    normalize: bool,
    eta: f64,
    order: Order,
) -> Result<InfluenceObjects> {
    let l = model.ell();
    if g_l.rows() != l {
        return Err(Error::dims("landmark gradient rows", l, g_l.rows()));
    }
    let local = influence::influence_objects(g_l, g_t, normalize, eta, order)?;
    let c = model.coefficients.to_dmatrix();
    let p_hat: Vec<f64> = (&c * DVector::from_column_slice(&local.p)).iter().copied().collect();
    match local.q {
        Some(q_l) if order == Order::Second => {
            let mut q = &c * q_l * c.transpose();
            q *= l as f64 / model.n() as f64;
            linalg::symmetrize(&mut q);
            InfluenceObjects::second_order(p_hat, q, eta)
        }
        _ => Ok(InfluenceObjects {
            eta,
            ..InfluenceObjects::first_order(p_hat)
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub mean_cosine: f64,
    pub cosines: Vec<f64>,
    /// `mean_i |g_hat_i - g_i|^2`.
    pub mse: f64,
}

pub fn recovery_report(g_true: &GradientMatrix, g_hat: &GradientMatrix) -> Result<RecoveryReport> {
    if g_true.rows() != g_hat.rows() || g_true.cols() != g_hat.cols() {
        return Err(Error::dims(
            "recovery report shapes",
            g_true.rows() * g_true.cols(),
            g_hat.rows() * g_hat.cols(),
        ));
    }
    let cosines: Vec<f64> = (0..g_true.rows())
        .map(|i| linalg::cosine(g_true.row(i), g_hat.row(i)))
        .collect();
    let errs: Vec<f64> = (0..g_true.rows())
        .map(|i| linalg::sq_dist(g_true.row(i), g_hat.row(i)))
        .collect();
    let n = cosines.len() as f64;
    Ok(RecoveryReport {
        mean_cosine: linalg::pairwise_sum(&cosines) / n,
        mse: linalg::pairwise_sum(&errs) / n,
        cosines,
    })
}

/// Synthetic low-rank data: unit gradients `normalize(U z / sqrt(r) + sigma xi / sqrt(d))`
/// and embeddings sharing the latent `z` through a second orthonormal basis.
#[derive(Debug, Clone)]
pub struct LowRankConfig {
    pub n: usize,
    pub d: usize,
    pub rank: usize,
    pub embed_dim: usize,
    pub sigma: f64,
    pub sigma_embed: f64,
    pub seed: u64,
}

impl Default for LowRankConfig {
    fn default() -> Self {
        Self {
            n: 1024,
            d: 2048,
            rank: 32,
            embed_dim: 128,
            sigma: 0.1,
            sigma_embed: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LowRankData {
    pub gradients: GradientMatrix,
    pub embeddings: GradientMatrix,
}

fn orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    a.qr().q()
}

pub fn low_rank_data(cfg: &LowRankConfig) -> Result<LowRankData> {
    if cfg.rank == 0 || cfg.rank > cfg.d.min(cfg.embed_dim) || cfg.n == 0 {
        return Err(Error::invalid(
            "low-rank config needs 1 <= rank <= min(d, embed_dim) and n >= 1",
        ));
    }
    let mut r = rng::stream(cfg.seed, Stream::ToyData);
    let u = orthonormal(cfg.d, cfg.rank, &mut r);
    let v = orthonormal(cfg.embed_dim, cfg.rank, &mut r);
    let z = DMatrix::from_fn(cfg.rank, cfg.n, |_, _| r.sample::<f64, _>(StandardNormal)) / (cfg.rank as f64).sqrt();
    let mut noisy = |basis: &DMatrix<f64>, sigma: f64| {
        let dim = basis.nrows();
        let mut m = basis * &z;
        let scale = sigma / (dim as f64).sqrt();
        for x in m.iter_mut() {
            *x += scale * r.sample::<f64, _>(StandardNormal);
        }
        m.transpose()
    };
    let g = noisy(&u, cfg.sigma);
    let e = noisy(&v, cfg.sigma_embed);
    let gradients = matstore::normalize_rows(&GradientMatrix::from_dmatrix(&g, Role::Source)?, ZeroPolicy::Error)?;
    let embeddings = matstore::normalize_rows(&GradientMatrix::from_dmatrix(&e, Role::Embedding)?, ZeroPolicy::Error)?;
    Ok(LowRankData { gradients, embeddings })
}
