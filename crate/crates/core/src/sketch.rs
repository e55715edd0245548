//! Random projections for gradient vectors.
//!
//! Two methods: a dense Rademacher projection whose signs are streamed from a
//! counter-based hash, and a randomized Hadamard transform (sign flip, two-sided
//! Walsh-Hadamard, coordinate subsample) with optional pre-masking for inputs
//! too large for the transform.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matstore::{GradientMatrix, IndexList};
use crate::rng::{self, splitmix64, Stream};

/// Largest Hadamard side length. Two sides give `2^30` input entries.
pub const MAX_SIDE_LOG2: u32 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchMethod {
    Rademacher,
    Hadamard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub method: SketchMethod,
    pub in_dim: u64,
    pub out_dim: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premask_size: Option<u64>,
}

impl SketchSpec {
    pub fn new(method: SketchMethod, in_dim: u64, out_dim: u64, seed: u64) -> Self {
        Self {
            method,
            in_dim,
            out_dim,
            seed,
            premask_size: None,
        }
    }

    pub fn with_premask(mut self, size: u64) -> Self {
        self.premask_size = Some(size);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sketch spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Validates the spec and derives signs and index subsets.
    pub fn prepare(&self) -> Result<Sketcher> {
        Sketcher::new(self.clone())
    }
}

/// A validated spec with its derived random state.
#[derive(Debug, Clone)]
pub struct Sketcher {
    spec: SketchSpec,
    kind: Prepared,
}

#[derive(Debug, Clone)]
enum Prepared {
    Rademacher {
        key: u64,
        scale: f64,
    },
    Hadamard {
        premask: Option<Vec<usize>>,
        log2: u32,
        signs: Vec<bool>,
        subset: Vec<usize>,
        scale: f64,
    },
}

impl Sketcher {
    fn new(spec: SketchSpec) -> Result<Self> {
        let d = usize::try_from(spec.in_dim).map_err(|_| Error::invalid("in_dim too large"))?;
        let out = usize::try_from(spec.out_dim).map_err(|_| Error::invalid("out_dim too large"))?;
        if d == 0 {
            return Err(Error::invalid("in_dim must be positive"));
        }
        if out == 0 {
            return Err(Error::invalid("out_dim must be positive"));
        }
        let kind = match spec.method {
            SketchMethod::Rademacher => {
                if spec.premask_size.is_some() {
                    return Err(Error::invalid("premask applies to the hadamard method only"));
                }
                Prepared::Rademacher {
                    key: splitmix64(spec.seed ^ splitmix64(Stream::Rademacher as u64)),
                    scale: 1.0 / (out as f64).sqrt(),
                }
            }
            SketchMethod::Hadamard => {
                let premask = match spec.premask_size {
                    Some(m) => Some(premask_indices(spec.in_dim, m, spec.seed)?.to_usize()),
                    None => None,
                };
                let eff = premask.as_ref().map_or(d, Vec::len);
                let padded = eff.next_power_of_two();
                let log2 = padded.trailing_zeros();
                if log2 > 2 * MAX_SIDE_LOG2 {
                    return Err(Error::invalid(format!(
                        "input of {eff} entries exceeds the 2^{} transform limit; premask it",
                        2 * MAX_SIDE_LOG2
                    )));
                }
                if out > padded {
                    return Err(Error::invalid(format!(
                        "out_dim {out} exceeds padded dimension {padded}"
                    )));
                }
                let mut sign_rng = rng::stream(spec.seed, Stream::Signs);
                let signs = (0..padded).map(|_| rand::Rng::random::<bool>(&mut sign_rng)).collect();
                let mut subset_rng = rng::stream(spec.seed, Stream::Subset);
                let mut subset = index::sample(&mut subset_rng, padded, out).into_vec();
                subset.sort_unstable();
                let (m, n) = side_lengths(log2);
                let scale = 1.0 / ((m * n) as f64).sqrt() * (padded as f64 / out as f64).sqrt();
                Prepared::Hadamard {
                    premask,
                    log2,
                    signs,
                    subset,
                    scale,
                }
            }
        };
        Ok(Self { spec, kind })
    }

    pub fn spec(&self) -> &SketchSpec {
        &self.spec
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() as u64 != self.spec.in_dim {
            return Err(Error::dims("sketch input", self.spec.in_dim as usize, x.len()));
        }
        Ok(match &self.kind {
            Prepared::Rademacher { key, scale } => (0..self.spec.out_dim as usize)
                .map(|j| {
                    let mut row = vec![0u64; x.len().div_ceil(64)];
                    fill_sign_words(*key, j, &mut row);
                    signed_sum(&row, x) * scale
                })
                .collect(),
            Prepared::Hadamard { .. } => self.hadamard_one(x),
        })
    }

    pub fn project_rows(&self, g: &GradientMatrix) -> Result<GradientMatrix> {
        if g.cols() as u64 != self.spec.in_dim {
            return Err(Error::dims("sketch input", self.spec.in_dim as usize, g.cols()));
        }
        let out = self.spec.out_dim as usize;
        let rows = g.rows();
        let data = match &self.kind {
            Prepared::Rademacher { key, scale } => {
                // One sign row per output coordinate, shared across input rows.
                let words = g.cols().div_ceil(64);
                let columns: Vec<Vec<f64>> = (0..out)
                    .into_par_iter()
                    .map(|j| {
                        let mut signs = vec![0u64; words];
                        fill_sign_words(*key, j, &mut signs);
                        g.row_iter().map(|x| signed_sum(&signs, x) * scale).collect()
                    })
                    .collect();
                let mut data = vec![0.0; rows * out];
                for (j, col) in columns.iter().enumerate() {
                    for (i, v) in col.iter().enumerate() {
                        data[i * out + j] = *v;
                    }
                }
                data
            }
            Prepared::Hadamard { .. } => {
                let mut data = vec![0.0; rows * out];
                data.par_chunks_mut(out)
                    .enumerate()
                    .for_each(|(i, dst)| dst.copy_from_slice(&self.hadamard_one(g.row(i))));
                data
            }
        };
        GradientMatrix::new(rows, out, data, g.role())
    }

    fn hadamard_one(&self, x: &[f64]) -> Vec<f64> {
        let Prepared::Hadamard {
            premask,
            log2,
            signs,
            subset,
            scale,
        } = &self.kind
        else {
            unreachable!("hadamard state")
        };
        let mut buf = vec![0.0; 1usize << log2];
        match premask {
            Some(idx) => idx.iter().zip(buf.iter_mut()).for_each(|(&i, b)| *b = x[i]),
            None => buf[..x.len()].copy_from_slice(x),
        }
        for (b, &s) in buf.iter_mut().zip(signs) {
            if s {
                *b = -*b;
            }
        }
        // With Sylvester matrices H_m (x) H_n = H_{mn}, so the two-sided product
        // on the row-major m x n reshape is one length-mn transform.
        fwht(&mut buf);
        subset.iter().map(|&i| buf[i] * scale).collect()
    }
}

/// `(m, n) = (2^ceil(k/2), 2^floor(k/2))`.
pub fn side_lengths(log2: u32) -> (usize, usize) {
    (1usize << log2.div_ceil(2), 1usize << (log2 / 2))
}

/// In-place unnormalized Walsh-Hadamard transform (Sylvester ordering).
pub fn fwht(buf: &mut [f64]) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fwht length must be a power of two");
    let mut h = 1;
    while h < n {
        for block in buf.chunks_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

fn fill_sign_words(key: u64, j: usize, out: &mut [u64]) {
    let base = (j as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    for (w, word) in out.iter_mut().enumerate() {
        *word = splitmix64(key ^ base.wrapping_add(w as u64));
    }
}

fn signed_sum(signs: &[u64], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    for (chunk, &word) in x.chunks(64).zip(signs) {
        for (b, &v) in chunk.iter().enumerate() {
            let flip = ((word >> b) & 1) << 63;
            acc[b & 3] += f64::from_bits(v.to_bits() ^ flip);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

pub fn project(x: &[f64], spec: &SketchSpec) -> Result<Vec<f64>> {
    spec.prepare()?.project(x)
}

pub fn project_rows(g: &GradientMatrix, spec: &SketchSpec) -> Result<GradientMatrix> {
    spec.prepare()?.project_rows(g)
}

/// Sorted uniform subset of `mask_size` coordinates out of `d`.
pub fn premask_indices(d: u64, mask_size: u64, seed: u64) -> Result<IndexList> {
    if mask_size == 0 {
        return Err(Error::invalid("premask size must be positive"));
    }
    if mask_size > d {
        return Err(Error::invalid(format!(
            "premask size {mask_size} exceeds dimension {d}"
        )));
    }
    let d = usize::try_from(d).map_err(|_| Error::invalid("dimension too large"))?;
    let mut rng = rng::stream(seed, Stream::Premask);
    let mut idx = index::sample(&mut rng, d, mask_size as usize).into_vec();
    idx.sort_unstable();
    Ok(IndexList::from_usize(idx))
}
