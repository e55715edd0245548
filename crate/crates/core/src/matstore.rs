//! On-disk matrix format and the in-memory gradient matrix.
//!
//! Layout of an `IDM1` file, all integers little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `b"IDM1"`                        |
//! | 4      | 1    | dtype code (0 = f32, 1 = f64)          |
//! | 5      | 8    | rows (u64)                             |
//! | 13     | 8    | cols (u64)                             |
//! | 21     | ...  | `rows * cols` values, row-major        |
//!
//! A file is valid only if its length is exactly `21 + rows * cols * size`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const MAGIC: [u8; 4] = *b"IDM1";
pub const HEADER_LEN: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::BadDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
    Landmark,
    Embedding,
    Moment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroPolicy {
    Keep,
    Error,
}

/// Dense row-major matrix of per-sample vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    role: Role,
    normalized: bool,
}

impl GradientMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, role: Role) -> Result<Self> {
        let m = Self::new_allow_nonfinite(rows, cols, data, role)?;
        m.check_finite()?;
        Ok(m)
    }

    fn new_allow_nonfinite(rows: usize, cols: usize, data: Vec<f64>, role: Role) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::dims("matrix data length", rows * cols, data.len()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            role,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], role: Role) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::dims("row length", d, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(n, d, data, role)
    }

    /// A single-row matrix, e.g. for storing a vector such as `p` or `m`.
    pub fn row_vector(values: Vec<f64>, role: Role) -> Result<Self> {
        let n = values.len();
        Self::new(1, n, values, role)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>, role: Role) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().copied());
        }
        Self::new(m.nrows(), m.ncols(), data, role)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Copy of the listed rows, in the listed order.
    pub fn select_rows(&self, idx: &IndexList) -> Result<Self> {
        idx.validate(self.rows)?;
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx.as_slice() {
            data.extend_from_slice(self.row(i as usize));
        }
        let mut out = Self::new(idx.len(), self.cols, data, self.role)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Mean of the rows, summed in row order.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        let mut col = Vec::with_capacity(self.rows);
        for (j, slot) in acc.iter_mut().enumerate() {
            col.clear();
            col.extend((0..self.rows).map(|i| self.get(i, j)));
            *slot = linalg::pairwise_sum(&col) / self.rows as f64;
        }
        acc
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(Error::NonFinite {
                row: pos / self.cols,
                col: pos % self.cols,
            }),
            None => Ok(()),
        }
    }
}

/// Ordered list of row indices into a matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexList(Vec<u64>);

impl IndexList {
    pub fn new(indices: Vec<u64>) -> Self {
        Self(indices)
    }

    pub fn from_usize(indices: impl IntoIterator<Item = usize>) -> Self {
        Self(indices.into_iter().map(|i| i as u64).collect())
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn to_usize(&self) -> Vec<usize> {
        self.0.iter().map(|&i| i as usize).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices must lie in `[0, rows)` with no repeats.
    pub fn validate(&self, rows: usize) -> Result<()> {
        let mut seen = vec![false; rows];
        for &i in &self.0 {
            if i >= rows as u64 {
                return Err(Error::IndexOutOfRange { index: i, rows });
            }
            if std::mem::replace(&mut seen[i as usize], true) {
                return Err(Error::DuplicateIndex(i));
            }
        }
        Ok(())
    }

    /// Parses a JSON array, or falls back to one index per line.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('[') {
            return Ok(serde_json::from_str(text)?);
        }
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v = line
                .parse::<u64>()
                .map_err(|e| Error::invalid(format!("index list line {}: {e}", lineno + 1)))?;
            out.push(v);
        }
        Ok(Self(out))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("u64 list serializes")
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for i in &self.0 {
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }
}

/// Raw decoded file contents, before any role is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub dtype: Dtype,
    pub rows: u64,
    pub cols: u64,
    pub data: Vec<f64>,
}

impl MatrixFile {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let dtype = Dtype::from_code(bytes[4])?;
        let rows = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .and_then(|n| n.checked_add(HEADER_LEN as u64))
            .ok_or_else(|| Error::invalid("matrix dimensions overflow"))?;
        if expected != bytes.len() as u64 {
            return Err(Error::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        let payload = &bytes[HEADER_LEN..];
        let data = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Self {
            dtype,
            rows,
            cols,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * self.dtype.size());
        out.extend_from_slice(&MAGIC);
        out.push(self.dtype.code());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
        match self.dtype {
            Dtype::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    pub allow_nonfinite: bool,
}

pub fn read_matrix(path: &Path, role: Role) -> Result<GradientMatrix> {
    read_matrix_with(path, role, ReadOptions::default())
}

pub fn read_matrix_with(path: &Path, role: Role, opts: ReadOptions) -> Result<GradientMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, role, opts)
}

pub fn decode_matrix(bytes: &[u8], role: Role, opts: ReadOptions) -> Result<GradientMatrix> {
    let file = MatrixFile::decode(bytes)?;
    let m = GradientMatrix::new_allow_nonfinite(file.rows as usize, file.cols as usize, file.data, role)?;
    if !opts.allow_nonfinite {
        m.check_finite()?;
    }
    Ok(m)
}

pub fn encode_matrix(m: &GradientMatrix, dtype: Dtype) -> Result<Vec<u8>> {
    m.check_finite()?;
    Ok(MatrixFile {
        dtype,
        rows: m.rows as u64,
        cols: m.cols as u64,
        data: m.data.clone(),
    }
    .encode())
}

pub fn write_matrix(m: &GradientMatrix, path: &Path, dtype: Dtype) -> Result<()> {
    let bytes = encode_matrix(m, dtype)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Scales every nonzero row to unit Euclidean norm.
pub fn normalize_rows(m: &GradientMatrix, zero_policy: ZeroPolicy) -> Result<GradientMatrix> {
    let mut data = m.data.clone();
    for (i, row) in data.chunks_exact_mut(m.cols).enumerate() {
        let n = linalg::norm(row);
        if n == 0.0 {
            if zero_policy == ZeroPolicy::Error {
                return Err(Error::ZeroRow { row: i });
            }
            continue;
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    let mut out = GradientMatrix::new(m.rows, m.cols, data, m.role)?;
    out.normalized = true;
    Ok(out)
}

/// Unit-normalizes a vector; the zero vector is returned unchanged.
pub fn normalize_vec(v: &[f64]) -> Vec<f64> {
    let n = linalg::norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> GradientMatrix {
        GradientMatrix::new(rows, cols, data.to_vec(), Role::Source).unwrap()
    }

    #[test]
    fn decodes_two_by_three() {
        let src = m(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let bytes = encode_matrix(&src, Dtype::F32).unwrap();
        assert_eq!(bytes.len(), 21 + 6 * 4);
        let back = decode_matrix(&bytes, Role::Source, ReadOptions::default()).unwrap();
        assert_eq!(back.row(0), &[1., 2., 3.]);
        assert_eq!(back.row(1), &[4., 5., 6.]);
    }

    #[test]
    fn decodes_single_zero() {
        let bytes = encode_matrix(&m(1, 1, &[0.0]), Dtype::F64).unwrap();
        let back = decode_matrix(&bytes, Role::Source, ReadOptions::default()).unwrap();
        assert_eq!(back.data(), &[0.0]);
    }

    #[test]
    fn header_bytes_are_exact() {
        let bytes = encode_matrix(&m(1, 2, &[1.0, -2.0]), Dtype::F64).unwrap();
        assert_eq!(&bytes[0..4], b"IDM1");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..13], &1u64.to_le_bytes());
        assert_eq!(&bytes[13..21], &2u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 37);
    }

    #[test]
    fn length_mismatch_is_truncation() {
        let mut bytes = encode_matrix(&m(2, 2, &[1., 2., 3., 4.]), Dtype::F32).unwrap();
        bytes.pop();
        assert!(matches!(
            decode_matrix(&bytes, Role::Source, ReadOptions::default()),
            Err(Error::Truncated {
                expected: 37,
                found: 36
            })
        ));
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(
            decode_matrix(&bytes, Role::Source, ReadOptions::default()),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_matrix(&m(1, 1, &[1.0]), Dtype::F32).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_matrix(&bytes, Role::Source, ReadOptions::default()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn nonfinite_reported_with_position() {
        let file = MatrixFile {
            dtype: Dtype::F64,
            rows: 2,
            cols: 2,
            data: vec![1.0, 2.0, 3.0, f64::NAN],
        };
        let bytes = file.encode();
        assert!(matches!(
            decode_matrix(&bytes, Role::Source, ReadOptions::default()),
            Err(Error::NonFinite { row: 1, col: 1 })
        ));
        let ok = decode_matrix(&bytes, Role::Source, ReadOptions { allow_nonfinite: true }).unwrap();
        assert!(ok.get(1, 1).is_nan());
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(matches!(
            GradientMatrix::new(0, 3, vec![], Role::Source),
            Err(Error::EmptyMatrix { rows: 0, cols: 3 })
        ));
        let file = MatrixFile {
            dtype: Dtype::F32,
            rows: 0,
            cols: 4,
            data: vec![],
        };
        assert!(matches!(
            decode_matrix(&file.encode(), Role::Source, ReadOptions::default()),
            Err(Error::EmptyMatrix { .. })
        ));
    }

    #[test]
    fn file_round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eye.idm");
        let eye = m(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        write_matrix(&eye, &path, Dtype::F32).unwrap();
        assert_eq!(read_matrix(&path, Role::Source).unwrap(), eye);
    }

    #[test]
    fn f32_storage_within_relative_precision() {
        let vals = [std::f64::consts::PI, -1.0 / 3.0, 12_345.678_9, 1e-7];
        let src = m(2, 2, &vals);
        let bytes = encode_matrix(&src, Dtype::F32).unwrap();
        let back = decode_matrix(&bytes, Role::Source, ReadOptions::default()).unwrap();
        for (a, b) in vals.iter().zip(back.data()) {
            assert!(((a - b) / a).abs() <= 1e-6);
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let src = m(1, 1, &[1.0]);
        let err = write_matrix(&src, Path::new("/nonexistent-dir/x.idm"), Dtype::F32).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn normalize_three_four_five() {
        let out = normalize_rows(&m(1, 2, &[3., 4.]), ZeroPolicy::Keep).unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.8).abs() < 1e-15);
        assert!(out.is_normalized());
    }

    #[test]
    fn normalize_zero_row_policies() {
        let src = m(2, 2, &[0., 0., 1., 0.]);
        let kept = normalize_rows(&src, ZeroPolicy::Keep).unwrap();
        assert_eq!(kept.data(), &[0., 0., 1., 0.]);
        assert!(matches!(
            normalize_rows(&m(1, 2, &[0., 0.]), ZeroPolicy::Error),
            Err(Error::ZeroRow { row: 0 })
        ));
    }

    #[test]
    fn index_list_parsing_and_validation() {
        let a = IndexList::parse("[3, 1, 2]").unwrap();
        let b = IndexList::parse("3\n1\n\n2\n").unwrap();
        assert_eq!(a, b);
        a.validate(4).unwrap();
        assert!(matches!(
            a.validate(3),
            Err(Error::IndexOutOfRange { index: 3, rows: 3 })
        ));
        assert!(matches!(
            IndexList::new(vec![0, 0]).validate(2),
            Err(Error::DuplicateIndex(0))
        ));
        assert_eq!(IndexList::parse(&a.to_lines()).unwrap(), a);
    }

    fn arb_matrix() -> impl Strategy<Value = GradientMatrix> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-1e3f64..1e3, r * c)
                .prop_map(move |d| GradientMatrix::new(r, c, d, Role::Source).unwrap())
        })
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bitwise(mat in arb_matrix()) {
            let bytes = encode_matrix(&mat, Dtype::F64).unwrap();
            let back = decode_matrix(&bytes, Role::Source, ReadOptions::default()).unwrap();
            prop_assert_eq!(back.rows(), mat.rows());
            prop_assert_eq!(back.cols(), mat.cols());
            for (a, b) in back.data().iter().zip(mat.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn normalize_idempotent_and_direction_preserving(mat in arb_matrix()) {
            let once = normalize_rows(&mat, ZeroPolicy::Keep).unwrap();
            let twice = normalize_rows(&once, ZeroPolicy::Keep).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for i in 0..mat.rows() {
                let n = linalg::norm(mat.row(i));
                if n > 0.0 {
                    prop_assert!((linalg::norm(once.row(i)) - 1.0).abs() <= 1e-6);
                    prop_assert!((linalg::cosine(mat.row(i), once.row(i)) - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
