//! Dense row-major `f64` tensors, padding masks, and a reverse-mode tape.
//!
//! Values live in [`Tensor`]; differentiation happens on a [`Tape`], which
//! records every operation applied to its [`Var`] handles and owns the
//! gradient buffers of the nodes that require them.

mod gradcheck;
mod tape;

pub use gradcheck::{central_difference, finite_diff_check};
pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Precondition(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Precondition(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Precondition("ragged matrix rows".into()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-position validity of a padded `B×L` batch: `true` marks a real token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl Mask {
    /// Builds a mask from 0/1 flags in row-major order.
    pub fn new(batch: usize, len: usize, flags: &[u8]) -> Result<Self> {
        if flags.len() != batch * len {
            return Err(Error::Precondition(format!(
                "mask of {batch}x{len} needs {} flags, got {}",
                batch * len,
                flags.len()
            )));
        }
        let valid = flags
            .iter()
            .map(|&f| match f {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Precondition(format!("mask flag {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bools(batch, len, valid)
    }

    pub fn from_bools(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if batch == 0 || len == 0 || valid.len() != batch * len {
            return Err(Error::Precondition(format!(
                "mask of {batch}x{len} cannot hold {} flags",
                valid.len()
            )));
        }
        if let Some(b) = (0..batch).find(|&b| !valid[b * len..(b + 1) * len].iter().any(|&v| v)) {
            return Err(Error::Precondition(format!("mask row {b} has no valid positions")));
        }
        Ok(Self { batch, len, valid })
    }

    /// Prefix mask: row `b` is valid on its first `lengths[b]` positions.
    pub fn from_lengths(len: usize, lengths: &[usize]) -> Result<Self> {
        if let Some(&bad) = lengths.iter().find(|&&n| n > len) {
            return Err(Error::Precondition(format!("length {bad} exceeds padded length {len}")));
        }
        let valid = lengths
            .iter()
            .flat_map(|&n| (0..len).map(move |l| l < n))
            .collect();
        Self::from_bools(lengths.len(), len, valid)
    }

    pub fn full(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn is_valid(&self, b: usize, l: usize) -> bool {
        self.valid[b * self.len + l]
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.valid[b * self.len..(b + 1) * self.len]
    }

    pub fn valid_count(&self, b: usize) -> usize {
        self.row(b).iter().filter(|&&v| v).count()
    }

    /// Appends `extra` masked positions to every row.
    pub fn extended(&self, extra: usize) -> Self {
        let len = self.len + extra;
        let valid = (0..self.batch)
            .flat_map(|b| {
                self.row(b)
                    .iter()
                    .copied()
                    .chain(std::iter::repeat(false).take(extra))
            })
            .collect();
        Self {
            batch: self.batch,
            len,
            valid,
        }
    }

    /// The mask as a `B×L` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.batch, self.len],
            data: self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Which axis of a `B×L×D` tensor a pooling reduces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over tokens (`L`), leaving `B×D`.
    Token,
    /// Reduce over features (`D`), leaving `B×L`.
    Feature,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn mask_rejects_empty_rows_and_bad_flags() {
        assert!(Mask::new(2, 2, &[1, 0, 0, 0]).is_err());
        assert!(Mask::new(1, 2, &[1, 2]).is_err());
        let m = Mask::new(2, 2, &[1, 0, 1, 1]).unwrap();
        assert_eq!(m.valid_count(0), 1);
        assert_eq!(m.valid_count(1), 2);
    }

    #[test]
    fn mask_extension_appends_padding() {
        let m = Mask::from_lengths(3, &[1, 3]).unwrap();
        let e = m.extended(2);
        assert_eq!(e.len(), 5);
        assert_eq!(e.row(1), &[true, true, true, false, false]);
        assert_eq!(e.valid_count(0), 1);
    }
}
