//! Dense row-major `f64` tensors and the `.t` text format.
//!
//! Format: line 1 is the rank `r`, line 2 holds `r` space-separated extents
//! (empty for rank 0), and the remaining whitespace-separated decimals are
//! the row-major values.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let elems: usize = shape.iter().product();
        if data.len() != elems {
            return Err(Error::EnvMismatch(format!(
                "tensor of shape {shape:?} needs {elems} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let elems = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; elems],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; t.rank()];
        for i in 0..t.elems() {
            t.data[i] = f(&idx);
            increment(&mut idx, &t.shape);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn elems(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.elems() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::EnvMismatch(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            debug_assert!(x < self.shape[i]);
            off = off * self.shape[i] + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    /// Copy of the subtensor at leading index `i`.
    pub fn slice_leading(&self, i: usize) -> Tensor {
        assert!(!self.shape.is_empty() && i < self.shape[0]);
        let chunk = self.data.len() / self.shape[0];
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * chunk..(i + 1) * chunk].to_vec(),
        }
    }

    /// Stack equal-shaped parts along a new leading axis.
    pub fn stack_leading(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let inner = parts[0].shape.clone();
        let mut shape = vec![parts.len()];
        shape.extend(&inner);
        let mut data = Vec::with_capacity(parts.len() * parts[0].elems());
        for p in parts {
            debug_assert_eq!(p.shape, inner);
            data.extend_from_slice(&p.data);
        }
        Tensor { shape, data }
    }

    /// Same data, different shape; the element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), self.elems());
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    /// Serialize in the `.t` text format.  Values use the shortest
    /// round-trippable decimal form, so output is byte-stable.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.rank());
        let extents: Vec<String> = self.shape.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(out, "{}", extents.join(" "));
        for (i, v) in self.data.iter().enumerate() {
            if i > 0 {
                out.push(if i % 8 == 0 { '\n' } else { ' ' });
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Tensor> {
        let mut tokens = text.split_whitespace();
        let bad = |what: &str| Error::EnvMismatch(format!("tensor text: {what}"));
        let rank: usize = tokens
            .next()
            .ok_or_else(|| bad("missing rank"))?
            .parse()
            .map_err(|_| bad("rank is not an integer"))?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let n: usize = tokens
                .next()
                .ok_or_else(|| bad("missing extent"))?
                .parse()
                .map_err(|_| bad("extent is not an integer"))?;
            shape.push(n);
        }
        let elems: usize = shape.iter().product();
        let mut data = Vec::with_capacity(elems);
        for _ in 0..elems {
            let v: f64 = tokens
                .next()
                .ok_or_else(|| bad("missing value"))?
                .parse()
                .map_err(|_| bad("value is not a number"))?;
            data.push(v);
        }
        if tokens.next().is_some() {
            return Err(bad("trailing values"));
        }
        Tensor::new(shape, data)
    }
}

/// Advance a multi-index in row-major order; wraps to zero at the end.
pub fn increment(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.25, 1e-9, 7.0]).unwrap();
        let back = Tensor::from_text(&t.to_text()).unwrap();
        assert_eq!(t, back);
        let s = Tensor::scalar(4.5);
        assert_eq!(Tensor::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.get(&[0, 2]), 2.0);
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(t.slice_leading(1).data(), &[3.0, 4.0, 5.0]);
    }
}
