//! Flat parameter vectors.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// A flat real-valued model of fixed dimension.
///
/// Every model the simulator handles (server model, device models, cached
/// gradients, control variates) is one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.len() == expected {
            Ok(())
        } else {
            Err(FedError::DimensionMismatch {
                expected,
                got: self.len(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ParamVector) {
        debug_assert_eq!(self.len(), x.len());
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += a * v;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in &mut self.0 {
            *s *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| a * v).collect())
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// Arithmetic mean of a nonempty list, summed in list order.
    pub fn mean<'a, I>(items: I) -> Option<ParamVector>
    where
        I: IntoIterator<Item = &'a ParamVector>,
    {
        let mut iter = items.into_iter();
        let mut acc = iter.next()?.clone();
        let mut count = 1usize;
        for v in iter {
            acc.axpy(1.0, v);
            count += 1;
        }
        acc.scale(1.0 / count as f64);
        Some(acc)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_arithmetic() {
        let a = ParamVector::from_vec(vec![1.0, 2.0]);
        let b = ParamVector::from_vec(vec![3.0, -1.0]);
        assert_eq!(a.dot(&b), 1.0);
        assert_eq!(a.add(&b).as_slice(), &[4.0, 1.0]);
        assert_eq!(a.sub(&b).as_slice(), &[-2.0, 3.0]);
        let mut c = a.clone();
        c.axpy(2.0, &b);
        assert_eq!(c.as_slice(), &[7.0, 0.0]);
        assert_eq!(ParamVector::mean([&a, &b]).unwrap().as_slice(), &[2.0, 0.5]);
        assert!(ParamVector::mean(std::iter::empty()).is_none());
    }

    #[test]
    fn dimension_check() {
        let a = ParamVector::zeros(3);
        assert!(a.check_dim(3).is_ok());
        assert!(matches!(
            a.check_dim(4),
            Err(FedError::DimensionMismatch { expected: 4, got: 3 })
        ));
    }
}
