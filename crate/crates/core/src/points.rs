//! Dense row-major point storage shared by samples, particle clouds, and
//! transported positions.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// An `n x dim` matrix of points stored row-major in a flat buffer.
/// Rows are points; `dim >= 1` always.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl PointMatrix {
    pub fn zeros(n: usize, dim: usize) -> Self {
        assert!(dim >= 1, "point dimension must be at least 1");
        PointMatrix { dim, data: vec![0.0; n * dim] }
    }

    pub fn with_capacity(n: usize, dim: usize) -> Self {
        assert!(dim >= 1, "point dimension must be at least 1");
        PointMatrix { dim, data: Vec::with_capacity(n * dim) }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("point dimension must be at least 1".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Data(format!(
                "flat buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(PointMatrix { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(1);
        let mut m = PointMatrix::with_capacity(rows.len(), dim.max(1));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != m.dim {
                return Err(Error::Data(format!(
                    "row {i} has {} columns, expected {}",
                    r.len(),
                    m.dim
                )));
            }
            m.data.extend_from_slice(r);
        }
        Ok(m)
    }

    /// Single-column matrix from a slice of scalars.
    pub fn from_scalars(values: &[f64]) -> Self {
        PointMatrix { dim: 1, data: values.to_vec() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "row length must match dimension");
        self.data.extend_from_slice(row);
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_all(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column means.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len().max(1);
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        for a in &mut m {
            *a /= n as f64;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleLabel {
    Source,
    Target,
}

/// A labeled set of samples. Construction validates the invariants every
/// consumer relies on: at least two points, all coordinates finite.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub points: PointMatrix,
    pub label: SampleLabel,
}

impl SampleSet {
    pub fn new(points: PointMatrix, label: SampleLabel) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Data(format!(
                "sample set needs at least 2 points, got {}",
                points.len()
            )));
        }
        if !points.all_finite() {
            return Err(Error::Data("sample set contains non-finite coordinates".into()));
        }
        Ok(SampleSet { points, label })
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_access_round_trips() {
        let m = PointMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.dim(), 2);
        assert_eq!(m.row(1), &[3.0, 4.0]);
        let rows: Vec<&[f64]> = m.rows().collect();
        assert_eq!(rows[0], &[1.0, 2.0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = PointMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn sample_set_requires_two_finite_points() {
        let one = PointMatrix::from_scalars(&[0.5]);
        assert!(SampleSet::new(one, SampleLabel::Source).is_err());

        let bad = PointMatrix::from_scalars(&[0.0, f64::NAN]);
        assert!(SampleSet::new(bad, SampleLabel::Source).is_err());

        let ok = PointMatrix::from_scalars(&[0.0, 1.0]);
        assert!(SampleSet::new(ok, SampleLabel::Target).is_ok());
    }

    #[test]
    fn mean_is_columnwise() {
        let m = PointMatrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(m.mean(), vec![2.0, 0.0]);
    }
}
