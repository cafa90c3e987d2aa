//! Affine whitening of sample clouds before the nonlinear flow, and the
//! bookkeeping that folds those affine pieces back into a fitted flow so
//! it maps original coordinates to original coordinates.

use crate::error::{Error, Result};
use crate::points::{PointMatrix, SampleSet};
use crate::transport::FlowRecord;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Invertible affine map x -> linear * x + shift with its inverse matrix
/// cached (and serialized, so replay is bit-exact across processes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub linear: DMatrix<f64>,
    pub shift: Vec<f64>,
    inv_linear: DMatrix<f64>,
}

impl AffineTransform {
    pub fn new(linear: DMatrix<f64>, shift: Vec<f64>) -> Result<Self> {
        if !linear.is_square() || linear.nrows() != shift.len() {
            return Err(Error::Data(format!(
                "affine transform shape mismatch: {}x{} linear, {} shift",
                linear.nrows(),
                linear.ncols(),
                shift.len()
            )));
        }
        let inv_linear = linear
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Data("affine transform is singular".into()))?;
        Ok(AffineTransform { linear, shift, inv_linear })
    }

    pub fn identity(dim: usize) -> Self {
        AffineTransform {
            linear: DMatrix::identity(dim, dim),
            shift: vec![0.0; dim],
            inv_linear: DMatrix::identity(dim, dim),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.shift.clone();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.linear[(i, j)] * x[j];
            }
            out[i] += acc;
        }
        out
    }

    pub fn apply_inverse(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.inv_linear[(i, j)] * (y[j] - self.shift[j]);
            }
            out[i] = acc;
        }
        out
    }

    pub fn apply_points(&self, pts: &PointMatrix) -> PointMatrix {
        let mut out = PointMatrix::with_capacity(pts.len(), pts.dim());
        for r in pts.rows() {
            out.push_row(&self.apply(r));
        }
        out
    }

    pub fn log_abs_det(&self) -> f64 {
        self.linear.clone().lu().determinant().abs().ln()
    }
}

/// Whiten a sample cloud to empirical mean 0 and covariance I using the
/// symmetric inverse square root of the (1/N) covariance. A rank-deficient
/// covariance is ridge-regularized with lambda = 1e-8 * trace / d and a
/// warning; zero or negative trace (all points identical) is an error.
pub fn whiten(samples: &SampleSet) -> Result<(AffineTransform, SampleSet)> {
    let pts = &samples.points;
    let (n, d) = (pts.len(), pts.dim());
    let mean = pts.mean();
    let mut cov: DMatrix<f64> = DMatrix::zeros(d, d);
    for r in pts.rows() {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / n as f64;
            }
        }
    }
    let trace = cov.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::Data(
            "sample covariance has non-positive trace; cannot precondition a degenerate cloud"
                .into(),
        ));
    }
    let mut eigen = cov.symmetric_eigen();
    let rank_floor = 1e-12 * trace / d as f64;
    if eigen.eigenvalues.iter().any(|&l| l < rank_floor) {
        let ridge = 1e-8 * trace / d as f64;
        log::warn!(
            "rank-deficient sample covariance; adding ridge {ridge:.3e} before whitening"
        );
        eigen.eigenvalues.iter_mut().for_each(|l| *l += ridge);
    }
    let inv_sqrt = DVector::from_iterator(d, eigen.eigenvalues.iter().map(|&l| 1.0 / l.sqrt()));
    let w = &eigen.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eigen.eigenvectors.transpose();
    let shift: Vec<f64> = (0..d).map(|i| -(0..d).map(|j| w[(i, j)] * mean[j]).sum::<f64>()).collect();
    let transform = AffineTransform::new(w, shift)?;
    let whitened = transform.apply_points(pts);
    Ok((transform, SampleSet { points: whitened, label: samples.label }))
}

/// Attach the whitening transforms to a flow fitted in whitened
/// coordinates, so replay computes tgt^{-1} o T_whitened o src.
pub fn compose_into_flow(
    src_t: &AffineTransform,
    tgt_t: &AffineTransform,
    mut fr: FlowRecord,
) -> Result<FlowRecord> {
    if src_t.dim() != fr.dim() || tgt_t.dim() != fr.dim() {
        return Err(Error::DimensionMismatch { expected: fr.dim(), actual: src_t.dim() });
    }
    fr.pre = Some(src_t.clone());
    fr.post = Some(tgt_t.clone());
    Ok(fr)
}
