//! Gaussian RBF kernel: value, gradient and Hessian in the second
//! argument, and the k-nearest-neighbor bandwidth rule.

use crate::error::{Error, Result};
use crate::points::PointMatrix;
use nalgebra::DMatrix;

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn check_pair(b: &[f64], y: &[f64], sigma: f64) -> Result<()> {
    if b.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: b.len(), actual: y.len() });
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Data(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    Ok(())
}

/// K_sigma(b, y) = exp(-|b - y|^2 / (2 sigma^2)). Symmetric in (b, y),
/// bounded in (0, 1].
pub fn k_eval(b: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    check_pair(b, y, sigma)?;
    Ok((-sq_dist(b, y) / (2.0 * sigma * sigma)).exp())
}

/// Gradient of K in y: K * (b - y) / sigma^2.
pub fn k_grad_y(b: &[f64], y: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_pair(b, y, sigma)?;
    let inv_s2 = 1.0 / (sigma * sigma);
    let k = (-0.5 * sq_dist(b, y) * inv_s2).exp();
    Ok(b.iter().zip(y).map(|(bi, yi)| k * (bi - yi) * inv_s2).collect())
}

/// Hessian of K in y: K * [ (b-y)(b-y)^T / sigma^4 - I / sigma^2 ].
pub fn k_hess_y(b: &[f64], y: &[f64], sigma: f64) -> Result<DMatrix<f64>> {
    check_pair(b, y, sigma)?;
    let d = b.len();
    let inv_s2 = 1.0 / (sigma * sigma);
    let k = (-0.5 * sq_dist(b, y) * inv_s2).exp();
    let mut h: DMatrix<f64> = DMatrix::zeros(d, d);
    let c = k * inv_s2 * inv_s2;
    for i in 0..d {
        let di = b[i] - y[i];
        for j in i..d {
            // One rounded product per unordered pair keeps h bitwise
            // symmetric.
            let v = c * (di * (b[j] - y[j]));
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
        h[(i, i)] -= k * inv_s2;
    }
    Ok(h)
}

/// Kernel value with derivatives in one pass; the Hessian is optional
/// because most call sites only need the gradient.
#[derive(Clone, Debug)]
pub struct KernelEval {
    pub value: f64,
    pub grad_y: Vec<f64>,
    pub hess_y: Option<DMatrix<f64>>,
}

impl KernelEval {
    pub fn compute(b: &[f64], y: &[f64], sigma: f64, with_hess: bool) -> Result<Self> {
        check_pair(b, y, sigma)?;
        let value = k_eval(b, y, sigma)?;
        let grad_y = k_grad_y(b, y, sigma)?;
        let hess_y = if with_hess { Some(k_hess_y(b, y, sigma)?) } else { None };
        Ok(KernelEval { value, grad_y, hess_y })
    }
}

/// Distance from each query point to its k-th nearest neighbor in
/// `reference` (1-indexed; a zero-distance neighbor counts), clipped to
/// `[min, max]`. Used to pick per-representer bandwidths against the
/// pooled transported-source and target cloud.
pub fn adaptive_bandwidths(
    queries: &PointMatrix,
    reference: &PointMatrix,
    k: usize,
    min: f64,
    max: f64,
) -> Result<Vec<f64>> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("adaptive bandwidth reference cloud"));
    }
    if queries.dim() != reference.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.dim(),
            actual: reference.dim(),
        });
    }
    if k == 0 || k > reference.len() {
        return Err(Error::Data(format!(
            "bandwidth k = {k} out of range for reference of size {}",
            reference.len()
        )));
    }
    if !(min > 0.0) || max < min {
        return Err(Error::Data(format!("invalid bandwidth clip range [{min}, {max}]")));
    }
    let mut out = Vec::with_capacity(queries.len());
    let mut dists = vec![0.0f64; reference.len()];
    for q in queries.rows() {
        for (slot, r) in dists.iter_mut().zip(reference.rows()) {
            *slot = sq_dist(q, r);
        }
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| {
            a.partial_cmp(b).expect("distances are finite")
        });
        out.push(kth.sqrt().clamp(min, max));
    }
    Ok(out)
}

/// Default k: ceil(sqrt(pool size)).
pub fn default_knn(pool_size: usize) -> usize {
    (pool_size as f64).sqrt().ceil().max(1.0) as usize
}
