//! Elementary maps: small parametric perturbations of the identity that
//! are composed into transport flows and applied to representer clouds.
//!
//! Every family is linear in its parameters and is exactly the identity at
//! zero parameters, so an unperturbed map never moves a point, not even by
//! rounding.

use crate::config::MapFamily;
use crate::error::{Error, Result};
use crate::kernel::sq_dist;
use crate::points::PointMatrix;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

/// Guard radius below which the erf radial profile (which has a
/// direction-dependent limit at the center) is replaced by its defining
/// value f(c) = c + shift.
pub const RADIAL_GUARD: f64 = 1e-12;

// ===== monomial features =====

/// Exponent vectors of all monomials in `dim` variables with total degree
/// 1..=max_degree, in graded lexicographic order: degree ascending, ties
/// broken by lexicographically decreasing exponent vector.
pub fn monomial_exponents(dim: usize, max_degree: usize) -> Vec<Vec<u32>> {
    fn fill(dim: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if dim == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            fill(dim - 1, remaining - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for degree in 1..=max_degree as u32 {
        fill(dim, degree, &mut Vec::new(), &mut out);
    }
    out
}

pub fn monomial_count(dim: usize, max_degree: usize) -> usize {
    monomial_exponents(dim, max_degree).len()
}

pub fn monomial_value(exponents: &[u32], b: &[f64]) -> f64 {
    exponents.iter().zip(b).map(|(&e, &x)| x.powi(e as i32)).product()
}

/// Gradient of a monomial, written into `out` (accumulated with `coeff`).
fn monomial_grad_acc(exponents: &[u32], b: &[f64], coeff: f64, out: &mut [f64]) {
    for k in 0..b.len() {
        let ek = exponents[k];
        if ek == 0 {
            continue;
        }
        let mut g = ek as f64 * b[k].powi(ek as i32 - 1);
        for (l, (&el, &x)) in exponents.iter().zip(b).enumerate() {
            if l != k {
                g *= x.powi(el as i32);
            }
        }
        out[k] += coeff * g;
    }
}

/// Hessian of a monomial, accumulated into `h` with `coeff`.
fn monomial_hess_acc(exponents: &[u32], b: &[f64], coeff: f64, h: &mut DMatrix<f64>) {
    let d = b.len();
    for k in 0..d {
        for l in 0..d {
            let (ek, el) = (exponents[k], exponents[l]);
            let mut v;
            if k == l {
                if ek < 2 {
                    continue;
                }
                v = (ek * (ek - 1)) as f64 * b[k].powi(ek as i32 - 2);
                for (m, (&em, &x)) in exponents.iter().zip(b).enumerate() {
                    if m != k {
                        v *= x.powi(em as i32);
                    }
                }
            } else {
                if ek == 0 || el == 0 {
                    continue;
                }
                v = (ek * el) as f64 * b[k].powi(ek as i32 - 1) * b[l].powi(el as i32 - 1);
                for (m, (&em, &x)) in exponents.iter().zip(b).enumerate() {
                    if m != k && m != l {
                        v *= x.powi(em as i32);
                    }
                }
            }
            h[(k, l)] += coeff * v;
        }
    }
}

// ===== elementary maps =====

/// Parameterized elementary map of one family.
///
/// Radial families: f(b) = b + (1/N_c) sum_i [ b0_i * w(|b - c_i|) * (b - c_i) + b1_i ]
/// with profile w(r) = 1/(tau + r^2) (inverse quadratic) or erf(r/tau)/r^2.
/// Parameter layout per center: [b0, b1 (dim entries)], centers in order.
///
/// Multinomial: f(b) = b + sum_j params_j * grad phi_j(b) over monomials of
/// total degree 1..=degree in graded-lex order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementaryMapParams {
    pub family: MapFamily,
    pub params: Vec<f64>,
    /// Radial centers; empty (with the map's dimension) for multinomial.
    pub centers: PointMatrix,
    /// Radial scale tau; unused by multinomial.
    pub scale: f64,
    /// Multinomial max total degree; 0 for radial families.
    pub degree: usize,
    dim: usize,
}

impl ElementaryMapParams {
    /// Zero-parameter radial map skeleton over the given centers.
    pub fn radial(family: MapFamily, centers: PointMatrix, scale: f64) -> Result<Self> {
        if family == MapFamily::Multinomial {
            return Err(Error::Unsupported("radial constructor used for multinomial".into()));
        }
        if centers.is_empty() {
            return Err(Error::EmptyInput("radial map centers"));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Data(format!("map scale must be positive, got {scale}")));
        }
        let dim = centers.dim();
        let n = centers.len() * (1 + dim);
        Ok(ElementaryMapParams { family, params: vec![0.0; n], centers, scale, degree: 0, dim })
    }

    /// Zero-parameter multinomial map skeleton.
    pub fn multinomial(dim: usize, degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Data(format!("multinomial degree must be >= 1, got {degree}")));
        }
        if dim == 0 {
            return Err(Error::Data("map dimension must be at least 1".into()));
        }
        let n = monomial_count(dim, degree);
        Ok(ElementaryMapParams {
            family: MapFamily::Multinomial,
            params: vec![0.0; n],
            centers: PointMatrix::zeros(0, dim),
            scale: 1.0,
            degree,
            dim,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        let mut m = self.clone();
        m.params.copy_from_slice(params);
        Ok(m)
    }

    #[inline]
    pub fn is_identity(&self) -> bool {
        self.params.iter().all(|&p| p == 0.0)
    }

    /// Radial profile w(r^2); the erf profile is undefined below the guard
    /// radius and reported as 0 there (the radial term vanishes).
    #[inline]
    fn profile(&self, r2: f64) -> f64 {
        match self.family {
            MapFamily::RadialIq => 1.0 / (self.scale + r2),
            MapFamily::RadialErf => {
                if r2 < RADIAL_GUARD * RADIAL_GUARD {
                    0.0
                } else {
                    erf(r2.sqrt() / self.scale) / r2
                }
            }
            MapFamily::Multinomial => unreachable!("profile is radial-only"),
        }
    }

    /// Apply in place; `out` must already hold `b` or be writable.
    pub fn apply_to(&self, b: &[f64], out: &mut [f64]) {
        debug_assert_eq!(b.len(), self.dim);
        out.copy_from_slice(b);
        if self.is_identity() {
            return; // bit-exact identity
        }
        match self.family {
            MapFamily::Multinomial => {
                for (j, e) in monomial_exponents(self.dim, self.degree).iter().enumerate() {
                    let c = self.params[j];
                    if c != 0.0 {
                        monomial_grad_acc(e, b, c, out);
                    }
                }
            }
            MapFamily::RadialIq | MapFamily::RadialErf => {
                let inv_nc = 1.0 / self.centers.len() as f64;
                let block = 1 + self.dim;
                for (ci, c) in self.centers.rows().enumerate() {
                    let b0 = self.params[ci * block];
                    let shift = &self.params[ci * block + 1..(ci + 1) * block];
                    if b0 != 0.0 {
                        let w = self.profile(sq_dist(b, c));
                        for k in 0..self.dim {
                            out[k] += inv_nc * b0 * w * (b[k] - c[k]);
                        }
                    }
                    for k in 0..self.dim {
                        out[k] += inv_nc * shift[k];
                    }
                }
            }
        }
    }

    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; b.len()];
        self.apply_to(b, &mut out);
        out
    }

    /// Exact parameter derivative df/d(params[m]) at `b`. All families are
    /// linear in their parameters, so this does not depend on the current
    /// parameter values.
    pub fn param_direction(&self, m: usize, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        match self.family {
            MapFamily::Multinomial => {
                let e = &monomial_exponents(self.dim, self.degree)[m];
                monomial_grad_acc(e, b, 1.0, &mut out);
            }
            MapFamily::RadialIq | MapFamily::RadialErf => {
                let inv_nc = 1.0 / self.centers.len() as f64;
                let block = 1 + self.dim;
                let (ci, within) = (m / block, m % block);
                let c = self.centers.row(ci);
                if within == 0 {
                    let w = self.profile(sq_dist(b, c));
                    for k in 0..self.dim {
                        out[k] = inv_nc * w * (b[k] - c[k]);
                    }
                } else {
                    out[within - 1] = inv_nc;
                }
            }
        }
        out
    }

    /// Jacobian df/db. Needed for log-determinants of feature-map steps;
    /// only the multinomial family supports it.
    pub fn point_jacobian(&self, b: &[f64]) -> Result<DMatrix<f64>> {
        if self.family != MapFamily::Multinomial {
            return Err(Error::Unsupported(
                "point Jacobian is only provided for multinomial maps".into(),
            ));
        }
        let d = self.dim;
        let mut j = DMatrix::identity(d, d);
        for (m, e) in monomial_exponents(d, self.degree).iter().enumerate() {
            let c = self.params[m];
            if c != 0.0 {
                monomial_hess_acc(e, b, c, &mut j);
            }
        }
        Ok(j)
    }
}

/// Validated application: checks the point dimension first.
pub fn map_apply(m: &ElementaryMapParams, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != m.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), actual: b.len() });
    }
    Ok(m.apply(b))
}

/// Parameter Jacobian df/d(params) at `b` by central finite differences,
/// one column per parameter. The analytic `param_direction` is the
/// reference implementation; this exists as an independent cross-check.
pub fn param_jacobian_fd(m: &ElementaryMapParams, b: &[f64]) -> Result<DMatrix<f64>> {
    if b.len() != m.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), actual: b.len() });
    }
    let p = m.param_len();
    let mut jac: DMatrix<f64> = DMatrix::zeros(m.dim(), p);
    let mut theta = m.params.clone();
    for j in 0..p {
        let h = 1e-6 * theta[j].abs().max(1.0);
        let orig = theta[j];
        theta[j] = orig + h;
        let fp = m.with_params(&theta)?.apply(b);
        theta[j] = orig - h;
        let fm = m.with_params(&theta)?.apply(b);
        theta[j] = orig;
        for k in 0..m.dim() {
            jac[(k, j)] = (fp[k] - fm[k]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Draw map centers uniformly without replacement from the pooled
/// transported-source and target cloud.
pub fn sample_centers(
    transported: &PointMatrix,
    target: &PointMatrix,
    n_centers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PointMatrix> {
    if transported.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: transported.dim(),
            actual: target.dim(),
        });
    }
    let pool = transported.len() + target.len();
    if n_centers == 0 {
        return Err(Error::Data("n_centers must be at least 1".into()));
    }
    if n_centers > pool {
        return Err(Error::Data(format!(
            "cannot draw {n_centers} distinct centers from a pool of {pool}"
        )));
    }
    let idx = rand::seq::index::sample(rng, pool, n_centers);
    let mut out = PointMatrix::with_capacity(n_centers, transported.dim());
    for i in idx.iter() {
        if i < transported.len() {
            out.push_row(transported.row(i));
        } else {
            out.push_row(target.row(i - transported.len()));
        }
    }
    Ok(out)
}

/// Largest displacement caused by the radial part of the map on a probe
/// sphere of the given radius around the centers' centroid. Requires all
/// shift components to be zero so the value isolates the local bump.
pub fn locality_defect(m: &ElementaryMapParams, radius: f64) -> Result<f64> {
    if m.family == MapFamily::Multinomial {
        return Err(Error::Unsupported("locality defect is defined for radial maps only".into()));
    }
    let block = 1 + m.dim();
    for (i, &p) in m.params.iter().enumerate() {
        if i % block != 0 && p != 0.0 {
            return Err(Error::Data("locality defect requires zero shift components".into()));
        }
    }
    if !(radius >= 0.0) {
        return Err(Error::Data(format!("probe radius must be non-negative, got {radius}")));
    }
    let d = m.dim();
    let centroid = m.centers.mean();
    // Fixed-seed probe directions make the sup estimate deterministic.
    let mut rng = ChaCha8Rng::seed_from_u64(0xD15C);
    let n_dirs = if d == 1 { 2 } else { 64 };
    let mut worst = 0.0f64;
    let mut probe = vec![0.0; d];
    for i in 0..n_dirs {
        let dir: Vec<f64> = if d == 1 {
            vec![if i == 0 { 1.0 } else { -1.0 }]
        } else {
            let mut v: Vec<f64> =
                (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        for k in 0..d {
            probe[k] = centroid[k] + radius * dir[k];
        }
        let image = m.apply(&probe);
        let disp = sq_dist(&image, &probe).sqrt();
        worst = worst.max(disp);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iq_1d(center: f64, tau: f64) -> ElementaryMapParams {
        ElementaryMapParams::radial(
            MapFamily::RadialIq,
            PointMatrix::from_scalars(&[center]),
            tau,
        )
        .unwrap()
    }

    #[test]
    fn graded_lex_order_2d() {
        let e = monomial_exponents(2, 2);
        assert_eq!(
            e,
            vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]],
        );
    }

    #[test]
    fn monomial_count_matches_binomial() {
        // C(D + B, B) - 1 monomials of degree 1..=D in B variables.
        assert_eq!(monomial_count(1, 3), 3);
        assert_eq!(monomial_count(2, 3), 9);
        assert_eq!(monomial_count(3, 2), 9);
    }

    #[test]
    fn radial_iq_hand_value() {
        // b = 1, c = 0, tau = 0.1, b0 = 0.5, shift = 0:
        // f = 1 + 0.5 * 1 / (0.1 + 1) = 1.454545...
        let m = iq_1d(0.0, 0.1).with_params(&[0.5, 0.0]).unwrap();
        let out = m.apply(&[1.0]);
        assert!((out[0] - (1.0 + 0.5 / 1.1)).abs() < 1e-15);
    }

    #[test]
    fn erf_center_guard() {
        let m = ElementaryMapParams::radial(
            MapFamily::RadialErf,
            PointMatrix::from_rows(&[vec![0.3, -0.7]]).unwrap(),
            0.5,
        )
        .unwrap()
        .with_params(&[2.0, 0.25, -0.5])
        .unwrap();
        // At the center the radial term is skipped: f(c) = c + shift.
        let out = m.apply(&[0.3, -0.7]);
        assert_eq!(out, vec![0.3 + 0.25, -0.7 - 0.5]);
    }

    #[test]
    fn multinomial_1d_degree3_layout() {
        // f(b) = b + p1 + 2 p2 b + 3 p3 b^2.
        let m = ElementaryMapParams::multinomial(1, 3)
            .unwrap()
            .with_params(&[0.1, 0.2, 0.3])
            .unwrap();
        let b = 0.5;
        let expect = b + 0.1 + 2.0 * 0.2 * b + 3.0 * 0.3 * b * b;
        assert!((m.apply(&[b])[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn minibatch_centers_average() {
        // Two centers, only shifts set: displacement is the mean shift.
        let m = ElementaryMapParams::radial(
            MapFamily::RadialIq,
            PointMatrix::from_scalars(&[-1.0, 1.0]),
            0.5,
        )
        .unwrap()
        .with_params(&[0.0, 0.4, 0.0, -0.2])
        .unwrap();
        let out = m.apply(&[3.0]);
        assert!((out[0] - (3.0 + 0.5 * (0.4 - 0.2))).abs() < 1e-15);
    }

    #[test]
    fn identity_at_zero_is_bitwise() {
        let radial = iq_1d(0.3, 0.1);
        for &x in &[-0.0f64, 0.0, 1.5, -2.75, 1e-300] {
            assert_eq!(radial.apply(&[x])[0].to_bits(), x.to_bits());
        }
        let multi = ElementaryMapParams::multinomial(2, 3).unwrap();
        let b = [0.123456789, -9.87654321];
        let out = multi.apply(&b);
        assert_eq!(out[0].to_bits(), b[0].to_bits());
        assert_eq!(out[1].to_bits(), b[1].to_bits());
    }

    proptest! {
        #[test]
        fn prop_identity_at_zero(x in -50.0f64..50.0, y in -50.0f64..50.0,
                                 c in -5.0f64..5.0, tau in 0.01f64..5.0) {
            let m = ElementaryMapParams::radial(
                MapFamily::RadialErf,
                PointMatrix::from_rows(&[vec![c, -c]]).unwrap(),
                tau,
            ).unwrap();
            let out = m.apply(&[x, y]);
            prop_assert_eq!(out[0].to_bits(), x.to_bits());
            prop_assert_eq!(out[1].to_bits(), y.to_bits());
        }
    }

    #[test]
    fn param_directions_match_fd_jacobian() {
        let cases: Vec<ElementaryMapParams> = vec![
            iq_1d(0.2, 0.3).with_params(&[0.4, -0.1]).unwrap(),
            ElementaryMapParams::radial(
                MapFamily::RadialErf,
                PointMatrix::from_rows(&[vec![0.1, 0.9], vec![-0.4, 0.2]]).unwrap(),
                0.7,
            )
            .unwrap()
            .with_params(&[0.3, 0.1, -0.2, -0.6, 0.05, 0.4])
            .unwrap(),
            ElementaryMapParams::multinomial(2, 3)
                .unwrap()
                .with_params(&[0.1, -0.2, 0.3, 0.05, -0.15, 0.2, 0.1, -0.05, 0.08])
                .unwrap(),
        ];
        let pts = [vec![0.7], vec![0.5, -1.2], vec![0.5, -1.2]];
        for (m, b) in cases.iter().zip(&pts) {
            let fd = param_jacobian_fd(m, b).unwrap();
            for j in 0..m.param_len() {
                let exact = m.param_direction(j, b);
                for k in 0..m.dim() {
                    assert!(
                        (fd[(k, j)] - exact[k]).abs() <= 1e-5 * (1.0 + exact[k].abs()),
                        "param {j} component {k}: fd {} vs exact {}",
                        fd[(k, j)],
                        exact[k]
                    );
                }
            }
        }
    }

    #[test]
    fn point_jacobian_multinomial_matches_fd() {
        let m = ElementaryMapParams::multinomial(2, 3)
            .unwrap()
            .with_params(&[0.1, -0.2, 0.3, 0.05, -0.15, 0.2, 0.1, -0.05, 0.08])
            .unwrap();
        let b = [0.4, -0.9];
        let j = m.point_jacobian(&b).unwrap();
        let h = 1e-6;
        for col in 0..2 {
            let mut bp = b;
            let mut bm = b;
            bp[col] += h;
            bm[col] -= h;
            let fp = m.apply(&bp);
            let fm = m.apply(&bm);
            for row in 0..2 {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                assert!((j[(row, col)] - fd).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn centers_drawn_without_replacement_cover_pool() {
        let transported = PointMatrix::from_scalars(&[0.0, 1.0, 2.0]);
        let target = PointMatrix::from_scalars(&[3.0, 4.0]);
        let mut rng = crate::rng::substream(1, crate::rng::StreamId::Centers);
        let centers = sample_centers(&transported, &target, 5, &mut rng).unwrap();
        let mut got: Vec<f64> = centers.rows().map(|r| r[0]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn center_sampling_is_uniform() {
        // 10^4 single-center draws from a pool of 10: each frequency within
        // 3 standard errors of 0.1 (SE = sqrt(0.1 * 0.9 / 1e4) = 0.003).
        let transported = PointMatrix::from_scalars(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let target = PointMatrix::from_scalars(&[5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut rng = crate::rng::substream(42, crate::rng::StreamId::Centers);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            let c = sample_centers(&transported, &target, 1, &mut rng).unwrap();
            counts[c.row(0)[0] as usize] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.1).abs() <= 0.009, "index {i} frequency {f}");
        }
    }

    #[test]
    fn too_many_centers_rejected() {
        let transported = PointMatrix::from_scalars(&[0.0, 1.0]);
        let target = PointMatrix::from_scalars(&[2.0, 3.0]);
        let mut rng = crate::rng::substream(0, crate::rng::StreamId::Centers);
        assert!(sample_centers(&transported, &target, 5, &mut rng).is_err());
    }

    #[test]
    fn locality_defect_iq_hand_value() {
        // beta0 = 1, tau = 0.1, r = 10: 10 / (0.1 + 100) = 0.0999000999...
        let m = iq_1d(0.0, 0.1).with_params(&[1.0, 0.0]).unwrap();
        let d = locality_defect(&m, 10.0).unwrap();
        assert!((d - 10.0 / 100.1).abs() < 1e-12, "{d}");
    }

    #[test]
    fn locality_defect_erf_hand_value() {
        // beta0 = 1, tau = 1, r = 10: erf(10) / 10 ~= 0.1.
        let m = ElementaryMapParams::radial(
            MapFamily::RadialErf,
            PointMatrix::from_scalars(&[0.0]),
            1.0,
        )
        .unwrap()
        .with_params(&[1.0, 0.0])
        .unwrap();
        let d = locality_defect(&m, 10.0).unwrap();
        assert!((d - 0.1).abs() < 1e-6, "{d}");
    }

    #[test]
    fn locality_defect_decays_far_from_center() {
        // The iq profile peaks at r = sqrt(tau); past there it must decay,
        // and by 100 tau the bump is a small fraction of its value at tau.
        // That fraction is 100(1+tau)/(1+1e4 tau) for iq, below 2% only
        // for tau around 1 or larger; erf satisfies 2% at every tau.
        for tau in [1.0, 2.0] {
            let m = iq_1d(0.0, tau).with_params(&[1.0, 0.0]).unwrap();
            let near = locality_defect(&m, tau).unwrap();
            let far = locality_defect(&m, 100.0 * tau).unwrap();
            assert!(far < 0.02 * near, "iq tau={tau}: {far} vs {near}");
            let mut prev = locality_defect(&m, tau.sqrt() * 1.01).unwrap();
            for i in 1..40 {
                let r = tau.sqrt() * 1.01 + i as f64 * 0.5;
                let cur = locality_defect(&m, r).unwrap();
                assert!(cur < prev, "iq not decreasing at r={r}");
                prev = cur;
            }
        }
        for tau in [0.1, 1.0] {
            let m = ElementaryMapParams::radial(
                MapFamily::RadialErf,
                PointMatrix::from_scalars(&[0.0]),
                tau,
            )
            .unwrap()
            .with_params(&[1.0, 0.0])
            .unwrap();
            let near = locality_defect(&m, tau).unwrap();
            let far = locality_defect(&m, 100.0 * tau).unwrap();
            assert!(far < 0.02 * near, "erf tau={tau}: {far} vs {near}");
            let mut prev = locality_defect(&m, 0.05 * tau).unwrap();
            for i in 1..40 {
                let r = tau * (0.05 + i as f64 * 0.25);
                let cur = locality_defect(&m, r).unwrap();
                assert!(cur < prev, "erf not decreasing at r={r}");
                prev = cur;
            }
        }
    }

    #[test]
    fn locality_defect_guards() {
        let multi = ElementaryMapParams::multinomial(1, 2).unwrap();
        assert!(locality_defect(&multi, 1.0).is_err());
        let with_shift = iq_1d(0.0, 0.1).with_params(&[1.0, 0.5]).unwrap();
        assert!(locality_defect(&with_shift, 1.0).is_err());
    }
}
