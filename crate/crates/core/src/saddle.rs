//! Per-iteration minimax machinery: the objective J(alpha, beta), its
//! gradient, and the trust-region implicit step on the ascent-descent
//! vector field V = (-grad_alpha J, +grad_beta J).
//!
//! The finite-difference gradient is the reference contract; the kernel
//! objective overrides it with an algebraically identical analytic version
//! (validated against the FD one in tests) because the solver calls it
//! thousands of times per fit.

use crate::config::ImplicitMode;
use crate::error::{Error, Result};
use crate::kernel::sq_dist;
use crate::maps::ElementaryMapParams;
use crate::points::PointMatrix;
use crate::testfn::{RepresenterEnsemble, TestFunction};
use nalgebra::{DMatrix, DVector};

/// Objective value with its two members: the transport cost term and the
/// expectation-gap (constraint) term. J = cost + constraint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveParts {
    pub j: f64,
    pub cost: f64,
    pub constraint: f64,
}

/// Outcome of one saddle step. `dalpha` is already descent-signed (commit
/// it as the transport branch), `dbeta` ascent-signed (add it to the test
/// function branch).
#[derive(Clone, Debug)]
pub struct StepResult {
    pub dalpha: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub preclip_norm: f64,
    pub clipped: bool,
    pub j_before: f64,
    pub cost_before: f64,
    pub constraint_before: f64,
    pub j_after: Option<f64>,
    pub fell_back: bool,
}

/// A two-block minimax objective: minimized over the first `p_alpha`
/// parameters, maximized over the remaining `p_beta`. Parameters are
/// packed as [alpha, beta].
pub trait SaddleObjective {
    fn p_alpha(&self) -> usize;
    fn p_beta(&self) -> usize;

    fn eval(&self, theta: &[f64]) -> Result<ObjectiveParts>;

    /// Gradient of J at `theta`. Default: central finite differences of
    /// `eval` with h = 1e-5 * max(1, |theta|_inf).
    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>>
    where
        Self: Sized,
    {
        fd_gradient(self, theta)
    }

    /// Objective parts and gradient at the origin.
    fn origin_grad(&self) -> Result<(ObjectiveParts, Vec<f64>)>
    where
        Self: Sized,
    {
        let z = vec![0.0; self.p_alpha() + self.p_beta()];
        Ok((self.eval(&z)?, self.grad(&z)?))
    }

    /// Parts, gradient, and Hessian of J at the origin. Default assembles
    /// the Hessian column by column from forward differences of `grad`.
    fn origin_grad_hessian(&self) -> Result<(ObjectiveParts, Vec<f64>, DMatrix<f64>)>
    where
        Self: Sized,
    {
        let p = self.p_alpha() + self.p_beta();
        let (parts, g0) = self.origin_grad()?;
        let h = 1e-5;
        let mut hess: DMatrix<f64> = DMatrix::zeros(p, p);
        let mut theta = vec![0.0; p];
        for j in 0..p {
            theta[j] = h;
            let gj = self.grad(&theta)?;
            theta[j] = 0.0;
            for i in 0..p {
                hess[(i, j)] = (gj[i] - g0[i]) / h;
            }
        }
        Ok((parts, g0, hess))
    }
}

/// Central finite-difference gradient of the objective: the reference
/// implementation of the gradient contract.
pub fn fd_gradient<O: SaddleObjective>(obj: &O, theta: &[f64]) -> Result<Vec<f64>> {
    let p = obj.p_alpha() + obj.p_beta();
    if theta.len() != p {
        return Err(Error::DimensionMismatch { expected: p, actual: theta.len() });
    }
    let scale = theta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let h = 1e-5 * scale.max(1.0);
    let mut g = vec![0.0; p];
    let mut t = theta.to_vec();
    for j in 0..p {
        let orig = t[j];
        t[j] = orig + h;
        let jp = obj.eval(&t)?.j;
        t[j] = orig - h;
        let jm = obj.eval(&t)?.j;
        t[j] = orig;
        g[j] = (jp - jm) / (2.0 * h);
    }
    Ok(g)
}

/// Flip gradient into the ascent-descent field V = (-g_alpha, +g_beta).
fn to_field(g: &[f64], p_alpha: usize) -> Vec<f64> {
    g.iter()
        .enumerate()
        .map(|(i, &v)| if i < p_alpha { -v } else { v })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn finish_step<O: SaddleObjective>(
    obj: &O,
    mut delta: Vec<f64>,
    parts: ObjectiveParts,
    trust_region: f64,
    fell_back: bool,
    want_j_after: bool,
) -> Result<StepResult> {
    let preclip_norm = norm(&delta);
    let clipped = preclip_norm > trust_region;
    if clipped {
        let s = trust_region / preclip_norm;
        delta.iter_mut().for_each(|v| *v *= s);
    }
    let j_after = if want_j_after { Some(obj.eval(&delta)?.j) } else { None };
    let (pa, _) = (obj.p_alpha(), obj.p_beta());
    let dbeta = delta.split_off(pa);
    Ok(StepResult {
        dalpha: delta,
        dbeta,
        preclip_norm,
        clipped,
        j_before: parts.j,
        cost_before: parts.cost,
        constraint_before: parts.constraint,
        j_after,
        fell_back,
    })
}

/// Plain simultaneous gradient-descent-ascent step, trust-region clipped.
pub fn explicit_step<O: SaddleObjective>(
    obj: &O,
    eta: f64,
    trust_region: f64,
    want_j_after: bool,
) -> Result<StepResult> {
    let (parts, g0) = obj.origin_grad()?;
    let v0 = to_field(&g0, obj.p_alpha());
    let delta: Vec<f64> = v0.iter().map(|v| eta * v).collect();
    finish_step(obj, delta, parts, trust_region, false, want_j_after)
}

fn resolve_mode(mode: ImplicitMode, p: usize) -> ImplicitMode {
    match mode {
        ImplicitMode::Auto => {
            if p <= 32 {
                ImplicitMode::Dense
            } else {
                ImplicitMode::MatrixFree
            }
        }
        other => other,
    }
}

/// One linearized implicit-Euler step on the saddle field: solve
/// (I - eta * dV(0)) * delta = eta * V(0), then clip to the trust region.
/// A singular or badly failed solve falls back to the explicit step for
/// this iteration and sets `fell_back`.
pub fn implicit_step<O: SaddleObjective>(
    obj: &O,
    eta: f64,
    trust_region: f64,
    mode: ImplicitMode,
    want_j_after: bool,
) -> Result<StepResult> {
    if !(eta > 0.0) || !(trust_region > 0.0) {
        return Err(Error::Data("implicit step needs eta > 0 and trust region > 0".into()));
    }
    let (pa, pb) = (obj.p_alpha(), obj.p_beta());
    let p = pa + pb;
    match resolve_mode(mode, p) {
        ImplicitMode::Dense => {
            let (parts, g0, hess) = obj.origin_grad_hessian()?;
            if g0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    iteration: 0,
                    detail: "non-finite gradient at origin".into(),
                });
            }
            let v0 = to_field(&g0, pa);
            if v0.iter().all(|&v| v == 0.0) {
                return finish_step(obj, vec![0.0; p], parts, trust_region, false, want_j_after);
            }
            // A = I - eta * S * H, with S flipping the alpha rows.
            let mut a = DMatrix::identity(p, p);
            for r in 0..p {
                let s = if r < pa { 1.0 } else { -1.0 };
                for c in 0..p {
                    a[(r, c)] += eta * s * hess[(r, c)];
                }
            }
            let rhs = DVector::from_iterator(p, v0.iter().map(|&v| eta * v));
            match a.lu().solve(&rhs) {
                Some(sol) => {
                    let delta: Vec<f64> = sol.iter().copied().collect();
                    if delta.iter().any(|v| !v.is_finite()) {
                        let d: Vec<f64> = v0.iter().map(|&v| eta * v).collect();
                        return finish_step(obj, d, parts, trust_region, true, want_j_after);
                    }
                    finish_step(obj, delta, parts, trust_region, false, want_j_after)
                }
                None => {
                    let d: Vec<f64> = v0.iter().map(|&v| eta * v).collect();
                    finish_step(obj, d, parts, trust_region, true, want_j_after)
                }
            }
        }
        ImplicitMode::MatrixFree => {
            let (parts, g0) = obj.origin_grad()?;
            let v0 = to_field(&g0, pa);
            if v0.iter().all(|&v| v == 0.0) {
                return finish_step(obj, vec![0.0; p], parts, trust_region, false, want_j_after);
            }
            let eps = 1e-5;
            let matvec = |w: &[f64]| -> Result<Vec<f64>> {
                let wn = norm(w);
                if wn == 0.0 {
                    return Ok(vec![0.0; p]);
                }
                let probe: Vec<f64> = w.iter().map(|&v| eps * v / wn).collect();
                let gw = obj.grad(&probe)?;
                let vw = to_field(&gw, pa);
                // A w = w - eta * (V(eps w/|w|) - V(0)) / eps * |w|
                Ok(w
                    .iter()
                    .zip(vw.iter().zip(&v0))
                    .map(|(&wi, (&a, &b))| wi - eta * (a - b) / eps * wn)
                    .collect())
            };
            let b: Vec<f64> = v0.iter().map(|&v| eta * v).collect();
            match gmres_lite(matvec, &b, 8.min(p)) {
                Ok((delta, resid)) if resid <= 0.5 * norm(&b) && delta.iter().all(|v| v.is_finite()) => {
                    finish_step(obj, delta, parts, trust_region, false, want_j_after)
                }
                _ => finish_step(obj, b, parts, trust_region, true, want_j_after),
            }
        }
        ImplicitMode::Auto => unreachable!("resolved above"),
    }
}

/// Fixed-depth GMRES (no restarts): Arnoldi to `k` vectors, then a small
/// least-squares solve. Returns the solution and its residual estimate.
fn gmres_lite<F>(mut matvec: F, b: &[f64], k: usize) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let p = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok((vec![0.0; p], 0.0));
    }
    let mut basis: Vec<Vec<f64>> = vec![b.iter().map(|v| v / bnorm).collect()];
    let mut h = DMatrix::<f64>::zeros(k + 1, k);
    let mut depth = 0;
    for j in 0..k {
        let mut w = matvec(&basis[j])?;
        for (i, q) in basis.iter().enumerate() {
            let dot: f64 = w.iter().zip(q).map(|(a, b)| a * b).sum();
            h[(i, j)] = dot;
            w.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let wn = norm(&w);
        h[(j + 1, j)] = wn;
        depth = j + 1;
        if wn < 1e-12 * bnorm {
            break;
        }
        w.iter_mut().for_each(|v| *v /= wn);
        basis.push(w);
    }
    let hbar = h.view((0, 0), (depth + 1, depth)).into_owned();
    let mut rhs: DVector<f64> = DVector::zeros(depth + 1);
    rhs[0] = bnorm;
    let y = hbar
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Numeric { iteration: 0, detail: format!("gmres solve: {e}") })?;
    let resid = (&rhs - &hbar * &y).norm();
    let mut x = vec![0.0; p];
    for (j, yj) in y.iter().enumerate() {
        for (xi, qi) in x.iter_mut().zip(&basis[j]) {
            *xi += yj * qi;
        }
    }
    Ok((x, resid))
}

// ===== the kernel-objective saddle state =====

/// Per-iteration state of the general algorithm: J(alpha, beta) with the
/// transport branch E(z; alpha) = z + grad(F(z;alpha) - F(z;0)) applied to
/// the current transported source, and the candidate test function branch
/// beta applied to the representer clouds.
///
/// Parameter packing: [alpha_pos | alpha_neg | beta_pos | beta_neg], each
/// block one skeleton-parameter vector.
pub struct SaddleState<'a> {
    x: &'a PointMatrix,
    z: &'a PointMatrix,
    y: &'a PointMatrix,
    ensemble: &'a RepresenterEnsemble,
    skeleton: &'a ElementaryMapParams,
    /// Map parameter directions v_m(b_r) per cloud, flattened as
    /// [m * n_r * d + r * d ..], identical for alpha and beta branches.
    vdirs: [Vec<f64>; 2],
    p_map: usize,
}

impl<'a> SaddleState<'a> {
    pub fn new(
        x: &'a PointMatrix,
        z: &'a PointMatrix,
        y: &'a PointMatrix,
        ensemble: &'a RepresenterEnsemble,
        skeleton: &'a ElementaryMapParams,
    ) -> Result<Self> {
        let d = z.dim();
        if x.dim() != d || y.dim() != d || ensemble.dim() != d || skeleton.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: skeleton.dim() });
        }
        if x.len() != z.len() {
            return Err(Error::Data("source and transported clouds differ in length".into()));
        }
        if x.is_empty() || y.is_empty() {
            return Err(Error::EmptyInput("saddle state samples"));
        }
        if !skeleton.is_identity() {
            return Err(Error::Data("saddle skeleton must have zero parameters".into()));
        }
        let p_map = skeleton.param_len();
        let n_r = ensemble.len();
        let mut vdirs = [vec![0.0; p_map * n_r * d], vec![0.0; p_map * n_r * d]];
        for (c, cloud) in [&ensemble.positive, &ensemble.negative].iter().enumerate() {
            for m in 0..p_map {
                for r in 0..n_r {
                    let v = skeleton.param_direction(m, cloud.row(r));
                    vdirs[c][(m * n_r + r) * d..(m * n_r + r + 1) * d].copy_from_slice(&v);
                }
            }
        }
        Ok(SaddleState { x, z, y, ensemble, skeleton, vdirs, p_map })
    }

    #[inline]
    fn dim(&self) -> usize {
        self.z.dim()
    }

    #[inline]
    fn vdir(&self, cloud: usize, m: usize, r: usize) -> &[f64] {
        let d = self.dim();
        let n_r = self.ensemble.len();
        &self.vdirs[cloud][(m * n_r + r) * d..(m * n_r + r + 1) * d]
    }

    fn split<'t>(&self, theta: &'t [f64]) -> [&'t [f64]; 4] {
        let p = self.p_map;
        [&theta[..p], &theta[p..2 * p], &theta[2 * p..3 * p], &theta[3 * p..4 * p]]
    }

    fn cloud(&self, c: usize) -> &PointMatrix {
        if c == 0 {
            &self.ensemble.positive
        } else {
            &self.ensemble.negative
        }
    }

    fn bandwidths(&self, c: usize) -> &[f64] {
        if c == 0 {
            &self.ensemble.bandwidths_pos
        } else {
            &self.ensemble.bandwidths_neg
        }
    }

    fn branch_positions(&self, c: usize, params: &[f64]) -> Result<PointMatrix> {
        let cloud = self.cloud(c);
        if params.iter().all(|&v| v == 0.0) {
            return Ok(cloud.clone());
        }
        let map = self.skeleton.with_params(params)?;
        let mut out = cloud.clone();
        let mut buf = vec![0.0; self.dim()];
        for r in 0..cloud.len() {
            map.apply_to(cloud.row(r), &mut buf);
            out.row_mut(r).copy_from_slice(&buf);
        }
        Ok(out)
    }

    /// Analytic gradient plus objective parts at arbitrary theta; shared
    /// by `grad` and the matrix-free directional probes.
    fn analytic_grad(&self, theta: &[f64]) -> Result<(ObjectiveParts, Vec<f64>)> {
        let p = self.p_map;
        if theta.len() != 4 * p {
            return Err(Error::DimensionMismatch { expected: 4 * p, actual: theta.len() });
        }
        let [a_pos, a_neg, b_pos, b_neg] = self.split(theta);
        let d = self.dim();
        let n = self.z.len();
        let m_cnt = self.y.len();
        let n_r = self.ensemble.len();
        let inv_r = 1.0 / n_r as f64;

        let ua = [self.branch_positions(0, a_pos)?, self.branch_positions(1, a_neg)?];
        let ub = [self.branch_positions(0, b_pos)?, self.branch_positions(1, b_neg)?];
        let alpha_zero = [
            a_pos.iter().all(|&v| v == 0.0),
            a_neg.iter().all(|&v| v == 0.0),
        ];

        // Transported points A_i = z_i + grad F_alpha(z_i) - grad F_0(z_i),
        // plus the K(u_r, z_i) tables reused by the alpha-gradient pass.
        let mut a_pts = self.z.clone();
        let mut ktab = [vec![0.0; n_r * n], vec![0.0; n_r * n]];
        for c in 0..2 {
            let sgn = if c == 0 { 1.0 } else { -1.0 };
            let base = self.cloud(c);
            for r in 0..n_r {
                let s2 = self.bandwidths(c)[r].powi(2);
                let u = ua[c].row(r);
                for i in 0..n {
                    let k = (-sq_dist(u, self.z.row(i)) / (2.0 * s2)).exp();
                    ktab[c][r * n + i] = k;
                    if !alpha_zero[c] {
                        let w = sgn * inv_r * k / s2;
                        let zi = self.z.row(i);
                        let out = a_pts.row_mut(i);
                        for t in 0..d {
                            out[t] += w * (u[t] - zi[t]);
                        }
                    }
                }
                if !alpha_zero[c] {
                    // Subtract the unbranched gradient of this cloud.
                    let b = base.row(r);
                    for i in 0..n {
                        let k = (-sq_dist(b, self.z.row(i)) / (2.0 * s2)).exp();
                        let w = -sgn * inv_r * k / s2;
                        let zi = self.z.row(i);
                        let out = a_pts.row_mut(i);
                        for t in 0..d {
                            out[t] += w * (b[t] - zi[t]);
                        }
                    }
                }
            }
        }

        let mut cost = 0.0;
        for i in 0..n {
            cost += sq_dist(self.x.row(i), a_pts.row(i)) * 0.5;
        }
        cost /= n as f64;

        // Beta passes: w-gradients at A_i, the per-representer moment R_r,
        // the beta gradient, and the constraint term.
        let mut wgrad = vec![0.0; n * d];
        let mut g = vec![0.0; 4 * p];
        let mut constraint = 0.0;
        for c in 0..2 {
            let sgn = if c == 0 { 1.0 } else { -1.0 };
            for r in 0..n_r {
                let s2 = self.bandwidths(c)[r].powi(2);
                let u = ub[c].row(r);
                let mut rvec = vec![0.0; d];
                for i in 0..n {
                    let ai = a_pts.row(i);
                    let k = (-sq_dist(u, ai) / (2.0 * s2)).exp();
                    constraint += sgn * inv_r * k / n as f64;
                    let w = sgn * inv_r * k / s2;
                    let wr = k / (s2 * n as f64);
                    for t in 0..d {
                        wgrad[i * d + t] += w * (u[t] - ai[t]);
                        rvec[t] += wr * (ai[t] - u[t]);
                    }
                }
                for j in 0..m_cnt {
                    let yj = self.y.row(j);
                    let k = (-sq_dist(u, yj) / (2.0 * s2)).exp();
                    constraint -= sgn * inv_r * k / m_cnt as f64;
                    let wr = k / (s2 * m_cnt as f64);
                    for t in 0..d {
                        rvec[t] -= wr * (yj[t] - u[t]);
                    }
                }
                for m in 0..p {
                    let v = self.vdir(c, m, r);
                    let dot: f64 = rvec.iter().zip(v).map(|(a, b)| a * b).sum();
                    g[(2 + c) * p + m] += sgn * inv_r * dot;
                }
            }
        }

        // w_i = (A_i - x_i) + grad F_beta(A_i), unnormalized by N.
        let mut wvec = vec![0.0; n * d];
        for i in 0..n {
            let (ai, xi) = (a_pts.row(i), self.x.row(i));
            for t in 0..d {
                wvec[i * d + t] = (ai[t] - xi[t]) + wgrad[i * d + t];
            }
        }

        // Alpha gradient from the cached K tables.
        let inv_n = 1.0 / n as f64;
        for c in 0..2 {
            let sgn = if c == 0 { 1.0 } else { -1.0 };
            for r in 0..n_r {
                let s2 = self.bandwidths(c)[r].powi(2);
                let u = ua[c].row(r);
                let mut svec = vec![0.0; d];
                let mut qvec = vec![0.0; d];
                for i in 0..n {
                    let k = ktab[c][r * n + i];
                    let zi = self.z.row(i);
                    let wi = &wvec[i * d..(i + 1) * d];
                    let mut we = 0.0;
                    for t in 0..d {
                        we += wi[t] * (u[t] - zi[t]);
                    }
                    let ks = k / s2;
                    let kq = ks / s2 * we;
                    for t in 0..d {
                        svec[t] += ks * wi[t];
                        qvec[t] += kq * (u[t] - zi[t]);
                    }
                }
                let w8 = sgn * inv_r * inv_n;
                for m in 0..p {
                    let v = self.vdir(c, m, r);
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += (svec[t] - qvec[t]) * v[t];
                    }
                    g[c * p + m] += w8 * dot;
                }
            }
        }

        let j = cost + constraint;
        if !j.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                iteration: 0,
                detail: "non-finite objective or gradient".into(),
            });
        }
        Ok((ObjectiveParts { j, cost, constraint }, g))
    }

    /// Analytic gradient, parts, and Hessian at the origin. All four
    /// branches sit at zero there, so a single pair of kernel tables
    /// (clouds vs transported source, clouds vs target) feeds everything.
    fn origin_all(&self) -> Result<(ObjectiveParts, Vec<f64>, DMatrix<f64>)> {
        let p = self.p_map;
        let d = self.dim();
        let n = self.z.len();
        let m_cnt = self.y.len();
        let n_r = self.ensemble.len();
        let inv_r = 1.0 / n_r as f64;
        let inv_n = 1.0 / n as f64;
        let inv_m = 1.0 / m_cnt as f64;

        let mut ktab = [vec![0.0; n_r * n], vec![0.0; n_r * n]];
        // Per-point F_0 gradient and Hessian, and per-r moments.
        let mut grad0 = vec![0.0; n * d];
        let mut hess0 = vec![0.0; n * d * d];
        let mut f0_z = 0.0;
        let mut f0_y = 0.0;
        // R_r and M_r moments, stored per (cloud, r).
        let mut rmom = [vec![0.0; n_r * d], vec![0.0; n_r * d]];
        let mut mmom = [vec![0.0; n_r * d * d], vec![0.0; n_r * d * d]];

        for c in 0..2 {
            let sgn = if c == 0 { 1.0 } else { -1.0 };
            let cloud = self.cloud(c);
            for r in 0..n_r {
                let s2 = self.bandwidths(c)[r].powi(2);
                let b = cloud.row(r);
                let rv = &mut rmom[c][r * d..(r + 1) * d];
                let mv = &mut mmom[c][r * d * d..(r + 1) * d * d];
                for i in 0..n {
                    let zi = self.z.row(i);
                    let mut e2 = 0.0;
                    for t in 0..d {
                        let e = b[t] - zi[t];
                        e2 += e * e;
                    }
                    let k = (-e2 / (2.0 * s2)).exp();
                    ktab[c][r * n + i] = k;
                    f0_z += sgn * inv_r * k * inv_n;
                    let kg = sgn * inv_r * k / s2;
                    for t in 0..d {
                        let e = b[t] - zi[t];
                        grad0[i * d + t] += kg * e;
                        rv[t] -= inv_n * k / s2 * e;
                    }
                    let kh = k / (s2 * s2);
                    for a in 0..d {
                        let ea = b[a] - zi[a];
                        for bb in 0..d {
                            let eb = b[bb] - zi[bb];
                            let me = kh * ea * eb - if a == bb { k / s2 } else { 0.0 };
                            hess0[(i * d + a) * d + bb] += sgn * inv_r * me;
                            mv[a * d + bb] += inv_n * me;
                        }
                    }
                }
                for j in 0..m_cnt {
                    let yj = self.y.row(j);
                    let mut e2 = 0.0;
                    for t in 0..d {
                        let e = b[t] - yj[t];
                        e2 += e * e;
                    }
                    let k = (-e2 / (2.0 * s2)).exp();
                    f0_y += sgn * inv_r * k * inv_m;
                    for t in 0..d {
                        let e = b[t] - yj[t];
                        rv[t] += inv_m * k / s2 * e;
                    }
                    let kh = k / (s2 * s2);
                    for a in 0..d {
                        let ea = b[a] - yj[a];
                        for bb in 0..d {
                            let eb = b[bb] - yj[bb];
                            let me = kh * ea * eb - if a == bb { k / s2 } else { 0.0 };
                            mv[a * d + bb] -= inv_m * me;
                        }
                    }
                }
            }
        }

        // Objective parts at the origin: A = z exactly.
        let mut cost = 0.0;
        for i in 0..n {
            cost += sq_dist(self.x.row(i), self.z.row(i)) * 0.5;
        }
        cost *= inv_n;
        let constraint = f0_z - f0_y;

        // w_i = (z_i - x_i) + grad F_0(z_i).
        let mut wvec = vec![0.0; n * d];
        for i in 0..n {
            let (zi, xi) = (self.z.row(i), self.x.row(i));
            for t in 0..d {
                wvec[i * d + t] = (zi[t] - xi[t]) + grad0[i * d + t];
            }
        }

        // Gradient blocks.
        let mut g = vec![0.0; 4 * p];
        for c in 0..2 {
            let sgn = if c == 0 { 1.0 } else { -1.0 };
            for r in 0..n_r {
                let rv = &rmom[c][r * d..(r + 1) * d];
                for m in 0..p {
                    let v = self.vdir(c, m, r);
                    let dot: f64 = rv.iter().zip(v).map(|(a, b)| a * b).sum();
                    g[(2 + c) * p + m] += sgn * inv_r * dot;
                }
            }
        }

        // P_im = dA_i/dalpha_m, laid out [i][m][d]; m spans both clouds.
        let pa = 2 * p;
        let mut pmat = vec![0.0; n * pa * d];
        for c in 0..2 {
            let sgn = if c == 0 { 1.0 } else { -1.0 };
            let cloud = self.cloud(c);
            for r in 0..n_r {
                let s2 = self.bandwidths(c)[r].powi(2);
                let b = cloud.row(r);
                for i in 0..n {
                    let k = ktab[c][r * n + i];
                    let zi = self.z.row(i);
                    let ks = sgn * inv_r * k / s2;
                    for m in 0..p {
                        let v = self.vdir(c, m, r);
                        let mut ev = 0.0;
                        for t in 0..d {
                            ev += (b[t] - zi[t]) * v[t];
                        }
                        let pm = &mut pmat[(i * pa + c * p + m) * d..(i * pa + c * p + m + 1) * d];
                        for t in 0..d {
                            pm[t] += ks * (v[t] - (b[t] - zi[t]) * ev / s2);
                        }
                    }
                }
            }
        }

        // Alpha gradient via w contractions with P.
        for i in 0..n {
            let wi = &wvec[i * d..(i + 1) * d];
            for m in 0..pa {
                let pm = &pmat[(i * pa + m) * d..(i * pa + m + 1) * d];
                let dot: f64 = wi.iter().zip(pm).map(|(a, b)| a * b).sum();
                g[m] += inv_n * dot;
            }
        }

        // Hessian. Gram G[m][l] = (1/N) sum_i <P_im, P_il> serves both the
        // alpha-alpha quadratic term and the full alpha-beta cross block.
        let mut gram: DMatrix<f64> = DMatrix::zeros(pa, pa);
        let mut hq: DMatrix<f64> = DMatrix::zeros(pa, pa);
        let mut tmp = vec![0.0; d];
        for i in 0..n {
            let h0 = &hess0[i * d * d..(i + 1) * d * d];
            for m in 0..pa {
                let pm = &pmat[(i * pa + m) * d..(i * pa + m + 1) * d];
                for t in 0..d {
                    let mut acc = 0.0;
                    for u in 0..d {
                        acc += h0[t * d + u] * pm[u];
                    }
                    tmp[t] = acc;
                }
                for l in m..pa {
                    let pl = &pmat[(i * pa + l) * d..(i * pa + l + 1) * d];
                    let mut dg = 0.0;
                    let mut dq = 0.0;
                    for t in 0..d {
                        dg += pm[t] * pl[t];
                        dq += tmp[t] * pl[t];
                    }
                    gram[(m, l)] += inv_n * dg;
                    hq[(m, l)] += inv_n * dq;
                }
            }
        }
        for m in 0..pa {
            for l in 0..m {
                gram[(m, l)] = gram[(l, m)];
                hq[(m, l)] = hq[(l, m)];
            }
        }

        // Third-order w-terms of the alpha-alpha block (same cloud only),
        // and the beta-beta block from the M_r moments.
        let mut hw: DMatrix<f64> = DMatrix::zeros(pa, pa);
        let mut hbb: DMatrix<f64> = DMatrix::zeros(pa, pa);
        let mut am = vec![0.0; p];
        let mut wv = vec![0.0; p];
        for c in 0..2 {
            let sgn = if c == 0 { 1.0 } else { -1.0 };
            let cloud = self.cloud(c);
            for r in 0..n_r {
                let s2 = self.bandwidths(c)[r].powi(2);
                let b = cloud.row(r);
                // Pairwise direction dots for this representer.
                let mut gml = vec![0.0; p * p];
                for m in 0..p {
                    let vm = self.vdir(c, m, r);
                    for l in m..p {
                        let vl = self.vdir(c, l, r);
                        let dot: f64 = vm.iter().zip(vl).map(|(a, b)| a * b).sum();
                        gml[m * p + l] = dot;
                        gml[l * p + m] = dot;
                    }
                }
                let mv = &mmom[c][r * d * d..(r + 1) * d * d];
                for m in 0..p {
                    let vm = self.vdir(c, m, r);
                    for t in 0..d {
                        let mut acc = 0.0;
                        for u in 0..d {
                            acc += mv[t * d + u] * vm[u];
                        }
                        tmp[t] = acc;
                    }
                    for l in m..p {
                        let vl = self.vdir(c, l, r);
                        let dot: f64 = tmp.iter().zip(vl).map(|(a, b)| a * b).sum();
                        hbb[(c * p + m, c * p + l)] += sgn * inv_r * dot;
                        if l > m {
                            hbb[(c * p + l, c * p + m)] += sgn * inv_r * dot;
                        }
                    }
                }
                let w8 = sgn * inv_r * inv_n;
                for i in 0..n {
                    let k = ktab[c][r * n + i];
                    let zi = self.z.row(i);
                    let wi = &wvec[i * d..(i + 1) * d];
                    let mut we = 0.0;
                    for t in 0..d {
                        we += wi[t] * (b[t] - zi[t]);
                    }
                    for m in 0..p {
                        let v = self.vdir(c, m, r);
                        let mut a_ = 0.0;
                        let mut w_ = 0.0;
                        for t in 0..d {
                            a_ += (b[t] - zi[t]) * v[t];
                            w_ += wi[t] * v[t];
                        }
                        am[m] = a_;
                        wv[m] = w_;
                    }
                    let ks = k / s2;
                    for m in 0..p {
                        for l in m..p {
                            let val = w8
                                * ks
                                * (-am[m] * wv[l] / s2 - am[l] * wv[m] / s2
                                    + am[m] * am[l] * we / (s2 * s2)
                                    - gml[m * p + l] * we / s2);
                            hw[(c * p + m, c * p + l)] += val;
                            if l > m {
                                hw[(c * p + l, c * p + m)] += val;
                            }
                        }
                    }
                }
            }
        }

        let pt = 4 * p;
        let mut hess: DMatrix<f64> = DMatrix::zeros(pt, pt);
        for m in 0..pa {
            for l in 0..pa {
                hess[(m, l)] = gram[(m, l)] + hq[(m, l)] + hw[(m, l)];
                hess[(m, pa + l)] = gram[(m, l)];
                hess[(pa + m, l)] = gram[(m, l)];
                hess[(pa + m, pa + l)] = hbb[(m, l)];
            }
        }

        let parts = ObjectiveParts { j: cost + constraint, cost, constraint };
        if !parts.j.is_finite()
            || g.iter().any(|v| !v.is_finite())
            || hess.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Numeric {
                iteration: 0,
                detail: "non-finite objective, gradient, or curvature".into(),
            });
        }
        Ok((parts, g, hess))
    }
}

impl SaddleObjective for SaddleState<'_> {
    fn p_alpha(&self) -> usize {
        2 * self.p_map
    }

    fn p_beta(&self) -> usize {
        2 * self.p_map
    }

    /// Reference objective built from the plain evaluation views.
    fn eval(&self, theta: &[f64]) -> Result<ObjectiveParts> {
        let p = self.p_map;
        if theta.len() != 4 * p {
            return Err(Error::DimensionMismatch { expected: 4 * p, actual: theta.len() });
        }
        let [a_pos, a_neg, b_pos, b_neg] = self.split(theta);
        let map = |params: &[f64]| self.skeleton.with_params(params);
        let f_alpha =
            TestFunction::branched(self.ensemble, Some(&map(a_pos)?), Some(&map(a_neg)?))?;
        let f_base = TestFunction::from_ensemble(self.ensemble);
        let f_beta = TestFunction::branched(self.ensemble, Some(&map(b_pos)?), Some(&map(b_neg)?))?;
        let d = self.dim();
        let n = self.z.len();
        let mut ga = vec![0.0; d];
        let mut g0 = vec![0.0; d];
        let mut a = vec![0.0; d];
        let mut cost = 0.0;
        let mut constraint = 0.0;
        for i in 0..n {
            let zi = self.z.row(i);
            f_alpha.grad_y_into(zi, &mut ga);
            f_base.grad_y_into(zi, &mut g0);
            for t in 0..d {
                a[t] = zi[t] + ga[t] - g0[t];
            }
            cost += sq_dist(self.x.row(i), &a) * 0.5;
            constraint += f_beta.eval(&a)?;
        }
        cost /= n as f64;
        constraint /= n as f64;
        let mut fy = 0.0;
        for j in 0..self.y.len() {
            fy += f_beta.eval(self.y.row(j))?;
        }
        constraint -= fy / self.y.len() as f64;
        let j = cost + constraint;
        if !j.is_finite() {
            return Err(Error::Numeric { iteration: 0, detail: "non-finite objective".into() });
        }
        Ok(ObjectiveParts { j, cost, constraint })
    }

    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.analytic_grad(theta)?.1)
    }

    fn origin_grad(&self) -> Result<(ObjectiveParts, Vec<f64>)> {
        let zeros = vec![0.0; 4 * self.p_map];
        self.analytic_grad(&zeros)
    }

    fn origin_grad_hessian(&self) -> Result<(ObjectiveParts, Vec<f64>, DMatrix<f64>)> {
        self.origin_all()
    }
}

// ===== the fixed-feature objective =====

/// Algorithm state for the fixed-feature variant: F(y; beta) = <beta,
/// phi(y)> over monomial features, E(z; alpha) = z + sum alpha_j grad
/// phi_j(z), with beta accumulated across iterations. The step is taken at
/// (0, beta_n), so theta holds the increments (dalpha, dbeta).
pub struct FeatureObjective<'a> {
    x: &'a PointMatrix,
    z: &'a PointMatrix,
    y: &'a PointMatrix,
    skeleton: &'a ElementaryMapParams,
    beta_base: &'a [f64],
    exps: Vec<Vec<u32>>,
}

impl<'a> FeatureObjective<'a> {
    pub fn new(
        x: &'a PointMatrix,
        z: &'a PointMatrix,
        y: &'a PointMatrix,
        skeleton: &'a ElementaryMapParams,
        beta_base: &'a [f64],
    ) -> Result<Self> {
        if skeleton.family != crate::config::MapFamily::Multinomial {
            return Err(Error::Unsupported("fixed features require the multinomial family".into()));
        }
        let d = z.dim();
        if x.dim() != d || y.dim() != d || skeleton.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: skeleton.dim() });
        }
        if x.len() != z.len() {
            return Err(Error::Data("source and transported clouds differ in length".into()));
        }
        if beta_base.len() != skeleton.param_len() {
            return Err(Error::DimensionMismatch {
                expected: skeleton.param_len(),
                actual: beta_base.len(),
            });
        }
        let exps = crate::maps::monomial_exponents(z.dim(), skeleton.degree);
        Ok(FeatureObjective { x, z, y, skeleton, beta_base, exps })
    }

    fn features(&self, pt: &[f64], out: &mut [f64]) {
        for (k, e) in self.exps.iter().enumerate() {
            out[k] = crate::maps::monomial_value(e, pt);
        }
    }
}

impl SaddleObjective for FeatureObjective<'_> {
    fn p_alpha(&self) -> usize {
        self.skeleton.param_len()
    }

    fn p_beta(&self) -> usize {
        self.skeleton.param_len()
    }

    fn eval(&self, theta: &[f64]) -> Result<ObjectiveParts> {
        let p = self.skeleton.param_len();
        if theta.len() != 2 * p {
            return Err(Error::DimensionMismatch { expected: 2 * p, actual: theta.len() });
        }
        let (dalpha, dbeta) = theta.split_at(p);
        let beta: Vec<f64> = self.beta_base.iter().zip(dbeta).map(|(a, b)| a + b).collect();
        let emap = self.skeleton.with_params(dalpha)?;
        let d = self.z.dim();
        let n = self.z.len();
        let mut phi = vec![0.0; p];
        let mut a = vec![0.0; d];
        let mut cost = 0.0;
        let mut constraint = 0.0;
        for i in 0..n {
            emap.apply_to(self.z.row(i), &mut a);
            cost += sq_dist(self.x.row(i), &a) * 0.5;
            self.features(&a, &mut phi);
            constraint += beta.iter().zip(&phi).map(|(b, f)| b * f).sum::<f64>();
        }
        cost /= n as f64;
        constraint /= n as f64;
        let mut fy = 0.0;
        for j in 0..self.y.len() {
            self.features(self.y.row(j), &mut phi);
            fy += beta.iter().zip(&phi).map(|(b, f)| b * f).sum::<f64>();
        }
        constraint -= fy / self.y.len() as f64;
        let j = cost + constraint;
        if !j.is_finite() {
            return Err(Error::Numeric { iteration: 0, detail: "non-finite objective".into() });
        }
        Ok(ObjectiveParts { j, cost, constraint })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MapFamily;
    use crate::rng::{substream, StreamId};
    use rand::Rng;

    /// J = alpha * beta, re-centered at `at` so iterated stepping can be
    /// tested through the origin-based API.
    struct Bilinear {
        at: [f64; 2],
    }

    impl SaddleObjective for Bilinear {
        fn p_alpha(&self) -> usize {
            1
        }
        fn p_beta(&self) -> usize {
            1
        }
        fn eval(&self, t: &[f64]) -> Result<ObjectiveParts> {
            let j = (self.at[0] + t[0]) * (self.at[1] + t[1]);
            Ok(ObjectiveParts { j, cost: 0.0, constraint: j })
        }
    }

    struct Quadratic;

    impl SaddleObjective for Quadratic {
        fn p_alpha(&self) -> usize {
            1
        }
        fn p_beta(&self) -> usize {
            1
        }
        fn eval(&self, t: &[f64]) -> Result<ObjectiveParts> {
            let j = 0.5 * t[0] * t[0] - 0.5 * t[1] * t[1];
            Ok(ObjectiveParts { j, cost: 0.0, constraint: j })
        }
    }

    #[test]
    fn fd_gradient_toy_values() {
        let g = fd_gradient(&Quadratic, &[0.0, 0.0]).unwrap();
        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
        let g = fd_gradient(&Bilinear { at: [0.0, 0.0] }, &[1.0, 2.0]).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bilinear_implicit_contracts_explicit_does_not() {
        let eta = 0.1f64;
        let contraction = 1.0 / (1.0 + eta * eta).sqrt();
        let mut imp = [1.0f64, 1.0];
        let mut exp = [1.0f64, 1.0];
        let mut prev_imp = (imp[0] * imp[0] + imp[1] * imp[1]).sqrt();
        let mut prev_exp = prev_imp;
        for _ in 0..100 {
            let s = implicit_step(&Bilinear { at: imp }, eta, 1e9, ImplicitMode::Dense, false)
                .unwrap();
            assert!(!s.fell_back && !s.clipped);
            imp[0] += s.dalpha[0];
            imp[1] += s.dbeta[0];
            let n_imp = (imp[0] * imp[0] + imp[1] * imp[1]).sqrt();
            assert!(n_imp < prev_imp, "implicit iterates must contract");
            assert!(
                (n_imp - contraction * prev_imp).abs() < 1e-8 * prev_imp.max(1e-12),
                "contraction factor off: {} vs {}",
                n_imp / prev_imp,
                contraction
            );
            prev_imp = n_imp;

            let s = explicit_step(&Bilinear { at: exp }, eta, 1e9, false).unwrap();
            exp[0] += s.dalpha[0];
            exp[1] += s.dbeta[0];
            let n_exp = (exp[0] * exp[0] + exp[1] * exp[1]).sqrt();
            assert!(n_exp >= prev_exp, "explicit GDA must not contract on the bilinear game");
            prev_exp = n_exp;
        }
        // Closed forms after 100 steps from (1,1): contraction and growth
        // by sqrt(1 + eta^2) per step respectively.
        let start = 2.0f64.sqrt();
        let expect_imp = start * contraction.powi(100);
        let expect_exp = start * (1.0 + eta * eta).sqrt().powi(100);
        assert!((prev_imp - expect_imp).abs() < 1e-6 * expect_imp);
        assert!((prev_exp - expect_exp).abs() < 1e-6 * expect_exp);
        assert!(prev_exp > start, "explicit GDA must spiral outward");
    }

    #[test]
    fn equilibrium_gives_zero_step() {
        let s = implicit_step(&Bilinear { at: [0.0, 0.0] }, 0.5, 0.003, ImplicitMode::Dense, false)
            .unwrap();
        assert_eq!(s.dalpha, vec![0.0]);
        assert_eq!(s.dbeta, vec![0.0]);
        assert!(!s.clipped && !s.fell_back);
        assert_eq!(s.preclip_norm, 0.0);
    }

    #[test]
    fn trust_region_clips_to_delta() {
        // Start far out so the unclipped step is much larger than delta.
        let delta = 0.003;
        let s = implicit_step(&Bilinear { at: [5.0, -3.0] }, 1.0, delta, ImplicitMode::Dense, false)
            .unwrap();
        assert!(s.clipped);
        assert!(s.preclip_norm > delta);
        let n = (s.dalpha[0].powi(2) + s.dbeta[0].powi(2)).sqrt();
        assert!((n - delta).abs() < 1e-12 * delta);
    }

    #[test]
    fn matrix_free_matches_dense_on_bilinear() {
        let obj = Bilinear { at: [0.7, -0.4] };
        let d1 = implicit_step(&obj, 0.3, 1e9, ImplicitMode::Dense, false).unwrap();
        let d2 = implicit_step(&obj, 0.3, 1e9, ImplicitMode::MatrixFree, false).unwrap();
        assert!(!d2.fell_back);
        assert!((d1.dalpha[0] - d2.dalpha[0]).abs() < 1e-6);
        assert!((d1.dbeta[0] - d2.dbeta[0]).abs() < 1e-6);
    }

    #[test]
    fn gmres_solves_small_system() {
        // A = diag(2, 3, 4) + small off-diagonals, matvec closure form.
        let a = [[2.0, 0.1, 0.0], [0.1, 3.0, 0.2], [0.0, 0.2, 4.0]];
        let b = [1.0, -2.0, 0.5];
        let matvec = |w: &[f64]| -> Result<Vec<f64>> {
            Ok((0..3).map(|i| (0..3).map(|j| a[i][j] * w[j]).sum()).collect())
        };
        let (x, resid) = gmres_lite(matvec, &b, 3).unwrap();
        assert!(resid < 1e-10);
        for i in 0..3 {
            let ax: f64 = (0..3).map(|j| a[i][j] * x[j]).sum();
            assert!((ax - b[i]).abs() < 1e-8);
        }
    }

    // ===== kernel objective fixtures =====

    fn small_state_fixture(
        seed: u64,
        n: usize,
        m: usize,
        n_r: usize,
        d: usize,
    ) -> (PointMatrix, PointMatrix, PointMatrix, RepresenterEnsemble, ElementaryMapParams) {
        let mut rng = substream(seed, StreamId::Evaluation);
        let mut cloud = |len: usize, spread: f64| {
            let mut p = PointMatrix::with_capacity(len, d);
            let mut row = vec![0.0; d];
            for _ in 0..len {
                for v in row.iter_mut() {
                    *v = spread * (rng.gen::<f64>() - 0.5);
                }
                p.push_row(&row);
            }
            p
        };
        let x = cloud(n, 2.0);
        let z = cloud(n, 2.0);
        let y = cloud(m, 2.0);
        let pos = cloud(n_r, 1.5);
        let neg = cloud(n_r, 1.5);
        let centers = cloud(1, 1.0);
        let bw: Vec<f64> = (0..n_r).map(|_| 0.4 + 0.4 * rng.gen::<f64>()).collect();
        let bw2: Vec<f64> = (0..n_r).map(|_| 0.4 + 0.4 * rng.gen::<f64>()).collect();
        let ensemble = RepresenterEnsemble::new(pos, neg, bw, bw2).unwrap();
        let skeleton =
            ElementaryMapParams::radial(MapFamily::RadialErf, centers, 0.5).unwrap();
        (x, z, y, ensemble, skeleton)
    }

    #[test]
    fn objective_hand_value_single_representer() {
        // One representer pair, one source point, one target point, all in
        // 1D: J is a sum of six kernel terms, written out longhand here.
        let x = PointMatrix::from_scalars(&[0.0]);
        let z = PointMatrix::from_scalars(&[0.25]);
        let y = PointMatrix::from_scalars(&[1.0]);
        let (bp, bn, sg) = (0.3f64, -0.4f64, 1.0f64);
        let ensemble = RepresenterEnsemble::new(
            PointMatrix::from_scalars(&[bp]),
            PointMatrix::from_scalars(&[bn]),
            vec![sg],
            vec![sg],
        )
        .unwrap();
        let skeleton = ElementaryMapParams::radial(
            MapFamily::RadialIq,
            PointMatrix::from_scalars(&[0.2]),
            0.5,
        )
        .unwrap();
        let st = SaddleState::new(&x, &z, &y, &ensemble, &skeleton).unwrap();

        let theta = [0.05, -0.02, 0.03, 0.01, -0.04, 0.02, 0.06, -0.03];
        let iq = |b: f64, prm: &[f64]| b + prm[0] * (b - 0.2) / (0.5 + (b - 0.2).powi(2)) + prm[1];
        let k = |b: f64, pt: f64| (-(b - pt).powi(2) / 2.0).exp();
        let kg = |b: f64, pt: f64| k(b, pt) * (b - pt);
        // Transport branch at z.
        let (uap, uan) = (iq(bp, &theta[0..2]), iq(bn, &theta[2..4]));
        let a = 0.25 + (kg(uap, 0.25) - kg(uan, 0.25)) - (kg(bp, 0.25) - kg(bn, 0.25));
        let cost = (0.0 - a).powi(2) / 2.0;
        // Test function branch evaluated at A and at y.
        let (ubp, ubn) = (iq(bp, &theta[4..6]), iq(bn, &theta[6..8]));
        let constraint = (k(ubp, a) - k(ubn, a)) - (k(ubp, 1.0) - k(ubn, 1.0));
        let parts = st.eval(&theta).unwrap();
        assert!((parts.cost - cost).abs() < 1e-14, "{} vs {cost}", parts.cost);
        assert!(
            (parts.constraint - constraint).abs() < 1e-14,
            "{} vs {constraint}",
            parts.constraint
        );
        assert!((parts.j - (cost + constraint)).abs() < 1e-14);
    }

    #[test]
    fn objective_origin_properties() {
        let (x, z, y, ensemble, skeleton) = small_state_fixture(31, 6, 5, 3, 2);
        // At the origin the transport branch is the identity, so the cost
        // term is the accumulated cost between x and z.
        let st = SaddleState::new(&x, &z, &y, &ensemble, &skeleton).unwrap();
        let pt = st.p_alpha() + st.p_beta();
        let parts = st.eval(&vec![0.0; pt]).unwrap();
        let mut cost = 0.0;
        for i in 0..x.len() {
            cost += sq_dist(x.row(i), z.row(i)) * 0.5;
        }
        cost /= x.len() as f64;
        assert!((parts.cost - cost).abs() < 1e-14);
        // Identical transported/target clouds cancel the constraint.
        let st2 = SaddleState::new(&x, &z, &z, &ensemble, &skeleton).unwrap();
        let parts2 = st2.eval(&vec![0.0; pt]).unwrap();
        assert_eq!(parts2.constraint, 0.0);
    }

    #[test]
    fn analytic_gradient_matches_fd() {
        for (seed, d) in [(41u64, 1usize), (42, 2), (43, 3)] {
            let (x, z, y, ensemble, skeleton) = small_state_fixture(seed, 6, 5, 3, d);
            let st = SaddleState::new(&x, &z, &y, &ensemble, &skeleton).unwrap();
            let p = st.p_alpha() + st.p_beta();
            let mut rng = substream(seed + 100, StreamId::Evaluation);
            let theta: Vec<f64> = (0..p).map(|_| 0.1 * (rng.gen::<f64>() - 0.5)).collect();
            let fd = fd_gradient(&st, &theta).unwrap();
            let an = st.grad(&theta).unwrap();
            for j in 0..p {
                assert!(
                    (fd[j] - an[j]).abs() < 1e-6 * (1.0 + an[j].abs()),
                    "d={d} param {j}: fd {} vs analytic {}",
                    fd[j],
                    an[j]
                );
            }
            // And at the origin.
            let fd0 = fd_gradient(&st, &vec![0.0; p]).unwrap();
            let (_, an0) = st.origin_grad().unwrap();
            for j in 0..p {
                assert!((fd0[j] - an0[j]).abs() < 1e-6 * (1.0 + an0[j].abs()), "origin {j}");
            }
        }
    }

    #[test]
    fn origin_hessian_matches_fd_of_gradient() {
        for (seed, d) in [(51u64, 1usize), (52, 2)] {
            let (x, z, y, ensemble, skeleton) = small_state_fixture(seed, 5, 4, 3, d);
            let st = SaddleState::new(&x, &z, &y, &ensemble, &skeleton).unwrap();
            let p = st.p_alpha() + st.p_beta();
            let (_, g0, hess) = st.origin_grad_hessian().unwrap();
            let (_, g0b) = st.origin_grad().unwrap();
            for j in 0..p {
                assert!((g0[j] - g0b[j]).abs() < 1e-13);
            }
            let h = 1e-5;
            let mut theta = vec![0.0; p];
            for col in 0..p {
                theta[col] = h;
                let gp = st.grad(&theta).unwrap();
                theta[col] = -h;
                let gm = st.grad(&theta).unwrap();
                theta[col] = 0.0;
                for row in 0..p {
                    let fd = (gp[row] - gm[row]) / (2.0 * h);
                    assert!(
                        (hess[(row, col)] - fd).abs() < 2e-6 * (1.0 + fd.abs()),
                        "d={d} H[{row},{col}] analytic {} vs fd {fd}",
                        hess[(row, col)]
                    );
                }
            }
            // The analytic Hessian is symmetric by construction.
            for a in 0..p {
                for b in 0..p {
                    assert!((hess[(a, b)] - hess[(b, a)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn implicit_step_on_kernel_state_respects_trust_region() {
        let (x, z, y, ensemble, skeleton) = small_state_fixture(61, 8, 7, 4, 2);
        let st = SaddleState::new(&x, &z, &y, &ensemble, &skeleton).unwrap();
        let delta = 0.003;
        let s = implicit_step(&st, 1.0, delta, ImplicitMode::Auto, true).unwrap();
        let n = (norm(&s.dalpha).powi(2) + norm(&s.dbeta).powi(2)).sqrt();
        assert!(n <= delta * (1.0 + 1e-12));
        assert!(s.j_before.is_finite());
        assert!(s.j_after.unwrap().is_finite());
    }

    #[test]
    fn feature_objective_equilibrium() {
        // X = Y pointwise with zero accumulated beta: the origin is a
        // stationary point, so the FD gradient is numerically zero.
        let x = PointMatrix::from_scalars(&[0.1, -0.4, 0.7, 1.3]);
        let skeleton = ElementaryMapParams::multinomial(1, 2).unwrap();
        let beta = vec![0.0; skeleton.param_len()];
        let obj = FeatureObjective::new(&x, &x, &x, &skeleton, &beta).unwrap();
        let g = fd_gradient(&obj, &vec![0.0; 4]).unwrap();
        for v in g {
            assert!(v.abs() < 1e-8);
        }
    }

    #[test]
    fn feature_objective_hand_value() {
        // 1D features {y, y^2}: F(y) = b1 y + b2 y^2. One point each.
        let x = PointMatrix::from_scalars(&[1.0, 1.0]);
        let z = PointMatrix::from_scalars(&[1.0, 1.0]);
        let y = PointMatrix::from_scalars(&[2.0, 2.0]);
        let skeleton = ElementaryMapParams::multinomial(1, 2).unwrap();
        let beta_base = [0.3, -0.1];
        let obj = FeatureObjective::new(&x, &z, &y, &skeleton, &beta_base).unwrap();
        // dalpha = (a1, a2): E(z) = z + a1 + 2 a2 z; db shifts beta.
        let theta = [0.2, 0.05, 0.1, 0.0];
        let a = 1.0 + 0.2 + 2.0 * 0.05 * 1.0;
        let beta = [0.4, -0.1];
        let cost = (1.0 - a) * (1.0 - a) / 2.0;
        let constraint =
            beta[0] * a + beta[1] * a * a - (beta[0] * 2.0 + beta[1] * 4.0);
        let parts = obj.eval(&theta).unwrap();
        assert!((parts.cost - cost).abs() < 1e-14);
        assert!((parts.constraint - constraint).abs() < 1e-14);
    }
}
