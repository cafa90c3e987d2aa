//! The adversarial test function: a signed Monte Carlo kernel convolution
//! over two representer clouds, with optional parameter branches that move
//! the clouds through an elementary map before evaluation.

use crate::config::{BandwidthPolicy, SolverConfig};
use crate::error::{Error, Result};
use crate::maps::ElementaryMapParams;
use crate::points::PointMatrix;
use crate::rng::{substream, StreamId};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Positive and negative representer clouds with per-representer kernel
/// bandwidths. The clouds evolve across iterations; bandwidths are either
/// fixed or refreshed from the data each iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresenterEnsemble {
    pub positive: PointMatrix,
    pub negative: PointMatrix,
    pub bandwidths_pos: Vec<f64>,
    pub bandwidths_neg: Vec<f64>,
}

impl RepresenterEnsemble {
    pub fn new(
        positive: PointMatrix,
        negative: PointMatrix,
        bandwidths_pos: Vec<f64>,
        bandwidths_neg: Vec<f64>,
    ) -> Result<Self> {
        if positive.len() != negative.len() {
            return Err(Error::Data(format!(
                "representer clouds differ in size: {} vs {}",
                positive.len(),
                negative.len()
            )));
        }
        if positive.dim() != negative.dim() {
            return Err(Error::DimensionMismatch {
                expected: positive.dim(),
                actual: negative.dim(),
            });
        }
        if bandwidths_pos.len() != positive.len() || bandwidths_neg.len() != negative.len() {
            return Err(Error::Data("bandwidth vector length mismatch".into()));
        }
        for &s in bandwidths_pos.iter().chain(&bandwidths_neg) {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Data(format!("bandwidths must be positive, got {s}")));
            }
        }
        Ok(RepresenterEnsemble { positive, negative, bandwidths_pos, bandwidths_neg })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.positive.dim()
    }
}

/// Draw both clouds i.i.d. from N(0, c^2 I) in R^dim using the dedicated
/// representer substreams of the run seed, so other random consumers never
/// shift these draws. Bandwidths start at the fixed value or at a 1.0
/// placeholder that the adaptive policy overwrites before first use.
pub fn init_representers(cfg: &SolverConfig, dim: usize) -> Result<RepresenterEnsemble> {
    crate::config::validate_config(cfg)?;
    if dim == 0 {
        return Err(Error::Data("representer dimension must be at least 1".into()));
    }
    let c = cfg.representer_init_scale;
    let draw = |id: StreamId| -> PointMatrix {
        let mut rng = substream(cfg.rng_seed, id);
        let mut pts = PointMatrix::with_capacity(cfg.n_representers, dim);
        let mut row = vec![0.0; dim];
        for _ in 0..cfg.n_representers {
            for v in row.iter_mut() {
                *v = c * rng.sample::<f64, _>(StandardNormal);
            }
            pts.push_row(&row);
        }
        pts
    };
    let positive = draw(StreamId::RepresentersPos);
    let negative = draw(StreamId::RepresentersNeg);
    let bw = match cfg.testfn_bandwidth {
        BandwidthPolicy::Fixed(s) => s,
        BandwidthPolicy::Adaptive => 1.0,
    };
    RepresenterEnsemble::new(
        positive,
        negative,
        vec![bw; cfg.n_representers],
        vec![bw; cfg.n_representers],
    )
}

/// A concrete evaluation view of the test function: clouds already pushed
/// through their branches (if any). Building one never mutates the
/// ensemble, which is what lets the optimizer probe many branches.
#[derive(Clone, Debug)]
pub struct TestFunction {
    pos: PointMatrix,
    neg: PointMatrix,
    bw_pos: Vec<f64>,
    bw_neg: Vec<f64>,
}

fn branch_cloud(cloud: &PointMatrix, branch: Option<&ElementaryMapParams>) -> Result<PointMatrix> {
    match branch {
        None => Ok(cloud.clone()),
        Some(m) => {
            if m.dim() != cloud.dim() {
                return Err(Error::DimensionMismatch { expected: cloud.dim(), actual: m.dim() });
            }
            let mut out = cloud.clone();
            let mut buf = vec![0.0; cloud.dim()];
            for i in 0..cloud.len() {
                m.apply_to(cloud.row(i), &mut buf);
                out.row_mut(i).copy_from_slice(&buf);
            }
            Ok(out)
        }
    }
}

impl TestFunction {
    pub fn from_ensemble(e: &RepresenterEnsemble) -> Self {
        TestFunction {
            pos: e.positive.clone(),
            neg: e.negative.clone(),
            bw_pos: e.bandwidths_pos.clone(),
            bw_neg: e.bandwidths_neg.clone(),
        }
    }

    pub fn branched(
        e: &RepresenterEnsemble,
        branch_pos: Option<&ElementaryMapParams>,
        branch_neg: Option<&ElementaryMapParams>,
    ) -> Result<Self> {
        Ok(TestFunction {
            pos: branch_cloud(&e.positive, branch_pos)?,
            neg: branch_cloud(&e.negative, branch_neg)?,
            bw_pos: e.bandwidths_pos.clone(),
            bw_neg: e.bandwidths_neg.clone(),
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.pos.dim()
    }

    #[inline]
    pub fn n_representers(&self) -> usize {
        self.pos.len()
    }

    /// Branched cloud positions, for snapshotting committed states.
    pub fn clouds(&self) -> (&PointMatrix, &PointMatrix) {
        (&self.pos, &self.neg)
    }

    pub fn bandwidths(&self) -> (&[f64], &[f64]) {
        (&self.bw_pos, &self.bw_neg)
    }

    fn check_point(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: y.len() });
        }
        Ok(())
    }

    /// F(y): averaged signed kernel sum; always in (-1, 1). The two clouds
    /// accumulate separately and cancel in one final subtraction, so equal
    /// clouds give exactly zero and swapping clouds exactly negates.
    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        self.check_point(y)?;
        let inv = 1.0 / self.pos.len() as f64;
        let mut pos = 0.0;
        for (b, &s) in self.pos.rows().zip(&self.bw_pos) {
            pos += kernel_value(b, y, s);
        }
        let mut neg = 0.0;
        for (b, &s) in self.neg.rows().zip(&self.bw_neg) {
            neg += kernel_value(b, y, s);
        }
        Ok(inv * pos - inv * neg)
    }

    /// Gradient of F in y: exact kernel-gradient sum, same signs/weights.
    pub fn grad_y(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_point(y)?;
        let mut out = vec![0.0; y.len()];
        self.grad_y_into(y, &mut out);
        Ok(out)
    }

    /// Gradient accumulation into `out` (overwritten). Cloud-separated
    /// sums keep the same exact-cancellation property as `eval`.
    pub fn grad_y_into(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let inv = 1.0 / self.pos.len() as f64;
        for (b, &s) in self.pos.rows().zip(&self.bw_pos) {
            accum_kernel_grad(b, y, s, inv, out);
        }
        let mut neg = vec![0.0; y.len()];
        for (b, &s) in self.neg.rows().zip(&self.bw_neg) {
            accum_kernel_grad(b, y, s, inv, &mut neg);
        }
        for (o, n) in out.iter_mut().zip(&neg) {
            *o -= n;
        }
    }

    /// Hessian of F in y; bitwise symmetric by construction.
    pub fn hess_y(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(y)?;
        let d = y.len();
        let mut h: DMatrix<f64> = DMatrix::zeros(d, d);
        let mut hn: DMatrix<f64> = DMatrix::zeros(d, d);
        let inv = 1.0 / self.pos.len() as f64;
        for (b, &s) in self.pos.rows().zip(&self.bw_pos) {
            accum_kernel_hess(b, y, s, inv, &mut h);
        }
        for (b, &s) in self.neg.rows().zip(&self.bw_neg) {
            accum_kernel_hess(b, y, s, inv, &mut hn);
        }
        h -= hn;
        Ok(h)
    }
}

#[inline]
pub(crate) fn kernel_value(b: &[f64], y: &[f64], sigma: f64) -> f64 {
    (-crate::kernel::sq_dist(b, y) / (2.0 * sigma * sigma)).exp()
}

/// out += w * K(b,y) * (b - y) / sigma^2, returning K for reuse.
#[inline]
pub(crate) fn accum_kernel_grad(b: &[f64], y: &[f64], sigma: f64, w: f64, out: &mut [f64]) -> f64 {
    let inv_s2 = 1.0 / (sigma * sigma);
    let k = (-crate::kernel::sq_dist(b, y) * 0.5 * inv_s2).exp();
    let c = w * k * inv_s2;
    for (o, (&bk, &yk)) in out.iter_mut().zip(b.iter().zip(y)) {
        *o += c * (bk - yk);
    }
    k
}

/// h += w * K(b,y) * [ (b-y)(b-y)^T / sigma^4 - I / sigma^2 ].
/// Mirrored entries share one rounded product, keeping h bitwise symmetric.
#[inline]
pub(crate) fn accum_kernel_hess(b: &[f64], y: &[f64], sigma: f64, w: f64, h: &mut DMatrix<f64>) {
    let d = b.len();
    let inv_s2 = 1.0 / (sigma * sigma);
    let k = (-crate::kernel::sq_dist(b, y) * 0.5 * inv_s2).exp();
    let c = w * k * inv_s2 * inv_s2;
    for a in 0..d {
        let da = b[a] - y[a];
        for bb in a..d {
            let t = c * (da * (b[bb] - y[bb]));
            h[(a, bb)] += t;
            if bb != a {
                h[(bb, a)] += t;
            }
        }
        h[(a, a)] -= w * k * inv_s2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MapFamily;
    use rand::Rng;

    fn tf_1d(pos: &[f64], neg: &[f64], sigma: f64) -> TestFunction {
        let e = RepresenterEnsemble::new(
            PointMatrix::from_scalars(pos),
            PointMatrix::from_scalars(neg),
            vec![sigma; pos.len()],
            vec![sigma; neg.len()],
        )
        .unwrap();
        TestFunction::from_ensemble(&e)
    }

    fn random_cloud(rng: &mut impl Rng, n_r: usize, d: usize) -> PointMatrix {
        let mut p = PointMatrix::with_capacity(n_r, d);
        let mut row = vec![0.0; d];
        for _ in 0..n_r {
            for v in row.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            p.push_row(&row);
        }
        p
    }

    fn random_tf(rng: &mut impl Rng, n_r: usize, d: usize) -> TestFunction {
        let pos = random_cloud(rng, n_r, d);
        let neg = random_cloud(rng, n_r, d);
        let bw_pos = (0..n_r).map(|_| 0.3 + rng.gen::<f64>()).collect();
        let bw_neg = (0..n_r).map(|_| 0.3 + rng.gen::<f64>()).collect();
        let e = RepresenterEnsemble::new(pos, neg, bw_pos, bw_neg).unwrap();
        TestFunction::from_ensemble(&e)
    }

    #[test]
    fn identical_clouds_cancel_exactly() {
        let pts = PointMatrix::from_rows(&[vec![0.1, 0.2], vec![-0.5, 1.0], vec![2.0, -1.0]])
            .unwrap();
        let e = RepresenterEnsemble::new(pts.clone(), pts, vec![0.7; 3], vec![0.7; 3]).unwrap();
        let tf = TestFunction::from_ensemble(&e);
        for y in [[0.0, 0.0], [1.5, -0.3], [10.0, 10.0]] {
            assert_eq!(tf.eval(&y).unwrap(), 0.0);
            assert_eq!(tf.grad_y(&y).unwrap(), vec![0.0, 0.0]);
            assert_eq!(tf.hess_y(&y).unwrap().amax(), 0.0);
        }
    }

    #[test]
    fn single_pair_hand_value() {
        // b+ = 0, b- = 2, sigma = 1, y = 0: F = 1 - e^{-2}.
        let tf = tf_1d(&[0.0], &[2.0], 1.0);
        let v = tf.eval(&[0.0]).unwrap();
        assert!((v - (1.0 - (-2.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.8646647167633873).abs() < 1e-15);
    }

    #[test]
    fn values_strictly_inside_unit_interval() {
        let mut rng = substream(7, StreamId::Evaluation);
        for _ in 0..50 {
            let tf = random_tf(&mut rng, 5, 2);
            let y = [rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0];
            let v = tf.eval(&y).unwrap();
            assert!(v > -1.0 && v < 1.0, "{v}");
        }
    }

    #[test]
    fn swapping_clouds_negates_exactly() {
        let mut rng = substream(8, StreamId::Evaluation);
        let tf = random_tf(&mut rng, 7, 3);
        let swapped = TestFunction {
            pos: tf.neg.clone(),
            neg: tf.pos.clone(),
            bw_pos: tf.bw_neg.clone(),
            bw_neg: tf.bw_pos.clone(),
        };
        for _ in 0..20 {
            let y: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let a = tf.eval(&y).unwrap();
            let b = swapped.eval(&y).unwrap();
            assert_eq!(a, -b);
        }
    }

    #[test]
    fn zero_parameter_branch_equals_no_branch() {
        let mut rng = substream(9, StreamId::Evaluation);
        let e = {
            let tf = random_tf(&mut rng, 4, 2);
            RepresenterEnsemble::new(tf.pos, tf.neg, tf.bw_pos, tf.bw_neg).unwrap()
        };
        let skel = ElementaryMapParams::radial(
            MapFamily::RadialErf,
            PointMatrix::from_rows(&[vec![0.2, -0.1]]).unwrap(),
            0.5,
        )
        .unwrap();
        let plain = TestFunction::from_ensemble(&e);
        let branched = TestFunction::branched(&e, Some(&skel), Some(&skel)).unwrap();
        for _ in 0..10 {
            let y: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            assert_eq!(plain.eval(&y).unwrap(), branched.eval(&y).unwrap());
        }
    }

    #[test]
    fn branch_moves_only_its_cloud() {
        // One representer each; shift the positive cloud by +0.3 via the
        // branch and verify against the closed-form two-kernel expression.
        let e = RepresenterEnsemble::new(
            PointMatrix::from_scalars(&[0.5]),
            PointMatrix::from_scalars(&[-0.5]),
            vec![0.8],
            vec![0.8],
        )
        .unwrap();
        let branch = ElementaryMapParams::radial(
            MapFamily::RadialIq,
            PointMatrix::from_scalars(&[0.0]),
            1.0,
        )
        .unwrap()
        .with_params(&[0.0, 0.3])
        .unwrap();
        let tf = TestFunction::branched(&e, Some(&branch), None).unwrap();
        let y = [0.1];
        let expect = kernel_value(&[0.8], &y, 0.8) - kernel_value(&[-0.5], &y, 0.8);
        assert!((tf.eval(&y).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn grad_and_hess_match_finite_differences() {
        let mut rng = substream(10, StreamId::Evaluation);
        let h = 1e-5;
        for d in [1usize, 2, 3] {
            for _ in 0..8 {
                let tf = random_tf(&mut rng, 6, d);
                let y: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 3.0 - 1.5).collect();
                let g = tf.grad_y(&y).unwrap();
                let hess = tf.hess_y(&y).unwrap();
                for k in 0..d {
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[k] += h;
                    ym[k] -= h;
                    let fd = (tf.eval(&yp).unwrap() - tf.eval(&ym).unwrap()) / (2.0 * h);
                    assert!((g[k] - fd).abs() < 1e-5 * (1.0 + fd.abs()), "d={d} k={k}");
                    let gp = tf.grad_y(&yp).unwrap();
                    let gm = tf.grad_y(&ym).unwrap();
                    for l in 0..d {
                        let fd2 = (gp[l] - gm[l]) / (2.0 * h);
                        assert!(
                            (hess[(l, k)] - fd2).abs() < 1e-5 * (1.0 + fd2.abs()),
                            "hess d={d} ({l},{k})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hessian_exactly_symmetric() {
        let mut rng = substream(11, StreamId::Evaluation);
        let tf = random_tf(&mut rng, 5, 3);
        let y = [0.3, -0.8, 1.1];
        let h = tf.hess_y(&y).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(h[(a, b)], h[(b, a)]);
            }
        }
    }

    #[test]
    fn far_field_decay() {
        let tf = tf_1d(&[0.0, 0.5], &[-0.3, 0.2], 0.9);
        // Beyond 6 max-sigma from every representer: |F| < 2e-8.
        let y = [0.5 + 6.0 * 0.9 + 1e-6];
        assert!(tf.eval(&y).unwrap().abs() < 2e-8);
    }

    #[test]
    fn gradient_norm_bound() {
        // Each kernel term's gradient peaks at e^{-1/2}/sigma (attained at
        // distance sigma), so the averaged field obeys the max over terms.
        let mut rng = substream(12, StreamId::Evaluation);
        for _ in 0..20 {
            let tf = random_tf(&mut rng, 6, 2);
            let bound = tf
                .bw_pos
                .iter()
                .chain(&tf.bw_neg)
                .map(|s| (-0.5f64).exp() / s)
                .fold(0.0f64, f64::max);
            let y: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let g = tf.grad_y(&y).unwrap();
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= bound + 1e-12, "{n} vs {bound}");
        }
    }

    #[test]
    fn init_representers_degenerate_scale() {
        let mut cfg = SolverConfig::default();
        cfg.n_representers = 10;
        cfg.representer_init_scale = 0.0;
        let e = init_representers(&cfg, 3).unwrap();
        assert!(e.positive.iter_all().all(|v| *v == 0.0));
        assert!(e.negative.iter_all().all(|v| *v == 0.0));
    }

    #[test]
    fn init_representers_matches_target_covariance() {
        let mut cfg = SolverConfig::default();
        cfg.n_representers = 100;
        cfg.representer_init_scale = 0.5;
        cfg.rng_seed = 3;
        let e = init_representers(&cfg, 2).unwrap();
        for cloud in [&e.positive, &e.negative] {
            let mean = cloud.mean();
            let mut cov = [[0.0f64; 2]; 2];
            for r in cloud.rows() {
                for a in 0..2 {
                    for b in 0..2 {
                        cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / 100.0;
                    }
                }
            }
            let tol = 3.0 / (100f64).sqrt();
            for a in 0..2 {
                for b in 0..2 {
                    let want = if a == b { 0.25 } else { 0.0 };
                    assert!((cov[a][b] - want).abs() < tol, "cov[{a}][{b}]={}", cov[a][b]);
                }
            }
        }
    }

    #[test]
    fn init_representers_deterministic_and_independent() {
        let mut cfg = SolverConfig::default();
        cfg.n_representers = 20;
        cfg.rng_seed = 99;
        let a = init_representers(&cfg, 2).unwrap();
        let b = init_representers(&cfg, 2).unwrap();
        assert_eq!(a, b);
        // Positive and negative clouds come from different substreams.
        assert_ne!(a.positive, a.negative);
    }

    #[test]
    fn init_representers_bandwidth_policies() {
        let mut cfg = SolverConfig::default();
        cfg.n_representers = 5;
        cfg.testfn_bandwidth = BandwidthPolicy::Fixed(0.2);
        let e = init_representers(&cfg, 1).unwrap();
        assert!(e.bandwidths_pos.iter().all(|&s| s == 0.2));
        cfg.testfn_bandwidth = BandwidthPolicy::Adaptive;
        let e = init_representers(&cfg, 1).unwrap();
        assert!(e.bandwidths_neg.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn mismatched_bandwidth_length_rejected() {
        let p = PointMatrix::from_scalars(&[0.0, 1.0]);
        let err = RepresenterEnsemble::new(p.clone(), p, vec![1.0], vec![1.0, 1.0]);
        assert!(err.is_err());
    }
}
