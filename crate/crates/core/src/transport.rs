//! The transport flow: elementary steps E(y; a) = y + grad(F(y;a) - F(y;0)),
//! their composition, replay on arbitrary points, and accumulated
//! log-determinant Jacobians for density estimation.

use crate::error::{Error, Result};
use crate::maps::ElementaryMapParams;
use crate::points::PointMatrix;
use crate::precondition::AffineTransform;
use crate::testfn::{accum_kernel_grad, accum_kernel_hess, RepresenterEnsemble, TestFunction};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const FLOW_FORMAT_VERSION: u32 = 1;

/// One committed iteration of the general algorithm: the representer
/// ensemble as of that iteration (pre-commit clouds and the bandwidths in
/// effect) plus the accepted transport branch for each cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelStep {
    pub ensemble: RepresenterEnsemble,
    pub alpha_pos: ElementaryMapParams,
    pub alpha_neg: ElementaryMapParams,
}

/// One committed iteration of the fixed-feature algorithm: the transport
/// increment z -> z + sum_j a_j grad phi_j(z), stored as a multinomial map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStep {
    pub map: ElementaryMapParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FlowStep {
    Kernel(KernelStep),
    Feature(FeatureStep),
}

impl FlowStep {
    pub fn dim(&self) -> usize {
        match self {
            FlowStep::Kernel(k) => k.ensemble.dim(),
            FlowStep::Feature(f) => f.map.dim(),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            FlowStep::Kernel(k) => k.alpha_pos.is_identity() && k.alpha_neg.is_identity(),
            FlowStep::Feature(f) => f.map.is_identity(),
        }
    }
}

/// Serialized flow: header (dimension, config echo, optional whitening
/// transforms at both ends) and the append-only committed step list.
/// JSON round-trips are byte-exact, which is what makes replay
/// deterministic across processes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub version: u32,
    dim: usize,
    pub config_echo: serde_json::Value,
    pub pre: Option<AffineTransform>,
    pub post: Option<AffineTransform>,
    steps: Vec<FlowStep>,
}

impl FlowRecord {
    pub fn new(dim: usize, config_echo: serde_json::Value) -> Self {
        FlowRecord {
            version: FLOW_FORMAT_VERSION,
            dim,
            config_echo,
            pre: None,
            post: None,
            steps: Vec::new(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> &[FlowStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push_step(&mut self, step: FlowStep) -> Result<()> {
        if step.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: step.dim() });
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn push_kernel_step(
        &mut self,
        ensemble: RepresenterEnsemble,
        alpha_pos: ElementaryMapParams,
        alpha_neg: ElementaryMapParams,
    ) -> Result<()> {
        if alpha_pos.dim() != ensemble.dim() || alpha_neg.dim() != ensemble.dim() {
            return Err(Error::DimensionMismatch {
                expected: ensemble.dim(),
                actual: alpha_pos.dim(),
            });
        }
        self.push_step(FlowStep::Kernel(KernelStep { ensemble, alpha_pos, alpha_neg }))
    }

    pub fn push_feature_step(&mut self, map: ElementaryMapParams) -> Result<()> {
        self.push_step(FlowStep::Feature(FeatureStep { map }))
    }

    /// Prefix of the flow with only the first `n_steps` committed steps;
    /// both whitening transforms are kept. Replaying truncations yields
    /// intermediate snapshots of the transport.
    pub fn truncated(&self, n_steps: usize) -> FlowRecord {
        let mut fr = self.clone();
        fr.steps.truncate(n_steps);
        fr
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<FlowRecord> {
        #[derive(Deserialize)]
        struct Probe {
            version: Option<u32>,
        }
        match serde_json::from_str::<FlowRecord>(s) {
            Ok(fr) => {
                if fr.version != FLOW_FORMAT_VERSION {
                    return Err(Error::Version {
                        found: fr.version,
                        expected: FLOW_FORMAT_VERSION,
                    });
                }
                Ok(fr)
            }
            Err(e) => {
                if let Ok(p) = serde_json::from_str::<Probe>(s) {
                    if let Some(v) = p.version {
                        if v != FLOW_FORMAT_VERSION {
                            return Err(Error::Version { found: v, expected: FLOW_FORMAT_VERSION });
                        }
                    }
                }
                Err(Error::Serialization(e.to_string()))
            }
        }
    }
}

/// Log-determinant of one step's Jacobian at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLogDet {
    pub log_abs_det: f64,
    pub negative: bool,
    pub singular: bool,
}

impl StepLogDet {
    pub const IDENTITY: StepLogDet =
        StepLogDet { log_abs_det: 0.0, negative: false, singular: false };

    fn from_det(det: f64) -> StepLogDet {
        if !det.is_finite() || det.abs() < 1e-300 {
            StepLogDet { log_abs_det: f64::NEG_INFINITY, negative: false, singular: true }
        } else {
            StepLogDet { log_abs_det: det.abs().ln(), negative: det < 0.0, singular: false }
        }
    }
}

/// Running log-determinant along one point's trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogDetAccumulator {
    pub total: f64,
    pub negatives: usize,
    pub singular: bool,
}

impl LogDetAccumulator {
    pub fn add_step(&mut self, s: StepLogDet) {
        self.total += s.log_abs_det;
        self.negatives += s.negative as usize;
        self.singular |= s.singular;
    }

    pub fn add_affine(&mut self, log_abs_det: f64) {
        self.total += log_abs_det;
    }
}

enum EvalKind {
    Identity,
    Kernel { branched: TestFunction, base: TestFunction },
    Feature { map: ElementaryMapParams },
}

/// Prepared per-step evaluator: branch clouds once, then apply to many
/// points. Zero-parameter steps short-circuit to the exact identity.
pub struct StepEvaluator {
    dim: usize,
    kind: EvalKind,
}

impl StepEvaluator {
    pub fn new(step: &FlowStep) -> Result<StepEvaluator> {
        let dim = step.dim();
        if step.is_identity() {
            return Ok(StepEvaluator { dim, kind: EvalKind::Identity });
        }
        let kind = match step {
            FlowStep::Kernel(k) => EvalKind::Kernel {
                branched: TestFunction::branched(
                    &k.ensemble,
                    Some(&k.alpha_pos),
                    Some(&k.alpha_neg),
                )?,
                base: TestFunction::from_ensemble(&k.ensemble),
            },
            FlowStep::Feature(f) => EvalKind::Feature { map: f.map.clone() },
        };
        Ok(StepEvaluator { dim, kind })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// E(y): `out` receives the stepped point; `y` is left untouched.
    pub fn apply(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.dim);
        match &self.kind {
            EvalKind::Identity => out.copy_from_slice(y),
            EvalKind::Feature { map } => map.apply_to(y, out),
            EvalKind::Kernel { branched, base } => {
                out.copy_from_slice(y);
                let inv = 1.0 / branched.n_representers() as f64;
                let (bp, bn) = branched.clouds();
                let (zp, zn) = base.clouds();
                let (bw_p, bw_n) = branched.bandwidths();
                for (b, &s) in bp.rows().zip(bw_p) {
                    accum_kernel_grad(b, y, s, inv, out);
                }
                for (b, &s) in bn.rows().zip(bw_n) {
                    accum_kernel_grad(b, y, s, -inv, out);
                }
                for (b, &s) in zp.rows().zip(bw_p) {
                    accum_kernel_grad(b, y, s, -inv, out);
                }
                for (b, &s) in zn.rows().zip(bw_n) {
                    accum_kernel_grad(b, y, s, inv, out);
                }
            }
        }
    }

    /// Jacobian dE/dy at `y`.
    pub fn jacobian(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim;
        match &self.kind {
            EvalKind::Identity => Ok(DMatrix::identity(d, d)),
            EvalKind::Feature { map } => map.point_jacobian(y),
            EvalKind::Kernel { branched, base } => {
                let mut j = DMatrix::identity(d, d);
                let inv = 1.0 / branched.n_representers() as f64;
                let (bp, bn) = branched.clouds();
                let (zp, zn) = base.clouds();
                let (bw_p, bw_n) = branched.bandwidths();
                for (b, &s) in bp.rows().zip(bw_p) {
                    accum_kernel_hess(b, y, s, inv, &mut j);
                }
                for (b, &s) in bn.rows().zip(bw_n) {
                    accum_kernel_hess(b, y, s, -inv, &mut j);
                }
                for (b, &s) in zp.rows().zip(bw_p) {
                    accum_kernel_hess(b, y, s, -inv, &mut j);
                }
                for (b, &s) in zn.rows().zip(bw_n) {
                    accum_kernel_hess(b, y, s, inv, &mut j);
                }
                Ok(j)
            }
        }
    }

    pub fn logdet(&self, y: &[f64]) -> Result<StepLogDet> {
        if matches!(self.kind, EvalKind::Identity) {
            return Ok(StepLogDet::IDENTITY);
        }
        let det = self.jacobian(y)?.lu().determinant();
        Ok(StepLogDet::from_det(det))
    }

    /// Advance every row of `pts` in place.
    pub fn advance(&self, pts: &mut PointMatrix) -> Result<()> {
        if pts.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: pts.dim() });
        }
        if matches!(self.kind, EvalKind::Identity) {
            return Ok(());
        }
        let mut buf = vec![0.0; self.dim];
        for i in 0..pts.len() {
            buf.copy_from_slice(pts.row(i));
            self.apply(&buf, pts.row_mut(i));
        }
        Ok(())
    }

    /// Advance rows in place while accumulating each trajectory's
    /// log-determinant (evaluated at the pre-step position).
    pub fn advance_with_logdet(
        &self,
        pts: &mut PointMatrix,
        acc: &mut [LogDetAccumulator],
    ) -> Result<()> {
        if acc.len() != pts.len() {
            return Err(Error::Data("log-det accumulator length mismatch".into()));
        }
        if pts.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: pts.dim() });
        }
        if matches!(self.kind, EvalKind::Identity) {
            return Ok(());
        }
        let mut buf = vec![0.0; self.dim];
        for i in 0..pts.len() {
            buf.copy_from_slice(pts.row(i));
            acc[i].add_step(self.logdet(&buf)?);
            self.apply(&buf, pts.row_mut(i));
        }
        Ok(())
    }
}

pub fn step_apply(step: &FlowStep, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != step.dim() {
        return Err(Error::DimensionMismatch { expected: step.dim(), actual: y.len() });
    }
    let ev = StepEvaluator::new(step)?;
    let mut out = vec![0.0; y.len()];
    ev.apply(y, &mut out);
    Ok(out)
}

pub fn step_logdet(step: &FlowStep, y: &[f64]) -> Result<StepLogDet> {
    if y.len() != step.dim() {
        return Err(Error::DimensionMismatch { expected: step.dim(), actual: y.len() });
    }
    StepEvaluator::new(step)?.logdet(y)
}

/// Replay the whole flow (affine ends included) on one point.
pub fn flow_apply(fr: &FlowRecord, y: &[f64]) -> Result<Vec<f64>> {
    let mut pts = PointMatrix::with_capacity(1, y.len());
    pts.push_row(y);
    let out = flow_apply_batch(fr, &pts)?;
    Ok(out.row(0).to_vec())
}

/// Replay the whole flow on a batch of points (step-major order, one
/// prepared evaluator per step).
pub fn flow_apply_batch(fr: &FlowRecord, pts: &PointMatrix) -> Result<PointMatrix> {
    if pts.dim() != fr.dim() {
        return Err(Error::DimensionMismatch { expected: fr.dim(), actual: pts.dim() });
    }
    let mut cur = match &fr.pre {
        Some(t) => t.apply_points(pts),
        None => pts.clone(),
    };
    for step in fr.steps() {
        StepEvaluator::new(step)?.advance(&mut cur)?;
    }
    if let Some(t) = &fr.post {
        let mut out = PointMatrix::with_capacity(cur.len(), cur.dim());
        for r in cur.rows() {
            out.push_row(&t.apply_inverse(r));
        }
        cur = out;
    }
    Ok(cur)
}

/// Replay with per-point accumulated log-determinants, including the
/// affine contributions (+logdet pre, -logdet post).
pub fn flow_apply_batch_with_logdet(
    fr: &FlowRecord,
    pts: &PointMatrix,
) -> Result<(PointMatrix, Vec<LogDetAccumulator>)> {
    if pts.dim() != fr.dim() {
        return Err(Error::DimensionMismatch { expected: fr.dim(), actual: pts.dim() });
    }
    let mut acc = vec![LogDetAccumulator::default(); pts.len()];
    let mut cur = match &fr.pre {
        Some(t) => {
            let ld = t.log_abs_det();
            acc.iter_mut().for_each(|a| a.add_affine(ld));
            t.apply_points(pts)
        }
        None => pts.clone(),
    };
    for step in fr.steps() {
        StepEvaluator::new(step)?.advance_with_logdet(&mut cur, &mut acc)?;
    }
    if let Some(t) = &fr.post {
        let ld = t.log_abs_det();
        let mut out = PointMatrix::with_capacity(cur.len(), cur.dim());
        for r in cur.rows() {
            out.push_row(&t.apply_inverse(r));
        }
        acc.iter_mut().for_each(|a| a.add_affine(-ld));
        cur = out;
    }
    Ok((cur, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MapFamily;
    use crate::testfn::kernel_value;
    use rand::Rng;

    fn ensemble_1d(pos: &[f64], neg: &[f64], sigma: f64) -> RepresenterEnsemble {
        RepresenterEnsemble::new(
            PointMatrix::from_scalars(pos),
            PointMatrix::from_scalars(neg),
            vec![sigma; pos.len()],
            vec![sigma; neg.len()],
        )
        .unwrap()
    }

    fn radial_skeleton_1d(center: f64, tau: f64) -> ElementaryMapParams {
        ElementaryMapParams::radial(
            MapFamily::RadialIq,
            PointMatrix::from_scalars(&[center]),
            tau,
        )
        .unwrap()
    }

    fn small_kernel_step_2d(rng: &mut impl Rng, scale: f64) -> FlowStep {
        let mut cloud = |n: usize| {
            let mut p = PointMatrix::with_capacity(n, 2);
            for _ in 0..n {
                p.push_row(&[rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0]);
            }
            p
        };
        let pos = cloud(4);
        let neg = cloud(4);
        let e = RepresenterEnsemble::new(pos, neg, vec![0.7; 4], vec![0.7; 4]).unwrap();
        let skel = ElementaryMapParams::radial(
            MapFamily::RadialErf,
            PointMatrix::from_rows(&[vec![0.1, -0.2]]).unwrap(),
            0.5,
        )
        .unwrap();
        let params: Vec<f64> = (0..3).map(|_| scale * (rng.gen::<f64>() - 0.5)).collect();
        let alpha_pos = skel.with_params(&params).unwrap();
        let params: Vec<f64> = (0..3).map(|_| scale * (rng.gen::<f64>() - 0.5)).collect();
        let alpha_neg = skel.with_params(&params).unwrap();
        FlowStep::Kernel(KernelStep { ensemble: e, alpha_pos, alpha_neg })
    }

    #[test]
    fn zero_alpha_step_is_exact_identity() {
        let e = ensemble_1d(&[0.5, -0.2], &[0.1, 0.9], 0.8);
        let skel = radial_skeleton_1d(0.0, 0.5);
        let step = FlowStep::Kernel(KernelStep {
            ensemble: e,
            alpha_pos: skel.clone(),
            alpha_neg: skel,
        });
        for &y in &[-1.5f64, 0.0, 0.3, 7.0] {
            let out = step_apply(&step, &[y]).unwrap();
            assert_eq!(out[0].to_bits(), y.to_bits());
        }
        assert_eq!(step_logdet(&step, &[0.4]).unwrap(), StepLogDet::IDENTITY);
    }

    #[test]
    fn single_pair_branch_hand_value() {
        // N_r = 1: shifting b+ by eps moves y by the kernel-gradient
        // difference [K'(b+ + eps, y) - K'(b+, y)]; the negative cloud
        // cancels between branched and base.
        let (bp, bn, sigma, eps, y) = (0.5, -0.3, 0.8, 0.1, 0.2);
        let e = ensemble_1d(&[bp], &[bn], sigma);
        let shift_skel = radial_skeleton_1d(0.0, 1.0);
        let alpha_pos = shift_skel.with_params(&[0.0, eps]).unwrap();
        let alpha_neg = shift_skel.clone();
        let step = FlowStep::Kernel(KernelStep { ensemble: e, alpha_pos, alpha_neg });
        let out = step_apply(&step, &[y]).unwrap();
        let kg = |b: f64| kernel_value(&[b], &[y], sigma) * (b - y) / (sigma * sigma);
        let expect = y + kg(bp + eps) - kg(bp);
        assert!((out[0] - expect).abs() < 1e-14, "{} vs {expect}", out[0]);
    }

    #[test]
    fn step_matches_gradient_of_branch_difference() {
        // E(y) - y must equal the gradient of F(.;a) - F(.;0) by finite
        // differences of the two evaluation views.
        let mut rng = crate::rng::substream(21, crate::rng::StreamId::Evaluation);
        let step = small_kernel_step_2d(&mut rng, 0.4);
        let (branched, base) = match &step {
            FlowStep::Kernel(k) => (
                TestFunction::branched(&k.ensemble, Some(&k.alpha_pos), Some(&k.alpha_neg))
                    .unwrap(),
                TestFunction::from_ensemble(&k.ensemble),
            ),
            _ => unreachable!(),
        };
        let h = 1e-5;
        for _ in 0..10 {
            let y = [rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
            let out = step_apply(&step, &y).unwrap();
            for k in 0..2 {
                let mut yp = y;
                let mut ym = y;
                yp[k] += h;
                ym[k] -= h;
                let g = |pt: &[f64]| {
                    branched.eval(pt).unwrap() - base.eval(pt).unwrap()
                };
                let fd = (g(&yp) - g(&ym)) / (2.0 * h);
                assert!((out[k] - y[k] - fd).abs() < 1e-5, "component {k}");
            }
        }
    }

    #[test]
    fn logdet_matches_fd_jacobian() {
        let mut rng = crate::rng::substream(22, crate::rng::StreamId::Evaluation);
        let step = small_kernel_step_2d(&mut rng, 0.3);
        let h = 1e-5;
        for _ in 0..10 {
            let y = [rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
            let ld = step_logdet(&step, &y).unwrap();
            assert!(!ld.singular);
            let mut j = [[0.0f64; 2]; 2];
            for col in 0..2 {
                let mut yp = y;
                let mut ym = y;
                yp[col] += h;
                ym[col] -= h;
                let fp = step_apply(&step, &yp).unwrap();
                let fm = step_apply(&step, &ym).unwrap();
                for row in 0..2 {
                    j[row][col] = (fp[row] - fm[row]) / (2.0 * h);
                }
            }
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            assert!((ld.log_abs_det - det.abs().ln()).abs() < 1e-4);
        }
    }

    #[test]
    fn flow_fold_equals_stepwise() {
        let mut rng = crate::rng::substream(23, crate::rng::StreamId::Evaluation);
        let mut fr = FlowRecord::new(2, serde_json::Value::Null);
        for _ in 0..3 {
            fr.push_step(small_kernel_step_2d(&mut rng, 0.3)).unwrap();
        }
        let y = [0.4, -0.6];
        let direct = flow_apply(&fr, &y).unwrap();
        let mut manual = y.to_vec();
        for step in fr.steps() {
            manual = step_apply(step, &manual).unwrap();
        }
        assert_eq!(direct, manual);
    }

    #[test]
    fn empty_flow_is_identity() {
        let fr = FlowRecord::new(3, serde_json::Value::Null);
        let y = [1.0, -2.0, 0.25];
        let out = flow_apply(&fr, &y).unwrap();
        assert_eq!(out, y.to_vec());
    }

    #[test]
    fn flow_logdet_additivity_vs_fd() {
        let mut rng = crate::rng::substream(24, crate::rng::StreamId::Evaluation);
        let mut fr = FlowRecord::new(2, serde_json::Value::Null);
        for _ in 0..3 {
            fr.push_step(small_kernel_step_2d(&mut rng, 0.25)).unwrap();
        }
        let h = 1e-5;
        for _ in 0..10 {
            let y = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let mut pts = PointMatrix::with_capacity(1, 2);
            pts.push_row(&y);
            let (_, acc) = flow_apply_batch_with_logdet(&fr, &pts).unwrap();
            let mut j = [[0.0f64; 2]; 2];
            for col in 0..2 {
                let mut yp = y;
                let mut ym = y;
                yp[col] += h;
                ym[col] -= h;
                let fp = flow_apply(&fr, &yp).unwrap();
                let fm = flow_apply(&fr, &ym).unwrap();
                for row in 0..2 {
                    j[row][col] = (fp[row] - fm[row]) / (2.0 * h);
                }
            }
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            assert!(
                (acc[0].total - det.abs().ln()).abs() < 1e-3,
                "{} vs {}",
                acc[0].total,
                det.abs().ln()
            );
        }
    }

    #[test]
    fn feature_step_applies_multinomial_map() {
        let map = ElementaryMapParams::multinomial(1, 2)
            .unwrap()
            .with_params(&[0.5, 0.1])
            .unwrap();
        let step = FlowStep::Feature(FeatureStep { map: map.clone() });
        let y = [0.7];
        assert_eq!(step_apply(&step, &y).unwrap(), map.apply(&y));
        // Jacobian of b + 0.5 + 0.1*2b is 1.2 everywhere.
        let ld = step_logdet(&step, &y).unwrap();
        assert!((ld.log_abs_det - 1.2f64.ln()).abs() < 1e-14);
        assert!(!ld.negative && !ld.singular);
    }

    #[test]
    fn json_round_trip_is_byte_exact() {
        let mut rng = crate::rng::substream(25, crate::rng::StreamId::Evaluation);
        let mut fr = FlowRecord::new(2, serde_json::json!({"n_representers": 4}));
        fr.push_step(small_kernel_step_2d(&mut rng, 0.3)).unwrap();
        let s1 = fr.to_json().unwrap();
        let back = FlowRecord::from_json(&s1).unwrap();
        assert_eq!(back, fr);
        let s2 = back.to_json().unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn version_mismatch_detected() {
        let fr = FlowRecord::new(1, serde_json::Value::Null);
        let s = fr.to_json().unwrap().replace("\"version\":1", "\"version\":999");
        match FlowRecord::from_json(&s) {
            Err(Error::Version { found: 999, expected }) => {
                assert_eq!(expected, FLOW_FORMAT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatches_rejected() {
        let mut fr = FlowRecord::new(2, serde_json::Value::Null);
        let map = ElementaryMapParams::multinomial(1, 2).unwrap();
        assert!(fr.push_feature_step(map).is_err());
        assert!(flow_apply(&fr, &[0.0, 0.0, 0.0]).is_err());
    }
}
