//! Outer fitting loops: the general algorithm with kernel test functions
//! and evolving representer clouds, and the fixed-feature variant with an
//! accumulated linear test function.

use crate::config::{validate_config, BandwidthPolicy, MapFamily, OptimizerKind, SolverConfig};
use crate::density::TargetDensity;
use crate::error::{Error, Result};
use crate::kernel::{adaptive_bandwidths, default_knn};
use crate::maps::{sample_centers, ElementaryMapParams};
use crate::points::{PointMatrix, SampleSet};
use crate::precondition::{compose_into_flow, whiten, AffineTransform};
use crate::rng::{substream, StreamId};
use crate::saddle::{
    explicit_step, implicit_step, FeatureObjective, SaddleState, StepResult,
};
use crate::testfn::{init_representers, RepresenterEnsemble};
use crate::transport::{
    FlowRecord, FlowStep, KernelStep, FeatureStep, LogDetAccumulator, StepEvaluator,
};

/// One diagnostics row. J, cost, and constraint are evaluated at the
/// linearization point, before the step is applied.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iteration: usize,
    pub j: f64,
    pub cost: f64,
    pub constraint: f64,
    pub step_norm: f64,
    pub clipped: bool,
    pub fell_back: bool,
    pub j_after: Option<f64>,
    pub l1_error: Option<f64>,
    pub kl: Option<f64>,
}

/// Per-iteration records plus the pre-fit baselines the optional error
/// metrics are compared against.
#[derive(Debug, Default)]
pub struct DiagnosticsTrace {
    pub records: Vec<IterationRecord>,
    pub initial_l1: Option<f64>,
    pub initial_kl: Option<f64>,
}

impl DiagnosticsTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    Converged { at: usize },
}

/// Final adversary state: the evolved representer ensemble for the
/// general algorithm, or the accumulated feature coefficients for the
/// fixed-feature one.
#[derive(Clone, Debug)]
pub enum FinalTestFunction {
    Kernel(RepresenterEnsemble),
    Features { beta: Vec<f64>, degree: usize },
}

pub struct FitResult {
    pub flow: FlowRecord,
    pub test_function: FinalTestFunction,
    pub diagnostics: DiagnosticsTrace,
    pub termination: Termination,
    /// Final images of the training source in the original frame;
    /// replaying the flow on the source reproduces these.
    pub transported: PointMatrix,
    /// The same images in the preconditioned frame the solver works in.
    pub transported_pre: PointMatrix,
}

/// KL tracking configuration: `true_density` is what the model estimates
/// (the source law), `flow_target` is the density the flow maps onto, and
/// `eval_points` are samples from `true_density` in the original frame.
pub struct KlTracking<'a> {
    pub true_density: &'a TargetDensity,
    pub flow_target: &'a TargetDensity,
    pub eval_points: &'a PointMatrix,
}

pub struct FitOptions<'a> {
    /// Evaluate J again after applying the step (costs one extra
    /// objective evaluation per iteration).
    pub compute_j_after: bool,
    /// Reference images in original coordinates, row-paired with the
    /// source samples, for the L1 error trace.
    pub reference_images: Option<&'a PointMatrix>,
    pub kl: Option<KlTracking<'a>>,
    pub progress: Option<&'a mut dyn FnMut(&IterationRecord)>,
    /// Opt-in early stop: (window, tol) for `convergence_check`.
    pub convergence: Option<(usize, f64)>,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        FitOptions {
            compute_j_after: false,
            reference_images: None,
            kl: None,
            progress: None,
            convergence: None,
        }
    }
}

/// True when the trailing moving average of |constraint| is below `tol`
/// and the cost moving average changed by less than `tol` relative to the
/// preceding window. Needs at least two full windows of records.
pub fn convergence_check(trace: &DiagnosticsTrace, window: usize, tol: f64) -> bool {
    let n = trace.records.len();
    if window == 0 || n < 2 * window {
        return false;
    }
    let last = &trace.records[n - window..];
    let prev = &trace.records[n - 2 * window..n - window];
    let w = window as f64;
    let ma_con = last.iter().map(|r| r.constraint.abs()).sum::<f64>() / w;
    let ma_cost = last.iter().map(|r| r.cost).sum::<f64>() / w;
    let ma_prev = prev.iter().map(|r| r.cost).sum::<f64>() / w;
    let rel = (ma_cost - ma_prev).abs() / ma_cost.abs().max(1e-12);
    ma_con < tol && rel < tol
}

fn pooled(a: &PointMatrix, b: &PointMatrix) -> PointMatrix {
    let mut p = PointMatrix::with_capacity(a.len() + b.len(), a.dim());
    for r in a.rows() {
        p.push_row(r);
    }
    for r in b.rows() {
        p.push_row(r);
    }
    p
}

fn evolve_cloud(cloud: &mut PointMatrix, map: &ElementaryMapParams) {
    if map.is_identity() {
        return;
    }
    let mut buf = vec![0.0; cloud.dim()];
    for i in 0..cloud.len() {
        map.apply_to(cloud.row(i), &mut buf);
        cloud.row_mut(i).copy_from_slice(&buf);
    }
}

fn l1_error(z: &PointMatrix, reference: &PointMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        let (a, b) = (z.row(i), reference.row(i));
        for t in 0..z.dim() {
            total += (a[t] - b[t]).abs();
        }
    }
    total / z.len() as f64
}

/// Incrementally maintained KL estimate: evaluation points ride along the
/// flow as it is built, so each iteration costs one step advance instead
/// of a full replay.
struct KlState<'a> {
    true_log: Vec<f64>,
    mu: &'a TargetDensity,
    pos: PointMatrix,
    acc: Vec<LogDetAccumulator>,
    post: Option<&'a AffineTransform>,
    post_ld: f64,
}

impl<'a> KlState<'a> {
    fn new(
        opts: &KlTracking<'a>,
        pre: Option<&AffineTransform>,
        post: Option<&'a AffineTransform>,
        dim: usize,
    ) -> Result<Self> {
        if opts.eval_points.dim() != dim
            || opts.true_density.dim() != dim
            || opts.flow_target.dim() != dim
        {
            return Err(Error::DimensionMismatch { expected: dim, actual: opts.eval_points.dim() });
        }
        if opts.eval_points.is_empty() {
            return Err(Error::EmptyInput("KL evaluation points"));
        }
        let true_log: Vec<f64> =
            opts.eval_points.rows().map(|r| opts.true_density.log_pdf(r)).collect();
        let mut acc = vec![LogDetAccumulator::default(); opts.eval_points.len()];
        let pos = match pre {
            Some(t) => {
                let ld = t.log_abs_det();
                acc.iter_mut().for_each(|a| a.add_affine(ld));
                t.apply_points(opts.eval_points)
            }
            None => opts.eval_points.clone(),
        };
        let post_ld = post.map(|t| -t.log_abs_det()).unwrap_or(0.0);
        Ok(KlState { true_log, mu: opts.flow_target, pos, acc, post, post_ld })
    }

    fn advance(&mut self, ev: &StepEvaluator) -> Result<()> {
        ev.advance_with_logdet(&mut self.pos, &mut self.acc)
    }

    fn current(&self) -> f64 {
        let mut sum = 0.0;
        let mut used = 0usize;
        for i in 0..self.pos.len() {
            if self.acc[i].singular || !self.acc[i].total.is_finite() {
                continue;
            }
            let model_ld = match self.post {
                Some(t) => self.mu.log_pdf(&t.apply_inverse(self.pos.row(i))),
                None => self.mu.log_pdf(self.pos.row(i)),
            } + self.acc[i].total
                + self.post_ld;
            sum += self.true_log[i] - model_ld;
            used += 1;
        }
        if used == 0 {
            f64::INFINITY
        } else {
            sum / used as f64
        }
    }
}

/// Shared per-fit context for both algorithms.
struct LoopContext<'a> {
    cfg: &'a SolverConfig,
    x_pre: PointMatrix,
    y_pre: PointMatrix,
    z: PointMatrix,
    flow: FlowRecord,
    post: Option<AffineTransform>,
    trace: DiagnosticsTrace,
    l1_ref: Option<PointMatrix>,
}

fn setup<'a>(
    x: &SampleSet,
    y: &SampleSet,
    cfg: &'a SolverConfig,
    options: &FitOptions,
) -> Result<(LoopContext<'a>, Option<AffineTransform>)> {
    validate_config(cfg)?;
    let d = x.points.dim();
    if y.points.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: y.points.dim() });
    }
    let mut flow = FlowRecord::new(
        d,
        serde_json::to_value(cfg).map_err(|e| Error::Serialization(e.to_string()))?,
    );
    let (pre, x_pre, post, y_pre) = if cfg.precondition {
        let (pre_t, xw) = whiten(x)?;
        let (post_t, yw) = whiten(y)?;
        flow = compose_into_flow(&pre_t, &post_t, flow)?;
        (Some(pre_t), xw.points, Some(post_t), yw.points)
    } else {
        (None, x.points.clone(), None, y.points.clone())
    };
    let l1_ref = match options.reference_images {
        Some(imgs) => {
            if imgs.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: imgs.dim() });
            }
            if imgs.len() != x.points.len() {
                return Err(Error::Data(format!(
                    "reference images: {} rows for {} source samples",
                    imgs.len(),
                    x.points.len()
                )));
            }
            match &post {
                Some(t) => Some(t.apply_points(imgs)),
                None => Some(imgs.clone()),
            }
        }
        None => None,
    };
    let z = x_pre.clone();
    let ctx = LoopContext {
        cfg,
        x_pre,
        y_pre,
        z,
        flow,
        post,
        trace: DiagnosticsTrace::default(),
        l1_ref,
    };
    Ok((ctx, pre))
}

fn finish(ctx: LoopContext, test_function: FinalTestFunction, termination: Termination) -> FitResult {
    let transported = match &ctx.post {
        Some(t) => {
            let mut m = PointMatrix::with_capacity(ctx.z.len(), ctx.z.dim());
            for r in ctx.z.rows() {
                m.push_row(&t.apply_inverse(r));
            }
            m
        }
        None => ctx.z.clone(),
    };
    FitResult {
        flow: ctx.flow,
        test_function,
        diagnostics: ctx.trace,
        termination,
        transported,
        transported_pre: ctx.z,
    }
}

#[allow(clippy::too_many_arguments)]
fn record_iteration(
    ctx: &mut LoopContext,
    options: &mut FitOptions,
    kl_state: &Option<KlState>,
    n: usize,
    step: &StepResult,
) -> Result<()> {
    let applied = if step.clipped { ctx.cfg.trust_region } else { step.preclip_norm };
    let rec = IterationRecord {
        iteration: n,
        j: step.j_before,
        cost: step.cost_before,
        constraint: step.constraint_before,
        step_norm: applied,
        clipped: step.clipped,
        fell_back: step.fell_back,
        j_after: step.j_after,
        l1_error: ctx.l1_ref.as_ref().map(|r| l1_error(&ctx.z, r)),
        kl: kl_state.as_ref().map(|t| t.current()),
    };
    if !rec.j.is_finite() || !rec.cost.is_finite() || !rec.constraint.is_finite() {
        return Err(Error::Numeric { iteration: n, detail: "non-finite diagnostics".into() });
    }
    if let Some(cb) = options.progress.as_mut() {
        cb(&rec);
    }
    ctx.trace.records.push(rec);
    Ok(())
}

/// The general algorithm: whiten, initialize representers, then per
/// iteration refresh bandwidths, sample shared centers, take one implicit
/// (or explicit) saddle step at the origin, commit the transport branch
/// to the flow, and commit the adversary branch to the clouds.
pub fn fit_general(
    x: &SampleSet,
    y: &SampleSet,
    cfg: &SolverConfig,
    mut options: FitOptions,
) -> Result<FitResult> {
    let (mut ctx, pre) = setup(x, y, cfg, &options)?;
    let d = ctx.x_pre.dim();
    let mut ensemble = init_representers(cfg, d)?;
    let mut centers_rng = substream(cfg.rng_seed, StreamId::Centers);

    // KlState holds its own copy of the post map so ctx stays mutable.
    let post_clone = ctx.post.clone();
    let mut kl_state = match &options.kl {
        Some(k) => Some(KlState::new(k, pre.as_ref(), post_clone.as_ref(), d)?),
        None => None,
    };
    ctx.trace.initial_kl = kl_state.as_ref().map(|t| t.current());
    ctx.trace.initial_l1 = ctx.l1_ref.as_ref().map(|r| l1_error(&ctx.z, r));

    let adaptive_bw = matches!(cfg.testfn_bandwidth, BandwidthPolicy::Adaptive);
    let adaptive_scale = matches!(cfg.map_scale, BandwidthPolicy::Adaptive);
    let mut termination = Termination::MaxIterations;

    for n in 1..=cfg.max_iterations {
        let pool = if adaptive_bw || adaptive_scale {
            Some(pooled(&ctx.z, &ctx.y_pre))
        } else {
            None
        };
        if adaptive_bw {
            let pool = pool.as_ref().expect("pool built when adaptive");
            let k = cfg.bandwidth_knn.unwrap_or_else(|| default_knn(pool.len()));
            ensemble.bandwidths_pos = adaptive_bandwidths(
                &ensemble.positive,
                pool,
                k,
                cfg.bandwidth_min,
                cfg.bandwidth_max,
            )
            .map_err(|e| e.at_iteration(n))?;
            ensemble.bandwidths_neg = adaptive_bandwidths(
                &ensemble.negative,
                pool,
                k,
                cfg.bandwidth_min,
                cfg.bandwidth_max,
            )
            .map_err(|e| e.at_iteration(n))?;
        }

        let centers = sample_centers(&ctx.z, &ctx.y_pre, cfg.n_centers, &mut centers_rng)
            .map_err(|e| e.at_iteration(n))?;
        let scale = match cfg.map_scale {
            BandwidthPolicy::Fixed(s) => s,
            BandwidthPolicy::Adaptive => {
                let pool = pool.as_ref().expect("pool built when adaptive");
                let k = cfg.bandwidth_knn.unwrap_or_else(|| default_knn(pool.len()));
                let bw =
                    adaptive_bandwidths(&centers, pool, k, cfg.bandwidth_min, cfg.bandwidth_max)
                        .map_err(|e| e.at_iteration(n))?;
                bw.iter().sum::<f64>() / bw.len() as f64
            }
        };
        let skeleton = match cfg.map_family {
            MapFamily::Multinomial => ElementaryMapParams::multinomial(d, cfg.multinomial_degree)?,
            fam => ElementaryMapParams::radial(fam, centers, scale)?,
        };

        let state = SaddleState::new(&ctx.x_pre, &ctx.z, &ctx.y_pre, &ensemble, &skeleton)
            .map_err(|e| e.at_iteration(n))?;
        let step = match cfg.optimizer {
            OptimizerKind::Implicit => implicit_step(
                &state,
                cfg.learning_rate,
                cfg.trust_region,
                cfg.implicit_mode,
                options.compute_j_after,
            ),
            OptimizerKind::ExplicitGda => explicit_step(
                &state,
                cfg.learning_rate,
                cfg.trust_region,
                options.compute_j_after,
            ),
        }
        .map_err(|e| e.at_iteration(n))?;

        // Commit alpha: snapshot the pre-commit ensemble and advance the
        // transported cloud (and KL riders) through the new step.
        let p = skeleton.param_len();
        let alpha_pos = skeleton.with_params(&step.dalpha[..p])?;
        let alpha_neg = skeleton.with_params(&step.dalpha[p..])?;
        let fstep = FlowStep::Kernel(KernelStep {
            ensemble: ensemble.clone(),
            alpha_pos,
            alpha_neg,
        });
        {
            let ev = StepEvaluator::new(&fstep).map_err(|e| e.at_iteration(n))?;
            ev.advance(&mut ctx.z).map_err(|e| e.at_iteration(n))?;
            if let Some(t) = kl_state.as_mut() {
                t.advance(&ev).map_err(|e| e.at_iteration(n))?;
            }
        }
        ctx.flow.push_step(fstep)?;

        // Commit beta: evolve the representer clouds.
        let beta_pos = skeleton.with_params(&step.dbeta[..p])?;
        let beta_neg = skeleton.with_params(&step.dbeta[p..])?;
        evolve_cloud(&mut ensemble.positive, &beta_pos);
        evolve_cloud(&mut ensemble.negative, &beta_neg);

        record_iteration(&mut ctx, &mut options, &kl_state, n, &step)?;
        if let Some((window, tol)) = options.convergence {
            if convergence_check(&ctx.trace, window, tol) {
                termination = Termination::Converged { at: n };
                break;
            }
        }
    }
    Ok(finish(ctx, FinalTestFunction::Kernel(ensemble), termination))
}

/// The fixed-feature algorithm: monomial features up to `degree`, linear
/// test function with coefficients accumulated across iterations, and the
/// transport branch committed as feature steps.
pub fn fit_fixed_features(
    x: &SampleSet,
    y: &SampleSet,
    cfg: &SolverConfig,
    degree: usize,
    mut options: FitOptions,
) -> Result<FitResult> {
    let (mut ctx, pre) = setup(x, y, cfg, &options)?;
    let d = ctx.x_pre.dim();
    let skeleton = ElementaryMapParams::multinomial(d, degree)?;
    let p = skeleton.param_len();
    let mut beta = vec![0.0; p];

    let post_clone = ctx.post.clone();
    let mut kl_state = match &options.kl {
        Some(k) => Some(KlState::new(k, pre.as_ref(), post_clone.as_ref(), d)?),
        None => None,
    };
    ctx.trace.initial_kl = kl_state.as_ref().map(|t| t.current());
    ctx.trace.initial_l1 = ctx.l1_ref.as_ref().map(|r| l1_error(&ctx.z, r));

    let mut termination = Termination::MaxIterations;
    for n in 1..=cfg.max_iterations {
        let obj = FeatureObjective::new(&ctx.x_pre, &ctx.z, &ctx.y_pre, &skeleton, &beta)
            .map_err(|e| e.at_iteration(n))?;
        let step = match cfg.optimizer {
            OptimizerKind::Implicit => implicit_step(
                &obj,
                cfg.learning_rate,
                cfg.trust_region,
                cfg.implicit_mode,
                options.compute_j_after,
            ),
            OptimizerKind::ExplicitGda => explicit_step(
                &obj,
                cfg.learning_rate,
                cfg.trust_region,
                options.compute_j_after,
            ),
        }
        .map_err(|e| e.at_iteration(n))?;

        let map = skeleton.with_params(&step.dalpha)?;
        let fstep = FlowStep::Feature(FeatureStep { map });
        {
            let ev = StepEvaluator::new(&fstep).map_err(|e| e.at_iteration(n))?;
            ev.advance(&mut ctx.z).map_err(|e| e.at_iteration(n))?;
            if let Some(t) = kl_state.as_mut() {
                t.advance(&ev).map_err(|e| e.at_iteration(n))?;
            }
        }
        ctx.flow.push_step(fstep)?;
        for (b, db) in beta.iter_mut().zip(&step.dbeta) {
            *b += db;
        }

        record_iteration(&mut ctx, &mut options, &kl_state, n, &step)?;
        if let Some((window, tol)) = options.convergence {
            if convergence_check(&ctx.trace, window, tol) {
                termination = Termination::Converged { at: n };
                break;
            }
        }
    }
    Ok(finish(ctx, FinalTestFunction::Features { beta, degree }, termination))
}
