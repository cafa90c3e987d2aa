//! Density estimation through a fitted flow via change of variables,
//! Monte Carlo KL evaluation against known targets, transport cost, and
//! the exact 1D sorted-coupling cost oracle.

use crate::error::{Error, Result};
use crate::kernel::sq_dist;
use crate::points::PointMatrix;
use crate::transport::{flow_apply_batch_with_logdet, FlowRecord, StepEvaluator};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.8378770664093453;

/// One spherical Gaussian mixture component.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    /// Per-axis variance (covariance = var * I).
    pub var: f64,
    pub weight: f64,
}

/// Analytic reference densities used as flow targets and KL baselines.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetDensity {
    StandardGaussian { dim: usize },
    GaussianMixture { dim: usize, components: Vec<MixtureComponent> },
}

impl TargetDensity {
    pub fn standard_gaussian(dim: usize) -> Self {
        TargetDensity::StandardGaussian { dim }
    }

    /// Equal-weight mixture with spherical components; weights are
    /// normalized here so callers can pass unnormalized masses.
    pub fn mixture(dim: usize, mut components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyInput("mixture components"));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: c.mean.len() });
            }
            if !(c.var > 0.0) || !(c.weight > 0.0) {
                return Err(Error::Data("mixture components need var > 0 and weight > 0".into()));
            }
            total += c.weight;
        }
        for c in &mut components {
            c.weight /= total;
        }
        Ok(TargetDensity::GaussianMixture { dim, components })
    }

    /// Three equal components at the vertices of an equilateral triangle
    /// of circumradius 2, covariance 0.25 I each.
    pub fn trimodal_2d() -> Self {
        let r = 2.0;
        let s3 = 3f64.sqrt();
        TargetDensity::mixture(
            2,
            vec![
                MixtureComponent { mean: vec![0.0, r], var: 0.25, weight: 1.0 },
                MixtureComponent { mean: vec![-r * s3 / 2.0, -r / 2.0], var: 0.25, weight: 1.0 },
                MixtureComponent { mean: vec![r * s3 / 2.0, -r / 2.0], var: 0.25, weight: 1.0 },
            ],
        )
        .expect("static mixture is valid")
    }

    /// Two unit-variance components at +/- 2*(1,...,1) in d dimensions.
    pub fn bimodal(dim: usize) -> Self {
        TargetDensity::mixture(
            dim,
            vec![
                MixtureComponent { mean: vec![2.0; dim], var: 1.0, weight: 1.0 },
                MixtureComponent { mean: vec![-2.0; dim], var: 1.0, weight: 1.0 },
            ],
        )
        .expect("static mixture is valid")
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetDensity::StandardGaussian { dim } => *dim,
            TargetDensity::GaussianMixture { dim, .. } => *dim,
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        match self {
            TargetDensity::StandardGaussian { .. } => {
                let q: f64 = x.iter().map(|v| v * v).sum();
                -0.5 * q - 0.5 * d * LN_2PI
            }
            TargetDensity::GaussianMixture { components, .. } => {
                // log-sum-exp over component log densities.
                let mut terms = Vec::with_capacity(components.len());
                let mut top = f64::NEG_INFINITY;
                for c in components {
                    let q = sq_dist(x, &c.mean);
                    let t = c.weight.ln() - 0.5 * q / c.var - 0.5 * d * (LN_2PI + c.var.ln());
                    top = top.max(t);
                    terms.push(t);
                }
                top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> PointMatrix {
        let d = self.dim();
        let mut out = PointMatrix::with_capacity(n, d);
        let mut row = vec![0.0; d];
        for _ in 0..n {
            match self {
                TargetDensity::StandardGaussian { .. } => {
                    for v in row.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                }
                TargetDensity::GaussianMixture { components, .. } => {
                    let mut u: f64 = rng.gen();
                    let mut chosen = &components[components.len() - 1];
                    for c in components {
                        if u < c.weight {
                            chosen = c;
                            break;
                        }
                        u -= c.weight;
                    }
                    let sd = chosen.var.sqrt();
                    for (v, m) in row.iter_mut().zip(&chosen.mean) {
                        let g: f64 = rng.sample(StandardNormal);
                        *v = m + sd * g;
                    }
                }
            }
            out.push_row(&row);
        }
        out
    }
}

/// A fitted flow paired with the analytic density it maps onto, giving
/// the change-of-variables estimate rho(x) = |det grad T(x)| mu(T(x)).
pub struct DensityModel {
    pub flow: FlowRecord,
    pub target: TargetDensity,
}

impl DensityModel {
    pub fn new(flow: FlowRecord, target: TargetDensity) -> Result<Self> {
        if flow.dim() != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: flow.dim(),
                actual: target.dim(),
            });
        }
        Ok(DensityModel { flow, target })
    }
}

/// Bookkeeping from a batch density evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DensityStats {
    /// Points whose trajectory hit a singular step Jacobian (log density
    /// reported as -inf).
    pub singular: usize,
    /// Total negative-determinant step encounters; frequent negatives
    /// flag an unreliable model even though |det| keeps the density valid.
    pub negative_steps: usize,
}

/// Log densities for a batch of points in the original frame.
pub fn log_density_batch(dm: &DensityModel, pts: &PointMatrix) -> Result<(Vec<f64>, DensityStats)> {
    let (mapped, acc) = flow_apply_batch_with_logdet(&dm.flow, pts)?;
    let mut out = Vec::with_capacity(pts.len());
    let mut stats = DensityStats::default();
    for i in 0..pts.len() {
        stats.negative_steps += acc[i].negatives;
        if acc[i].singular || !acc[i].total.is_finite() {
            stats.singular += 1;
            out.push(f64::NEG_INFINITY);
        } else {
            out.push(dm.target.log_pdf(mapped.row(i)) + acc[i].total);
        }
    }
    Ok((out, stats))
}

pub fn log_density(dm: &DensityModel, x: &[f64]) -> Result<f64> {
    let mut pts = PointMatrix::with_capacity(1, dm.flow.dim());
    pts.push_row(x);
    let (vals, _) = log_density_batch(dm, &pts)?;
    Ok(vals[0])
}

/// Monte Carlo KL estimate D(true || model) from samples of the true
/// density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_used: usize,
    /// Points dropped because the model log density was -inf.
    pub n_excluded: usize,
}

pub fn kl_monte_carlo(
    true_density: &TargetDensity,
    dm: &DensityModel,
    eval_samples: &PointMatrix,
) -> Result<KlEstimate> {
    if eval_samples.is_empty() {
        return Err(Error::EmptyInput("KL evaluation samples"));
    }
    let (model_ld, _) = log_density_batch(dm, eval_samples)?;
    let mut diffs = Vec::with_capacity(eval_samples.len());
    let mut excluded = 0usize;
    for (i, ld) in model_ld.iter().enumerate() {
        if ld.is_finite() {
            diffs.push(true_density.log_pdf(eval_samples.row(i)) - ld);
        } else {
            excluded += 1;
        }
    }
    if diffs.is_empty() {
        return Err(Error::Numeric {
            iteration: 0,
            detail: "all KL evaluation points had singular trajectories".into(),
        });
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let ss = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let var = if diffs.len() > 1 { ss / (n - 1.0) } else { 0.0 };
    Ok(KlEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        n_used: diffs.len(),
        n_excluded: excluded,
    })
}

/// Which coordinates the transport cost is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostFrame {
    /// Input space: mean |x - flow(x)|^2 / 2 including the whitening maps.
    Original,
    /// Whitened space: cost of the step composition alone.
    Preconditioned,
}

pub fn transport_cost(flow: &FlowRecord, pts: &PointMatrix, frame: CostFrame) -> Result<f64> {
    if pts.is_empty() {
        return Err(Error::EmptyInput("transport cost samples"));
    }
    if pts.dim() != flow.dim() {
        return Err(Error::DimensionMismatch { expected: flow.dim(), actual: pts.dim() });
    }
    let (start, end) = match frame {
        CostFrame::Original => {
            let mapped = crate::transport::flow_apply_batch(flow, pts)?;
            (pts.clone(), mapped)
        }
        CostFrame::Preconditioned => {
            let z0 = match &flow.pre {
                Some(t) => t.apply_points(pts),
                None => pts.clone(),
            };
            let mut z = z0.clone();
            for step in flow.steps() {
                StepEvaluator::new(step)?.advance(&mut z)?;
            }
            (z0, z)
        }
    };
    let mut cost = 0.0;
    for i in 0..start.len() {
        cost += sq_dist(start.row(i), end.row(i)) * 0.5;
    }
    Ok(cost / start.len() as f64)
}

/// Exact empirical 1D optimal transport cost: sort both sides and pair by
/// rank. When the counts differ, the larger set is subsampled at quantile
/// positions of its sorted order.
pub fn oracle_cost_1d(x_samples: &[f64], y_samples: &[f64]) -> Result<f64> {
    if x_samples.is_empty() || y_samples.is_empty() {
        return Err(Error::EmptyInput("oracle cost samples"));
    }
    let mut xs = x_samples.to_vec();
    let mut ys = y_samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    ys.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len().min(ys.len());
    let quantile = |sorted: &[f64], i: usize| -> f64 {
        let idx = ((i as f64 + 0.5) * sorted.len() as f64 / n as f64) as usize;
        sorted[idx.min(sorted.len() - 1)]
    };
    let mut cost = 0.0;
    for i in 0..n {
        let (a, b) = (quantile(&xs, i), quantile(&ys, i));
        cost += (a - b) * (a - b) * 0.5;
    }
    Ok(cost / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::ElementaryMapParams;
    use crate::rng::{substream, StreamId};
    use crate::transport::FlowRecord;

    fn identity_model(target: TargetDensity) -> DensityModel {
        let flow = FlowRecord::new(target.dim(), serde_json::json!({}));
        DensityModel::new(flow, target).unwrap()
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let dm = identity_model(TargetDensity::standard_gaussian(1));
        let ld = log_density(&dm, &[0.0]).unwrap();
        assert!((ld - (-0.9189385332046727)).abs() < 1e-15);
    }

    #[test]
    fn single_component_mixture_matches_gaussian_formula() {
        let t = TargetDensity::mixture(
            1,
            vec![MixtureComponent { mean: vec![0.0], var: 4.0, weight: 3.0 }],
        )
        .unwrap();
        // N(0, 4) at x=2: -0.5*(4/4) - 0.5*(ln 2pi + ln 4)
        let expect = -0.5 - 0.5 * (LN_2PI + 4f64.ln());
        assert!((t.log_pdf(&[2.0]) - expect).abs() < 1e-14);
    }

    #[test]
    fn affine_scale_flow_density() {
        // Degree-2 feature map with params (0, (a-1)/2) is b -> a*b.
        let a = 1.7;
        let skeleton = ElementaryMapParams::multinomial(1, 2).unwrap();
        let map = skeleton.with_params(&[0.0, (a - 1.0) / 2.0]).unwrap();
        let mut flow = FlowRecord::new(1, serde_json::json!({}));
        flow.push_feature_step(map).unwrap();
        let dm = DensityModel::new(flow, TargetDensity::standard_gaussian(1)).unwrap();
        for x in [-1.3, 0.0, 0.8] {
            let ld = log_density(&dm, &[x]).unwrap();
            let expect = -0.5 * (a * x) * (a * x) - 0.5 * LN_2PI + a.ln();
            assert!((ld - expect).abs() < 1e-10, "{ld} vs {expect} at {x}");
        }
    }

    #[test]
    fn trimodal_means_on_circumradius() {
        let t = TargetDensity::trimodal_2d();
        if let TargetDensity::GaussianMixture { components, .. } = &t {
            assert_eq!(components.len(), 3);
            for c in components {
                let r = (c.mean[0].powi(2) + c.mean[1].powi(2)).sqrt();
                assert!((r - 2.0).abs() < 1e-12);
                assert!((c.weight - 1.0 / 3.0).abs() < 1e-15);
                assert_eq!(c.var, 0.25);
            }
        } else {
            panic!("trimodal must be a mixture");
        }
    }

    #[test]
    fn mixture_normalizes_in_1d() {
        // Trapezoid quadrature of exp(log_pdf) integrates to 1.
        let t = TargetDensity::mixture(
            1,
            vec![
                MixtureComponent { mean: vec![-2.0], var: 0.5, weight: 1.0 },
                MixtureComponent { mean: vec![1.5], var: 1.5, weight: 2.0 },
            ],
        )
        .unwrap();
        let (lo, hi, steps) = (-12.0, 12.0, 6000);
        let h = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for i in 0..=steps {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            total += w * t.log_pdf(&[x]).exp();
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }

    #[test]
    fn kl_of_identical_densities_is_zero() {
        let t = TargetDensity::trimodal_2d();
        let dm = identity_model(t.clone());
        let mut rng = substream(7, StreamId::Evaluation);
        let samples = t.sample(500, &mut rng);
        let kl = kl_monte_carlo(&t, &dm, &samples).unwrap();
        assert_eq!(kl.value, 0.0);
        assert_eq!(kl.n_used, 500);
        assert_eq!(kl.n_excluded, 0);
    }

    #[test]
    fn kl_gaussian_vs_wider_gaussian() {
        // True N(0,1) against model N(0, 2^2) through an identity flow:
        // analytic KL = ln 2 + 1/8 - 1/2.
        let truth = TargetDensity::standard_gaussian(1);
        let model = identity_model(
            TargetDensity::mixture(
                1,
                vec![MixtureComponent { mean: vec![0.0], var: 4.0, weight: 1.0 }],
            )
            .unwrap(),
        );
        let mut rng = substream(11, StreamId::Evaluation);
        let samples = truth.sample(20000, &mut rng);
        let kl = kl_monte_carlo(&truth, &model, &samples).unwrap();
        let analytic = 2f64.ln() + 0.125 - 0.5;
        assert!((kl.value - analytic).abs() < 0.02, "{} vs {analytic}", kl.value);
        assert!((kl.value - analytic).abs() < 4.0 * kl.std_error);
    }

    #[test]
    fn sampling_matches_moments() {
        let t = TargetDensity::bimodal(2);
        let mut rng = substream(13, StreamId::Evaluation);
        let s = t.sample(4000, &mut rng);
        let mean = s.mean();
        // Symmetric components: mean near 0; per-axis second moment is
        // var + mean^2 = 1 + 4 = 5.
        assert!(mean[0].abs() < 0.15 && mean[1].abs() < 0.15, "mean {mean:?}");
        let m2: f64 = s.rows().map(|r| r[0] * r[0]).sum::<f64>() / s.len() as f64;
        assert!((m2 - 5.0).abs() < 0.35, "second moment {m2}");
    }

    #[test]
    fn transport_cost_identity_and_shift() {
        let pts = PointMatrix::from_scalars(&[0.0, 1.0, -2.0, 0.5]);
        let flow = FlowRecord::new(1, serde_json::json!({}));
        assert_eq!(transport_cost(&flow, &pts, CostFrame::Original).unwrap(), 0.0);
        // Pure shift by s via a degree-1 feature map.
        let s = 0.75;
        let skeleton = ElementaryMapParams::multinomial(1, 1).unwrap();
        let mut flow = FlowRecord::new(1, serde_json::json!({}));
        flow.push_feature_step(skeleton.with_params(&[s]).unwrap()).unwrap();
        let c = transport_cost(&flow, &pts, CostFrame::Original).unwrap();
        assert!((c - s * s / 2.0).abs() < 1e-15);
        let c = transport_cost(&flow, &pts, CostFrame::Preconditioned).unwrap();
        assert!((c - s * s / 2.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_cost_hand_values() {
        assert_eq!(oracle_cost_1d(&[3.0, -1.0, 0.5], &[0.5, 3.0, -1.0]).unwrap(), 0.0);
        let c = oracle_cost_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap();
        assert!((c - 0.5).abs() < 1e-15);
        // Permutation invariance.
        let a = oracle_cost_1d(&[0.3, -1.2, 2.0, 0.7], &[1.0, -0.5, 0.0, 2.2]).unwrap();
        let b = oracle_cost_1d(&[2.0, 0.3, 0.7, -1.2], &[0.0, 2.2, -0.5, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_cost_subsamples_larger_side() {
        // x has 4 points, y has 2: x is reduced at quantile positions
        // (indices 1 and 3 of the sorted list).
        let c = oracle_cost_1d(&[0.0, 1.0, 2.0, 3.0], &[1.0, 3.0]).unwrap();
        assert!((c - 0.0).abs() < 1e-15, "{c}");
        let sym = oracle_cost_1d(&[1.0, 3.0], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c, sym);
    }

    #[test]
    fn mixture_rejects_bad_components() {
        assert!(TargetDensity::mixture(1, vec![]).is_err());
        assert!(TargetDensity::mixture(
            2,
            vec![MixtureComponent { mean: vec![0.0], var: 1.0, weight: 1.0 }]
        )
        .is_err());
        assert!(TargetDensity::mixture(
            1,
            vec![MixtureComponent { mean: vec![0.0], var: 0.0, weight: 1.0 }]
        )
        .is_err());
    }
}
