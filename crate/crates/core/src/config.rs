//! Solver configuration and validation.
//!
//! The JSON form is a flat key-value document. Unknown keys are rejected so
//! that typos fail loudly instead of silently running with defaults.

use crate::error::{Error, Result};
use serde::de::{self, Deserializer, Unexpected};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

/// Family of elementary maps used for both the transport step and the
/// representer-cloud branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFamily {
    /// Radial bump with inverse-quadratic profile r / (tau + r^2).
    RadialIq,
    /// Radial bump with profile erf(r / tau) / r^2.
    RadialErf,
    /// Gradient-of-polynomial map over monomials of total degree 1..=D.
    Multinomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Implicit,
    #[serde(alias = "gda")]
    ExplicitGda,
}

/// How the linearized implicit system is solved.
///
/// `Auto` uses a dense solve while the parameter count stays small and a
/// truncated-Krylov matrix-free solve above that, keeping per-iteration
/// cost linear in the dimension. Forcing a single mode keeps per-iteration
/// cost structurally uniform across a dimension sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplicitMode {
    Auto,
    Dense,
    MatrixFree,
}

/// Fixed value or data-driven bandwidth/scale selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// Per-representer k-nearest-neighbor distance against the pooled
    /// transported-source and target cloud, recomputed every iteration.
    Adaptive,
}

impl Serialize for BandwidthPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BandwidthPolicy::Fixed(v) => s.serialize_f64(*v),
            BandwidthPolicy::Adaptive => s.serialize_str("adaptive"),
        }
    }
}

impl<'de> Deserialize<'de> for BandwidthPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> de::Visitor<'de> for V {
            type Value = BandwidthPolicy;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "a positive number or the string \"adaptive\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<BandwidthPolicy, E> {
                Ok(BandwidthPolicy::Fixed(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<BandwidthPolicy, E> {
                Ok(BandwidthPolicy::Fixed(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<BandwidthPolicy, E> {
                Ok(BandwidthPolicy::Fixed(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<BandwidthPolicy, E> {
                if v == "adaptive" {
                    Ok(BandwidthPolicy::Adaptive)
                } else {
                    Err(E::invalid_value(Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// All tunables of the fit. Defaults mirror the reference experimental
/// setup: 100 representers per cloud, single-center radial erf maps,
/// trust region 0.003, representer init scale 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Representers per cloud (N_r); same count for positive and negative.
    pub n_representers: usize,
    /// Centers per radial elementary map (N_c).
    pub n_centers: usize,
    /// Trust region delta: joint Euclidean cap on the (d-alpha, d-beta) step.
    pub trust_region: f64,
    /// Test function kernel bandwidth sigma: fixed or adaptive.
    pub testfn_bandwidth: BandwidthPolicy,
    /// Radial map scale tau: fixed or adaptive (k-NN distance at centers).
    pub map_scale: BandwidthPolicy,
    pub map_family: MapFamily,
    /// Highest total degree D for multinomial maps; degree-1 terms alone
    /// cannot bend space, so D >= 2 is required.
    pub multinomial_degree: usize,
    /// Std dev c of the N(0, c^2 I) representer initialization.
    pub representer_init_scale: f64,
    pub max_iterations: usize,
    pub rng_seed: u64,
    pub precondition: bool,
    pub optimizer: OptimizerKind,
    /// Step scale eta of the saddle update.
    pub learning_rate: f64,
    pub implicit_mode: ImplicitMode,
    /// k for adaptive bandwidths; `None` means ceil(sqrt(N + M)).
    pub bandwidth_knn: Option<usize>,
    pub bandwidth_min: f64,
    pub bandwidth_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_representers: 100,
            n_centers: 1,
            trust_region: 0.003,
            testfn_bandwidth: BandwidthPolicy::Adaptive,
            map_scale: BandwidthPolicy::Fixed(0.1),
            map_family: MapFamily::RadialErf,
            multinomial_degree: 3,
            representer_init_scale: 0.5,
            max_iterations: 1000,
            rng_seed: 0,
            precondition: true,
            optimizer: OptimizerKind::Implicit,
            learning_rate: 1.0,
            implicit_mode: ImplicitMode::Auto,
            bandwidth_knn: None,
            bandwidth_min: 1e-3,
            bandwidth_max: 10.0,
        }
    }
}

impl SolverConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SolverConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(vec![e.to_string()]))?;
        validate_config(&cfg)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// Check every field and report all violations at once.
pub fn validate_config(cfg: &SolverConfig) -> Result<()> {
    let mut errs = Vec::new();
    if cfg.n_representers == 0 {
        errs.push("n_representers must be at least 1".to_string());
    }
    if cfg.n_centers == 0 {
        errs.push("n_centers must be at least 1".to_string());
    }
    if !(cfg.trust_region > 0.0) || !cfg.trust_region.is_finite() {
        errs.push(format!("trust_region must be positive and finite, got {}", cfg.trust_region));
    }
    if let BandwidthPolicy::Fixed(s) = cfg.testfn_bandwidth {
        if !(s > 0.0) || !s.is_finite() {
            errs.push(format!("testfn_bandwidth must be positive and finite, got {s}"));
        }
    }
    if let BandwidthPolicy::Fixed(t) = cfg.map_scale {
        if !(t > 0.0) || !t.is_finite() {
            errs.push(format!("map_scale must be positive and finite, got {t}"));
        }
    }
    if cfg.multinomial_degree < 2 {
        errs.push(format!(
            "multinomial_degree must be at least 2, got {}",
            cfg.multinomial_degree
        ));
    }
    if !(cfg.representer_init_scale >= 0.0) || !cfg.representer_init_scale.is_finite() {
        errs.push(format!(
            "representer_init_scale must be non-negative and finite, got {}",
            cfg.representer_init_scale
        ));
    }
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        errs.push(format!("learning_rate must be positive and finite, got {}", cfg.learning_rate));
    }
    if cfg.bandwidth_knn == Some(0) {
        errs.push("bandwidth_knn must be at least 1 when set".to_string());
    }
    if !(cfg.bandwidth_min > 0.0) {
        errs.push(format!("bandwidth_min must be positive, got {}", cfg.bandwidth_min));
    }
    if cfg.bandwidth_max < cfg.bandwidth_min {
        errs.push(format!(
            "bandwidth_max {} is below bandwidth_min {}",
            cfg.bandwidth_max, cfg.bandwidth_min
        ));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}
