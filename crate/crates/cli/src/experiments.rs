//! The three reproduction experiments: 1D optimal map recovery, 2D
//! tri-modal density estimation, and per-iteration timing over dimension.

use crate::fail::{CliResult, Failure};
use crate::{ensure_dir, io};
use clap::Args;
use otflow::density::{kl_monte_carlo, oracle_cost_1d, DensityModel, TargetDensity};
use otflow::rng::{substream, StreamId};
use otflow::solver::{fit_general, FitOptions, FitResult, KlTracking};
use otflow::transport::{LogDetAccumulator, StepEvaluator};
use otflow::{BandwidthPolicy, PointMatrix, SampleLabel, SampleSet, SolverConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// The 1D reference map: gradient of |x|^1.5, the unique optimal
/// transport from N(0,1) onto its own push-forward.
fn t_true(x: f64) -> f64 {
    1.5 * x.signum() * x.abs().sqrt()
}

fn gaussian_scalars(seed: u64, id: StreamId, n: usize) -> Vec<f64> {
    let mut rng = substream(seed, id);
    TargetDensity::standard_gaussian(1)
        .sample(n, &mut rng)
        .rows()
        .map(|r| r[0])
        .collect()
}

#[derive(Args, Debug)]
pub struct RecoverArgs {
    /// Samples per batch (source and target are independent draws)
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// RNG seed; the polishing phase uses seed+1
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total iteration budget across both phases
    #[arg(long, default_value_t = 10000)]
    iters: usize,
    /// Representers per signed cloud
    #[arg(long, default_value_t = 100)]
    nr: usize,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Two-phase fit. An adaptive-bandwidth phase divides the mass across the
/// density hole at the origin; a fixed-bandwidth phase at sigma=0.2,
/// tau=0.1 then polishes the bulk, starting from the phase-one images.
/// The final map is the composition of the two flows.
pub fn run_recover_1d(a: &RecoverArgs) -> CliResult<()> {
    ensure_dir(&a.out)?;
    let xs = gaussian_scalars(a.seed, StreamId::SourceData, a.n);
    let x2 = gaussian_scalars(a.seed, StreamId::TargetData, a.n);
    let ys: Vec<f64> = x2.iter().map(|&v| t_true(v)).collect();
    let refs = PointMatrix::from_scalars(&xs.iter().map(|&v| t_true(v)).collect::<Vec<_>>());

    let x = SampleSet::new(PointMatrix::from_scalars(&xs), SampleLabel::Source)?;
    let y = SampleSet::new(PointMatrix::from_scalars(&ys), SampleLabel::Target)?;

    let it_a = a.iters * 3 / 10;
    let it_b = a.iters - it_a;
    let pool = 2 * a.n;
    let knn = (2 * pool / 10).clamp(1, pool.saturating_sub(1)).max(1);

    let mut cfg_a = SolverConfig::default();
    cfg_a.max_iterations = it_a;
    cfg_a.rng_seed = a.seed;
    cfg_a.n_representers = a.nr;
    cfg_a.testfn_bandwidth = BandwidthPolicy::Adaptive;
    cfg_a.map_scale = BandwidthPolicy::Adaptive;
    cfg_a.bandwidth_knn = Some(knn);

    let t0 = Instant::now();
    let opts_a = FitOptions { reference_images: Some(&refs), ..Default::default() };
    let fit_a = fit_general(&x, &y, &cfg_a, opts_a)?;

    let mid = SampleSet::new(fit_a.transported.clone(), SampleLabel::Source)?;
    let mut cfg_b = SolverConfig::default();
    cfg_b.max_iterations = it_b;
    cfg_b.rng_seed = a.seed.wrapping_add(1);
    cfg_b.n_representers = a.nr;
    cfg_b.testfn_bandwidth = BandwidthPolicy::Fixed(0.2);
    cfg_b.map_scale = BandwidthPolicy::Fixed(0.1);

    let opts_b = FitOptions { reference_images: Some(&refs), ..Default::default() };
    let fit_b = fit_general(&mid, &y, &cfg_b, opts_b)?;
    let secs = t0.elapsed().as_secs_f64();

    let fin: Vec<f64> = fit_b.transported.rows().map(|r| r[0]).collect();

    let mut table = String::from("x,t_fit,t_true\n");
    for (i, &xi) in xs.iter().enumerate() {
        let _ = writeln!(table, "{},{},{}", xi, fin[i], t_true(xi));
    }
    io::write_text(&a.out.join("map_table.csv"), &table)?;

    let mut trace = String::from("iteration,phase,l1_error\n");
    for (fit, phase, offset) in [(&fit_a, 1, 0), (&fit_b, 2, it_a)] {
        for r in &fit.diagnostics.records {
            let _ = writeln!(
                trace,
                "{},{},{}",
                r.iteration + offset,
                phase,
                r.l1_error.unwrap_or(f64::NAN)
            );
        }
    }
    io::write_text(&a.out.join("l1_trace.csv"), &trace)?;
    io::write_text(&a.out.join("flow_phase1.json"), &fit_a.flow.to_json()?)?;
    io::write_text(&a.out.join("flow_phase2.json"), &fit_b.flow.to_json()?)?;

    let mean_abs = |f: &dyn Fn(usize) -> f64| -> f64 {
        (0..xs.len()).map(f).sum::<f64>() / xs.len() as f64
    };
    let initial_l1 = mean_abs(&|i| (xs[i] - t_true(xs[i])).abs());
    let final_l1 = mean_abs(&|i| (fin[i] - t_true(xs[i])).abs());
    let ratio = initial_l1 / final_l1;

    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let pairs = order.windows(2).filter(|w| fin[w[1]] >= fin[w[0]]).count();
    let monotone = pairs as f64 / (xs.len() - 1).max(1) as f64;

    let fitted_cost = mean_abs(&|i| 0.5 * (fin[i] - xs[i]).powi(2));
    let oracle = oracle_cost_1d(&xs, &ys)?;
    let rel = (fitted_cost - oracle) / oracle;

    let summary = serde_json::json!({
        "n": a.n,
        "seed": a.seed,
        "iterations": {"total": a.iters, "phase1": it_a, "phase2": it_b},
        "initial_l1": initial_l1,
        "final_l1": final_l1,
        "l1_ratio": ratio,
        "monotone_fraction": monotone,
        "fitted_cost": fitted_cost,
        "oracle_cost": oracle,
        "cost_rel_error": rel,
        "seconds": secs,
    });
    io::write_text(&a.out.join("summary.json"), &format!("{summary:#}\n"))?;

    println!("recover-1d: n={} seed={} iterations={} ({}+{})", a.n, a.seed, a.iters, it_a, it_b);
    println!("  L1 error {initial_l1:.4} -> {final_l1:.4}  (ratio {ratio:.2})");
    println!("  monotone fraction {monotone:.4}");
    println!(
        "  transport cost {fitted_cost:.6} vs oracle {oracle:.6}  ({:+.2}%)",
        100.0 * rel
    );
    println!("  {secs:.1}s; wrote map_table.csv, l1_trace.csv, flow_phase1.json, flow_phase2.json, summary.json in {}", a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrimodalArgs {
    /// RNG seed for data, solver, and evaluation draws
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iteration count
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Representers per signed cloud
    #[arg(long, default_value_t = 100)]
    nr: usize,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Run the representer-count ablation over these N_r values instead
    /// of the single experiment (e.g. --sweep-nr 100,400)
    #[arg(long, value_delimiter = ',')]
    sweep_nr: Vec<usize>,
    /// Seeds per N_r value in the ablation
    #[arg(long, default_value_t = 10)]
    sweep_seeds: u64,
}

fn trimodal_config(nr: usize, seed: u64, iters: usize) -> SolverConfig {
    let mut cfg = SolverConfig::default();
    cfg.n_representers = nr;
    cfg.rng_seed = seed;
    cfg.max_iterations = iters;
    cfg.testfn_bandwidth = BandwidthPolicy::Fixed(0.2);
    cfg.map_scale = BandwidthPolicy::Fixed(0.1);
    cfg
}

pub fn run_trimodal_2d(a: &TrimodalArgs) -> CliResult<()> {
    ensure_dir(&a.out)?;
    if !a.sweep_nr.is_empty() {
        return run_nr_sweep(a);
    }
    let tri = TargetDensity::trimodal_2d();
    let src = tri.sample(400, &mut substream(a.seed, StreamId::SourceData));
    let tgt = TargetDensity::standard_gaussian(2)
        .sample(400, &mut substream(a.seed, StreamId::TargetData));
    let mut erng = substream(a.seed, StreamId::Evaluation);
    let trace_eval = tri.sample(2000, &mut erng);
    let mc_eval = tri.sample(10_000, &mut erng);

    let x = SampleSet::new(src.clone(), SampleLabel::Source)?;
    let y = SampleSet::new(tgt, SampleLabel::Target)?;
    let cfg = trimodal_config(a.nr, a.seed, a.iters);
    let gauss = TargetDensity::standard_gaussian(2);

    let t0 = Instant::now();
    let opts = FitOptions {
        kl: Some(KlTracking { true_density: &tri, flow_target: &gauss, eval_points: &trace_eval }),
        ..Default::default()
    };
    let fit = fit_general(&x, &y, &cfg, opts)?;
    let secs = t0.elapsed().as_secs_f64();

    let mut trace = String::from("iteration,kl\n");
    let mut kl_min = f64::INFINITY;
    for r in &fit.diagnostics.records {
        let kl = r.kl.unwrap_or(f64::NAN);
        kl_min = kl_min.min(kl);
        let _ = writeln!(trace, "{},{}", r.iteration, kl);
    }
    io::write_text(&a.out.join("kl_trace.csv"), &trace)?;
    io::write_text(&a.out.join("flow.json"), &fit.flow.to_json()?)?;

    let kl_init = kl_monte_carlo(
        &tri,
        &DensityModel::new(fit.flow.truncated(0), TargetDensity::standard_gaussian(2))?,
        &mc_eval,
    )?;
    let kl_fin = kl_monte_carlo(
        &tri,
        &DensityModel::new(fit.flow.clone(), TargetDensity::standard_gaussian(2))?,
        &mc_eval,
    )?;

    write_grids(&a.out, &fit, &src)?;

    let summary = serde_json::json!({
        "seed": a.seed,
        "iterations": a.iters,
        "n_representers": a.nr,
        "kl_initial": kl_init.value,
        "kl_initial_std_error": kl_init.std_error,
        "kl_final": kl_fin.value,
        "kl_final_std_error": kl_fin.std_error,
        "kl_ratio": kl_fin.value / kl_init.value,
        "kl_trace_min": kl_min,
        "kl_excluded_points": kl_fin.n_excluded,
        "seconds": secs,
    });
    io::write_text(&a.out.join("summary.json"), &format!("{summary:#}\n"))?;

    println!("trimodal-2d: seed={} iterations={} N_r={}", a.seed, a.iters, a.nr);
    println!(
        "  KL {:.4} -> {:.4}  (ratio {:.3}, trace minimum {:.4})",
        kl_init.value,
        kl_fin.value,
        kl_fin.value / kl_init.value,
        kl_min
    );
    println!("  {secs:.1}s; wrote kl_trace.csv, density_grid.csv, passive_grid.csv, flow.json, summary.json in {}", a.out.display());
    Ok(())
}

/// Replay the committed flow once over both visualization grids,
/// capturing density snapshots and passive-grid positions at evenly
/// spaced step counts.
fn write_grids(out: &Path, fit: &FitResult, src: &PointMatrix) -> CliResult<()> {
    let flow = &fit.flow;
    let n_steps = flow.len();
    let gauss = TargetDensity::standard_gaussian(2);

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in src.rows() {
        for k in 0..2 {
            lo[k] = lo[k].min(r[k]);
            hi[k] = hi[k].max(r[k]);
        }
    }
    for k in 0..2 {
        lo[k] -= 0.5;
        hi[k] += 0.5;
    }

    let lattice = |g: usize| -> PointMatrix {
        let mut pts = PointMatrix::with_capacity(g * g, 2);
        for iy in 0..g {
            for ix in 0..g {
                let fx = ix as f64 / (g - 1) as f64;
                let fy = iy as f64 / (g - 1) as f64;
                pts.push_row(&[lo[0] + fx * (hi[0] - lo[0]), lo[1] + fy * (hi[1] - lo[1])]);
            }
        }
        pts
    };
    let density_pts = lattice(25);
    let passive_pts = lattice(13);
    let nd = density_pts.len();

    let marks = |count: usize| -> Vec<usize> {
        let mut v: Vec<usize> =
            (0..count).map(|j| j * n_steps / (count - 1).max(1)).collect();
        v.dedup();
        v
    };
    let density_marks = marks(3);
    let passive_marks = marks(9);

    let mut combined = density_pts.clone();
    for r in passive_pts.rows() {
        combined.push_row(r);
    }

    let mut cur = match &flow.pre {
        Some(t) => t.apply_points(&combined),
        None => combined.clone(),
    };
    let mut acc = vec![LogDetAccumulator::default(); cur.len()];
    if let Some(t) = &flow.pre {
        let ld = t.log_abs_det();
        acc.iter_mut().for_each(|a| a.add_affine(ld));
    }
    let post_ld = flow.post.as_ref().map_or(0.0, |t| t.log_abs_det());
    let out_coords = |row: &[f64]| -> Vec<f64> {
        match &flow.post {
            Some(t) => t.apply_inverse(row),
            None => row.to_vec(),
        }
    };

    let mut density_csv = String::from("snapshot,x0,x1,log_density\n");
    let mut passive_csv = String::from("snapshot,point,x0,x1\n");
    let mut emit = |k: usize, cur: &PointMatrix, acc: &[LogDetAccumulator]| {
        if density_marks.contains(&k) {
            for i in 0..nd {
                let g = combined.row(i);
                let w = out_coords(cur.row(i));
                let ld = if acc[i].singular {
                    f64::NEG_INFINITY
                } else {
                    gauss.log_pdf(&w) + acc[i].total - post_ld
                };
                let _ = writeln!(density_csv, "{},{},{},{}", k, g[0], g[1], ld);
            }
        }
        if passive_marks.contains(&k) {
            for j in nd..cur.len() {
                let w = out_coords(cur.row(j));
                let _ = writeln!(passive_csv, "{},{},{},{}", k, j - nd, w[0], w[1]);
            }
        }
    };

    emit(0, &cur, &acc);
    for (k, step) in flow.steps().iter().enumerate() {
        StepEvaluator::new(step)?.advance_with_logdet(&mut cur, &mut acc)?;
        emit(k + 1, &cur, &acc);
    }

    io::write_text(&out.join("density_grid.csv"), &density_csv)?;
    io::write_text(&out.join("passive_grid.csv"), &passive_csv)?;
    Ok(())
}

fn run_nr_sweep(a: &TrimodalArgs) -> CliResult<()> {
    let tri = TargetDensity::trimodal_2d();
    let mut csv = String::from("nr,seed,kl_final\n");
    let mut stats: Vec<(usize, f64, f64)> = Vec::new();
    let t0 = Instant::now();
    for &nr in &a.sweep_nr {
        let mut finals = Vec::new();
        for s in 0..a.sweep_seeds {
            let src = tri.sample(400, &mut substream(s, StreamId::SourceData));
            let tgt = TargetDensity::standard_gaussian(2)
                .sample(400, &mut substream(s, StreamId::TargetData));
            let eval = tri.sample(2000, &mut substream(s, StreamId::Evaluation));
            let x = SampleSet::new(src, SampleLabel::Source)?;
            let y = SampleSet::new(tgt, SampleLabel::Target)?;
            let cfg = trimodal_config(nr, s, a.iters);
            let gauss = TargetDensity::standard_gaussian(2);
            let opts = FitOptions {
                kl: Some(KlTracking {
                    true_density: &tri,
                    flow_target: &gauss,
                    eval_points: &eval,
                }),
                ..Default::default()
            };
            let fit = fit_general(&x, &y, &cfg, opts)?;
            let kl = fit.diagnostics.records.last().and_then(|r| r.kl).unwrap_or(f64::NAN);
            let _ = writeln!(csv, "{nr},{s},{kl}");
            finals.push(kl);
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (finals.len() - 1).max(1) as f64;
        let std = var.sqrt();
        println!("  N_r={nr}: final KL mean {mean:.4}, std {std:.4} over {} seeds", finals.len());
        stats.push((nr, mean, std));
    }
    io::write_text(&a.out.join("nr_sweep.csv"), &csv)?;
    let summary = serde_json::json!({
        "iterations": a.iters,
        "seeds": a.sweep_seeds,
        "rows": stats.iter().map(|(nr, mean, std)| serde_json::json!({
            "nr": nr, "kl_mean": mean, "kl_std": std,
        })).collect::<Vec<_>>(),
        "seconds": t0.elapsed().as_secs_f64(),
    });
    io::write_text(&a.out.join("sweep_summary.json"), &format!("{summary:#}\n"))?;
    println!("wrote nr_sweep.csv, sweep_summary.json in {}", a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchDimArgs {
    /// Space dimensions to time
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4, 8, 16, 32, 64])]
    dims: Vec<usize>,
    /// Iterations per dimension; the first 10 are warm-up and excluded
    #[arg(long, default_value_t = 60)]
    iters: usize,
    /// Samples per distribution
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Representers per signed cloud
    #[arg(long, default_value_t = 100)]
    nr: usize,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Per-iteration wall time from a bi-modal mixture to a Gaussian with
/// everything fixed except the dimension. Timing comes from progress
/// callback deltas, so setup and I/O are excluded by construction.
pub fn run_bench_dim(a: &BenchDimArgs) -> CliResult<()> {
    const WARMUP: usize = 10;
    if a.iters < WARMUP + 5 {
        return Err(Failure::Config(format!(
            "iters must be at least {} to time anything after warm-up",
            WARMUP + 5
        )));
    }
    if a.dims.is_empty() {
        return Err(Failure::Config("dims must be non-empty".into()));
    }
    ensure_dir(&a.out)?;

    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for &d in &a.dims {
        let src = TargetDensity::bimodal(d).sample(a.n, &mut substream(a.seed, StreamId::SourceData));
        let tgt = TargetDensity::standard_gaussian(d)
            .sample(a.n, &mut substream(a.seed, StreamId::TargetData));
        let x = SampleSet::new(src, SampleLabel::Source)?;
        let y = SampleSet::new(tgt, SampleLabel::Target)?;
        let mut cfg = SolverConfig::default();
        cfg.max_iterations = a.iters;
        cfg.rng_seed = a.seed;
        cfg.n_representers = a.nr;
        cfg.testfn_bandwidth = BandwidthPolicy::Fixed(0.2);
        cfg.map_scale = BandwidthPolicy::Fixed(0.1);

        let mut stamps: Vec<Instant> = Vec::with_capacity(a.iters + 1);
        stamps.push(Instant::now());
        {
            let mut cb = |_r: &otflow::solver::IterationRecord| stamps.push(Instant::now());
            let opts = FitOptions { progress: Some(&mut cb), ..Default::default() };
            fit_general(&x, &y, &cfg, opts)?;
        }
        let durs: Vec<f64> = stamps
            .windows(2)
            .skip(WARMUP)
            .map(|w| w[1].duration_since(w[0]).as_secs_f64())
            .collect();
        let mean = durs.iter().sum::<f64>() / durs.len() as f64;
        let var =
            durs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (durs.len() - 1).max(1) as f64;
        let std = var.sqrt();
        println!("  d={d:3}  {:.3} ms/iteration (std {:.3})", 1e3 * mean, 1e3 * std);
        rows.push((d, mean, std));
    }

    let mut csv = String::from("d,mean_time,std\n");
    for (d, mean, std) in &rows {
        let _ = writeln!(csv, "{d},{mean},{std}");
    }
    io::write_text(&a.out.join("timing.csv"), &csv)?;

    let n = rows.len() as f64;
    let mx = rows.iter().map(|r| r.0 as f64).sum::<f64>() / n;
    let my = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let sxy: f64 = rows.iter().map(|r| (r.0 as f64 - mx) * (r.1 - my)).sum();
    let sxx: f64 = rows.iter().map(|r| (r.0 as f64 - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = rows
        .iter()
        .map(|r| (r.1 - slope * r.0 as f64 - intercept).powi(2))
        .sum();
    let ss_tot: f64 = rows.iter().map(|r| (r.1 - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let mut doubling = Vec::new();
    for w in rows.windows(2) {
        if w[1].0 == 2 * w[0].0 {
            doubling.push(w[1].1 / w[0].1);
        }
    }
    println!("  linear fit: time = {slope:.3e}*d + {intercept:.3e}, R^2 = {r2:.4}");
    if !doubling.is_empty() {
        let fmt: Vec<String> = doubling.iter().map(|v| format!("{v:.2}")).collect();
        println!("  doubling factors: {}", fmt.join(", "));
    }

    let summary = serde_json::json!({
        "iters": a.iters,
        "warmup": WARMUP,
        "n": a.n,
        "n_representers": a.nr,
        "rows": rows.iter().map(|(d, mean, std)| serde_json::json!({
            "d": d, "mean_time": mean, "std": std,
        })).collect::<Vec<_>>(),
        "slope": slope,
        "intercept": intercept,
        "r_squared": r2,
        "doubling_factors": doubling,
    });
    io::write_text(&a.out.join("bench_summary.json"), &format!("{summary:#}\n"))?;
    println!("wrote timing.csv, bench_summary.json in {}", a.out.display());
    Ok(())
}
