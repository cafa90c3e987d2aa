mod experiments;
mod fail;
mod io;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fail::{CliResult, Failure};
use otflow::density::{log_density_batch, DensityModel, TargetDensity};
use otflow::rng::{substream, StreamId};
use otflow::solver::{fit_general, FitOptions, Termination};
use otflow::transport::{flow_apply_batch, FlowRecord};
use otflow::{MapFamily, OptimizerKind, PointMatrix, SampleLabel, SampleSet, SolverConfig};
use rand::Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "otflow", version, about = "Adversarial sample-based optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a transport flow from source samples to target samples
    Fit(FitArgs),
    /// Apply a saved flow to a CSV of points
    Replay(ReplayArgs),
    /// Change-of-variables log density of points under a saved flow
    Density(DensityArgs),
    /// Sample Gaussian inputs and push them through a saved flow
    Generate(GenerateArgs),
    /// Per-iteration solver timing across space dimensions
    BenchDim(experiments::BenchDimArgs),
    /// 1D optimal map recovery experiment
    #[command(name = "recover-1d")]
    Recover1d(experiments::RecoverArgs),
    /// 2D tri-modal density estimation experiment
    #[command(name = "trimodal-2d")]
    Trimodal2d(experiments::TrimodalArgs),
}

/// Solver settings shared by the fitting commands. A config file is
/// loaded first; the individual flags then override single fields.
#[derive(Args, Debug, Default)]
pub struct SolverOpts {
    /// Solver configuration JSON file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// RNG seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Iteration count override
    #[arg(long)]
    iters: Option<usize>,
    /// Representers per signed cloud
    #[arg(long)]
    nr: Option<usize>,
    /// Whitening preconditioner toggle
    #[arg(long, value_enum)]
    precondition: Option<Toggle>,
    /// Saddle-point update rule
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Elementary map family
    #[arg(long, value_enum)]
    map: Option<MapArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Implicit,
    Gda,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MapArg {
    RadialErf,
    RadialIq,
    Multinomial,
}

impl SolverOpts {
    pub fn resolve(&self) -> CliResult<SolverConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                SolverConfig::from_json(&text)?
            }
            None => SolverConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.rng_seed = s;
        }
        if let Some(it) = self.iters {
            cfg.max_iterations = it;
        }
        if let Some(nr) = self.nr {
            cfg.n_representers = nr;
        }
        if let Some(p) = self.precondition {
            cfg.precondition = matches!(p, Toggle::On);
        }
        if let Some(o) = self.optimizer {
            cfg.optimizer = match o {
                OptimizerArg::Implicit => OptimizerKind::Implicit,
                OptimizerArg::Gda => OptimizerKind::ExplicitGda,
            };
        }
        if let Some(m) = self.map {
            cfg.map_family = match m {
                MapArg::RadialErf => MapFamily::RadialErf,
                MapArg::RadialIq => MapFamily::RadialIq,
                MapArg::Multinomial => MapFamily::Multinomial,
            };
        }
        otflow::config::validate_config(&cfg)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Source samples CSV
    source: PathBuf,
    /// Target samples CSV
    target: PathBuf,
    #[command(flatten)]
    solver: SolverOpts,
    /// Output directory for flow.json and diagnostics.csv
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Saved flow JSON
    flow: PathBuf,
    /// Points CSV to map
    points: PathBuf,
    /// Output directory for mapped.csv
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DensityArgs {
    /// Saved flow JSON
    flow: PathBuf,
    /// Evaluation points CSV
    points: PathBuf,
    /// Output directory for density.csv and density_summary.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Saved flow JSON
    flow: PathBuf,
    /// Number of samples to draw
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// RNG seed for the Gaussian draw
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for generated.csv
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

pub fn load_flow(path: &Path) -> CliResult<FlowRecord> {
    let text = io::read_text(path)?;
    Ok(FlowRecord::from_json(&text)?)
}

fn run_fit(a: &FitArgs) -> CliResult<()> {
    let cfg = a.solver.resolve()?;
    let src = io::read_points(&a.source)?;
    let tgt = io::read_points(&a.target)?;
    let x = SampleSet::new(src, SampleLabel::Source)?;
    let y = SampleSet::new(tgt, SampleLabel::Target)?;
    ensure_dir(&a.out)?;
    let t0 = Instant::now();
    let fit = fit_general(&x, &y, &cfg, FitOptions::default())?;
    let secs = t0.elapsed().as_secs_f64();

    io::write_text(&a.out.join("flow.json"), &fit.flow.to_json()?)?;
    io::write_text(&a.out.join("diagnostics.csv"), &diagnostics_csv(&fit.diagnostics.records))?;

    let last = fit.diagnostics.records.last();
    let (cost, con) = last.map_or((0.0, 0.0), |r| (r.cost, r.constraint));
    let status = match fit.termination {
        Termination::MaxIterations => format!("ran {} iterations", fit.diagnostics.records.len()),
        Termination::Converged { at } => format!("converged at iteration {at}"),
    };
    println!(
        "fit: {status} in {secs:.1}s; final cost {cost:.6e}, constraint {con:+.6e}"
    );
    println!("wrote {}, {}", a.out.join("flow.json").display(), a.out.join("diagnostics.csv").display());
    Ok(())
}

fn diagnostics_csv(records: &[otflow::solver::IterationRecord]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("iteration,j,cost,constraint,step_norm,clipped,fell_back\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration, r.j, r.cost, r.constraint, r.step_norm, r.clipped as u8, r.fell_back as u8
        );
    }
    out
}

fn run_replay(a: &ReplayArgs) -> CliResult<()> {
    let flow = load_flow(&a.flow)?;
    let pts = io::read_points(&a.points)?;
    let mapped = flow_apply_batch(&flow, &pts)?;
    ensure_dir(&a.out)?;
    io::write_points(&a.out.join("mapped.csv"), &mapped)?;
    println!("replay: mapped {} points through {} steps", mapped.len(), flow.len());
    println!("wrote {}", a.out.join("mapped.csv").display());
    Ok(())
}

fn run_density(a: &DensityArgs) -> CliResult<()> {
    let flow = load_flow(&a.flow)?;
    let pts = io::read_points(&a.points)?;
    let target = TargetDensity::standard_gaussian(flow.dim());
    let model = DensityModel::new(flow, target)?;
    let (lds, stats) = log_density_batch(&model, &pts)?;
    ensure_dir(&a.out)?;

    use std::fmt::Write as _;
    let mut csv = String::new();
    csv.push_str(&io::point_header(pts.dim()));
    csv.push_str(",log_density\n");
    for (i, ld) in lds.iter().enumerate() {
        for v in pts.row(i) {
            let _ = write!(csv, "{v},");
        }
        let _ = writeln!(csv, "{ld}");
    }
    io::write_text(&a.out.join("density.csv"), &csv)?;

    let finite: Vec<f64> = lds.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    if stats.negative_steps > 0 {
        log::warn!(
            "{} negative-determinant step encounters; density values may be unreliable",
            stats.negative_steps
        );
    }
    let summary = serde_json::json!({
        "n_points": lds.len(),
        "n_finite": finite.len(),
        "mean_log_density": mean,
        "min_log_density": finite.iter().cloned().fold(f64::INFINITY, f64::min),
        "max_log_density": finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        "singular_points": stats.singular,
        "negative_det_steps": stats.negative_steps,
    });
    io::write_text(&a.out.join("density_summary.json"), &format!("{summary:#}\n"))?;
    println!(
        "density: {} points, mean log density {mean:.4}, {} singular",
        lds.len(),
        stats.singular
    );
    println!("wrote {}, {}", a.out.join("density.csv").display(), a.out.join("density_summary.json").display());
    Ok(())
}

fn run_generate(a: &GenerateArgs) -> CliResult<()> {
    let flow = load_flow(&a.flow)?;
    let d = flow.dim();
    let mut rng = substream(a.seed, StreamId::SourceData);
    let mut pts = PointMatrix::with_capacity(a.n, d);
    let mut row = vec![0.0; d];
    for _ in 0..a.n {
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        pts.push_row(&row);
    }
    let mapped = flow_apply_batch(&flow, &pts)?;
    ensure_dir(&a.out)?;
    io::write_points(&a.out.join("generated.csv"), &mapped)?;
    println!("generate: {} samples in dimension {d} pushed through {} steps", a.n, flow.len());
    println!("wrote {}", a.out.join("generated.csv").display());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Replay(a) => run_replay(a),
        Command::Density(a) => run_density(a),
        Command::Generate(a) => run_generate(a),
        Command::BenchDim(a) => experiments::run_bench_dim(a),
        Command::Recover1d(a) => experiments::run_recover_1d(a),
        Command::Trimodal2d(a) => experiments::run_trimodal_2d(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
