use otflow::density::{kl_monte_carlo, oracle_cost_1d, transport_cost, CostFrame, DensityModel, TargetDensity};
use otflow::rng::{substream, StreamId};
use otflow::solver::{fit_general, FitOptions, KlTracking};
use otflow::{PointMatrix, SampleLabel, SampleSet, SolverConfig};
use rand::Rng;
use std::time::Instant;

fn gaussian(seed: u64, id: StreamId, n: usize, d: usize) -> PointMatrix {
    let mut rng = substream(seed, id);
    let mut pts = PointMatrix::with_capacity(n, d);
    let mut row = vec![0.0; d];
    for _ in 0..n {
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        pts.push_row(&row);
    }
    pts
}

fn t_true(x: f64) -> f64 {
    1.5 * x.signum() * x.abs().sqrt()
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "self".into());
    match which.as_str() {
        "self" => run_self(),
        "recover" => run_recover(),
        "recover2" => run_recover2(),
        "trimodal" => run_trimodal(),
        "probe" => run_probe(),
        "probe2" => run_probe2(),
        "post" => run_post(),
        _ => eprintln!("unknown scratch case {which}"),
    }
}

fn run_self() {
    let pts = gaussian(11, StreamId::SourceData, 200, 2);
    let x = SampleSet::new(pts.clone(), SampleLabel::Source).unwrap();
    let y = SampleSet::new(pts, SampleLabel::Target).unwrap();
    let mut cfg = SolverConfig::default();
    cfg.max_iterations = 500;
    cfg.rng_seed = 7;
    let t0 = Instant::now();
    let fit = fit_general(&x, &y, &cfg, FitOptions::default()).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    for (i, r) in fit.diagnostics.records.iter().enumerate() {
        if i % 50 == 0 || i + 1 == fit.diagnostics.len() {
            println!(
                "it {:4}  J {:+.6e}  cost {:+.6e}  con {:+.6e}  step {:.3e} clip {} fb {}",
                r.iteration, r.j, r.cost, r.constraint, r.step_norm, r.clipped, r.fell_back
            );
        }
    }
    println!("self-transport: {} iters in {:.2}s ({:.2} ms/it)", fit.diagnostics.len(), dt, 1e3 * dt / fit.diagnostics.len() as f64);
}

fn run_recover() {
    let n = 1000;
    let xs = gaussian(3, StreamId::SourceData, n, 1);
    let mut ys = gaussian(3, StreamId::TargetData, n, 1);
    for i in 0..n {
        ys.row_mut(i)[0] = t_true(ys.row(i)[0]);
    }
    let oracle = oracle_cost_1d(xs.as_flat(), ys.as_flat()).unwrap();
    let x = SampleSet::new(xs.clone(), SampleLabel::Source).unwrap();
    let y = SampleSet::new(ys, SampleLabel::Target).unwrap();
    let mut cfg = SolverConfig::default();
    cfg.max_iterations = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    cfg.rng_seed = 3;
    if let Some(s) = std::env::args().nth(3).and_then(|s| s.parse::<f64>().ok()) {
        if s > 0.0 {
            cfg.testfn_bandwidth = otflow::BandwidthPolicy::Fixed(s);
        } else if s < 0.0 {
            // negative sigma = adaptive bandwidth with k = |sigma| neighbours
            cfg.testfn_bandwidth = otflow::BandwidthPolicy::Adaptive;
            cfg.bandwidth_knn = Some((-s) as usize);
        }
    }
    if let Some(t) = std::env::args().nth(4).and_then(|s| s.parse::<f64>().ok()) {
        if t > 0.0 {
            cfg.map_scale = otflow::BandwidthPolicy::Fixed(t);
        } else if t < 0.0 {
            cfg.map_scale = otflow::BandwidthPolicy::Adaptive;
        }
    }
    if let Some(nc) = std::env::args().nth(5).and_then(|s| s.parse::<usize>().ok()) {
        cfg.n_centers = nc;
    }
    if let Some(eta) = std::env::args().nth(6).and_then(|s| s.parse::<f64>().ok()) {
        cfg.learning_rate = eta;
    }
    if let Some(nr) = std::env::args().nth(7).and_then(|s| s.parse::<usize>().ok()) {
        cfg.n_representers = nr;
    }
    let refs = {
        let mut m = PointMatrix::with_capacity(n, 1);
        for r in xs.rows() {
            m.push_row(&[t_true(r[0])]);
        }
        m
    };
    let opts = FitOptions { reference_images: Some(&refs), ..Default::default() };
    let t0 = Instant::now();
    let fit = fit_general(&x, &y, &cfg, opts).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let init_l1 = fit.diagnostics.initial_l1.unwrap();
    for (i, r) in fit.diagnostics.records.iter().enumerate() {
        if i % 1000 == 0 || i + 1 == fit.diagnostics.len() {
            println!(
                "it {:5}  J {:+.4e}  cost {:+.4e}  con {:+.4e}  L1 {:.4e}",
                r.iteration, r.j, r.cost, r.constraint, r.l1_error.unwrap()
            );
        }
    }
    let fitted = transport_cost(&fit.flow, &xs, CostFrame::Original).unwrap();
    println!(
        "recover-1d: {:.1}s ({:.2} ms/it)  initial L1 {:.4}  final L1 {:.4}  ratio {:.2}",
        dt, 1e3 * dt / fit.diagnostics.len() as f64, init_l1,
        fit.diagnostics.records.last().unwrap().l1_error.unwrap(),
        init_l1 / fit.diagnostics.records.last().unwrap().l1_error.unwrap()
    );
    println!("cost fitted {:.4} oracle {:.4} rel err {:+.2}%", fitted, oracle, 100.0 * (fitted - oracle) / oracle);
    let mut pairs: Vec<(f64, f64)> = xs.rows().zip(fit.transported.rows()).map(|(a, b)| (a[0], b[0])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ok = pairs.windows(2).filter(|w| w[1].1 >= w[0].1).count();
    println!("monotone fraction {:.4}", ok as f64 / (pairs.len() - 1) as f64);
    let mut ysort: Vec<f64> = y.points.rows().map(|r| r[0]).collect();
    ysort.sort_by(f64::total_cmp);
    let mut dump = String::from("x,fitted,true,emp\n");
    for (i, (a, b)) in pairs.iter().enumerate() {
        dump.push_str(&format!("{a},{b},{},{}\n", t_true(*a), ysort[i]));
    }
    std::fs::write("/tmp/map_dump.csv", dump).unwrap();
}

// Two-phase anneal: a wide adaptive phase to divide mass at the density
// hole, then a narrow fixed-bandwidth phase to polish the bulk.
fn run_recover2() {
    use otflow::transport::flow_apply_batch;

    let n = 1000;
    let xs = gaussian(3, StreamId::SourceData, n, 1);
    let mut ys = gaussian(3, StreamId::TargetData, n, 1);
    for i in 0..n {
        ys.row_mut(i)[0] = t_true(ys.row(i)[0]);
    }
    let oracle = oracle_cost_1d(xs.as_flat(), ys.as_flat()).unwrap();
    let x = SampleSet::new(xs.clone(), SampleLabel::Source).unwrap();
    let y = SampleSet::new(ys.clone(), SampleLabel::Target).unwrap();
    let it_a: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let it_b: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let sig_b: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.15);
    let tau_b: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let l1 = |t: &PointMatrix| -> f64 {
        (0..n).map(|i| (t.row(i)[0] - t_true(xs.row(i)[0])).abs()).sum::<f64>() / n as f64
    };
    let cost = |t: &PointMatrix| -> f64 {
        (0..n).map(|i| 0.5 * (t.row(i)[0] - xs.row(i)[0]).powi(2)).sum::<f64>() / n as f64
    };
    let init_l1 = l1(&xs);
    let t0 = Instant::now();

    let mut cfg_a = SolverConfig::default();
    cfg_a.max_iterations = it_a;
    cfg_a.rng_seed = 3;
    cfg_a.testfn_bandwidth = otflow::BandwidthPolicy::Adaptive;
    cfg_a.bandwidth_knn = Some(400);
    cfg_a.map_scale = otflow::BandwidthPolicy::Adaptive;
    let fit_a = fit_general(&x, &y, &cfg_a, FitOptions::default()).unwrap();
    let mid = fit_a.transported.clone();
    println!("phase A: L1 {:.4} (ratio {:.2})  cost {:.4}", l1(&mid), init_l1 / l1(&mid), cost(&mid));

    let xb = SampleSet::new(mid.clone(), SampleLabel::Source).unwrap();
    let mut cfg_b = SolverConfig::default();
    cfg_b.max_iterations = it_b;
    cfg_b.rng_seed = 4;
    cfg_b.testfn_bandwidth = otflow::BandwidthPolicy::Fixed(sig_b);
    cfg_b.map_scale = otflow::BandwidthPolicy::Fixed(tau_b);
    let fit_b = fit_general(&xb, &y, &cfg_b, FitOptions::default()).unwrap();
    let fin = flow_apply_batch(&fit_b.flow, &mid).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("phase B: L1 {:.4} (ratio {:.2})  cost {:.4}", l1(&fin), init_l1 / l1(&fin), cost(&fin));

    let fitted = cost(&fin);
    println!(
        "recover2: {:.1}s  initial L1 {:.4}  final L1 {:.4}  ratio {:.2}",
        dt, init_l1, l1(&fin), init_l1 / l1(&fin)
    );
    println!("cost fitted {:.4} oracle {:.4} rel err {:+.2}%", fitted, oracle, 100.0 * (fitted - oracle) / oracle);
    let mut pairs: Vec<(f64, f64)> = xs.rows().zip(fin.rows()).map(|(a, b)| (a[0], b[0])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ok = pairs.windows(2).filter(|w| w[1].1 >= w[0].1).count();
    println!("monotone fraction {:.4}", ok as f64 / (pairs.len() - 1) as f64);
}

fn run_trimodal() {
    let d = 2;
    let n = 400;
    let tri = TargetDensity::trimodal_2d();
    let src = tri.sample(n, &mut substream(5, StreamId::SourceData));
    let tgt = gaussian(5, StreamId::TargetData, n, d);
    let x = SampleSet::new(src, SampleLabel::Source).unwrap();
    let y = SampleSet::new(tgt, SampleLabel::Target).unwrap();
    let mut cfg = SolverConfig::default();
    cfg.max_iterations = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    cfg.rng_seed = 5;
    let sig: f64 = std::env::args().nth(9).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let tau: f64 = std::env::args().nth(10).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    cfg.testfn_bandwidth = otflow::BandwidthPolicy::Fixed(sig);
    cfg.map_scale = otflow::BandwidthPolicy::Fixed(tau);
    cfg.precondition = std::env::args().nth(3).and_then(|s| s.parse::<u8>().ok()).unwrap_or(1) != 0;
    cfg.learning_rate = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    cfg.n_centers = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(1);
    cfg.trust_region = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(0.003);
    if std::env::args().nth(7).as_deref() == Some("gda") {
        cfg.optimizer = otflow::OptimizerKind::ExplicitGda;
    }
    if let Some(s) = std::env::args().nth(8).and_then(|s| s.parse().ok()) {
        cfg.rng_seed = s;
    }
    println!(
        "precond {} eta {} nc {} delta {} opt {:?}",
        cfg.precondition, cfg.learning_rate, cfg.n_centers, cfg.trust_region, cfg.optimizer
    );
    let std = TargetDensity::standard_gaussian(d);
    let eval = tri.sample(2000, &mut substream(900, StreamId::Evaluation));
    let opts = FitOptions {
        kl: Some(KlTracking { true_density: &tri, flow_target: &std, eval_points: &eval }),
        ..Default::default()
    };
    let t0 = Instant::now();
    let fit = fit_general(&x, &y, &cfg, opts).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("initial KL {:.4}", fit.diagnostics.initial_kl.unwrap());
    for (i, r) in fit.diagnostics.records.iter().enumerate() {
        if i % 250 == 0 || i + 1 == fit.diagnostics.len() {
            println!(
                "it {:5}  J {:+.4e}  cost {:+.4e}  con {:+.4e}  KL {:.4}",
                r.iteration, r.j, r.cost, r.constraint, r.kl.unwrap()
            );
        }
    }
    println!("trimodal: {:.1}s ({:.2} ms/it)", dt, 1e3 * dt / fit.diagnostics.len() as f64);
    // Stall dissection: cloud geometry, displacement field, and F levels.
    if let otflow::solver::FinalTestFunction::Kernel(ens) = &fit.test_function {
        let tf = otflow::testfn::TestFunction::from_ensemble(ens);
        let (pos, neg) = tf.clouds();
        let dec = |pts: &PointMatrix| {
            let mut r: Vec<f64> = pts.rows().map(|p| norm(p)).collect();
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (r[r.len() / 10], r[r.len() / 2], r[9 * r.len() / 10])
        };
        println!("pos cloud |b| deciles {:?}  neg {:?}", dec(pos), dec(neg));
        let xp = fit.flow.pre.as_ref().unwrap().apply_points(&x.points);
        let tp = &fit.transported_pre;
        let mut disp: Vec<f64> = (0..xp.len())
            .map(|i| {
                let a = tp.row(i);
                let b = xp.row(i);
                (0..2).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        disp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "disp deciles {:.3} {:.3} {:.3}  max {:.3}",
            disp[40], disp[200], disp[360], disp[399]
        );
        let yp = fit.flow.post.as_ref().unwrap().apply_points(&y.points);
        let (mut fa, mut fy, mut ga) = (0.0, 0.0, 0.0);
        let mut grad = vec![0.0; 2];
        for i in 0..tp.len() {
            fa += tf.eval(tp.row(i)).unwrap() / tp.len() as f64;
            tf.grad_y_into(tp.row(i), &mut grad);
            ga += norm(&grad) / tp.len() as f64;
        }
        for j in 0..yp.len() {
            fy += tf.eval(yp.row(j)).unwrap() / yp.len() as f64;
        }
        println!("mean F(A) {:+.4}  mean F(y) {:+.4}  mean |gradF(A)| {:.4}", fa, fy, ga);
    }
    let model = DensityModel::new(fit.flow.clone(), std).unwrap();
    let fresh = kl_monte_carlo(&tri, &model, &eval).unwrap();
    println!("incremental {:.4} vs replay {:.4}", fit.diagnostics.records.last().unwrap().kl.unwrap(), fresh.value);
    // KL decomposition along the flow: KL = E[log tri] - E[log mu(T)] - E[logdet].
    let n_steps = fit.flow.len();
    let e_true: f64 = (0..eval.len()).map(|i| tri.log_pdf(eval.row(i))).sum::<f64>() / eval.len() as f64;
    for k in [0, n_steps / 8, n_steps / 4, n_steps / 2, 3 * n_steps / 4, n_steps] {
        let fr = fit.flow.truncated(k);
        let (mapped, acc) = otflow::transport::flow_apply_batch_with_logdet(&fr, &eval).unwrap();
        let gauss = TargetDensity::standard_gaussian(2);
        let n = mapped.len() as f64;
        let e_mu: f64 = (0..mapped.len()).map(|i| gauss.log_pdf(mapped.row(i))).sum::<f64>() / n;
        let e_ld: f64 = acc.iter().map(|a| a.total).sum::<f64>() / n;
        let negs: usize = acc.iter().map(|a| a.negatives).sum();
        println!(
            "k {:5}  KL {:.4}  E[log mu(T)] {:+.4}  E[logdet] {:+.4}  negsteps {}",
            k, e_true - e_mu - e_ld, e_mu, e_ld, negs
        );
    }
}

#[allow(dead_code)]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

// Dissect the equilibrium the 1D recovery lands in: where the clouds sit,
// what F' says versus the realized displacement, and the fine-scale
// density mismatch left behind.
// Manual loop over the trimodal-to-Gaussian setup, printing the
// gradient/step split between the alpha and beta blocks.
fn run_probe2() {
    use otflow::config::ImplicitMode;
    use otflow::maps::{sample_centers, ElementaryMapParams};
    use otflow::precondition::whiten;
    use otflow::saddle::{implicit_step, SaddleObjective, SaddleState};
    use otflow::testfn::init_representers;
    use otflow::transport::{FlowStep, KernelStep, StepEvaluator};

    let n = 400;
    let tri = TargetDensity::trimodal_2d();
    let src = tri.sample(n, &mut substream(5, StreamId::SourceData));
    let tgt = gaussian(5, StreamId::TargetData, n, 2);
    let x = SampleSet::new(src, SampleLabel::Source).unwrap();
    let y = SampleSet::new(tgt, SampleLabel::Target).unwrap();
    let sigma: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let tau: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let eta: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let cfg = SolverConfig {
        rng_seed: 5,
        testfn_bandwidth: otflow::BandwidthPolicy::Fixed(sigma),
        ..Default::default()
    };
    let (_, xw) = whiten(&x).unwrap();
    let (_, yw) = whiten(&y).unwrap();
    let x_pre = xw.points;
    let y_pre = yw.points;
    let mut z = x_pre.clone();
    let mut ensemble = init_representers(&cfg, 2).unwrap();
    let mut crng = substream(cfg.rng_seed, StreamId::Centers);
    let iters: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    for it in 1..=iters {
        let centers = sample_centers(&z, &y_pre, 1, &mut crng).unwrap();
        let skel = ElementaryMapParams::radial(cfg.map_family, centers, tau).unwrap();
        let st = SaddleState::new(&x_pre, &z, &y_pre, &ensemble, &skel).unwrap();
        let (parts, g) = st.origin_grad().unwrap();
        let step = implicit_step(&st, eta, cfg.trust_region, ImplicitMode::Auto, false).unwrap();
        let p = skel.param_len();
        if it % 100 == 0 || it == 1 {
            println!(
                "it {it:5} J {:+.3e} con {:+.3e} |ga| {:.3e} |gb| {:.3e} |da| {:.3e} |db| {:.3e} clip {}",
                parts.j,
                parts.constraint,
                norm(&g[..2 * p]),
                norm(&g[2 * p..]),
                norm(&step.dalpha),
                norm(&step.dbeta),
                step.clipped
            );
        }
        let alpha_pos = skel.with_params(&step.dalpha[..p]).unwrap();
        let alpha_neg = skel.with_params(&step.dalpha[p..]).unwrap();
        let fstep = FlowStep::Kernel(KernelStep { ensemble: ensemble.clone(), alpha_pos, alpha_neg });
        StepEvaluator::new(&fstep).unwrap().advance(&mut z).unwrap();
        let beta_pos = skel.with_params(&step.dbeta[..p]).unwrap();
        let beta_neg = skel.with_params(&step.dbeta[p..]).unwrap();
        let mut buf = [0.0f64; 2];
        for i in 0..ensemble.positive.len() {
            beta_pos.apply_to(ensemble.positive.row(i), &mut buf);
            ensemble.positive.row_mut(i).copy_from_slice(&buf);
            beta_neg.apply_to(ensemble.negative.row(i), &mut buf);
            ensemble.negative.row_mut(i).copy_from_slice(&buf);
        }
    }
}

fn run_post() {
    use otflow::precondition::whiten;
    use otflow::solver::FinalTestFunction;
    use otflow::testfn::TestFunction;

    let n = 1000;
    let xs = gaussian(3, StreamId::SourceData, n, 1);
    let mut ys = gaussian(3, StreamId::TargetData, n, 1);
    for i in 0..n {
        ys.row_mut(i)[0] = t_true(ys.row(i)[0]);
    }
    let x = SampleSet::new(xs.clone(), SampleLabel::Source).unwrap();
    let y = SampleSet::new(ys.clone(), SampleLabel::Target).unwrap();
    let mut cfg = SolverConfig::default();
    cfg.max_iterations = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    cfg.rng_seed = 3;
    cfg.testfn_bandwidth = otflow::BandwidthPolicy::Adaptive;
    cfg.bandwidth_knn = Some(400);
    cfg.map_scale = otflow::BandwidthPolicy::Adaptive;
    let fit = fit_general(&x, &y, &cfg, FitOptions::default()).unwrap();
    let ens = match &fit.test_function {
        FinalTestFunction::Kernel(e) => e,
        _ => unreachable!(),
    };
    let f = TestFunction::from_ensemble(ens);
    let mut pos: Vec<(f64, f64)> =
        ens.positive.rows().zip(&ens.bandwidths_pos).map(|(r, &b)| (r[0], b)).collect();
    let mut neg: Vec<(f64, f64)> =
        ens.negative.rows().zip(&ens.bandwidths_neg).map(|(r, &b)| (r[0], b)).collect();
    pos.sort_by(|a, b| a.0.total_cmp(&b.0));
    neg.sort_by(|a, b| a.0.total_cmp(&b.0));
    let show = |name: &str, v: &[(f64, f64)]| {
        let q: Vec<String> = (0..=10)
            .map(|i| {
                let idx = (i * (v.len() - 1)) / 10;
                format!("{:+.2}/{:.2}", v[idx].0, v[idx].1)
            })
            .collect();
        println!("{name} cloud deciles (pos/bw): {}", q.join("  "));
    };
    show("pos", &pos);
    show("neg", &neg);

    // whitened frames for x and y
    let (_, xw) = whiten(&x).unwrap();
    let (_, yw) = whiten(&y).unwrap();
    let zf = &fit.transported_pre;
    // fine-scale signed density gap g(u) and F'(u) on a grid
    let sig = 0.1;
    let dens = |u: f64, pts: &PointMatrix| -> f64 {
        pts.rows().map(|r| (-(u - r[0]).powi(2) / (2.0 * sig * sig)).exp()).sum::<f64>()
            / (pts.len() as f64 * sig * (2.0 * std::f64::consts::PI).sqrt())
    };
    println!("  u      gap(u)    F(u)      F'(u)");
    let mut u = -3.0;
    while u <= 3.0 {
        let gap = dens(u, zf) - dens(u, &yw.points);
        let fv = f.eval(&[u]).unwrap();
        let g = f.grad_y(&[u]).unwrap()[0];
        println!("{:+.2}  {:+.4}  {:+.5}  {:+.5}", u, gap, fv, g);
        u += 0.25;
    }
    // displacement vs F-gradient at source deciles
    println!("  x_pre     z_fin     disp      F'(z)");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xw.points.row(a)[0].total_cmp(&xw.points.row(b)[0]));
    for i in 0..=20 {
        let idx = order[(i * (n - 1)) / 20];
        let u = xw.points.row(idx)[0];
        let z = zf.row(idx)[0];
        let g = f.grad_y(&[z]).unwrap()[0];
        println!("{:+.3}  {:+.3}  {:+.3}  {:+.3}", u, z, z - u, g);
    }
}

fn run_probe() {
    use otflow::config::BandwidthPolicy;
    use otflow::kernel::{adaptive_bandwidths, default_knn};
    use otflow::maps::{sample_centers, ElementaryMapParams};
    use otflow::precondition::whiten;
    use otflow::saddle::{implicit_step, SaddleObjective, SaddleState};
    use otflow::testfn::init_representers;
    use otflow::transport::{FlowStep, KernelStep, StepEvaluator};
    use otflow::config::ImplicitMode;

    let n = 1000;
    let xs = gaussian(3, StreamId::SourceData, n, 1);
    let mut ys = gaussian(3, StreamId::TargetData, n, 1);
    for i in 0..n {
        ys.row_mut(i)[0] = t_true(ys.row(i)[0]);
    }
    let x = SampleSet::new(xs, SampleLabel::Source).unwrap();
    let y = SampleSet::new(ys, SampleLabel::Target).unwrap();
    let sigma: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let mut cfg = SolverConfig { rng_seed: 3, ..Default::default() };
    if sigma > 0.0 {
        cfg.testfn_bandwidth = BandwidthPolicy::Fixed(sigma);
    }
    let (_, xw) = whiten(&x).unwrap();
    let (post, yw) = whiten(&y).unwrap();
    let x_pre = xw.points;
    let y_pre = yw.points;
    let mut z = x_pre.clone();
    let mut ensemble = init_representers(&cfg, 1).unwrap();
    let mut crng = substream(cfg.rng_seed, StreamId::Centers);
    // preconditioned reference images
    let ref_pre = {
        let mut m = PointMatrix::with_capacity(n, 1);
        for r in x.points.rows() {
            m.push_row(&post.apply(&[t_true(r[0])]));
        }
        m
    };
    let l1 = |z: &PointMatrix| -> f64 {
        (0..n).map(|i| (z.row(i)[0] - ref_pre.row(i)[0]).abs()).sum::<f64>() / n as f64
    };
    println!("initial L1 {:.4}", l1(&z));
    let iters: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let mut t_band = 0.0; let mut t_step = 0.0; let mut t_commit = 0.0;
    for it in 1..=iters {
        let t0 = Instant::now();
        let pool = {
            let mut p = PointMatrix::with_capacity(2 * n, 1);
            for r in z.rows() { p.push_row(r); }
            for r in y_pre.rows() { p.push_row(r); }
            p
        };
        if matches!(cfg.testfn_bandwidth, BandwidthPolicy::Adaptive) {
            let k = default_knn(pool.len());
            ensemble.bandwidths_pos =
                adaptive_bandwidths(&ensemble.positive, &pool, k, cfg.bandwidth_min, cfg.bandwidth_max).unwrap();
            ensemble.bandwidths_neg =
                adaptive_bandwidths(&ensemble.negative, &pool, k, cfg.bandwidth_min, cfg.bandwidth_max).unwrap();
        }
        t_band += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let centers = sample_centers(&z, &y_pre, 1, &mut crng).unwrap();
        let scale = match cfg.map_scale { BandwidthPolicy::Fixed(s) => s, _ => 0.1 };
        let skel = ElementaryMapParams::radial(cfg.map_family, centers, scale).unwrap();
        let st = SaddleState::new(&x_pre, &z, &y_pre, &ensemble, &skel).unwrap();
        let (parts, g) = st.origin_grad().unwrap();
        let step = implicit_step(&st, cfg.learning_rate, cfg.trust_region, ImplicitMode::Auto, false).unwrap();
        t_step += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let p = skel.param_len();
        let ga = norm(&g[..2 * p]);
        let gb = norm(&g[2 * p..]);
        let alpha_pos = skel.with_params(&step.dalpha[..p]).unwrap();
        let alpha_neg = skel.with_params(&step.dalpha[p..]).unwrap();
        let fstep = FlowStep::Kernel(KernelStep { ensemble: ensemble.clone(), alpha_pos, alpha_neg });
        let ev = StepEvaluator::new(&fstep).unwrap();
        ev.advance(&mut z).unwrap();
        let beta_pos = skel.with_params(&step.dbeta[..p]).unwrap();
        let beta_neg = skel.with_params(&step.dbeta[p..]).unwrap();
        let mut buf = [0.0f64];
        for i in 0..ensemble.positive.len() {
            beta_pos.apply_to(ensemble.positive.row(i), &mut buf);
            ensemble.positive.row_mut(i).copy_from_slice(&buf);
            beta_neg.apply_to(ensemble.negative.row(i), &mut buf);
            ensemble.negative.row_mut(i).copy_from_slice(&buf);
        }
        t_commit += t0.elapsed().as_secs_f64();
        if it % 250 == 0 || it == 1 {
            let mut bw = ensemble.bandwidths_pos.clone();
            bw.sort_by(f64::total_cmp);
            let pmin = ensemble.positive.iter_all().cloned().fold(f64::INFINITY, f64::min);
            let pmax = ensemble.positive.iter_all().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!(
                "it {it:5} J {:+.3e} con {:+.3e} |ga| {:.3e} |gb| {:.3e} |da| {:.3e} |db| {:.3e} clip {} bw[{:.3},{:.3},{:.3}] cloud[{:.2},{:.2}] L1 {:.4}",
                parts.j, parts.constraint, ga, gb, norm(&step.dalpha), norm(&step.dbeta),
                step.clipped, bw[0], bw[bw.len()/2], bw[bw.len()-1], pmin, pmax, l1(&z)
            );
        }
    }
    println!("timing per iter: band {:.2}ms step {:.2}ms commit {:.2}ms",
        1e3 * t_band / iters as f64, 1e3 * t_step / iters as f64, 1e3 * t_commit / iters as f64);
}
