//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand_distr::{Distribution, StandardNormal};
use reserve_cli::config::{Method, RunConfig};
use reserve_cli::pipeline::{cmd_eval, cmd_gen_data, cmd_sweep, cmd_train};
use reserve_core::data::{default_system, generate, true_shape, Context, GeneratorParams};
use reserve_core::eval::{consistency_diagnostic, evaluate, BootstrapConfig, EvalReport, ShapeSource};
use reserve_core::geometry::project_shape;
use reserve_core::oracle;
use reserve_core::quantile::conformal_index;
use reserve_core::train::contextual::{init_encoder, train_contextual, ContextualConfig};
use reserve_core::train::{train_static, TrainConfig};

type Outcome = Result<(bool, String), String>;

struct Line {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: usize, title: &'static str, f: impl FnOnce() -> Outcome) -> Line {
    let t0 = Instant::now();
    let (passed, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".into()),
    };
    let line = Line { id, title, passed, detail, elapsed: t0.elapsed() };
    println!(
        "{} {:>2}  {:<44} {}  [{:.1}s]",
        if line.passed { "PASS" } else { "FAIL" },
        line.id,
        line.title,
        line.detail,
        line.elapsed.as_secs_f64()
    );
    line
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c1_envelope() -> Outcome {
    let combos = [(2, 1), (2, 3), (4, 1), (4, 3)];
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut skipped = 0;
    let mut seed = 0u64;
    while done < 10 {
        if seed >= 200 {
            return Ok((false, format!("only {done} clean instances in 200 seeds")));
        }
        let (d, z) = combos[done % combos.len()];
        let mut rng = oracle::seeded(seed, 1);
        seed += 1;
        let sys = oracle::toy_system(&mut rng, d, z);
        let l = oracle::random_shape(&mut rng, d);
        let rho = rand::Rng::random_range(&mut rng, 5.0..30.0);
        if !oracle::is_clean(&sys, &l, rho, None).map_err(e2s)? {
            skipped += 1;
            continue;
        }
        let c = oracle::envelope_fd_check(&sys, &l, rho, None).map_err(e2s)?;
        worst = worst.max(c.rel_err_l).max(c.rel_err_rho);
        done += 1;
    }
    Ok((worst <= 1e-4, format!("10 toys (d in {{2,4}}, Z in {{1,3}}), max rel err {worst:.2e}, {skipped} degenerate skipped")))
}

fn c2_profiled() -> Outcome {
    let mut rng = oracle::seeded(2, 0);
    let sys = oracle::toy_system(&mut rng, 2, 1);
    let l_true = oracle::random_shape(&mut rng, 2);
    let tune: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let e = nalgebra::DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            (l_true.matrix() * e * 10.0).iter().copied().collect()
        })
        .collect();
    let l = oracle::random_shape(&mut rng, 2);
    let cfg = TrainConfig { check_degeneracy: false, ..Default::default() };
    let pg = reserve_core::train::profiled_gradient(&l, &sys, &tune, &cfg, None).map_err(e2s)?;
    if !oracle::is_clean(&sys, &l, pg.rho_eps, None).map_err(e2s)? {
        return Ok((false, "evaluation point is dual degenerate".into()));
    }
    let err = oracle::profiled_fd_check(&l, &sys, &tune, &cfg).map_err(e2s)?;
    Ok((err <= 1e-3, format!("d = 2, Z = 1, n_tune = 500, rel err {err:.2e}, g_rho = {:.3}", pg.g_rho)))
}

fn c3_ellipsoid() -> Outcome {
    let s = oracle::ellipsoid_suite(3, 200).map_err(e2s)?;
    let ok = s.max_homogeneity_err <= 1e-12 && s.max_support_grad_err <= 1e-5 && s.max_gauge_grad_err <= 1e-5;
    Ok((
        ok,
        format!(
            "{} cases, homogeneity {:.1e}, support grad {:.1e}, gauge grad {:.1e}",
            s.cases, s.max_homogeneity_err, s.max_support_grad_err, s.max_gauge_grad_err
        ),
    ))
}

fn c4_conformal() -> Outcome {
    let m = oracle::conformal_monte_carlo(99, 0.9, 2000, 3, 42).map_err(e2s)?;
    let k = conformal_index(99, 0.9);
    Ok((
        (0.90..=0.93).contains(&m),
        format!("n_cal = 99, tau = 0.9, 2000 trials: mean coverage {m:.5} (k = {k}, exact expectation {:.5})", k as f64 / 100.0),
    ))
}

fn c5_consistency() -> Outcome {
    let sys = default_system(42);
    let ctx = Context::nominal();
    let p = GeneratorParams { ar_coeff: 0.0, constant_context: Some(ctx), ..Default::default() };
    let l = project_shape(true_shape(&p, &ctx).map_err(e2s)?.matrix(), 1e-6, true);
    let rep = consistency_diagnostic(&l, &sys, &p, 0.5, 0.95, &[250, 1000, 4000], 20, 42).map_err(e2s)?;
    let first = rep.rows[0].median_dev;
    let last = rep.rows[rep.rows.len() - 1].median_dev;
    let meds: Vec<String> = rep.rows.iter().map(|r| format!("{}:{:.1}", r.n, r.median_dev)).collect();
    Ok((
        last <= 0.5 * first && rep.inversions() <= 1,
        format!("median dev {} (ratio {:.3}, ref n = {}, |g_ref| = {:.1})", meds.join(" "), last / first, rep.n_ref, rep.reference_norm),
    ))
}

fn c6_lp() -> Outcome {
    let mut worst = 0.0f64;
    let mut optimal = 0;
    for seed in 0..20 {
        let c = oracle::lp_vertex_check(&oracle::random_boxed_lp(seed, false)).map_err(e2s)?;
        if !c.passes(1e-8) {
            return Ok((false, format!("seed {seed}: {c:?}")));
        }
        worst = worst.max(c.objective_rel_err);
        optimal += usize::from(c.status == reserve_core::lpcore::LpStatus::Optimal);
    }
    Ok((true, format!("20 LPs ({optimal} optimal), max rel err {worst:.1e}, KKT and gap hold on all")))
}

struct DeskRun {
    dir: tempfile::TempDir,
    cfg: RunConfig,
    decoupled: Vec<EvalReport>,
    coupled: Vec<EvalReport>,
}

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.n_hours = 8192;
    cfg
}

fn desk_pipeline() -> Result<DeskRun, String> {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let cfg = desk_config();
    let out = dir.path();
    cmd_gen_data(&cfg, out).map_err(e2s)?;
    cmd_train(&cfg, out, false).map_err(e2s)?;
    let decoupled = cmd_eval(&cfg, out, false).map_err(e2s)?;
    cmd_train(&cfg, out, true).map_err(e2s)?;
    let coupled = cmd_eval(&cfg, out, true).map_err(e2s)?;
    Ok(DeskRun { dir, cfg, decoupled, coupled })
}

fn find<'a>(rs: &'a [EvalReport], m: Method) -> Result<&'a EvalReport, String> {
    rs.iter().find(|r| r.method == m.label()).ok_or_else(|| format!("missing {}", m.label()))
}

fn c7_desk(run: &Result<DeskRun, String>, elapsed: Duration) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let mut ok = true;
    let mut notes = Vec::new();
    for (mode, rs) in [("dec", &run.decoupled), ("cpl", &run.coupled)] {
        let sc = find(rs, Method::SampleCovariance)?;
        let ls = find(rs, Method::LearnedStatic)?;
        let ratio = ls.cost / sc.cost;
        ok &= ratio <= 0.98;
        notes.push(format!("{mode} ratio {ratio:.4}"));
        for r in rs.iter() {
            let floor = conformal_index(r.n_cal, r.tau) as f64 / r.n_cal as f64 - 1e-9;
            let good = r.test_coverage >= 0.94 && r.ci_hi >= 0.95 && r.calibration_rate >= floor;
            if !good {
                notes.push(format!("{mode} {} cov {:.3} ci_hi {:.3} cal {:.3}", r.method, r.test_coverage, r.ci_hi, r.calibration_rate));
            }
            ok &= good;
        }
    }
    let delta = |m: Method| -> Result<f64, String> { Ok(find(&run.coupled, m)?.cost - find(&run.decoupled, m)?.cost) };
    let (d_sc, d_ls) = (delta(Method::SampleCovariance)?, delta(Method::LearnedStatic)?);
    ok &= d_ls < d_sc;
    notes.push(format!("coupling delta SC {d_sc:.1} vs learned {d_ls:.1}"));
    let min_cov = run.decoupled.iter().chain(&run.coupled).map(|r| r.test_coverage).fold(1.0, f64::min);
    notes.push(format!("min coverage {min_cov:.3}"));
    ok &= elapsed < Duration::from_secs(15 * 60);
    notes.push(format!("single-threaded {:.0}s", elapsed.as_secs_f64()));
    Ok((ok, notes.join(", ")))
}

fn c8_sweep(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let taus = [0.90, 0.92, 0.95, 0.97, 0.99];
    let cells = cmd_sweep(&run.cfg, run.dir.path(), false, &taus).map_err(e2s)?;
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for c in &cells {
        let r = c.report.as_ref().ok_or_else(|| format!("{} at {}: {:?}", c.method, c.tau, c.error))?;
        by_method.entry(c.method.as_str()).or_default().push(r.cost);
    }
    let monotone = by_method.values().all(|v| v.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    let sc = &by_method[Method::SampleCovariance.label()];
    let ls = &by_method[Method::LearnedStatic.label()];
    let cheaper = ls.iter().zip(sc).all(|(a, b)| a < b);
    let gaps: Vec<String> = ls.iter().zip(sc).map(|(a, b)| format!("{:.0}", b - a)).collect();
    Ok((monotone && cheaper, format!("monotone {monotone}, learned below SC at every tau {cheaper} (gaps {})", gaps.join("/"))))
}

fn c9_robust_abs() -> Outcome {
    let r = oracle::robust_abs_check(9, 20, 10_000).map_err(e2s)?;
    Ok((r.worst_excess <= 1e-9, format!("20 x 10^4 samples, max excess {:.2e}, closest approach {:.4} of bound", r.worst_excess, r.worst_ratio)))
}

fn hash_tree(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(e2s)? {
            let p = e.map_err(e2s)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).map_err(e2s)?);
            }
        }
    }
    Ok(out)
}

fn cli_run(dir: &Path, cfg_path: &Path, threads: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let bin = env!("CARGO_BIN_EXE_reserveset");
    let steps: [&[&str]; 6] = [
        &["gen-data"],
        &["train"],
        &["eval"],
        &["train", "--coupled"],
        &["eval", "--coupled"],
        &["sweep"],
    ];
    for args in steps {
        let st = Command::new(bin)
            .args(args)
            .arg("--config")
            .arg(cfg_path)
            .arg("--out")
            .arg(dir)
            .arg("--threads")
            .arg(threads.to_string())
            .env("RUST_LOG", "error")
            .output()
            .map_err(e2s)?;
        if !st.status.success() {
            return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&st.stderr)));
        }
    }
    hash_tree(dir)
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let mut cfg = RunConfig::default();
    cfg.data.n_hours = 4096;
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_json()).map_err(e2s)?;
    let mut runs = Vec::new();
    for (i, threads) in [1, 1, 4, 4].into_iter().enumerate() {
        runs.push(cli_run(&tmp.path().join(format!("run{i}")), &cfg_path, threads)?);
    }
    let n_files = runs[0].len();
    let same = runs.iter().all(|r| r == &runs[0]);
    let wanted = ["data/dataset.csv", "checkpoints/decoupled/learned_static.json", "checkpoints/coupled/contextual.json", "reports/eval_coupled.csv", "reports/sweep_decoupled.csv"];
    let present = wanted.iter().all(|w| runs[0].contains_key(*w));
    Ok((same && present, format!("n = 4096, runs at --threads 1,1,4,4: {n_files} files each, byte-identical {same}")))
}

fn c11_contextual() -> Outcome {
    let ctx = Context::nominal();
    let p = GeneratorParams { constant_context: Some(ctx), ..Default::default() };
    let ds = generate(&p, 4096).map_err(e2s)?;
    let sys = default_system(42);
    let tcfg = TrainConfig::default();
    let (ls, _) = train_static(&sys, &ds, &tcfg, None).map_err(e2s)?;
    let ccfg = ContextualConfig::default();
    let enc = init_encoder(&ccfg, ctx.features().len(), sys.dim(), Some(&ls)).map_err(e2s)?;
    let (enc, trace) = train_contextual(enc, &sys, &ds, &ccfg, None).map_err(e2s)?;
    let boot = BootstrapConfig { reps: 1000, ..Default::default() };
    let a = evaluate("static", ShapeSource::Static(&ls), &sys, &ds, 0.95, None, &boot).map_err(e2s)?;
    let b = evaluate("contextual", ShapeSource::Contextual(&enc), &sys, &ds, 0.95, None, &boot).map_err(e2s)?;
    let gap = (b.cost - a.cost).abs() / a.cost;
    let fd = [(2, true), (3, false), (4, true)]
        .into_iter()
        .map(|(s, n)| oracle::encoder_fd_check(s, n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e2s)?
        .into_iter()
        .fold(0.0, f64::max);
    Ok((
        gap <= 0.02 && fd <= 1e-4,
        format!(
            "constant context: contextual {:.1} vs static {:.1} ({:.3}% apart, {} iterations); encoder FD rel err {fd:.1e}",
            b.cost,
            a.cost,
            100.0 * gap,
            trace.records.len()
        ),
    ))
}

fn main() {
    println!("acceptance suite");
    let mut lines = Vec::new();
    lines.push(run(1, "Gradient correctness (envelope)", c1_envelope));
    lines.push(run(2, "Gradient correctness (profiled)", c2_profiled));
    lines.push(run(3, "Ellipsoid formula suite", c3_ellipsoid));
    lines.push(run(4, "Conformal guarantee (Monte-Carlo)", c4_conformal));
    lines.push(run(5, "Consistency diagnostic", c5_consistency));
    lines.push(run(6, "LP core vs vertex enumeration", c6_lp));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    let t0 = Instant::now();
    let desk = pool.install(desk_pipeline);
    let desk_time = t0.elapsed();
    lines.push(run(7, "Desk-scale pipeline orderings", || c7_desk(&desk, desk_time)));
    lines.push(run(8, "Tau-sweep properties", || c8_sweep(&desk)));
    lines.push(run(9, "Robust absolute-value bound", c9_robust_abs));
    lines.push(run(10, "Determinism across runs and threads", c10_determinism));
    lines.push(run(11, "Contextual sanity", c11_contextual));
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
