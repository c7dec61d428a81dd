//! Commands: data generation, training, evaluation, tau sweep, self-test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use reserve_core::data::{
    allocation_with_spread, default_system, generate_with_split, independent_shape, sample_covariance_shape,
    UncertaintyDataset, N_FEATURES,
};
use reserve_core::eval::{
    evaluate, format_report_table, format_sweep_table, tau_sweep, write_duals_csv, write_reports_csv, write_sweep_csv,
    EvalReport, ShapeSource, SweepCell,
};
use reserve_core::geometry::CholeskyShape;
use reserve_core::oracle;
use reserve_core::quantile::{scores, smoothed_quantile};
use reserve_core::sced::{compute_transfer_limits, select_tight_zones, TransferLimits, ZonalSystem};
use reserve_core::train::contextual::{init_encoder, train_contextual};
use reserve_core::train::mlp::MlpEncoder;
use reserve_core::train::{train_static, TrainConfig};

use crate::config::{Method, RunConfig};
use crate::manifest::write_manifest;
use crate::CliError;

pub const DATASET_STEM: &str = "dataset";
pub const SYSTEM_FILE: &str = "system.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LIMITS_FILE: &str = "transfer_limits.json";
pub const ENCODER_FILE: &str = "contextual.json";

/// `data/`, `checkpoints/{decoupled,coupled}/`, `reports/` below one root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoints_for(&self, coupled: bool) -> PathBuf {
        self.checkpoints().join(mode_name(coupled))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

pub fn mode_name(coupled: bool) -> &'static str {
    if coupled {
        "coupled"
    } else {
        "decoupled"
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(reserve_core::Error::from)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(reserve_core::Error::from)?)
}

fn archive_config(dir: &Path, cfg: &RunConfig) -> Result<String, CliError> {
    let mut text = cfg.to_json();
    text.push('\n');
    std::fs::write(dir.join(CONFIG_FILE), &text)?;
    Ok(text)
}

pub fn build_system(cfg: &RunConfig) -> Result<ZonalSystem, CliError> {
    match &cfg.system.path {
        Some(p) => Ok(ZonalSystem::load_json(p)?),
        None => {
            let mut sys = default_system(cfg.system.seed);
            sys.allocation = allocation_with_spread(cfg.system.seed, cfg.system.footprint_spread);
            sys.validate()?;
            Ok(sys)
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<UncertaintyDataset, CliError> {
    let dir = Layout::new(out).data();
    std::fs::create_dir_all(&dir)?;
    let sys = build_system(cfg)?;
    let ds = generate_with_split(&cfg.data.generator, cfg.data.n_hours, cfg.data.fractions)?;
    ds.save(&dir, DATASET_STEM)?;
    sys.save_json(&dir.join(SYSTEM_FILE))?;
    let text = archive_config(&dir, cfg)?;
    write_manifest(&dir, "gen-data", &text)?;
    log::info!("wrote {} hours to {}", ds.len(), dir.display());
    Ok(ds)
}

pub fn load_inputs(out: &Path) -> Result<(ZonalSystem, UncertaintyDataset), CliError> {
    let dir = Layout::new(out).data();
    if !dir.join(SYSTEM_FILE).exists() {
        return Err(CliError::Usage(format!("no dataset under {}; run gen-data first", dir.display())));
    }
    let sys = ZonalSystem::load_json(&dir.join(SYSTEM_FILE))?;
    let ds = UncertaintyDataset::load(&dir, DATASET_STEM)?;
    Ok((sys, ds))
}

/// Trained shapes for one dispatch mode.
#[derive(Debug, Clone)]
pub struct Checkpoints {
    pub shapes: BTreeMap<Method, CholeskyShape>,
    pub encoder: Option<MlpEncoder>,
    pub limits: Option<TransferLimits>,
}

impl Checkpoints {
    pub fn source(&self, m: Method) -> Option<ShapeSource<'_>> {
        match m {
            Method::Contextual => self.encoder.as_ref().map(ShapeSource::Contextual),
            _ => self.shapes.get(&m).map(ShapeSource::Static),
        }
    }
}

/// Transfer limits from the sample-covariance shape at its smoothed tuning
/// radius, with the configured or automatically selected tight zones.
pub fn transfer_limits(
    cfg: &RunConfig,
    sys: &ZonalSystem,
    ds: &UncertaintyDataset,
    sc: &CholeskyShape,
) -> Result<TransferLimits, CliError> {
    let s = scores(sc, ds.tune())?;
    let rho = smoothed_quantile(&s, cfg.train.tau, cfg.train.eps, cfg.train.kernel)?.rho_eps;
    let e = &cfg.eval;
    let tight: BTreeSet<usize> = match &e.tight_zones {
        Some(z) => z.iter().copied().collect(),
        None => select_tight_zones(sys, sc, rho, e.n_tight, e.alpha_tight, e.alpha_loose)?,
    };
    log::info!("tight zones {tight:?} at base radius {rho:.4}");
    Ok(compute_transfer_limits(sys, sc, rho, &tight, e.alpha_tight, e.alpha_loose)?)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, coupled: bool) -> Result<Checkpoints, CliError> {
    let (sys, ds) = load_inputs(out)?;
    let layout = Layout::new(out);
    let dir = layout.checkpoints_for(coupled);
    std::fs::create_dir_all(&dir)?;

    let sc = sample_covariance_shape(ds.train())?;
    let limits = if coupled { Some(transfer_limits(cfg, &sys, &ds, &sc)?) } else { None };
    if let Some(tl) = &limits {
        write_json(&dir.join(LIMITS_FILE), tl)?;
    }
    let mut shapes = BTreeMap::new();
    if cfg.has(Method::SampleCovariance) {
        shapes.insert(Method::SampleCovariance, sc.clone());
    }
    if cfg.has(Method::Independent) {
        shapes.insert(Method::Independent, independent_shape(ds.train())?);
    }
    if cfg.has(Method::LearnedStatic) {
        let tcfg = TrainConfig { coupled, ..cfg.train.clone() };
        let (l, trace) = train_static(&sys, &ds, &tcfg, limits.as_ref())?;
        trace.save_csv(&dir.join("trace_learned_static.csv"))?;
        shapes.insert(Method::LearnedStatic, l);
    }
    for (m, l) in &shapes {
        write_json(&dir.join(format!("{}.json", m.key())), l)?;
    }
    let encoder = if cfg.has(Method::Contextual) {
        let init = shapes.get(&Method::LearnedStatic);
        let enc = init_encoder(&cfg.contextual, N_FEATURES, sys.dim(), init)?;
        let (enc, trace) = train_contextual(enc, &sys, &ds, &cfg.contextual, limits.as_ref())?;
        trace.save_csv(&dir.join("trace_contextual.csv"))?;
        enc.save(&dir.join(ENCODER_FILE))?;
        Some(enc)
    } else {
        None
    };
    archive_config(&dir, cfg)?;
    let text = cfg.to_json();
    write_manifest(&layout.checkpoints(), "train", &text)?;
    Ok(Checkpoints { shapes, encoder, limits })
}

pub fn load_checkpoints(cfg: &RunConfig, out: &Path, coupled: bool) -> Result<Checkpoints, CliError> {
    let dir = Layout::new(out).checkpoints_for(coupled);
    if !dir.exists() {
        return Err(CliError::Usage(format!(
            "no {} checkpoints under {}; run train{} first",
            mode_name(coupled),
            dir.display(),
            if coupled { " --coupled" } else { "" }
        )));
    }
    let mut shapes = BTreeMap::new();
    for m in [Method::SampleCovariance, Method::Independent, Method::LearnedStatic] {
        if cfg.has(m) {
            shapes.insert(m, read_json(&dir.join(format!("{}.json", m.key())))?);
        }
    }
    let encoder = if cfg.has(Method::Contextual) { Some(MlpEncoder::load(&dir.join(ENCODER_FILE))?) } else { None };
    let limits = if coupled { Some(read_json(&dir.join(LIMITS_FILE))?) } else { None };
    Ok(Checkpoints { shapes, encoder, limits })
}

fn method_sources<'a>(cfg: &RunConfig, ck: &'a Checkpoints) -> Vec<(&'static str, ShapeSource<'a>)> {
    Method::ALL
        .iter()
        .filter(|m| cfg.has(**m))
        .filter_map(|m| ck.source(*m).map(|s| (m.label(), s)))
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, coupled: bool) -> Result<Vec<EvalReport>, CliError> {
    let (sys, ds) = load_inputs(out)?;
    let ck = load_checkpoints(cfg, out, coupled)?;
    let dir = Layout::new(out).reports();
    std::fs::create_dir_all(&dir)?;
    let mut reports = Vec::new();
    for (name, src) in method_sources(cfg, &ck) {
        reports.push(evaluate(name, src, &sys, &ds, cfg.eval.tau, ck.limits.as_ref(), &cfg.eval.bootstrap)?);
    }
    let mode = mode_name(coupled);
    write_reports_csv(&dir.join(format!("eval_{mode}.csv")), &reports)?;
    write_duals_csv(&dir.join(format!("duals_{mode}.csv")), &sys, &reports)?;
    let mut text = format!("{mode} dispatch, tau = {}\n\n", cfg.eval.tau);
    text.push_str(&format_report_table(&reports));
    std::fs::write(dir.join(format!("eval_{mode}.txt")), &text)?;
    let cfg_text = archive_config(&dir, cfg)?;
    write_manifest(&dir, "eval", &cfg_text)?;
    Ok(reports)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, coupled: bool, taus: &[f64]) -> Result<Vec<SweepCell>, CliError> {
    let (sys, ds) = load_inputs(out)?;
    let ck = load_checkpoints(cfg, out, coupled)?;
    let dir = Layout::new(out).reports();
    std::fs::create_dir_all(&dir)?;
    let cells = tau_sweep(&method_sources(cfg, &ck), &sys, &ds, taus, ck.limits.as_ref(), &cfg.eval.bootstrap);
    let mode = mode_name(coupled);
    write_sweep_csv(&dir.join(format!("sweep_{mode}.csv")), &cells)?;
    let mut text = format!("{mode} dispatch, cost $/hr (test coverage)\n\n");
    text.push_str(&format_sweep_table(&cells));
    std::fs::write(dir.join(format!("sweep_{mode}.txt")), &text)?;
    let cfg_text = archive_config(&dir, cfg)?;
    write_manifest(&dir, "sweep", &cfg_text)?;
    Ok(cells)
}

pub fn parse_tau_list(s: &str) -> Result<Vec<f64>, CliError> {
    let taus: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("bad --tau-list entry `{t}`: {e}"))))
        .collect::<Result<_, _>>()?;
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(CliError::Usage(format!("--tau-list entries must lie in (0, 1): {s}")));
    }
    Ok(taus)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Quick versions of the oracle suites.
pub fn selftest_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: Result<(bool, String), reserve_core::Error>| {
        out.push(match r {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
        });
    };

    push("lp-vertex-enumeration", (|| {
        let mut worst = 0.0f64;
        let mut ok = true;
        for seed in 0..20 {
            let c = oracle::lp_vertex_check(&oracle::random_boxed_lp(seed, seed % 2 == 1))?;
            ok &= c.passes(1e-8);
            worst = worst.max(c.objective_rel_err);
        }
        Ok((ok, format!("20 LPs, max rel err {worst:.2e}")))
    })());

    push("envelope-finite-differences", (|| {
        let mut worst = 0.0f64;
        let mut done = 0;
        for seed in 0..40u64 {
            if done == 4 {
                break;
            }
            let mut rng = oracle::seeded(seed, 7);
            let sys = oracle::toy_system(&mut rng, 3, 2);
            let l = oracle::random_shape(&mut rng, 3);
            if !oracle::is_clean(&sys, &l, 15.0, None)? {
                continue;
            }
            let c = oracle::envelope_fd_check(&sys, &l, 15.0, None)?;
            worst = worst.max(c.rel_err_l).max(c.rel_err_rho);
            done += 1;
        }
        Ok((done == 4 && worst <= 1e-4, format!("{done} toys, max rel err {worst:.2e}")))
    })());

    push("ellipsoid-formulas", (|| {
        let s = oracle::ellipsoid_suite(1, 50)?;
        let ok = s.max_homogeneity_err <= 1e-12 && s.max_support_grad_err <= 1e-5 && s.max_gauge_grad_err <= 1e-5;
        Ok((ok, format!("{s:?}")))
    })());

    push("conformal-monte-carlo", (|| {
        let m = oracle::conformal_monte_carlo(99, 0.9, 500, 3, 1)?;
        Ok(((m - 0.9).abs() <= 0.01, format!("mean coverage {m:.4} (nominal 0.9)")))
    })());

    push("encoder-finite-differences", (|| {
        let e = oracle::encoder_fd_check(2, true)?;
        Ok((e <= 1e-4, format!("rel err {e:.2e}")))
    })());

    push("robust-absolute-value", (|| {
        let r = oracle::robust_abs_check(3, 5, 2000)?;
        Ok((r.worst_excess <= 1e-9, format!("{r:?}")))
    })());
    out
}
