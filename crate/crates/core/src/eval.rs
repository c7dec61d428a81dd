//! Evaluation at the conformal radius: cost, reserve, coverage with block
//! bootstrap intervals, tau sweeps, and a large-sample gradient diagnostic.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, simulate, stream, GeneratorParams, UncertaintyDataset};
use crate::error::{Error, Result};
use crate::geometry::{gauge, CholeskyShape};
use crate::quantile::{conformal_radius, coverage_of_scores, scores, ConformalRadius, Kernel};
use crate::sced::{reserve_requirement, solve_sced, ScedSolution, TransferLimits, ZonalSystem};
use crate::train::mlp::MlpEncoder;
use crate::train::{profiled_gradient, TrainConfig};

const STREAM_CONSISTENCY: u64 = 30;

/// Where the shape for an hour comes from.
#[derive(Debug, Clone, Copy)]
pub enum ShapeSource<'a> {
    Static(&'a CholeskyShape),
    Contextual(&'a MlpEncoder),
}

impl ShapeSource<'_> {
    fn shape_for(&self, ds: &UncertaintyDataset, t: usize) -> CholeskyShape {
        match self {
            ShapeSource::Static(l) => (*l).clone(),
            ShapeSource::Contextual(enc) => enc.forward(&ds.contexts[t].features()),
        }
    }

    /// Gauge score of each hour in `range`, each with its own shape.
    fn scores_on(&self, ds: &UncertaintyDataset, range: std::ops::Range<usize>) -> Result<Vec<f64>> {
        match self {
            ShapeSource::Static(l) => scores(l, &ds.us[range]),
            ShapeSource::Contextual(_) => {
                range.into_par_iter().map(|t| gauge(&self.shape_for(ds, t), &ds.us[t])).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub block_len: usize,
    pub reps: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { block_len: 24, reps: 10_000, level: 0.95, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub coupled: bool,
    pub tau: f64,
    pub rho_tau: f64,
    pub k_index: usize,
    pub n_cal: usize,
    pub cost: f64,
    pub energy_cost: f64,
    pub reserve_cost: f64,
    /// `sum_z R_z^min`.
    pub total_reserve: f64,
    pub calibration_rate: f64,
    pub test_coverage: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Per zone index; averaged over test hours for contextual shapes.
    pub reserve_duals: Vec<f64>,
    pub transfer_duals: Vec<f64>,
    /// Test hours whose dispatch was infeasible (contextual only).
    pub n_infeasible: usize,
}

struct SolveSummary {
    cost: f64,
    energy: f64,
    reserve_cost: f64,
    total_reserve: f64,
    mu: Vec<f64>,
    lambda: Vec<f64>,
}

fn summarize(sys: &ZonalSystem, l: &CholeskyShape, rho: f64, sol: &ScedSolution) -> SolveSummary {
    let energy = sys.generators.iter().zip(&sol.dispatch).map(|(g, x)| g.energy_cost * x).sum();
    let reserve_cost = sys.generators.iter().zip(&sol.reserve).map(|(g, r)| g.reserve_cost * r).sum();
    let total_reserve = (0..sys.n_zones()).map(|z| reserve_requirement(l, rho, sys, z)).sum();
    SolveSummary {
        cost: sol.objective,
        energy,
        reserve_cost,
        total_reserve,
        mu: sol.reserve_duals.clone(),
        lambda: sol.transfer_duals.clone(),
    }
}

/// Calibrates on the calibration split and evaluates on the test split.
///
/// Contextual shapes share one radius from their calibration scores; cost,
/// reserve and duals are averaged over the test hours that solve.
pub fn evaluate(
    method: &str,
    src: ShapeSource<'_>,
    sys: &ZonalSystem,
    ds: &UncertaintyDataset,
    tau: f64,
    tl: Option<&TransferLimits>,
    boot: &BootstrapConfig,
) -> Result<EvalReport> {
    let cal_scores = src.scores_on(ds, ds.split.cal.clone())?;
    let cr: ConformalRadius = conformal_radius(&cal_scores, tau)?;
    let rho = cr.rho_tau;
    let calibration_rate = coverage_of_scores(&cal_scores, rho);
    let test_scores = src.scores_on(ds, ds.split.test.clone())?;
    let indicators: Vec<bool> = test_scores.iter().map(|&s| s <= rho).collect();
    let test_coverage = coverage_of_scores(&test_scores, rho);
    let (ci_lo, ci_hi) = block_bootstrap_ci(&indicators, boot.block_len, boot.reps, boot.level, boot.seed)?;

    let (summary, n_infeasible) = match src {
        ShapeSource::Static(l) => {
            let sol = solve_sced(sys, l, rho, tl)?;
            if !sol.is_optimal() {
                return Err(Error::InfeasibleAtShape { iteration: 0, rho });
            }
            (summarize(sys, l, rho, &sol), 0)
        }
        ShapeSource::Contextual(_) => {
            let per_hour: Vec<Option<SolveSummary>> = ds
                .split
                .test
                .clone()
                .into_par_iter()
                .map(|t| {
                    let l = src.shape_for(ds, t);
                    let sol = solve_sced(sys, &l, rho, tl)?;
                    Ok(sol.is_optimal().then(|| summarize(sys, &l, rho, &sol)))
                })
                .collect::<Result<_>>()?;
            average(sys.n_zones(), per_hour, rho)?
        }
    };
    Ok(EvalReport {
        method: method.to_string(),
        coupled: tl.is_some(),
        tau,
        rho_tau: rho,
        k_index: cr.k_index,
        n_cal: cr.n_cal,
        cost: summary.cost,
        energy_cost: summary.energy,
        reserve_cost: summary.reserve_cost,
        total_reserve: summary.total_reserve,
        calibration_rate,
        test_coverage,
        ci_lo,
        ci_hi,
        reserve_duals: summary.mu,
        transfer_duals: summary.lambda,
        n_infeasible,
    })
}

fn average(n_zones: usize, per_hour: Vec<Option<SolveSummary>>, rho: f64) -> Result<(SolveSummary, usize)> {
    let total = per_hour.len();
    let ok: Vec<SolveSummary> = per_hour.into_iter().flatten().collect();
    let n_infeasible = total - ok.len();
    if ok.is_empty() {
        return Err(Error::InfeasibleAtShape { iteration: 0, rho });
    }
    if n_infeasible > 0 {
        log::warn!("{n_infeasible} of {total} test hours infeasible at rho {rho:.4}; excluded from averages");
    }
    let inv = 1.0 / ok.len() as f64;
    let mut acc = SolveSummary {
        cost: 0.0,
        energy: 0.0,
        reserve_cost: 0.0,
        total_reserve: 0.0,
        mu: vec![0.0; n_zones],
        lambda: vec![0.0; n_zones],
    };
    for s in &ok {
        acc.cost += s.cost * inv;
        acc.energy += s.energy * inv;
        acc.reserve_cost += s.reserve_cost * inv;
        acc.total_reserve += s.total_reserve * inv;
        for z in 0..n_zones {
            acc.mu[z] += s.mu[z] * inv;
            acc.lambda[z] += s.lambda[z] * inv;
        }
    }
    Ok((acc, n_infeasible))
}

/// Circular block bootstrap percentile interval for the mean of a binary series.
///
/// Replicate `b` draws from its own ChaCha stream, so the result does not
/// depend on the thread count.
pub fn block_bootstrap_ci(indicators: &[bool], block_len: usize, reps: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    let n = indicators.len();
    if block_len == 0 || n < 2 * block_len {
        return Err(Error::TooShort { len: n, needed: 2 * block_len.max(1) });
    }
    if reps == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::BadParams(format!("bootstrap needs reps > 0 and level in (0, 1); got {reps}, {level}")));
    }
    // prefix[i] = number of ones among the first i entries of the doubled series
    let mut prefix = Vec::with_capacity(2 * n + 1);
    prefix.push(0usize);
    for i in 0..2 * n {
        prefix.push(prefix[i] + indicators[i % n] as usize);
    }
    let n_blocks = n.div_ceil(block_len);
    let last = n - (n_blocks - 1) * block_len;
    let mut means: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut ones = 0usize;
            for j in 0..n_blocks {
                let start = rng.random_range(0..n);
                let len = if j + 1 == n_blocks { last } else { block_len };
                ones += prefix[start + len] - prefix[start];
            }
            ones as f64 / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| means[((q * (reps - 1) as f64).round() as usize).min(reps - 1)];
    Ok((pick((1.0 - level) / 2.0), pick((1.0 + level) / 2.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub tau: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Re-evaluates frozen shapes at each `tau`; per-cell failures are recorded.
pub fn tau_sweep(
    methods: &[(&str, ShapeSource<'_>)],
    sys: &ZonalSystem,
    ds: &UncertaintyDataset,
    taus: &[f64],
    tl: Option<&TransferLimits>,
    boot: &BootstrapConfig,
) -> Vec<SweepCell> {
    let mut cells = Vec::with_capacity(methods.len() * taus.len());
    for (name, src) in methods {
        for &tau in taus {
            let (report, error) = match evaluate(name, *src, sys, ds, tau, tl, boot) {
                Ok(r) => (Some(r), None),
                Err(e) => {
                    log::warn!("sweep {name} at tau {tau}: {e}");
                    (None, Some(e.to_string()))
                }
            };
            cells.push(SweepCell { method: name.to_string(), tau, report, error });
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub median_dev: f64,
    pub mean_dev: f64,
    pub devs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n_ref: usize,
    pub reference_norm: f64,
    pub rows: Vec<ConsistencyRow>,
}

impl ConsistencyReport {
    /// Count of grid steps where the median deviation rises.
    pub fn inversions(&self) -> usize {
        self.rows.windows(2).filter(|w| w[1].median_dev > w[0].median_dev).count()
    }
}

/// Frobenius deviation of the profiled gradient on fresh tuning sets of each
/// size from a reference computed at `16 * max(n_grid)` samples.
pub fn consistency_diagnostic(
    l: &CholeskyShape,
    sys: &ZonalSystem,
    params: &GeneratorParams,
    eps: f64,
    tau: f64,
    n_grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    if params.ar_coeff != 0.0 {
        return Err(Error::BadParams("consistency diagnostic needs ar_coeff = 0".into()));
    }
    let n_max = *n_grid.iter().max().ok_or_else(|| Error::BadParams("empty n_grid".into()))?;
    if n_grid.contains(&0) || trials == 0 {
        return Err(Error::BadParams("n_grid entries and trials must be positive".into()));
    }
    let cfg = TrainConfig { tau, eps, kernel: Kernel::Gaussian, check_degeneracy: false, ..Default::default() };
    cfg.validate()?;
    let mut seeds = stream(seed, STREAM_CONSISTENCY);
    let draw = |n: usize, s: u64| -> Result<Vec<Vec<f64>>> {
        let p = GeneratorParams { seed: s, ..params.clone() };
        Ok(simulate(&p, n)?.1)
    };
    let n_ref = 16 * n_max;
    let reference = profiled_gradient(l, sys, &draw(n_ref, seeds.random())?, &cfg, None)?.grad;
    let mut rows = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let trial_seeds: Vec<u64> = (0..trials).map(|_| seeds.random()).collect();
        let devs: Vec<f64> = trial_seeds
            .into_iter()
            .map(|s| {
                let g = profiled_gradient(l, sys, &draw(n, s)?, &cfg, None)?.grad;
                Ok((g.matrix() - reference.matrix()).norm())
            })
            .collect::<Result<_>>()?;
        let mut sorted = devs.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if trials % 2 == 1 {
            sorted[trials / 2]
        } else {
            0.5 * (sorted[trials / 2 - 1] + sorted[trials / 2])
        };
        let mean_dev = devs.iter().sum::<f64>() / trials as f64;
        log::info!("consistency n = {n}: median dev {median:.4e}");
        rows.push(ConsistencyRow { n, median_dev: median, mean_dev, devs });
    }
    Ok(ConsistencyReport { n_ref, reference_norm: reference.frobenius_norm(), rows })
}

const REPORT_HEADER: [&str; 14] = [
    "method",
    "coupled",
    "tau",
    "rho_tau",
    "cost",
    "energy_cost",
    "reserve_cost",
    "total_reserve_mw",
    "calibration_rate",
    "test_coverage",
    "ci_lo",
    "ci_hi",
    "n_infeasible",
    "error",
];

fn report_record(method: &str, tau: f64, r: Option<&EvalReport>, err: Option<&str>) -> Vec<String> {
    match r {
        Some(r) => vec![
            r.method.clone(),
            r.coupled.to_string(),
            fmt_f64(r.tau),
            fmt_f64(r.rho_tau),
            fmt_f64(r.cost),
            fmt_f64(r.energy_cost),
            fmt_f64(r.reserve_cost),
            fmt_f64(r.total_reserve),
            fmt_f64(r.calibration_rate),
            fmt_f64(r.test_coverage),
            fmt_f64(r.ci_lo),
            fmt_f64(r.ci_hi),
            r.n_infeasible.to_string(),
            String::new(),
        ],
        None => {
            let mut v = vec![method.to_string(), String::new(), fmt_f64(tau)];
            v.extend(std::iter::repeat_n(String::new(), REPORT_HEADER.len() - 4));
            v.push(err.unwrap_or_default().to_string());
            v
        }
    }
}

/// One row per report.
pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record(report_record(&r.method, r.tau, Some(r), None))?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (method, tau) cell.
pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for c in cells {
        w.write_record(report_record(&c.method, c.tau, c.report.as_ref(), c.error.as_deref()))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-zone reserve and transfer duals, one row per (method, zone).
pub fn write_duals_csv(path: &Path, sys: &ZonalSystem, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "coupled", "zone", "mu", "lambda"])?;
    for r in reports {
        for (z, zone) in sys.zones.iter().enumerate() {
            w.write_record([
                r.method.clone(),
                r.coupled.to_string(),
                zone.id.to_string(),
                fmt_f64(r.reserve_duals[z]),
                fmt_f64(r.transfer_duals[z]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn pad_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

/// Cost, reserve, calibration rate and coverage with interval, one line per method.
pub fn format_report_table(reports: &[EvalReport]) -> String {
    let mut rows = vec![vec![
        "Method".to_string(),
        "Cost ($/hr)".into(),
        "Energy".into(),
        "Reserve cost".into(),
        "Reserve (MW)".into(),
        "Calib. rate".into(),
        "Test coverage [CI]".into(),
    ]];
    for r in reports {
        rows.push(vec![
            r.method.clone(),
            format!("{:.1}", r.cost),
            format!("{:.1}", r.energy_cost),
            format!("{:.1}", r.reserve_cost),
            format!("{:.1}", r.total_reserve),
            format!("{:.3}", r.calibration_rate),
            format!("{:.3} [{:.3}, {:.3}]", r.test_coverage, r.ci_lo, r.ci_hi),
        ]);
    }
    pad_table(&rows)
}

/// Cost and coverage per method across the tau grid.
pub fn format_sweep_table(cells: &[SweepCell]) -> String {
    let mut taus: Vec<f64> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for c in cells {
        if !taus.contains(&c.tau) {
            taus.push(c.tau);
        }
        if !methods.contains(&c.method) {
            methods.push(c.method.clone());
        }
    }
    let mut head = vec!["Method".to_string()];
    head.extend(taus.iter().map(|t| format!("tau={t:.2}")));
    let mut rows = vec![head];
    for m in &methods {
        let mut row = vec![m.clone()];
        for &t in &taus {
            let cell = cells.iter().find(|c| &c.method == m && c.tau == t);
            row.push(match cell.and_then(|c| c.report.as_ref()) {
                Some(r) => format!("{:.1} ({:.3})", r.cost, r.test_coverage),
                None => "failed".into(),
            });
        }
        rows.push(row);
    }
    pad_table(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_system, generate, sample_covariance_shape, Context};
    use crate::train::contextual::{init_encoder, ContextualConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn small_ds() -> UncertaintyDataset {
        let p = GeneratorParams { seed: 9, ..Default::default() };
        generate(&p, 1200).unwrap()
    }

    #[test]
    fn all_ones_interval_is_degenerate() {
        let ind = vec![true; 100];
        assert_eq!(block_bootstrap_ci(&ind, 24, 500, 0.95, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn short_series_is_rejected() {
        assert!(matches!(block_bootstrap_ci(&[true; 47], 24, 10, 0.95, 1), Err(Error::TooShort { len: 47, needed: 48 })));
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let ind: Vec<bool> = (0..500).map(|i| (i * 7919) % 13 != 0).collect();
        let a = block_bootstrap_ci(&ind, 24, 2000, 0.95, 5).unwrap();
        let b = block_bootstrap_ci(&ind, 24, 2000, 0.95, 5).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        assert_eq!(pool.install(|| block_bootstrap_ci(&ind, 24, 2000, 0.95, 5).unwrap()), a);
    }

    #[test]
    fn iid_interval_width_matches_binomial() {
        let n = 3504;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let ind: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.95).collect();
        let p = ind.iter().filter(|&&b| b).count() as f64 / n as f64;
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.975);
        let analytic = 2.0 * z * (p * (1.0 - p) / n as f64).sqrt();
        let (lo, hi) = block_bootstrap_ci(&ind, 24, 10_000, 0.95, 3).unwrap();
        let ratio = (hi - lo) / analytic;
        assert!((0.5..=2.0).contains(&ratio), "width ratio {ratio}");
        assert!(lo <= p && p <= hi);
    }

    #[test]
    fn static_report_decomposes_cost() {
        let ds = small_ds();
        let sys = default_system(1);
        let l = sample_covariance_shape(ds.train()).unwrap();
        let r = evaluate("SC", ShapeSource::Static(&l), &sys, &ds, 0.9, None, &BootstrapConfig { reps: 500, ..Default::default() })
            .unwrap();
        assert!((r.energy_cost + r.reserve_cost - r.cost).abs() <= 1e-6 * r.cost.abs().max(1.0));
        assert!(r.ci_lo <= r.test_coverage && r.test_coverage <= r.ci_hi);
        assert!(r.calibration_rate >= r.k_index as f64 / r.n_cal as f64);
        assert!((0.0..=1.0).contains(&r.test_coverage));
        assert_eq!(r.n_infeasible, 0);
        assert!(!r.coupled);
    }

    #[test]
    fn contextual_with_constant_output_matches_static() {
        let ds = small_ds();
        let sys = default_system(1);
        let l = sample_covariance_shape(ds.train()).unwrap();
        let l = crate::geometry::project_shape(l.matrix(), 1e-6, true);
        let cfg = ContextualConfig { hidden: vec![4], ..Default::default() };
        let mut enc = init_encoder(&cfg, Context::nominal().features().len(), l.dim(), Some(&l)).unwrap();
        // zero the hidden layer so the output is the bias
        for w in enc.weights.iter_mut().take(1) {
            w.fill(0.0);
        }
        for b in enc.biases.iter_mut().take(1) {
            b.fill(0.0);
        }
        let boot = BootstrapConfig { reps: 300, ..Default::default() };
        let a = evaluate("S", ShapeSource::Static(&l), &sys, &ds, 0.9, None, &boot).unwrap();
        let b = evaluate("C", ShapeSource::Contextual(&enc), &sys, &ds, 0.9, None, &boot).unwrap();
        assert!((a.cost - b.cost).abs() <= 1e-6 * a.cost);
        assert!((a.rho_tau - b.rho_tau).abs() <= 1e-9 * a.rho_tau);
        assert_eq!(a.test_coverage, b.test_coverage);
    }

    #[test]
    fn sweep_records_failures_and_is_monotone() {
        let ds = small_ds();
        let sys = default_system(1);
        let l = sample_covariance_shape(ds.train()).unwrap();
        let boot = BootstrapConfig { reps: 200, ..Default::default() };
        // tau = 0.9999 needs k > n_cal
        let cells = tau_sweep(&[("SC", ShapeSource::Static(&l))], &sys, &ds, &[0.9, 0.95, 0.99, 0.9999], None, &boot);
        assert_eq!(cells.len(), 4);
        assert!(cells[3].report.is_none() && cells[3].error.is_some());
        let ok: Vec<&EvalReport> = cells.iter().filter_map(|c| c.report.as_ref()).collect();
        for w in ok.windows(2) {
            assert!(w[1].cost >= w[0].cost - 1e-9);
            assert!(w[1].test_coverage >= w[0].test_coverage);
        }
        let table = format_sweep_table(&cells);
        assert!(table.contains("failed"));
    }

    #[test]
    fn consistency_requires_iid_mode() {
        let sys = default_system(1);
        let l = CholeskyShape::identity(15);
        let p = GeneratorParams::default();
        assert!(consistency_diagnostic(&l, &sys, &p, 0.5, 0.95, &[100], 2, 1).is_err());
    }

    #[test]
    fn consistency_with_zero_duals_is_exact() {
        // ample capacity and zero prices: every dual vanishes
        let mut sys = default_system(1);
        for g in &mut sys.generators {
            g.energy_cost = 0.0;
            g.reserve_cost = 0.0;
        }
        let p = GeneratorParams { ar_coeff: 0.0, constant_context: Some(Context::nominal()), ..Default::default() };
        let l = CholeskyShape::identity(15);
        let rep = consistency_diagnostic(&l, &sys, &p, 0.5, 0.9, &[50, 100], 3, 2).unwrap();
        for row in &rep.rows {
            assert_eq!(row.median_dev, 0.0);
        }
        assert_eq!(rep.n_ref, 1600);
    }

    #[test]
    fn csv_round_trips_values() {
        let ds = small_ds();
        let sys = default_system(1);
        let l = sample_covariance_shape(ds.train()).unwrap();
        let r = evaluate("SC", ShapeSource::Static(&l), &sys, &ds, 0.9, None, &BootstrapConfig { reps: 100, ..Default::default() })
            .unwrap();
        let dir = std::env::temp_dir().join(format!("reserve-eval-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("r.csv");
        write_reports_csv(&path, std::slice::from_ref(&r)).unwrap();
        let mut rd = csv::Reader::from_path(&path).unwrap();
        let rec = rd.records().next().unwrap().unwrap();
        assert_eq!(rec[4].parse::<f64>().unwrap(), r.cost);
        assert!(format_report_table(&[r]).contains("SC"));
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn interval_brackets_lie_in_unit_range(bits in proptest::collection::vec(any::<bool>(), 48..300), seed in 0u64..1000) {
            let (lo, hi) = block_bootstrap_ci(&bits, 24, 200, 0.9, seed).unwrap();
            prop_assert!(0.0 <= lo && lo <= hi && hi <= 1.0);
        }
    }
}
