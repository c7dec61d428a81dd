//! Profiled-gradient training of static shapes and contextual encoders.

pub mod contextual;
pub mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, sample_covariance_shape, UncertaintyDataset};
use crate::error::{Error, Result};
use crate::geometry::{project_shape, CholeskyShape, ShapeGradient, DEFAULT_DIAG_FLOOR};
use crate::lpcore::dual_degeneracy;
use crate::quantile::{conformal_radius, quantile_sensitivity, scores, smoothed_quantile, ConformalRadius, Kernel};
use crate::sced::{
    build_coupled, build_decoupled, envelope_grad_l, envelope_grad_rho, solve_sced, ScedSolution, TransferLimits,
    ZonalSystem,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub eps: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub kernel: Kernel,
    pub trace_normalize: bool,
    pub diag_floor: f64,
    pub check_degeneracy: bool,
    /// Train against the transfer-coupled dispatch; limits must be supplied.
    pub coupled: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            eps: 0.5,
            iterations: 200,
            step_size: 0.01,
            grad_clip_norm: 10.0,
            seed: 42,
            kernel: Kernel::Gaussian,
            trace_normalize: true,
            diag_floor: DEFAULT_DIAG_FLOOR,
            check_degeneracy: true,
            coupled: false,
            log_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::Config { key: format!("train.{k}"), msg: m.into() });
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau", "must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size", "must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm", "must be positive");
        }
        if !(self.diag_floor > 0.0) {
            return bad("diag_floor", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub rho_eps: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    /// Iteration at which training stopped on an infeasible batch.
    pub aborted_at: Option<usize>,
}

impl TrainTrace {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "rho_eps", "objective", "grad_norm", "grad_norm_clipped", "degenerate"])?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                fmt_f64(r.rho_eps),
                fmt_f64(r.objective),
                fmt_f64(r.grad_norm),
                fmt_f64(r.grad_norm_clipped),
                u8::from(r.degenerate).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn first_objective(&self) -> Option<f64> {
        self.records.first().map(|r| r.objective)
    }

    pub fn last_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }
}

/// The three pieces of the approximate profiled gradient.
#[derive(Debug, Clone)]
pub struct ProfiledGradient {
    pub grad: ShapeGradient,
    pub rho_eps: f64,
    pub sol: ScedSolution,
    pub envelope: ShapeGradient,
    pub g_rho: f64,
    pub sensitivity: ShapeGradient,
}

/// `envelope_L + g_rho * quantile_sensitivity` at the smoothed tuning radius.
pub fn profiled_gradient(
    l: &CholeskyShape,
    sys: &ZonalSystem,
    tune_us: &[Vec<f64>],
    cfg: &TrainConfig,
    tl: Option<&TransferLimits>,
) -> Result<ProfiledGradient> {
    let s = scores(l, tune_us)?;
    let sq = smoothed_quantile(&s, cfg.tau, cfg.eps, cfg.kernel)?;
    let rho = sq.rho_eps;
    let sol = solve_sced(sys, l, rho, tl)?;
    if !sol.is_optimal() {
        return Err(Error::InfeasibleAtShape { iteration: 0, rho });
    }
    let envelope = envelope_grad_l(sys, &sol, l, rho)?;
    let g_rho = envelope_grad_rho(sys, &sol, l)?;
    let sensitivity = if g_rho == 0.0 { ShapeGradient::zeros(l.dim()) } else { quantile_sensitivity(l, tune_us, &sq)? };
    let mut grad = envelope.clone();
    grad.add_scaled(&sensitivity, g_rho);
    Ok(ProfiledGradient { grad, rho_eps: rho, sol, envelope, g_rho, sensitivity })
}

/// Trace-normalized sample-covariance shape of the training split.
pub fn initial_shape(ds: &UncertaintyDataset, cfg: &TrainConfig) -> Result<CholeskyShape> {
    let sc = sample_covariance_shape(ds.train())?;
    Ok(project_shape(sc.matrix(), cfg.diag_floor, cfg.trace_normalize))
}

/// Projected gradient descent on the shape.
pub fn train_static(
    sys: &ZonalSystem,
    ds: &UncertaintyDataset,
    cfg: &TrainConfig,
    tl: Option<&TransferLimits>,
) -> Result<(CholeskyShape, TrainTrace)> {
    cfg.validate()?;
    if cfg.coupled != tl.is_some() {
        return Err(Error::Config {
            key: "train.coupled".into(),
            msg: format!("is {} but transfer limits were {}", cfg.coupled, if tl.is_some() { "given" } else { "not given" }),
        });
    }
    let theta = initial_shape(ds, cfg)?;
    train_static_from(theta, sys, ds.tune(), cfg, tl)
}

pub fn train_static_from(
    init: CholeskyShape,
    sys: &ZonalSystem,
    tune_us: &[Vec<f64>],
    cfg: &TrainConfig,
    tl: Option<&TransferLimits>,
) -> Result<(CholeskyShape, TrainTrace)> {
    let mut theta = init;
    let mut trace = TrainTrace::default();
    for k in 0..cfg.iterations {
        let pg = profiled_gradient(&theta, sys, tune_us, cfg, tl).map_err(|e| match e {
            Error::InfeasibleAtShape { rho, .. } => Error::InfeasibleAtShape { iteration: k, rho },
            e => e,
        })?;
        let degenerate = cfg.check_degeneracy && is_degenerate(sys, &theta, pg.rho_eps, tl, &pg.sol)?;
        let mut g = pg.grad;
        let pre = g.clip(cfg.grad_clip_norm);
        let post = g.frobenius_norm();
        trace.records.push(TraceRecord {
            iteration: k,
            rho_eps: pg.rho_eps,
            objective: pg.sol.objective,
            grad_norm: pre,
            grad_norm_clipped: post,
            degenerate,
        });
        if cfg.log_every > 0 && k % cfg.log_every == 0 {
            log::info!("iter {k}: V = {:.3}, rho = {:.4}, |g| = {pre:.3e}", pg.sol.objective, pg.rho_eps);
        }
        let step = theta.matrix() - g.matrix() * cfg.step_size;
        theta = project_shape(&step, cfg.diag_floor, cfg.trace_normalize);
    }
    Ok((theta, trace))
}

fn is_degenerate(
    sys: &ZonalSystem,
    l: &CholeskyShape,
    rho: f64,
    tl: Option<&TransferLimits>,
    sol: &ScedSolution,
) -> Result<bool> {
    let p = match tl {
        None => build_decoupled(sys, l, rho),
        Some(tl) => build_coupled(sys, l, rho, tl),
    };
    let flagged = dual_degeneracy(&p, &sol.lp)?.flagged;
    if flagged {
        log::debug!("degenerate duals at rho = {rho}");
    }
    Ok(flagged)
}

/// Split-conformal radius on the calibration split.
pub fn calibrate(l: &CholeskyShape, ds: &UncertaintyDataset, tau: f64) -> Result<ConformalRadius> {
    conformal_radius(&scores(l, ds.cal())?, tau)
}
