//! Contextual encoder training with per-sample robust solves.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{Adam, MlpEncoder, MlpGrad};
use super::{TraceRecord, TrainTrace};
use crate::data::{stream, UncertaintyDataset};
use crate::error::{Error, Result};
use crate::geometry::{gauge, CholeskyShape, ShapeGradient};
use crate::quantile::{smoothed_quantile, weighted_gauge_gradient, Kernel};
use crate::sced::{envelope_grad_l, envelope_grad_rho, solve_sced, TransferLimits, ZonalSystem};

const STREAM_BATCHES: u64 = 20;
const STREAM_INIT: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextualConfig {
    pub hidden: Vec<usize>,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub param_clip_norm: f64,
    pub patience: usize,
    pub ma_window: usize,
    pub tau: f64,
    pub eps: f64,
    pub kernel: Kernel,
    pub seed: u64,
    pub init_from_static: bool,
    pub log_every: usize,
}

impl Default for ContextualConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            max_iterations: 600,
            batch_size: 8,
            learning_rate: 3e-4,
            param_clip_norm: 1.0,
            patience: 400,
            ma_window: 100,
            tau: 0.95,
            eps: 0.5,
            kernel: Kernel::Gaussian,
            seed: 42,
            init_from_static: true,
            log_every: 50,
        }
    }
}

impl ContextualConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::Config { key: format!("contextual.{k}"), msg: m.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.param_clip_norm > 0.0) {
            return bad("param_clip_norm", "must be positive");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau", "must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if self.ma_window == 0 {
            return bad("ma_window", "must be positive");
        }
        Ok(())
    }

    pub fn widths(&self, input: usize, d: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.hidden);
        w.push(d * (d + 1) / 2);
        w
    }
}

/// Fresh encoder, optionally with its output bias set from a static shape.
pub fn init_encoder(
    cfg: &ContextualConfig,
    input: usize,
    d: usize,
    static_shape: Option<&CholeskyShape>,
) -> Result<MlpEncoder> {
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let mut enc = MlpEncoder::new(&cfg.widths(input, d), true, &mut rng)?;
    if let (true, Some(l)) = (cfg.init_from_static, static_shape) {
        enc.set_output_bias_from(l)?;
    }
    Ok(enc)
}

/// Shared radius and quantile sensitivity from the tuning split, scoring each
/// tuning hour with the encoder's shape for its own context.
pub fn shared_tuning_terms(
    enc: &MlpEncoder,
    ds: &UncertaintyDataset,
    tau: f64,
    eps: f64,
    kernel: Kernel,
) -> Result<(f64, ShapeGradient)> {
    let r = ds.split.tune.clone();
    let shapes: Vec<CholeskyShape> = ds.contexts[r.clone()].par_iter().map(|c| enc.forward(&c.features())).collect();
    let us = &ds.us[r];
    let s: Vec<f64> = shapes.par_iter().zip(us.par_iter()).map(|(l, u)| gauge(l, u)).collect::<Result<_>>()?;
    let sq = smoothed_quantile(&s, tau, eps, kernel)?;
    let sens = weighted_gauge_gradient(shapes.iter().zip(us.iter().map(|u| u.as_slice())), &sq.weights, enc.out_dim())?;
    Ok((sq.rho_eps, sens))
}

struct SampleStep {
    objective: f64,
    grad: MlpGrad,
    grad_norm: f64,
}

/// Adam on `(1/B) sum_i <g_i, L_phi(xi_i)>` with early stopping on the
/// trailing mean of the batch objective. Returns the parameters that produced
/// the batch closing the best trailing window, or the final parameters when
/// the window never fills. A batch with more than half its samples
/// infeasible stops training; the best parameters so far are returned, or an
/// error if no window has filled yet.
pub fn train_contextual(
    enc: MlpEncoder,
    sys: &ZonalSystem,
    ds: &UncertaintyDataset,
    cfg: &ContextualConfig,
    tl: Option<&TransferLimits>,
) -> Result<(MlpEncoder, TrainTrace)> {
    cfg.validate()?;
    let mut enc = enc;
    let mut adam = Adam::new(&enc, cfg.learning_rate);
    let mut rng = stream(cfg.seed, STREAM_BATCHES);
    let train = ds.split.train.clone();
    let mut trace = TrainTrace::default();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.ma_window);
    let mut best = f64::INFINITY;
    let mut best_enc: Option<MlpEncoder> = None;
    let mut since_best = 0usize;

    for it in 0..cfg.max_iterations {
        let (rho, sens) = shared_tuning_terms(&enc, ds, cfg.tau, cfg.eps, cfg.kernel)?;
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(train.clone())).collect();
        let steps: Vec<Result<Option<SampleStep>>> = batch
            .par_iter()
            .map(|&t| {
                let x = ds.contexts[t].features();
                let l = enc.forward(&x);
                let sol = solve_sced(sys, &l, rho, tl)?;
                if !sol.is_optimal() {
                    return Ok(None);
                }
                let mut g = envelope_grad_l(sys, &sol, &l, rho)?;
                g.add_scaled(&sens, envelope_grad_rho(sys, &sol, &l)?);
                let grad_norm = g.frobenius_norm();
                Ok(Some(SampleStep { objective: sol.objective, grad: enc.backward(&x, &g), grad_norm }))
            })
            .collect();
        let mut total = MlpGrad::zeros_like(&enc);
        let mut used = 0usize;
        let mut obj = 0.0;
        let mut shape_norm = 0.0;
        for (s, &t) in steps.into_iter().zip(&batch) {
            match s? {
                Some(s) => {
                    total.add_scaled(&s.grad, 1.0);
                    obj += s.objective;
                    shape_norm += s.grad_norm;
                    used += 1;
                }
                None => log::warn!("iteration {it}: dispatch infeasible for hour {t} at rho {rho:.4}; skipped"),
            }
        }
        if 2 * used < cfg.batch_size {
            let msg = format!("iteration {it}: {} of {} samples infeasible", cfg.batch_size - used, cfg.batch_size);
            return match best_enc {
                Some(e) => {
                    log::error!("training aborted at {msg}; keeping the best encoder so far");
                    trace.aborted_at = Some(it);
                    Ok((e, trace))
                }
                None => Err(Error::TrainingAborted(msg)),
            };
        }
        let inv = 1.0 / used as f64;
        let mut g = MlpGrad::zeros_like(&enc);
        g.add_scaled(&total, inv);
        let pre = g.clip(cfg.param_clip_norm);
        let post = g.norm();
        let pre_step = enc.clone();
        adam.step(&mut enc, &g);
        let batch_obj = obj * inv;
        trace.records.push(TraceRecord {
            iteration: it,
            rho_eps: rho,
            objective: batch_obj,
            grad_norm: pre,
            grad_norm_clipped: post,
            degenerate: false,
        });
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            log::info!("ctx iter {it}: batch V = {batch_obj:.3}, rho = {rho:.4}, |dL| = {:.3e}", shape_norm * inv);
        }
        if window.len() == cfg.ma_window {
            window.pop_front();
        }
        window.push_back(batch_obj);
        if window.len() == cfg.ma_window {
            let ma = window.iter().sum::<f64>() / window.len() as f64;
            if ma < best {
                best = ma;
                best_enc = Some(pre_step);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    log::info!("early stop at iteration {it}");
                    break;
                }
            }
        }
    }
    Ok((best_enc.unwrap_or(enc), trace))
}
