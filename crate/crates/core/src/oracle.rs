//! Reference checks shared by the self-test command and the test suites:
//! vertex enumeration, finite differences, conformal Monte-Carlo.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geometry::{gauge, grad_gauge_l, grad_support_l, support, CholeskyShape, ShapeGradient};
use crate::lpcore::{dual_degeneracy, dual_objective, kkt_report, solve_lp, LpProblem, LpStatus, RowTag};
use crate::quantile::conformal_radius;
use crate::sced::{
    build_coupled, build_decoupled, envelope_grad_l, envelope_grad_rho, solve_sced, Generator, TransferLimits,
    ZonalSystem, Zone,
};
use crate::train::mlp::{MlpEncoder, MlpGrad};
use crate::train::{profiled_gradient, TrainConfig};

pub const FD_STEP: f64 = 1e-5;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Lower-triangular factor with diagonal in [0.8, 1.6] and small off-diagonals.
pub fn random_shape<R: Rng>(rng: &mut R, d: usize) -> CholeskyShape {
    let m = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            rng.random_range(0.8..1.6)
        } else if i > j {
            rng.random_range(-0.4..0.4)
        } else {
            0.0
        }
    });
    CholeskyShape::new(m).expect("diagonal bounded away from zero")
}

/// Central differences of `f` over the lower-triangle entries of `l`.
pub fn fd_lower(l: &CholeskyShape, h: f64, f: impl Fn(&CholeskyShape) -> Result<f64>) -> Result<DMatrix<f64>> {
    let d = l.dim();
    let mut g = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut p = l.matrix().clone();
            let mut m = l.matrix().clone();
            p[(i, j)] += h;
            m[(i, j)] -= h;
            g[(i, j)] = (f(&CholeskyShape::new(p)?)? - f(&CholeskyShape::new(m)?)?) / (2.0 * h);
        }
    }
    Ok(g)
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

/// Five variables in `[0, 10]` and six random inequality rows.
pub fn random_boxed_lp(seed: u64, integer: bool) -> LpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 5;
    let mut draw = |lo: f64, hi: f64| {
        let v: f64 = rng.random_range(lo..hi);
        if integer {
            v.round()
        } else {
            v
        }
    };
    let cost: Vec<f64> = (0..n).map(|_| draw(-5.0, 5.0)).collect();
    let mut p = LpProblem::new(cost);
    p.upper = vec![10.0; n];
    for _ in 0..6 {
        let row: Vec<f64> = (0..n).map(|_| draw(-3.0, 3.0)).collect();
        let rhs = draw(-2.0, 15.0);
        p.add_ub(&row, rhs, RowTag::Other);
    }
    p
}

/// Minimum of `c^T x` over every feasible vertex of an inequality-only,
/// finitely boxed LP; `None` when no vertex is feasible.
pub fn enumerate_vertices(p: &LpProblem) -> Option<f64> {
    let n = p.n_vars();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for k in 0..p.ub_rhs.len() {
        rows.push(((0..n).map(|j| p.ub_matrix[(k, j)]).collect(), p.ub_rhs[k]));
    }
    for k in 0..p.eq_rhs.len() {
        let a: Vec<f64> = (0..n).map(|j| p.eq_matrix[(k, j)]).collect();
        rows.push((a.iter().map(|v| -v).collect(), -p.eq_rhs[k]));
        rows.push((a, p.eq_rhs[k]));
    }
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        rows.push((e.clone(), p.upper[j]));
        e[j] = -1.0;
        rows.push((e, -p.lower[j]));
    }
    let feasible = |x: &DVector<f64>| {
        rows.iter().all(|(a, b)| a.iter().zip(x.iter()).map(|(u, v)| u * v).sum::<f64>() <= b + 1e-9)
    };
    let mut best: Option<f64> = None;
    let total = rows.len();
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let a = DMatrix::from_fn(n, n, |i, j| rows[idx[i]].0[j]);
        let b = DVector::from_fn(n, |i, _| rows[idx[i]].1);
        let lu = a.lu();
        if lu.determinant().abs() > 1e-10 {
            if let Some(x) = lu.solve(&b) {
                if feasible(&x) {
                    let obj: f64 = x.iter().zip(&p.cost).map(|(u, c)| u * c).sum();
                    best = Some(best.map_or(obj, |v| v.min(obj)));
                }
            }
        }
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < total - n + i {
                idx[i] += 1;
                for k in i + 1..n {
                    idx[k] = idx[k - 1] + 1;
                }
                break;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpCheck {
    pub status: LpStatus,
    pub status_agrees: bool,
    /// `|simplex - vertices| / (1 + |vertices|)`; zero when infeasible.
    pub objective_rel_err: f64,
    pub kkt_holds: bool,
    pub duality_gap: f64,
}

impl LpCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.status_agrees && self.objective_rel_err <= tol && self.kkt_holds
    }
}

pub fn lp_vertex_check(p: &LpProblem) -> Result<LpCheck> {
    let s = solve_lp(p)?;
    let oracle = enumerate_vertices(p);
    let status_agrees = match oracle {
        None => s.status == LpStatus::Infeasible,
        Some(_) => s.status == LpStatus::Optimal,
    };
    let (objective_rel_err, kkt_holds, duality_gap) = match (oracle, s.is_optimal()) {
        (Some(best), true) => {
            let k = kkt_report(p, &s)?;
            let gap = (dual_objective(p, &s)? - s.objective).abs() / (1.0 + s.objective.abs());
            ((s.objective - best).abs() / (1.0 + best.abs()), k.holds(p, &s) && gap <= 1e-6, gap)
        }
        _ => (0.0, true, 0.0),
    };
    Ok(LpCheck { status: s.status, status_agrees, objective_rel_err, kkt_holds, duality_gap })
}

/// `n_zones` zones with a cheap and a dear unit each; exposure entries in
/// [0.2, 1) over `d` sources.
pub fn toy_system<R: Rng>(rng: &mut R, d: usize, n_zones: usize) -> ZonalSystem {
    let mut j = |v: f64| v * rng.random_range(0.9..1.1);
    let mut zones = Vec::with_capacity(n_zones);
    let mut generators = Vec::with_capacity(2 * n_zones);
    for z in 0..n_zones {
        let id = z + 1;
        zones.push(Zone { id, load_mw: j(125.0) });
        let spread = 1.0 + 0.5 * z as f64;
        generators.push(Generator {
            zone: id,
            g_min_mw: 0.0,
            g_max_mw: j(200.0),
            energy_cost: j(10.0 * spread),
            reserve_cost: j(2.0 + z as f64),
        });
        generators.push(Generator {
            zone: id,
            g_min_mw: 0.0,
            g_max_mw: j(90.0),
            energy_cost: j(30.0 + 5.0 * z as f64),
            reserve_cost: j(1.0 + 0.5 * z as f64),
        });
    }
    let allocation = DMatrix::from_fn(n_zones, d, |_, _| rng.random_range(0.2..1.0));
    ZonalSystem { zones, generators, allocation }
}

/// True when small right-hand-side perturbations leave the duals in place.
pub fn is_clean(sys: &ZonalSystem, l: &CholeskyShape, rho: f64, tl: Option<&TransferLimits>) -> Result<bool> {
    let p = match tl {
        None => build_decoupled(sys, l, rho),
        Some(tl) => build_coupled(sys, l, rho, tl),
    };
    let s = solve_lp(&p)?;
    Ok(s.is_optimal() && !dual_degeneracy(&p, &s)?.flagged)
}

fn value(sys: &ZonalSystem, l: &CholeskyShape, rho: f64, tl: Option<&TransferLimits>) -> Result<f64> {
    let s = solve_sced(sys, l, rho, tl)?;
    if !s.is_optimal() {
        return Err(Error::InfeasibleAtShape { iteration: 0, rho });
    }
    Ok(s.objective)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeCheck {
    pub rel_err_l: f64,
    pub rel_err_rho: f64,
}

/// Envelope gradients against central differences of the dispatch value.
pub fn envelope_fd_check(sys: &ZonalSystem, l: &CholeskyShape, rho: f64, tl: Option<&TransferLimits>) -> Result<EnvelopeCheck> {
    let sol = solve_sced(sys, l, rho, tl)?;
    if !sol.is_optimal() {
        return Err(Error::InfeasibleAtShape { iteration: 0, rho });
    }
    let g = envelope_grad_l(sys, &sol, l, rho)?;
    let fd = fd_lower(l, FD_STEP, |m| value(sys, m, rho, tl))?;
    let gr = envelope_grad_rho(sys, &sol, l)?;
    let fdr = (value(sys, l, rho + FD_STEP, tl)? - value(sys, l, rho - FD_STEP, tl)?) / (2.0 * FD_STEP);
    Ok(EnvelopeCheck { rel_err_l: rel_err(g.matrix(), &fd), rel_err_rho: (gr - fdr).abs() / fdr.abs().max(1e-12) })
}

/// Profiled gradient against central differences of `L -> V(L, rho_eps(L))`,
/// re-running the smoothed quantile and the solve at each perturbation.
pub fn profiled_fd_check(
    l: &CholeskyShape,
    sys: &ZonalSystem,
    tune_us: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<f64> {
    let pg = profiled_gradient(l, sys, tune_us, cfg, None)?;
    let fd = fd_lower(l, FD_STEP, |m| Ok(profiled_gradient(m, sys, tune_us, cfg, None)?.sol.objective))?;
    Ok(rel_err(pg.grad.matrix(), &fd))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidSuite {
    pub cases: usize,
    pub max_homogeneity_err: f64,
    pub max_support_grad_err: f64,
    pub max_gauge_grad_err: f64,
}

/// Homogeneity of support and gauge, and both analytic shape gradients
/// against central differences, over `cases` seeded instances.
pub fn ellipsoid_suite(seed: u64, cases: usize) -> Result<EllipsoidSuite> {
    let mut rng = seeded(seed, 0);
    let mut out = EllipsoidSuite { cases, max_homogeneity_err: 0.0, max_support_grad_err: 0.0, max_gauge_grad_err: 0.0 };
    for _ in 0..cases {
        let d = rng.random_range(1..7);
        let l = random_shape(&mut rng, d);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rho = rng.random_range(0.01..50.0);
        let c = rng.random_range(0.01..50.0);

        let s1 = support(&l, 1.0, &w);
        let hs = (support(&l, rho, &w) - rho * s1).abs() / (rho * s1).max(1e-300);
        let cu: Vec<f64> = u.iter().map(|v| c * v).collect();
        let g1 = gauge(&l, &u)?;
        let hg = (gauge(&l, &cu)? - c * g1).abs() / (c * g1).max(1e-300);
        out.max_homogeneity_err = out.max_homogeneity_err.max(hs).max(hg);

        let an = grad_support_l(&l, rho, &w)?;
        let fd = fd_lower(&l, 1e-6, |m| Ok(support(m, rho, &w)))?;
        out.max_support_grad_err = out.max_support_grad_err.max(rel_err(an.matrix(), &fd));

        let an = grad_gauge_l(&l, &u)?;
        let fd = fd_lower(&l, 1e-6, |m| gauge(m, &u))?;
        out.max_gauge_grad_err = out.max_gauge_grad_err.max(rel_err(an.matrix(), &fd));
    }
    Ok(out)
}

/// Mean over trials of the exact coverage probability of a fresh point at
/// the split-conformal radius, for Gaussian data scored by its own factor.
pub fn conformal_monte_carlo(n_cal: usize, tau: f64, trials: usize, d: usize, seed: u64) -> Result<f64> {
    let chi2 = ChiSquared::new(d as f64).map_err(|e| Error::BadParams(e.to_string()))?;
    let l = random_shape(&mut seeded(seed, u64::MAX), d);
    let mut total = 0.0;
    for t in 0..trials {
        let mut rng = seeded(seed, t as u64);
        let cal: Vec<f64> = (0..n_cal)
            .map(|_| {
                let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let u = l.matrix() * e;
                gauge(&l, u.as_slice())
            })
            .collect::<Result<_>>()?;
        let r = conformal_radius(&cal, tau)?;
        // the score of a fresh point is the norm of a standard normal
        total += chi2.cdf(r.rho_tau * r.rho_tau);
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustAbsCheck {
    pub worst_excess: f64,
    pub worst_ratio: f64,
}

/// Sampled worst case of `|f + w^T u|` over the ellipsoid against
/// `|f| + support(L, rho, w)`, per instance.
pub fn robust_abs_check(seed: u64, instances: usize, samples: usize) -> Result<RobustAbsCheck> {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_ratio: f64 = 1.0;
    for k in 0..instances {
        let mut rng = seeded(seed, k as u64);
        let d = rng.random_range(2..7);
        let l = random_shape(&mut rng, d);
        let rho = rng.random_range(0.1..5.0);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = rng.random_range(-3.0..3.0);
        let bound = f64::abs(f) + support(&l, rho, &w);
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let frac = if rng.random::<bool>() { 1.0 } else { rng.random::<f64>().powf(1.0 / d as f64) };
            let radius = rho * frac / z.norm();
            let u = l.matrix() * z * radius;
            debug_assert!(gauge(&l, u.as_slice())? <= rho * (1.0 + 1e-12));
            let val: f64 = f + w.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>();
            worst = worst.max(val.abs());
        }
        worst_excess = worst_excess.max(worst - bound);
        worst_ratio = worst_ratio.min(worst / bound);
    }
    Ok(RobustAbsCheck { worst_excess, worst_ratio })
}

/// Seeded `[4, 7, 5, 6]` encoder with every parameter active.
pub fn small_encoder(seed: u64, normalize: bool) -> Result<MlpEncoder> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = MlpEncoder::new(&[4, 7, 5, 6], normalize, &mut rng)?;
    for w in enc.weights.last_mut().expect("output layer").iter_mut() {
        *w = rng.random_range(-0.3..0.3);
    }
    for b in enc.biases.iter_mut() {
        for v in b.iter_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    Ok(enc)
}

/// Encoder backward pass against central differences of `<G, L_phi(x)>`.
pub fn encoder_fd_check(seed: u64, normalize: bool) -> Result<f64> {
    let mut enc = small_encoder(seed, normalize)?;
    let mut rng = seeded(seed, 1);
    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = ShapeGradient::masked(DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)));
    let an = enc.backward(&x, &g);
    let obj = |e: &MlpEncoder| e.forward(&x).matrix().dot(g.matrix());
    let h = 1e-6;
    let mut num = MlpGrad::zeros_like(&enc);
    for l in 0..enc.weights.len() {
        for k in 0..enc.weights[l].len() {
            let orig = enc.weights[l].as_slice()[k];
            enc.weights[l].as_mut_slice()[k] = orig + h;
            let fp = obj(&enc);
            enc.weights[l].as_mut_slice()[k] = orig - h;
            let fm = obj(&enc);
            enc.weights[l].as_mut_slice()[k] = orig;
            num.weights[l].as_mut_slice()[k] = (fp - fm) / (2.0 * h);
        }
        for k in 0..enc.biases[l].len() {
            let orig = enc.biases[l][k];
            enc.biases[l][k] = orig + h;
            let fp = obj(&enc);
            enc.biases[l][k] = orig - h;
            let fm = obj(&enc);
            enc.biases[l][k] = orig;
            num.biases[l][k] = (fp - fm) / (2.0 * h);
        }
    }
    let mut diff = an;
    diff.add_scaled(&num, -1.0);
    Ok(diff.norm() / num.norm().max(1e-12))
}
