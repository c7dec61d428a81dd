//! Robust zonal security-constrained economic dispatch.
//!
//! Decision variables are ordered `(g_0, .., g_{G-1}, r_0, .., r_{G-1})`.
//! Every zone gets a reserve row `-sum_{i in G_z} r_i <= -rho ||L^T A_z||`;
//! coupled dispatch adds, for each tight zone, the pair of transfer rows
//! `+-(sum_{i in G_z} g_i - D_z) + rho ||L^T A_z|| <= T_z`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{grad_support_l, support, CholeskyShape, ShapeGradient, ZERO_DIRECTION_TOL};
use crate::lpcore::{solve_lp, LpProblem, LpSolution, LpStatus, RowTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: usize,
    pub load_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub zone: usize,
    pub g_min_mw: f64,
    pub g_max_mw: f64,
    pub energy_cost: f64,
    pub reserve_cost: f64,
}

/// Zones, generators and the `Z x d` allocation of source errors to zones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemJson", into = "SystemJson")]
pub struct ZonalSystem {
    pub zones: Vec<Zone>,
    pub generators: Vec<Generator>,
    pub allocation: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemJson {
    zones: Vec<Zone>,
    generators: Vec<Generator>,
    allocation: Vec<Vec<f64>>,
}

impl TryFrom<SystemJson> for ZonalSystem {
    type Error = Error;

    fn try_from(j: SystemJson) -> Result<Self> {
        let z = j.allocation.len();
        let d = j.allocation.first().map_or(0, |r| r.len());
        if j.allocation.iter().any(|r| r.len() != d) {
            return Err(Error::BadSystem("allocation rows have unequal length".into()));
        }
        let allocation = DMatrix::from_fn(z, d, |i, k| j.allocation[i][k]);
        let sys = ZonalSystem { zones: j.zones, generators: j.generators, allocation };
        sys.validate()?;
        Ok(sys)
    }
}

impl From<ZonalSystem> for SystemJson {
    fn from(s: ZonalSystem) -> Self {
        let allocation = (0..s.allocation.nrows())
            .map(|i| s.allocation.row(i).iter().copied().collect())
            .collect();
        SystemJson { zones: s.zones, generators: s.generators, allocation }
    }
}

impl ZonalSystem {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSystem(m));
        if self.zones.is_empty() {
            return bad("no zones".into());
        }
        if self.allocation.nrows() != self.zones.len() {
            return bad(format!(
                "allocation has {} rows for {} zones",
                self.allocation.nrows(),
                self.zones.len()
            ));
        }
        if self.allocation.iter().any(|v| !v.is_finite()) {
            return bad("allocation has a non-finite entry".into());
        }
        let ids: BTreeSet<usize> = self.zones.iter().map(|z| z.id).collect();
        if ids.len() != self.zones.len() {
            return bad("duplicate zone id".into());
        }
        for z in &self.zones {
            if !(z.load_mw >= 0.0 && z.load_mw.is_finite()) {
                return bad(format!("zone {} has load {}", z.id, z.load_mw));
            }
        }
        for (i, g) in self.generators.iter().enumerate() {
            if !ids.contains(&g.zone) {
                return bad(format!("generator {i} refers to unknown zone {}", g.zone));
            }
            let vals = [g.g_min_mw, g.g_max_mw, g.energy_cost, g.reserve_cost];
            if vals.iter().any(|v| !v.is_finite()) || g.g_min_mw > g.g_max_mw {
                return bad(format!("generator {i} has invalid limits or costs"));
            }
        }
        if self.total_capacity() < self.total_load() {
            return bad(format!(
                "total capacity {} below total load {}",
                self.total_capacity(),
                self.total_load()
            ));
        }
        Ok(())
    }

    pub fn n_zones(&self) -> usize {
        self.zones.len()
    }

    pub fn dim(&self) -> usize {
        self.allocation.ncols()
    }

    pub fn zone_index(&self, id: usize) -> Option<usize> {
        self.zones.iter().position(|z| z.id == id)
    }

    pub fn total_load(&self) -> f64 {
        self.zones.iter().map(|z| z.load_mw).sum()
    }

    pub fn total_capacity(&self) -> f64 {
        self.generators.iter().map(|g| g.g_max_mw).sum()
    }

    /// Row `A_z` of the allocation for zone index `z`.
    pub fn exposure(&self, z: usize) -> Vec<f64> {
        self.allocation.row(z).iter().copied().collect()
    }

    /// Generator indices located in zone index `z`.
    pub fn generators_in(&self, z: usize) -> Vec<usize> {
        let id = self.zones[z].id;
        (0..self.generators.len()).filter(|&i| self.generators[i].zone == id).collect()
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Transfer-capacity limits keyed by zone id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferLimits {
    pub limits: BTreeMap<usize, f64>,
    pub tight_zones: BTreeSet<usize>,
}

impl TransferLimits {
    pub fn limit(&self, zone_id: usize) -> Option<f64> {
        self.limits.get(&zone_id).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScedSolution {
    pub dispatch: Vec<f64>,
    pub reserve: Vec<f64>,
    pub objective: f64,
    /// Per zone index.
    pub reserve_duals: Vec<f64>,
    /// Per zone index; sum of both transfer-row duals.
    pub transfer_duals: Vec<f64>,
    pub status: LpStatus,
    pub lp: LpSolution,
}

impl ScedSolution {
    pub fn from_lp(sys: &ZonalSystem, p: &LpProblem, lp: LpSolution) -> Self {
        let g = sys.generators.len();
        let z = sys.n_zones();
        let mut reserve_duals = vec![0.0; z];
        let mut transfer_duals = vec![0.0; z];
        if lp.is_optimal() {
            for (k, tag) in p.tags.iter().enumerate() {
                match *tag {
                    RowTag::Reserve(zi) => reserve_duals[zi] += lp.duals_ub[k],
                    RowTag::TransferUpper(zi) | RowTag::TransferLower(zi) => transfer_duals[zi] += lp.duals_ub[k],
                    RowTag::Other => {}
                }
            }
        }
        Self {
            dispatch: lp.x[..g].to_vec(),
            reserve: lp.x[g..2 * g].to_vec(),
            objective: lp.objective,
            reserve_duals,
            transfer_duals,
            status: lp.status,
            lp,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    pub fn total_reserve(&self) -> f64 {
        self.reserve.iter().sum()
    }

    /// `mu_z + lambda_z` per zone index.
    pub fn combined_duals(&self) -> Vec<f64> {
        self.reserve_duals.iter().zip(&self.transfer_duals).map(|(a, b)| a + b).collect()
    }
}

/// Zonal reserve requirement `rho ||L^T A_z||`; zero below the direction tolerance.
pub fn reserve_requirement(l: &CholeskyShape, rho: f64, sys: &ZonalSystem, z: usize) -> f64 {
    let r = support(l, rho, &sys.exposure(z));
    if r < rho * ZERO_DIRECTION_TOL {
        0.0
    } else {
        r
    }
}

fn check_dims(sys: &ZonalSystem, l: &CholeskyShape) {
    assert_eq!(l.dim(), sys.dim(), "shape dimension must match allocation columns");
}

pub fn build_decoupled(sys: &ZonalSystem, l: &CholeskyShape, rho: f64) -> LpProblem {
    check_dims(sys, l);
    let ng = sys.generators.len();
    let n = 2 * ng;
    let mut cost = vec![0.0; n];
    for (i, g) in sys.generators.iter().enumerate() {
        cost[i] = g.energy_cost;
        cost[ng + i] = g.reserve_cost;
    }
    let mut p = LpProblem::new(cost);
    for (i, g) in sys.generators.iter().enumerate() {
        p.lower[i] = g.g_min_mw;
    }
    let mut row = vec![0.0; n];
    row[..ng].fill(1.0);
    p.add_eq(&row, sys.total_load());
    for (i, g) in sys.generators.iter().enumerate() {
        row.fill(0.0);
        row[i] = 1.0;
        row[ng + i] = 1.0;
        p.add_ub(&row, g.g_max_mw, RowTag::Other);
    }
    for z in 0..sys.n_zones() {
        row.fill(0.0);
        for i in sys.generators_in(z) {
            row[ng + i] = -1.0;
        }
        p.add_ub(&row, -reserve_requirement(l, rho, sys, z), RowTag::Reserve(z));
    }
    p
}

pub fn build_coupled(sys: &ZonalSystem, l: &CholeskyShape, rho: f64, tl: &TransferLimits) -> LpProblem {
    let mut p = build_decoupled(sys, l, rho);
    let ng = sys.generators.len();
    let mut row = vec![0.0; 2 * ng];
    for z in 0..sys.n_zones() {
        let id = sys.zones[z].id;
        if !tl.tight_zones.contains(&id) {
            continue;
        }
        let t = tl.limit(id).expect("transfer limit missing for a tight zone");
        let req = reserve_requirement(l, rho, sys, z);
        let d = sys.zones[z].load_mw;
        row.fill(0.0);
        for i in sys.generators_in(z) {
            row[i] = 1.0;
        }
        p.add_ub(&row, t - req + d, RowTag::TransferUpper(z));
        row.iter_mut().for_each(|v| *v = -*v);
        p.add_ub(&row, t - req - d, RowTag::TransferLower(z));
    }
    p
}

/// Builds and solves the decoupled (`tl = None`) or coupled dispatch.
pub fn solve_sced(
    sys: &ZonalSystem,
    l: &CholeskyShape,
    rho: f64,
    tl: Option<&TransferLimits>,
) -> Result<ScedSolution> {
    let p = match tl {
        None => build_decoupled(sys, l, rho),
        Some(tl) => build_coupled(sys, l, rho, tl),
    };
    let lp = solve_lp(&p)?;
    Ok(ScedSolution::from_lp(sys, &p, lp))
}

pub fn compute_transfer_limits(
    sys: &ZonalSystem,
    l_base: &CholeskyShape,
    rho_base: f64,
    tight: &BTreeSet<usize>,
    alpha_tight: f64,
    alpha_loose: f64,
) -> Result<TransferLimits> {
    for id in tight {
        if sys.zone_index(*id).is_none() {
            return Err(Error::BadSystem(format!("tight zone {id} does not exist")));
        }
    }
    let base = solve_sced(sys, l_base, rho_base, None)?;
    if !base.is_optimal() {
        return Err(Error::BaseInfeasible);
    }
    let mut limits = BTreeMap::new();
    for z in 0..sys.n_zones() {
        let id = sys.zones[z].id;
        let net: f64 = sys.generators_in(z).iter().map(|&i| base.dispatch[i]).sum::<f64>() - sys.zones[z].load_mw;
        let alpha = if tight.contains(&id) { alpha_tight } else { alpha_loose };
        limits.insert(id, alpha * (net.abs() + reserve_requirement(l_base, rho_base, sys, z)));
    }
    Ok(TransferLimits { limits, tight_zones: tight.clone() })
}

/// The `k` zone ids with the largest reserve duals, ties to the lower id.
pub fn top_reserve_zones(sys: &ZonalSystem, sol: &ScedSolution, k: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..sys.n_zones()).collect();
    order.sort_by(|&a, &b| {
        sol.reserve_duals[b]
            .total_cmp(&sol.reserve_duals[a])
            .then(sys.zones[a].id.cmp(&sys.zones[b].id))
    });
    order.into_iter().take(k).map(|z| sys.zones[z].id).collect()
}

/// Walks zones in decreasing reserve-dual order and keeps a zone only if the
/// coupled dispatch at the base point stays feasible with it tightened.
/// Stops after `k` zones.
pub fn select_tight_zones(
    sys: &ZonalSystem,
    l_base: &CholeskyShape,
    rho_base: f64,
    k: usize,
    alpha_tight: f64,
    alpha_loose: f64,
) -> Result<BTreeSet<usize>> {
    let base = solve_sced(sys, l_base, rho_base, None)?;
    if !base.is_optimal() {
        return Err(Error::BaseInfeasible);
    }
    let mut tight = BTreeSet::new();
    for id in top_reserve_zones(sys, &base, sys.n_zones()) {
        if tight.len() == k {
            break;
        }
        let mut cand = tight.clone();
        cand.insert(id);
        let tl = compute_transfer_limits(sys, l_base, rho_base, &cand, alpha_tight, alpha_loose)?;
        if solve_sced(sys, l_base, rho_base, Some(&tl))?.is_optimal() {
            tight = cand;
        } else {
            log::info!("zone {id} skipped: tightened transfer rows infeasible at the base point");
        }
    }
    Ok(tight)
}

fn require_optimal(sol: &ScedSolution) -> Result<()> {
    if sol.is_optimal() {
        Ok(())
    } else {
        Err(Error::NotOptimal(sol.status.to_string()))
    }
}

/// `sum_z (mu_z + lambda_z) grad_L sigma(A_z)`.
pub fn envelope_grad_l(sys: &ZonalSystem, sol: &ScedSolution, l: &CholeskyShape, rho: f64) -> Result<ShapeGradient> {
    require_optimal(sol)?;
    let mut g = ShapeGradient::zeros(l.dim());
    for (z, w) in sol.combined_duals().into_iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        match grad_support_l(l, rho, &sys.exposure(z)) {
            Ok(gz) => g.add_scaled(&gz, w),
            Err(Error::ZeroDirection(n)) => {
                log::debug!("zone {} has vanishing exposure ({n:e}); skipped", sys.zones[z].id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(g)
}

/// `sum_z (mu_z + lambda_z) ||L^T A_z||`.
pub fn envelope_grad_rho(sys: &ZonalSystem, sol: &ScedSolution, l: &CholeskyShape) -> Result<f64> {
    require_optimal(sol)?;
    Ok(sol
        .combined_duals()
        .into_iter()
        .enumerate()
        .map(|(z, w)| w * reserve_requirement(l, 1.0, sys, z))
        .sum())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn one_zone(load: f64, gmax: f64) -> ZonalSystem {
        ZonalSystem {
            zones: vec![Zone { id: 1, load_mw: load }],
            generators: vec![Generator { zone: 1, g_min_mw: 0.0, g_max_mw: gmax, energy_cost: 10.0, reserve_cost: 1.0 }],
            allocation: DMatrix::from_row_slice(1, 1, &[1.0]),
        }
    }

    #[test]
    fn requirement_examples() {
        let sys = ZonalSystem { allocation: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), ..one_zone(50.0, 100.0) };
        let l = CholeskyShape::identity(2);
        assert_eq!(reserve_requirement(&l, 1.0, &sys, 0), 1.0);
        assert!(reserve_requirement(&l, 1e-300, &sys, 0) < 1e-299);
        let l = CholeskyShape::from_rows(&[vec![2.0, 0.0], vec![0.5, 1.5]]).unwrap();
        let r = reserve_requirement(&l, 0.7, &sys, 0);
        assert!((r - support(&l, 0.7, &[1.0, 0.0])).abs() <= 1e-12);
    }

    #[test]
    fn one_zone_hand_solution() {
        let sys = one_zone(50.0, 100.0);
        let l = CholeskyShape::identity(1);
        let s = solve_sced(&sys, &l, 10.0, None).unwrap();
        assert!(s.is_optimal());
        assert!((s.dispatch[0] - 50.0).abs() < 1e-9);
        assert!((s.reserve[0] - 10.0).abs() < 1e-9);
        assert!((s.objective - 510.0).abs() < 1e-9);
        assert!((s.reserve_duals[0] - 1.0).abs() < 1e-9);
        assert!((envelope_grad_rho(&sys, &s, &l).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_requirement_and_infeasible() {
        let sys = one_zone(50.0, 100.0);
        let l = CholeskyShape::identity(1);
        let s = solve_sced(&sys, &l, 0.0, None).unwrap();
        assert_eq!(s.reserve[0], 0.0);
        assert_eq!(s.reserve_duals[0], 0.0);
        assert!(envelope_grad_l(&sys, &s, &l, 0.0).unwrap().frobenius_norm() == 0.0);
        assert_eq!(envelope_grad_rho(&sys, &s, &l).unwrap(), 0.0);

        let sys = one_zone(50.0, 55.0);
        let s = solve_sced(&sys, &l, 10.0, None).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
        assert!(matches!(envelope_grad_rho(&sys, &s, &l), Err(Error::NotOptimal(_))));
    }

    #[test]
    fn one_zone_transfer_limit() {
        let sys = one_zone(50.0, 100.0);
        let l = CholeskyShape::identity(1);
        let tight: BTreeSet<usize> = [1].into();
        let tl = compute_transfer_limits(&sys, &l, 10.0, &tight, 0.9, 1.5).unwrap();
        assert!((tl.limit(1).unwrap() - 9.0).abs() < 1e-9);
        let tl = compute_transfer_limits(&sys, &l, 10.0, &tight, 1.0, 1.5).unwrap();
        let s = solve_sced(&sys, &l, 10.0, Some(&tl)).unwrap();
        assert!(s.is_optimal());
        // T below the requirement cannot hold
        let tl = compute_transfer_limits(&sys, &l, 10.0, &tight, 0.9, 1.5).unwrap();
        let s = solve_sced(&sys, &l, 10.0, Some(&tl)).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
    }

    #[test]
    fn base_infeasible_is_an_error() {
        let sys = one_zone(50.0, 55.0);
        let l = CholeskyShape::identity(1);
        let r = compute_transfer_limits(&sys, &l, 10.0, &BTreeSet::new(), 0.9, 1.5);
        assert!(matches!(r, Err(Error::BaseInfeasible)));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let sys = one_zone(50.0, 100.0);
        let text = sys.to_json().unwrap();
        let back: ZonalSystem = serde_json::from_str(&text).unwrap();
        assert_eq!(sys, back);
        let bad = text.replace("\"zone\": 1", "\"zone\": 7");
        assert!(serde_json::from_str::<ZonalSystem>(&bad).is_err());
        let short = one_zone(500.0, 100.0);
        assert!(matches!(short.validate(), Err(Error::BadSystem(_))));
    }
}
