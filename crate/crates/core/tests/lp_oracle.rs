//! Simplex results against brute-force vertex enumeration.

use proptest::prelude::*;
use reserve_core::lpcore::{kkt_report, solve_lp, LpProblem, LpStatus, RowTag};
use reserve_core::oracle::{lp_vertex_check, random_boxed_lp};

fn check_against_oracle(p: &LpProblem) {
    let c = lp_vertex_check(p).unwrap();
    assert!(c.passes(1e-8), "{c:?}");
}

#[test]
fn twenty_seeded_boxed_lps_match_vertex_enumeration() {
    let mut optimal = 0;
    for seed in 0..20 {
        let p = random_boxed_lp(seed, false);
        check_against_oracle(&p);
        if solve_lp(&p).unwrap().is_optimal() {
            optimal += 1;
        }
    }
    assert!(optimal >= 15, "too few feasible instances ({optimal})");
}

#[test]
fn integer_coefficient_lps_survive_degeneracy() {
    for seed in 100..140 {
        check_against_oracle(&random_boxed_lp(seed, true));
    }
}

#[test]
fn equality_rows_against_oracle() {
    // An equality x0 + ... + x4 = 12 expressed twice as inequalities for the oracle.
    for seed in 200..210 {
        let p = random_boxed_lp(seed, false);
        let mut with_eq = p.clone();
        with_eq.add_eq(&[1.0; 5], 12.0);
        let mut as_ub = p;
        as_ub.add_ub(&[1.0; 5], 12.0, RowTag::Other);
        as_ub.add_ub(&[-1.0; 5], -12.0, RowTag::Other);
        let a = solve_lp(&with_eq).unwrap();
        let b = solve_lp(&as_ub).unwrap();
        assert_eq!(a.status, b.status);
        if a.is_optimal() {
            assert!((a.objective - b.objective).abs() <= 1e-8 * (1.0 + a.objective.abs()));
            let mu = b.duals_ub[6] - b.duals_ub[7];
            assert!((a.duals_eq[0] + mu).abs() <= 1e-6, "{} vs {}", a.duals_eq[0], -mu);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kkt_holds_on_random_boxed_lps(seed in 0u64..1_000_000) {
        let p = random_boxed_lp(seed, seed % 3 == 0);
        let s = solve_lp(&p).unwrap();
        prop_assert!(s.status != LpStatus::Unbounded);
        if s.is_optimal() {
            let k = kkt_report(&p, &s).unwrap();
            prop_assert!(k.holds(&p, &s), "{:?}", k);
        }
    }
}
