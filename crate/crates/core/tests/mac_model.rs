mod common;

use fedgw::mac::{
    saturation_throughput, saturation_throughput_with, solve_fixed_point, CollisionModel, MacParams, RESIDUAL_TOLERANCE,
};
use proptest::prelude::*;

#[test]
fn solver_agrees_with_bisection_on_tau() {
    let mac = MacParams::default();
    for n in 1..=30 {
        for p_e in [0.0, 0.02, 0.1, 0.3] {
            let fp = solve_fixed_point(n, p_e, &mac).unwrap();
            let (tau, p) = common::bisect_tau(n, p_e, &mac);
            assert!((fp.tau - tau).abs() < 1e-9, "n={n} p_e={p_e}: {} vs {tau}", fp.tau);
            assert!((fp.p_cond - p).abs() < 1e-9);
        }
    }
}

#[test]
fn single_node_without_errors_never_fails() {
    let fp = solve_fixed_point(1, 0.0, &MacParams::default()).unwrap();
    assert_eq!(fp.p_cond, 0.0);
    assert!((fp.tau - 2.0 / 16.0).abs() < 1e-15);
}

#[test]
fn model_tracks_monte_carlo_with_small_frames() {
    let mac = MacParams::default();
    for n in [3, 8] {
        let mc = common::dcf_monte_carlo(n, 0.05, 4_000.0, 24e6, &mac, 300_000, 9);
        let st = common::stats(n, 4_000.0, 4_000.0, 24e6, 0.05);
        let s = saturation_throughput_with(&st, &mac, CollisionModel::Exact).unwrap().aggregate;
        assert!((s / mc - 1.0).abs() < 0.05, "n={n}: model {s} vs simulation {mc}");
    }
}

#[test]
fn fig1_operating_point() {
    // three stations and the gateway at 54 Mbit/s with 1500 B frames
    let s = saturation_throughput(&common::stats(4, 12_000.0, 12_000.0, 54e6, 0.0), &MacParams::default()).unwrap();
    assert!((s.aggregate / 1e6 - 31.0).abs() < 1.0, "S = {}", s.aggregate);
}

proptest! {
    #[test]
    fn residual_below_tolerance(n in 1u32..60, p_e in 0.0f64..0.9, cw in 1u32..64, m in 0u32..10) {
        let mac = MacParams { cw_min: cw, backoff_stages: m, ..MacParams::default() };
        let fp = solve_fixed_point(n, p_e, &mac).unwrap();
        prop_assert!(fp.residual < RESIDUAL_TOLERANCE);
        prop_assert!(fp.tau > 0.0 && fp.tau <= 1.0);
        prop_assert!((0.0..1.0).contains(&fp.p_cond));
    }

    #[test]
    fn worst_case_collisions_never_raise_throughput(
        n in 1u32..30,
        avg in 100.0f64..12_000.0,
        extra in 0.0f64..12_000.0,
        rate in prop::sample::select(vec![6e6, 12e6, 24e6, 54e6]),
        p_e in 0.0f64..0.3,
    ) {
        let mac = MacParams::default();
        let st = common::stats(n, avg, avg + extra, rate, p_e);
        let wc = saturation_throughput_with(&st, &mac, CollisionModel::WorstCase).unwrap();
        let ex = saturation_throughput_with(&st, &mac, CollisionModel::Exact).unwrap();
        prop_assert!(wc.aggregate <= ex.aggregate * (1.0 + 1e-12));
        prop_assert!((wc.per_node * f64::from(n) - wc.aggregate).abs() < 1e-6 * wc.aggregate);
    }

    #[test]
    fn throughput_falls_with_channel_errors(n in 1u32..20, p_lo in 0.0f64..0.4, dp in 0.01f64..0.4) {
        let mac = MacParams::default();
        let lo = saturation_throughput(&common::stats(n, 12_000.0, 12_000.0, 54e6, p_lo), &mac).unwrap();
        let hi = saturation_throughput(&common::stats(n, 12_000.0, 12_000.0, 54e6, p_lo + dp), &mac).unwrap();
        prop_assert!(hi.aggregate < lo.aggregate);
    }
}
