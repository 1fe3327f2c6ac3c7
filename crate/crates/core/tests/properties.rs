use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gnbp::bad_data::{bp_bdt, quantile};
use gnbp::convergence::{build_omega_damped, ConvergenceMatrices};
use gnbp::experiments::{run_batch, wrss, ExperimentConfig, Preset};
use gnbp::factor_graph::{build_graph, FactorType, GaussianMessage};
use gnbp::fixtures::{random_instance, random_network, random_state};
use gnbp::gnbp::{
    fv_message, initial_state, run_inner, solve, vf_message, Damping, InnerLoop, SolverConfig, StartMode,
};
use gnbp::measurement::{jacobian_row, Location, MeasurementKind, PlacementConfig};
use gnbp::network::{branch_admittance, Branch, CaseFile};
use gnbp::power_flow::{solve_power_flow, PowerFlowSpec};
use gnbp::wls::{linearize, solve_linear_wls};
use nalgebra::DMatrix;

fn runs(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn placement(gamma: f64) -> PlacementConfig {
    PlacementConfig {
        gamma,
        pmu_count: 1,
        ..PlacementConfig::default()
    }
}

proptest! {
    #![proptest_config(runs(24))]

    #[test]
    fn case_round_trip(seed in any::<u64>(), buses in 2usize..20) {
        let net = random_network(seed, buses, buses / 3);
        let text = CaseFile::from_parts(&net, None).to_json();
        let (back, ms) = CaseFile::parse(&text).unwrap().into_model().unwrap();
        prop_assert!(ms.is_none());
        prop_assert_eq!(back, net);
    }

    #[test]
    fn untapped_admittance_is_symmetric_under_swap(
        r in 0.0f64..0.1, x in 0.01f64..0.5, b in 0.0f64..0.2,
    ) {
        let forward = Branch {
            from_bus: 0,
            to_bus: 1,
            series_resistance: r,
            series_reactance: x,
            charging_susceptance: b,
            tap_ratio: 1.0,
            phase_shift: 0.0,
        };
        let backward = Branch { from_bus: 1, to_bus: 0, ..forward.clone() };
        prop_assert_eq!(branch_admittance(&backward), branch_admittance(&forward).swapped());
    }

    #[test]
    fn power_flow_reproduces_injections(seed in any::<u64>(), buses in 3usize..15) {
        let net = random_network(seed, buses, buses / 2);
        let spec = PowerFlowSpec::from_network(&net);
        if let Ok(sol) = solve_power_flow(&net, &spec, 1e-10, 30) {
            for bus in 0..buses {
                if bus == net.slack() {
                    continue;
                }
                let m = gnbp::Measurement {
                    kind: MeasurementKind::ActiveInjection,
                    location: Location::Bus(bus),
                    z: 0.0,
                    variance: 1.0,
                    device_class: gnbp::measurement::DeviceClass::Legacy,
                };
                let p = gnbp::measurement::evaluate_h(&net, &m, &sol.state);
                prop_assert!((p - spec.active[bus]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn jacobian_support_is_local(seed in any::<u64>()) {
        let (net, x, ms) = random_instance(seed % 1000, 8, 4, &placement(3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = if seed % 2 == 0 { x } else { random_state(&mut rng, &net, 0.2) };
        for m in ms.iter() {
            let buses: Vec<usize> = match m.location {
                Location::Bus(i) if m.kind.is_direct() => vec![i],
                Location::Bus(i) => {
                    let mut v: Vec<usize> = net.ybus_row(i).iter().map(|(k, _)| *k).collect();
                    v.push(i);
                    v
                }
                Location::Branch { branch, .. } => {
                    let b = &net.branches()[branch];
                    vec![b.from_bus, b.to_bus]
                }
            };
            for (c, _) in jacobian_row(&net, m, &x) {
                prop_assert!(buses.iter().any(|&b| c == net.angle_index(b) || c == net.magnitude_index(b)));
            }
        }
    }

    #[test]
    fn graph_is_bipartite_covered_and_deterministic(seed in 0u64..1000) {
        let (net, _, ms) = random_instance(seed, 6, 3, &placement(2.0));
        let g = build_graph(&net, &ms);
        let n = g.variable_count();
        for e in &g.edges {
            prop_assert!(e.variable < n && e.factor < g.factors.len());
            prop_assert_eq!(g.factors[e.factor].node_type, FactorType::Indirect);
        }
        let mut covered = vec![false; n];
        for f in g.factors.iter().filter(|f| f.node_type.is_local()) {
            for &v in &f.incident_variables {
                covered[v] = true;
            }
        }
        prop_assert!(covered.iter().all(|c| *c));
        prop_assert_eq!(build_graph(&net, &ms).dump(), g.dump());
    }

    #[test]
    fn messages_stay_gaussian(
        means in prop::collection::vec(-1e3f64..1e3, 1..6),
        variances in prop::collection::vec(1e-12f64..1e6, 6),
        coefficients in prop::collection::vec(-50.0f64..50.0, 6),
        own in prop_oneof![-50.0f64..-1e-6, 1e-6f64..50.0],
        r in -10.0f64..10.0,
        v in 1e-12f64..1.0,
    ) {
        let incoming: Vec<GaussianMessage> = means
            .iter()
            .zip(&variances)
            .map(|(m, v)| GaussianMessage::new(*m, *v))
            .collect();
        let vf = vf_message(&incoming);
        prop_assert!(vf.mean.is_finite() && vf.variance > 0.0);
        let others: Vec<(f64, GaussianMessage)> = coefficients.iter().copied().zip(incoming).collect();
        let fv = fv_message(r, v, own, &others).unwrap();
        prop_assert!(fv.mean.is_finite() && fv.variance > 0.0 && fv.variance.is_finite());
    }

    #[test]
    fn damping_identities_hold_for_any_mask(
        mask in prop::collection::vec(any::<bool>(), 1..12),
        alpha1 in 0.01f64..0.99,
        seed in any::<u64>(),
    ) {
        let b = mask.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let omega = DMatrix::from_fn(b, b, |_, _| rng.random_range(-1.0..1.0));
        let alpha2 = 1.0 - alpha1;
        let q = DMatrix::from_fn(b, b, |i, j| if i == j && !mask[i] { 1.0 } else { 0.0 });
        let r = DMatrix::from_fn(b, b, |i, j| if i == j && mask[i] { 1.0 } else { 0.0 });
        prop_assert!((&q + &r * alpha2 + &r * alpha1 - DMatrix::identity(b, b)).amax() <= f64::EPSILON);
        let sum = &q * &omega + &r * &omega * alpha2 + &r * &omega * alpha1;
        prop_assert!((sum - &omega).amax() <= 2.0 * f64::EPSILON * omega.amax());
        let damped = build_omega_damped(&omega, &mask, alpha1);
        let expect = &q * &omega + &r * &omega * alpha2 - &r * alpha1;
        prop_assert!((damped - expect).amax() <= 4.0 * f64::EPSILON * omega.amax().max(1.0));
    }
}

proptest! {
    #![proptest_config(runs(12))]

    #[test]
    fn threshold_halt_matches_linear_wls(seed in 0u64..500) {
        let (net, x, ms) = random_instance(seed, 6, 3, &placement(2.0));
        let cfg = SolverConfig {
            epsilon: vec![1e-10],
            tau_max: vec![20_000],
            ..SolverConfig::default()
        };
        let point = x.add(&vec![0.005; net.state_dim()]);
        let mut g = build_graph(&net, &ms);
        g.refresh_coefficients(&net, &point);
        let m = ConvergenceMatrices::from_graph(&g);
        let v = m.variance_fixed_point(&vec![1.0; m.dim()], 1e-15, 200_000).unwrap();
        let omega = m.omega(&v);
        let rho = gnbp::convergence::spectral_radius(m.dim(), |a, b| omega.apply(a, b)).unwrap();
        let outcome = run_inner(&mut g, &cfg, 0, &mut Vec::new());
        prop_assume!(rho < 1.0 && outcome.converged);
        let sys = linearize(&net, &ms, &point);
        let means: Vec<f64> = outcome.marginals.iter().map(|m| m.mean).collect();
        let res = sys.normal_residual(&means).amax();
        let scale = sys.normal_residual_scale(&means).amax();
        prop_assert!(res <= 10.0 * 1e-10 * scale, "{res:e} vs scale {scale:e}");
    }

    #[test]
    fn damping_leaves_variances_untouched(seed in 0u64..500, p in 0.1f64..0.9) {
        let (net, x, ms) = random_instance(seed, 6, 3, &placement(2.0));
        let mut g = build_graph(&net, &ms);
        g.refresh_coefficients(&net, &x.add(&vec![0.01; net.state_dim()]));
        let mask = gnbp::gnbp::damping_mask(seed, 0, g.edges.len(), p);
        let mut plain = InnerLoop::new(&g);
        let mut damped = InnerLoop::new(&g).with_damping(mask, 0.4);
        for _ in 0..200 {
            plain.step();
            damped.step();
            prop_assert_eq!(&plain.fv_var, &damped.fv_var);
            prop_assert_eq!(&plain.vf_var, &damped.vf_var);
        }
    }

    #[test]
    fn variance_fixed_point_is_unique(seed in 0u64..500, scale in 1e-3f64..1e3) {
        let (net, x, ms) = random_instance(seed, 6, 3, &placement(2.0));
        let mut g = build_graph(&net, &ms);
        g.refresh_coefficients(&net, &x.add(&vec![0.01; net.state_dim()]));
        let m = ConvergenceMatrices::from_graph(&g);
        let a = m.variance_fixed_point(&vec![1.0; m.dim()], 1e-15, 200_000).unwrap();
        let b = m.variance_fixed_point(&vec![scale; m.dim()], 1e-15, 200_000).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()));
        }
    }

    #[test]
    fn solve_is_deterministic(seed in prop_oneof![Just(268u64), 0u64..500]) {
        let (net, _, ms) = random_instance(seed, 6, 3, &placement(2.5));
        let cfg = SolverConfig {
            damping: Damping::randomized_default(),
            seed,
            nu_max: 4,
            trace: true,
            ..SolverConfig::default()
        };
        let a = solve(&net, &ms, &cfg).unwrap();
        let b = solve(&net, &ms, &cfg).unwrap();
        // Debug output compares diverged (NaN) runs bit for bit as well.
        prop_assert_eq!(format!("{:?}", a.x_hat), format!("{:?}", b.x_hat));
        prop_assert_eq!(format!("{:?}", a.records), format!("{:?}", b.records));
        prop_assert_eq!(format!("{:?}", a.trace), format!("{:?}", b.trace));
        prop_assert_eq!(a.converged, b.converged);
        prop_assert_eq!(a.graph.dump(), b.graph.dump());
    }

    #[test]
    fn linear_wls_satisfies_normal_equations(seed in 0u64..500) {
        let (net, x, ms) = random_instance(seed, 8, 4, &placement(3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = if seed % 2 == 0 { x } else { random_state(&mut rng, &net, 0.1) };
        let sys = linearize(&net, &ms, &point);
        let dx = solve_linear_wls(&sys).unwrap();
        let res = sys.normal_residual(&dx).amax();
        let rhs = sys.normal_residual(&vec![0.0; sys.dim]).amax();
        prop_assert!(res <= 1e-10 * rhs, "{res:e} vs {rhs:e}");
    }

    #[test]
    fn converging_gnbp_tracks_linear_wls(seed in prop_oneof![Just(93u64), Just(290), 0u64..500]) {
        let (net, x, ms) = random_instance(seed, 6, 3, &placement(3.0));
        let cfg = SolverConfig {
            start: StartMode::Warm(x.add(&vec![0.01; net.state_dim()])),
            nu_max: 4,
            ..SolverConfig::default()
        };
        let res = solve(&net, &ms, &cfg).unwrap();
        prop_assume!(res.converged);
        let mut point = initial_state(&net, &cfg.start, 0.0, cfg.seed);
        for r in &res.records {
            let oracle = solve_linear_wls(&linearize(&net, &ms, &point)).unwrap();
            let diff = r.increment.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 10.0 * cfg.epsilon_at(r.nu), "nu {}: {diff:e}", r.nu);
            point = point.add(&r.increment);
        }
    }
}

#[test]
fn variance_scaling_keeps_bpbdt_argmax() {
    let (net, x, ms) = random_instance(11, 8, 4, &placement(3.0));
    let cfg = SolverConfig {
        start: StartMode::Warm(x),
        ..SolverConfig::default()
    };
    let base = bp_bdt(&solve(&net, &ms, &cfg).unwrap().graph, f64::INFINITY);
    let mut scaled = ms.clone();
    for m in scaled.measurements.iter_mut() {
        m.variance *= 4.0;
    }
    let other = bp_bdt(&solve(&net, &scaled, &cfg).unwrap().graph, f64::INFINITY);
    assert_eq!(base.argmax, other.argmax);
    assert!((other.statistic * 4.0 - base.statistic).abs() <= 1e-6 * base.statistic);
}

/// A 20σ bad measurement lifts the median statistic at least tenfold above
/// the 95th percentile of clean runs (inner loops converged).
#[test]
fn bpbdt_separates_bad_data() {
    let cfg = ExperimentConfig {
        config_count: 100,
        ..Preset::Fig7.config()
    };
    let result = run_batch(&cfg).unwrap();
    let clean: Vec<f64> = result
        .configs
        .iter()
        .filter(|c| c.rd_converged == Some(true))
        .filter_map(|c| c.clean_bpbdt)
        .collect();
    let bad: Vec<f64> = result
        .configs
        .iter()
        .filter(|c| c.bad_converged == Some(true))
        .filter_map(|c| c.bpbdt_stat)
        .collect();
    let p95 = quantile(&clean, 0.95).unwrap();
    let median = quantile(&bad, 0.5).unwrap();
    assert!(
        median >= 10.0 * p95,
        "median with bad data {median:.1} vs clean 95th percentile {p95:.1} over {} / {} runs",
        bad.len(),
        clean.len()
    );
}

#[test]
fn wls_improves_on_flat_start() {
    let cfg = ExperimentConfig {
        case: "ieee14".into(),
        placement: PlacementConfig {
            gamma: 3.0,
            pmu_count: 3,
            pmu_currents: false,
            ..PlacementConfig::default()
        },
        schedules: Vec::new(),
        config_count: 30,
        ..ExperimentConfig::default()
    };
    let ctx = gnbp::experiments::BatchContext::new(&cfg).unwrap();
    let result = run_batch(&cfg).unwrap();
    let mut checked = 0;
    for c in result.configs.iter().filter(|c| c.wls_converged == Some(true)) {
        let (ms, _) =
            gnbp::measurement::synthesize_observable(&ctx.net, &ctx.x_exact, &cfg.placement, c.seed, 100).unwrap();
        let flat = initial_state(&ctx.net, &StartMode::default(), 0.0, c.seed);
        assert!(c.wrss_wls.unwrap() <= wrss(&ctx.net, &ms, &flat));
        checked += 1;
    }
    assert!(checked > 0);
}
