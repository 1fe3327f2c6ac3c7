//! Small synthetic networks for tests and examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::measurement::{DeviceClass, Location, Measurement, MeasurementKind, MeasurementSet};
use crate::network::{Branch, Bus, BusKind, NetworkModel};
use crate::power_flow::StateVector;

fn bus(id: usize, kind: BusKind, p: f64, q: f64, vset: Option<f64>) -> Bus {
    Bus {
        id,
        kind,
        shunt_conductance: 0.0,
        shunt_susceptance: 0.0,
        active_injection: p,
        reactive_injection: q,
        voltage_setpoint: vset,
    }
}

fn line(from: usize, to: usize, r: f64, x: f64, b: f64) -> Branch {
    Branch {
        from_bus: from,
        to_bus: to,
        series_resistance: r,
        series_reactance: x,
        charging_susceptance: b,
        tap_ratio: 1.0,
        phase_shift: 0.0,
    }
}

/// Lossless two-bus line.
pub fn two_bus() -> NetworkModel {
    NetworkModel::new(
        100.0,
        vec![
            bus(0, BusKind::Slack, 0.0, 0.0, Some(1.0)),
            bus(1, BusKind::Load, 0.0, 0.0, None),
        ],
        vec![line(0, 1, 0.0, 0.1, 0.0)],
    )
    .expect("valid two-bus network")
}

/// Three buses with branches 1–2 and 1–3; bus 1 (index 0) is the slack.
pub fn three_bus() -> NetworkModel {
    NetworkModel::new(
        100.0,
        vec![
            bus(0, BusKind::Slack, 0.0, 0.0, Some(1.02)),
            bus(1, BusKind::Load, -0.3, -0.1, None),
            bus(2, BusKind::Load, -0.2, -0.05, None),
        ],
        vec![line(0, 1, 0.01, 0.1, 0.02), line(0, 2, 0.02, 0.15, 0.01)],
    )
    .expect("valid three-bus network")
}

/// Measurements M_P12, M_P3, M_V1, M_V2 on [`three_bus`], values taken at `x`.
pub fn example_measurements(net: &NetworkModel, x: &StateVector) -> MeasurementSet {
    use crate::measurement::{evaluate_h, BranchEnd};
    let placed = [
        (
            MeasurementKind::ActivePowerFlow,
            Location::Branch { branch: 0, end: BranchEnd::From },
        ),
        (MeasurementKind::ActiveInjection, Location::Bus(2)),
        (MeasurementKind::VoltageMagnitude, Location::Bus(0)),
        (MeasurementKind::VoltageMagnitude, Location::Bus(1)),
    ];
    let measurements = placed
        .into_iter()
        .map(|(kind, location)| {
            let mut m = Measurement {
                kind,
                location,
                z: 0.0,
                variance: 1e-4,
                device_class: DeviceClass::Legacy,
            };
            m.z = evaluate_h(net, &m, x);
            m
        })
        .collect();
    MeasurementSet::new(net, measurements).expect("valid example measurements")
}

/// A redundant, observable set on [`three_bus`]: flows at both branches,
/// all voltage magnitudes and the injections at buses 2 and 3.
pub fn observable_measurements(net: &NetworkModel, x: &StateVector) -> MeasurementSet {
    use crate::measurement::{evaluate_h, BranchEnd};
    let mut placed = Vec::new();
    for branch in 0..2 {
        for kind in [MeasurementKind::ActivePowerFlow, MeasurementKind::ReactivePowerFlow] {
            placed.push((kind, Location::Branch { branch, end: BranchEnd::From }));
        }
    }
    for bus in 0..3 {
        placed.push((MeasurementKind::VoltageMagnitude, Location::Bus(bus)));
    }
    for bus in 1..3 {
        placed.push((MeasurementKind::ActiveInjection, Location::Bus(bus)));
    }
    let measurements = placed
        .into_iter()
        .map(|(kind, location)| {
            let mut m = Measurement {
                kind,
                location,
                z: 0.0,
                variance: 1e-4,
                device_class: DeviceClass::Legacy,
            };
            m.z = evaluate_h(net, &m, x);
            m
        })
        .collect();
    MeasurementSet::new(net, measurements).expect("valid measurements")
}

/// Random connected network: a random spanning tree plus `extra` chords.
/// Bus 0 is the slack; one in four other buses is a generator.
pub fn random_network(seed: u64, buses: usize, extra: usize) -> NetworkModel {
    assert!(buses >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![bus(0, BusKind::Slack, 0.0, 0.0, Some(1.0 + rng.random_range(0.0..0.05)))];
    for id in 1..buses {
        if rng.random_bool(0.25) {
            nodes.push(bus(
                id,
                BusKind::Generator,
                rng.random_range(0.0..0.3),
                0.0,
                Some(rng.random_range(0.98..1.05)),
            ));
        } else {
            nodes.push(bus(
                id,
                BusKind::Load,
                -rng.random_range(0.0..0.3),
                -rng.random_range(0.0..0.1),
                None,
            ));
        }
    }
    let mut branches = Vec::new();
    let edge = |rng: &mut ChaCha8Rng, f: usize, t: usize| {
        let mut br = line(
            f,
            t,
            rng.random_range(0.005..0.05),
            rng.random_range(0.05..0.3),
            rng.random_range(0.0..0.05),
        );
        if rng.random_bool(0.15) {
            br.tap_ratio = rng.random_range(0.95..1.05);
        }
        br
    };
    for t in 1..buses {
        let f = rng.random_range(0..t);
        let br = edge(&mut rng, f, t);
        branches.push(br);
    }
    let mut added = 0;
    while added < extra && buses > 2 {
        let f = rng.random_range(0..buses);
        let t = rng.random_range(0..buses);
        if f == t {
            continue;
        }
        let br = edge(&mut rng, f, t);
        branches.push(br);
        added += 1;
    }
    NetworkModel::new(100.0, nodes, branches).expect("random network is valid by construction")
}

/// Random network with a solved operating point and a synthesized
/// observable measurement set. Unobservable placements are redrawn.
pub fn random_instance(
    seed: u64,
    buses: usize,
    extra: usize,
    placement: &crate::measurement::PlacementConfig,
) -> (NetworkModel, StateVector, MeasurementSet) {
    use crate::power_flow::{solve_power_flow, PowerFlowSpec};
    for attempt in 0..100u64 {
        let net = random_network(seed.wrapping_mul(1000).wrapping_add(attempt), buses, extra);
        let Ok(pf) = solve_power_flow(&net, &PowerFlowSpec::from_network(&net), 1e-12, 30) else {
            continue;
        };
        if let Ok(ms) = crate::measurement::synthesize_measurements(&net, &pf.state, placement, seed ^ attempt) {
            return (net, pf.state, ms);
        }
    }
    panic!("no observable random instance for seed {seed}");
}

/// A random state near the flat profile, slack angle 0.
pub fn random_state(rng: &mut impl Rng, net: &NetworkModel, spread: f64) -> StateVector {
    let n = net.bus_count();
    let mut x = StateVector {
        theta: (0..n).map(|_| rng.random_range(-spread..spread)).collect(),
        v: (0..n).map(|_| 1.0 + rng.random_range(-spread..spread) / 2.0).collect(),
    };
    x.theta[net.slack()] = 0.0;
    x
}
