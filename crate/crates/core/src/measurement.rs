//! Measurement kinds, their functions `h_i(x)` and analytic Jacobian rows,
//! and synthesis of noisy measurement sets from an exact state.
//!
//! Branch quantities are computed from the complex end current
//! `I = y_oo·V_o + y_ot·V_t` and its partial derivatives with respect to the
//! four polar state variables, so every kind shares one derivative path.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkModel;
use crate::power_flow::StateVector;
use crate::rng::{derive_seed, stream};

/// Branch ends carrying less current than this (p.u.) get no current
/// measurements: the magnitude and angle derivatives are singular at zero.
pub const MIN_CURRENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    ActivePowerFlow,
    ReactivePowerFlow,
    ActiveInjection,
    ReactiveInjection,
    LineCurrentMagnitude,
    VoltageMagnitude,
    PmuVoltageAngle,
    PmuVoltageMagnitude,
    PmuCurrentAngle,
    PmuCurrentMagnitude,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; 10] = [
        MeasurementKind::ActivePowerFlow,
        MeasurementKind::ReactivePowerFlow,
        MeasurementKind::ActiveInjection,
        MeasurementKind::ReactiveInjection,
        MeasurementKind::LineCurrentMagnitude,
        MeasurementKind::VoltageMagnitude,
        MeasurementKind::PmuVoltageAngle,
        MeasurementKind::PmuVoltageMagnitude,
        MeasurementKind::PmuCurrentAngle,
        MeasurementKind::PmuCurrentMagnitude,
    ];

    /// Direct kinds measure a single state variable.
    pub fn is_direct(self) -> bool {
        matches!(
            self,
            MeasurementKind::VoltageMagnitude
                | MeasurementKind::PmuVoltageAngle
                | MeasurementKind::PmuVoltageMagnitude
        )
    }

    pub fn on_branch(self) -> bool {
        matches!(
            self,
            MeasurementKind::ActivePowerFlow
                | MeasurementKind::ReactivePowerFlow
                | MeasurementKind::LineCurrentMagnitude
                | MeasurementKind::PmuCurrentAngle
                | MeasurementKind::PmuCurrentMagnitude
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasurementKind::ActivePowerFlow => "active_power_flow",
            MeasurementKind::ReactivePowerFlow => "reactive_power_flow",
            MeasurementKind::ActiveInjection => "active_injection",
            MeasurementKind::ReactiveInjection => "reactive_injection",
            MeasurementKind::LineCurrentMagnitude => "line_current_magnitude",
            MeasurementKind::VoltageMagnitude => "voltage_magnitude",
            MeasurementKind::PmuVoltageAngle => "pmu_voltage_angle",
            MeasurementKind::PmuVoltageMagnitude => "pmu_voltage_magnitude",
            MeasurementKind::PmuCurrentAngle => "pmu_current_angle",
            MeasurementKind::PmuCurrentMagnitude => "pmu_current_magnitude",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchEnd {
    From,
    To,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    Bus(usize),
    Branch { branch: usize, end: BranchEnd },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceClass {
    Legacy,
    Pmu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub location: Location,
    pub z: f64,
    pub variance: f64,
    pub device_class: DeviceClass,
}

/// Serialized form of a measurement inside a case file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub kind: MeasurementKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bus: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<BranchEnd>,
    pub z: f64,
    pub variance: f64,
    pub class: DeviceClass,
}

impl Measurement {
    pub fn validate(&self, net: &NetworkModel, index: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidMeasurement { index, reason });
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return fail(format!("variance must be positive, got {}", self.variance));
        }
        if !self.z.is_finite() {
            return fail("measured value is not finite".into());
        }
        match (self.kind.on_branch(), self.location) {
            (true, Location::Branch { branch, .. }) if branch < net.branches().len() => Ok(()),
            (false, Location::Bus(bus)) if bus < net.bus_count() => Ok(()),
            (true, _) => fail(format!("{} requires a valid branch location", self.kind.name())),
            (false, _) => fail(format!("{} requires a valid bus location", self.kind.name())),
        }
    }

    fn to_record(&self) -> MeasurementRecord {
        let (bus, branch, end) = match self.location {
            Location::Bus(b) => (Some(b), None, None),
            Location::Branch { branch, end } => (None, Some(branch), Some(end)),
        };
        MeasurementRecord {
            kind: self.kind,
            bus,
            branch,
            end,
            z: self.z,
            variance: self.variance,
            class: self.device_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementSet {
    pub measurements: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn new(net: &NetworkModel, measurements: Vec<Measurement>) -> Result<Self> {
        for (i, m) in measurements.iter().enumerate() {
            m.validate(net, i)?;
        }
        let set = MeasurementSet { measurements };
        if set.len() <= net.state_dim() {
            log::warn!(
                "measurement set is not overdetermined: k = {} <= n = {}",
                set.len(),
                net.state_dim()
            );
        }
        Ok(set)
    }

    pub fn from_records(net: &NetworkModel, records: Vec<MeasurementRecord>) -> Result<Self> {
        let mut out = Vec::with_capacity(records.len());
        for (index, rec) in records.into_iter().enumerate() {
            let location = if rec.kind.on_branch() {
                match (rec.branch, rec.end) {
                    (Some(branch), Some(end)) => Location::Branch { branch, end },
                    _ => {
                        return Err(Error::InvalidMeasurement {
                            index,
                            reason: format!("{} needs `branch` and `end`", rec.kind.name()),
                        })
                    }
                }
            } else {
                match rec.bus {
                    Some(bus) => Location::Bus(bus),
                    None => {
                        return Err(Error::InvalidMeasurement {
                            index,
                            reason: format!("{} needs `bus`", rec.kind.name()),
                        })
                    }
                }
            };
            out.push(Measurement {
                kind: rec.kind,
                location,
                z: rec.z,
                variance: rec.variance,
                device_class: rec.class,
            });
        }
        Self::new(net, out)
    }

    pub fn to_records(&self) -> Vec<MeasurementRecord> {
        self.measurements.iter().map(Measurement::to_record).collect()
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Measurement> {
        self.measurements.iter()
    }

    /// Copy without the measurement at `index`.
    pub fn without(&self, index: usize) -> MeasurementSet {
        let mut measurements = self.measurements.clone();
        measurements.remove(index);
        MeasurementSet { measurements }
    }
}

/// Sparse Jacobian row: `(state index, ∂h/∂x)` sorted by state index.
pub type JacobianRow = Vec<(usize, f64)>;

pub fn evaluate_h(net: &NetworkModel, m: &Measurement, x: &StateVector) -> f64 {
    evaluate(net, m, x, false).0
}

pub fn jacobian_row(net: &NetworkModel, m: &Measurement, x: &StateVector) -> JacobianRow {
    evaluate(net, m, x, true).1
}

/// Value and Jacobian row together.
pub fn evaluate_with_jacobian(
    net: &NetworkModel,
    m: &Measurement,
    x: &StateVector,
) -> (f64, JacobianRow) {
    evaluate(net, m, x, true)
}

fn phasor(x: &StateVector, bus: usize) -> Complex64 {
    Complex64::from_polar(x.v[bus], x.theta[bus])
}

/// ∂V_k/∂θ_k and ∂V_k/∂|V_k| for the complex bus voltage.
fn phasor_partials(x: &StateVector, bus: usize) -> (Complex64, Complex64) {
    let unit = Complex64::from_polar(1.0, x.theta[bus]);
    (Complex64::i() * phasor(x, bus), unit)
}

fn evaluate(
    net: &NetworkModel,
    m: &Measurement,
    x: &StateVector,
    with_jacobian: bool,
) -> (f64, JacobianRow) {
    use MeasurementKind::*;
    match (m.kind, m.location) {
        (VoltageMagnitude | PmuVoltageMagnitude, Location::Bus(s)) => {
            (x.v[s], vec![(net.magnitude_index(s), 1.0)])
        }
        (PmuVoltageAngle, Location::Bus(s)) => (x.theta[s], vec![(net.angle_index(s), 1.0)]),
        (ActiveInjection | ReactiveInjection, Location::Bus(i)) => {
            injection(net, m.kind == ActiveInjection, i, x, with_jacobian)
        }
        (kind, Location::Branch { branch, end }) => {
            branch_quantity(net, kind, branch, end, x, with_jacobian)
        }
        (kind, loc) => panic!("measurement {kind:?} at {loc:?} was not validated"),
    }
}

fn injection(
    net: &NetworkModel,
    active: bool,
    i: usize,
    x: &StateVector,
    with_jacobian: bool,
) -> (f64, JacobianRow) {
    let vi = phasor(x, i);
    let row = net.ybus_row(i);
    let current: Complex64 = row.iter().map(|&(j, y)| y * phasor(x, j)).sum();
    let s = vi * current.conj();
    let pick = |c: Complex64| if active { c.re } else { c.im };
    if !with_jacobian {
        return (pick(s), Vec::new());
    }
    let mut angles = Vec::with_capacity(row.len());
    let mut mags = Vec::with_capacity(row.len());
    for &(j, y) in row {
        let (dth, dv) = phasor_partials(x, j);
        let (mut ds_th, mut ds_v) = (vi * (y * dth).conj(), vi * (y * dv).conj());
        if j == i {
            ds_th += dth * current.conj();
            ds_v += dv * current.conj();
        }
        angles.push((net.angle_index(j), pick(ds_th)));
        mags.push((net.magnitude_index(j), pick(ds_v)));
    }
    angles.extend(mags);
    (pick(s), angles)
}

fn branch_quantity(
    net: &NetworkModel,
    kind: MeasurementKind,
    branch: usize,
    end: BranchEnd,
    x: &StateVector,
    with_jacobian: bool,
) -> (f64, JacobianRow) {
    use MeasurementKind::*;
    let br = &net.branches()[branch];
    let (own, other, tp) = match end {
        BranchEnd::From => (br.from_bus, br.to_bus, *net.two_port(branch)),
        BranchEnd::To => (br.to_bus, br.from_bus, net.two_port(branch).swapped()),
    };
    let vo = phasor(x, own);
    let vt = phasor(x, other);
    let current = tp.yff * vo + tp.yft * vt;
    let power = vo * current.conj();

    let value = match kind {
        ActivePowerFlow => power.re,
        ReactivePowerFlow => power.im,
        LineCurrentMagnitude | PmuCurrentMagnitude => current.norm(),
        PmuCurrentAngle => current.im.atan2(current.re),
        _ => unreachable!("bus quantity routed to branch evaluation"),
    };
    if !with_jacobian {
        return (value, Vec::new());
    }

    let (dvo_th, dvo_v) = phasor_partials(x, own);
    let (dvt_th, dvt_v) = phasor_partials(x, other);
    // (state index, dV_own, dI)
    let partials = [
        (net.angle_index(own), dvo_th, tp.yff * dvo_th),
        (net.angle_index(other), Complex64::new(0.0, 0.0), tp.yft * dvt_th),
        (net.magnitude_index(own), dvo_v, tp.yff * dvo_v),
        (net.magnitude_index(other), Complex64::new(0.0, 0.0), tp.yft * dvt_v),
    ];
    let mag2 = current.norm_sqr();
    let mag = mag2.sqrt();
    let mut row: JacobianRow = partials
        .iter()
        .map(|&(idx, dvo, di)| {
            let d = match kind {
                ActivePowerFlow => (dvo * current.conj() + vo * di.conj()).re,
                ReactivePowerFlow => (dvo * current.conj() + vo * di.conj()).im,
                LineCurrentMagnitude | PmuCurrentMagnitude => {
                    (current.re * di.re + current.im * di.im) / mag
                }
                PmuCurrentAngle => (current.re * di.im - current.im * di.re) / mag2,
                _ => unreachable!(),
            };
            (idx, d)
        })
        .collect();
    row.sort_by_key(|&(idx, _)| idx);
    (value, row)
}

/// Dense `k × n` Jacobian, one row per measurement.
pub fn dense_jacobian(net: &NetworkModel, ms: &MeasurementSet, x: &StateVector) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(ms.len(), net.state_dim());
    for (r, m) in ms.iter().enumerate() {
        for (c, v) in jacobian_row(net, m, x) {
            jac[(r, c)] += v;
        }
    }
    jac
}

/// Numerical rank of the Jacobian augmented with the slack-angle reference row.
pub fn observability_rank(net: &NetworkModel, ms: &MeasurementSet, x: &StateVector) -> usize {
    let n = net.state_dim();
    let mut jac = DMatrix::zeros(ms.len() + 1, n);
    jac.view_mut((0, 0), (ms.len(), n))
        .copy_from(&dense_jacobian(net, ms, x));
    jac[(ms.len(), net.angle_index(net.slack()))] = 1.0;
    numerical_rank(&jac)
}

/// Rank of a row-normalized copy of `jac` by column-pivoted QR.
pub fn numerical_rank(jac: &DMatrix<f64>) -> usize {
    let n = jac.ncols();
    let mut jac = jac.clone();
    for mut row in jac.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let qr = jac.col_piv_qr();
    let r = qr.r();
    let scale = r[(0, 0)].abs();
    if scale == 0.0 {
        return 0;
    }
    (0..r.nrows().min(n))
        .filter(|&i| r[(i, i)].abs() > 1e-9 * scale)
        .count()
}

pub fn check_observable(net: &NetworkModel, ms: &MeasurementSet, x: &StateVector) -> Result<()> {
    let rank = observability_rank(net, ms, x);
    if rank < net.state_dim() {
        return Err(Error::Unobservable {
            rank,
            required: net.state_dim(),
        });
    }
    Ok(())
}

/// Placement and variance policy for synthetic measurement sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementConfig {
    /// Legacy redundancy: `round(gamma·n)` legacy measurements are drawn.
    pub gamma: f64,
    pub pmu_count: usize,
    pub legacy_variance: f64,
    pub pmu_variance: f64,
    /// PMUs also report the current phasor of every incident branch end.
    pub pmu_currents: bool,
    /// Skip the noise draw; measured values equal `h(x_exact)`.
    pub noiseless: bool,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            gamma: 3.0,
            pmu_count: 0,
            legacy_variance: 1e-4,
            pmu_variance: 1e-10,
            pmu_currents: true,
            noiseless: false,
        }
    }
}

fn branch_current(net: &NetworkModel, branch: usize, end: BranchEnd, x: &StateVector) -> f64 {
    let m = Measurement {
        kind: MeasurementKind::LineCurrentMagnitude,
        location: Location::Branch { branch, end },
        z: 0.0,
        variance: 1.0,
        device_class: DeviceClass::Legacy,
    };
    evaluate_h(net, &m, x)
}

/// Every legacy measurement that can be placed on the network, in a fixed order.
pub fn legacy_candidates(net: &NetworkModel, x_exact: &StateVector) -> Vec<(MeasurementKind, Location)> {
    use MeasurementKind::*;
    let mut pool = Vec::new();
    for branch in 0..net.branches().len() {
        for end in [BranchEnd::From, BranchEnd::To] {
            let loc = Location::Branch { branch, end };
            pool.push((ActivePowerFlow, loc));
            pool.push((ReactivePowerFlow, loc));
            if branch_current(net, branch, end, x_exact) >= MIN_CURRENT {
                pool.push((LineCurrentMagnitude, loc));
            }
        }
    }
    for bus in 0..net.bus_count() {
        pool.push((ActiveInjection, Location::Bus(bus)));
        pool.push((ReactiveInjection, Location::Bus(bus)));
        pool.push((VoltageMagnitude, Location::Bus(bus)));
    }
    pool
}

/// Draws a random placement and noisy values `z = h(x_exact) + e`, `e ~ N(0, v)`.
///
/// PMUs are placed on distinct uniformly drawn buses; each one measures the
/// bus voltage phasor and, if enabled, the current phasor of every incident
/// branch end.
pub fn synthesize_measurements(
    net: &NetworkModel,
    x_exact: &StateVector,
    config: &PlacementConfig,
    seed: u64,
) -> Result<MeasurementSet> {
    use MeasurementKind::*;
    if !(config.gamma >= 0.0) {
        return Err(Error::InvalidConfig("gamma must be non-negative".into()));
    }
    if !(config.legacy_variance > 0.0 && config.pmu_variance > 0.0) {
        return Err(Error::InvalidConfig("variances must be positive".into()));
    }
    if config.pmu_count > net.bus_count() {
        return Err(Error::InvalidConfig(format!(
            "{} PMUs requested for {} buses",
            config.pmu_count,
            net.bus_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = legacy_candidates(net, x_exact);
    let k_legacy = (config.gamma * net.state_dim() as f64).round() as usize;
    if k_legacy > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "redundancy {} needs {k_legacy} legacy measurements but only {} candidates exist",
            config.gamma,
            pool.len()
        )));
    }
    let mut picks = sample(&mut rng, pool.len(), k_legacy).into_vec();
    picks.sort_unstable();

    let mut placed: Vec<(MeasurementKind, Location, DeviceClass)> = picks
        .into_iter()
        .map(|p| (pool[p].0, pool[p].1, DeviceClass::Legacy))
        .collect();

    let mut pmu_buses = sample(&mut rng, net.bus_count(), config.pmu_count).into_vec();
    pmu_buses.sort_unstable();
    for bus in pmu_buses {
        placed.push((PmuVoltageMagnitude, Location::Bus(bus), DeviceClass::Pmu));
        placed.push((PmuVoltageAngle, Location::Bus(bus), DeviceClass::Pmu));
        if !config.pmu_currents {
            continue;
        }
        for (branch, br) in net.branches().iter().enumerate() {
            let end = if br.from_bus == bus {
                BranchEnd::From
            } else if br.to_bus == bus {
                BranchEnd::To
            } else {
                continue;
            };
            if branch_current(net, branch, end, x_exact) < MIN_CURRENT {
                continue;
            }
            let loc = Location::Branch { branch, end };
            placed.push((PmuCurrentMagnitude, loc, DeviceClass::Pmu));
            placed.push((PmuCurrentAngle, loc, DeviceClass::Pmu));
        }
    }

    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let measurements = placed
        .into_iter()
        .map(|(kind, location, device_class)| {
            let variance = match device_class {
                DeviceClass::Legacy => config.legacy_variance,
                DeviceClass::Pmu => config.pmu_variance,
            };
            let mut m = Measurement {
                kind,
                location,
                z: 0.0,
                variance,
                device_class,
            };
            let noise = standard.sample(&mut rng) * variance.sqrt();
            m.z = evaluate_h(net, &m, x_exact) + if config.noiseless { 0.0 } else { noise };
            m
        })
        .collect();
    let set = MeasurementSet::new(net, measurements)?;
    check_observable(net, &set, x_exact)?;
    Ok(set)
}

/// Redraws the placement until it is observable. Attempt 0 uses `seed`
/// itself; later attempts use derived seeds. Returns the set and the attempt.
pub fn synthesize_observable(
    net: &NetworkModel,
    x_exact: &StateVector,
    config: &PlacementConfig,
    seed: u64,
    max_attempts: usize,
) -> Result<(MeasurementSet, usize)> {
    let mut last = None;
    for attempt in 0..max_attempts {
        let s = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, stream::PLACEMENT, attempt as u64)
        };
        match synthesize_measurements(net, x_exact, config, s) {
            Ok(ms) => return Ok((ms, attempt)),
            Err(e @ Error::Unobservable { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::InvalidConfig("no placement attempts allowed".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::three_bus;

    fn meas(kind: MeasurementKind, location: Location) -> Measurement {
        Measurement {
            kind,
            location,
            z: 0.0,
            variance: 1e-4,
            device_class: DeviceClass::Legacy,
        }
    }

    #[test]
    fn direct_measurements_are_identity() {
        let net = three_bus();
        let x = StateVector {
            theta: vec![0.0, -0.1, 0.05],
            v: vec![1.0, 0.97, 1.02],
        };
        let m = meas(MeasurementKind::VoltageMagnitude, Location::Bus(1));
        assert_eq!(evaluate_h(&net, &m, &x), 0.97);
        assert_eq!(jacobian_row(&net, &m, &x), vec![(net.magnitude_index(1), 1.0)]);
        let m = meas(MeasurementKind::PmuVoltageAngle, Location::Bus(2));
        assert_eq!(evaluate_h(&net, &m, &x), 0.05);
        assert_eq!(jacobian_row(&net, &m, &x), vec![(net.angle_index(2), 1.0)]);
    }

    #[test]
    fn no_active_flow_at_flat_state() {
        let net = three_bus();
        let x = StateVector::flat(3);
        for end in [BranchEnd::From, BranchEnd::To] {
            let m = meas(MeasurementKind::ActivePowerFlow, Location::Branch { branch: 0, end });
            assert!(evaluate_h(&net, &m, &x).abs() < 1e-15);
        }
    }

    #[test]
    fn branch_rows_touch_only_terminal_buses() {
        let net = three_bus();
        let x = StateVector {
            theta: vec![0.0, -0.1, 0.05],
            v: vec![1.0, 0.97, 1.02],
        };
        let m = meas(
            MeasurementKind::PmuCurrentAngle,
            Location::Branch { branch: 1, end: BranchEnd::To },
        );
        let cols: Vec<usize> = jacobian_row(&net, &m, &x).iter().map(|e| e.0).collect();
        assert_eq!(cols, vec![0, 2, 3, 5]);
    }

    #[test]
    fn rejects_mismatched_location() {
        let net = three_bus();
        let m = meas(MeasurementKind::ActivePowerFlow, Location::Bus(0));
        assert!(m.validate(&net, 0).is_err());
        let mut m = meas(MeasurementKind::VoltageMagnitude, Location::Bus(0));
        m.variance = 0.0;
        assert!(m.validate(&net, 0).is_err());
    }

    #[test]
    fn noiseless_synthesis_reproduces_h() {
        let net = three_bus();
        let x = StateVector {
            theta: vec![0.0, -0.05, -0.08],
            v: vec![1.02, 0.99, 0.98],
        };
        let cfg = PlacementConfig {
            gamma: 2.0,
            pmu_count: 1,
            noiseless: true,
            ..Default::default()
        };
        let ms = synthesize_measurements(&net, &x, &cfg, 11).unwrap();
        assert_eq!(ms.iter().filter(|m| m.device_class == DeviceClass::Legacy).count(), 12);
        for m in ms.iter() {
            assert_eq!(m.z, evaluate_h(&net, m, &x));
        }
    }

    #[test]
    fn pmu_current_phasors_can_be_left_out() {
        let net = three_bus();
        let x = StateVector {
            theta: vec![0.0, -0.05, -0.08],
            v: vec![1.02, 0.99, 0.98],
        };
        let mut cfg = PlacementConfig {
            pmu_count: 3,
            ..Default::default()
        };
        let with = synthesize_measurements(&net, &x, &cfg, 3).unwrap();
        assert!(with.iter().any(|m| m.kind == MeasurementKind::PmuCurrentAngle));
        cfg.pmu_currents = false;
        let without = synthesize_measurements(&net, &x, &cfg, 3).unwrap();
        let pmu: Vec<_> = without.iter().filter(|m| m.device_class == DeviceClass::Pmu).collect();
        assert_eq!(pmu.len(), 6);
        assert!(pmu.iter().all(|m| m.kind.is_direct()));
    }

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        let net = three_bus();
        let x = StateVector {
            theta: vec![0.0, -0.05, -0.08],
            v: vec![1.02, 0.99, 0.98],
        };
        let cfg = PlacementConfig::default();
        let a = synthesize_measurements(&net, &x, &cfg, 5).unwrap();
        let b = synthesize_measurements(&net, &x, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = synthesize_measurements(&net, &x, &cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unobservable_placement_is_rejected() {
        let net = three_bus();
        let x = StateVector::flat(3);
        // one voltage magnitude cannot determine six states
        let ms = MeasurementSet::new(&net, vec![meas(MeasurementKind::VoltageMagnitude, Location::Bus(0))]).unwrap();
        assert!(matches!(check_observable(&net, &ms, &x), Err(Error::Unobservable { .. })));
    }
}
