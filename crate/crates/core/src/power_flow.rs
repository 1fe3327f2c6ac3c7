//! Newton–Raphson AC power flow in polar coordinates.
//!
//! Used to produce the exact operating point from which measurements are
//! synthesized. The Jacobian is assembled from the injection rows of
//! [`crate::measurement::jacobian_row`], so power flow and estimation share
//! one set of derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{
    evaluate_with_jacobian, DeviceClass, Location, Measurement, MeasurementKind,
};
use crate::network::{BusKind, NetworkModel};

/// Bus voltage angles (rad) and magnitudes (p.u.), the state `x = [θ, V]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
}

impl StateVector {
    /// θ = 0, V = 1 p.u. everywhere.
    pub fn flat(buses: usize) -> Self {
        StateVector {
            theta: vec![0.0; buses],
            v: vec![1.0; buses],
        }
    }

    pub fn bus_count(&self) -> usize {
        self.theta.len()
    }

    /// Stacked `[θ, V]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.v).copied().collect()
    }

    pub fn from_slice(x: &[f64]) -> Self {
        let n = x.len() / 2;
        StateVector {
            theta: x[..n].to_vec(),
            v: x[n..].to_vec(),
        }
    }

    /// `x + Δx` for a stacked increment.
    pub fn add(&self, delta: &[f64]) -> Self {
        let n = self.bus_count();
        StateVector {
            theta: self.theta.iter().zip(&delta[..n]).map(|(a, d)| a + d).collect(),
            v: self.v.iter().zip(&delta[n..]).map(|(a, d)| a + d).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &StateVector) -> f64 {
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Scheduled injections and voltage set-points for a power-flow solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSpec {
    pub active: Vec<f64>,
    pub reactive: Vec<f64>,
    /// `Some` for slack and generator buses.
    pub voltage_setpoint: Vec<Option<f64>>,
    pub slack_angle: f64,
}

impl PowerFlowSpec {
    /// Set-points as stored in the case file.
    pub fn from_network(net: &NetworkModel) -> Self {
        let buses = net.buses();
        PowerFlowSpec {
            active: buses.iter().map(|b| b.active_injection).collect(),
            reactive: buses.iter().map(|b| b.reactive_injection).collect(),
            voltage_setpoint: buses
                .iter()
                .map(|b| match b.kind {
                    BusKind::Load => None,
                    _ => Some(b.voltage_setpoint.unwrap_or(1.0)),
                })
                .collect(),
            slack_angle: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub state: StateVector,
    pub iterations: usize,
    /// Largest absolute power mismatch over the scheduled equations (p.u.).
    pub mismatch: f64,
}

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20;

fn injection_measurement(kind: MeasurementKind, bus: usize) -> Measurement {
    Measurement {
        kind,
        location: Location::Bus(bus),
        z: 0.0,
        variance: 1.0,
        device_class: DeviceClass::Legacy,
    }
}

/// Newton starting point: zero angles except the slack, unit magnitudes
/// except at voltage-controlled buses.
pub fn initial_point(net: &NetworkModel, spec: &PowerFlowSpec) -> StateVector {
    let mut x = StateVector::flat(net.bus_count());
    x.theta[net.slack()] = spec.slack_angle;
    for (v, setpoint) in x.v.iter_mut().zip(&spec.voltage_setpoint) {
        if let Some(vs) = setpoint {
            *v = *vs;
        }
    }
    x
}

pub fn solve_power_flow(
    net: &NetworkModel,
    spec: &PowerFlowSpec,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig("power-flow tolerance must be positive".into()));
    }
    let nb = net.bus_count();
    let slack = net.slack();
    let angle_buses: Vec<usize> = (0..nb).filter(|&b| b != slack).collect();
    let magnitude_buses: Vec<usize> = (0..nb).filter(|&b| spec.voltage_setpoint[b].is_none()).collect();
    if angle_buses.len() != nb - 1 || spec.active.len() != nb || spec.reactive.len() != nb {
        return Err(Error::InvalidConfig("power-flow set-points do not cover every bus".into()));
    }

    // unknown column for each state index, if any
    let mut column = vec![None; 2 * nb];
    for (c, &b) in angle_buses.iter().enumerate() {
        column[net.angle_index(b)] = Some(c);
    }
    for (c, &b) in magnitude_buses.iter().enumerate() {
        column[net.magnitude_index(b)] = Some(angle_buses.len() + c);
    }
    let dim = angle_buses.len() + magnitude_buses.len();

    let mut x = initial_point(net, spec);

    let equations: Vec<(MeasurementKind, usize, f64)> = angle_buses
        .iter()
        .map(|&b| (MeasurementKind::ActiveInjection, b, spec.active[b]))
        .chain(
            magnitude_buses
                .iter()
                .map(|&b| (MeasurementKind::ReactiveInjection, b, spec.reactive[b])),
        )
        .collect();

    let mut iterations = 0;
    loop {
        let mut mismatch = DVector::zeros(dim);
        let mut jac = DMatrix::zeros(dim, dim);
        for (r, &(kind, bus, target)) in equations.iter().enumerate() {
            let (value, row) = evaluate_with_jacobian(net, &injection_measurement(kind, bus), &x);
            mismatch[r] = target - value;
            for (idx, d) in row {
                if let Some(c) = column[idx] {
                    jac[(r, c)] += d;
                }
            }
        }
        let worst = mismatch.amax();
        if worst <= tol {
            return Ok(PowerFlowSolution {
                state: x,
                iterations,
                mismatch: worst,
            });
        }
        if iterations == max_iter || !worst.is_finite() {
            return Err(Error::PowerFlowDiverged {
                iterations,
                mismatch: worst,
            });
        }
        let step = jac
            .lu()
            .solve(&mismatch)
            .ok_or(Error::SingularJacobian("power flow"))?;
        for (c, &b) in angle_buses.iter().enumerate() {
            x.theta[b] += step[c];
        }
        for (c, &b) in magnitude_buses.iter().enumerate() {
            x.v[b] += step[angle_buses.len() + c];
        }
        iterations += 1;
    }
}
