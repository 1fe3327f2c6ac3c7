//! Bus/branch network model with two-port π branches.
//!
//! All electrical quantities are per-unit on `base_mva`; angles are radians.
//! A [`NetworkModel`] is immutable once built and carries a precomputed
//! bus admittance matrix in row-sparse form for injection functions.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{MeasurementRecord, MeasurementSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Shunt conductance (p.u.).
    #[serde(rename = "gs", default)]
    pub shunt_conductance: f64,
    /// Shunt susceptance (p.u.).
    #[serde(rename = "bs", default)]
    pub shunt_susceptance: f64,
    /// Scheduled net active injection, generation minus load (p.u.).
    #[serde(rename = "p", default)]
    pub active_injection: f64,
    /// Scheduled net reactive injection (p.u.); unused for voltage-controlled buses.
    #[serde(rename = "q", default)]
    pub reactive_injection: f64,
    /// Voltage magnitude set-point for slack and generator buses (p.u.).
    #[serde(rename = "vset", default, skip_serializing_if = "Option::is_none")]
    pub voltage_setpoint: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    #[serde(rename = "from")]
    pub from_bus: usize,
    #[serde(rename = "to")]
    pub to_bus: usize,
    #[serde(rename = "r")]
    pub series_resistance: f64,
    #[serde(rename = "x")]
    pub series_reactance: f64,
    /// Total line charging susceptance, split equally between the two ends.
    #[serde(rename = "b", default)]
    pub charging_susceptance: f64,
    #[serde(rename = "tap", default = "unit_tap")]
    pub tap_ratio: f64,
    #[serde(rename = "shift", default)]
    pub phase_shift: f64,
}

fn unit_tap() -> f64 {
    1.0
}

/// Entries of the branch two-port admittance matrix `[[yff, yft], [ytf, ytt]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPort {
    pub series: Complex64,
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

impl TwoPort {
    /// The same branch seen from the opposite end.
    pub fn swapped(&self) -> TwoPort {
        TwoPort {
            series: self.series,
            yff: self.ytt,
            yft: self.ytf,
            ytf: self.yft,
            ytt: self.yff,
        }
    }
}

/// π-model admittances with an off-nominal tap `t·e^{jφ}` on the from side.
pub fn branch_admittance(branch: &Branch) -> TwoPort {
    let series = Complex64::new(1.0, 0.0)
        / Complex64::new(branch.series_resistance, branch.series_reactance);
    let half_charging = Complex64::new(0.0, branch.charging_susceptance / 2.0);
    let tap = Complex64::from_polar(branch.tap_ratio, branch.phase_shift);
    let ytt = series + half_charging;
    TwoPort {
        series,
        yff: ytt / (branch.tap_ratio * branch.tap_ratio),
        yft: -series / tap.conj(),
        ytf: -series / tap,
        ytt,
    }
}

#[derive(Debug, Clone)]
pub struct NetworkModel {
    base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    slack: usize,
    two_ports: Vec<TwoPort>,
    /// Row `i` holds `(j, Y_ij)` sorted by `j`, diagonal included.
    ybus: Vec<Vec<(usize, Complex64)>>,
}

impl PartialEq for NetworkModel {
    fn eq(&self, other: &Self) -> bool {
        self.base_mva == other.base_mva
            && self.buses == other.buses
            && self.branches == other.branches
    }
}

impl NetworkModel {
    /// Validates and builds a model. Bus ids must already be `0..N-1` in order.
    pub fn new(base_mva: f64, buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self> {
        if !(base_mva > 0.0) {
            return Err(Error::InvalidNetwork("base_mva must be positive".into()));
        }
        if buses.is_empty() {
            return Err(Error::InvalidNetwork("network has no buses".into()));
        }
        for (i, bus) in buses.iter().enumerate() {
            if bus.id != i {
                return Err(Error::InvalidNetwork(format!(
                    "bus ids must form the contiguous range 0..{}; found {} at position {i}",
                    buses.len(),
                    bus.id
                )));
            }
        }
        let slacks: Vec<usize> = buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        if slacks.len() != 1 {
            return Err(Error::InvalidNetwork(format!(
                "exactly one slack bus required, found {}",
                slacks.len()
            )));
        }
        let n = buses.len();
        for (k, br) in branches.iter().enumerate() {
            if br.from_bus >= n || br.to_bus >= n {
                return Err(Error::InvalidNetwork(format!(
                    "branch {k} references a bus outside 0..{n}"
                )));
            }
            if br.from_bus == br.to_bus {
                return Err(Error::InvalidNetwork(format!(
                    "branch {k} has from_bus == to_bus"
                )));
            }
            if br.series_resistance.hypot(br.series_reactance) <= 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "branch {k} has zero series impedance"
                )));
            }
            if !(br.tap_ratio > 0.0) {
                return Err(Error::InvalidNetwork(format!(
                    "branch {k} has non-positive tap ratio"
                )));
            }
        }
        if !is_connected(n, &branches) {
            return Err(Error::InvalidNetwork("branch graph is not connected".into()));
        }

        let two_ports: Vec<TwoPort> = branches.iter().map(branch_admittance).collect();
        let mut rows: Vec<BTreeMap<usize, Complex64>> = vec![BTreeMap::new(); n];
        for (i, bus) in buses.iter().enumerate() {
            *rows[i].entry(i).or_default() +=
                Complex64::new(bus.shunt_conductance, bus.shunt_susceptance);
        }
        for (br, tp) in branches.iter().zip(&two_ports) {
            let (f, t) = (br.from_bus, br.to_bus);
            *rows[f].entry(f).or_default() += tp.yff;
            *rows[f].entry(t).or_default() += tp.yft;
            *rows[t].entry(f).or_default() += tp.ytf;
            *rows[t].entry(t).or_default() += tp.ytt;
        }
        let ybus = rows.into_iter().map(|r| r.into_iter().collect()).collect();

        Ok(NetworkModel {
            base_mva,
            slack: slacks[0],
            buses,
            branches,
            two_ports,
            ybus,
        })
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Number of state variables `n = 2N`.
    pub fn state_dim(&self) -> usize {
        2 * self.buses.len()
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn two_port(&self, branch: usize) -> &TwoPort {
        &self.two_ports[branch]
    }

    pub fn ybus_row(&self, bus: usize) -> &[(usize, Complex64)] {
        &self.ybus[bus]
    }

    /// Index of `θ_bus` in the state vector `[θ, V]`.
    pub fn angle_index(&self, bus: usize) -> usize {
        bus
    }

    /// Index of `V_bus` in the state vector `[θ, V]`.
    pub fn magnitude_index(&self, bus: usize) -> usize {
        self.buses.len() + bus
    }
}

fn is_connected(n: usize, branches: &[Branch]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for br in branches {
        adj[br.from_bus].push(br.to_bus);
        adj[br.to_bus].push(br.from_bus);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == n
}

/// On-disk case document. Bus ids in the file may be any unique integers;
/// they are renumbered to `0..N-1` in ascending order on ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFile {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurements: Option<Vec<MeasurementRecord>>,
}

impl CaseFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("case serialization is infallible");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn from_parts(net: &NetworkModel, measurements: Option<&MeasurementSet>) -> Self {
        CaseFile {
            base_mva: net.base_mva,
            buses: net.buses.clone(),
            branches: net.branches.clone(),
            measurements: measurements.map(|ms| ms.to_records()),
        }
    }

    /// Builds the network and, if present, the measurement set.
    pub fn into_model(self) -> Result<(NetworkModel, Option<MeasurementSet>)> {
        let mut ids: Vec<usize> = self.buses.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidNetwork("duplicate bus id".into()));
        }
        let remap: HashMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let lookup = |id: usize| {
            remap
                .get(&id)
                .copied()
                .ok_or_else(|| Error::InvalidNetwork(format!("unknown bus id {id}")))
        };

        let mut buses = self.buses;
        buses.sort_by_key(|b| b.id);
        for bus in &mut buses {
            bus.id = lookup(bus.id)?;
        }
        let mut branches = self.branches;
        for br in &mut branches {
            br.from_bus = lookup(br.from_bus)?;
            br.to_bus = lookup(br.to_bus)?;
        }
        let net = NetworkModel::new(self.base_mva, buses, branches)?;
        let ms = match self.measurements {
            None => None,
            Some(records) => {
                let mut remapped = Vec::with_capacity(records.len());
                for mut rec in records {
                    if let Some(b) = rec.bus {
                        rec.bus = Some(lookup(b)?);
                    }
                    remapped.push(rec);
                }
                Some(MeasurementSet::from_records(&net, remapped)?)
            }
        };
        Ok((net, ms))
    }
}

/// Reads and validates a case file, ignoring any measurement section.
pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkModel> {
    Ok(CaseFile::read(path)?.into_model()?.0)
}

/// Reads a case file together with its measurement section, if any.
pub fn load_case_with_measurements(
    path: impl AsRef<Path>,
) -> Result<(NetworkModel, Option<MeasurementSet>)> {
    CaseFile::read(path)?.into_model()
}

/// IEEE test cases shipped with the crate, by name.
pub const BUNDLED_CASES: [(&str, &str); 4] = [
    ("ieee14", include_str!("../data/ieee14.json")),
    ("ieee30", include_str!("../data/ieee30.json")),
    ("ieee118", include_str!("../data/ieee118.json")),
    ("ieee300", include_str!("../data/ieee300.json")),
];

pub fn bundled_case(name: &str) -> Option<CaseFile> {
    BUNDLED_CASES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| CaseFile::parse(text).expect("bundled case parses"))
}

/// Opens `spec` as a file path, falling back to a bundled case name.
pub fn open_case(spec: &str) -> Result<(NetworkModel, Option<MeasurementSet>)> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(case) = bundled_case(spec) {
            return case.into_model();
        }
    }
    load_case_with_measurements(path)
}
