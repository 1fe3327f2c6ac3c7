//! Factor graph for one Gauss-Newton linearization.
//!
//! Variable nodes are the increments `Δθ_s`, `ΔV_s` (index layout matches the
//! state vector `[θ, V]`). Every measurement defines a factor node: indirect
//! factors connect to all state variables their function depends on, direct
//! factors to the single variable they measure. A slack factor pins the
//! reference angle and virtual factors cover variables that no direct or
//! slack factor touches.
//!
//! Only edges of indirect factors take part in message passing. Local
//! factors (direct, slack, virtual) are folded into a per-variable prior in
//! information form.

use serde::Serialize;

use crate::measurement::{evaluate_with_jacobian, jacobian_row, MeasurementSet};
use crate::network::NetworkModel;
use crate::power_flow::StateVector;

pub const DEFAULT_SLACK_VARIANCE: f64 = 1e-15;
pub const DEFAULT_VIRTUAL_VARIANCE: f64 = 1e15;

/// Jacobian coefficients with magnitude at or below this value are treated
/// as absent for the current linearization.
pub const ZERO_COEFFICIENT: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    AngleIncrement,
    MagnitudeIncrement,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariableNode {
    pub id: usize,
    pub kind: VariableKind,
    pub bus: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorType {
    Indirect,
    Direct,
    Slack,
    Virtual,
}

impl FactorType {
    pub fn is_local(self) -> bool {
        self != FactorType::Indirect
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorNode {
    pub id: usize,
    pub node_type: FactorType,
    /// Index into the measurement set for indirect and direct factors.
    pub measurement: Option<usize>,
    pub incident_variables: Vec<usize>,
    /// Residual `z − h(x)` at the current linearization point.
    pub residual: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianMessage {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianMessage {
    pub fn new(mean: f64, variance: f64) -> Self {
        GaussianMessage { mean, variance }
    }

    pub fn precision(&self) -> f64 {
        1.0 / self.variance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub factor: usize,
    pub variable: usize,
    pub coefficient: f64,
    pub message_fv: GaussianMessage,
    pub message_vf: GaussianMessage,
}

impl Edge {
    pub fn is_active(&self) -> bool {
        self.coefficient.abs() > ZERO_COEFFICIENT
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    pub slack_variance: f64,
    pub virtual_variance: f64,
    pub slack_angle: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            slack_variance: DEFAULT_SLACK_VARIANCE,
            virtual_variance: DEFAULT_VIRTUAL_VARIANCE,
            slack_angle: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FactorGraph {
    pub config: GraphConfig,
    pub measurements: MeasurementSet,
    pub variables: Vec<VariableNode>,
    pub factors: Vec<FactorNode>,
    /// Edges of indirect factors, sorted by (factor id, variable id).
    pub edges: Vec<Edge>,
    /// Edge index range of each factor (empty for local factors).
    pub factor_edges: Vec<std::ops::Range<usize>>,
    /// Ascending edge indices incident to each variable.
    pub variable_edges: Vec<Vec<usize>>,
    /// Local factor ids per variable.
    pub local_factors: Vec<Vec<usize>>,
    /// Σ 1/v over local factors of each variable.
    pub prior_precision: Vec<f64>,
    /// Σ r/v over local factors of each variable.
    pub prior_information: Vec<f64>,
}

pub fn build_graph(net: &NetworkModel, ms: &MeasurementSet) -> FactorGraph {
    build_graph_with(net, ms, GraphConfig::default())
}

pub fn build_graph_with(net: &NetworkModel, ms: &MeasurementSet, config: GraphConfig) -> FactorGraph {
    let nb = net.bus_count();
    let n = net.state_dim();
    let variables: Vec<VariableNode> = (0..n)
        .map(|id| VariableNode {
            id,
            kind: if id < nb {
                VariableKind::AngleIncrement
            } else {
                VariableKind::MagnitudeIncrement
            },
            bus: id % nb,
        })
        .collect();

    // the support of a Jacobian row is structural, any state will do
    let probe = StateVector::flat(nb);
    let mut factors = Vec::with_capacity(ms.len() + n);
    let mut edges = Vec::new();
    let mut factor_edges = Vec::with_capacity(ms.len() + n);
    let mut local_factors = vec![Vec::new(); n];

    for (id, m) in ms.iter().enumerate() {
        let support: Vec<usize> = jacobian_row(net, m, &probe).iter().map(|e| e.0).collect();
        let node_type = if m.kind.is_direct() {
            FactorType::Direct
        } else {
            FactorType::Indirect
        };
        let start = edges.len();
        if node_type == FactorType::Indirect {
            for &var in &support {
                edges.push(Edge {
                    factor: id,
                    variable: var,
                    coefficient: 0.0,
                    message_fv: GaussianMessage::new(0.0, config.virtual_variance),
                    message_vf: GaussianMessage::new(0.0, config.virtual_variance),
                });
            }
        } else {
            local_factors[support[0]].push(id);
        }
        factor_edges.push(start..edges.len());
        factors.push(FactorNode {
            id,
            node_type,
            measurement: Some(id),
            incident_variables: support,
            residual: 0.0,
            variance: m.variance,
        });
    }

    let slack_var = net.angle_index(net.slack());
    let slack_id = factors.len();
    factors.push(FactorNode {
        id: slack_id,
        node_type: FactorType::Slack,
        measurement: None,
        incident_variables: vec![slack_var],
        residual: 0.0,
        variance: config.slack_variance,
    });
    factor_edges.push(edges.len()..edges.len());
    local_factors[slack_var].push(slack_id);

    for var in 0..n {
        if local_factors[var].is_empty() {
            let id = factors.len();
            factors.push(FactorNode {
                id,
                node_type: FactorType::Virtual,
                measurement: None,
                incident_variables: vec![var],
                residual: 0.0,
                variance: config.virtual_variance,
            });
            factor_edges.push(edges.len()..edges.len());
            local_factors[var].push(id);
        }
    }

    let mut variable_edges = vec![Vec::new(); n];
    for (e, edge) in edges.iter().enumerate() {
        variable_edges[edge.variable].push(e);
    }

    let mut graph = FactorGraph {
        config,
        measurements: ms.clone(),
        variables,
        factors,
        edges,
        factor_edges,
        variable_edges,
        local_factors,
        prior_precision: vec![0.0; n],
        prior_information: vec![0.0; n],
    };
    graph.update_priors();
    graph
}

impl FactorGraph {
    pub fn variable_count(&self) -> usize {
        self.variables.len()
    }

    pub fn indirect_factors(&self) -> impl Iterator<Item = &FactorNode> {
        self.factors.iter().filter(|f| f.node_type == FactorType::Indirect)
    }

    pub fn factors_of_type(&self, node_type: FactorType) -> Vec<usize> {
        self.factors
            .iter()
            .filter(|f| f.node_type == node_type)
            .map(|f| f.id)
            .collect()
    }

    /// Recomputes residuals and Jacobian coefficients at `x`.
    pub fn refresh_coefficients(&mut self, net: &NetworkModel, x: &StateVector) {
        let slack_var = net.angle_index(net.slack());
        for f in 0..self.factors.len() {
            let node_type = self.factors[f].node_type;
            match node_type {
                FactorType::Indirect | FactorType::Direct => {
                    let m = &self.measurements.measurements[self.factors[f].measurement.expect("measurement factor")];
                    let (value, row) = evaluate_with_jacobian(net, m, x);
                    self.factors[f].residual = m.z - value;
                    if node_type == FactorType::Indirect {
                        let range = self.factor_edges[f].clone();
                        for (edge, (var, c)) in self.edges[range].iter_mut().zip(row) {
                            debug_assert_eq!(edge.variable, var);
                            edge.coefficient = c;
                        }
                    }
                }
                FactorType::Slack => {
                    self.factors[f].residual = self.config.slack_angle - x.theta[slack_var];
                }
                FactorType::Virtual => self.factors[f].residual = 0.0,
            }
        }
        self.update_priors();
    }

    fn update_priors(&mut self) {
        for var in 0..self.variables.len() {
            let (mut prec, mut info) = (0.0, 0.0);
            for &f in &self.local_factors[var] {
                let factor = &self.factors[f];
                prec += 1.0 / factor.variance;
                info += factor.residual / factor.variance;
            }
            self.prior_precision[var] = prec;
            self.prior_information[var] = info;
        }
    }

    /// Combined message of the local factors of `var`.
    pub fn prior(&self, var: usize) -> GaussianMessage {
        let variance = 1.0 / self.prior_precision[var];
        GaussianMessage::new(self.prior_information[var] * variance, variance)
    }

    pub fn active_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.is_active()).count()
    }

    /// Structured text dump of nodes and edges.
    pub fn dump(&self) -> String {
        #[derive(Serialize)]
        struct EdgeDump {
            factor: usize,
            variable: usize,
            coefficient: f64,
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            variables: &'a [VariableNode],
            factors: &'a [FactorNode],
            edges: Vec<EdgeDump>,
        }
        let dump = Dump {
            variables: &self.variables,
            factors: &self.factors,
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDump {
                    factor: e.factor,
                    variable: e.variable,
                    coefficient: e.coefficient,
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&dump).expect("graph dump serializes");
        s.push('\n');
        s
    }
}
