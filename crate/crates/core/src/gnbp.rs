//! Gauss-Newton belief propagation.
//!
//! The outer loop linearizes the measurement functions at `x^(ν)`; the inner
//! loop runs Gaussian BP on the resulting factor graph to obtain the WLS
//! increment `Δx̂^(ν)`. Messages are updated synchronously: factor-to-variable
//! messages of iteration τ are computed from the variable-to-factor messages
//! of iteration τ−1 only.

use rand::distr::{Bernoulli, Distribution};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::factor_graph::{build_graph_with, FactorGraph, GaussianMessage, GraphConfig, DEFAULT_VIRTUAL_VARIANCE};
use crate::measurement::MeasurementSet;
use crate::network::NetworkModel;
use crate::power_flow::StateVector;
use crate::rng::{stream, stream_rng};

pub const DEFAULT_EPSILON: [f64; 5] = [1e-2, 1e-4, 1e-6, 1e-8, 1e-10];
pub const DEFAULT_TAU_MAX: usize = 6000;
pub const DEFAULT_NU_MAX: usize = 12;
pub const DEFAULT_OUTER_TOL: f64 = 1e-10;
pub const FLAT_PERTURBATION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum StartMode {
    /// θ = 0, V = 1 plus a uniform perturbation; the slack angle is exact.
    FlatPerturbed { amplitude: f64 },
    /// Start from the given state.
    Warm(StateVector),
}

impl Default for StartMode {
    fn default() -> Self {
        StartMode::FlatPerturbed {
            amplitude: FLAT_PERTURBATION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    Off,
    Randomized { p: f64, alpha1: f64 },
}

impl Damping {
    pub fn randomized_default() -> Self {
        Damping::Randomized { p: 0.8, alpha1: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerStop {
    /// Stop once the largest change of a factor-to-variable mean drops below ε(ν).
    Threshold,
    /// Always run τ_max(ν) iterations.
    FixedCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub start: StartMode,
    pub nu_max: usize,
    /// Per-outer-iteration caps; the last entry is held for later iterations.
    pub tau_max: Vec<usize>,
    /// Per-outer-iteration thresholds; the last entry is held for later iterations.
    pub epsilon: Vec<f64>,
    pub stop: InnerStop,
    pub damping: Damping,
    pub redraw_per_inner: bool,
    pub seed: u64,
    pub outer_tol: f64,
    pub graph: GraphConfig,
    pub trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            start: StartMode::default(),
            nu_max: DEFAULT_NU_MAX,
            tau_max: vec![DEFAULT_TAU_MAX],
            epsilon: DEFAULT_EPSILON.to_vec(),
            stop: InnerStop::Threshold,
            damping: Damping::Off,
            redraw_per_inner: false,
            seed: 0,
            outer_tol: DEFAULT_OUTER_TOL,
            graph: GraphConfig::default(),
            trace: false,
        }
    }
}

fn schedule<T: Copy>(values: &[T], nu: usize) -> T {
    values[nu.min(values.len() - 1)]
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_max.is_empty() || self.tau_max.contains(&0) {
            return Err(Error::InvalidConfig("tau_max entries must be at least 1".into()));
        }
        if self.epsilon.is_empty() || self.epsilon.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidConfig("epsilon entries must be positive".into()));
        }
        if let Damping::Randomized { p, alpha1 } = self.damping {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("damping probability {p} outside [0, 1]")));
            }
            if !(alpha1 > 0.0 && alpha1 < 1.0) {
                return Err(Error::InvalidConfig(format!("alpha1 {alpha1} outside (0, 1)")));
            }
        }
        if let StartMode::FlatPerturbed { amplitude } = self.start {
            if !(amplitude >= 0.0) {
                return Err(Error::InvalidConfig("perturbation amplitude must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn tau_max_at(&self, nu: usize) -> usize {
        schedule(&self.tau_max, nu)
    }

    pub fn epsilon_at(&self, nu: usize) -> f64 {
        schedule(&self.epsilon, nu)
    }
}

/// Initial point `x^(0)`, shared with the centralized Gauss-Newton solver.
pub fn initial_state(net: &NetworkModel, start: &StartMode, slack_angle: f64, seed: u64) -> StateVector {
    match start {
        StartMode::Warm(x) => x.clone(),
        StartMode::FlatPerturbed { amplitude } => {
            let n = net.bus_count();
            let mut x = StateVector::flat(n);
            if *amplitude > 0.0 {
                let mut rng = stream_rng(seed, stream::START, 0);
                for t in x.theta.iter_mut() {
                    *t += rng.random_range(-amplitude..=*amplitude);
                }
                for v in x.v.iter_mut() {
                    *v += rng.random_range(-amplitude..=*amplitude);
                }
            }
            x.theta[net.slack()] = slack_angle;
            x
        }
    }
}

/// Bernoulli(p) damping selection per edge, in canonical edge order.
pub fn damping_mask(seed: u64, nu: usize, edges: usize, p: f64) -> Vec<bool> {
    let mut rng = stream_rng(seed, stream::DAMPING, nu as u64);
    draw_mask(&mut rng, edges, p)
}

fn draw_mask(rng: &mut ChaCha8Rng, edges: usize, p: f64) -> Vec<bool> {
    let ber = Bernoulli::new(p).expect("probability validated");
    (0..edges).map(|_| ber.sample(rng)).collect()
}

/// Variable-to-factor message from all other incoming messages.
pub fn vf_message(incoming: &[GaussianMessage]) -> GaussianMessage {
    let (prec, info) = incoming
        .iter()
        .fold((0.0, 0.0), |(p, i), m| (p + 1.0 / m.variance, i + m.mean / m.variance));
    let variance = 1.0 / prec;
    GaussianMessage::new(info * variance, variance)
}

/// Factor-to-variable message of a linear factor `r_i = Σ C_b Δx_b` with
/// variance `v_i`, sent to the variable with coefficient `own`.
pub fn fv_message(r_i: f64, v_i: f64, own: f64, others: &[(f64, GaussianMessage)]) -> Result<GaussianMessage> {
    if own == 0.0 {
        return Err(Error::ZeroCoefficient);
    }
    let (mut m, mut w) = (0.0, 0.0);
    for (c, msg) in others {
        m += c * msg.mean;
        w += c * c * msg.variance;
    }
    Ok(GaussianMessage::new((r_i - m) / own, (v_i + w) / (own * own)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Marginal {
    pub mean: f64,
    pub variance: f64,
}

pub fn marginal(incoming: &[GaussianMessage]) -> Marginal {
    let m = vf_message(incoming);
    Marginal {
        mean: m.mean,
        variance: m.variance,
    }
}

/// Compressed incidence over the active edges of a graph.
#[derive(Debug, Clone)]
pub struct ActiveTopology {
    pub active: Vec<bool>,
    /// Active edges grouped by factor.
    pub factor_ptr: Vec<usize>,
    pub factor_edges: Vec<usize>,
    pub factor_of_block: Vec<usize>,
    /// Active edges grouped by variable.
    pub var_ptr: Vec<usize>,
    pub var_edges: Vec<usize>,
    max_degree: usize,
}

impl ActiveTopology {
    pub fn new(graph: &FactorGraph) -> Self {
        let active: Vec<bool> = graph.edges.iter().map(|e| e.is_active()).collect();
        let mut factor_ptr = vec![0];
        let mut factor_edges = Vec::new();
        let mut factor_of_block = Vec::new();
        let mut max_degree = 0;
        for (f, range) in graph.factor_edges.iter().enumerate() {
            let before = factor_edges.len();
            factor_edges.extend(range.clone().filter(|&e| active[e]));
            if factor_edges.len() > before {
                factor_of_block.push(f);
                factor_ptr.push(factor_edges.len());
                max_degree = max_degree.max(factor_edges.len() - before);
            }
        }
        let mut var_ptr = vec![0];
        let mut var_edges = Vec::new();
        for list in &graph.variable_edges {
            let before = var_edges.len();
            var_edges.extend(list.iter().copied().filter(|&e| active[e]));
            max_degree = max_degree.max(var_edges.len() - before);
            var_ptr.push(var_edges.len());
        }
        ActiveTopology {
            active,
            factor_ptr,
            factor_edges,
            factor_of_block,
            var_ptr,
            var_edges,
            max_degree,
        }
    }

    /// Active edge ids in canonical order.
    pub fn active_edges(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&e| self.active[e]).collect()
    }
}

/// Exclusive sums `out[k] = Σ_{j≠k} a[j]` without subtraction.
pub(crate) fn exclusive_sums(a: &[f64], prefix: &mut [f64], out: &mut [f64]) {
    let d = a.len();
    prefix[0] = 0.0;
    for k in 0..d {
        prefix[k + 1] = prefix[k] + a[k];
    }
    let mut suffix = 0.0;
    for k in (0..d).rev() {
        out[k] = prefix[k] + suffix;
        suffix += a[k];
    }
}

/// Message storage and the synchronous update rule for one linearization.
pub struct InnerLoop<'g> {
    graph: &'g FactorGraph,
    topo: ActiveTopology,
    pub fv_mean: Vec<f64>,
    pub fv_var: Vec<f64>,
    pub vf_mean: Vec<f64>,
    pub vf_var: Vec<f64>,
    damping: Option<(Vec<bool>, f64)>,
    redraw: Option<(ChaCha8Rng, f64)>,
    tau: usize,
    scratch: Scratch,
}

struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
    prefix: Vec<f64>,
    ea: Vec<f64>,
    eb: Vec<f64>,
}

impl<'g> InnerLoop<'g> {
    pub fn new(graph: &'g FactorGraph) -> Self {
        let topo = ActiveTopology::new(graph);
        let b = graph.edges.len();
        let d = topo.max_degree;
        let mut inner = InnerLoop {
            graph,
            topo,
            fv_mean: vec![0.0; b],
            fv_var: vec![DEFAULT_VIRTUAL_VARIANCE; b],
            vf_mean: vec![0.0; b],
            vf_var: vec![0.0; b],
            damping: None,
            redraw: None,
            tau: 0,
            scratch: Scratch {
                a: vec![0.0; d],
                b: vec![0.0; d],
                prefix: vec![0.0; d + 1],
                ea: vec![0.0; d],
                eb: vec![0.0; d],
            },
        };
        inner.reset();
        inner
    }

    /// Damps edges where `mask` is set, `new = α₁·old + (1−α₁)·computed`.
    pub fn with_damping(mut self, mask: Vec<bool>, alpha1: f64) -> Self {
        assert_eq!(mask.len(), self.graph.edges.len());
        self.damping = Some((mask, alpha1));
        self
    }

    /// Draws a fresh mask before every iteration from `rng`.
    pub fn with_redraw(mut self, rng: ChaCha8Rng, p: f64, alpha1: f64) -> Self {
        let b = self.graph.edges.len();
        self.damping = Some((vec![false; b], alpha1));
        self.redraw = Some((rng, p));
        self
    }

    pub fn topology(&self) -> &ActiveTopology {
        &self.topo
    }

    pub fn iterations(&self) -> usize {
        self.tau
    }

    /// τ = 0: variable-to-factor messages carry the local priors only.
    pub fn reset(&mut self) {
        let g = self.graph;
        for (e, edge) in g.edges.iter().enumerate() {
            let prior = g.prior(edge.variable);
            self.vf_mean[e] = prior.mean;
            self.vf_var[e] = prior.variance;
            self.fv_mean[e] = 0.0;
            self.fv_var[e] = DEFAULT_VIRTUAL_VARIANCE;
        }
        self.tau = 0;
    }

    /// One synchronous iteration; returns the largest change of an active
    /// factor-to-variable mean.
    pub fn step(&mut self) -> f64 {
        if let Some((rng, p)) = self.redraw.as_mut() {
            let b = self.graph.edges.len();
            let mask = draw_mask(rng, b, *p);
            self.damping.as_mut().expect("redraw implies damping").0 = mask;
        }
        let delta = self.factor_update();
        self.variable_update();
        self.tau += 1;
        delta
    }

    fn factor_update(&mut self) -> f64 {
        let g = self.graph;
        let s = &mut self.scratch;
        let mut delta: f64 = 0.0;
        for (blk, &f) in self.topo.factor_of_block.iter().enumerate() {
            let edges = &self.topo.factor_edges[self.topo.factor_ptr[blk]..self.topo.factor_ptr[blk + 1]];
            let d = edges.len();
            let factor = &g.factors[f];
            for (k, &e) in edges.iter().enumerate() {
                let c = g.edges[e].coefficient;
                s.a[k] = c * self.vf_mean[e];
                s.b[k] = c * c * self.vf_var[e];
            }
            exclusive_sums(&s.a[..d], &mut s.prefix, &mut s.ea[..d]);
            exclusive_sums(&s.b[..d], &mut s.prefix, &mut s.eb[..d]);
            for (k, &e) in edges.iter().enumerate() {
                let c = g.edges[e].coefficient;
                let mut mean = (factor.residual - s.ea[k]) / c;
                if let Some((mask, alpha1)) = &self.damping {
                    if mask[e] {
                        mean = alpha1 * self.fv_mean[e] + (1.0 - alpha1) * mean;
                    }
                }
                let change = (mean - self.fv_mean[e]).abs();
                delta = if change.is_nan() { f64::INFINITY } else { delta.max(change) };
                self.fv_mean[e] = mean;
                self.fv_var[e] = (factor.variance + s.eb[k]) / (c * c);
            }
        }
        delta
    }

    fn variable_update(&mut self) {
        let g = self.graph;
        let s = &mut self.scratch;
        for var in 0..g.variable_count() {
            let edges = &self.topo.var_edges[self.topo.var_ptr[var]..self.topo.var_ptr[var + 1]];
            let d = edges.len();
            if d == 0 {
                continue;
            }
            for (k, &e) in edges.iter().enumerate() {
                s.a[k] = 1.0 / self.fv_var[e];
                s.b[k] = self.fv_mean[e] / self.fv_var[e];
            }
            exclusive_sums(&s.a[..d], &mut s.prefix, &mut s.ea[..d]);
            exclusive_sums(&s.b[..d], &mut s.prefix, &mut s.eb[..d]);
            let (p, i) = (g.prior_precision[var], g.prior_information[var]);
            for (k, &e) in edges.iter().enumerate() {
                let v = 1.0 / (p + s.ea[k]);
                self.vf_var[e] = v;
                self.vf_mean[e] = (i + s.eb[k]) * v;
            }
        }
    }

    /// Overwrites the factor-to-variable means and recomputes the
    /// variable-to-factor side from them.
    pub fn set_factor_means(&mut self, means: &[f64]) {
        self.fv_mean.copy_from_slice(means);
        self.variable_update();
    }

    pub fn marginals(&self) -> Vec<Marginal> {
        let g = self.graph;
        (0..g.variable_count())
            .map(|var| {
                let edges = &self.topo.var_edges[self.topo.var_ptr[var]..self.topo.var_ptr[var + 1]];
                let mut prec = g.prior_precision[var];
                let mut info = g.prior_information[var];
                for &e in edges {
                    prec += 1.0 / self.fv_var[e];
                    info += self.fv_mean[e] / self.fv_var[e];
                }
                Marginal {
                    mean: info / prec,
                    variance: 1.0 / prec,
                }
            })
            .collect()
    }

    /// Current (factor-to-variable, variable-to-factor) message per edge;
    /// inactive edges report the vacuous factor message.
    pub fn edge_messages(&self) -> Vec<(GaussianMessage, GaussianMessage)> {
        (0..self.graph.edges.len())
            .map(|e| {
                let fv = if self.topo.active[e] {
                    GaussianMessage::new(self.fv_mean[e], self.fv_var[e])
                } else {
                    GaussianMessage::new(0.0, DEFAULT_VIRTUAL_VARIANCE)
                };
                (fv, GaussianMessage::new(self.vf_mean[e], self.vf_var[e]))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub nu: usize,
    pub tau: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub marginals: Vec<Marginal>,
    pub iterations: usize,
    pub converged: bool,
    pub final_delta: f64,
}

/// Runs the inner loop on a graph whose coefficients are current and leaves
/// the final messages in the graph.
pub fn run_inner(graph: &mut FactorGraph, cfg: &SolverConfig, nu: usize, trace: &mut Vec<TracePoint>) -> InnerOutcome {
    let tau_max = cfg.tau_max_at(nu);
    let eps = cfg.epsilon_at(nu);
    let b = graph.edges.len();
    let (outcome, messages) = {
        let mut inner = InnerLoop::new(graph);
        if let Damping::Randomized { p, alpha1 } = cfg.damping {
            inner = if cfg.redraw_per_inner {
                inner.with_redraw(stream_rng(cfg.seed, stream::DAMPING, nu as u64), p, alpha1)
            } else {
                inner.with_damping(damping_mask(cfg.seed, nu, b, p), alpha1)
            };
        }
        let mut delta = f64::INFINITY;
        while inner.iterations() < tau_max {
            delta = inner.step();
            if cfg.trace {
                trace.push(TracePoint {
                    nu,
                    tau: inner.iterations(),
                    delta,
                });
            }
            if cfg.stop == InnerStop::Threshold && delta < eps {
                break;
            }
        }
        let outcome = InnerOutcome {
            marginals: inner.marginals(),
            iterations: inner.iterations(),
            converged: delta < eps,
            final_delta: delta,
        };
        (outcome, inner.edge_messages())
    };
    for (edge, (fv, vf)) in graph.edges.iter_mut().zip(messages) {
        edge.message_fv = fv;
        edge.message_vf = vf;
    }
    outcome
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuterRecord {
    pub nu: usize,
    pub increment: Vec<f64>,
    pub variances: Vec<f64>,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub final_delta: f64,
    pub residuals: Vec<f64>,
    pub mad: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x_hat: StateVector,
    pub records: Vec<OuterRecord>,
    /// Every inner loop met its threshold.
    pub converged: bool,
    /// Graph with coefficients and messages of the last inner loop.
    pub graph: FactorGraph,
    pub trace: Vec<TracePoint>,
}

pub fn mad(delta: &[f64]) -> f64 {
    delta.iter().map(|d| d.abs()).sum::<f64>() / delta.len() as f64
}

pub fn solve(net: &NetworkModel, ms: &MeasurementSet, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let mut graph = build_graph_with(net, ms, cfg.graph);
    let mut x = initial_state(net, &cfg.start, cfg.graph.slack_angle, cfg.seed);
    let mut records = Vec::new();
    let mut trace = Vec::new();
    let mut converged = true;
    for nu in 0..cfg.nu_max {
        graph.refresh_coefficients(net, &x);
        let residuals = graph.factors[..ms.len()].iter().map(|f| f.residual).collect();
        let outcome = run_inner(&mut graph, cfg, nu, &mut trace);
        let increment: Vec<f64> = outcome.marginals.iter().map(|m| m.mean).collect();
        let step_mad = mad(&increment);
        records.push(OuterRecord {
            nu,
            variances: outcome.marginals.iter().map(|m| m.variance).collect(),
            inner_iterations: outcome.iterations,
            inner_converged: outcome.converged,
            final_delta: outcome.final_delta,
            residuals,
            mad: step_mad,
            increment: increment.clone(),
        });
        if !outcome.converged {
            converged = false;
            if cfg.stop == InnerStop::Threshold {
                log::debug!("inner loop at outer iteration {nu} stopped after {} iterations", outcome.iterations);
                break;
            }
        }
        if !increment.iter().all(|d| d.is_finite()) {
            converged = false;
            break;
        }
        x = x.add(&increment);
        if step_mad < cfg.outer_tol {
            break;
        }
    }
    Ok(SolveResult {
        x_hat: x,
        records,
        converged,
        graph,
        trace,
    })
}
