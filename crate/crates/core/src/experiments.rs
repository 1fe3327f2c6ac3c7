//! Monte Carlo batches over random measurement configurations: accuracy
//! (WRSS), convergence rate (MAD), spectral radii and bad-data statistics,
//! written as plot-ready CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand_distr::num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::bad_data::{
    bp_bdt_with, calibrate_kappa, inject_bad_data, lnrt, quantile, BdtScope, DEFAULT_KAPPA_BPBDT, DEFAULT_KAPPA_LNRT,
};
use crate::convergence::{analyze, AnalysisConfig};
use crate::error::{Error, Result};
use crate::gnbp::{initial_state, solve, Damping, InnerStop, SolverConfig, StartMode, DEFAULT_EPSILON};
use crate::measurement::{evaluate_h, synthesize_observable, DeviceClass, MeasurementSet, PlacementConfig};
use crate::network::{open_case, NetworkModel};
use crate::power_flow::{initial_point, solve_power_flow, PowerFlowSpec, StateVector};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::wls::{gauss_newton, GaussNewtonConfig};

pub use crate::gnbp::mad;

/// Bumped whenever a column is added, removed or renamed.
pub const SCHEMA_VERSION: u32 = 1;
pub const WORKERS_ENV: &str = "GNBP_WORKERS";
const PLACEMENT_ATTEMPTS: usize = 100;

/// Weighted residual sum of squares `Σ (z_i − h_i(x))² / v_i`.
pub fn wrss(net: &NetworkModel, ms: &MeasurementSet, x: &StateVector) -> f64 {
    ms.iter()
        .map(|m| {
            let r = m.z - evaluate_h(net, m, x);
            r * r / m.variance
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartKind {
    /// θ = 0, V = 1 with a ±1e-3 uniform perturbation.
    Flat,
    /// The converged power-flow solution.
    Warm,
    /// The power-flow starting point: flat angles, generator set-points.
    PfInitial,
}

impl StartKind {
    pub fn start_mode(self, net: &NetworkModel, pf: &PowerFlowSpec, x_exact: &StateVector) -> StartMode {
        match self {
            StartKind::Flat => StartMode::default(),
            StartKind::Warm => StartMode::Warm(x_exact.clone()),
            StartKind::PfInitial => StartMode::Warm(initial_point(net, pf)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Synchronous,
    Randomized,
}

impl Schedule {
    pub fn label(self) -> &'static str {
        match self {
            Schedule::Synchronous => "gnbp-syn",
            Schedule::Randomized => "gnbp-rd",
        }
    }
}

pub const WLS_LABEL: &str = "wls";

#[derive(Debug, Clone, PartialEq)]
pub struct BadDataStudy {
    /// Standard deviation of the injected error in units of `σ_i`.
    pub sigma_multiple: f64,
    pub scope: BdtScope,
    pub kappa_bpbdt: f64,
    pub kappa_lnrt: f64,
}

impl Default for BadDataStudy {
    fn default() -> Self {
        BadDataStudy {
            sigma_multiple: 20.0,
            scope: BdtScope::default(),
            kappa_bpbdt: DEFAULT_KAPPA_BPBDT,
            kappa_lnrt: DEFAULT_KAPPA_LNRT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// File path or bundled case name.
    pub case: String,
    pub placement: PlacementConfig,
    pub start: StartKind,
    /// GN-BP runs per configuration; empty skips message passing.
    pub schedules: Vec<Schedule>,
    pub p: f64,
    pub alpha1: f64,
    pub config_count: usize,
    /// Run only this configuration id.
    pub only: Option<usize>,
    pub seed: u64,
    pub nu_max: usize,
    pub tau_max: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub stop: InnerStop,
    /// Linearization points for the spectral analysis; 0 skips it.
    pub spectral_points: usize,
    pub bad_data: Option<BadDataStudy>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            case: "ieee30".into(),
            placement: PlacementConfig::default(),
            start: StartKind::Flat,
            schedules: vec![Schedule::Synchronous, Schedule::Randomized],
            p: 0.8,
            alpha1: 0.4,
            config_count: 300,
            only: None,
            seed: 0,
            nu_max: 12,
            tau_max: vec![6000],
            epsilon: DEFAULT_EPSILON.to_vec(),
            stop: InnerStop::Threshold,
            spectral_points: 0,
            bad_data: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Spectral radii and WRSS per outer iteration, IEEE 30-bus flat start.
    Fig5,
    /// MAD and inner iterations per outer iteration, IEEE 118-bus warm start.
    Fig6,
    /// Bad-data statistics, IEEE 14-bus warm start.
    Fig7,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "fig5" => Some(Preset::Fig5),
            "fig6" => Some(Preset::Fig6),
            "fig7" => Some(Preset::Fig7),
            _ => None,
        }
    }

    pub fn config(self) -> ExperimentConfig {
        let base = ExperimentConfig::default();
        match self {
            Preset::Fig5 => ExperimentConfig {
                case: "ieee30".into(),
                placement: PlacementConfig {
                    gamma: 4.0,
                    pmu_count: 5,
                    pmu_currents: false,
                    ..PlacementConfig::default()
                },
                start: StartKind::Flat,
                tau_max: vec![5000],
                stop: InnerStop::FixedCount,
                spectral_points: 12,
                ..base
            },
            Preset::Fig6 => ExperimentConfig {
                case: "ieee118".into(),
                placement: PlacementConfig {
                    gamma: 4.0,
                    pmu_count: 20,
                    ..PlacementConfig::default()
                },
                start: StartKind::Warm,
                schedules: vec![Schedule::Randomized],
                nu_max: 4,
                ..base
            },
            Preset::Fig7 => ExperimentConfig {
                case: "ieee14".into(),
                placement: PlacementConfig {
                    gamma: 3.0,
                    pmu_count: 3,
                    ..PlacementConfig::default()
                },
                start: StartKind::Warm,
                schedules: vec![Schedule::Randomized],
                bad_data: Some(BadDataStudy::default()),
                ..base
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.config_count == 0 {
            return Err(Error::InvalidConfig("config_count must be at least 1".into()));
        }
        if !(self.placement.gamma > 0.0) {
            return Err(Error::InvalidConfig("gamma must be positive".into()));
        }
        if let Some(id) = self.only {
            if id >= self.config_count {
                return Err(Error::InvalidConfig(format!(
                    "config {id} outside 0..{}",
                    self.config_count
                )));
            }
        }
        if let Some(bd) = &self.bad_data {
            if self.schedules.is_empty() {
                return Err(Error::InvalidConfig("the bad-data study needs a GN-BP schedule".into()));
            }
            if !(bd.sigma_multiple > 0.0) {
                return Err(Error::InvalidConfig("bad-data multiple must be positive".into()));
            }
        }
        self.solver_config(StartMode::default(), Schedule::Randomized, 0)
            .validate()
    }

    fn solver_config(&self, start: StartMode, schedule: Schedule, seed: u64) -> SolverConfig {
        SolverConfig {
            start,
            nu_max: self.nu_max,
            tau_max: self.tau_max.clone(),
            epsilon: self.epsilon.clone(),
            stop: self.stop,
            damping: match schedule {
                Schedule::Synchronous => Damping::Off,
                Schedule::Randomized => Damping::Randomized {
                    p: self.p,
                    alpha1: self.alpha1,
                },
            },
            seed,
            // every outer iteration runs so per-iteration series line up
            outer_tol: 0.0,
            ..SolverConfig::default()
        }
    }

    pub fn config_seed(&self, id: usize) -> u64 {
        derive_seed(self.seed, stream::CONFIG, id as u64)
    }
}

/// One row per configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub config_id: usize,
    pub seed: u64,
    pub placement_attempts: usize,
    pub status: String,
    pub measurements: usize,
    pub legacy: usize,
    pub pmu: usize,
    pub wrss_wls: Option<f64>,
    pub wls_converged: Option<bool>,
    pub rho_syn: Option<f64>,
    pub rho_rd: Option<f64>,
    pub syn_converged: Option<bool>,
    pub syn_wrss: Option<f64>,
    pub rd_converged: Option<bool>,
    pub rd_wrss: Option<f64>,
    pub injected: Option<usize>,
    pub injected_kind: Option<String>,
    pub injected_error_sigma: Option<f64>,
    pub clean_bpbdt: Option<f64>,
    pub clean_lnrt: Option<f64>,
    pub bad_converged: Option<bool>,
    pub bpbdt_argmax: Option<usize>,
    pub bpbdt_stat: Option<f64>,
    pub bpbdt_suspect: Option<usize>,
    pub bpbdt_hit: Option<bool>,
    pub lnrt_argmax: Option<usize>,
    pub lnrt_stat: Option<f64>,
    pub lnrt_suspect: Option<usize>,
    pub lnrt_hit: Option<bool>,
}

impl ConfigRecord {
    fn new(config_id: usize, seed: u64) -> Self {
        ConfigRecord {
            config_id,
            seed,
            placement_attempts: 0,
            status: "ok".into(),
            measurements: 0,
            legacy: 0,
            pmu: 0,
            wrss_wls: None,
            wls_converged: None,
            rho_syn: None,
            rho_rd: None,
            syn_converged: None,
            syn_wrss: None,
            rd_converged: None,
            rd_wrss: None,
            injected: None,
            injected_kind: None,
            injected_error_sigma: None,
            clean_bpbdt: None,
            clean_lnrt: None,
            bad_converged: None,
            bpbdt_argmax: None,
            bpbdt_stat: None,
            bpbdt_suspect: None,
            bpbdt_hit: None,
            lnrt_argmax: None,
            lnrt_stat: None,
            lnrt_suspect: None,
            lnrt_hit: None,
        }
    }

    fn fail(&mut self, stage: &str, err: &Error) {
        log::warn!("config {}: {stage} failed: {err}", self.config_id);
        if self.status == "ok" {
            self.status = format!("{stage}: {err}");
        }
    }

    fn schedule_converged(&self, schedule: &str) -> Option<bool> {
        match schedule {
            "gnbp-syn" => self.syn_converged,
            "gnbp-rd" => self.rd_converged,
            _ => self.wls_converged,
        }
    }
}

/// One row per (configuration, method, outer iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub config_id: usize,
    pub method: String,
    pub nu: usize,
    /// WRSS after the update of iteration `nu`.
    pub wrss: f64,
    pub wrss_ratio: Option<f64>,
    pub mad: f64,
    pub inner_iterations: Option<usize>,
    pub inner_converged: Option<bool>,
}

/// Spectral radii at one linearization point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub config_id: usize,
    pub nu: usize,
    pub edges: usize,
    pub rho_syn: f64,
    pub rho_rd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub method: String,
    pub nu: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchResult {
    pub configs: Vec<ConfigRecord>,
    pub iterations: Vec<IterationRecord>,
    pub spectra: Vec<SpectrumRecord>,
}

/// Data shared by every configuration of a batch.
pub struct BatchContext {
    pub net: NetworkModel,
    pub pf: PowerFlowSpec,
    pub x_exact: StateVector,
}

impl BatchContext {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let (net, _) = open_case(&cfg.case)?;
        let pf = PowerFlowSpec::from_network(&net);
        let x_exact = solve_power_flow(&net, &pf, 1e-12, 30)?.state;
        Ok(BatchContext { net, pf, x_exact })
    }
}

fn states_from_increments(x0: &StateVector, increments: impl Iterator<Item = Vec<f64>>) -> Vec<StateVector> {
    let mut x = x0.clone();
    increments
        .map(|dx| {
            x = x.add(&dx);
            x.clone()
        })
        .collect()
}

/// Runs the full pipeline for configuration `id`.
pub fn run_config(ctx: &BatchContext, cfg: &ExperimentConfig, id: usize) -> BatchResult {
    let net = &ctx.net;
    let seed = cfg.config_seed(id);
    log::info!("config {id}: seed {seed}");
    let mut rec = ConfigRecord::new(id, seed);
    let mut out = BatchResult::default();

    let (ms, attempts) = match synthesize_observable(net, &ctx.x_exact, &cfg.placement, seed, PLACEMENT_ATTEMPTS) {
        Ok(v) => v,
        Err(e) => {
            rec.fail("placement", &e);
            out.configs.push(rec);
            return out;
        }
    };
    rec.placement_attempts = attempts;
    rec.measurements = ms.len();
    rec.legacy = ms.iter().filter(|m| m.device_class == DeviceClass::Legacy).count();
    rec.pmu = rec.measurements - rec.legacy;
    let start = cfg.start.start_mode(net, &ctx.pf, &ctx.x_exact);
    let x0 = initial_state(net, &start, 0.0, seed);

    let gn_cfg = GaussNewtonConfig {
        start: start.clone(),
        iterations: cfg.nu_max,
        tol: 0.0,
        seed,
        ..GaussNewtonConfig::default()
    };
    let mut x_wls = None;
    match gauss_newton(net, &ms, &gn_cfg) {
        Ok(gn) => {
            let normalizer = wrss(net, &ms, &gn.x_hat);
            rec.wrss_wls = Some(normalizer);
            rec.wls_converged = Some(gn.mad.last().is_some_and(|m| *m < crate::gnbp::DEFAULT_OUTER_TOL));
            for (nu, (x, m)) in gn.trajectory[1..].iter().zip(&gn.mad).enumerate() {
                let w = wrss(net, &ms, x);
                out.iterations.push(IterationRecord {
                    config_id: id,
                    method: WLS_LABEL.into(),
                    nu,
                    wrss: w,
                    wrss_ratio: ratio(w, normalizer),
                    mad: *m,
                    inner_iterations: None,
                    inner_converged: None,
                });
            }
            x_wls = Some(gn.x_hat);
        }
        Err(e) => rec.fail("wls", &e),
    }

    if cfg.spectral_points > 0 {
        let acfg = AnalysisConfig {
            solver: cfg.solver_config(start.clone(), Schedule::Randomized, seed),
            points: cfg.spectral_points,
            ..AnalysisConfig::default()
        };
        match analyze(net, &ms, &acfg) {
            Ok(report) => {
                rec.rho_syn = Some(report.rho_syn);
                rec.rho_rd = report.rho_rd;
                out.spectra.extend(report.points.iter().map(|p| SpectrumRecord {
                    config_id: id,
                    nu: p.nu,
                    edges: p.edges,
                    rho_syn: p.rho_syn,
                    rho_rd: p.rho_rd,
                }));
            }
            Err(e) => rec.fail("spectral", &e),
        }
    }

    let mut clean_graph = None;
    for &schedule in &cfg.schedules {
        let scfg = cfg.solver_config(start.clone(), schedule, seed);
        match solve(net, &ms, &scfg) {
            Ok(res) => {
                let states = states_from_increments(&x0, res.records.iter().map(|r| r.increment.clone()));
                let normalizer = rec.wrss_wls.unwrap_or(f64::NAN);
                for (r, x) in res.records.iter().zip(&states) {
                    let w = wrss(net, &ms, x);
                    out.iterations.push(IterationRecord {
                        config_id: id,
                        method: schedule.label().into(),
                        nu: r.nu,
                        wrss: w,
                        wrss_ratio: ratio(w, normalizer),
                        mad: r.mad,
                        inner_iterations: Some(r.inner_iterations),
                        inner_converged: Some(r.inner_converged),
                    });
                }
                let final_wrss = wrss(net, &ms, &res.x_hat);
                match schedule {
                    Schedule::Synchronous => {
                        rec.syn_converged = Some(res.converged);
                        rec.syn_wrss = Some(final_wrss);
                    }
                    Schedule::Randomized => {
                        rec.rd_converged = Some(res.converged);
                        rec.rd_wrss = Some(final_wrss);
                    }
                }
                if clean_graph.is_none() {
                    clean_graph = Some(res.graph);
                }
            }
            Err(e) => rec.fail(schedule.label(), &e),
        }
    }

    if let Some(study) = &cfg.bad_data {
        if let Err(e) = bad_data_stage(ctx, cfg, study, &ms, &start, seed, clean_graph.as_ref(), x_wls.as_ref(), &mut rec) {
            rec.fail("bad-data", &e);
        }
    }
    out.configs.push(rec);
    out
}

fn ratio(w: f64, normalizer: f64) -> Option<f64> {
    (normalizer.is_finite() && !normalizer.is_zero()).then(|| w / normalizer)
}

#[allow(clippy::too_many_arguments)]
fn bad_data_stage(
    ctx: &BatchContext,
    cfg: &ExperimentConfig,
    study: &BadDataStudy,
    ms: &MeasurementSet,
    start: &StartMode,
    seed: u64,
    clean_graph: Option<&crate::factor_graph::FactorGraph>,
    clean_wls: Option<&StateVector>,
    rec: &mut ConfigRecord,
) -> Result<()> {
    let net = &ctx.net;
    if let Some(g) = clean_graph {
        rec.clean_bpbdt = Some(bp_bdt_with(g, study.kappa_bpbdt, study.scope).statistic);
    }
    if let Some(x) = clean_wls {
        rec.clean_lnrt = Some(lnrt(net, ms, x, study.kappa_lnrt)?.statistic);
    }
    let mut rng = stream_rng(seed, stream::BAD_DATA, 0);
    let (bad, target) = inject_bad_data(net, ms, &ctx.x_exact, study.sigma_multiple, &mut rng)?;
    let m = &bad.measurements[target];
    rec.injected = Some(target);
    rec.injected_kind = Some(m.kind.name().into());
    rec.injected_error_sigma = Some((m.z - evaluate_h(net, m, &ctx.x_exact)) / m.variance.sqrt());

    let scfg = cfg.solver_config(start.clone(), cfg.schedules[0], seed);
    let res = solve(net, &bad, &scfg)?;
    rec.bad_converged = Some(res.converged);
    let v = bp_bdt_with(&res.graph, study.kappa_bpbdt, study.scope);
    rec.bpbdt_argmax = v.argmax;
    rec.bpbdt_stat = Some(v.statistic);
    rec.bpbdt_suspect = v.suspect;
    rec.bpbdt_hit = Some(v.argmax == Some(target));

    let gn_cfg = GaussNewtonConfig {
        start: start.clone(),
        iterations: cfg.nu_max,
        seed,
        ..GaussNewtonConfig::default()
    };
    let gn = gauss_newton(net, &bad, &gn_cfg)?;
    let v = lnrt(net, &bad, &gn.x_hat, study.kappa_lnrt)?;
    rec.lnrt_argmax = v.argmax;
    rec.lnrt_stat = Some(v.statistic);
    rec.lnrt_suspect = v.suspect;
    rec.lnrt_hit = Some(v.argmax == Some(target));
    Ok(())
}

/// Worker count from the environment, defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every configuration; output order is by configuration id.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<BatchResult> {
    run_batch_with_workers(cfg, worker_count())
}

pub fn run_batch_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<BatchResult> {
    cfg.validate()?;
    let ctx = BatchContext::new(cfg)?;
    let ids: Vec<usize> = match cfg.only {
        Some(id) => vec![id],
        None => (0..cfg.config_count).collect(),
    };
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<BatchResult>>> = Mutex::new(vec![None; ids.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, ids.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&id) = ids.get(k) else { break };
                let r = run_config(&ctx, cfg, id);
                slots.lock().expect("worker panicked")[k] = Some(r);
            });
        }
    });
    let mut out = BatchResult::default();
    for r in slots.into_inner().expect("worker panicked").into_iter().flatten() {
        out.configs.extend(r.configs);
        out.iterations.extend(r.iterations);
        out.spectra.extend(r.spectra);
    }
    Ok(out)
}

fn push(rows: &mut Vec<SummaryRow>, metric: &str, method: &str, nu: Option<usize>, value: f64) {
    rows.push(SummaryRow {
        metric: metric.into(),
        method: method.into(),
        nu,
        value,
    });
}

fn fraction(flags: impl Iterator<Item = bool>) -> f64 {
    let (mut yes, mut n) = (0usize, 0usize);
    for f in flags {
        yes += f as usize;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        yes as f64 / n as f64
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Summary statistics recomputable from the raw records alone.
pub fn summarize(result: &BatchResult) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let configs = &result.configs;
    push(&mut rows, "configs", "", None, configs.len() as f64);
    push(
        &mut rows,
        "failed",
        "",
        None,
        configs.iter().filter(|c| c.status != "ok").count() as f64,
    );

    if configs.iter().any(|c| c.rho_syn.is_some()) {
        // failed analyses count as not convergent
        push(
            &mut rows,
            "p_rho_lt_1",
            "gnbp-syn",
            None,
            fraction(configs.iter().map(|c| c.rho_syn.is_some_and(|r| r < 1.0))),
        );
        push(
            &mut rows,
            "p_rho_lt_1",
            "gnbp-rd",
            None,
            fraction(configs.iter().map(|c| c.rho_rd.is_some_and(|r| r < 1.0))),
        );
    }

    let mut methods: Vec<&str> = Vec::new();
    for it in &result.iterations {
        if !methods.contains(&it.method.as_str()) {
            methods.push(&it.method);
        }
    }
    methods.sort_unstable();
    for method in methods {
        let of_method: Vec<&IterationRecord> = result.iterations.iter().filter(|r| r.method == method).collect();
        if method != WLS_LABEL {
            push(
                &mut rows,
                "converged",
                method,
                None,
                fraction(configs.iter().filter_map(|c| c.schedule_converged(method))),
            );
        }
        let nu_count = of_method.iter().map(|r| r.nu + 1).max().unwrap_or(0);
        for nu in 0..nu_count {
            let at: Vec<&&IterationRecord> = of_method.iter().filter(|r| r.nu == nu).collect();
            let ratios: Vec<f64> = at
                .iter()
                .filter(|r| {
                    method == WLS_LABEL
                        || configs
                            .iter()
                            .find(|c| c.config_id == r.config_id)
                            .and_then(|c| c.schedule_converged(method))
                            .unwrap_or(false)
                })
                .filter_map(|r| r.wrss_ratio)
                .collect();
            if !ratios.is_empty() {
                let (mean, std) = mean_std(&ratios);
                push(&mut rows, "wrss_ratio_mean", method, Some(nu), mean);
                push(&mut rows, "wrss_ratio_std", method, Some(nu), std);
            }
            let mads: Vec<f64> = at.iter().map(|r| r.mad).collect();
            for (name, q) in [("mad_q1", 0.25), ("mad_median", 0.5), ("mad_q3", 0.75)] {
                if let Some(v) = quantile(&mads, q) {
                    push(&mut rows, name, method, Some(nu), v);
                }
            }
            let inner: Vec<f64> = at.iter().filter_map(|r| r.inner_iterations.map(|i| i as f64)).collect();
            if let Some(v) = quantile(&inner, 0.5) {
                push(&mut rows, "inner_iterations_median", method, Some(nu), v);
            }
        }
    }

    if configs.iter().any(|c| c.injected.is_some()) {
        let studied: Vec<&ConfigRecord> = configs.iter().filter(|c| c.injected.is_some()).collect();
        push(&mut rows, "bad_data_configs", "", None, studied.len() as f64);
        push(
            &mut rows,
            "hit_rate",
            "bpbdt",
            None,
            fraction(studied.iter().map(|c| c.bpbdt_hit == Some(true))),
        );
        push(
            &mut rows,
            "hit_rate",
            "lnrt",
            None,
            fraction(studied.iter().map(|c| c.lnrt_hit == Some(true))),
        );
        push(
            &mut rows,
            "flagged_hit_rate",
            "bpbdt",
            None,
            fraction(studied.iter().map(|c| c.bpbdt_suspect.is_some() && c.bpbdt_suspect == c.injected)),
        );
        push(
            &mut rows,
            "flagged_hit_rate",
            "lnrt",
            None,
            fraction(studied.iter().map(|c| c.lnrt_suspect.is_some() && c.lnrt_suspect == c.injected)),
        );
    }
    let clean_bp: Vec<f64> = configs
        .iter()
        .filter(|c| c.rd_converged.or(c.syn_converged) == Some(true))
        .filter_map(|c| c.clean_bpbdt)
        .collect();
    if let Some(k) = calibrate_kappa(&clean_bp) {
        push(&mut rows, "kappa_p99", "bpbdt", None, k);
    }
    let clean_ln: Vec<f64> = configs.iter().filter_map(|c| c.clean_lnrt).collect();
    if let Some(k) = calibrate_kappa(&clean_ln) {
        push(&mut rows, "kappa_p99", "lnrt", None, k);
    }
    rows
}

/// Empirical CDF points `(method, rho, F(rho))` of the per-configuration radii.
pub fn rho_cdf(configs: &[ConfigRecord]) -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    for (method, pick) in [
        ("gnbp-syn", (|c: &ConfigRecord| c.rho_syn) as fn(&ConfigRecord) -> Option<f64>),
        ("gnbp-rd", |c: &ConfigRecord| c.rho_rd),
    ] {
        let mut v: Vec<f64> = configs.iter().filter_map(pick).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        out.extend(v.into_iter().enumerate().map(|(i, r)| (method.to_string(), r, (i + 1) as f64 / n)));
    }
    out
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn cdf_csv(points: &[(String, f64, f64)]) -> String {
    let mut s = String::from("method,rho,cdf\n");
    for (m, r, f) in points {
        writeln!(s, "{m},{r},{f}").expect("write to string");
    }
    s
}

pub const CONFIGS_FILE: &str = "configs.csv";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const SPECTRA_FILE: &str = "spectra.csv";
pub const CDF_FILE: &str = "rho_cdf.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SCHEMA_FILE: &str = "schema.txt";

/// Writes every output file into `dir` and returns their paths.
pub fn write_outputs(result: &BatchResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (CONFIGS_FILE, to_csv(&result.configs)?),
        (ITERATIONS_FILE, to_csv(&result.iterations)?),
        (SPECTRA_FILE, to_csv(&result.spectra)?),
        (CDF_FILE, cdf_csv(&rho_cdf(&result.configs))),
        (SUMMARY_FILE, to_csv(&summarize(result))?),
        (SCHEMA_FILE, format!("{SCHEMA_VERSION}\n")),
    ];
    let mut paths = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

/// Reads the raw CSVs of an output directory.
pub fn read_outputs(dir: &Path) -> Result<BatchResult> {
    let schema = read(dir, SCHEMA_FILE)?;
    if schema.trim() != SCHEMA_VERSION.to_string() {
        return Err(Error::InvalidConfig(format!(
            "output schema {} does not match {SCHEMA_VERSION}",
            schema.trim()
        )));
    }
    Ok(BatchResult {
        configs: from_csv(&read(dir, CONFIGS_FILE)?)?,
        iterations: from_csv(&read(dir, ITERATIONS_FILE)?)?,
        spectra: from_csv(&read(dir, SPECTRA_FILE)?)?,
    })
}

/// Recomputes the summary from the raw CSVs and lists lines that differ
/// from the stored summary. Empty means consistent.
pub fn verify_outputs(dir: &Path) -> Result<Vec<String>> {
    let result = read_outputs(dir)?;
    let expected = to_csv(&summarize(&result))?;
    let stored = read(dir, SUMMARY_FILE)?;
    let mut diffs = Vec::new();
    let (a, b): (Vec<&str>, Vec<&str>) = (stored.lines().collect(), expected.lines().collect());
    for i in 0..a.len().max(b.len()) {
        let (x, y) = (a.get(i).copied().unwrap_or(""), b.get(i).copied().unwrap_or(""));
        if x != y {
            diffs.push(format!("line {}: stored `{x}` recomputed `{y}`", i + 1));
        }
    }
    Ok(diffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{observable_measurements, three_bus};
    use crate::measurement::{Location, Measurement, MeasurementKind};

    fn small(count: usize) -> ExperimentConfig {
        ExperimentConfig {
            case: "ieee14".into(),
            placement: PlacementConfig {
                gamma: 3.0,
                pmu_count: 3,
                ..PlacementConfig::default()
            },
            start: StartKind::Warm,
            schedules: vec![Schedule::Randomized],
            config_count: count,
            seed: 7,
            nu_max: 4,
            spectral_points: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn wrss_examples() {
        let net = three_bus();
        let x = solve_power_flow(&net, &PowerFlowSpec::from_network(&net), 1e-12, 20)
            .unwrap()
            .state;
        let ms = observable_measurements(&net, &x);
        assert_eq!(wrss(&net, &ms, &x), 0.0);
        let m = Measurement {
            kind: MeasurementKind::VoltageMagnitude,
            location: Location::Bus(1),
            z: x.v[1] + 0.01,
            variance: 1e-4,
            device_class: DeviceClass::Legacy,
        };
        let one = MeasurementSet::new(&net, vec![m]).unwrap();
        assert!((wrss(&net, &one, &x) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mad_examples() {
        assert_eq!(mad(&[0.0, 0.0]), 0.0);
        assert!((mad(&[0.1, -0.3]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(0);
        assert!(cfg.validate().is_err());
        cfg.config_count = 2;
        cfg.placement.gamma = 0.0;
        assert!(cfg.validate().is_err());
        cfg.placement.gamma = 3.0;
        cfg.only = Some(2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn presets_match_their_recipes() {
        let f5 = Preset::Fig5.config();
        assert_eq!((f5.tau_max.clone(), f5.stop, f5.spectral_points), (vec![5000], InnerStop::FixedCount, 12));
        let f6 = Preset::Fig6.config();
        assert_eq!((f6.nu_max, f6.tau_max.clone(), f6.stop), (4, vec![6000], InnerStop::Threshold));
        let f7 = Preset::Fig7.config();
        assert!(f7.bad_data.is_some());
        assert_eq!(f7.placement.pmu_count, 3);
        assert!(Preset::parse("fig8").is_none());
    }

    #[test]
    fn batch_rows_are_ordered_and_independent_of_workers() {
        let cfg = small(3);
        let a = run_batch_with_workers(&cfg, 1).unwrap();
        let b = run_batch_with_workers(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let ids: Vec<usize> = a.configs.iter().map(|c| c.config_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        // a single configuration reproduces its batch row
        let one = run_batch_with_workers(
            &ExperimentConfig {
                only: Some(1),
                ..cfg.clone()
            },
            1,
        )
        .unwrap();
        assert_eq!(one.configs[0], a.configs[1]);
    }

    #[test]
    fn outputs_round_trip_and_verify() {
        let mut cfg = small(2);
        cfg.bad_data = Some(BadDataStudy::default());
        let result = run_batch_with_workers(&cfg, 1).unwrap();
        assert!(result.configs.iter().all(|c| c.injected.is_some()));
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&result, dir.path()).unwrap();
        assert_eq!(read_outputs(dir.path()).unwrap(), result);
        assert!(verify_outputs(dir.path()).unwrap().is_empty());
        let summary = read(dir.path(), SUMMARY_FILE).unwrap();
        fs::write(dir.path().join(SUMMARY_FILE), summary.replacen("configs,,,2", "configs,,,3", 1)).unwrap();
        assert_eq!(verify_outputs(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn summary_counts_and_rates() {
        let mut a = ConfigRecord::new(0, 1);
        a.rho_syn = Some(1.2);
        a.rho_rd = Some(0.9);
        let mut b = ConfigRecord::new(1, 2);
        b.rho_syn = Some(0.5);
        b.rho_rd = Some(0.4);
        let mut c = ConfigRecord::new(2, 3);
        c.status = "spectral: failed".into();
        let rows = summarize(&BatchResult {
            configs: vec![a, b, c],
            ..BatchResult::default()
        });
        let get = |metric: &str, method: &str| {
            rows.iter()
                .find(|r| r.metric == metric && r.method == method)
                .unwrap()
                .value
        };
        assert_eq!(get("failed", ""), 1.0);
        assert!((get("p_rho_lt_1", "gnbp-syn") - 1.0 / 3.0).abs() < 1e-15);
        assert!((get("p_rho_lt_1", "gnbp-rd") - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one() {
        let configs: Vec<ConfigRecord> = [0.9, 1.3, 0.2]
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut c = ConfigRecord::new(i, 0);
                c.rho_syn = Some(*r);
                c
            })
            .collect();
        let cdf = rho_cdf(&configs);
        assert_eq!(
            cdf,
            vec![
                ("gnbp-syn".to_string(), 0.2, 1.0 / 3.0),
                ("gnbp-syn".to_string(), 0.9, 2.0 / 3.0),
                ("gnbp-syn".to_string(), 1.3, 1.0),
            ]
        );
    }

    #[test]
    fn pf_initial_start_uses_setpoints() {
        let net = crate::network::bundled_case("ieee14").unwrap().into_model().unwrap().0;
        let pf = PowerFlowSpec::from_network(&net);
        let StartMode::Warm(x) = StartKind::PfInitial.start_mode(&net, &pf, &StateVector::flat(14)) else {
            panic!("expected a fixed start");
        };
        assert!(x.theta.iter().all(|t| *t == 0.0));
        for (v, s) in x.v.iter().zip(&pf.voltage_setpoint) {
            assert_eq!(*v, s.unwrap_or(1.0));
        }
    }
}
