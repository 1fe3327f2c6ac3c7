use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gnbp::bad_data::{BdtScope, DEFAULT_KAPPA_BPBDT, DEFAULT_KAPPA_LNRT};
use gnbp::error::{Error, Result};
use gnbp::experiments::{
    run_batch, to_csv, verify_outputs, write_outputs, wrss, BadDataStudy, ExperimentConfig, Preset, Schedule,
    StartKind, WLS_LABEL,
};
use gnbp::gnbp::{initial_state, solve, Damping, InnerStop, SolverConfig, DEFAULT_OUTER_TOL};
use gnbp::measurement::{synthesize_observable, PlacementConfig};
use gnbp::network::{open_case, CaseFile, NetworkModel};
use gnbp::power_flow::{solve_power_flow, PowerFlowSpec, StateVector, DEFAULT_MAX_ITER, DEFAULT_TOL};
use gnbp::wls::{gauss_newton, GaussNewtonConfig};

/// Power-system state estimation by Gauss-Newton belief propagation.
#[derive(Parser)]
#[command(name = "gnbp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the AC power flow and print the state.
    Powerflow {
        #[arg(long)]
        case: String,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a measurement set from the power-flow solution and write
    /// the case with a measurement section.
    Synth {
        #[arg(long)]
        case: String,
        #[command(flatten)]
        placement: PlacementArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the state from the case's measurements.
    Solve(SolveArgs),
    /// Spectral radii of the synchronous and damped schedules over random configurations.
    Converge {
        #[command(flatten)]
        batch: BatchArgs,
        /// Linearization points per configuration.
        #[arg(long, default_value_t = 12)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-bad-data identification over random configurations.
    Baddata {
        #[command(flatten)]
        batch: BatchArgs,
        /// Injected error standard deviation in units of the measurement σ.
        #[arg(long, default_value_t = 20.0)]
        bad_sigma: f64,
        #[arg(long, value_enum, default_value_t = TestArg::Both)]
        test: TestArg,
        #[arg(long, value_enum, default_value_t = ScopeArg::Indirect)]
        scope: ScopeArg,
        #[arg(long, default_value_t = DEFAULT_KAPPA_BPBDT)]
        kappa_bpbdt: f64,
        #[arg(long, default_value_t = DEFAULT_KAPPA_LNRT)]
        kappa_lnrt: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named experiment batch and write its CSV outputs.
    Experiment {
        #[arg(long, value_enum)]
        preset: PresetArg,
        /// Overrides the preset's case.
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        configs: Option<usize>,
        /// Rerun only this configuration id.
        #[arg(long)]
        config: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        pmus: Option<usize>,
        #[arg(long)]
        pmu_currents: Option<bool>,
        #[arg(long, value_enum)]
        start: Option<StartArg>,
        #[arg(long)]
        nu_max: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        tau_max: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        stop: Option<StopArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the summary of an experiment directory from its raw CSVs and diff it.
    Verify {
        #[arg(long)]
        dir: PathBuf,
    },
    /// 99th percentile of the bad-data statistics on clean configurations.
    CalibrateKappa {
        #[command(flatten)]
        batch: BatchArgs,
        #[arg(long, value_enum, default_value_t = ScopeArg::Indirect)]
        scope: ScopeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct PlacementArgs {
    /// Legacy redundancy (legacy measurements per state variable).
    #[arg(long, default_value_t = 3.0)]
    gamma: f64,
    #[arg(long, default_value_t = 3)]
    pmus: usize,
    #[arg(long, default_value_t = 1e-4)]
    legacy_var: f64,
    #[arg(long, default_value_t = 1e-10)]
    pmu_var: f64,
    /// PMUs also report branch current phasors.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pmu_currents: bool,
}

impl PlacementArgs {
    fn config(&self) -> PlacementConfig {
        PlacementConfig {
            gamma: self.gamma,
            pmu_count: self.pmus,
            legacy_variance: self.legacy_var,
            pmu_variance: self.pmu_var,
            pmu_currents: self.pmu_currents,
            ..PlacementConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct BatchArgs {
    #[arg(long)]
    case: String,
    #[arg(long, default_value_t = 300)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    placement: PlacementArgs,
    #[arg(long, value_enum, default_value_t = StartArg::Flat)]
    start: StartArg,
    #[arg(long, default_value_t = 0.8)]
    p: f64,
    #[arg(long, default_value_t = 0.4)]
    alpha1: f64,
    #[arg(long, default_value_t = 12)]
    nu_max: usize,
}

impl BatchArgs {
    fn config(&self) -> ExperimentConfig {
        ExperimentConfig {
            case: self.case.clone(),
            placement: self.placement.config(),
            start: self.start.into(),
            p: self.p,
            alpha1: self.alpha1,
            config_count: self.configs,
            seed: self.seed,
            nu_max: self.nu_max,
            ..ExperimentConfig::default()
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Case file or bundled case name. Without a measurement section the
    /// set is synthesized from the placement flags.
    #[arg(long)]
    case: String,
    #[arg(long, value_enum, default_value_t = MethodArg::Gnbp)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = StartArg::Flat)]
    start: StartArg,
    #[arg(long, value_enum, default_value_t = DampingArg::Off)]
    damping: DampingArg,
    #[arg(long, default_value_t = 0.8)]
    p: f64,
    #[arg(long, default_value_t = 0.4)]
    alpha1: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    nu_max: usize,
    /// One cap, or one per outer iteration separated by commas.
    #[arg(long, value_delimiter = ',', default_value = "6000")]
    tau_max: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1e-2,1e-4,1e-6,1e-8,1e-10")]
    epsilon: Vec<f64>,
    #[arg(long, value_enum, default_value_t = StopArg::Threshold)]
    stop: StopArg,
    #[arg(long, default_value_t = DEFAULT_OUTER_TOL)]
    outer_tol: f64,
    /// Draw a fresh damping mask every inner iteration (experimental).
    #[arg(long)]
    redraw_per_inner: bool,
    /// Write the final factor graph as JSON.
    #[arg(long)]
    dump_graph: Option<PathBuf>,
    /// Write the per-(ν, τ) largest message change as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write per-outer-iteration metrics as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    placement: PlacementArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gnbp,
    Wls,
}

#[derive(Clone, Copy, ValueEnum)]
enum StartArg {
    Flat,
    Warm,
    PfInitial,
}

impl From<StartArg> for StartKind {
    fn from(s: StartArg) -> Self {
        match s {
            StartArg::Flat => StartKind::Flat,
            StartArg::Warm => StartKind::Warm,
            StartArg::PfInitial => StartKind::PfInitial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DampingArg {
    Off,
    Rd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StopArg {
    Threshold,
    Fixed,
}

impl From<StopArg> for InnerStop {
    fn from(s: StopArg) -> Self {
        match s {
            StopArg::Threshold => InnerStop::Threshold,
            StopArg::Fixed => InnerStop::FixedCount,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TestArg {
    Bpbdt,
    Lnrt,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Indirect,
    All,
}

impl From<ScopeArg> for BdtScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Indirect => BdtScope::Indirect,
            ScopeArg::All => BdtScope::AllMeasurements,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Fig5,
    Fig6,
    Fig7,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Fig5 => Preset::Fig5,
            PresetArg::Fig6 => Preset::Fig6,
            PresetArg::Fig7 => Preset::Fig7,
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn power_flow_state(net: &NetworkModel) -> Result<StateVector> {
    Ok(solve_power_flow(net, &PowerFlowSpec::from_network(net), DEFAULT_TOL, DEFAULT_MAX_ITER)?.state)
}

#[derive(Serialize)]
struct StateRow {
    bus: usize,
    theta: f64,
    v: f64,
}

fn state_csv(net: &NetworkModel, x: &StateVector) -> Result<String> {
    let rows: Vec<StateRow> = (0..x.bus_count())
        .map(|i| StateRow {
            bus: net.buses()[i].id,
            theta: x.theta[i],
            v: x.v[i],
        })
        .collect();
    to_csv(&rows)
}

#[derive(Serialize)]
struct HistoryRow {
    method: &'static str,
    nu: usize,
    mad: f64,
    wrss: f64,
    inner_iterations: Option<usize>,
    inner_converged: Option<bool>,
}

fn run_solve(a: &SolveArgs) -> Result<()> {
    let (net, stored) = open_case(&a.case)?;
    let x_pf = power_flow_state(&net)?;
    let ms = match stored {
        Some(ms) => ms,
        None => synthesize_observable(&net, &x_pf, &a.placement.config(), a.seed, 100)?.0,
    };
    let start = StartKind::from(a.start).start_mode(&net, &PowerFlowSpec::from_network(&net), &x_pf);
    let (x_hat, history) = match a.method {
        MethodArg::Wls => {
            let gn = gauss_newton(
                &net,
                &ms,
                &GaussNewtonConfig {
                    start,
                    iterations: a.nu_max,
                    tol: a.outer_tol,
                    seed: a.seed,
                    ..GaussNewtonConfig::default()
                },
            )?;
            let rows = gn
                .mad
                .iter()
                .zip(&gn.trajectory[1..])
                .enumerate()
                .map(|(nu, (m, x))| HistoryRow {
                    method: WLS_LABEL,
                    nu,
                    mad: *m,
                    wrss: wrss(&net, &ms, x),
                    inner_iterations: None,
                    inner_converged: None,
                })
                .collect::<Vec<_>>();
            (gn.x_hat, rows)
        }
        MethodArg::Gnbp => {
            let (damping, schedule) = match a.damping {
                DampingArg::Off => (Damping::Off, Schedule::Synchronous),
                DampingArg::Rd => (
                    Damping::Randomized {
                        p: a.p,
                        alpha1: a.alpha1,
                    },
                    Schedule::Randomized,
                ),
            };
            let cfg = SolverConfig {
                start,
                nu_max: a.nu_max,
                tau_max: a.tau_max.clone(),
                epsilon: a.epsilon.clone(),
                stop: a.stop.into(),
                damping,
                redraw_per_inner: a.redraw_per_inner,
                seed: a.seed,
                outer_tol: a.outer_tol,
                trace: a.trace.is_some(),
                ..SolverConfig::default()
            };
            let res = solve(&net, &ms, &cfg)?;
            let mut x = initial_state(&net, &cfg.start, cfg.graph.slack_angle, cfg.seed);
            let mut rows = Vec::new();
            for r in &res.records {
                x = x.add(&r.increment);
                rows.push(HistoryRow {
                    method: schedule.label(),
                    nu: r.nu,
                    mad: r.mad,
                    wrss: wrss(&net, &ms, &x),
                    inner_iterations: Some(r.inner_iterations),
                    inner_converged: Some(r.inner_converged),
                });
            }
            if let Some(path) = &a.dump_graph {
                emit(Some(path), &res.graph.dump())?;
            }
            if let Some(path) = &a.trace {
                emit(Some(path), &to_csv(&res.trace)?)?;
            }
            if !res.converged {
                log::warn!("an inner loop did not meet its threshold");
            }
            (res.x_hat, rows)
        }
    };
    if let Some(path) = &a.history {
        emit(Some(path), &to_csv(&history)?)?;
    }
    emit(a.out.as_deref(), &state_csv(&net, &x_hat)?)
}

#[derive(Serialize)]
struct ConvergeRow {
    config_id: usize,
    nu: usize,
    rho_syn_nu: f64,
    rho_rd_nu: Option<f64>,
    rho_syn: Option<f64>,
    rho_rd: Option<f64>,
}

#[derive(Serialize)]
struct BadDataRow {
    config_id: usize,
    test: &'static str,
    injected: Option<usize>,
    suspect: Option<usize>,
    argmax: Option<usize>,
    statistic: Option<f64>,
    hit: Option<bool>,
    status: String,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Powerflow {
            case,
            tol,
            max_iter,
            out,
        } => {
            let (net, _) = open_case(&case)?;
            let sol = solve_power_flow(&net, &PowerFlowSpec::from_network(&net), tol, max_iter)?;
            let mut text = String::new();
            writeln!(text, "# iterations {} mismatch {:e}", sol.iterations, sol.mismatch).expect("write to string");
            text.push_str(&state_csv(&net, &sol.state)?);
            emit(out.as_deref(), &text)
        }
        Command::Synth {
            case,
            placement,
            seed,
            out,
        } => {
            let (net, _) = open_case(&case)?;
            let x = power_flow_state(&net)?;
            let (ms, attempt) = synthesize_observable(&net, &x, &placement.config(), seed, 100)?;
            if attempt > 0 {
                log::info!("placement redrawn {attempt} times for observability");
            }
            emit(out.as_deref(), &CaseFile::from_parts(&net, Some(&ms)).to_json())
        }
        Command::Solve(args) => run_solve(&args),
        Command::Converge { batch, points, out } => {
            let cfg = ExperimentConfig {
                schedules: Vec::new(),
                spectral_points: points,
                ..batch.config()
            };
            let result = run_batch(&cfg)?;
            let mut rows = Vec::new();
            for c in &result.configs {
                if c.status != "ok" {
                    log::warn!("config {}: {}", c.config_id, c.status);
                }
                rows.extend(result.spectra.iter().filter(|s| s.config_id == c.config_id).map(|s| ConvergeRow {
                    config_id: c.config_id,
                    nu: s.nu,
                    rho_syn_nu: s.rho_syn,
                    rho_rd_nu: s.rho_rd,
                    rho_syn: c.rho_syn,
                    rho_rd: c.rho_rd,
                }));
            }
            emit(out.as_deref(), &to_csv(&rows)?)
        }
        Command::Baddata {
            batch,
            bad_sigma,
            test,
            scope,
            kappa_bpbdt,
            kappa_lnrt,
            out,
        } => {
            let cfg = ExperimentConfig {
                schedules: vec![Schedule::Randomized],
                bad_data: Some(BadDataStudy {
                    sigma_multiple: bad_sigma,
                    scope: scope.into(),
                    kappa_bpbdt,
                    kappa_lnrt,
                }),
                ..batch.config()
            };
            let result = run_batch(&cfg)?;
            let mut rows = Vec::new();
            for c in &result.configs {
                if test != TestArg::Lnrt {
                    rows.push(BadDataRow {
                        config_id: c.config_id,
                        test: "bpbdt",
                        injected: c.injected,
                        suspect: c.bpbdt_suspect,
                        argmax: c.bpbdt_argmax,
                        statistic: c.bpbdt_stat,
                        hit: c.bpbdt_hit,
                        status: c.status.clone(),
                    });
                }
                if test != TestArg::Bpbdt {
                    rows.push(BadDataRow {
                        config_id: c.config_id,
                        test: "lnrt",
                        injected: c.injected,
                        suspect: c.lnrt_suspect,
                        argmax: c.lnrt_argmax,
                        statistic: c.lnrt_stat,
                        hit: c.lnrt_hit,
                        status: c.status.clone(),
                    });
                }
            }
            emit(out.as_deref(), &to_csv(&rows)?)
        }
        Command::Experiment {
            preset,
            case,
            configs,
            config,
            seed,
            gamma,
            pmus,
            pmu_currents,
            start,
            nu_max,
            tau_max,
            stop,
            out,
        } => {
            let mut cfg = Preset::from(preset).config();
            if let Some(v) = case {
                cfg.case = v;
            }
            if let Some(v) = configs {
                cfg.config_count = v;
            }
            cfg.only = config;
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = gamma {
                cfg.placement.gamma = v;
            }
            if let Some(v) = pmus {
                cfg.placement.pmu_count = v;
            }
            if let Some(v) = pmu_currents {
                cfg.placement.pmu_currents = v;
            }
            if let Some(v) = start {
                cfg.start = v.into();
            }
            if let Some(v) = nu_max {
                cfg.nu_max = v;
                cfg.spectral_points = cfg.spectral_points.min(v);
            }
            if let Some(v) = tau_max {
                cfg.tau_max = v;
            }
            if let Some(v) = stop {
                cfg.stop = v.into();
            }
            let result = run_batch(&cfg)?;
            for path in write_outputs(&result, &out)? {
                log::info!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Verify { dir } => {
            let diffs = verify_outputs(&dir)?;
            if diffs.is_empty() {
                println!("summary consistent with raw records");
                Ok(())
            } else {
                for d in &diffs {
                    eprintln!("{d}");
                }
                Err(Error::InvalidConfig(format!("{} summary lines differ", diffs.len())))
            }
        }
        Command::CalibrateKappa { batch, scope, out } => {
            let cfg = ExperimentConfig {
                schedules: vec![Schedule::Randomized],
                bad_data: Some(BadDataStudy {
                    scope: scope.into(),
                    ..BadDataStudy::default()
                }),
                ..batch.config()
            };
            let result = run_batch(&cfg)?;
            let rows: Vec<_> = gnbp::experiments::summarize(&result)
                .into_iter()
                .filter(|r| r.metric == "kappa_p99")
                .collect();
            emit(out.as_deref(), &to_csv(&rows)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
