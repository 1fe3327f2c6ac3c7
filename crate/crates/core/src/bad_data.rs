//! Bad-data identification: the message-based test on a solved factor graph
//! and the largest normalized residual test on a WLS estimate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::factor_graph::{FactorGraph, FactorType};
use crate::gnbp::{solve, SolverConfig};
use crate::measurement::{check_observable, evaluate_h, DeviceClass, MeasurementSet};
use crate::network::NetworkModel;
use crate::power_flow::StateVector;
use crate::wls::{factor_normal_matrix, gauss_newton, linearize, GaussNewtonConfig};

/// 99th percentile of the no-bad-data statistic on IEEE 14-bus, γ = 3,
/// 3 PMUs, warm start, 300 configurations, seed 0, counting only runs whose
/// inner loops all converged. Regenerate with `scripts/calibrate_kappa.sh`.
pub const DEFAULT_KAPPA_BPBDT: f64 = 265.3;
pub const DEFAULT_KAPPA_LNRT: f64 = 3.887;

/// Residual-sensitivity diagonals below this fraction of `v_i` mark a
/// critical measurement.
const CRITICAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BadDataVerdict {
    /// Present iff `statistic > threshold`.
    pub suspect: Option<usize>,
    /// Measurement with the largest statistic, regardless of the threshold.
    pub argmax: Option<usize>,
    pub statistic: f64,
    pub threshold: f64,
    /// Per measurement; `None` where the test does not apply.
    pub statistics: Vec<Option<f64>>,
}

impl BadDataVerdict {
    fn from_statistics(statistics: Vec<Option<f64>>, threshold: f64) -> Self {
        let mut argmax = None;
        let mut statistic = 0.0;
        for (i, s) in statistics.iter().enumerate() {
            if let Some(s) = *s {
                if argmax.is_none() || s > statistic {
                    argmax = Some(i);
                    statistic = s;
                }
            }
        }
        let suspect = argmax.filter(|_| statistic > threshold);
        BadDataVerdict {
            suspect,
            argmax,
            statistic,
            threshold,
            statistics,
        }
    }
}

/// Factors that contribute a BP-BDT statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BdtScope {
    #[default]
    Indirect,
    /// Indirect factors plus direct measurement factors, whose message to
    /// their variable is `(r_i, v_i)`.
    AllMeasurements,
}

pub fn bp_bdt(graph: &FactorGraph, kappa: f64) -> BadDataVerdict {
    bp_bdt_with(graph, kappa, BdtScope::Indirect)
}

/// Per factor the largest `r²/v` over its factor-to-variable messages, then
/// the largest value over factors.
pub fn bp_bdt_with(graph: &FactorGraph, kappa: f64, scope: BdtScope) -> BadDataVerdict {
    let mut stats = vec![None; graph.measurements.len()];
    for f in &graph.factors {
        let Some(m) = f.measurement else { continue };
        let value = match f.node_type {
            FactorType::Indirect => graph.edges[graph.factor_edges[f.id].clone()]
                .iter()
                .map(|e| e.message_fv.mean * e.message_fv.mean / e.message_fv.variance)
                .fold(0.0, f64::max),
            FactorType::Direct if scope == BdtScope::AllMeasurements => f.residual * f.residual / f.variance,
            _ => continue,
        };
        stats[m] = Some(value);
    }
    BadDataVerdict::from_statistics(stats, kappa)
}

/// Normalized residuals `|r_i| / √Ω_ii` with `Ω = R − J·G⁻¹·Jᵀ` at `x_hat`.
/// Critical measurements (`Ω_ii ≈ 0`) are skipped.
pub fn lnrt(net: &NetworkModel, ms: &MeasurementSet, x_hat: &StateVector, kappa: f64) -> Result<BadDataVerdict> {
    let sys = linearize(net, ms, x_hat);
    let g_inv = factor_normal_matrix(&sys)?.inverse();
    let mut stats = vec![None; ms.len()];
    let mut critical = 0;
    for (i, m) in ms.iter().enumerate() {
        let row = &sys.rows[i];
        let mut hat = 0.0;
        for &(a, da) in row {
            for &(b, db) in row {
                hat += da * g_inv[(a, b)] * db;
            }
        }
        let omega = m.variance - hat;
        if omega <= CRITICAL_TOL * m.variance {
            critical += 1;
            continue;
        }
        stats[i] = Some(sys.residuals[i].abs() / omega.sqrt());
    }
    if critical > 0 {
        log::debug!("{critical} critical measurements excluded from the normalized residual test");
    }
    Ok(BadDataVerdict::from_statistics(stats, kappa))
}

/// Replaces the noise of one uniformly chosen legacy measurement with a draw
/// of standard deviation `sigma_multiple·σ_i`. Returns the corrupted set and
/// the index of the corrupted measurement.
pub fn inject_bad_data(
    net: &NetworkModel,
    ms: &MeasurementSet,
    x_exact: &StateVector,
    sigma_multiple: f64,
    rng: &mut impl Rng,
) -> Result<(MeasurementSet, usize)> {
    let legacy: Vec<usize> = ms
        .iter()
        .enumerate()
        .filter(|(_, m)| m.device_class == DeviceClass::Legacy)
        .map(|(i, _)| i)
        .collect();
    if legacy.is_empty() {
        return Err(Error::InvalidConfig("no legacy measurement to corrupt".into()));
    }
    if !(sigma_multiple > 0.0) {
        return Err(Error::InvalidConfig("bad-data multiple must be positive".into()));
    }
    let target = legacy[rng.random_range(0..legacy.len())];
    let mut out = ms.clone();
    let m = &mut out.measurements[target];
    let noise = Normal::new(0.0, sigma_multiple * m.variance.sqrt()).expect("positive deviation");
    m.z = evaluate_h(net, m, x_exact) + noise.sample(rng);
    Ok((out, target))
}

/// Linear-interpolation quantile (`q` in `[0, 1]`) of finite samples.
pub fn quantile(samples: &[f64], q: f64) -> Option<f64> {
    let mut s: Vec<f64> = samples.iter().copied().filter(|x| x.is_finite()).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

/// Threshold at the 99th percentile of bad-data-free statistics.
pub fn calibrate_kappa(clean_statistics: &[f64]) -> Option<f64> {
    quantile(clean_statistics, 0.99)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BadDataTest {
    BpBdt,
    Lnrt,
}

#[derive(Debug, Clone)]
pub struct CycleConfig {
    pub test: BadDataTest,
    pub kappa: f64,
    pub scope: BdtScope,
    pub solver: SolverConfig,
    pub gauss_newton: GaussNewtonConfig,
    pub max_cycles: usize,
}

impl CycleConfig {
    pub fn new(test: BadDataTest) -> Self {
        CycleConfig {
            test,
            kappa: match test {
                BadDataTest::BpBdt => DEFAULT_KAPPA_BPBDT,
                BadDataTest::Lnrt => DEFAULT_KAPPA_LNRT,
            },
            scope: BdtScope::default(),
            solver: SolverConfig::default(),
            gauss_newton: GaussNewtonConfig::default(),
            max_cycles: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleStop {
    /// The last test found no suspect.
    Clean,
    MaxCycles,
    /// The suspect is needed for observability and was kept.
    WouldBreakObservability(usize),
    /// The estimator did not converge; the verdict is unreliable.
    NotConverged,
}

#[derive(Debug, Clone)]
pub struct CycleReport {
    /// Removed measurements as indices into the original set.
    pub removed: Vec<usize>,
    pub verdicts: Vec<BadDataVerdict>,
    pub x_hat: StateVector,
    pub stop: CycleStop,
}

/// Alternates estimation, testing and removal of the suspect.
pub fn identify_eliminate_cycle(net: &NetworkModel, ms: &MeasurementSet, cfg: &CycleConfig) -> Result<CycleReport> {
    let mut current = ms.clone();
    // original index of each measurement still in `current`
    let mut origin: Vec<usize> = (0..ms.len()).collect();
    let mut removed = Vec::new();
    let mut verdicts = Vec::new();
    let mut cycle = 0;
    loop {
        let (x_hat, verdict, converged) = match cfg.test {
            BadDataTest::BpBdt => {
                let res = solve(net, &current, &cfg.solver)?;
                let v = bp_bdt_with(&res.graph, cfg.kappa, cfg.scope);
                (res.x_hat, v, res.converged)
            }
            BadDataTest::Lnrt => {
                let res = gauss_newton(net, &current, &cfg.gauss_newton)?;
                let v = lnrt(net, &current, &res.x_hat, cfg.kappa)?;
                (res.x_hat, v, res.converged)
            }
        };
        let suspect = verdict.suspect;
        verdicts.push(verdict);
        let stop = if !converged {
            Some(CycleStop::NotConverged)
        } else if let Some(s) = suspect {
            if cycle >= cfg.max_cycles {
                Some(CycleStop::MaxCycles)
            } else {
                let reduced = current.without(s);
                if check_observable(net, &reduced, &x_hat).is_err() {
                    Some(CycleStop::WouldBreakObservability(origin[s]))
                } else {
                    removed.push(origin.remove(s));
                    current = reduced;
                    cycle += 1;
                    None
                }
            }
        } else {
            Some(CycleStop::Clean)
        };
        if let Some(stop) = stop {
            return Ok(CycleReport {
                removed,
                verdicts,
                x_hat,
                stop,
            });
        }
    }
}
