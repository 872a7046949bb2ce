//! Benchmark protocol: noise-free rollouts of several controllers on one
//! shared scenario suite, aggregate metrics and CSV export.

pub mod cli;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    recovery_time, rollout, CostParams, DynamicsError, GridModel, RolloutConfig, Scenario, Trajectory,
    DEFAULT_BLOWUP, DEFAULT_RECOVERY_TOL, EVAL_HORIZON,
};
use crate::grid::VoltageBand;
use crate::hash::config_hash;
use crate::policy::Policy;
use crate::rl::{fmt_float, PROTOCOL_DT};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("scenario suite is empty")]
    NoScenarios,
    #[error("no policies to evaluate")]
    NoPolicies,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub horizon: usize,
    pub dt: f64,
    pub blowup: f64,
    pub cost: CostParams,
    pub recovery_tol: f64,
    /// Histogram of terminal relative deviation `(v_T - v0)/v0`.
    pub hist_bins: usize,
    pub hist_range: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon: EVAL_HORIZON,
            dt: PROTOCOL_DT,
            blowup: DEFAULT_BLOWUP,
            cost: CostParams::default(),
            recovery_tol: DEFAULT_RECOVERY_TOL,
            hist_bins: 40,
            hist_range: (-0.1, 0.1),
        }
    }
}

impl EvalConfig {
    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            horizon: self.horizon,
            dt: self.dt,
            blowup: self.blowup,
            cost: self.cost,
        }
    }
}

/// `Σ_{t < t_rec} Σ_i |q_i(t)|`, summed over the whole run when the
/// trajectory never recovers.
pub fn transient_cost(traj: &Trajectory, band: &VoltageBand, tol: f64) -> f64 {
    let end = recovery_time(traj, band, tol)
        .unwrap_or(traj.horizon)
        .min(traj.injections.len());
    traj.injections[..end]
        .iter()
        .map(|q| q.iter().map(|x| x.abs()).sum::<f64>())
        .sum()
}

/// Metrics of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub recovery_time: Option<usize>,
    pub transient_cost: f64,
    pub control_effort_u2: f64,
    pub total_cost: f64,
    pub diverged: bool,
    pub final_voltage: Vec<f64>,
}

fn outcome(traj: &Trajectory, band: &VoltageBand, tol: f64) -> ScenarioOutcome {
    let rec = recovery_time(traj, band, tol);
    let end = rec.unwrap_or(traj.horizon).min(traj.actions.len());
    ScenarioOutcome {
        recovery_time: rec,
        transient_cost: transient_cost(traj, band, tol),
        control_effort_u2: traj.actions[..end]
            .iter()
            .map(|u| u.iter().map(|x| x * x).sum::<f64>() * traj.dt)
            .sum(),
        total_cost: traj.total_cost(),
        diverged: traj.diverged,
        final_voltage: traj.final_voltage().to_vec(),
    }
}

/// Mean and population standard deviation, with compensated summation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = neumaier_sum(xs.iter().copied()) / n as f64;
        let var = neumaier_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / n as f64;
        Self {
            mean,
            std: var.max(0.0).sqrt(),
            n,
        }
    }
}

fn neumaier_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub name: String,
    /// Steps to recovery; unrecovered runs count as the horizon.
    pub recovery_time: Stat,
    /// Steps to recovery over recovered runs only.
    pub recovery_time_recovered: Stat,
    pub transient_cost: Stat,
    pub control_effort_u2: Stat,
    pub total_cost: Stat,
    pub stability_rate: f64,
    /// `(v_T - v0)⁺ / v0` over every scenario and bus.
    pub over_voltage_ratio: Stat,
    /// `(v0 - v_T)⁺ / v0` over every scenario and bus.
    pub under_voltage_ratio: Stat,
    pub outcomes: Vec<ScenarioOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policies: Vec<PolicyReport>,
    pub scenario_count: usize,
    pub scenario_hash: String,
    pub config_hash: String,
}

impl EvalReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.name == name)
    }
}

/// Runs every policy on every scenario without exploration noise.
pub fn evaluate(
    policies: &[(&str, &dyn Policy)],
    model: &GridModel,
    scenarios: &[Scenario],
    cfg: &EvalConfig,
) -> Result<EvalReport, BenchError> {
    if scenarios.is_empty() {
        return Err(BenchError::NoScenarios);
    }
    if policies.is_empty() {
        return Err(BenchError::NoPolicies);
    }
    let rcfg = cfg.rollout_config();
    let mut reports = Vec::with_capacity(policies.len());
    for &(name, policy) in policies {
        let outcomes = scenarios
            .par_iter()
            .map(|s| rollout(policy, model, &s.v_env, &s.q0, &rcfg).map(|t| outcome(&t, &model.band, cfg.recovery_tol)))
            .collect::<Result<Vec<_>, _>>()?;
        reports.push(summarize(name, &outcomes, cfg.horizon, model.v0));
        reports.last_mut().expect("pushed").outcomes = outcomes;
    }
    Ok(EvalReport {
        policies: reports,
        scenario_count: scenarios.len(),
        scenario_hash: config_hash(scenarios),
        config_hash: config_hash(cfg),
    })
}

fn summarize(name: &str, outcomes: &[ScenarioOutcome], horizon: usize, v0: f64) -> PolicyReport {
    let col = |f: &dyn Fn(&ScenarioOutcome) -> f64| -> Vec<f64> { outcomes.iter().map(f).collect() };
    let recovered: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.recovery_time.map(|t| t as f64))
        .collect();
    let over: Vec<f64> = outcomes
        .iter()
        .flat_map(|o| o.final_voltage.iter().map(|v| (v - v0).max(0.0) / v0))
        .collect();
    let under: Vec<f64> = outcomes
        .iter()
        .flat_map(|o| o.final_voltage.iter().map(|v| (v0 - v).max(0.0) / v0))
        .collect();
    PolicyReport {
        name: name.to_string(),
        recovery_time: Stat::of(&col(&|o| o.recovery_time.unwrap_or(horizon) as f64)),
        recovery_time_recovered: Stat::of(&recovered),
        transient_cost: Stat::of(&col(&|o| o.transient_cost)),
        control_effort_u2: Stat::of(&col(&|o| o.control_effort_u2)),
        total_cost: Stat::of(&col(&|o| o.total_cost)),
        stability_rate: recovered.len() as f64 / outcomes.len() as f64,
        over_voltage_ratio: Stat::of(&over),
        under_voltage_ratio: Stat::of(&under),
        outcomes: Vec::new(),
    }
}

/// Report CSV: `policy,metric,mean,std,n`.
pub fn write_report_csv<W: Write>(report: &EvalReport, w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "metric", "mean", "std", "n"])?;
    for p in &report.policies {
        let rows: [(&str, Stat); 7] = [
            ("recovery_time", p.recovery_time),
            ("recovery_time_recovered", p.recovery_time_recovered),
            ("transient_cost", p.transient_cost),
            ("control_effort_u2", p.control_effort_u2),
            ("total_cost", p.total_cost),
            ("over_voltage_ratio", p.over_voltage_ratio),
            ("under_voltage_ratio", p.under_voltage_ratio),
        ];
        for (metric, s) in rows {
            out.write_record([
                p.name.clone(),
                metric.to_string(),
                fmt_float(s.mean),
                fmt_float(s.std),
                s.n.to_string(),
            ])?;
        }
        out.write_record([
            p.name.clone(),
            "stability_rate".to_string(),
            fmt_float(p.stability_rate),
            fmt_float(0.0),
            report.scenario_count.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Trajectory CSV: `t,bus,v,q,u,cost`. The final state has no action, so
/// its `u` and `cost` are empty.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "bus", "v", "q", "u", "cost"])?;
    for (t, (v, q)) in traj.voltages.iter().zip(&traj.injections).enumerate() {
        for i in 0..v.len() {
            let (u, c) = match (traj.actions.get(t), traj.bus_costs.get(t)) {
                (Some(u), Some(c)) => (fmt_float(u[i]), fmt_float(c[i])),
                _ => (String::new(), String::new()),
            };
            out.write_record([t.to_string(), (i + 1).to_string(), fmt_float(v[i]), fmt_float(q[i]), u, c])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-step voltage traces for plotting: `policy,scenario,t,bus,v`.
pub fn write_voltage_traces<W: Write>(
    policies: &[(&str, &dyn Policy)],
    model: &GridModel,
    scenarios: &[Scenario],
    cfg: &EvalConfig,
    w: W,
) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "scenario", "t", "bus", "v"])?;
    let rcfg = cfg.rollout_config();
    for &(name, policy) in policies {
        let trajs = scenarios
            .par_iter()
            .map(|s| rollout(policy, model, &s.v_env, &s.q0, &rcfg))
            .collect::<Result<Vec<_>, _>>()?;
        for (k, traj) in trajs.iter().enumerate() {
            for (t, v) in traj.voltages.iter().enumerate() {
                for (i, vi) in v.iter().enumerate() {
                    out.write_record([name.to_string(), k.to_string(), t.to_string(), (i + 1).to_string(), fmt_float(*vi)])?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Counts of terminal relative deviation `(v_T - v0)/v0`; values outside
/// the range land in the edge bins so every (scenario, bus) is counted.
pub fn terminal_histogram(report: &PolicyReport, v0: f64, cfg: &EvalConfig) -> Vec<(f64, f64, usize)> {
    let (lo, hi) = cfg.hist_range;
    let k = cfg.hist_bins.max(1);
    let width = (hi - lo) / k as f64;
    let mut counts = vec![0usize; k];
    for o in &report.outcomes {
        for v in &o.final_voltage {
            let r = (v - v0) / v0;
            let idx = if r.is_nan() {
                0
            } else {
                (((r - lo) / width).floor().max(0.0) as usize).min(k - 1)
            };
            counts[idx] += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect()
}

/// Histogram CSV: `policy,bin_lo,bin_hi,count`.
pub fn write_histograms<W: Write>(report: &EvalReport, v0: f64, cfg: &EvalConfig, w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "bin_lo", "bin_hi", "count"])?;
    for p in &report.policies {
        for (lo, hi, c) in terminal_histogram(p, v0, cfg) {
            out.write_record([p.name.clone(), fmt_float(lo), fmt_float(hi), c.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{scenario_suite, ScenarioConfig, ScenarioKind};
    use crate::grid::RadialNetwork;
    use crate::policy::{LinearDeadband, ZeroPolicy};

    fn traj_with(q: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Trajectory {
        let steps = v.len() - 1;
        Trajectory {
            dt: 1.0,
            horizon: steps,
            voltages: v,
            injections: q,
            actions: vec![vec![0.0]; steps],
            bus_costs: vec![vec![0.0]; steps],
            stage_costs: vec![0.0; steps],
            discounted_cost: 0.0,
            diverged: false,
        }
    }

    #[test]
    fn transient_cost_hand_sum() {
        let band = VoltageBand::uniform(1, 0.95, 1.05);
        let t = traj_with(
            vec![vec![-0.1], vec![0.2], vec![-0.3], vec![0.4]],
            vec![vec![1.2], vec![1.1], vec![1.06], vec![1.0]],
        );
        // Recovers at step 3: sum |q| over steps 0..3.
        assert!((transient_cost(&t, &band, 0.0) - 0.6).abs() < 1e-15);
        let inband = traj_with(vec![vec![5.0], vec![5.0]], vec![vec![1.0], vec![1.0]]);
        assert_eq!(transient_cost(&inband, &band, 0.0), 0.0);
    }

    #[test]
    fn zero_policy_never_stabilizes() {
        let net = RadialNetwork::five_bus();
        let model = GridModel::from_network(&net);
        let suite = scenario_suite(&ScenarioConfig::default(), &ScenarioKind::ALL, 12, &model.band, model.v0);
        let zero = ZeroPolicy::with_band(model.band.clone());
        let lin = LinearDeadband::new(model.band.clone());
        let cfg = EvalConfig::default();
        let rep = evaluate(&[("zero", &zero), ("linear", &lin)], &model, &suite, &cfg).unwrap();
        let z = rep.policy("zero").unwrap();
        assert_eq!(z.stability_rate, 0.0);
        assert_eq!(z.control_effort_u2.mean, 0.0);
        let l = rep.policy("linear").unwrap();
        assert_eq!(l.stability_rate, 1.0);
        for p in &rep.policies {
            let total: usize = terminal_histogram(p, model.v0, &cfg).iter().map(|b| b.2).sum();
            assert_eq!(total, 12 * model.n());
        }
    }

    #[test]
    fn empty_suite_is_an_error() {
        let model = GridModel::from_network(&RadialNetwork::five_bus());
        let zero = ZeroPolicy::with_band(model.band.clone());
        assert!(matches!(
            evaluate(&[("zero", &zero)], &model, &[], &EvalConfig::default()),
            Err(BenchError::NoScenarios)
        ));
    }

    #[test]
    fn compensated_sum_is_exact_on_cancellation() {
        assert_eq!(neumaier_sum([1e16, 1.0, -1e16].into_iter()), 1.0);
        let s = Stat::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!((s.mean, s.std), (5.0, 2.0));
    }
}
