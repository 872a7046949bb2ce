//! Closed-loop voltage dynamics under the linearized power-flow model.
//!
//! The controllable part of the voltage is `X q`; a controller sets the rate
//! of change `u = dq/dt`. Time is discretized with explicit forward Euler.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{RadialNetwork, VoltageBand};
use crate::linalg::Matrix;
use crate::policy::Policy;

pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_BLOWUP: f64 = 10.0;
pub const TRAIN_HORIZON: usize = 30;
pub const EVAL_HORIZON: usize = 100;
/// Distance to the band below which a voltage profile counts as recovered.
pub const DEFAULT_RECOVERY_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("vector length {got} does not match bus count {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite control action at bus {bus}: {value}")]
    NonFiniteAction { bus: usize, value: f64 },
    #[error("step size must be positive and finite, got {0}")]
    StepSize(f64),
    #[error("invalid cost parameters: {0}")]
    Cost(String),
    #[error("scenario file: {0}")]
    File(String),
}

fn check_len(expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected != got {
        return Err(DynamicsError::Dimension { expected, got });
    }
    Ok(())
}

/// The controllable system: reactance sensitivities plus the voltage band.
#[derive(Debug, Clone)]
pub struct GridModel {
    pub x: Matrix,
    pub band: VoltageBand,
    pub v0: f64,
}

impl GridModel {
    pub fn from_network(net: &RadialNetwork) -> Self {
        Self {
            x: net.sensitivity().x,
            band: net.band(),
            v0: net.v0(),
        }
    }

    pub fn n(&self) -> usize {
        self.band.len()
    }
}

/// Reactive injections, voltages and the uncontrollable voltage component.
/// `v` is always recomputed as `X q + v_env`, never mutated on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    q: Vec<f64>,
    v: Vec<f64>,
    v_env: Vec<f64>,
}

impl GridState {
    pub fn new(x: &Matrix, q: Vec<f64>, v_env: Vec<f64>) -> Result<Self, DynamicsError> {
        check_len(x.rows(), q.len())?;
        check_len(x.rows(), v_env.len())?;
        let mut v = x.mul_vec(&q);
        for (vi, e) in v.iter_mut().zip(&v_env) {
            *vi += e;
        }
        Ok(Self { q, v, v_env })
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn v_env(&self) -> &[f64] {
        &self.v_env
    }

    /// Same injections under a new exogenous component.
    pub fn with_v_env(&self, x: &Matrix, v_env: Vec<f64>) -> Result<Self, DynamicsError> {
        Self::new(x, self.q.clone(), v_env)
    }
}

/// One forward-Euler step: `q' = q + dt·u`, `v' = X q' + v_env`.
pub fn step(state: &GridState, u: &[f64], dt: f64, x: &Matrix) -> Result<GridState, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::StepSize(dt));
    }
    check_len(state.q.len(), u.len())?;
    if let Some((bus, &value)) = u.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(DynamicsError::NonFiniteAction { bus, value });
    }
    let q = state.q.iter().zip(u).map(|(q, u)| q + dt * u).collect();
    GridState::new(x, q, state.v_env.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Weight on squared band violation.
    pub eta1: f64,
    /// Weight on squared control action.
    pub eta2: f64,
    /// Per-step discount.
    pub gamma: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            eta1: 100.0,
            eta2: 50.0,
            gamma: 0.99,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0) {
            return Err(DynamicsError::Cost("weights must be nonnegative".into()));
        }
        if self.eta1 == 0.0 && self.eta2 == 0.0 {
            return Err(DynamicsError::Cost("eta1 and eta2 cannot both be zero".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DynamicsError::Cost(format!("gamma {} not in (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Signed band violation: positive above the upper edge, negative below the
/// lower edge, zero inside.
#[inline]
pub fn band_violation(v: f64, lower: f64, upper: f64) -> f64 {
    (v - upper).max(0.0) + (v - lower).min(0.0)
}

/// Per-bus cost `eta1·dev² + eta2·u²`.
pub fn bus_cost(v: f64, u: f64, lower: f64, upper: f64, cp: &CostParams) -> f64 {
    let dev = band_violation(v, lower, upper);
    cp.eta1 * dev * dev + cp.eta2 * u * u
}

pub fn stage_cost(v: &[f64], u: &[f64], band: &VoltageBand, cp: &CostParams) -> f64 {
    v.iter()
        .zip(u)
        .enumerate()
        .map(|(i, (&vi, &ui))| bus_cost(vi, ui, band.lower[i], band.upper[i], cp))
        .sum()
}

/// Euclidean distance from `v` to the box of acceptable voltages.
pub fn dist_to_band(v: &[f64], band: &VoltageBand) -> f64 {
    v.iter()
        .enumerate()
        .map(|(i, &vi)| band_violation(vi, band.lower[i], band.upper[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    HighVoltage,
    LowVoltage,
    Mixed,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [Self::HighVoltage, Self::LowVoltage, Self::Mixed];

    pub fn label(self) -> &'static str {
        match self {
            Self::HighVoltage => "high",
            Self::LowVoltage => "low",
            Self::Mixed => "mixed",
        }
    }
}

/// Sampling ranges for disturbance scenarios. Violating buses draw their
/// exogenous voltage in `(edge, edge ± max_violation]`; the rest draw within
/// `v0 ± neutral_halfwidth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub max_violation: f64,
    pub neutral_halfwidth: f64,
    /// Probability that each bus is disturbed; at least one always is.
    pub violation_prob: f64,
    /// Standard deviation of the initial injections (0 gives `q0 = 0`).
    pub q0_std: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::HighVoltage,
            max_violation: 0.05,
            neutral_halfwidth: 0.02,
            violation_prob: 0.5,
            q0_std: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub v_env: Vec<f64>,
    pub q0: Vec<f64>,
    #[serde(default)]
    pub label: String,
}

/// Draws one disturbance scenario for the given band.
pub fn sample_scenario<R: Rng + ?Sized>(cfg: &ScenarioConfig, band: &VoltageBand, v0: f64, rng: &mut R) -> Scenario {
    let n = band.len();
    // Uniform on (0, max] so a disturbed bus is strictly outside the band.
    let excess = |rng: &mut R| cfg.max_violation * (1.0 - rng.random::<f64>());
    let mut v_env: Vec<f64> = (0..n)
        .map(|_| v0 + cfg.neutral_halfwidth * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let mut disturbed: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < cfg.violation_prob).collect();
    if !disturbed.iter().any(|&d| d) {
        disturbed[rng.random_range(0..n)] = true;
    }
    let mut high: Vec<bool> = match cfg.kind {
        ScenarioKind::HighVoltage => vec![true; n],
        ScenarioKind::LowVoltage => vec![false; n],
        ScenarioKind::Mixed => (0..n).map(|_| rng.random::<bool>()).collect(),
    };
    if cfg.kind == ScenarioKind::Mixed && n >= 2 {
        // Force both directions to appear.
        let picked: Vec<usize> = (0..n).filter(|&i| disturbed[i]).collect();
        let has_high = picked.iter().any(|&i| high[i]);
        let has_low = picked.iter().any(|&i| !high[i]);
        if !(has_high && has_low) {
            let (a, b) = if picked.len() >= 2 {
                (picked[0], picked[1])
            } else {
                let other = (picked[0] + 1 + rng.random_range(0..n - 1)) % n;
                disturbed[other] = true;
                (picked[0], other)
            };
            high[a] = true;
            high[b] = false;
        }
    }
    for i in 0..n {
        if disturbed[i] {
            let e = excess(rng);
            v_env[i] = if high[i] { band.upper[i] + e } else { band.lower[i] - e };
        }
    }
    let q0 = if cfg.q0_std > 0.0 {
        let normal = Normal::new(0.0, cfg.q0_std).expect("finite std");
        (0..n).map(|_| normal.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Scenario {
        v_env,
        q0,
        label: cfg.kind.label().to_string(),
    }
}

/// A seeded suite of `count` scenarios cycling through `kinds`.
pub fn scenario_suite(base: &ScenarioConfig, kinds: &[ScenarioKind], count: usize, band: &VoltageBand, v0: f64) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    (0..count)
        .map(|k| {
            let cfg = ScenarioConfig {
                kind: kinds[k % kinds.len()],
                ..base.clone()
            };
            sample_scenario(&cfg, band, v0, &mut rng)
        })
        .collect()
}

pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, DynamicsError> {
    let text = std::fs::read_to_string(path).map_err(|e| DynamicsError::File(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| DynamicsError::File(e.to_string()))
}

pub fn save_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<(), DynamicsError> {
    let text = serde_json::to_string_pretty(scenarios).map_err(|e| DynamicsError::File(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| DynamicsError::File(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub dt: f64,
    pub blowup: f64,
    pub cost: CostParams,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: EVAL_HORIZON,
            dt: DEFAULT_DT,
            blowup: DEFAULT_BLOWUP,
            cost: CostParams::default(),
        }
    }
}

/// A simulated closed-loop run. Holds `len()` states and one fewer actions;
/// a complete run has `horizon + 1` states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub horizon: usize,
    pub voltages: Vec<Vec<f64>>,
    pub injections: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Per-step, per-bus stage costs aligned with `actions`.
    pub bus_costs: Vec<Vec<f64>>,
    pub stage_costs: Vec<f64>,
    pub discounted_cost: f64,
    /// Set when the run was cut short by a blow-up or a non-finite action.
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.voltages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltages.is_empty()
    }

    pub fn final_voltage(&self) -> &[f64] {
        self.voltages.last().expect("trajectory holds the initial state")
    }

    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }
}

/// Noise-free closed-loop rollout with `u(t) = policy(v(t))`.
pub fn rollout<P: Policy + ?Sized>(
    policy: &P,
    model: &GridModel,
    v_env: &[f64],
    q0: &[f64],
    cfg: &RolloutConfig,
) -> Result<Trajectory, DynamicsError> {
    let env = v_env.to_vec();
    rollout_with(policy, model, q0, cfg, |_| env.as_slice())
}

/// Rollout where the exogenous component may change at every step.
pub fn rollout_with<'a, P: Policy + ?Sized>(
    policy: &P,
    model: &GridModel,
    q0: &[f64],
    cfg: &RolloutConfig,
    mut v_env_at: impl FnMut(usize) -> &'a [f64],
) -> Result<Trajectory, DynamicsError> {
    let n = model.n();
    check_len(n, q0.len())?;
    check_len(n, policy.n_buses())?;
    if !(cfg.dt.is_finite() && cfg.dt > 0.0) {
        return Err(DynamicsError::StepSize(cfg.dt));
    }
    let mut state = GridState::new(&model.x, q0.to_vec(), v_env_at(0).to_vec())?;
    let mut traj = Trajectory {
        dt: cfg.dt,
        horizon: cfg.horizon,
        voltages: vec![state.v.clone()],
        injections: vec![state.q.clone()],
        actions: Vec::with_capacity(cfg.horizon),
        bus_costs: Vec::with_capacity(cfg.horizon),
        stage_costs: Vec::with_capacity(cfg.horizon),
        discounted_cost: 0.0,
        diverged: false,
    };
    if blown_up(&state.v, cfg.blowup) {
        traj.diverged = true;
        return Ok(traj);
    }
    let mut u = vec![0.0; n];
    let mut discount = 1.0;
    for t in 0..cfg.horizon {
        policy.act(&state.v, &mut u);
        let costs: Vec<f64> = (0..n)
            .map(|i| bus_cost(state.v[i], u[i], model.band.lower[i], model.band.upper[i], &cfg.cost))
            .collect();
        let next = match step(&state, &u, cfg.dt, &model.x) {
            Ok(s) => s,
            Err(DynamicsError::NonFiniteAction { .. }) => {
                traj.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let c: f64 = costs.iter().sum();
        traj.discounted_cost += discount * c;
        discount *= cfg.cost.gamma;
        traj.stage_costs.push(c);
        traj.bus_costs.push(costs);
        traj.actions.push(u.clone());
        state = if t + 1 < cfg.horizon {
            next.with_v_env(&model.x, v_env_at(t + 1).to_vec())?
        } else {
            next
        };
        traj.voltages.push(state.v.clone());
        traj.injections.push(state.q.clone());
        if blown_up(&state.v, cfg.blowup) {
            traj.diverged = true;
            break;
        }
    }
    Ok(traj)
}

fn blown_up(v: &[f64], bound: f64) -> bool {
    v.iter().any(|x| !x.is_finite() || x.abs() > bound)
}

/// First step after which every remaining state lies within `tol` of the
/// band. `None` when the run never settles or was cut short by divergence.
pub fn recovery_time(traj: &Trajectory, band: &VoltageBand, tol: f64) -> Option<usize> {
    if traj.diverged {
        return None;
    }
    let mut first = None;
    for (t, v) in traj.voltages.iter().enumerate().rev() {
        if dist_to_band(v, band) <= tol {
            first = Some(t);
        } else {
            break;
        }
    }
    first
}

/// Piecewise-constant exogenous voltage trace loaded from `t,bus_id,v_env`
/// rows. `bus_id` uses network numbering (1..=n).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvTrace {
    pub times: Vec<f64>,
    pub v_env: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    t: f64,
    bus_id: usize,
    v_env: f64,
}

impl EnvTrace {
    pub fn from_csv<R: std::io::Read>(reader: R, n: usize) -> Result<Self, DynamicsError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows: Vec<TraceRow> = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec.map_err(|e| DynamicsError::File(e.to_string()))?);
        }
        rows.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.bus_id.cmp(&b.bus_id)));
        let mut times: Vec<f64> = Vec::new();
        let mut v_env: Vec<Vec<f64>> = Vec::new();
        let mut filled: Vec<Vec<bool>> = Vec::new();
        for row in rows {
            if row.bus_id == 0 || row.bus_id > n {
                return Err(DynamicsError::File(format!("bus_id {} outside 1..={n}", row.bus_id)));
            }
            if times.last() != Some(&row.t) {
                times.push(row.t);
                v_env.push(vec![f64::NAN; n]);
                filled.push(vec![false; n]);
            }
            let k = times.len() - 1;
            v_env[k][row.bus_id - 1] = row.v_env;
            filled[k][row.bus_id - 1] = true;
        }
        for (k, f) in filled.iter().enumerate() {
            if let Some(missing) = f.iter().position(|&x| !x) {
                return Err(DynamicsError::File(format!(
                    "time {} has no row for bus {}",
                    times[k],
                    missing + 1
                )));
            }
        }
        if times.is_empty() {
            return Err(DynamicsError::File("empty trace".into()));
        }
        Ok(Self { times, v_env })
    }

    pub fn load(path: &Path, n: usize) -> Result<Self, DynamicsError> {
        let file = std::fs::File::open(path).map_err(|e| DynamicsError::File(format!("{}: {e}", path.display())))?;
        Self::from_csv(file, n)
    }

    /// Exogenous voltages in force at time `t` (last sample at or before `t`).
    pub fn at(&self, t: f64) -> &[f64] {
        let k = self.times.partition_point(|&s| s <= t);
        &self.v_env[k.saturating_sub(1)]
    }
}

/// Replays a recorded exogenous trace; step `k` uses the sample at `k·dt`
/// measured from the first timestamp.
pub fn rollout_trace<P: Policy + ?Sized>(
    policy: &P,
    model: &GridModel,
    trace: &EnvTrace,
    q0: &[f64],
    cfg: &RolloutConfig,
) -> Result<Trajectory, DynamicsError> {
    let t0 = trace.times[0];
    rollout_with(policy, model, q0, cfg, |k| trace.at(t0 + k as f64 * cfg.dt))
}
