use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::buffer::{ReplayBuffer, Transition};
use super::net::{soft_update, BatchCache, FeedForwardNet, ForwardCache};
use super::optim::{Optimizer, OptimizerKind};
use super::RlError;
use crate::dynamics::{
    bus_cost, sample_scenario, step, CostParams, GridModel, GridState, ScenarioConfig, ScenarioKind, DEFAULT_BLOWUP,
    TRAIN_HORIZON,
};
use crate::grid::VoltageBand;
use crate::policy::{constrain, LocalPolicy, MonotonePolicy, Policy, RawPolicyParams, DEFAULT_EPS, DEFAULT_HIDDEN};

/// Time step used by the training and benchmark protocol.
pub const PROTOCOL_DT: f64 = 1.5;
/// Voltage deviations are fed to networks in units of this many p.u.
pub const INPUT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    /// Monotone stacked-ReLU actor trained through the constraint map.
    Stable,
    /// Plain MLP actor per bus.
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentScope {
    /// One critic per bus on `(v_i, u_i)`.
    Decentralized,
    /// One critic on the full `(v, u)` with the total reward. Actors stay
    /// local in both modes.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub optimizer: OptimizerKind,
    pub noise_std: f64,
    /// Exploration noise is clipped to `± noise_clip · noise_std`.
    pub noise_clip: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub tau: f64,
    pub episodes: usize,
    pub episode_length: usize,
    /// Gradient steps after each episode.
    pub updates_per_episode: usize,
    pub dt: f64,
    pub blowup: f64,
    pub seed: u64,
    pub scope: AgentScope,
    /// Decentralized critics regress on their own bus cost instead of the
    /// total stage cost.
    pub local_reward: bool,
    pub actor: ActorKind,
    /// Stacked-ReLU width per side.
    pub hidden: usize,
    pub eps: f64,
    /// Std of the Gaussian used to initialize raw stacked-ReLU parameters.
    pub raw_init_std: f64,
    /// Mean of the raw slope parameters at initialization.
    pub raw_slope_init_mean: f64,
    pub actor_layers: Vec<usize>,
    pub critic_layers: Vec<usize>,
    pub cost: CostParams,
    pub scenario: ScenarioConfig,
    /// When false, `wall_ms` is logged as 0 so logs are bit-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            actor_lr: 1e-3,
            critic_lr: 2e-4,
            optimizer: OptimizerKind::Adam,
            noise_std: 0.05,
            noise_clip: 3.0,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            tau: 1e-2,
            episodes: 200,
            episode_length: TRAIN_HORIZON,
            updates_per_episode: TRAIN_HORIZON,
            dt: PROTOCOL_DT,
            blowup: DEFAULT_BLOWUP,
            seed: 0,
            scope: AgentScope::Joint,
            local_reward: false,
            actor: ActorKind::Stable,
            hidden: DEFAULT_HIDDEN,
            eps: DEFAULT_EPS,
            raw_init_std: 0.1,
            raw_slope_init_mean: 0.0,
            actor_layers: vec![100, 100],
            critic_layers: vec![100, 100],
            cost: CostParams::default(),
            scenario: ScenarioConfig::default(),
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for the unconstrained baseline (longer schedule).
    pub fn unconstrained() -> Self {
        Self {
            actor: ActorKind::Unconstrained,
            episodes: 600,
            ..Self::default()
        }
    }

    /// Wider stacked-ReLU actor matching the larger network preset.
    pub fn wide() -> Self {
        Self {
            hidden: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !pos(self.actor_lr) || !pos(self.critic_lr) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return bad("batch size must be in 1..=buffer capacity");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) || !pos(self.noise_clip) {
            return bad("noise std must be nonnegative and clip positive");
        }
        if !pos(self.dt) || !pos(self.blowup) {
            return bad("dt and blow-up bound must be positive");
        }
        if self.episode_length == 0 {
            return bad("episode length must be positive");
        }
        if self.hidden < 2 || !pos(self.eps) {
            return bad("stacked width must be >= 2 and eps positive");
        }
        if !(self.raw_init_std.is_finite() && self.raw_init_std >= 0.0) || !self.raw_slope_init_mean.is_finite() {
            return bad("raw initialization must be finite");
        }
        if self.actor_layers.contains(&0) || self.critic_layers.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        self.cost.validate().map_err(|e| RlError::Config(e.to_string()))
    }
}

/// Local MLP controller, one network per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub nets: Vec<FeedForwardNet>,
    band: VoltageBand,
}

impl MlpPolicy {
    pub fn new(nets: Vec<FeedForwardNet>, band: VoltageBand) -> Self {
        assert_eq!(nets.len(), band.len());
        Self { nets, band }
    }
}

impl LocalPolicy for MlpPolicy {
    fn local_action(&self, bus: usize, v: f64) -> f64 {
        self.nets[bus].forward(&[v]).map(|o| o[0]).unwrap_or(f64::NAN)
    }
    fn local_slope(&self, bus: usize, v: f64) -> f64 {
        self.nets[bus].input_gradient(&[v], 0).map(|g| g[0]).unwrap_or(f64::NAN)
    }
    fn band(&self) -> &VoltageBand {
        &self.band
    }
    fn lipschitz(&self) -> f64 {
        self.nets.iter().map(FeedForwardNet::lipschitz_bound).fold(0.0, f64::max)
    }
}
crate::impl_policy_via_local!(MlpPolicy);

/// A frozen trained controller of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedPolicy {
    Stable { raw: RawPolicyParams, policy: MonotonePolicy },
    Mlp(MlpPolicy),
}

impl TrainedPolicy {
    /// Actions of bus `bus` at each voltage in `vs`.
    pub fn local_actions(&self, bus: usize, vs: &[f64]) -> Vec<f64> {
        match self {
            Self::Stable { policy, .. } => vs.iter().map(|&v| policy.local_action(bus, v)).collect(),
            Self::Mlp(p) => {
                let mut cache = BatchCache::default();
                p.nets[bus].forward_batch(vs, vs.len(), &mut cache).expect("scalar input");
                p.nets[bus].batch_output(&cache).to_vec()
            }
        }
    }
}

impl LocalPolicy for TrainedPolicy {
    fn local_action(&self, bus: usize, v: f64) -> f64 {
        match self {
            Self::Stable { policy, .. } => policy.local_action(bus, v),
            Self::Mlp(p) => p.local_action(bus, v),
        }
    }
    fn local_slope(&self, bus: usize, v: f64) -> f64 {
        match self {
            Self::Stable { policy, .. } => policy.local_slope(bus, v),
            Self::Mlp(p) => p.local_slope(bus, v),
        }
    }
    fn band(&self) -> &VoltageBand {
        match self {
            Self::Stable { policy, .. } => policy.band(),
            Self::Mlp(p) => p.band(),
        }
    }
    fn lipschitz(&self) -> f64 {
        match self {
            Self::Stable { policy, .. } => policy.lipschitz(),
            Self::Mlp(p) => p.lipschitz(),
        }
    }
}
crate::impl_policy_via_local!(TrainedPolicy);

/// Something that scores `(v, u)` and exposes `∂Q/∂u`.
pub trait ActionValue {
    /// Returns `Q(v, u)` and writes `∂Q/∂u` into `du`.
    fn value_and_action_grad(&self, v: &[f64], u: &[f64], du: &mut [f64]) -> f64;

    /// Row-wise `∂Q/∂u` for `batch` row-major pairs of `(v, u)`.
    fn batch_action_grad(&self, vs: &[f64], us: &[f64], batch: usize, du: &mut [f64]) {
        let dim = us.len() / batch.max(1);
        for b in 0..batch {
            let r = b * dim..(b + 1) * dim;
            self.value_and_action_grad(&vs[r.clone()], &us[r.clone()], &mut du[r]);
        }
    }
}

impl ActionValue for FeedForwardNet {
    fn value_and_action_grad(&self, v: &[f64], u: &[f64], du: &mut [f64]) -> f64 {
        let input: Vec<f64> = v.iter().chain(u).copied().collect();
        let mut cache = ForwardCache::default();
        self.forward_cached(&input, &mut cache).expect("critic input shape");
        let q = self.cached_output(&cache)[0];
        let mut ig = vec![0.0; input.len()];
        self.backward_input(&mut cache, &[1.0], &mut ig);
        du.copy_from_slice(&ig[v.len()..]);
        q
    }

    fn batch_action_grad(&self, vs: &[f64], us: &[f64], batch: usize, du: &mut [f64]) {
        let dim = us.len() / batch.max(1);
        let mut input = Vec::with_capacity(2 * dim * batch);
        for b in 0..batch {
            input.extend_from_slice(&vs[b * dim..(b + 1) * dim]);
            input.extend_from_slice(&us[b * dim..(b + 1) * dim]);
        }
        let mut cache = BatchCache::default();
        self.forward_batch(&input, batch, &mut cache).expect("critic input shape");
        let mut ig = vec![0.0; input.len()];
        self.backward_batch(&mut cache, &vec![1.0; batch], None, Some(&mut ig));
        for b in 0..batch {
            du[b * dim..(b + 1) * dim].copy_from_slice(&ig[(2 * b + 1) * dim..(2 * b + 2) * dim]);
        }
    }
}

/// Adapts a closure `(v, u, du) -> Q` into an [`ActionValue`].
pub struct FnCritic<F>(pub F);

impl<F: Fn(&[f64], &[f64], &mut [f64]) -> f64> ActionValue for FnCritic<F> {
    fn value_and_action_grad(&self, v: &[f64], u: &[f64], du: &mut [f64]) -> f64 {
        (self.0)(v, u, du)
    }
}

/// Critic regression sample: input `(v, u)`, reward and the target-network
/// input `(v', g_target(v'))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSample {
    pub input: Vec<f64>,
    pub reward: f64,
    pub next_input: Vec<f64>,
}

/// One gradient step on the mean squared TD error. Returns the loss before
/// the step.
pub fn critic_update(
    critic: &mut FeedForwardNet,
    opt: &mut Optimizer,
    target: &FeedForwardNet,
    batch: &[CriticSample],
    gamma: f64,
) -> Result<f64, RlError> {
    let (loss, grad) = critic_loss_grad(critic, target, batch, gamma)?;
    opt.step(critic.params_mut(), &grad);
    Ok(loss)
}

fn critic_loss_grad(
    critic: &FeedForwardNet,
    target: &FeedForwardNet,
    batch: &[CriticSample],
    gamma: f64,
) -> Result<(f64, Vec<f64>), RlError> {
    if batch.is_empty() {
        return Err(RlError::Config("empty critic batch".into()));
    }
    let b = batch.len();
    let scale = 1.0 / b as f64;
    let mut cache = BatchCache::default();
    let targets: Vec<f64> = if gamma == 0.0 {
        batch.iter().map(|s| s.reward).collect()
    } else {
        let next: Vec<f64> = batch.iter().flat_map(|s| s.next_input.iter().copied()).collect();
        target.forward_batch(&next, b, &mut cache)?;
        batch
            .iter()
            .zip(target.batch_output(&cache))
            .map(|(s, q)| s.reward + gamma * q)
            .collect()
    };
    let input: Vec<f64> = batch.iter().flat_map(|s| s.input.iter().copied()).collect();
    critic.forward_batch(&input, b, &mut cache)?;
    let mut loss = 0.0;
    let upstream: Vec<f64> = critic
        .batch_output(&cache)
        .iter()
        .zip(&targets)
        .map(|(q, y)| {
            let err = q - y;
            loss += scale * err * err;
            2.0 * scale * err
        })
        .collect();
    let mut grad = vec![0.0; critic.param_count()];
    critic.backward_batch(&mut cache, &upstream, Some(&mut grad), None);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(RlError::NonFinite(format!("critic TD loss ({loss})")));
    }
    Ok((loss, grad))
}

/// Trainable actor state.
#[derive(Debug, Clone, PartialEq)]
pub enum Actor {
    Stable {
        raw: RawPolicyParams,
        band: VoltageBand,
        eps: f64,
    },
    Mlp {
        nets: Vec<FeedForwardNet>,
        band: VoltageBand,
    },
}

impl Actor {
    pub fn n_buses(&self) -> usize {
        match self {
            Self::Stable { band, .. } | Self::Mlp { band, .. } => band.len(),
        }
    }

    /// Per-bus flat parameter slices.
    pub fn bus_params(&self, bus: usize) -> &[f64] {
        match self {
            Self::Stable { raw, .. } => &raw.buses[bus],
            Self::Mlp { nets, .. } => nets[bus].params(),
        }
    }

    fn bus_params_mut(&mut self, bus: usize) -> &mut [f64] {
        match self {
            Self::Stable { raw, .. } => &mut raw.buses[bus],
            Self::Mlp { nets, .. } => nets[bus].params_mut(),
        }
    }

    pub fn snapshot(&self) -> Result<TrainedPolicy, RlError> {
        match self {
            Self::Stable { raw, band, eps } => {
                let policy = constrain(raw, band, *eps).map_err(|e| RlError::NonFinite(e.to_string()))?;
                Ok(TrainedPolicy::Stable {
                    raw: raw.clone(),
                    policy,
                })
            }
            Self::Mlp { nets, band } => Ok(TrainedPolicy::Mlp(MlpPolicy::new(nets.clone(), band.clone()))),
        }
    }

    /// `self ← (1 - tau)·self + tau·source`, bus by bus.
    pub fn soft_update_from(&mut self, source: &Actor, tau: f64) -> Result<(), RlError> {
        for i in 0..self.n_buses() {
            soft_update(self.bus_params_mut(i), source.bus_params(i), tau)?;
        }
        Ok(())
    }
}

/// Deterministic policy-gradient step: ascends
/// `(1/N) Σ_s ∂Q/∂u(v_s, g(v_s)) · ∂g(v_s)/∂θ`. With one critic per bus the
/// critic for bus `i` sees `(v_i, u_i)`; with a single critic it sees the
/// full vectors. Returns the norm of the applied (ascent) gradient.
pub fn actor_update<C: ActionValue>(
    actor: &mut Actor,
    opts: &mut [Optimizer],
    critics: &[C],
    states: &[&[f64]],
) -> Result<f64, RlError> {
    let n = actor.n_buses();
    let grads = actor_gradient(actor, critics, states)?;
    if opts.len() != n {
        return Err(RlError::Shape {
            expected: n,
            got: opts.len(),
        });
    }
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        sq += g.iter().map(|x| x * x).sum::<f64>();
        let descent: Vec<f64> = g.iter().map(|x| -x).collect();
        opts[i].step(actor.bus_params_mut(i), &descent);
    }
    Ok(sq.sqrt())
}

/// Per-bus ascent gradients of the actor objective.
pub fn actor_gradient<C: ActionValue>(actor: &Actor, critics: &[C], states: &[&[f64]]) -> Result<Vec<Vec<f64>>, RlError> {
    let n = actor.n_buses();
    let joint = match critics.len() {
        1 if n != 1 => true,
        k if k == n => false,
        k => return Err(RlError::Shape { expected: n, got: k }),
    };
    if states.is_empty() {
        return Err(RlError::Config("empty actor batch".into()));
    }
    if let Some(v) = states.iter().find(|v| v.len() != n) {
        return Err(RlError::Shape {
            expected: n,
            got: v.len(),
        });
    }
    let batch = states.len();
    let scale = 1.0 / batch as f64;
    let snapshot = actor.snapshot()?;
    // Column-major per bus: cols[i][b] = state b at bus i.
    let cols: Vec<Vec<f64>> = (0..n).map(|i| states.iter().map(|v| v[i]).collect()).collect();
    let u_cols: Vec<Vec<f64>> = (0..n).map(|i| snapshot.local_actions(i, &cols[i])).collect();
    let mut du_cols = vec![vec![0.0; batch]; n];
    if joint {
        let vs: Vec<f64> = states.iter().flat_map(|v| v.iter().copied()).collect();
        let us: Vec<f64> = (0..batch).flat_map(|b| u_cols.iter().map(move |c| c[b])).collect();
        let mut du = vec![0.0; batch * n];
        critics[0].batch_action_grad(&vs, &us, batch, &mut du);
        for (b, row) in du.chunks_exact(n).enumerate() {
            for i in 0..n {
                du_cols[i][b] = row[i];
            }
        }
    } else {
        for i in 0..n {
            critics[i].batch_action_grad(&cols[i], &u_cols[i], batch, &mut du_cols[i]);
        }
    }
    let mut grads: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; actor.bus_params(i).len()]).collect();
    for i in 0..n {
        match (actor, &snapshot) {
            (Actor::Stable { raw, .. }, TrainedPolicy::Stable { policy, .. }) => {
                for (v, du) in cols[i].iter().zip(&du_cols[i]) {
                    if *du != 0.0 {
                        policy.buses[i].accumulate_raw_grad(&raw.buses[i], *v, scale * du, &mut grads[i]);
                    }
                }
            }
            (Actor::Mlp { nets, .. }, _) => {
                let mut cache = BatchCache::default();
                nets[i].forward_batch(&cols[i], batch, &mut cache)?;
                let up: Vec<f64> = du_cols[i].iter().map(|d| scale * d).collect();
                nets[i].backward_batch(&mut cache, &up, Some(&mut grads[i]), None);
            }
            _ => unreachable!("snapshot kind matches actor kind"),
        }
    }
    Ok(grads)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub td_loss_mean: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub diverged: bool,
    pub wall_ms: u64,
}

/// Writes the log as CSV with floats at 12 significant digits.
pub fn write_training_log<W: std::io::Write>(log: &[EpisodeLog], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "episode",
        "return",
        "td_loss_mean",
        "actor_grad_norm",
        "critic_grad_norm",
        "diverged",
        "wall_ms",
    ])?;
    for e in log {
        out.write_record([
            e.episode.to_string(),
            fmt_float(e.episode_return),
            fmt_float(e.td_loss_mean),
            fmt_float(e.actor_grad_norm),
            fmt_float(e.critic_grad_norm),
            (e.diverged as u8).to_string(),
            e.wall_ms.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Scientific notation with 12 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.11e}")
}

/// Stateful DDPG trainer; one call to [`Trainer::run_episode`] collects an
/// episode and performs that episode's updates.
pub struct Trainer {
    cfg: TrainConfig,
    model: GridModel,
    actor: Actor,
    target_actor: Actor,
    actor_opts: Vec<Optimizer>,
    critics: Vec<FeedForwardNet>,
    target_critics: Vec<FeedForwardNet>,
    critic_opts: Vec<Optimizer>,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    log: Vec<EpisodeLog>,
}

impl Trainer {
    pub fn new(model: GridModel, cfg: TrainConfig) -> Result<Self, RlError> {
        cfg.validate()?;
        let n = model.n();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let band = model.band.clone();
        let actor = match cfg.actor {
            ActorKind::Stable => {
                let mut raw = RawPolicyParams::zeros(n, cfg.hidden);
                let init = Normal::new(0.0, cfg.raw_init_std.max(f64::MIN_POSITIVE)).expect("finite std");
                let d = cfg.hidden;
                for bus in raw.buses.iter_mut() {
                    for (k, x) in bus.iter_mut().enumerate() {
                        let slope_slot = k % (2 * d) < d;
                        let mean = if slope_slot { cfg.raw_slope_init_mean } else { 0.0 };
                        *x = mean + if cfg.raw_init_std > 0.0 { init.sample(&mut rng) } else { 0.0 };
                    }
                }
                Actor::Stable {
                    raw,
                    band: band.clone(),
                    eps: cfg.eps,
                }
            }
            ActorKind::Unconstrained => {
                let sizes: Vec<usize> = std::iter::once(1).chain(cfg.actor_layers.iter().copied()).chain([1]).collect();
                let nets = (0..n)
                    .map(|_| {
                        FeedForwardNet::new(&sizes, &mut rng)
                            .with_input_normalization(vec![model.v0], vec![1.0 / INPUT_SCALE])
                    })
                    .collect();
                Actor::Mlp { nets, band: band.clone() }
            }
        };
        let (n_critics, per) = match cfg.scope {
            AgentScope::Decentralized => (n, 1),
            AgentScope::Joint => (1, n),
        };
        let critic_sizes: Vec<usize> = std::iter::once(2 * per)
            .chain(cfg.critic_layers.iter().copied())
            .chain([1])
            .collect();
        let shift: Vec<f64> = std::iter::repeat_n(model.v0, per).chain(std::iter::repeat_n(0.0, per)).collect();
        let critics: Vec<FeedForwardNet> = (0..n_critics)
            .map(|_| {
                FeedForwardNet::new(&critic_sizes, &mut rng)
                    .with_input_normalization(shift.clone(), vec![1.0 / INPUT_SCALE; 2 * per])
            })
            .collect();
        let actor_opts = (0..n)
            .map(|i| Optimizer::new(cfg.optimizer, cfg.actor_lr, actor.bus_params(i).len()))
            .collect();
        let critic_opts = critics
            .iter()
            .map(|c| Optimizer::new(cfg.optimizer, cfg.critic_lr, c.param_count()))
            .collect();
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| RlError::Config(e.to_string()))?;
        Ok(Self {
            target_actor: actor.clone(),
            actor,
            actor_opts,
            target_critics: critics.clone(),
            critics,
            critic_opts,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            rng,
            noise,
            log: Vec::new(),
            model,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn actor(&self) -> &Actor {
        &self.actor
    }

    pub fn critics(&self) -> &[FeedForwardNet] {
        &self.critics
    }

    pub fn log(&self) -> &[EpisodeLog] {
        &self.log
    }

    pub fn policy(&self) -> Result<TrainedPolicy, RlError> {
        self.actor.snapshot()
    }

    pub fn episodes_done(&self) -> usize {
        self.log.len()
    }

    fn explore(&mut self) -> f64 {
        let clip = self.cfg.noise_clip * self.cfg.noise_std;
        if clip == 0.0 {
            return 0.0;
        }
        self.noise.sample(&mut self.rng).clamp(-clip, clip)
    }

    /// Collects one noisy episode, then runs the configured number of
    /// updates.
    pub fn run_episode(&mut self) -> Result<&EpisodeLog, RlError> {
        let started = Instant::now();
        let n = self.model.n();
        let band = self.model.band.clone();
        let kind = ScenarioKind::ALL[self.rng.random_range(0..ScenarioKind::ALL.len())];
        let scen_cfg = ScenarioConfig {
            kind,
            ..self.cfg.scenario.clone()
        };
        let scenario = sample_scenario(&scen_cfg, &band, self.model.v0, &mut self.rng);
        let mut state = GridState::new(&self.model.x, scenario.q0, scenario.v_env).map_err(|e| RlError::Config(e.to_string()))?;
        let policy = self.actor.snapshot()?;
        let mut u = vec![0.0; n];
        let mut episode_return = 0.0;
        let mut diverged = false;
        for _ in 0..self.cfg.episode_length {
            let v = state.v().to_vec();
            policy.act(&v, &mut u);
            for ui in u.iter_mut() {
                *ui += self.explore();
            }
            if u.iter().any(|x| !x.is_finite()) {
                diverged = true;
                break;
            }
            let bus_rewards: Vec<f64> = (0..n)
                .map(|i| -bus_cost(v[i], u[i], band.lower[i], band.upper[i], &self.cfg.cost))
                .collect();
            let next = step(&state, &u, self.cfg.dt, &self.model.x).map_err(|e| RlError::Config(e.to_string()))?;
            if next.v().iter().any(|x| !x.is_finite() || x.abs() > self.cfg.blowup) {
                diverged = true;
                break;
            }
            let reward: f64 = bus_rewards.iter().sum();
            episode_return += reward;
            self.buffer.push(Transition {
                v,
                u: u.clone(),
                reward,
                bus_rewards,
                v_next: next.v().to_vec(),
            })?;
            state = next;
        }

        let mut td_sum = 0.0;
        let mut actor_norm_sum = 0.0;
        let mut critic_norm_sum = 0.0;
        let mut updates = 0usize;
        for _ in 0..self.cfg.updates_per_episode {
            if self.buffer.len() < self.cfg.batch_size {
                break;
            }
            let (td, cn, an) = self.update()?;
            td_sum += td;
            critic_norm_sum += cn;
            actor_norm_sum += an;
            updates += 1;
        }
        let mean = |s: f64| if updates == 0 { 0.0 } else { s / updates as f64 };
        let wall_ms = if self.cfg.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        self.log.push(EpisodeLog {
            episode: self.log.len(),
            episode_return,
            td_loss_mean: mean(td_sum),
            actor_grad_norm: mean(actor_norm_sum),
            critic_grad_norm: mean(critic_norm_sum),
            diverged,
            wall_ms,
        });
        Ok(self.log.last().expect("just pushed"))
    }

    /// One batched critic + actor + target update. Returns (mean TD loss over
    /// critics, critic gradient norm, actor gradient norm).
    fn update(&mut self) -> Result<(f64, f64, f64), RlError> {
        let idx = self.buffer.sample_indices(self.cfg.batch_size, &mut self.rng)?;
        let n = self.model.n();
        let target_policy = self.target_actor.snapshot()?;
        let batch: Vec<&Transition> = idx.iter().map(|&k| self.buffer.get(k)).collect();
        let next_cols: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let vs: Vec<f64> = batch.iter().map(|t| t.v_next[i]).collect();
                target_policy.local_actions(i, &vs)
            })
            .collect();
        let next_u: Vec<Vec<f64>> = (0..batch.len()).map(|b| next_cols.iter().map(|c| c[b]).collect()).collect();

        let mut td = 0.0;
        let mut critic_sq = 0.0;
        let n_critics = self.critics.len();
        for c in 0..n_critics {
            let samples: Vec<CriticSample> = batch
                .iter()
                .zip(&next_u)
                .map(|(t, un)| match self.cfg.scope {
                    AgentScope::Decentralized => CriticSample {
                        input: vec![t.v[c], t.u[c]],
                        reward: if self.cfg.local_reward { t.bus_rewards[c] } else { t.reward },
                        next_input: vec![t.v_next[c], un[c]],
                    },
                    AgentScope::Joint => CriticSample {
                        input: t.v.iter().chain(&t.u).copied().collect(),
                        reward: t.reward,
                        next_input: t.v_next.iter().chain(un).copied().collect(),
                    },
                })
                .collect();
            let (loss, grad) = critic_loss_grad(&self.critics[c], &self.target_critics[c], &samples, self.cfg.gamma)?;
            critic_sq += grad.iter().map(|g| g * g).sum::<f64>();
            self.critic_opts[c].step(self.critics[c].params_mut(), &grad);
            td += loss / n_critics as f64;
        }

        let states: Vec<&[f64]> = batch.iter().map(|t| t.v.as_slice()).collect();
        debug_assert!(states.iter().all(|s| s.len() == n));
        let actor_norm = actor_update(&mut self.actor, &mut self.actor_opts, &self.critics, &states)?;

        for c in 0..n_critics {
            let (t, s) = (&mut self.target_critics[c], &self.critics[c]);
            soft_update(t.params_mut(), s.params(), self.cfg.tau)?;
        }
        self.target_actor.soft_update_from(&self.actor, self.cfg.tau)?;
        Ok((td, critic_sq.sqrt(), actor_norm))
    }

    /// Runs the remaining configured episodes.
    pub fn train(mut self) -> Result<TrainOutcome, RlError> {
        while self.log.len() < self.cfg.episodes {
            self.run_episode()?;
        }
        Ok(TrainOutcome {
            policy: self.actor.snapshot()?,
            log: self.log,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: TrainedPolicy,
    pub log: Vec<EpisodeLog>,
}

/// Trains a fresh actor on `model` under `cfg`.
pub fn train(model: GridModel, cfg: TrainConfig) -> Result<TrainOutcome, RlError> {
    Trainer::new(model, cfg)?.train()
}
