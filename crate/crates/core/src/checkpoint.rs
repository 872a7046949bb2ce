//! JSON checkpoints for every controller kind.
//!
//! A `stacked_relu` checkpoint stores free parameters; loading re-runs the
//! constraint map and the monotonicity audit and refuses the file if the
//! audit fails. An `explicit` checkpoint stores weights and biases as-is and
//! is loaded without checks, so it can describe controllers that violate the
//! constraints (the certifier is expected to reject those).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::VoltageBand;
use crate::policy::{
    constrain, verify_policy, LinearDeadband, LocalPolicy, MonotonePolicy, PolicyError, RawPolicyParams, StackedRelu,
    VerifyConfig, ZeroPolicy,
};
use crate::rl::{FeedForwardNet, MlpPolicy, TrainedPolicy};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported format_version {0}")]
    Version(u32),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidePair {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBus {
    pub d: usize,
    pub raw_slopes: SidePair,
    pub raw_bias_decrements: SidePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointBody {
    StackedRelu { eps: f64, band: VoltageBand, buses: Vec<RawBus> },
    Explicit { eps: f64, buses: Vec<StackedRelu> },
    Linear { band: VoltageBand },
    Zero { band: VoltageBand },
    Mlp { band: VoltageBand, nets: Vec<FeedForwardNet> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(flatten)]
    pub body: CheckpointBody,
}

impl Checkpoint {
    pub fn new(body: CheckpointBody) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            body,
        }
    }

    pub fn from_raw(raw: &RawPolicyParams, band: &VoltageBand, eps: f64) -> Self {
        let d = raw.hidden;
        let buses = raw
            .buses
            .iter()
            .map(|b| RawBus {
                d,
                raw_slopes: SidePair {
                    plus: b[..d].to_vec(),
                    minus: b[2 * d..3 * d].to_vec(),
                },
                raw_bias_decrements: SidePair {
                    plus: b[d..2 * d].to_vec(),
                    minus: b[3 * d..].to_vec(),
                },
            })
            .collect();
        Self::new(CheckpointBody::StackedRelu {
            eps,
            band: band.clone(),
            buses,
        })
    }

    pub fn from_trained(policy: &TrainedPolicy) -> Self {
        match policy {
            TrainedPolicy::Stable { raw, policy } => Self::from_raw(raw, policy.band(), policy.eps()),
            TrainedPolicy::Mlp(p) => Self::new(CheckpointBody::Mlp {
                band: p.band().clone(),
                nets: p.nets.clone(),
            }),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Self = serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(ck.format_version));
        }
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Builds the controller. `stacked_relu` checkpoints must pass the
    /// monotonicity audit.
    pub fn into_policy(self) -> Result<LoadedPolicy, CheckpointError> {
        match self.body {
            CheckpointBody::StackedRelu { eps, band, buses } => {
                let hidden = buses.first().map(|b| b.d).unwrap_or(0);
                let mut raw = RawPolicyParams::zeros(0, hidden);
                for (i, b) in buses.into_iter().enumerate() {
                    let d = b.d;
                    let parts = [
                        &b.raw_slopes.plus,
                        &b.raw_bias_decrements.plus,
                        &b.raw_slopes.minus,
                        &b.raw_bias_decrements.minus,
                    ];
                    if d != hidden || parts.iter().any(|p| p.len() != d) {
                        return Err(CheckpointError::Format(format!("bus {i}: every block must have length d={hidden}")));
                    }
                    raw.buses.push(parts.iter().flat_map(|p| p.iter().copied()).collect());
                }
                let policy = constrain(&raw, &band, eps)?;
                let cfg = VerifyConfig {
                    eps,
                    ..VerifyConfig::default()
                };
                if let Some(bad) = verify_policy(&policy, &cfg).into_iter().find(|r| !r.passed()) {
                    return Err(PolicyError::Certificate(format!("bus {} fails the monotonicity audit", bad.bus)).into());
                }
                Ok(LoadedPolicy::Stable { raw, policy })
            }
            CheckpointBody::Explicit { eps, buses } => Ok(LoadedPolicy::Explicit(MonotonePolicy::from_explicit(buses, eps))),
            CheckpointBody::Linear { band } => Ok(LoadedPolicy::Linear(LinearDeadband::new(band))),
            CheckpointBody::Zero { band } => Ok(LoadedPolicy::Zero(ZeroPolicy::with_band(band))),
            CheckpointBody::Mlp { band, nets } => {
                if nets.len() != band.len() || nets.iter().any(|n| n.input_dim() != 1 || n.output_dim() != 1) {
                    return Err(CheckpointError::Format("mlp checkpoint needs one 1→1 net per bus".into()));
                }
                Ok(LoadedPolicy::Mlp(MlpPolicy::new(nets, band)))
            }
        }
    }
}

/// A controller restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum LoadedPolicy {
    Stable { raw: RawPolicyParams, policy: MonotonePolicy },
    Explicit(MonotonePolicy),
    Linear(LinearDeadband),
    Zero(ZeroPolicy),
    Mlp(MlpPolicy),
}

impl LoadedPolicy {
    fn inner(&self) -> &dyn LocalPolicy {
        match self {
            Self::Stable { policy, .. } | Self::Explicit(policy) => policy,
            Self::Linear(p) => p,
            Self::Zero(p) => p,
            Self::Mlp(p) => p,
        }
    }

    /// Strictness floor the controller was built with, if it has one.
    pub fn eps(&self) -> Option<f64> {
        match self {
            Self::Stable { policy, .. } | Self::Explicit(policy) => Some(policy.eps()),
            _ => None,
        }
    }
}

impl LocalPolicy for LoadedPolicy {
    fn local_action(&self, bus: usize, v: f64) -> f64 {
        self.inner().local_action(bus, v)
    }
    fn local_slope(&self, bus: usize, v: f64) -> f64 {
        self.inner().local_slope(bus, v)
    }
    fn band(&self) -> &VoltageBand {
        self.inner().band()
    }
    fn lipschitz(&self) -> f64 {
        self.inner().lipschitz()
    }
}
crate::impl_policy_via_local!(LoadedPolicy);

/// Loads and validates a checkpoint file.
pub fn load_policy(path: &Path) -> Result<LoadedPolicy, CheckpointError> {
    Checkpoint::load(path)?.into_policy()
}
