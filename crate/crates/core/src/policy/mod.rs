//! Decentralized voltage controllers.
//!
//! Every controller here maps a bus voltage vector to reactive-power rates.
//! The decentralized ones ([`LocalPolicy`]) use only the local voltage at each
//! bus, so their input Jacobian is diagonal; that is the class the stability
//! certificate in [`crate::lyapunov`] applies to.

mod stacked;
mod verify;

pub use stacked::{
    constrain, policy_param_grad, softplus, MonotonePolicy, RawPolicyParams, StackedRelu, DEFAULT_EPS,
    DEFAULT_HIDDEN, KINK_SPACING,
};
pub use verify::{verify_monotone, verify_policy, ClauseResult, MonotoneReport, VerifyConfig};

use thiserror::Error;

use crate::grid::{VoltageBand, DEFAULT_V_LOWER, DEFAULT_V_UPPER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("non-finite raw parameter at bus {bus}, index {index}")]
    NonFinite { bus: usize, index: usize },
    #[error("strictness floor must be positive and finite, got {0}")]
    Eps(f64),
    #[error("hidden width must be at least 2, got {0}")]
    Width(usize),
    #[error("bus count mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("policy fails the monotonicity certificate: {0}")]
    Certificate(String),
}

/// A controller mapping voltages to reactive-power rates.
pub trait Policy: Sync {
    fn n_buses(&self) -> usize;
    fn act(&self, v: &[f64], u: &mut [f64]);

    fn action(&self, v: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; v.len()];
        self.act(v, &mut u);
        u
    }
}

/// A controller whose action at bus `i` depends only on `v_i`.
pub trait LocalPolicy: Policy {
    fn local_action(&self, bus: usize, v: f64) -> f64;

    /// Right-hand derivative of the local action with respect to `v`.
    fn local_slope(&self, bus: usize, v: f64) -> f64;

    fn band(&self) -> &VoltageBand;

    fn jacobian_diag(&self, v: &[f64], out: &mut [f64]) {
        for (i, (o, &vi)) in out.iter_mut().zip(v).enumerate() {
            *o = self.local_slope(i, vi);
        }
    }

    /// Largest local slope magnitude, used for discretization bounds.
    /// Implementations may return an upper bound.
    fn lipschitz(&self) -> f64;
}

/// Implements [`Policy`] for a [`LocalPolicy`] by applying it bus by bus.
#[macro_export]
macro_rules! impl_policy_via_local {
    ($ty:ty) => {
        impl $crate::policy::Policy for $ty {
            fn n_buses(&self) -> usize {
                $crate::policy::LocalPolicy::band(self).len()
            }
            fn act(&self, v: &[f64], u: &mut [f64]) {
                for (i, (ui, &vi)) in u.iter_mut().zip(v).enumerate() {
                    *ui = $crate::policy::LocalPolicy::local_action(self, i, vi);
                }
            }
        }
    };
}

/// No control at all.
#[derive(Debug, Clone)]
pub struct ZeroPolicy {
    band: VoltageBand,
}

impl ZeroPolicy {
    pub fn new(n: usize) -> Self {
        Self {
            band: VoltageBand::uniform(n, DEFAULT_V_LOWER, DEFAULT_V_UPPER),
        }
    }

    pub fn with_band(band: VoltageBand) -> Self {
        Self { band }
    }
}

impl LocalPolicy for ZeroPolicy {
    fn local_action(&self, _bus: usize, _v: f64) -> f64 {
        0.0
    }
    fn local_slope(&self, _bus: usize, _v: f64) -> f64 {
        0.0
    }
    fn band(&self) -> &VoltageBand {
        &self.band
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
}
impl_policy_via_local!(ZeroPolicy);

/// Unit-slope droop with a deadband: `-[v - upper]⁺ + [lower - v]⁺`.
#[derive(Debug, Clone)]
pub struct LinearDeadband {
    band: VoltageBand,
}

impl LinearDeadband {
    pub fn new(band: VoltageBand) -> Self {
        Self { band }
    }
}

pub fn linear_deadband(v: f64, lower: f64, upper: f64) -> f64 {
    -(v - upper).max(0.0) + (lower - v).max(0.0)
}

impl LocalPolicy for LinearDeadband {
    fn local_action(&self, bus: usize, v: f64) -> f64 {
        linear_deadband(v, self.band.lower[bus], self.band.upper[bus])
    }
    fn local_slope(&self, bus: usize, v: f64) -> f64 {
        if v >= self.band.upper[bus] || v < self.band.lower[bus] {
            -1.0
        } else {
            0.0
        }
    }
    fn band(&self) -> &VoltageBand {
        &self.band
    }
    fn lipschitz(&self) -> f64 {
        1.0
    }
}
impl_policy_via_local!(LinearDeadband);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_deadband_values() {
        assert!((linear_deadband(1.07, 0.95, 1.05) + 0.02).abs() < 1e-12);
        assert!((linear_deadband(0.93, 0.95, 1.05) - 0.02).abs() < 1e-12);
        assert_eq!(linear_deadband(1.0, 0.95, 1.05), 0.0);
    }

    #[test]
    fn linear_deadband_passes_monotone_checker() {
        let p = LinearDeadband::new(VoltageBand::uniform(2, 0.95, 1.05));
        let report = verify_monotone(&p, 1, &VerifyConfig::default());
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn zero_policy_acts_zero() {
        let p = ZeroPolicy::new(3);
        assert_eq!(p.action(&[1.2, 0.8, 1.0]), vec![0.0; 3]);
    }
}
