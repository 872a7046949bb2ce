//! Monotone stacked-ReLU controllers.
//!
//! Each bus runs `u = -(ξ⁺(v) + ξ⁻(v))` with
//!
//! ```text
//! ξ⁺(v) = Σ_l w⁺_l · ReLU(v + b⁺_l)        kinks at v = -b⁺_l, rising from the upper edge
//! ξ⁻(v) = Σ_l w⁻_l · ReLU(-v + b⁻_l)       kinks at v =  b⁻_l, falling from the lower edge
//! ```
//!
//! Unit 1 on each side is inert (`w_1 = 0`, `b_1 = 0`). The first active kink
//! sits exactly on the band edge, later kinks move outward, and the slope
//! after kink `l` is the prefix sum `S_l = Σ_{j≤l} w_j`, kept at least `eps`
//! in magnitude. That makes `u` exactly zero on the band, strictly decreasing
//! outside it, and unbounded.
//!
//! The constraints are never projected: free parameters are mapped onto the
//! feasible set by [`constrain`], so every gradient iterate is a valid
//! controller.

use serde::{Deserialize, Serialize};

use super::{LocalPolicy, PolicyError};
use crate::grid::VoltageBand;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_HIDDEN: usize = 16;
/// Voltage spacing (p.u.) between consecutive kinks per unit of softplus.
pub const KINK_SPACING: f64 = 0.01;

/// `ln(1 + eˣ)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One bus's stacked-ReLU controller in explicit weight/bias form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedRelu {
    pub wplus: Vec<f64>,
    pub bplus: Vec<f64>,
    pub wminus: Vec<f64>,
    pub bminus: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl StackedRelu {
    pub fn width(&self) -> usize {
        self.wplus.len()
    }

    pub fn xi_plus(&self, v: f64) -> f64 {
        let mut s = 0.0;
        for (w, b) in self.wplus.iter().zip(&self.bplus) {
            let z = v + b;
            if z > 0.0 {
                s += w * z;
            }
        }
        s
    }

    pub fn xi_minus(&self, v: f64) -> f64 {
        let mut s = 0.0;
        for (w, b) in self.wminus.iter().zip(&self.bminus) {
            let z = -v + b;
            if z > 0.0 {
                s += w * z;
            }
        }
        s
    }

    /// Control action at local voltage `v`. Exactly `0.0` inside the band.
    pub fn eval(&self, v: f64) -> f64 {
        0.0 - (self.xi_plus(v) + self.xi_minus(v))
    }

    /// Right-hand derivative `du/dv`.
    pub fn slope(&self, v: f64) -> f64 {
        let mut d = 0.0;
        for (w, b) in self.wplus.iter().zip(&self.bplus) {
            if v + b >= 0.0 {
                d += w;
            }
        }
        for (w, b) in self.wminus.iter().zip(&self.bminus) {
            if -v + b > 0.0 {
                d -= w;
            }
        }
        0.0 - d
    }

    /// Largest slope magnitude over all linear pieces.
    pub fn max_slope(&self) -> f64 {
        let prefix_max = |w: &[f64]| {
            let mut s = 0.0_f64;
            let mut m = 0.0_f64;
            for x in w {
                s += x;
                m = m.max(s.abs());
            }
            m
        };
        prefix_max(&self.wplus) + prefix_max(&self.wminus)
    }

    /// Gradient of `u(v)` with respect to `(w⁺, b⁺, w⁻, b⁻)`, laid out in
    /// that order (each block `width()` long).
    pub fn explicit_grad(&self, v: f64) -> Vec<f64> {
        let d = self.width();
        let mut g = vec![0.0; 4 * d];
        for l in 0..d {
            let zp = v + self.bplus[l];
            if zp > 0.0 {
                g[l] = -zp;
                g[d + l] = -self.wplus[l];
            }
            let zm = -v + self.bminus[l];
            if zm > 0.0 {
                g[2 * d + l] = -zm;
                g[3 * d + l] = -self.wminus[l];
            }
        }
        g
    }
}

/// Free parameters for every bus, `4·hidden` per bus laid out as
/// `[a⁺ | c⁺ | a⁻ | c⁻]`: slope parameters `a` and kink-spacing parameters `c`
/// for the upper and lower sides. Entries `a_1`, `c_1` and `c_2` of each block
/// do not influence the controller (unit 1 is inert and unit 2 is pinned to the
/// band edge); they are kept so every bus has the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPolicyParams {
    pub hidden: usize,
    pub buses: Vec<Vec<f64>>,
}

impl RawPolicyParams {
    pub fn zeros(n: usize, hidden: usize) -> Self {
        Self {
            hidden,
            buses: vec![vec![0.0; 4 * hidden]; n],
        }
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slopes_plus(&self, bus: usize) -> &[f64] {
        &self.buses[bus][..self.hidden]
    }

    pub fn spacing_plus(&self, bus: usize) -> &[f64] {
        &self.buses[bus][self.hidden..2 * self.hidden]
    }

    pub fn slopes_minus(&self, bus: usize) -> &[f64] {
        &self.buses[bus][2 * self.hidden..3 * self.hidden]
    }

    pub fn spacing_minus(&self, bus: usize) -> &[f64] {
        &self.buses[bus][3 * self.hidden..]
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.hidden < 2 {
            return Err(PolicyError::Width(self.hidden));
        }
        for (bus, p) in self.buses.iter().enumerate() {
            if p.len() != 4 * self.hidden {
                return Err(PolicyError::Dimension {
                    expected: 4 * self.hidden,
                    got: p.len(),
                });
            }
            if let Some(index) = p.iter().position(|x| !x.is_finite()) {
                return Err(PolicyError::NonFinite { bus, index });
            }
        }
        Ok(())
    }
}

/// Maps free parameters of one side onto (weights, biases).
///
/// `edge_bias` is the pinned bias of unit 2 and `bias_sign` orients the
/// prefix sums (+1 for the upper side, -1 for the lower side).
fn constrain_side(slopes: &[f64], spacing: &[f64], edge_bias: f64, sign: f64, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let d = slopes.len();
    let mut w = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut prev = 0.0;
    for l in 1..d {
        let s = sign * (eps + softplus(slopes[l]));
        w[l] = s - prev;
        prev = s;
    }
    b[1] = edge_bias;
    for l in 2..d {
        b[l] = b[l - 1] - KINK_SPACING * softplus(spacing[l]);
    }
    (w, b)
}

/// Builds a bus controller from its raw parameter slice.
fn constrain_bus(raw: &[f64], hidden: usize, lower: f64, upper: f64, eps: f64) -> StackedRelu {
    let (wplus, bplus) = constrain_side(&raw[..hidden], &raw[hidden..2 * hidden], -upper, 1.0, eps);
    let (wminus, bminus) = constrain_side(&raw[2 * hidden..3 * hidden], &raw[3 * hidden..], lower, -1.0, eps);
    StackedRelu {
        wplus,
        bplus,
        wminus,
        bminus,
        lower,
        upper,
    }
}

/// A decentralized controller with one stacked-ReLU unit per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonePolicy {
    pub buses: Vec<StackedRelu>,
    band: VoltageBand,
    eps: f64,
}

impl MonotonePolicy {
    /// Wraps explicit controllers without checking any constraint. Used for
    /// audits and adversarial fixtures; trained policies come from
    /// [`constrain`].
    pub fn from_explicit(buses: Vec<StackedRelu>, eps: f64) -> Self {
        let band = VoltageBand {
            lower: buses.iter().map(|b| b.lower).collect(),
            upper: buses.iter().map(|b| b.upper).collect(),
        };
        Self { buses, band, eps }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

impl LocalPolicy for MonotonePolicy {
    fn local_action(&self, bus: usize, v: f64) -> f64 {
        self.buses[bus].eval(v)
    }
    fn local_slope(&self, bus: usize, v: f64) -> f64 {
        self.buses[bus].slope(v)
    }
    fn band(&self) -> &VoltageBand {
        &self.band
    }
    fn lipschitz(&self) -> f64 {
        self.buses.iter().map(StackedRelu::max_slope).fold(0.0, f64::max)
    }
}
crate::impl_policy_via_local!(MonotonePolicy);

/// Maps free parameters onto a feasible monotone controller. Total on finite
/// input: every finite `raw` yields a controller satisfying all constraints.
pub fn constrain(raw: &RawPolicyParams, band: &VoltageBand, eps: f64) -> Result<MonotonePolicy, PolicyError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(PolicyError::Eps(eps));
    }
    raw.validate()?;
    if raw.n_buses() != band.len() {
        return Err(PolicyError::Dimension {
            expected: band.len(),
            got: raw.n_buses(),
        });
    }
    let buses = raw
        .buses
        .iter()
        .enumerate()
        .map(|(i, p)| constrain_bus(p, raw.hidden, band.lower[i], band.upper[i], eps))
        .collect();
    Ok(MonotonePolicy {
        buses,
        band: band.clone(),
        eps,
    })
}

/// Chains an explicit-parameter gradient of one side back to its raw
/// parameters, accumulating `scale · grad` into `out_slopes` / `out_spacing`.
#[allow(clippy::too_many_arguments)]
fn chain_side(
    gw: &[f64],
    gb: &[f64],
    slopes: &[f64],
    spacing: &[f64],
    sign: f64,
    scale: f64,
    out_slopes: &mut [f64],
    out_spacing: &mut [f64],
) {
    let d = gw.len();
    // w_l = S_l - S_{l-1}  ⇒  ∂/∂S_l = g_w[l] - g_w[l+1].
    for l in 1..d {
        let next = if l + 1 < d { gw[l + 1] } else { 0.0 };
        let gs = gw[l] - next;
        out_slopes[l] += scale * gs * sign * sigmoid(slopes[l]);
    }
    // b_l = edge - h Σ_{m=3}^{l} softplus(c_m)  ⇒  ∂/∂c_m = -h σ(c_m) Σ_{l≥m} g_b[l].
    let mut tail = 0.0;
    for m in (2..d).rev() {
        tail += gb[m];
        out_spacing[m] += scale * (-KINK_SPACING * sigmoid(spacing[m]) * tail);
    }
}

impl StackedRelu {
    /// Accumulates `scale · ∂u(v)/∂raw` into `out` (length `4·width`), where
    /// `raw` is the slice this controller was built from.
    pub fn accumulate_raw_grad(&self, raw: &[f64], v: f64, scale: f64, out: &mut [f64]) {
        let d = self.width();
        let g = self.explicit_grad(v);
        let (out_p, out_m) = out.split_at_mut(2 * d);
        let (op_s, op_c) = out_p.split_at_mut(d);
        let (om_s, om_c) = out_m.split_at_mut(d);
        chain_side(&g[..d], &g[d..2 * d], &raw[..d], &raw[d..2 * d], 1.0, scale, op_s, op_c);
        chain_side(
            &g[2 * d..3 * d],
            &g[3 * d..],
            &raw[2 * d..3 * d],
            &raw[3 * d..],
            -1.0,
            scale,
            om_s,
            om_c,
        );
    }
}

/// Gradient of bus `bus`'s action at voltage `v` with respect to that bus's
/// raw parameters (same layout as [`RawPolicyParams::buses`]).
pub fn policy_param_grad(
    raw: &RawPolicyParams,
    band: &VoltageBand,
    eps: f64,
    bus: usize,
    v: f64,
) -> Result<Vec<f64>, PolicyError> {
    raw.validate()?;
    let unit = constrain_bus(&raw.buses[bus], raw.hidden, band.lower[bus], band.upper[bus], eps);
    let mut out = vec![0.0; 4 * raw.hidden];
    unit.accumulate_raw_grad(&raw.buses[bus], v, 1.0, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band1() -> VoltageBand {
        VoltageBand::uniform(1, 0.95, 1.05)
    }

    #[test]
    fn hand_evaluated_unit() {
        let unit = StackedRelu {
            wplus: vec![0.0, 0.5],
            bplus: vec![0.0, -1.05],
            wminus: vec![0.0, -0.5],
            bminus: vec![0.0, 0.95],
            lower: 0.95,
            upper: 1.05,
        };
        assert!((unit.eval(1.15) + 0.05).abs() < 1e-12);
        assert!((unit.slope(1.15) + 0.5).abs() < 1e-15);
        assert_eq!(unit.eval(1.0).to_bits(), 0.0f64.to_bits());
        assert_eq!(unit.slope(1.0), 0.0);
        assert!((unit.eval(0.85) - 0.05).abs() < 1e-12);
        // Right-hand derivative at the kinks.
        assert_eq!(unit.slope(1.05), -0.5);
        assert_eq!(unit.slope(0.95), 0.0);
    }

    #[test]
    fn continuous_at_upper_edge() {
        let raw = RawPolicyParams::zeros(1, 4);
        let p = constrain(&raw, &band1(), DEFAULT_EPS).unwrap();
        let u = p.buses[0].eval(1.05 + 1e-12);
        assert!(u <= 0.0 && u.abs() < 1e-11);
    }

    #[test]
    fn large_negative_raw_hits_floor() {
        let mut raw = RawPolicyParams::zeros(1, 5);
        raw.buses[0].iter_mut().for_each(|x| *x = -1000.0);
        let p = constrain(&raw, &band1(), 1e-3).unwrap();
        let unit = &p.buses[0];
        let mut s = 0.0;
        for l in 1..5 {
            s += unit.wplus[l];
            assert_eq!(s, 1e-3);
        }
        // Collapsed spacing: every kink on the edge.
        assert!(unit.bplus[1..].iter().all(|&b| b == -1.05));
    }

    #[test]
    fn zero_raw_golden_values() {
        // Frozen reference for the canonical all-zero parameterization:
        // slopes eps + ln 2, kinks spaced 0.01·ln 2 apart.
        let raw = RawPolicyParams::zeros(1, 4);
        let p = constrain(&raw, &band1(), 1e-3).unwrap();
        let u = &p.buses[0];
        let ln2 = std::f64::consts::LN_2;
        let s = 1e-3 + ln2;
        let expect_w = [0.0, s, 0.0, 0.0];
        for (a, b) in u.wplus.iter().zip(expect_w) {
            assert!((a - b).abs() < 1e-15, "{:?}", u.wplus);
        }
        let expect_b = [0.0, -1.05, -1.05 - 0.01 * ln2, -1.05 - 0.02 * ln2];
        for (a, b) in u.bplus.iter().zip(expect_b) {
            assert!((a - b).abs() < 1e-15, "{:?}", u.bplus);
        }
        assert_eq!(u.wminus[1], -s);
        assert_eq!(u.bminus[1], 0.95);
        assert!((u.eval(1.10) + s * 0.05).abs() < 1e-12);
        assert!((u.eval(0.90) - s * 0.05).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut raw = RawPolicyParams::zeros(1, 4);
        assert_eq!(constrain(&raw, &band1(), 0.0).unwrap_err(), PolicyError::Eps(0.0));
        raw.buses[0][3] = f64::NAN;
        assert_eq!(
            constrain(&raw, &band1(), 1e-3).unwrap_err(),
            PolicyError::NonFinite { bus: 0, index: 3 }
        );
        let narrow = RawPolicyParams::zeros(1, 1);
        assert_eq!(constrain(&narrow, &band1(), 1e-3).unwrap_err(), PolicyError::Width(1));
    }

    #[test]
    fn deadband_gradient_is_zero() {
        let raw = RawPolicyParams::zeros(1, 6);
        let g = policy_param_grad(&raw, &band1(), 1e-3, 0, 1.0).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inactive_outer_kinks_have_zero_gradient() {
        let raw = RawPolicyParams::zeros(1, 6);
        // Just above the edge only unit 2 is active.
        let g = policy_param_grad(&raw, &band1(), 1e-3, 0, 1.051).unwrap();
        let d = 6;
        assert!(g[1] != 0.0);
        for l in 3..d {
            assert_eq!(g[l], 0.0, "slope {l}");
            assert_eq!(g[d + l], 0.0, "spacing {l}");
        }
    }
}
