//! Sampled monotonicity certificate for a single bus controller.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};

use super::LocalPolicy;

/// Witnesses kept per failed clause.
const MAX_WITNESSES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub points: usize,
    /// The grid spans `[lower - margin, upper + margin]`.
    pub margin: f64,
    /// Required slope magnitude outside the band.
    pub eps: f64,
    /// Relative slack on `eps` for rounding in secant slopes.
    pub slope_rtol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            points: 10_000,
            margin: 0.5,
            eps: super::DEFAULT_EPS,
            slope_rtol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseResult {
    pub name: String,
    pub passed: bool,
    /// Voltages at which the clause fails (truncated).
    pub witnesses: Vec<f64>,
    pub violations: usize,
}

impl ClauseResult {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            passed: true,
            witnesses: Vec::new(),
            violations: 0,
        }
    }

    fn fail(&mut self, v: f64) {
        self.passed = false;
        self.violations += 1;
        if self.witnesses.len() < MAX_WITNESSES {
            self.witnesses.push(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub bus: usize,
    pub zero_in_band: ClauseResult,
    pub nonincreasing: ClauseResult,
    pub strict_outside_band: ClauseResult,
    pub terminal_slope: ClauseResult,
}

impl MonotoneReport {
    pub fn passed(&self) -> bool {
        self.clauses().iter().all(|c| c.passed)
    }

    pub fn clauses(&self) -> [&ClauseResult; 4] {
        [
            &self.zero_in_band,
            &self.nonincreasing,
            &self.strict_outside_band,
            &self.terminal_slope,
        ]
    }
}

/// Checks bus `bus` of `policy` on a uniform grid: exact zero in the band,
/// nonincreasing everywhere, secant slope at most `-eps` on every grid
/// interval lying outside the band, and slope magnitude at least `eps` at
/// both ends of the grid.
pub fn verify_monotone<P: LocalPolicy + ?Sized>(policy: &P, bus: usize, cfg: &VerifyConfig) -> MonotoneReport {
    let lower = policy.band().lower[bus];
    let upper = policy.band().upper[bus];
    let lo = lower - cfg.margin;
    let hi = upper + cfg.margin;
    let n = cfg.points.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|k| lo + step * k as f64).collect();
    let u: Vec<f64> = grid.iter().map(|&v| policy.local_action(bus, v)).collect();
    let limit = -cfg.eps * (1.0 - cfg.slope_rtol);
    let outside = |v: f64| v > upper || v < lower;

    let mut zero = ClauseResult::new("zero_in_band");
    let mut mono = ClauseResult::new("nonincreasing");
    let mut strict = ClauseResult::new("strict_outside_band");
    let mut terminal = ClauseResult::new("terminal_slope");

    for (k, (&v, &uk)) in grid.iter().zip(&u).enumerate() {
        if !outside(v) && uk != 0.0 {
            zero.fail(v);
        }
        if k + 1 < n {
            let (v1, u1) = (grid[k + 1], u[k + 1]);
            if !(u1 <= uk) {
                mono.fail(v1);
            }
            // Only intervals entirely on one side of the band.
            let fully_above = v >= upper && v1 > upper;
            let fully_below = v < lower && v1 <= lower;
            if fully_above || fully_below {
                let secant = (u1 - uk) / (v1 - v);
                if !(secant <= limit) {
                    strict.fail(v);
                }
            }
        }
    }
    for k in [0, n - 2] {
        let secant = (u[k + 1] - u[k]) / (grid[k + 1] - grid[k]);
        if !(secant <= limit) {
            terminal.fail(grid[k]);
        }
    }
    MonotoneReport {
        bus,
        zero_in_band: zero,
        nonincreasing: mono,
        strict_outside_band: strict,
        terminal_slope: terminal,
    }
}

/// Runs [`verify_monotone`] on every bus.
pub fn verify_policy<P: LocalPolicy + ?Sized>(policy: &P, cfg: &VerifyConfig) -> Vec<MonotoneReport> {
    (0..policy.band().len()).map(|bus| verify_monotone(policy, bus, cfg)).collect()
}
