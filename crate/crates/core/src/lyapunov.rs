//! Krasovskii-type Lyapunov function for the closed loop `dv/dt = X g(v)` and
//! a sampled certificate of the conditions that make it decrease.
//!
//! With `f = X g(v)` the candidate is `V = ½ fᵀ X⁻¹ f = ½ gᵀ X g`, and
//! `dV/dt = fᵀ D f` where `D = diag(g_i'(v_i))`. For decentralized policies
//! that are zero on the band and nonincreasing elsewhere, `D ⪯ 0` and
//! `dV/dt` vanishes only on the band.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    dist_to_band, rollout, scenario_suite, DynamicsError, GridModel, RolloutConfig, Scenario, ScenarioConfig,
    ScenarioKind,
};
use crate::hash::config_hash;
use crate::linalg::{norm2, symmetric_spectral_norm, Cholesky, LinalgError, Matrix};
use crate::policy::{LocalPolicy, DEFAULT_EPS};

/// Agreement required between the two algebraic forms of `V`.
pub const FORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error("sensitivity matrix rejected: {0}")]
    Matrix(#[from] LinalgError),
    #[error("Lyapunov forms disagree: ½gᵀXg = {direct:e}, ½fᵀX⁻¹f = {via_inverse:e}")]
    FormMismatch { direct: f64, via_inverse: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// The Lyapunov candidate for a fixed positive definite `X`.
#[derive(Debug, Clone)]
pub struct Krasovskii {
    x: Matrix,
    chol: Cholesky,
}

impl Krasovskii {
    pub fn new(x: &Matrix) -> Result<Self, LyapunovError> {
        let chol = Cholesky::factor(x)?;
        Ok(Self { x: x.clone(), chol })
    }

    fn actions<P: LocalPolicy + ?Sized>(&self, policy: &P, v: &[f64]) -> Result<Vec<f64>, LyapunovError> {
        if v.len() != self.x.rows() {
            return Err(LyapunovError::Dimension {
                expected: self.x.rows(),
                got: v.len(),
            });
        }
        Ok(policy.action(v))
    }

    /// `½ gᵀ X g`, without the cross-check.
    pub fn value_direct<P: LocalPolicy + ?Sized>(&self, policy: &P, v: &[f64]) -> Result<f64, LyapunovError> {
        let g = self.actions(policy, v)?;
        Ok(0.5 * self.x.quadratic_form(&g))
    }

    /// `½ fᵀ X⁻¹ f` with `f = X g`, the vector-field form.
    pub fn value_via_inverse<P: LocalPolicy + ?Sized>(&self, policy: &P, v: &[f64]) -> Result<f64, LyapunovError> {
        let g = self.actions(policy, v)?;
        let f = self.x.mul_vec(&g);
        let xinv_f = self.chol.solve(&f)?;
        Ok(0.5 * crate::linalg::dot(&f, &xinv_f))
    }

    /// `V(v)`, checked against the vector-field form.
    pub fn value<P: LocalPolicy + ?Sized>(&self, policy: &P, v: &[f64]) -> Result<f64, LyapunovError> {
        let direct = self.value_direct(policy, v)?;
        let via_inverse = self.value_via_inverse(policy, v)?;
        if (direct - via_inverse).abs() > FORM_TOL * direct.abs().max(1.0) {
            return Err(LyapunovError::FormMismatch { direct, via_inverse });
        }
        Ok(direct)
    }

    /// `dV/dt = (X g)ᵀ D (X g)` along the continuous-time closed loop.
    pub fn time_derivative<P: LocalPolicy + ?Sized>(&self, policy: &P, v: &[f64]) -> Result<f64, LyapunovError> {
        let g = self.actions(policy, v)?;
        let f = self.x.mul_vec(&g);
        let mut d = vec![0.0; v.len()];
        policy.jacobian_diag(v, &mut d);
        Ok(f.iter().zip(&d).map(|(fi, di)| fi * di * fi).sum())
    }
}

pub fn krasovskii_value<P: LocalPolicy + ?Sized>(x: &Matrix, policy: &P, v: &[f64]) -> Result<f64, LyapunovError> {
    Krasovskii::new(x)?.value(policy, v)
}

pub fn lyapunov_time_derivative<P: LocalPolicy + ?Sized>(
    x: &Matrix,
    policy: &P,
    v: &[f64],
) -> Result<f64, LyapunovError> {
    Krasovskii::new(x)?.time_derivative(policy, v)
}

/// True iff every local action vanishes, i.e. `v` is an equilibrium.
pub fn equilibrium_check<P: LocalPolicy + ?Sized>(policy: &P, v: &[f64]) -> bool {
    v.iter().enumerate().all(|(i, &vi)| policy.local_action(i, vi) == 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    /// Per-bus grid points over `[lower - margin, upper + margin]`.
    pub grid_points: usize,
    pub margin: f64,
    /// Random joint voltage vectors for the derivative sign check.
    pub joint_samples: usize,
    pub rollouts: usize,
    pub horizon: usize,
    pub dt: f64,
    /// Required slope magnitude outside the band.
    pub eps: f64,
    /// Relative slack on `eps` for rounding.
    pub slope_rtol: f64,
    /// `dist_to_band(v_T)` must end below this.
    pub convergence_tol: f64,
    /// On a discrete decrease violation the rollout is repeated with
    /// `dt / refine_factor` (same simulated time span).
    pub refine_factor: usize,
    pub scenario: ScenarioConfig,
    pub seed: u64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            grid_points: 200,
            margin: 0.5,
            joint_samples: 10_000,
            rollouts: 100,
            horizon: 100,
            dt: crate::dynamics::DEFAULT_DT,
            eps: DEFAULT_EPS,
            slope_rtol: 1e-6,
            convergence_tol: 1e-3,
            refine_factor: 10,
            scenario: ScenarioConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub detail: String,
    pub voltage: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateClause {
    pub passed: bool,
    pub checked: usize,
    pub violations: usize,
    pub witnesses: Vec<Witness>,
}

impl CertificateClause {
    fn new() -> Self {
        Self {
            passed: true,
            checked: 0,
            violations: 0,
            witnesses: Vec::new(),
        }
    }

    fn fail(&mut self, w: Witness) {
        self.passed = false;
        self.violations += 1;
        if self.witnesses.len() < 16 {
            self.witnesses.push(w);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub eps: f64,
    pub slope_rtol: f64,
    pub convergence_tol: f64,
    /// `κ` in the per-step allowance `κ·dt²·‖u‖²`.
    pub kappa: f64,
    pub dt: f64,
}

/// Outcome of [`certify_policy`]. Failures are recorded as witnesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub policy_id: String,
    pub passed: bool,
    /// Every diagonal Jacobian entry is `≤ 0`.
    pub jacobian_nonpositive: CertificateClause,
    /// Diagonal entries are `≤ -eps` outside the band.
    pub strict_outside_band: CertificateClause,
    /// `dV/dt ≤ 0` at sampled points, and `V` nonincreasing along rollouts up
    /// to the Euler allowance.
    pub lyapunov_decrease: CertificateClause,
    /// `dist_to_band(v_T) ≤ convergence_tol` for every rollout.
    pub convergence_to_band: CertificateClause,
    pub tolerances: Tolerances,
    pub config_hash: String,
    /// Rollouts that needed a refined step to satisfy the decrease check.
    pub refined_rollouts: usize,
}

impl StabilityCertificate {
    pub fn clauses(&self) -> [(&'static str, &CertificateClause); 4] {
        [
            ("jacobian_nonpositive", &self.jacobian_nonpositive),
            ("strict_outside_band", &self.strict_outside_band),
            ("lyapunov_decrease", &self.lyapunov_decrease),
            ("convergence_to_band", &self.convergence_to_band),
        ]
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "certificate for {}: {}\n",
            self.policy_id,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for (name, c) in self.clauses() {
            s.push_str(&format!(
                "  {name:<22} {} ({} checked, {} violations)\n",
                if c.passed { "pass" } else { "FAIL" },
                c.checked,
                c.violations
            ));
            for w in c.witnesses.iter().take(3) {
                s.push_str(&format!("    witness: {} value={:e} v={:?}\n", w.detail, w.value, w.voltage));
            }
        }
        s.push_str(&format!(
            "  tolerances: eps={} conv_tol={} kappa={:e} dt={}\n  config hash: {}\n",
            self.tolerances.eps, self.tolerances.convergence_tol, self.tolerances.kappa, self.tolerances.dt, self.config_hash
        ));
        s
    }
}

/// Per-step allowance constant for Euler: with `Δv = dt·X g` and monotone
/// `g` of Lipschitz constant `L`, `V(t+dt) - V(t) ≤ ½‖X‖³ L² dt² ‖g‖²`.
pub fn euler_kappa(x_norm: f64, lipschitz: f64) -> f64 {
    0.5 * x_norm.powi(3) * lipschitz * lipschitz
}

struct RolloutCheck {
    decrease: Option<Witness>,
    convergence: Option<Witness>,
    refined: bool,
}

fn decrease_violation<P: LocalPolicy + ?Sized>(
    lyap: &Krasovskii,
    policy: &P,
    model: &GridModel,
    scenario: &Scenario,
    cfg: &RolloutConfig,
    kappa: f64,
) -> Result<(Option<Witness>, Vec<f64>), LyapunovError> {
    let traj = rollout(policy, model, &scenario.v_env, &scenario.q0, cfg)?;
    let mut prev = lyap.value_direct(policy, &traj.voltages[0])?;
    let mut violation = None;
    for t in 0..traj.actions.len() {
        let next = lyap.value_direct(policy, &traj.voltages[t + 1])?;
        let u = norm2(&traj.actions[t]);
        let allowance = kappa * cfg.dt * cfg.dt * u * u;
        // Absolute floor for rounding in the quadratic form.
        if next > prev + allowance + 1e-14 * prev.max(1e-12) && violation.is_none() {
            violation = Some(Witness {
                detail: format!("V rose at step {t} (dt={})", cfg.dt),
                voltage: traj.voltages[t].clone(),
                value: next - prev,
            });
        }
        prev = next;
    }
    if traj.diverged && violation.is_none() {
        violation = Some(Witness {
            detail: "rollout diverged".into(),
            voltage: traj.final_voltage().to_vec(),
            value: f64::INFINITY,
        });
    }
    Ok((violation, traj.final_voltage().to_vec()))
}

/// Samples the stability conditions for `policy` on `model`.
pub fn certify_policy<P: LocalPolicy + ?Sized>(
    model: &GridModel,
    policy: &P,
    policy_id: &str,
    cfg: &CertifyConfig,
) -> Result<StabilityCertificate, LyapunovError> {
    let n = model.n();
    if policy.band().len() != n {
        return Err(LyapunovError::Dimension {
            expected: n,
            got: policy.band().len(),
        });
    }
    let lyap = Krasovskii::new(&model.x)?;
    let x_norm = symmetric_spectral_norm(&model.x)?;
    let kappa = euler_kappa(x_norm, policy.lipschitz());
    let limit = -cfg.eps * (1.0 - cfg.slope_rtol);

    // Per-bus Jacobian sign on a grid.
    let mut jac = CertificateClause::new();
    let mut strict = CertificateClause::new();
    for bus in 0..n {
        let (lo, hi) = (policy.band().lower[bus], policy.band().upper[bus]);
        let a = lo - cfg.margin;
        let b = hi + cfg.margin;
        let m = cfg.grid_points.max(2);
        for k in 0..m {
            let v = a + (b - a) * k as f64 / (m - 1) as f64;
            let slope = policy.local_slope(bus, v);
            jac.checked += 1;
            if !(slope <= 0.0) {
                jac.fail(Witness {
                    detail: format!("bus {bus}: dg/dv > 0"),
                    voltage: vec![v],
                    value: slope,
                });
            }
            if v > hi || v < lo {
                strict.checked += 1;
                if !(slope <= limit) {
                    strict.fail(Witness {
                        detail: format!("bus {bus}: dg/dv > -eps outside band"),
                        voltage: vec![v],
                        value: slope,
                    });
                }
            }
        }
    }

    // Continuous-time derivative sign at random joint voltages.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<Vec<f64>> = (0..cfg.joint_samples)
        .map(|_| {
            (0..n)
                .map(|i| {
                    let a = policy.band().lower[i] - cfg.margin;
                    let b = policy.band().upper[i] + cfg.margin;
                    rng.random_range(a..b)
                })
                .collect()
        })
        .collect();
    let derivs: Vec<f64> = samples
        .par_iter()
        .map(|v| lyap.time_derivative(policy, v))
        .collect::<Result<_, _>>()?;
    let mut decrease = CertificateClause::new();
    for (v, d) in samples.iter().zip(&derivs) {
        decrease.checked += 1;
        if !(*d <= 0.0) {
            decrease.fail(Witness {
                detail: "dV/dt > 0".into(),
                voltage: v.clone(),
                value: *d,
            });
        }
    }

    // Rollouts: discrete decrease with adaptive refinement, then convergence.
    let scenario_cfg = ScenarioConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cfg.scenario.clone()
    };
    let scenarios = scenario_suite(&scenario_cfg, &ScenarioKind::ALL, cfg.rollouts, &model.band, model.v0);
    let base = RolloutConfig {
        horizon: cfg.horizon,
        dt: cfg.dt,
        ..RolloutConfig::default()
    };
    let checks: Vec<RolloutCheck> = scenarios
        .par_iter()
        .enumerate()
        .map(|(k, sc)| -> Result<RolloutCheck, LyapunovError> {
            let (mut violation, v_final) = decrease_violation(&lyap, policy, model, sc, &base, kappa)?;
            let mut refined = false;
            if violation.is_some() && cfg.refine_factor > 1 {
                let fine = RolloutConfig {
                    horizon: cfg.horizon * cfg.refine_factor,
                    dt: cfg.dt / cfg.refine_factor as f64,
                    ..base
                };
                let (fine_violation, _) = decrease_violation(&lyap, policy, model, sc, &fine, kappa)?;
                refined = fine_violation.is_none();
                violation = fine_violation;
            }
            let dist = dist_to_band(&v_final, &model.band);
            let convergence = (!(dist <= cfg.convergence_tol)).then(|| Witness {
                detail: format!("rollout {k} ({}) ends {dist:e} from band", sc.label),
                voltage: v_final.clone(),
                value: dist,
            });
            let decrease = violation.map(|mut w| {
                w.detail = format!("rollout {k}: {}", w.detail);
                w
            });
            Ok(RolloutCheck {
                decrease,
                convergence,
                refined,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut convergence = CertificateClause::new();
    let mut refined_rollouts = 0;
    for c in checks {
        decrease.checked += 1;
        convergence.checked += 1;
        refined_rollouts += usize::from(c.refined);
        if let Some(w) = c.decrease {
            decrease.fail(w);
        }
        if let Some(w) = c.convergence {
            convergence.fail(w);
        }
    }

    let passed = jac.passed && strict.passed && decrease.passed && convergence.passed;
    Ok(StabilityCertificate {
        policy_id: policy_id.to_string(),
        passed,
        jacobian_nonpositive: jac,
        strict_outside_band: strict,
        lyapunov_decrease: decrease,
        convergence_to_band: convergence,
        tolerances: Tolerances {
            eps: cfg.eps,
            slope_rtol: cfg.slope_rtol,
            convergence_tol: cfg.convergence_tol,
            kappa,
            dt: cfg.dt,
        },
        config_hash: config_hash(cfg),
        refined_rollouts,
    })
}
