//! Acceptance checks. Prints one line per criterion and exits nonzero if any
//! criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltstab::bench::{evaluate, EvalConfig};
use voltstab::dynamics::{scenario_suite, GridModel, ScenarioConfig, ScenarioKind};
use voltstab::grid::{generate_random_feeder, ImpedanceRange, RadialNetwork, VoltageBand};
use voltstab::linalg::symmetric_eigenvalues;
use voltstab::lyapunov::{certify_policy, CertifyConfig};
use voltstab::policy::{
    constrain, policy_param_grad, verify_monotone, verify_policy, LinearDeadband, LocalPolicy, MonotonePolicy,
    RawPolicyParams, StackedRelu, VerifyConfig, DEFAULT_EPS,
};
use voltstab::rl::{
    critic_update, net_backprop, net_eval, CriticSample, FeedForwardNet, Optimizer, TrainConfig, TrainedPolicy,
    Trainer, INPUT_SCALE,
};

const FD_STEP: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero gradients.
const GRAD_ABS_FLOOR: f64 = 1e-6;
const EVAL_SUITE_SEED: u64 = 12_345;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn five_bus() -> GridModel {
    GridModel::from_network(&RadialNetwork::five_bus())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut min_x = f64::INFINITY;
    let mut min_r = f64::INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(1..=56);
        let net = generate_random_feeder(n, rng.random(), ImpedanceRange::default()).unwrap();
        let s = net.sensitivity();
        min_x = min_x.min(symmetric_eigenvalues(&s.x).unwrap()[0]);
        min_r = min_r.min(symmetric_eigenvalues(&s.r).unwrap()[0]);
    }
    let elapsed = start.elapsed();
    outcome(
        min_x > 0.0 && min_r > 0.0 && elapsed < Duration::from_secs(10),
        format!("100 feeders, min eig X {min_x:.3e}, R {min_r:.3e}, {:.2}s (limit 10s)", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=56);
        let net = generate_random_feeder(n, rng.random(), ImpedanceRange::default()).unwrap();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, v) = net.solve_distflow(&p, &q).unwrap();
        let s = net.sensitivity();
        let rp = s.r.mul_vec(&p);
        let xq = s.x.mul_vec(&q);
        for i in 0..n {
            worst = worst.max((v[i] - (rp[i] + xq[i] + net.v0())).abs());
        }
    }
    outcome(worst <= 1e-10, format!("100 cases, max |v - (Rp + Xq + v0)| = {worst:.3e} (limit 1e-10)"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..1000 {
        let d = rng.random_range(2..=24);
        let lower = rng.random_range(0.85..1.0);
        let band = VoltageBand::uniform(1, lower, lower + rng.random_range(0.01..0.2));
        let mut raw = RawPolicyParams::zeros(1, d);
        for x in raw.buses[0].iter_mut() {
            *x = rng.random_range(-8.0..8.0);
        }
        let p = constrain(&raw, &band, DEFAULT_EPS).unwrap();
        if !verify_monotone(&p, 0, &VerifyConfig::default()).passed() {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("1000 random constrained controllers, {failures} audit failures"))
}

/// Constrained controller with piece slopes `eps + U[15, 25]` and random kink
/// spacings: the slope range whose rollouts reach the band within 100 steps
/// of 0.1.
fn criterion_4_policy(rng: &mut ChaCha8Rng, band: &VoltageBand) -> MonotonePolicy {
    let d = 8;
    let mut raw = RawPolicyParams::zeros(band.len(), d);
    for bus in &mut raw.buses {
        for l in 0..d {
            bus[l] = rng.random_range(15.0f64..25.0).exp_m1().ln();
            bus[2 * d + l] = rng.random_range(15.0f64..25.0).exp_m1().ln();
            bus[d + l] = rng.random_range(-2.0..2.0);
            bus[3 * d + l] = rng.random_range(-2.0..2.0);
        }
    }
    constrain(&raw, band, DEFAULT_EPS).unwrap()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let model = five_bus();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut rollouts, mut decrease_fail, mut converge_fail, mut other_fail, mut refined) = (0, 0, 0, 0, 0);
    for k in 0..50 {
        let p = criterion_4_policy(&mut rng, &model.band);
        let cfg = CertifyConfig {
            rollouts: 100,
            horizon: 100,
            dt: 0.1,
            convergence_tol: 1e-3,
            seed: k,
            ..CertifyConfig::default()
        };
        let cert = certify_policy(&model, &p, "random", &cfg).unwrap();
        rollouts += cert.convergence_to_band.checked;
        decrease_fail += cert.lyapunov_decrease.violations;
        converge_fail += cert.convergence_to_band.violations;
        other_fail += usize::from(!cert.jacobian_nonpositive.passed || !cert.strict_outside_band.passed);
        refined += cert.refined_rollouts;
    }
    let elapsed = start.elapsed();
    outcome(
        decrease_fail == 0 && converge_fail == 0 && other_fail == 0 && elapsed < Duration::from_secs(120),
        format!(
            "50 policies x 100 rollouts ({rollouts}), V increase {decrease_fail}, not in band at T {converge_fail}, \
             sign/strictness failures {other_fail}, refined {refined}, {:.1}s (limit 120s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_ABS_FLOOR)
}

fn near_kink(unit: &StackedRelu, v: f64) -> bool {
    let plus = unit.bplus.iter().map(|b| (v + b).abs());
    let minus = unit.bminus.iter().map(|b| (b - v).abs());
    plus.chain(minus).any(|d| d < 1e-4)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let band = VoltageBand::uniform(1, 0.95, 1.05);
    let mut errs: Vec<f64> = Vec::new();

    // Stacked-ReLU parameters through constrain(), and input slope.
    while errs.len() < 500 {
        let d = rng.random_range(3..=10);
        let mut raw = RawPolicyParams::zeros(1, d);
        for x in raw.buses[0].iter_mut() {
            *x = rng.random_range(-2.0..2.0);
        }
        let p = constrain(&raw, &band, DEFAULT_EPS).unwrap();
        let v = rng.random_range(0.8..1.2);
        if near_kink(&p.buses[0], v) {
            continue;
        }
        let fd_in = (p.local_action(0, v + FD_STEP) - p.local_action(0, v - FD_STEP)) / (2.0 * FD_STEP);
        errs.push(rel_err(p.local_slope(0, v), fd_in));
        let g = policy_param_grad(&raw, &band, DEFAULT_EPS, 0, v).unwrap();
        let k = rng.random_range(0..4 * d);
        let mut up = raw.clone();
        up.buses[0][k] += FD_STEP;
        let mut dn = raw.clone();
        dn.buses[0][k] -= FD_STEP;
        let fd = (constrain(&up, &band, DEFAULT_EPS).unwrap().local_action(0, v)
            - constrain(&dn, &band, DEFAULT_EPS).unwrap().local_action(0, v))
            / (2.0 * FD_STEP);
        errs.push(rel_err(g[k], fd));
    }

    // Feedforward nets: parameters and inputs.
    while errs.len() < 1000 {
        let n_in = rng.random_range(1..=8);
        let sizes = [n_in, rng.random_range(4..=32), rng.random_range(4..=32), 1];
        let net = FeedForwardNet::new(&sizes, &mut rng)
            .with_input_normalization(vec![1.0; n_in], vec![1.0 / INPUT_SCALE; n_in]);
        let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(0.9..1.1)).collect();
        let (pg, ig) = net_backprop(&net, &x, &[1.0]).unwrap();
        let k = rng.random_range(0..net.param_count());
        let mut up = net.clone();
        up.params_mut()[k] += FD_STEP;
        let mut dn = net.clone();
        dn.params_mut()[k] -= FD_STEP;
        let fd = (net_eval(&up, &x).unwrap()[0] - net_eval(&dn, &x).unwrap()[0]) / (2.0 * FD_STEP);
        errs.push(rel_err(pg[k], fd));
        let i = rng.random_range(0..n_in);
        let mut xu = x.clone();
        xu[i] += FD_STEP;
        let mut xd = x.clone();
        xd[i] -= FD_STEP;
        let fd = (net_eval(&net, &xu).unwrap()[0] - net_eval(&net, &xd).unwrap()[0]) / (2.0 * FD_STEP);
        errs.push(rel_err(ig[i], fd));
    }
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let probes = errs.len();
    outcome(worst <= GRAD_REL_TOL, format!("{probes} probes, max relative error {worst:.3e} (limit 1e-4)"))
}

struct TrainedRun {
    policy: TrainedPolicy,
    audit_failures: usize,
    iterates: usize,
    train_time: Duration,
}

fn train_and_audit(seed: u64) -> TrainedRun {
    let start = Instant::now();
    let cfg = TrainConfig {
        seed,
        record_wall_time: false,
        ..TrainConfig::default()
    };
    let episodes = cfg.episodes;
    let mut trainer = Trainer::new(five_bus(), cfg).unwrap();
    let verify = VerifyConfig::default();
    let mut audit_failures = 0;
    for _ in 0..episodes {
        trainer.run_episode().unwrap();
        let p = trainer.policy().unwrap();
        audit_failures += verify_policy(&p, &verify).iter().filter(|r| !r.passed()).count();
    }
    TrainedRun {
        policy: trainer.policy().unwrap(),
        audit_failures,
        iterates: episodes,
        train_time: start.elapsed(),
    }
}

struct Comparison {
    stability: f64,
    tc_ratio: f64,
    rec: f64,
    rec_linear: f64,
}

fn compare_with_linear(policy: &TrainedPolicy) -> Comparison {
    let model = five_bus();
    let suite = scenario_suite(
        &ScenarioConfig {
            seed: EVAL_SUITE_SEED,
            ..ScenarioConfig::default()
        },
        &ScenarioKind::ALL,
        200,
        &model.band,
        model.v0,
    );
    let linear = LinearDeadband::new(model.band.clone());
    let report = evaluate(&[("stable", policy), ("linear", &linear)], &model, &suite, &EvalConfig::default()).unwrap();
    let (s, l) = (report.policy("stable").unwrap(), report.policy("linear").unwrap());
    Comparison {
        stability: s.stability_rate,
        tc_ratio: s.transient_cost.mean / l.transient_cost.mean,
        rec: s.recovery_time.mean,
        rec_linear: l.recovery_time.mean,
    }
}

fn criteria_6_and_7() -> (Outcome, Outcome) {
    let start = Instant::now();
    let run = train_and_audit(0);
    let c6 = outcome(
        run.audit_failures == 0,
        format!(
            "{} episode iterates audited, {} violations, training {:.1}s",
            run.iterates,
            run.audit_failures,
            run.train_time.as_secs_f64()
        ),
    );
    let cmp = compare_with_linear(&run.policy);
    let a = cmp.stability == 1.0;
    let c = cmp.rec < cmp.rec_linear;
    let mut b = cmp.tc_ratio <= 0.9;
    let mut tc_note = format!("transient cost ratio {:.3}", cmp.tc_ratio);
    if !b {
        let mut ratios = vec![cmp.tc_ratio];
        for seed in 1..5 {
            ratios.push(compare_with_linear(&train_and_audit(seed).policy).tc_ratio);
        }
        ratios.sort_by(f64::total_cmp);
        b = ratios[2] <= 0.9;
        tc_note = format!("transient cost ratio {:.3}, median over seeds 0-4 {:.3}", cmp.tc_ratio, ratios[2]);
    }
    let elapsed = start.elapsed();
    let c7 = outcome(
        a && b && c && elapsed < Duration::from_secs(30 * 60),
        format!(
            "(a) stability {:.3} (b) {tc_note} (limit 0.9) (c) recovery {:.2} vs linear {:.2}, {:.1}s (limit 1800s)",
            cmp.stability,
            cmp.rec,
            cmp.rec_linear,
            elapsed.as_secs_f64()
        ),
    );
    (c6, c7)
}

fn criterion_8() -> Outcome {
    // Critic as the trainer builds it, on a frozen batch with γ = 0.
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 4;
    let mut sizes = vec![2 * n];
    sizes.extend(&cfg.critic_layers);
    sizes.push(1);
    let shift: Vec<f64> = std::iter::repeat_n(1.0, n).chain(std::iter::repeat_n(0.0, n)).collect();
    let mut critic = FeedForwardNet::new(&sizes, &mut rng).with_input_normalization(shift, vec![1.0 / INPUT_SCALE; 2 * n]);
    let target = critic.clone();
    let c = -0.37;
    let batch: Vec<CriticSample> = (0..cfg.batch_size)
        .map(|_| {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.9..1.1)).collect();
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
            CriticSample {
                input: v.iter().chain(&u).copied().collect(),
                reward: c,
                next_input: v.iter().chain(&u).copied().collect(),
            }
        })
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.critic_lr, critic.param_count());
    let mut reached = None;
    for step in 0..5000 {
        critic_update(&mut critic, &mut opt, &target, &batch, 0.0).unwrap();
        let mse = batch
            .iter()
            .map(|s| (net_eval(&critic, &s.input).unwrap()[0] - c).powi(2))
            .sum::<f64>()
            / batch.len() as f64;
        if mse < 1e-4 {
            reached = Some((step + 1, mse));
            break;
        }
    }
    match reached {
        Some((steps, mse)) => outcome(true, format!("MSE {mse:.3e} < 1e-4 after {steps} steps (limit 5000)")),
        None => outcome(false, "MSE not below 1e-4 within 5000 steps".into()),
    }
}

fn run_cli(args: &[String]) -> i32 {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_voltstab"))
        .args(args)
        .output()
        .expect("binary runs");
    out.status.code().unwrap_or(-1)
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let cfg_path = d("cfg.json");
    std::fs::write(&cfg_path, r#"{"episodes": 20}"#).unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let (ck, log, out) = (d(&format!("ck{k}.json")), d(&format!("log{k}.csv")), d(&format!("eval{k}")));
        let train: Vec<String> = ["train", "--config", &cfg_path, "--seed", "3", "--no-wall-clock", "--checkpoint", &ck, "--log", &log]
            .map(String::from)
            .to_vec();
        let eval: Vec<String> =
            ["evaluate", "--policy", &format!("stable={ck}"), "--policy", "linear", "--scenarios", "50", "--seed", "7", "--out-dir", &out]
                .map(String::from)
                .to_vec();
        if run_cli(&train) != 0 || run_cli(&eval) != 0 {
            return outcome(false, format!("CLI run {k} failed"));
        }
        let mut files = vec![std::fs::read(&ck).unwrap(), std::fs::read(&log).unwrap()];
        for f in ["report.csv", "voltage_traces.csv", "terminal_histogram.csv", "scenarios.json"] {
            files.push(std::fs::read(std::path::Path::new(&out).join(f)).unwrap());
        }
        runs.push(files);
    }
    let identical = runs[0] == runs[1];
    outcome(identical, format!("train + evaluate twice, {} artifacts bit-identical: {identical}", runs[0].len()))
}

fn main() {
    let mut all = true;
    let mut print = |k: &str, o: Outcome| {
        all &= o.pass;
        println!("criterion {k}: {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    print("1", criterion_1());
    print("2", criterion_2());
    print("3", criterion_3());
    print("4", criterion_4());
    print("5", criterion_5());
    let (c6, c7) = criteria_6_and_7();
    print("6", c6);
    print("7", c7);
    print("8", criterion_8());
    print("9", criterion_9());
    if !all {
        std::process::exit(1);
    }
}
