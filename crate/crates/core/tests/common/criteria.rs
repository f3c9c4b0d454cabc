//! The acceptance checks, shared by the focused integration tests and the
//! `acceptance` summary.

use std::sync::OnceLock;

use h2o2::goal_space::LatentGoal;
use h2o2::gridworld::{EnvConfig, GridState};
use h2o2::harness::config::{ExperimentConfig, Variant};
use h2o2::harness::eval::{goal_reaching_rate, sample_goal_tasks};
use h2o2::harness::gradsuite::check_networks;
use h2o2::harness::metrics::MetricsRecord;
use h2o2::harness::train;
use h2o2::hindsight::{
    goal_similarity, relabel, sample_goal_pairs, similarity_filter, GoalSamplerConfig,
};
use h2o2::llc::{ActingHead, LlcConfig, LlcMode};
use h2o2::replay::{random_trajectory, Transition};
use h2o2::smdp::{
    effective_discount, Episode, OptionExecutionRecord, RuntimeConfig, SmdpAction,
    TerminationReason,
};
use h2o2::vtrace::compute_vtrace;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scripted::{corridor, WalkRight};
use super::tabular;

pub struct Verdict {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "[{}] {}. {}: {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

// ---------------------------------------------------------------- 1

pub struct VTraceOracle {
    pub hand_exact: bool,
    pub estimate: [f64; tabular::STATES],
    pub oracle: [f64; tabular::STATES],
    /// Value of the unclipped target policy, to show clipping matters.
    pub unclipped: [f64; tabular::STATES],
    pub max_error: f64,
}

pub fn vtrace_oracle_run(unrolls: usize, iterations: usize, averaged: usize) -> VTraceOracle {
    let hand = compute_vtrace(
        &[0.5, 0.6],
        0.0,
        &[0.0, 1.0],
        &[0.8, 0.8],
        &[0.0, 0.0],
        1.0,
        1.0,
    )
    .unwrap();
    let hand_exact = (hand.targets[0] - 0.8).abs() < 1e-12
        && (hand.targets[1] - 1.0).abs() < 1e-12
        && (hand.advantages[0] - 0.3).abs() < 1e-12;

    let m = tabular::mdp();
    let len = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut v = [0.0; tabular::STATES];
    let mut avg = [0.0; tabular::STATES];
    for it in 0..iterations {
        let mut sum = [0.0; tabular::STATES];
        let mut count = [0usize; tabular::STATES];
        for _ in 0..unrolls {
            let u = tabular::unroll(&m, len, &mut rng);
            let values: Vec<f64> = u.states.iter().map(|&s| v[s]).collect();
            let log_rhos: Vec<f64> = u
                .states
                .iter()
                .zip(&u.actions)
                .map(|(&s, &a)| (tabular::PI[s][a] / tabular::MU[s][a]).ln())
                .collect();
            let out = compute_vtrace(
                &values,
                v[u.last],
                &u.rewards,
                &vec![m.gamma; len],
                &log_rhos,
                1.0,
                1.0,
            )
            .unwrap();
            for (&s, &t) in u.states.iter().zip(&out.targets) {
                sum[s] += t;
                count[s] += 1;
            }
        }
        for s in 0..tabular::STATES {
            v[s] = sum[s] / count[s] as f64;
        }
        if it + averaged >= iterations {
            for s in 0..tabular::STATES {
                avg[s] += v[s] / averaged as f64;
            }
        }
    }
    let oracle = tabular::evaluate(&m, &tabular::clipped_policy(1.0));
    let unclipped = tabular::evaluate(&m, &tabular::PI);
    let max_error = (0..tabular::STATES)
        .map(|s| (avg[s] - oracle[s]).abs())
        .fold(0.0, f64::max);
    VTraceOracle {
        hand_exact,
        estimate: avg,
        oracle,
        unclipped,
        max_error,
    }
}

pub fn vtrace_oracle() -> Verdict {
    let r = vtrace_oracle_run(10_000, 80, 40);
    let gap = (0..tabular::STATES)
        .map(|s| (r.oracle[s] - r.unclipped[s]).abs())
        .fold(0.0, f64::max);
    Verdict {
        id: 1,
        name: "V-Trace oracle",
        pass: r.hand_exact && r.max_error < 1e-2,
        detail: format!(
            "hand example exact={}, max |v - DP| = {:.4} (tol 1e-2), clipped vs unclipped fixed point differ by {:.3}",
            r.hand_exact, r.max_error, gap
        ),
    }
}

// ---------------------------------------------------------------- 2

pub fn gradient_suite(seeds: u64) -> Verdict {
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for seed in 0..seeds {
        for c in check_networks(seed).unwrap() {
            checked += 1;
            if c.max_relative_error >= worst.0 {
                worst = (c.max_relative_error, format!("{} seed {}", c.network, seed));
            }
        }
    }
    Verdict {
        id: 2,
        name: "gradient suite",
        pass: worst.0 <= 1e-5,
        detail: format!(
            "{checked} network checks, worst relative error {:.2e} ({})",
            worst.0, worst.1
        ),
    }
}

// ---------------------------------------------------------------- 4

fn trajectory_pool() -> &'static Vec<Vec<Transition>> {
    static POOL: OnceLock<Vec<Vec<Transition>>> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut out = Vec::new();
        let mut seed = 0;
        while out.len() < 8 {
            let t = random_trajectory(EnvConfig::default(), seed, 64, &mut rng).unwrap();
            if t.len() == 64 {
                out.push(t.steps);
            }
            seed += 1;
        }
        out
    })
}

fn relabel_case(
    len: usize,
    dim: usize,
    min_len: usize,
    span: usize,
    p_reward: f64,
    seed: u64,
) -> Result<(), TestCaseError> {
    let pool = trajectory_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = &pool[rng.random_range(0..pool.len())][..len];
    let cfg = GoalSamplerConfig {
        min_len,
        max_len: min_len + span,
        p_reward,
        goals_per_trajectory: 4,
    };
    let embeddings: Vec<Vec<f64>> = (0..len)
        .map(|_| {
            let mut e: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            e[0] += 2.0; // keeps norms away from zero
            e
        })
        .collect();
    let rewards: Vec<f64> = (0..len)
        .map(|_| if rng.random_bool(0.1) { 1.0 } else { 0.0 })
        .collect();
    let admissible = similarity_filter(&goal_similarity(&embeddings).unwrap());
    let pairs = sample_goal_pairs(&rewards, &embeddings, &cfg, &mut rng).unwrap();
    let gamma = 0.8;
    for &(s, e) in &pairs {
        prop_assert!(s < e && e < len);
        prop_assert!(
            e - s >= cfg.min_len && e - s <= cfg.max_len,
            "window ({s}, {e}) outside bounds"
        );
        prop_assert!(admissible[e], "end {e} not admissible");
        let task = relabel(steps, s, e, gamma, cfg.max_len);
        prop_assert_eq!(task.len(), e - s + 1);
        prop_assert_eq!(task.rewards.iter().filter(|&&r| r != 0.0).count(), 1);
        prop_assert_eq!(task.rewards[e - s], 1.0);
        prop_assert_eq!(task.discounts[e - s], 0.0);
        prop_assert!(task.discounts[..e - s].iter().all(|&d| d == gamma));
        for (i, &label) in task.distance_labels.iter().enumerate() {
            prop_assert_eq!(label, (e - (s + i)).min(cfg.max_len));
        }
        prop_assert_eq!(&task.goal, &steps[e].observation);
        prop_assert_eq!(&task, &relabel(steps, s, e, gamma, cfg.max_len));
    }
    Ok(())
}

pub fn relabel_properties(cases: u32) -> std::result::Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        3usize..=64,
        1usize..=6,
        2usize..=6,
        1usize..=16,
        0.0f64..=1.0,
        any::<u64>(),
    );
    runner
        .run(&strategy, |(len, dim, min_len, span, p, seed)| {
            relabel_case(len, dim, min_len, span, p, seed)
        })
        .map_err(|e| e.to_string())
}

/// The worked example: four goals, the two unique ones are kept.
pub fn worked_filter_example() -> bool {
    let e = vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 0.0],
        vec![0.7, 0.7],
    ];
    let sim = goal_similarity(&e).unwrap();
    let expected = [1.0, 0.5f64.sqrt(), 1.0, 0.5f64.sqrt()];
    let sim_ok = sim.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-12);
    sim_ok && similarity_filter(&sim) == [false, true, false, true]
}

pub fn relabel_invariants(cases: u32) -> Verdict {
    let props = relabel_properties(cases);
    let worked = worked_filter_example();
    Verdict {
        id: 4,
        name: "relabeling invariants",
        pass: props.is_ok() && worked,
        detail: match props {
            Ok(()) => {
                format!("{cases} property cases held; worked 4-goal filter example exact={worked}")
            }
            Err(e) => format!("property failure: {e}; worked example exact={worked}"),
        },
    }
}

// ---------------------------------------------------------------- 5

/// One option or primitive per scripted scenario; returns the reasons seen.
pub fn scripted_reasons() -> Vec<TerminationReason> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let goal = || SmdpAction::Option(LatentGoal::zeros(2));
    let mut seen = Vec::new();
    let cfg = RuntimeConfig::default();

    let mut llc = WalkRight::new(1.0, None);
    let mut ep = Episode::start(corridor(50), cfg, &mut llc).unwrap();
    seen.push(ep.first_frame().1);
    seen.push(
        ep.execute(SmdpAction::Primitive(0), &mut llc, &mut rng)
            .unwrap()
            .reason,
    );
    seen.push(ep.execute(goal(), &mut llc, &mut rng).unwrap().reason);

    let mut llc = WalkRight::new(1.0, Some(3));
    let mut ep = Episode::start(corridor(50), cfg, &mut llc).unwrap();
    seen.push(ep.execute(goal(), &mut llc, &mut rng).unwrap().reason);

    let mut llc = WalkRight::new(cfg.tau / 2.0, Some(1));
    let mut ep = Episode::start(corridor(50), cfg, &mut llc).unwrap();
    seen.push(ep.execute(goal(), &mut llc, &mut rng).unwrap().reason);

    let long = RuntimeConfig { timeout: 32, ..cfg };
    let mut llc = WalkRight::new(1.0, None);
    let mut ep = Episode::start(corridor(50), long, &mut llc).unwrap();
    seen.push(ep.execute(goal(), &mut llc, &mut rng).unwrap().reason);
    seen
}

/// Telemetry invariants of one metrics stream.
pub fn stream_problems(
    label: &str,
    timeout: usize,
    primitive_only: bool,
    metrics: &[MetricsRecord],
) -> Vec<String> {
    let mut out = Vec::new();
    for m in metrics {
        if let Some(avg) = m.avg_llc_steps {
            if !(1.0..=timeout as f64).contains(&avg) {
                out.push(format!(
                    "{label}: avg_llc_steps {avg} outside [1, {timeout}] at {}",
                    m.frames
                ));
            }
            if primitive_only && avg != 1.0 {
                out.push(format!(
                    "{label}: primitive-only ratio {avg} != 1 at {}",
                    m.frames
                ));
            }
            let total: f64 = m.termination.values().sum();
            if (total - 1.0).abs() > 1e-9 {
                out.push(format!(
                    "{label}: termination proportions sum to {total} at {}",
                    m.frames
                ));
            }
        }
    }
    out
}

/// Short runs of every variant and of the timeout arms.
pub fn short_runs(budget: u64) -> Vec<(String, usize, bool, Vec<MetricsRecord>)> {
    let mut out = Vec::new();
    let mut configs = Vec::new();
    for v in Variant::ALL {
        let mut c = ExperimentConfig::default()
            .with("variant", v.name())
            .unwrap();
        if v == Variant::ActionRepeat {
            c = c.with("runtime.action_repeat", "2").unwrap();
        }
        configs.push((v.name().to_string(), c));
    }
    for t in [16, 32] {
        let c = ExperimentConfig::default()
            .with("runtime.timeout", &t.to_string())
            .unwrap();
        configs.push((format!("h2o2 timeout={t}"), c));
    }
    for (label, mut c) in configs {
        c.budget = budget;
        c.metrics_every = budget / 4;
        let run = train(&c, None).unwrap();
        let primitive_only = !c.variant.options() && c.runtime.action_repeat == 1;
        out.push((
            label,
            c.runtime.timeout * c.runtime.action_repeat,
            primitive_only,
            run.metrics,
        ));
    }
    out
}

pub fn smdp_semantics(extra: &[(String, usize, bool, Vec<MetricsRecord>)]) -> Verdict {
    let seen = scripted_reasons();
    let missing: Vec<&str> = TerminationReason::ALL
        .iter()
        .filter(|r| !seen.contains(r))
        .map(|r| r.name())
        .collect();
    let runs = short_runs(20_000);
    let mut problems = Vec::new();
    let mut streams = 0;
    for (label, timeout, prim, metrics) in runs.iter().chain(extra) {
        streams += 1;
        problems.extend(stream_problems(label, *timeout, *prim, metrics));
    }
    Verdict {
        id: 5,
        name: "SMDP semantics",
        pass: missing.is_empty() && problems.is_empty(),
        detail: format!(
            "scripted reasons {:?} (missing {:?}); {} metric streams checked, {} problems{}",
            seen.iter().map(|r| r.name()).collect::<Vec<_>>(),
            missing,
            streams,
            problems.len(),
            problems
                .first()
                .map(|p| format!(", first: {p}"))
                .unwrap_or_default()
        ),
    }
}

// ---------------------------------------------------------------- 8

fn primitive_records(n: usize, steps_each: usize) -> Vec<OptionExecutionRecord> {
    let obs = GridState::generate(0, EnvConfig::default())
        .unwrap()
        .observe();
    (0..n)
        .map(|_| OptionExecutionRecord {
            action: SmdpAction::Primitive(0),
            env_steps: steps_each,
            reward: 0.0,
            reason: TerminationReason::PrimitiveDone,
            observation: obs.clone(),
            done: false,
        })
        .collect()
}

pub fn horizon_telemetry() -> Verdict {
    let flat = effective_discount(0.9, &primitive_records(15, 1));
    // ten decisions covering fifteen env steps: 1.5 steps per option
    let mut h = primitive_records(5, 1);
    h.extend(primitive_records(5, 2));
    let hier = effective_discount(0.9, &h);
    let pass = (flat.per_env_step - 0.205891132094649).abs() < 1e-15
        && hier.env_steps == 15
        && hier.decisions == 10
        && (hier.per_decision - 0.3486784401).abs() < 1e-15;
    Verdict {
        id: 8,
        name: "horizon-shortening telemetry",
        pass,
        detail: format!(
            "flat 15 steps -> {:.6} (0.21 reported); 10 HLC steps over 15 env steps -> {:.6}; \
             the reported 0.59 is not reproduced (it equals 0.9^5 = {:.4})",
            flat.per_env_step,
            hier.per_decision,
            0.9f64.powi(5)
        ),
    }
}

// ---------------------------------------------------------------- 3

pub struct Dominance {
    pub kl_to_behavior: f64,
    pub encoder_kl_per_dim: f64,
}

/// Trains on a fixed random dataset and measures the regularized quantities
/// on held-out batches from the same data.
pub fn regularizer_run(alpha: f64, beta: f64, steps: usize, seed: u64) -> Dominance {
    let env = EnvConfig::default();
    let data = super::random_replay(env, 200, seed);
    let config = LlcConfig {
        alpha,
        beta,
        ..LlcConfig::default()
    };
    let learner = super::train_offline(&config, LlcMode::GoalConditioned, &data, steps, seed);
    let d = super::evaluate(&learner, &data, 32, seed + 1);
    Dominance {
        kl_to_behavior: d.kl_to_behavior,
        encoder_kl_per_dim: d.encoder_kl,
    }
}

pub fn regularizer_dominance(steps: usize) -> Verdict {
    let defaults = LlcConfig::default();
    let kl = regularizer_run(100.0, defaults.beta, steps, 0);
    let enc = regularizer_run(defaults.alpha, 1.0, steps, 0);
    // the same run at the default weights shows the pins are not vacuous
    let control = regularizer_run(defaults.alpha, defaults.beta, steps, 0);
    let pass = kl.kl_to_behavior < 0.01 && enc.encoder_kl_per_dim < 0.05;
    Verdict {
        id: 3,
        name: "regularizer dominance",
        pass,
        detail: format!(
            "alpha=100: KL(pi||mu) = {:.5} nats (< 0.01); beta=1: encoder KL = {:.5} nats/dim (< 0.05); \
             default weights: {:.3} and {:.3}; {steps} steps each",
            kl.kl_to_behavior, enc.encoder_kl_per_dim, control.kl_to_behavior, control.encoder_kl_per_dim
        ),
    }
}

// ---------------------------------------------------------------- 6

pub struct OfflineVsBc {
    pub seed: u64,
    pub policy: f64,
    pub behavior: f64,
}

/// One seed: train the goal-conditioned LLC on random-play data, then act
/// toward 500 held-out goals with each head under the same sampling.
pub fn offline_vs_bc_run(seed: u64, trajectories: usize, steps: usize) -> OfflineVsBc {
    let env = EnvConfig::default();
    let data = super::random_replay(env, trajectories, seed);
    let learner = super::train_offline(
        &LlcConfig::default(),
        LlcMode::GoalConditioned,
        &data,
        steps,
        seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let tasks = sample_goal_tasks(env, 500, 16, &mut rng).unwrap();
    let rate = |head| {
        let mut r = ChaCha8Rng::seed_from_u64(2000 + seed);
        goal_reaching_rate(&learner.nets, head, &tasks, 16, &mut r).unwrap()
    };
    OfflineVsBc {
        seed,
        policy: rate(ActingHead::Policy),
        behavior: rate(ActingHead::Behavior),
    }
}

pub fn offline_beats_bc(trajectories: usize, steps: usize) -> Verdict {
    let runs: Vec<OfflineVsBc> = (0..3)
        .map(|s| offline_vs_bc_run(s, trajectories, steps))
        .collect();
    let pi = runs.iter().map(|r| r.policy).sum::<f64>() / 3.0;
    let mu = runs.iter().map(|r| r.behavior).sum::<f64>() / 3.0;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed{} {:.3}/{:.3}", r.seed, r.policy, r.behavior))
        .collect();
    Verdict {
        id: 6,
        name: "offline RL beats BC",
        pass: pi >= 2.0 * mu,
        detail: format!(
            "attainment pi {pi:.3} vs mu {mu:.3} (needs >= 2x); per seed pi/mu: {}",
            per_seed.join(", ")
        ),
    }
}

// ---------------------------------------------------------------- 7

pub type Stream = (String, usize, bool, Vec<MetricsRecord>);

/// Episode-weighted success over bins closing after `from` frames.
pub fn final_success(metrics: &[MetricsRecord], from: u64) -> f64 {
    let (mut wins, mut episodes) = (0.0, 0.0);
    for m in metrics.iter().filter(|m| m.frames > from) {
        if let Some(s) = m.success_rate {
            wins += s * m.episodes as f64;
            episodes += m.episodes as f64;
        }
    }
    if episodes > 0.0 {
        wins / episodes
    } else {
        0.0
    }
}

/// Decision-weighted share of `reason` over bins closing by `until` frames.
pub fn reason_share(metrics: &[MetricsRecord], reason: TerminationReason, until: u64) -> f64 {
    let (mut hits, mut decisions) = (0.0, 0.0);
    for m in metrics.iter().filter(|m| m.frames <= until) {
        hits += m.fraction(reason) * m.decisions as f64;
        decisions += m.decisions as f64;
    }
    if decisions > 0.0 {
        hits / decisions
    } else {
        0.0
    }
}

fn end_to_end_run(variant: Variant, overrides: &[(&str, &str)], seed: u64, budget: u64) -> Stream {
    let mut c = ExperimentConfig::default()
        .with("variant", variant.name())
        .unwrap()
        .with_all(overrides)
        .unwrap();
    c.seed = seed;
    c.budget = budget;
    c.metrics_every = (budget / 40).max(1);
    let run = train(&c, None).unwrap();
    let label = format!(
        "{} timeout={} seed{seed}",
        variant.name(),
        c.runtime.timeout
    );
    (label, c.runtime.timeout, !variant.options(), run.metrics)
}

/// h2o2 and flat for `budget` frames on three seeds, plus the timeout-32
/// arm for the first quarter. The default timeout-7 runs supply the
/// first-quarter comparison. Returns every stream for the telemetry checks.
pub fn end_to_end(budget: u64) -> (Verdict, Vec<Stream>) {
    let seeds = [0u64, 1, 2];
    let quarter = budget / 4;
    let tail = budget - budget / 10;
    let h2o2: Vec<Stream> = seeds
        .iter()
        .map(|&s| end_to_end_run(Variant::H2o2, &[], s, budget))
        .collect();
    let flat: Vec<Stream> = seeds
        .iter()
        .map(|&s| end_to_end_run(Variant::Flat, &[], s, budget))
        .collect();
    let long: Vec<Stream> = seeds
        .iter()
        .map(|&s| end_to_end_run(Variant::H2o2, &[("runtime.timeout", "32")], s, quarter))
        .collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let success =
        |runs: &[Stream]| -> Vec<f64> { runs.iter().map(|r| final_success(&r.3, tail)).collect() };
    let failed = |runs: &[Stream]| -> Vec<f64> {
        runs.iter()
            .map(|r| reason_share(&r.3, TerminationReason::FailedInitiation, quarter))
            .collect()
    };
    let (h, f) = (success(&h2o2), success(&flat));
    let (short_fail, long_fail) = (failed(&h2o2), failed(&long));
    let pass = mean(&h) >= 0.9 && mean(&f) >= 0.9 && mean(&long_fail) > mean(&short_fail);
    let fmt = |xs: &[f64]| {
        xs.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    let verdict = Verdict {
        id: 7,
        name: "end-to-end",
        pass,
        detail: format!(
            "success over the last 10% of {budget} frames: h2o2 {:.3} ({}), flat {:.3} ({}), needs >= 0.9; \
             FailedInitiation in the first {quarter} frames: timeout 32 {:.4} ({}) vs timeout 7 {:.4} ({})",
            mean(&h),
            fmt(&h),
            mean(&f),
            fmt(&f),
            mean(&long_fail),
            fmt(&long_fail),
            mean(&short_fail),
            fmt(&short_fail)
        ),
    };
    let mut streams = h2o2;
    streams.extend(flat);
    streams.extend(long);
    (verdict, streams)
}
