#![allow(dead_code)]

pub mod criteria;
pub mod scripted;
pub mod tabular;

use h2o2::gridworld::EnvConfig;
use h2o2::llc::{llc_loss, LlcBatch, LlcConfig, LlcDiagnostics, LlcLearner, LlcMode};
use h2o2::replay::{random_trajectory, ReplayBuffer, Trajectory};
use h2o2_autodiff::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `count` uniform-random episodes on fresh layouts.
pub fn random_replay(env: EnvConfig, count: usize, seed: u64) -> ReplayBuffer<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ReplayBuffer::new(count);
    for _ in 0..count {
        let layout = rng.random();
        let t = random_trajectory(env, layout, env.step_limit as usize, &mut rng).unwrap();
        buf.insert(t).unwrap();
    }
    buf
}

pub fn train_offline(
    config: &LlcConfig,
    mode: LlcMode,
    data: &ReplayBuffer<Trajectory>,
    steps: usize,
    seed: u64,
) -> LlcLearner {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_dim = EnvConfig::default().feature_dim();
    let mut learner = LlcLearner::new(obs_dim, config.clone(), mode, &mut rng).unwrap();
    for _ in 0..steps {
        learner.train_step(data, &mut rng).unwrap();
    }
    learner
}

/// Loss components on `batches` fresh batches, averaged, without updating.
pub fn evaluate(
    learner: &LlcLearner,
    data: &ReplayBuffer<Trajectory>,
    batches: usize,
    seed: u64,
) -> LlcDiagnostics {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = LlcDiagnostics::default();
    for _ in 0..batches {
        let batch = LlcBatch::sample(data, &learner.config, &mut rng).unwrap();
        let mut tape = Tape::with_params(&learner.nets.params);
        let (_, d) = llc_loss(
            &mut tape,
            &learner.nets,
            &learner.config,
            learner.mode,
            &batch,
        )
        .unwrap();
        sum.kl_to_behavior += d.kl_to_behavior / batches as f64;
        sum.encoder_kl += d.encoder_kl / batches as f64;
        sum.total += d.total / batches as f64;
    }
    sum
}
