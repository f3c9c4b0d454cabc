//! Finite-difference checks for every network of both controllers.
//!
//! Each network is checked on its own smooth loss at small widths, with all
//! weights randomized away from their (partly zero) initialization. Only the
//! checked network's parameters are perturbed.

use h2o2_autodiff::gradcheck::DEFAULT_STEP;
use h2o2_autodiff::nn::randomize;
use h2o2_autodiff::{finite_diff_check_params, ParamId, ParameterSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{stack_slots, EncoderConfig};
use crate::error::Result;
use crate::goal_space::{goal_model_loss, kl_on_tape, sample_on_tape, NUM_BINS};
use crate::gridworld::{EnvConfig, GridState, NUM_ACTIONS};
use crate::hindsight::GoalSamplerConfig;
use crate::hlc::{HlcConfig, HlcNetworks};
use crate::llc::{LlcConfig, LlcNetworks};
use crate::smdp::TerminationReason;

pub const LLC_NETWORKS: [&str; 8] = [
    "llc.encoder",
    "llc.goal_encoder",
    "llc.goal_model",
    "llc.policy",
    "llc.behavior",
    "llc.value",
    "llc.ext_value",
    "llc.distance",
];

pub const HLC_NETWORKS: [&str; 5] = [
    "hlc.encoder",
    "hlc.gate",
    "hlc.goal",
    "hlc.primitive",
    "hlc.value",
];

#[derive(Clone, Debug, Serialize)]
pub struct NetworkCheck {
    pub network: String,
    pub seed: u64,
    pub parameters: usize,
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
}

const ROWS: usize = 6;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        embedding: 4,
        history: 2,
        hidden: 5,
        state: 3,
    }
}

fn ids_with_prefix(params: &ParameterSet, prefix: &str) -> Vec<ParamId> {
    let dotted = format!("{prefix}.");
    params
        .ids()
        .filter(|&id| params.name(id).starts_with(&dotted))
        .collect()
}

struct Inputs {
    features: Tensor,
    actions: Vec<usize>,
    reasons: Vec<usize>,
    noise: Tensor,
    labels: Vec<usize>,
    distance: Vec<usize>,
    targets: Tensor,
    weights: Tensor,
    goal_bins: Vec<usize>,
}

fn inputs(
    env: EnvConfig,
    rng: &mut ChaCha8Rng,
    d: usize,
    state: usize,
    classes: usize,
) -> Result<Inputs> {
    let mut g = GridState::generate(rng.random(), env)?;
    let mut feats = Vec::new();
    let mut actions = Vec::new();
    for _ in 0..ROWS {
        feats.extend(g.observe().features());
        let a = rng.random_range(0..NUM_ACTIONS as u8);
        actions.push(a as usize);
        if !g.is_done() {
            g.step_id(a)?;
        }
    }
    let mut uniform =
        |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let noise = Tensor::matrix(ROWS, d, uniform(ROWS * d))?;
    let targets = Tensor::vector(uniform(ROWS));
    let weights = Tensor::matrix(ROWS, state, uniform(ROWS * state))?;
    Ok(Inputs {
        features: Tensor::matrix(ROWS, env.feature_dim(), feats)?,
        reasons: (0..ROWS)
            .map(|_| rng.random_range(0..TerminationReason::ALL.len()))
            .collect(),
        labels: (0..ROWS)
            .map(|_| rng.random_range(0..NUM_ACTIONS))
            .collect(),
        distance: (0..ROWS).map(|_| rng.random_range(0..classes)).collect(),
        goal_bins: (0..ROWS * d)
            .map(|_| rng.random_range(0..NUM_BINS))
            .collect(),
        actions,
        noise,
        targets,
        weights,
    })
}

fn cross_entropy(t: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = t.log_softmax(logits);
    let picked = t.gather(lp, labels)?;
    let m = t.mean(picked);
    Ok(t.neg(m))
}

fn squared_error(t: &mut Tape<'_>, out: Var, targets: &Tensor) -> Result<Var> {
    let out = t.reshape(out, &[ROWS])?;
    let tv = t.constant(targets.clone());
    let e = t.sub(out, tv)?;
    let e2 = t.square(e);
    Ok(t.mean(e2))
}

fn llc_loss_for(t: &mut Tape<'_>, nets: &LlcNetworks, x: &Inputs, network: &str) -> Result<Var> {
    let k = nets.encoder.k;
    let c = nets.encoder.embed(t, x.features.clone())?;
    let slots: Vec<_> = (0..ROWS)
        .map(|i| stack_slots(i, k, 0, |j| j, |j| (j >= 1).then(|| x.actions[j - 1])))
        .collect();
    let b = nets.encoder.states(t, c, &slots)?;
    let (mean, log_std) = nets.goal_encoder.forward(t, c)?;
    let g = sample_on_tape(t, mean, log_std, x.noise.clone())?;
    let h = t.concat(&[b, g])?;
    match network {
        "llc.encoder" => {
            let w = t.constant(x.weights.clone());
            let bw = t.mul(b, w)?;
            Ok(t.sum(bw))
        }
        "llc.goal_encoder" => {
            let kl = kl_on_tape(t, mean, log_std)?;
            let kl = t.mean(kl);
            let gs = t.square(g);
            let gs = t.sum(gs);
            Ok(t.add(kl, gs)?)
        }
        "llc.goal_model" => {
            let logits = nets.goal_model.forward(t, c)?;
            goal_model_loss(t, logits, g)
        }
        "llc.policy" => {
            let logits = nets.policy.forward(t, h)?;
            cross_entropy(t, logits, &x.labels)
        }
        "llc.behavior" => {
            let logits = nets.behavior.forward(t, h)?;
            cross_entropy(t, logits, &x.labels)
        }
        "llc.distance" => {
            let logits = nets.distance.forward(t, h)?;
            cross_entropy(t, logits, &x.distance)
        }
        "llc.value" => {
            let v = nets.value.forward(t, h)?;
            squared_error(t, v, &x.targets)
        }
        "llc.ext_value" => {
            let v = nets.ext_value.forward(t, h)?;
            squared_error(t, v, &x.targets)
        }
        other => unreachable!("unknown llc network {other}"),
    }
}

fn hlc_loss_for(t: &mut Tape<'_>, nets: &HlcNetworks, x: &Inputs, network: &str) -> Result<Var> {
    let k = nets.encoder.k;
    let c = nets.encoder.embed(t, x.features.clone())?;
    let slots: Vec<_> = (0..ROWS)
        .map(|i| stack_slots(i, k, 0, |j| j, |j| Some(x.reasons[j])))
        .collect();
    let b = nets.encoder.states(t, c, &slots)?;
    match network {
        "hlc.encoder" => {
            let w = t.constant(x.weights.clone());
            let bw = t.mul(b, w)?;
            Ok(t.sum(bw))
        }
        "hlc.gate" => {
            let logits = nets.gate.forward(t, b)?;
            let labels: Vec<usize> = x.labels.iter().map(|l| l % 2).collect();
            cross_entropy(t, logits, &labels)
        }
        "hlc.goal" => {
            let logits = nets.goal.forward(t, b)?;
            let logits = t.reshape(logits, &[ROWS * nets.goal_dim, NUM_BINS])?;
            cross_entropy(t, logits, &x.goal_bins)
        }
        "hlc.primitive" => {
            let logits = nets.primitive.forward(t, b)?;
            cross_entropy(t, logits, &x.labels)
        }
        "hlc.value" => {
            let v = nets.value.forward(t, b)?;
            squared_error(t, v, &x.targets)
        }
        other => unreachable!("unknown hlc network {other}"),
    }
}

/// Checks every network once for `seed`.
pub fn check_networks(seed: u64) -> Result<Vec<NetworkCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = EnvConfig {
        view_radius: 1,
        ..EnvConfig::default()
    };
    let d = 2;
    let llc_cfg = LlcConfig {
        goal_dim: d,
        head_hidden: 4,
        encoder: tiny_encoder(),
        goals: GoalSamplerConfig {
            max_len: 4,
            ..GoalSamplerConfig::default()
        },
        ..LlcConfig::default()
    };
    let hlc_cfg = HlcConfig {
        goal_dim: d,
        encoder: tiny_encoder(),
        ..HlcConfig::default()
    };
    let mut llc = LlcNetworks::new(env.feature_dim(), &llc_cfg, &mut rng)?;
    randomize(&mut llc.params, 0.5, &mut rng);
    let mut hlc = HlcNetworks::new(env.feature_dim(), &hlc_cfg, &mut rng)?;
    randomize(&mut hlc.params, 0.5, &mut rng);
    let x = inputs(
        env,
        &mut rng,
        d,
        tiny_encoder().state,
        llc_cfg.distance_classes(),
    )?;

    let mut out = Vec::new();
    for net in LLC_NETWORKS {
        let ids = ids_with_prefix(&llc.params, net);
        let r = finite_diff_check_params(&llc.params, &ids, DEFAULT_STEP, |t| {
            llc_loss_for(t, &llc, &x, net).map_err(into_autodiff)
        })?;
        out.push(NetworkCheck {
            network: net.to_string(),
            seed,
            parameters: ids.len(),
            max_relative_error: r.max_relative_error,
            worst: r.worst,
        });
    }
    for net in HLC_NETWORKS {
        let ids = ids_with_prefix(&hlc.params, net);
        let r = finite_diff_check_params(&hlc.params, &ids, DEFAULT_STEP, |t| {
            hlc_loss_for(t, &hlc, &x, net).map_err(into_autodiff)
        })?;
        out.push(NetworkCheck {
            network: net.to_string(),
            seed,
            parameters: ids.len(),
            max_relative_error: r.max_relative_error,
            worst: r.worst,
        });
    }
    Ok(out)
}

fn into_autodiff(e: crate::error::Error) -> h2o2_autodiff::Error {
    match e {
        crate::error::Error::Autodiff(inner) => inner,
        other => panic!("gradient check loss failed: {other}"),
    }
}
