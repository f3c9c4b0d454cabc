//! High-level controller: an actor-critic over the SMDP.
//!
//! The policy factors into a gate (primitive or option), a goal head with one
//! 21-way categorical per latent dimension that emits bin centers, and a
//! primitive head. Training uses V-Trace with the discount applied once per
//! high-level decision, whatever the number of environment steps it took.

use std::collections::VecDeque;
use std::sync::Arc;

use h2o2_autodiff::{Activation, AdamConfig, Mlp, OutputInit, ParameterSet, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{stack_slots, EncoderConfig, FrameStackEncoder, StackTracker};
use crate::error::{Error, Result};
use crate::goal_space::{bin_center, center_bin, LatentGoal, NUM_BINS};
use crate::gridworld::{Observation, NUM_ACTIONS};
use crate::llc::{choose_action, softmax_row};
use crate::replay::ReplayItem;
use crate::smdp::{SmdpAction, TerminationReason};
use crate::vtrace::compute_vtrace;

const NUM_REASONS: usize = TerminationReason::ALL.len();
const GATE_PRIMITIVE: usize = 0;
const GATE_OPTION: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HlcConfig {
    pub gamma: f64,
    pub replay_proportion: f64,
    pub entropy_gate: f64,
    pub entropy_goal: f64,
    pub entropy_primitive: f64,
    pub value_weight: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Unrolls per learner step.
    pub batch_size: usize,
    /// Decisions per unroll.
    pub unroll: usize,
    pub goal_dim: usize,
    pub encoder: EncoderConfig,
}

impl Default for HlcConfig {
    fn default() -> Self {
        Self {
            gamma: 0.997,
            replay_proportion: 0.5,
            entropy_gate: 1e-2,
            entropy_goal: 1e-3,
            entropy_primitive: 1e-2,
            value_weight: 0.5,
            rho_bar: 1.0,
            c_bar: 1.0,
            learning_rate: 3e-4,
            max_grad_norm: 1e4,
            batch_size: 8,
            unroll: 16,
            goal_dim: 8,
            encoder: EncoderConfig::default(),
        }
    }
}

impl HlcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "hlc gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.replay_proportion) {
            return Err(Error::Config("hlc replay_proportion outside [0, 1]".into()));
        }
        for (name, v) in [
            ("entropy_gate", self.entropy_gate),
            ("entropy_goal", self.entropy_goal),
            ("entropy_primitive", self.entropy_primitive),
            ("value_weight", self.value_weight),
            ("rho_bar", self.rho_bar),
            ("c_bar", self.c_bar),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("hlc {name} must be finite and >= 0")));
            }
        }
        if self.batch_size == 0
            || self.unroll == 0
            || self.goal_dim == 0
            || self.encoder.history == 0
        {
            return Err(Error::Config("hlc sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            max_grad_norm: Some(self.max_grad_norm),
            ..AdamConfig::default()
        }
    }
}

/// Decision-point input: the observation the runtime returned and why the
/// previous SMDP action ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HlcFrame {
    pub observation: Observation,
    pub reason: TerminationReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HlcStep {
    pub frame: HlcFrame,
    pub action: SmdpAction,
    /// Log-probability of `action` under the acting policy, recorded when
    /// the action was chosen.
    pub behavior_log_prob: Option<f64>,
    pub reward: f64,
    pub env_steps: usize,
    pub done: bool,
}

/// A run of consecutive decisions from one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HlcUnroll {
    /// Up to `k - 1` earlier frames of the same episode, oldest first.
    pub context: Vec<HlcFrame>,
    pub steps: Vec<HlcStep>,
    /// Frame after the last step; `None` when the episode ended.
    pub bootstrap: Option<HlcFrame>,
}

impl ReplayItem for HlcUnroll {
    fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let last = self.steps.len() - 1;
        if let Some(i) = self.steps[..last].iter().position(|s| s.done) {
            return Err(Error::EarlyDone(i));
        }
        if self.steps[last].done == self.bootstrap.is_some() {
            return Err(Error::Config(
                "bootstrap frame must be present exactly when the unroll does not end the episode"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Cuts an episode's decisions into unrolls of fixed length.
#[derive(Clone, Debug)]
pub struct UnrollBuilder {
    k: usize,
    unroll: usize,
    history: VecDeque<HlcFrame>,
    pending: Vec<HlcStep>,
}

impl UnrollBuilder {
    pub fn new(history: usize, unroll: usize) -> Self {
        Self {
            k: history,
            unroll,
            history: VecDeque::new(),
            pending: Vec::new(),
        }
    }

    /// Forgets any partial unroll.
    pub fn reset(&mut self) {
        self.history.clear();
        self.pending.clear();
    }

    /// Adds a decision. `next` is the following decision frame, `None` when
    /// the step ended the episode.
    pub fn push(&mut self, step: HlcStep, next: Option<HlcFrame>) -> Option<HlcUnroll> {
        let done = step.done;
        self.pending.push(step);
        if !done && self.pending.len() < self.unroll {
            return None;
        }
        let steps = std::mem::take(&mut self.pending);
        let context: Vec<HlcFrame> = self.history.iter().cloned().collect();
        for s in &steps {
            self.history.push_back(s.frame.clone());
            while self.history.len() > self.k.saturating_sub(1) {
                self.history.pop_front();
            }
        }
        if done {
            self.history.clear();
        }
        Some(HlcUnroll {
            context,
            steps,
            bootstrap: if done { None } else { next },
        })
    }
}

#[derive(Clone, Debug)]
pub struct HlcNetworks {
    pub params: ParameterSet,
    pub encoder: FrameStackEncoder,
    pub gate: Mlp,
    pub goal: Mlp,
    pub primitive: Mlp,
    pub value: Mlp,
    pub goal_dim: usize,
}

/// Head outputs for one decision.
#[derive(Clone, Debug, PartialEq)]
pub struct HlcHeads {
    /// `[primitive, option]`.
    pub gate: Vec<f64>,
    /// `goal_dim * NUM_BINS`, dimension-major.
    pub goal: Vec<f64>,
    pub primitive: Vec<f64>,
    pub value: f64,
}

impl HlcNetworks {
    pub fn new(obs_dim: usize, config: &HlcConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut p = ParameterSet::new();
        let encoder = FrameStackEncoder::new(
            &mut p,
            "hlc.encoder",
            obs_dim,
            NUM_REASONS,
            &config.encoder,
            rng,
        )?;
        let s = config.encoder.state;
        let mut head = |name: &str, out: usize, p: &mut ParameterSet| {
            Mlp::new(
                p,
                &format!("hlc.{name}"),
                &[s, out],
                Activation::Identity,
                OutputInit::Zero,
                rng,
            )
        };
        let gate = head("gate", 2, &mut p)?;
        let goal = head("goal", config.goal_dim * NUM_BINS, &mut p)?;
        let primitive = head("primitive", NUM_ACTIONS, &mut p)?;
        let value = head("value", 1, &mut p)?;
        Ok(Self {
            params: p,
            encoder,
            gate,
            goal,
            primitive,
            value,
            goal_dim: config.goal_dim,
        })
    }

    pub fn heads_row(&self, b: &[f64]) -> HlcHeads {
        HlcHeads {
            gate: self.gate.eval_row(&self.params, b),
            goal: self.goal.eval_row(&self.params, b),
            primitive: self.primitive.eval_row(&self.params, b),
            value: self.value.eval_row(&self.params, b)[0],
        }
    }
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Probability the gate picks an option.
pub fn gate_probability(heads: &HlcHeads) -> f64 {
    softmax_row(&heads.gate)[GATE_OPTION]
}

/// Samples an SMDP action and returns it with its log-probability. With
/// `options` off the gate is bypassed and only primitives are produced.
pub fn hlc_sample(heads: &HlcHeads, options: bool, rng: &mut impl Rng) -> (SmdpAction, f64) {
    let gate_lp = log_softmax_row(&heads.gate);
    let take_option = options && rng.random::<f64>() < gate_lp[GATE_OPTION].exp();
    if take_option {
        let mut lp = gate_lp[GATE_OPTION];
        let g = heads
            .goal
            .chunks(NUM_BINS)
            .map(|logits| {
                let i = choose_action(logits, false, rng) as usize;
                lp += log_softmax_row(logits)[i];
                bin_center(i)
            })
            .collect();
        (SmdpAction::Option(LatentGoal(g)), lp)
    } else {
        let a = choose_action(&heads.primitive, false, rng);
        let mut lp = log_softmax_row(&heads.primitive)[a as usize];
        if options {
            lp += gate_lp[GATE_PRIMITIVE];
        }
        (SmdpAction::Primitive(a), lp)
    }
}

/// Log-probability of `action`; goal components must be bin centers.
pub fn hlc_log_prob(heads: &HlcHeads, options: bool, action: &SmdpAction) -> Result<f64> {
    let gate_lp = log_softmax_row(&heads.gate);
    match action {
        SmdpAction::Primitive(a) => {
            let lp = *log_softmax_row(&heads.primitive)
                .get(*a as usize)
                .ok_or(Error::InvalidAction(*a))?;
            Ok(if options {
                lp + gate_lp[GATE_PRIMITIVE]
            } else {
                lp
            })
        }
        SmdpAction::Option(g) => {
            if !options {
                return Err(Error::Config(
                    "option chosen while options are disabled".into(),
                ));
            }
            if g.dim() * NUM_BINS != heads.goal.len() {
                return Err(Error::Length {
                    what: "goal",
                    expected: heads.goal.len() / NUM_BINS,
                    got: g.dim(),
                });
            }
            let mut lp = gate_lp[GATE_OPTION];
            for (dim, (&v, logits)) in g.0.iter().zip(heads.goal.chunks(NUM_BINS)).enumerate() {
                let i = center_bin(v).ok_or(Error::OffGrid { dim, value: v })?;
                lp += log_softmax_row(logits)[i];
            }
            Ok(lp)
        }
    }
}

/// Acting-side state for one episode.
pub struct HlcActor<'a> {
    nets: &'a HlcNetworks,
    tracker: StackTracker,
    pub options: bool,
}

impl<'a> HlcActor<'a> {
    pub fn new(nets: &'a HlcNetworks, options: bool) -> Self {
        Self {
            nets,
            tracker: StackTracker::new(nets.encoder.k),
            options,
        }
    }

    pub fn reset(&mut self) {
        self.tracker.clear();
    }

    /// Pushes the decision frame and evaluates every head.
    pub fn observe(&mut self, frame: &HlcFrame) -> HlcHeads {
        let c = self
            .nets
            .encoder
            .embed_row(&self.nets.params, &frame.observation.features());
        self.tracker.push(c, Some(frame.reason.index()));
        let b = self
            .nets
            .encoder
            .state_row(&self.nets.params, &self.tracker);
        self.nets.heads_row(&b)
    }

    pub fn decide(
        &mut self,
        frame: &HlcFrame,
        rng: &mut ChaCha8Rng,
    ) -> (SmdpAction, f64, HlcHeads) {
        let heads = self.observe(frame);
        let (a, lp) = hlc_sample(&heads, self.options, rng);
        (a, lp, heads)
    }
}

/// Per-decision discounts: `gamma` each, 0 where the episode ended.
pub fn smdp_discounts(steps: &[HlcStep], gamma: f64) -> Vec<f64> {
    steps
        .iter()
        .map(|s| if s.done { 0.0 } else { gamma })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HlcDiagnostics {
    pub step: u64,
    pub total: f64,
    pub policy_gradient: f64,
    pub value: f64,
    pub gate_entropy: f64,
    pub goal_entropy: f64,
    pub primitive_entropy: f64,
    /// Mean probability of choosing an option.
    pub gate_probability: f64,
    pub mean_abs_advantage: f64,
    /// Mean `min(1, pi/mu)` over primitive and over option decisions.
    pub primitive_rho: f64,
    pub option_rho: f64,
    pub decisions: usize,
}

/// Mean entropy of `[rows, classes]` log-probabilities, as a `[rows]` var.
fn row_entropy(tape: &mut Tape<'_>, logp: h2o2_autodiff::Var) -> Result<h2o2_autodiff::Var> {
    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp)?;
    let s = tape.sum_rows(plogp);
    Ok(tape.neg(s))
}

pub fn hlc_loss(
    tape: &mut Tape<'_>,
    nets: &HlcNetworks,
    config: &HlcConfig,
    options: bool,
    batch: &[Arc<HlcUnroll>],
) -> Result<(h2o2_autodiff::Var, HlcDiagnostics)> {
    let k = nets.encoder.k;
    let d = nets.goal_dim;
    let obs_dim = nets.encoder.frame.input_size();

    let mut feats = Vec::new();
    let mut frames = 0usize;
    let mut slots = Vec::new();
    let mut boot_slots = Vec::new();
    let mut gate_idx = Vec::new();
    let mut prim_idx = Vec::new();
    let mut goal_idx = Vec::new();
    let mut prim_mask = Vec::new();
    let mut opt_mask = Vec::new();
    let mut behavior = Vec::new();
    for u in batch {
        u.validate()?;
        let all: Vec<&HlcFrame> = u
            .context
            .iter()
            .chain(u.steps.iter().map(|s| &s.frame))
            .chain(u.bootstrap.iter())
            .collect();
        let base = frames;
        for f in &all {
            let x = f.observation.features();
            if x.len() != obs_dim {
                return Err(Error::Length {
                    what: "observation features",
                    expected: obs_dim,
                    got: x.len(),
                });
            }
            feats.extend(x);
            frames += 1;
        }
        let side = |i: usize| Some(all[i].reason.index());
        let c = u.context.len();
        for (t, s) in u.steps.iter().enumerate() {
            slots.push(stack_slots(c + t, k, 0, |i| base + i, side));
            let lp = s
                .behavior_log_prob
                .ok_or(Error::MissingBehaviorLogProb(behavior.len()))?;
            behavior.push(lp);
            match &s.action {
                SmdpAction::Primitive(a) => {
                    if *a as usize >= NUM_ACTIONS {
                        return Err(Error::InvalidAction(*a));
                    }
                    gate_idx.push(GATE_PRIMITIVE);
                    prim_idx.push(*a as usize);
                    goal_idx.extend(std::iter::repeat_n(0, d));
                    prim_mask.push(1.0);
                    opt_mask.push(0.0);
                }
                SmdpAction::Option(g) => {
                    if !options {
                        return Err(Error::Config(
                            "option in a batch for a primitive-only learner".into(),
                        ));
                    }
                    if g.dim() != d {
                        return Err(Error::Length {
                            what: "goal",
                            expected: d,
                            got: g.dim(),
                        });
                    }
                    gate_idx.push(GATE_OPTION);
                    prim_idx.push(0);
                    for (dim, &v) in g.0.iter().enumerate() {
                        goal_idx.push(center_bin(v).ok_or(Error::OffGrid { dim, value: v })?);
                    }
                    prim_mask.push(0.0);
                    opt_mask.push(1.0);
                }
            }
        }
        if u.bootstrap.is_some() {
            boot_slots.push(stack_slots(all.len() - 1, k, 0, |i| base + i, side));
        }
    }
    let n = slots.len();
    let inv = 1.0 / n as f64;

    let c = nets
        .encoder
        .embed(tape, Tensor::matrix(frames, obs_dim, feats)?)?;
    slots.extend(boot_slots);
    let b_all = nets.encoder.states(tape, c, &slots)?;
    let first: Vec<usize> = (0..n).collect();
    let b = tape.gather_rows(b_all, &first)?;

    let v_all = nets.value.forward(tape, b_all)?;
    let v_vals = tape.value(v_all).data().to_vec();
    let v = tape.gather_rows(v_all, &first)?;
    let v = tape.reshape(v, &[n])?;

    let gate_logits = nets.gate.forward(tape, b)?;
    let gate_lp = tape.log_softmax(gate_logits);
    let prim_logits = nets.primitive.forward(tape, b)?;
    let prim_lp = tape.log_softmax(prim_logits);
    let goal_logits = nets.goal.forward(tape, b)?;
    let goal_logits = tape.reshape(goal_logits, &[n * d, NUM_BINS])?;
    let goal_lp = tape.log_softmax(goal_logits);

    let prim_picked = tape.gather(prim_lp, &prim_idx)?;
    let prim_mask_vals = prim_mask.clone();
    let opt_mask_vals = opt_mask.clone();
    let pm = tape.constant(Tensor::vector(prim_mask));
    let mut logp = tape.mul(prim_picked, pm)?;
    if options {
        let gate_picked = tape.gather(gate_lp, &gate_idx)?;
        let goal_picked = tape.gather(goal_lp, &goal_idx)?;
        let goal_picked = tape.reshape(goal_picked, &[n, d])?;
        let goal_sum = tape.sum_rows(goal_picked);
        let om = tape.constant(Tensor::vector(opt_mask));
        let goal_term = tape.mul(goal_sum, om)?;
        logp = tape.add(logp, goal_term)?;
        logp = tape.add(logp, gate_picked)?;
    }
    let logp_vals = tape.value(logp).data().to_vec();

    let mut advantages = vec![0.0; n];
    let mut targets = vec![0.0; n];
    let mut row = 0;
    let mut boot_row = n;
    for u in batch {
        let len = u.steps.len();
        let bootstrap = if u.bootstrap.is_some() {
            boot_row += 1;
            v_vals[boot_row - 1]
        } else {
            0.0
        };
        let rewards: Vec<f64> = u.steps.iter().map(|s| s.reward).collect();
        let log_rhos: Vec<f64> = (row..row + len)
            .map(|r| logp_vals[r] - behavior[r])
            .collect();
        let out = compute_vtrace(
            &v_vals[row..row + len],
            bootstrap,
            &rewards,
            &smdp_discounts(&u.steps, config.gamma),
            &log_rhos,
            config.rho_bar,
            config.c_bar,
        )?;
        advantages[row..row + len].copy_from_slice(&out.advantages);
        targets[row..row + len].copy_from_slice(&out.targets);
        row += len;
    }

    let adv = tape.constant(Tensor::vector(advantages.clone()));
    let weighted = tape.mul(logp, adv)?;
    let pg_sum = tape.sum(weighted);
    let pg = tape.scale(pg_sum, -inv);

    let vt = tape.constant(Tensor::vector(targets));
    let verr = tape.sub(v, vt)?;
    let vsq = tape.square(verr);
    let value_loss = tape.mean(vsq);

    let prim_h = row_entropy(tape, prim_lp)?;
    let prim_h = tape.mean(prim_h);
    let mut terms = vec![
        ("policy_gradient", pg, 1.0),
        ("value", value_loss, config.value_weight),
        ("primitive_entropy", prim_h, -config.entropy_primitive),
    ];
    let mut gate_prob = 0.0;
    if options {
        let gate_h = row_entropy(tape, gate_lp)?;
        let gate_h = tape.mean(gate_h);
        let goal_h = row_entropy(tape, goal_lp)?;
        let goal_h = tape.sum(goal_h);
        let goal_h = tape.scale(goal_h, inv);
        terms.push(("gate_entropy", gate_h, -config.entropy_gate));
        terms.push(("goal_entropy", goal_h, -config.entropy_goal));
        let glp = tape.value(gate_lp).data();
        gate_prob = (0..n).map(|r| glp[2 * r + GATE_OPTION].exp()).sum::<f64>() * inv;
    }

    let clipped_mean = |mask: &[f64]| {
        let count: f64 = mask.iter().sum();
        let total: f64 = (0..n)
            .map(|r| mask[r] * (logp_vals[r] - behavior[r]).exp().min(1.0))
            .sum();
        if count > 0.0 {
            total / count
        } else {
            1.0
        }
    };
    let mut diag = HlcDiagnostics {
        gate_probability: gate_prob,
        primitive_rho: clipped_mean(&prim_mask_vals),
        option_rho: clipped_mean(&opt_mask_vals),
        mean_abs_advantage: advantages.iter().map(|a| a.abs()).sum::<f64>() * inv,
        decisions: n,
        ..Default::default()
    };
    let mut total = None;
    for &(name, var, w) in &terms {
        let val = tape.value(var).item().expect("scalar term");
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss(format!("hlc {name}")));
        }
        match name {
            "policy_gradient" => diag.policy_gradient = val,
            "value" => diag.value = val,
            "primitive_entropy" => diag.primitive_entropy = val,
            "gate_entropy" => diag.gate_entropy = val,
            _ => diag.goal_entropy = val,
        }
        let scaled = tape.scale(var, w);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = total.expect("at least one term");
    diag.total = tape.value(total).item().expect("scalar total");
    Ok((total, diag))
}

#[derive(Clone, Debug)]
pub struct HlcLearner {
    pub nets: HlcNetworks,
    pub config: HlcConfig,
    /// Whether the gate and goal head are in use.
    pub options: bool,
    steps: u64,
}

impl HlcLearner {
    pub fn new(
        obs_dim: usize,
        config: HlcConfig,
        options: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            nets: HlcNetworks::new(obs_dim, &config, rng)?,
            config,
            options,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn actor(&self) -> HlcActor<'_> {
        HlcActor::new(&self.nets, self.options)
    }

    pub fn train_on(&mut self, batch: &[Arc<HlcUnroll>]) -> Result<HlcDiagnostics> {
        if batch.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let (grads, mut diag) = {
            let mut tape = Tape::with_params(&self.nets.params);
            let (loss, diag) = hlc_loss(&mut tape, &self.nets, &self.config, self.options, batch)?;
            (tape.backward(loss)?.into_params(), diag)
        };
        self.nets.params.adam_step(&grads, &self.config.adam())?;
        self.steps += 1;
        diag.step = self.steps;
        Ok(diag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{EnvConfig, GridState};
    use rand::SeedableRng;

    fn heads(gate: [f64; 2], d: usize) -> HlcHeads {
        HlcHeads {
            gate: gate.to_vec(),
            goal: vec![0.0; d * NUM_BINS],
            primitive: vec![0.0; NUM_ACTIONS],
            value: 0.0,
        }
    }

    fn obs() -> Observation {
        GridState::generate(0, EnvConfig::default())
            .unwrap()
            .observe()
    }

    fn frame(reason: TerminationReason) -> HlcFrame {
        HlcFrame {
            observation: obs(),
            reason,
        }
    }

    fn small_config() -> HlcConfig {
        HlcConfig {
            goal_dim: 2,
            batch_size: 4,
            unroll: 4,
            learning_rate: 1e-2,
            encoder: EncoderConfig {
                embedding: 6,
                history: 2,
                hidden: 8,
                state: 5,
            },
            ..HlcConfig::default()
        }
    }

    #[test]
    fn closed_gate_gives_primitives() {
        let h = heads([0.0, f64::NEG_INFINITY], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert!(!hlc_sample(&h, true, &mut rng).0.is_option());
        }
    }

    #[test]
    fn peaked_goal_head_emits_the_zero_goal() {
        let mut h = heads([f64::NEG_INFINITY, 0.0], 3);
        for dim in 0..3 {
            h.goal[dim * NUM_BINS + 10] = 1e3;
        }
        let (a, lp) = hlc_sample(&h, true, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, SmdpAction::Option(LatentGoal(vec![0.0; 3])));
        assert!(lp.abs() < 1e-9);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut h = heads([0.3, -0.2], 2);
        h.goal
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64).sin());
        let a = hlc_sample(&h, true, &mut ChaCha8Rng::seed_from_u64(7));
        let b = hlc_sample(&h, true, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn log_prob_arithmetic() {
        let h = heads([0.0, 0.0], 2);
        let lp = hlc_log_prob(&h, true, &SmdpAction::Primitive(3)).unwrap();
        assert!((lp - (0.5f64.ln() + 0.2f64.ln())).abs() < 1e-12);
        let total: f64 = (0..NUM_ACTIONS as u8)
            .map(|a| {
                hlc_log_prob(&h, true, &SmdpAction::Primitive(a))
                    .unwrap()
                    .exp()
            })
            .sum();
        assert!((total - 0.5).abs() < 1e-12);
        let off = SmdpAction::Option(LatentGoal(vec![0.0, 0.5]));
        assert!(matches!(
            hlc_log_prob(&h, true, &off),
            Err(Error::OffGrid { dim: 1, .. })
        ));
    }

    #[test]
    fn log_prob_matches_sampling() {
        let mut h = heads([0.4, -0.1], 2);
        h.goal
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.7).cos());
        h.primitive = vec![0.5, -1.0, 0.0, 2.0, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let (a, lp) = hlc_sample(&h, true, &mut rng);
            let again = hlc_log_prob(&h, true, &a).unwrap();
            assert!(lp.is_finite());
            assert!((lp - again).abs() < 1e-9);
        }
    }

    #[test]
    fn factored_distribution_is_normalized() {
        let mut h = heads([0.9, -0.4], 1);
        h.goal
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 1.3).sin() * 2.0);
        h.primitive = vec![0.2, 0.0, -0.7, 1.1, 0.4];
        let mut total = 0.0;
        for a in 0..NUM_ACTIONS as u8 {
            total += hlc_log_prob(&h, true, &SmdpAction::Primitive(a))
                .unwrap()
                .exp();
        }
        for i in 0..NUM_BINS {
            let g = SmdpAction::Option(LatentGoal(vec![bin_center(i)]));
            total += hlc_log_prob(&h, true, &g).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-12);
        let flat: f64 = (0..NUM_ACTIONS as u8)
            .map(|a| {
                hlc_log_prob(&h, false, &SmdpAction::Primitive(a))
                    .unwrap()
                    .exp()
            })
            .sum();
        assert!((flat - 1.0).abs() < 1e-12);
    }

    fn step(action: SmdpAction, reward: f64, env_steps: usize, done: bool) -> HlcStep {
        HlcStep {
            frame: frame(TerminationReason::Timeout),
            action,
            behavior_log_prob: Some(0.0),
            reward,
            env_steps,
            done,
        }
    }

    #[test]
    fn discount_applies_per_decision() {
        // options of 3, 7 and 2 env steps; reward arrives at the end
        let g = 0.9;
        let goal = SmdpAction::Option(LatentGoal(vec![0.0]));
        let steps = vec![
            step(goal.clone(), 0.0, 3, false),
            step(goal.clone(), 0.0, 7, false),
            step(goal, 1.0, 2, true),
        ];
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
        let out = compute_vtrace(
            &[0.0; 3],
            0.0,
            &rewards,
            &smdp_discounts(&steps, g),
            &[0.0; 3],
            1.0,
            1.0,
        )
        .unwrap();
        assert!((out.targets[0] - g * g).abs() < 1e-12);
        assert!((out.targets[0] - g.powi(11)).abs() > 0.1);
    }

    #[test]
    fn unroll_builder_cuts_and_carries_context() {
        let mut b = UnrollBuilder::new(3, 2);
        let p = SmdpAction::Primitive(0);
        assert!(b
            .push(
                step(p.clone(), 0.0, 1, false),
                Some(frame(TerminationReason::PrimitiveDone))
            )
            .is_none());
        let u = b
            .push(
                step(p.clone(), 0.0, 1, false),
                Some(frame(TerminationReason::PrimitiveDone)),
            )
            .unwrap();
        assert_eq!((u.context.len(), u.steps.len()), (0, 2));
        assert!(u.bootstrap.is_some());
        u.validate().unwrap();
        let u = b.push(step(p.clone(), 1.0, 1, true), None).unwrap();
        assert_eq!((u.context.len(), u.steps.len()), (2, 1));
        assert!(u.bootstrap.is_none());
        u.validate().unwrap();
        // next episode starts clean
        b.push(
            step(p.clone(), 0.0, 1, false),
            Some(frame(TerminationReason::PrimitiveDone)),
        );
        let u = b
            .push(
                step(p, 0.0, 1, false),
                Some(frame(TerminationReason::PrimitiveDone)),
            )
            .unwrap();
        assert!(u.context.is_empty());
    }

    #[test]
    fn missing_behavior_log_prob_rejected() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nets = HlcNetworks::new(EnvConfig::default().feature_dim(), &cfg, &mut rng).unwrap();
        let mut s = step(SmdpAction::Primitive(1), 0.0, 1, true);
        s.behavior_log_prob = None;
        let u = Arc::new(HlcUnroll {
            context: vec![],
            steps: vec![s],
            bootstrap: None,
        });
        let mut tape = Tape::with_params(&nets.params);
        assert!(matches!(
            hlc_loss(&mut tape, &nets, &cfg, true, &[u]),
            Err(Error::MissingBehaviorLogProb(0))
        ));
    }

    /// One-decision episodes: any option pays 1, any primitive pays 0.
    fn bandit_run(cfg: HlcConfig, iterations: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut learner =
            HlcLearner::new(EnvConfig::default().feature_dim(), cfg, true, &mut rng).unwrap();
        let f = frame(TerminationReason::FirstTimestep);
        for _ in 0..iterations {
            let batch: Vec<Arc<HlcUnroll>> = (0..learner.config.batch_size)
                .map(|_| {
                    let mut actor = learner.actor();
                    let (a, lp, _) = actor.decide(&f, &mut rng);
                    let r = if a.is_option() { 1.0 } else { 0.0 };
                    let mut s = step(a, r, 1, true);
                    s.frame = f.clone();
                    s.behavior_log_prob = Some(lp);
                    Arc::new(HlcUnroll {
                        context: vec![],
                        steps: vec![s],
                        bootstrap: None,
                    })
                })
                .collect();
            learner.train_on(&batch).unwrap();
        }
        gate_probability(&learner.actor().observe(&f))
    }

    #[test]
    fn bandit_gate_learns_the_rewarding_arm() {
        let p = bandit_run(small_config(), 1000);
        assert!(p > 0.95, "{p}");
    }

    #[test]
    fn large_gate_entropy_keeps_the_gate_uniform() {
        let cfg = HlcConfig {
            entropy_gate: 100.0,
            ..small_config()
        };
        let p = bandit_run(cfg, 1000);
        assert!((p - 0.5).abs() < 0.05, "{p}");
    }
}
