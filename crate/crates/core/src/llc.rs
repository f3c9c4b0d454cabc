//! Goal-conditioned low-level controller.
//!
//! The LLC learns offline from replayed trajectories. Each batch cuts
//! fixed-length windows out of sampled trajectories, relabels hindsight
//! goals inside each window, and minimizes a regularized V-Trace
//! objective together with value regression, behavior cloning of the
//! data-generating policy, and three auxiliary predictions (the latent goal
//! of the current frame, the behavior policy's discounted environment
//! return, and the number of steps left to the goal).

use std::sync::Arc;

use h2o2_autodiff::Activation;
use h2o2_autodiff::{AdamConfig, Mlp, OutputInit, ParameterSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{stack_slots, EncoderConfig, FrameStackEncoder, Slot, StackTracker};
use crate::error::{Error, Result};
use crate::goal_space::{
    goal_model_loss, kl_on_tape, sample_on_tape, DiagGaussian, GoalEncoder, GoalModel, LatentGoal,
};
use crate::gridworld::{GridState, Observation, NUM_ACTIONS};
use crate::hindsight::{relabel_indices, sample_goal_pairs, GoalSamplerConfig};
use crate::replay::{ReplayBuffer, Trajectory};
use crate::smdp::Controller;
use crate::vtrace::compute_vtrace;

/// What the LLC learns and how it is conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlcMode {
    /// Hindsight goals, regularized V-Trace and all auxiliary tasks.
    GoalConditioned,
    /// Unconditional behavior cloning only; acts with the behavior head.
    AutopilotBc,
    /// Unconditional V-Trace on environment rewards; goal inputs are zero.
    AutopilotVtrace,
}

impl LlcMode {
    pub fn uses_goals(self) -> bool {
        self == LlcMode::GoalConditioned
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlcConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub entropy_weight: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    pub value_weight: f64,
    pub bc_weight: f64,
    pub goal_model_weight: f64,
    pub ext_value_weight: f64,
    pub distance_weight: f64,
    pub ext_discount: f64,
    pub beta: f64,
    pub goal_dim: usize,
    /// Windows per batch.
    pub batch_size: usize,
    pub unroll: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub head_hidden: usize,
    pub encoder: EncoderConfig,
    pub goals: GoalSamplerConfig,
}

impl Default for LlcConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            alpha: 1e-2,
            entropy_weight: 1e-3,
            rho_bar: 1.0,
            c_bar: 1.0,
            value_weight: 0.5,
            bc_weight: 1.0,
            goal_model_weight: 1.0,
            ext_value_weight: 0.5,
            distance_weight: 1.0,
            ext_discount: 0.99,
            beta: 1e-2,
            goal_dim: 8,
            batch_size: 8,
            unroll: 32,
            learning_rate: 3e-4,
            max_grad_norm: 10_000.0,
            head_hidden: 64,
            encoder: EncoderConfig::default(),
            goals: GoalSamplerConfig::default(),
        }
    }
}

impl LlcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "llc gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        let weights = [
            ("alpha", self.alpha),
            ("entropy_weight", self.entropy_weight),
            ("value_weight", self.value_weight),
            ("bc_weight", self.bc_weight),
            ("goal_model_weight", self.goal_model_weight),
            ("ext_value_weight", self.ext_value_weight),
            ("distance_weight", self.distance_weight),
            ("beta", self.beta),
        ];
        if let Some((name, w)) = weights.iter().find(|(_, w)| !(*w >= 0.0)) {
            return Err(Error::Config(format!("llc {name} must be >= 0, got {w}")));
        }
        if self.goal_dim == 0 || self.batch_size == 0 || self.unroll == 0 {
            return Err(Error::Config(
                "llc goal_dim, batch_size and unroll must be positive".into(),
            ));
        }
        self.goals.validate()
    }

    pub fn distance_classes(&self) -> usize {
        self.goals.max_len + 1
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            max_grad_norm: Some(self.max_grad_norm),
            ..AdamConfig::default()
        }
    }
}

/// All LLC parameters (names prefixed `llc.`) and the modules reading them.
#[derive(Clone, Debug)]
pub struct LlcNetworks {
    pub params: ParameterSet,
    pub encoder: FrameStackEncoder,
    pub goal_encoder: GoalEncoder,
    pub goal_model: GoalModel,
    pub policy: Mlp,
    pub behavior: Mlp,
    pub value: Mlp,
    pub ext_value: Mlp,
    pub distance: Mlp,
    pub goal_dim: usize,
}

impl LlcNetworks {
    pub fn new(obs_dim: usize, config: &LlcConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut p = ParameterSet::new();
        let enc = &config.encoder;
        let encoder =
            FrameStackEncoder::new(&mut p, "llc.encoder", obs_dim, NUM_ACTIONS, enc, rng)?;
        let d = config.goal_dim;
        let goal_encoder = GoalEncoder::new(
            &mut p,
            "llc.goal_encoder",
            enc.embedding,
            config.head_hidden,
            d,
            rng,
        )?;
        let goal_model = GoalModel::new(
            &mut p,
            "llc.goal_model",
            enc.embedding,
            config.head_hidden,
            d,
            rng,
        )?;
        let head_in = enc.state + d;
        let h = config.head_hidden;
        let mut head = |name: &str, out: usize, p: &mut ParameterSet| {
            Mlp::new(
                p,
                &format!("llc.{name}"),
                &[head_in, h, out],
                Activation::Tanh,
                OutputInit::Zero,
                rng,
            )
        };
        let policy = head("policy", NUM_ACTIONS, &mut p)?;
        let behavior = head("behavior", NUM_ACTIONS, &mut p)?;
        let value = head("value", 1, &mut p)?;
        let ext_value = head("ext_value", 1, &mut p)?;
        let distance = head("distance", config.distance_classes(), &mut p)?;
        Ok(Self {
            params: p,
            encoder,
            goal_encoder,
            goal_model,
            policy,
            behavior,
            value,
            ext_value,
            distance,
            goal_dim: d,
        })
    }

    pub fn distance_classes(&self) -> usize {
        self.distance.output_size()
    }

    fn head_input(&self, b: &[f64], g: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(b.len() + g.len());
        x.extend_from_slice(b);
        x.extend_from_slice(g);
        x
    }

    pub fn policy_logits_row(&self, b: &[f64], g: &[f64]) -> Vec<f64> {
        self.policy.eval_row(&self.params, &self.head_input(b, g))
    }

    pub fn behavior_logits_row(&self, b: &[f64], g: &[f64]) -> Vec<f64> {
        self.behavior.eval_row(&self.params, &self.head_input(b, g))
    }

    pub fn value_row(&self, b: &[f64], g: &[f64]) -> f64 {
        self.value.eval_row(&self.params, &self.head_input(b, g))[0]
    }

    pub fn distance_logits_row(&self, b: &[f64], g: &[f64]) -> Vec<f64> {
        self.distance.eval_row(&self.params, &self.head_input(b, g))
    }

    /// Posterior of the goal encoder for a goal observation.
    pub fn encode_goal(&self, goal: &Observation) -> Result<DiagGaussian> {
        let c = self.encoder.embed_row(&self.params, &goal.features());
        self.goal_encoder.encode(&self.params, &c)
    }

    /// Deterministic goal for an observation: `tanh` of the posterior mean.
    pub fn goal_of(&self, goal: &Observation) -> Result<LatentGoal> {
        Ok(LatentGoal(
            self.encode_goal(goal)?
                .mean
                .iter()
                .map(|m| m.tanh())
                .collect(),
        ))
    }
}

/// Greedy choice or a categorical sample from logits.
pub fn choose_action(logits: &[f64], greedy: bool, rng: &mut impl Rng) -> u8 {
    if greedy {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best as u8;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i as u8;
        }
        u -= wi;
    }
    (w.len() - 1) as u8
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Result of querying the distance head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttainmentProbe {
    pub distance_probs: Vec<f64>,
    pub attained: bool,
    pub value: f64,
}

/// Attained only when class 0 strictly beats every other class.
pub fn attained_from_logits(logits: &[f64]) -> bool {
    logits[1..].iter().all(|&l| logits[0] > l)
}

/// Which LLC head picks primitive actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActingHead {
    Policy,
    Behavior,
}

/// Acting wrapper holding the frame-stack state of one episode.
#[derive(Clone, Debug)]
pub struct LlcActor<'a> {
    nets: &'a LlcNetworks,
    tracker: StackTracker,
    state: Option<Vec<f64>>,
    pub mode: LlcMode,
    pub head: ActingHead,
    pub greedy: bool,
}

impl<'a> LlcActor<'a> {
    pub fn new(nets: &'a LlcNetworks, mode: LlcMode) -> Self {
        Self {
            nets,
            tracker: StackTracker::new(nets.encoder.k),
            state: None,
            mode,
            head: if mode == LlcMode::AutopilotBc {
                ActingHead::Behavior
            } else {
                ActingHead::Policy
            },
            greedy: false,
        }
    }

    /// Current `b_t`.
    pub fn agent_state(&mut self) -> &[f64] {
        if self.state.is_none() {
            self.state = Some(
                self.nets
                    .encoder
                    .state_row(&self.nets.params, &self.tracker),
            );
        }
        self.state.as_deref().expect("state computed")
    }

    /// `c_t` of the latest frame.
    pub fn embedding(&self) -> Option<&[f64]> {
        self.tracker.latest()
    }

    fn goal_input(&self, goal: &LatentGoal) -> Vec<f64> {
        if self.mode.uses_goals() {
            goal.0.clone()
        } else {
            vec![0.0; self.nets.goal_dim]
        }
    }

    pub fn action_logits(&mut self, goal: &LatentGoal) -> Vec<f64> {
        let g = self.goal_input(goal);
        let head = self.head;
        let b = self.agent_state().to_vec();
        match head {
            ActingHead::Policy => self.nets.policy_logits_row(&b, &g),
            ActingHead::Behavior => self.nets.behavior_logits_row(&b, &g),
        }
    }

    pub fn probe(&mut self, goal: &LatentGoal) -> AttainmentProbe {
        let g = self.goal_input(goal);
        let b = self.agent_state().to_vec();
        let logits = self.nets.distance_logits_row(&b, &g);
        AttainmentProbe {
            attained: attained_from_logits(&logits),
            distance_probs: softmax_row(&logits),
            value: self.nets.value_row(&b, &g),
        }
    }
}

impl Controller for LlcActor<'_> {
    fn reset(&mut self, obs: &Observation) {
        self.tracker.clear();
        self.tracker.push(
            self.nets
                .encoder
                .embed_row(&self.nets.params, &obs.features()),
            None,
        );
        self.state = None;
    }

    fn observe(&mut self, action: u8, obs: &Observation) {
        self.tracker.push(
            self.nets
                .encoder
                .embed_row(&self.nets.params, &obs.features()),
            Some(action as usize),
        );
        self.state = None;
    }

    fn initiation_value(&mut self, goal: &LatentGoal) -> f64 {
        if !self.mode.uses_goals() {
            return f64::INFINITY;
        }
        let g = goal.0.clone();
        let b = self.agent_state().to_vec();
        self.nets.value_row(&b, &g)
    }

    fn act(&mut self, goal: &LatentGoal, _state: &GridState, rng: &mut ChaCha8Rng) -> u8 {
        let logits = self.action_logits(goal);
        choose_action(&logits, self.greedy, rng)
    }

    fn attained(&mut self, goal: &LatentGoal, _state: &GridState) -> bool {
        self.mode.uses_goals() && self.probe(goal).attained
    }
}

/// A contiguous slice of a replayed trajectory.
#[derive(Clone, Debug)]
pub struct Window {
    pub trajectory: Arc<Trajectory>,
    pub start: usize,
    pub len: usize,
}

/// Fixed goal pairs per window, or sample them from the encoder means.
#[derive(Clone, Debug)]
pub enum GoalPairs {
    Sample { seed: u64 },
    Fixed(Vec<Vec<(usize, usize)>>),
}

/// Everything random about one learner step, drawn up front so the loss is
/// a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct LlcBatch {
    pub windows: Vec<Window>,
    /// Reparameterization noise, one row per window step.
    pub noise: Tensor,
    pub pairs: GoalPairs,
}

impl LlcBatch {
    pub fn new(
        windows: Vec<Window>,
        goal_dim: usize,
        pairs: GoalPairs,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let rows: usize = windows.iter().map(|w| w.len).sum();
        let noise = (0..rows * goal_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Ok(Self {
            windows,
            noise: Tensor::matrix(rows, goal_dim, noise)?,
            pairs,
        })
    }

    /// Uniform trajectories from replay, each cut to a window of at most
    /// `unroll` steps with a uniform start.
    pub fn sample(
        buffer: &ReplayBuffer<Trajectory>,
        config: &LlcConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let windows = buffer
            .sample_uniform(config.batch_size, rng)?
            .into_iter()
            .map(|t| window_of(t, config.unroll, rng))
            .collect();
        let seed = rng.random();
        Self::new(windows, config.goal_dim, GoalPairs::Sample { seed }, rng)
    }

    pub fn rows(&self) -> usize {
        self.noise.rows()
    }
}

pub fn window_of(trajectory: Arc<Trajectory>, unroll: usize, rng: &mut impl Rng) -> Window {
    let n = trajectory.len();
    let len = n.min(unroll);
    let start = rng.random_range(0..=n - len);
    Window {
        trajectory,
        start,
        len,
    }
}

/// Per-component values of one LLC loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LlcDiagnostics {
    pub step: u64,
    pub total: f64,
    pub policy_gradient: f64,
    pub kl_to_behavior: f64,
    pub neg_entropy: f64,
    pub value: f64,
    pub behavior_cloning: f64,
    pub goal_model: f64,
    pub ext_value: f64,
    pub distance: f64,
    /// Mean per-dimension KL of the goal posterior to N(0, I).
    pub encoder_kl: f64,
    pub mean_abs_advantage: f64,
    pub tasks: usize,
}

/// Per-step inputs gathered from the batch windows before the forward pass.
struct Prepared {
    features: Tensor,
    step_frame: Vec<usize>,
    slots: Vec<Vec<Slot>>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    window_rows: Vec<std::ops::Range<usize>>,
}

fn prepare(batch: &LlcBatch, k: usize, obs_dim: usize) -> Result<Prepared> {
    let mut feats = Vec::new();
    let mut frames = 0usize;
    let mut p = Prepared {
        features: Tensor::zeros(vec![0]),
        step_frame: Vec::new(),
        slots: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
        window_rows: Vec::new(),
    };
    for w in &batch.windows {
        let t = &w.trajectory;
        if w.len == 0 || w.start + w.len > t.len() {
            return Err(Error::Length {
                what: "window",
                expected: t.len(),
                got: w.start + w.len,
            });
        }
        let first = w.start.saturating_sub(k - 1);
        let base = frames;
        for s in &t.steps[first..w.start + w.len] {
            let f = s.observation.features();
            if f.len() != obs_dim {
                return Err(Error::Length {
                    what: "observation features",
                    expected: obs_dim,
                    got: f.len(),
                });
            }
            feats.extend(f);
            frames += 1;
        }
        let row0 = p.actions.len();
        for i in w.start..w.start + w.len {
            p.step_frame.push(base + i - first);
            p.slots.push(stack_slots(
                i,
                k,
                0,
                |j| base + j - first,
                |j| (j >= 1).then(|| t.steps[j - 1].action as usize),
            ));
            p.actions.push(t.steps[i].action as usize);
            p.rewards.push(t.steps[i].reward);
            p.dones.push(t.steps[i].done);
        }
        p.window_rows.push(row0..p.actions.len());
    }
    p.features = Tensor::matrix(frames, obs_dim, feats)?;
    Ok(p)
}

fn discounted_returns(t: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    let mut acc = 0.0;
    for (i, s) in t.steps.iter().enumerate().rev() {
        if s.done {
            acc = 0.0;
        }
        acc = s.reward + gamma * acc;
        out[i] = acc;
    }
    out
}

/// A run of consecutive head-input rows trained as one episodic unroll.
struct Segment {
    rows: std::ops::Range<usize>,
    rewards: Vec<f64>,
    discounts: Vec<f64>,
    /// Head-input row whose value bootstraps the unroll; it is not trained.
    bootstrap_row: Option<usize>,
    /// Zero the policy gradient at the last step (goal already reached).
    mask_last: bool,
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(name.to_string()))
    }
}

/// Builds the composite LLC loss for `batch` on `tape`.
pub fn llc_loss(
    tape: &mut Tape<'_>,
    nets: &LlcNetworks,
    config: &LlcConfig,
    mode: LlcMode,
    batch: &LlcBatch,
) -> Result<(Var, LlcDiagnostics)> {
    let k = nets.encoder.k;
    let obs_dim = nets.encoder.frame.input_size();
    let mut prep = prepare(batch, k, obs_dim)?;
    let d = nets.goal_dim;
    let rows = prep.actions.len();

    let c = nets.encoder.embed(
        tape,
        std::mem::replace(&mut prep.features, Tensor::zeros(vec![0])),
    )?;
    let b = nets.encoder.states(tape, c, &prep.slots)?;
    let mut diag = LlcDiagnostics::default();

    if mode == LlcMode::AutopilotBc {
        let zeros = tape.constant(Tensor::zeros(vec![rows, d]));
        let x = tape.concat(&[b, zeros])?;
        let logits = nets.behavior.forward(tape, x)?;
        let logp = tape.log_softmax(logits);
        let picked = tape.gather(logp, &prep.actions)?;
        let bc = tape.mean(picked);
        let bc = tape.neg(bc);
        diag.behavior_cloning = check_finite("behavior_cloning", tape.value(bc).item().unwrap())?;
        let total = tape.scale(bc, config.bc_weight);
        diag.total = check_finite("total", tape.value(total).item().unwrap())?;
        return Ok((total, diag));
    }

    // Head inputs, and per head-input row: action, source window row, and
    // distance label / ext return where relevant.
    let mut segments = Vec::new();
    let x;
    let mut x_actions = Vec::new();
    let mut x_labels = Vec::new();
    let mut x_ext = Vec::new();
    let mut extra = None;

    if mode == LlcMode::GoalConditioned {
        let c_steps = tape.gather_rows(c, &prep.step_frame)?;
        let (mean, log_std) = nets.goal_encoder.forward(tape, c_steps)?;
        let g_all = sample_on_tape(tape, mean, log_std, batch.noise.clone())?;

        let pairs: Vec<Vec<(usize, usize)>> = match &batch.pairs {
            GoalPairs::Fixed(p) => p.clone(),
            GoalPairs::Sample { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let means = tape.value(mean);
                let mut out = Vec::with_capacity(prep.window_rows.len());
                for r in &prep.window_rows {
                    if r.len() <= config.goals.min_len {
                        out.push(Vec::new());
                        continue;
                    }
                    let emb: Vec<Vec<f64>> = r.clone().map(|i| means.row(i).to_vec()).collect();
                    out.push(sample_goal_pairs(
                        &prep.rewards[r.clone()],
                        &emb,
                        &config.goals,
                        &mut rng,
                    )?);
                }
                out
            }
        };
        if pairs.len() != prep.window_rows.len() {
            return Err(Error::Length {
                what: "goal pairs",
                expected: prep.window_rows.len(),
                got: pairs.len(),
            });
        }

        let mut step_rows = Vec::new();
        let mut goal_rows = Vec::new();
        for (w, (range, ps)) in prep.window_rows.iter().zip(&pairs).enumerate() {
            let returns = discounted_returns(&batch.windows[w].trajectory, config.ext_discount);
            let start = batch.windows[w].start;
            for &(s, e) in ps {
                if s >= e || range.start + e >= range.end {
                    return Err(Error::Length {
                        what: "goal pair",
                        expected: range.len(),
                        got: e + 1,
                    });
                }
                let (rewards, discounts, labels) =
                    relabel_indices(s, e, config.gamma, config.goals.max_len);
                let row0 = step_rows.len();
                for t in s..=e {
                    step_rows.push(range.start + t);
                    goal_rows.push(range.start + e);
                    x_actions.push(prep.actions[range.start + t]);
                    x_ext.push(returns[start + t]);
                }
                x_labels.extend(labels);
                segments.push(Segment {
                    rows: row0..step_rows.len(),
                    rewards,
                    discounts,
                    bootstrap_row: None,
                    mask_last: true,
                });
            }
        }
        diag.tasks = segments.len();

        let kl = kl_on_tape(tape, mean, log_std)?;
        let kl = tape.mean(kl);
        let gm_logits = nets.goal_model.forward(tape, c_steps)?;
        let gm = goal_model_loss(tape, gm_logits, g_all)?;
        extra = Some((kl, gm));

        if segments.is_empty() {
            let enc_kl = tape.scale(kl, config.beta);
            let gm_w = tape.scale(gm, config.goal_model_weight);
            let total = tape.add(enc_kl, gm_w)?;
            diag.encoder_kl =
                check_finite("encoder_kl", tape.value(kl).item().unwrap())? / d as f64;
            diag.goal_model = check_finite("goal_model", tape.value(gm).item().unwrap())?;
            diag.total = check_finite("total", tape.value(total).item().unwrap())?;
            return Ok((total, diag));
        }
        let bx = tape.gather_rows(b, &step_rows)?;
        let gx = tape.gather_rows(g_all, &goal_rows)?;
        x = tape.concat(&[bx, gx])?;
    } else {
        let zeros = tape.constant(Tensor::zeros(vec![rows, d]));
        x = tape.concat(&[b, zeros])?;
        x_actions = prep.actions.clone();
        for range in &prep.window_rows {
            let last = range.end - 1;
            let (used, bootstrap_row) = if prep.dones[last] {
                (range.clone(), None)
            } else {
                (range.start..last, Some(last))
            };
            if used.is_empty() {
                continue;
            }
            segments.push(Segment {
                rewards: prep.rewards[used.clone()].to_vec(),
                discounts: used
                    .clone()
                    .map(|i| {
                        if prep.dones[i] {
                            0.0
                        } else {
                            config.ext_discount
                        }
                    })
                    .collect(),
                rows: used,
                bootstrap_row,
                mask_last: false,
            });
        }
        diag.tasks = segments.len();
    }

    let m = x_actions.len();
    let pi_logits = nets.policy.forward(tape, x)?;
    let mu_logits = nets.behavior.forward(tape, x)?;
    let v_out = nets.value.forward(tape, x)?;
    let v = tape.reshape(v_out, &[m])?;
    let logp_pi = tape.log_softmax(pi_logits);
    let logp_mu = tape.log_softmax(mu_logits);
    let picked_pi = tape.gather(logp_pi, &x_actions)?;
    let picked_mu = tape.gather(logp_mu, &x_actions)?;

    // V-Trace over each segment with the behavior estimate held fixed.
    let values = tape.value(v).data().to_vec();
    let lp_pi = tape.value(picked_pi).data().to_vec();
    let lp_mu = tape.value(picked_mu).data().to_vec();
    let mut pg_weight = vec![0.0; m];
    let mut v_target = vec![0.0; m];
    let mut v_mask = vec![0.0; m];
    let mut abs_adv = 0.0;
    let mut n_adv = 0usize;
    for seg in &segments {
        let r = seg.rows.clone();
        let log_rhos: Vec<f64> = r.clone().map(|i| lp_pi[i] - lp_mu[i]).collect();
        let bootstrap = seg.bootstrap_row.map(|i| values[i]).unwrap_or(0.0);
        let out = compute_vtrace(
            &values[r.clone()],
            bootstrap,
            &seg.rewards,
            &seg.discounts,
            &log_rhos,
            config.rho_bar,
            config.c_bar,
        )?;
        for (j, i) in r.clone().enumerate() {
            let masked = seg.mask_last && i + 1 == r.end;
            if !masked {
                pg_weight[i] = out.advantages[j];
                abs_adv += out.advantages[j].abs();
                n_adv += 1;
            }
            v_target[i] = out.targets[j];
            v_mask[i] = 1.0;
        }
    }
    let trained = v_mask.iter().sum::<f64>().max(1.0);
    let inv = 1.0 / trained;
    let mask_t = tape.constant(Tensor::vector(v_mask.clone()));

    let pgw = tape.constant(Tensor::vector(pg_weight));
    let pg_rows = tape.mul(picked_pi, pgw)?;
    let pg_sum = tape.sum(pg_rows);
    let pg = tape.scale(pg_sum, -inv);

    let probs = tape.exp(logp_pi);
    let mu_fixed = tape.stop_gradient(logp_mu);
    let diff = tape.sub(logp_pi, mu_fixed)?;
    let kl_terms = tape.mul(probs, diff)?;
    let kl_rows = tape.sum_rows(kl_terms);
    let kl_rows = tape.mul(kl_rows, mask_t)?;
    let kl_sum = tape.sum(kl_rows);
    let kl = tape.scale(kl_sum, inv);

    let ent_terms = tape.mul(probs, logp_pi)?;
    let ent_rows = tape.sum_rows(ent_terms);
    let ent_rows = tape.mul(ent_rows, mask_t)?;
    let ent_sum = tape.sum(ent_rows);
    let neg_entropy = tape.scale(ent_sum, inv);

    let vt = tape.constant(Tensor::vector(v_target));
    let verr = tape.sub(v, vt)?;
    let vsq = tape.square(verr);
    let vsq = tape.mul(vsq, mask_t)?;
    let vsum = tape.sum(vsq);
    let value_loss = tape.scale(vsum, inv);

    let bc_rows = tape.mul(picked_mu, mask_t)?;
    let bc_sum = tape.sum(bc_rows);
    let bc = tape.scale(bc_sum, -inv);

    let mut terms = vec![
        ("policy_gradient", pg, 1.0),
        ("kl_to_behavior", kl, config.alpha),
        ("neg_entropy", neg_entropy, config.entropy_weight),
        ("value", value_loss, config.value_weight),
        ("behavior_cloning", bc, config.bc_weight),
    ];

    if let Some((enc_kl, gm)) = extra {
        let ext_out = nets.ext_value.forward(tape, x)?;
        let ext = tape.reshape(ext_out, &[m])?;
        let target = tape.constant(Tensor::vector(x_ext));
        let e = tape.sub(ext, target)?;
        let e2 = tape.square(e);
        let ext_loss = tape.mean(e2);

        let dist_logits = nets.distance.forward(tape, x)?;
        let dlp = tape.log_softmax(dist_logits);
        let dpicked = tape.gather(dlp, &x_labels)?;
        let dmean = tape.mean(dpicked);
        let dist_loss = tape.neg(dmean);

        terms.push(("goal_model", gm, config.goal_model_weight));
        terms.push(("ext_value", ext_loss, config.ext_value_weight));
        terms.push(("distance", dist_loss, config.distance_weight));
        terms.push(("encoder_kl", enc_kl, config.beta));
    }

    let mut total = None;
    for &(name, var, w) in &terms {
        let val = check_finite(name, tape.value(var).item().expect("scalar loss term"))?;
        match name {
            "policy_gradient" => diag.policy_gradient = val,
            "kl_to_behavior" => diag.kl_to_behavior = val,
            "neg_entropy" => diag.neg_entropy = val,
            "value" => diag.value = val,
            "behavior_cloning" => diag.behavior_cloning = val,
            "goal_model" => diag.goal_model = val,
            "ext_value" => diag.ext_value = val,
            "distance" => diag.distance = val,
            "encoder_kl" => diag.encoder_kl = val / d as f64,
            _ => unreachable!(),
        }
        let scaled = tape.scale(var, w);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = total.expect("at least one loss term");
    diag.total = check_finite("total", tape.value(total).item().unwrap())?;
    diag.mean_abs_advantage = if n_adv > 0 {
        abs_adv / n_adv as f64
    } else {
        0.0
    };
    Ok((total, diag))
}

/// Owns the LLC parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct LlcLearner {
    pub nets: LlcNetworks,
    pub config: LlcConfig,
    pub mode: LlcMode,
    steps: u64,
}

impl LlcLearner {
    pub fn new(
        obs_dim: usize,
        config: LlcConfig,
        mode: LlcMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            nets: LlcNetworks::new(obs_dim, &config, rng)?,
            config,
            mode,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn actor(&self) -> LlcActor<'_> {
        LlcActor::new(&self.nets, self.mode)
    }

    pub fn train_on(&mut self, batch: &LlcBatch) -> Result<LlcDiagnostics> {
        let (grads, mut diag) = {
            let mut tape = Tape::with_params(&self.nets.params);
            let (loss, diag) = llc_loss(&mut tape, &self.nets, &self.config, self.mode, batch)?;
            (tape.backward(loss)?.into_params(), diag)
        };
        self.nets.params.adam_step(&grads, &self.config.adam())?;
        self.steps += 1;
        diag.step = self.steps;
        Ok(diag)
    }

    pub fn train_step(
        &mut self,
        buffer: &ReplayBuffer<Trajectory>,
        rng: &mut impl Rng,
    ) -> Result<LlcDiagnostics> {
        let batch = LlcBatch::sample(buffer, &self.config, rng)?;
        self.train_on(&batch)
    }
}
