//! Call-and-return execution of SMDP actions.
//!
//! The high-level controller issues either a primitive action or a latent
//! goal. A goal runs the low-level controller until the attainment
//! classifier fires, the option times out, or the episode ends. Options the
//! LLC's value estimate deems unreachable are vetoed: a single no-op is
//! executed instead.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goal_space::LatentGoal;
use crate::gridworld::{Action, GridState, Observation};
use crate::replay::{Trajectory, Transition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmdpAction {
    Primitive(u8),
    Option(LatentGoal),
}

impl SmdpAction {
    pub fn is_option(&self) -> bool {
        matches!(self, SmdpAction::Option(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    FirstTimestep,
    LastTimestep,
    GoalAttained,
    Timeout,
    PrimitiveDone,
    FailedInitiation,
}

impl TerminationReason {
    pub const ALL: [TerminationReason; 6] = [
        TerminationReason::FirstTimestep,
        TerminationReason::LastTimestep,
        TerminationReason::GoalAttained,
        TerminationReason::Timeout,
        TerminationReason::PrimitiveDone,
        TerminationReason::FailedInitiation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TerminationReason::FirstTimestep => "first_timestep",
            TerminationReason::LastTimestep => "last_timestep",
            TerminationReason::GoalAttained => "goal_attained",
            TerminationReason::Timeout => "timeout",
            TerminationReason::PrimitiveDone => "primitive_done",
            TerminationReason::FailedInitiation => "failed_initiation",
        }
    }
}

/// One SMDP transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionExecutionRecord {
    pub action: SmdpAction,
    pub env_steps: usize,
    pub reward: f64,
    pub reason: TerminationReason,
    pub observation: Observation,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub timeout: usize,
    /// Options with `V(b_t, g)` below this are vetoed.
    pub tau: f64,
    /// Times each primitive chosen by the high level is repeated.
    pub action_repeat: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            timeout: 7,
            tau: 0.05,
            action_repeat: 1,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout < 1 || self.action_repeat < 1 {
            return Err(Error::Config(
                "timeout and action_repeat must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// The low-level side of the runtime. The learned LLC implements it; tests
/// plug in scripted controllers.
pub trait Controller {
    /// Start of an episode.
    fn reset(&mut self, obs: &Observation);
    /// Every environment step, whoever chose the action.
    fn observe(&mut self, action: u8, obs: &Observation);
    /// Value estimate used by the initiation veto.
    fn initiation_value(&mut self, goal: &LatentGoal) -> f64;
    fn act(&mut self, goal: &LatentGoal, state: &GridState, rng: &mut ChaCha8Rng) -> u8;
    fn attained(&mut self, goal: &LatentGoal, state: &GridState) -> bool;
}

/// Stand-in LLC for agents that only issue primitives.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoLlc;

impl Controller for NoLlc {
    fn reset(&mut self, _: &Observation) {}
    fn observe(&mut self, _: u8, _: &Observation) {}
    fn initiation_value(&mut self, _: &LatentGoal) -> f64 {
        f64::NEG_INFINITY
    }
    fn act(&mut self, _: &LatentGoal, _: &GridState, _: &mut ChaCha8Rng) -> u8 {
        Action::Noop.id()
    }
    fn attained(&mut self, _: &LatentGoal, _: &GridState) -> bool {
        true
    }
}

/// Wraps a controller so that no option is ever vetoed.
pub struct NoVeto<C>(pub C);

impl<C: Controller> Controller for NoVeto<C> {
    fn reset(&mut self, obs: &Observation) {
        self.0.reset(obs)
    }
    fn observe(&mut self, action: u8, obs: &Observation) {
        self.0.observe(action, obs)
    }
    fn initiation_value(&mut self, _: &LatentGoal) -> f64 {
        f64::INFINITY
    }
    fn act(&mut self, goal: &LatentGoal, state: &GridState, rng: &mut ChaCha8Rng) -> u8 {
        self.0.act(goal, state, rng)
    }
    fn attained(&mut self, goal: &LatentGoal, state: &GridState) -> bool {
        self.0.attained(goal, state)
    }
}

/// One episode under call-and-return control. Every primitive step is
/// appended to the episode's transition log.
#[derive(Clone, Debug)]
pub struct Episode {
    state: GridState,
    config: RuntimeConfig,
    transitions: Vec<Transition>,
    reward: f64,
}

impl Episode {
    /// Starts the episode; the controller sees the first observation.
    pub fn start(
        state: GridState,
        config: RuntimeConfig,
        llc: &mut impl Controller,
    ) -> Result<Self> {
        config.validate()?;
        if state.is_done() {
            return Err(Error::Terminal);
        }
        llc.reset(&state.observe());
        Ok(Self {
            state,
            config,
            transitions: Vec::new(),
            reward: 0.0,
        })
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    pub fn observation(&self) -> Observation {
        self.state.observe()
    }

    /// The HLC's first input: the reset observation, tagged `FirstTimestep`.
    pub fn first_frame(&self) -> (Observation, TerminationReason) {
        let obs = match self.transitions.first() {
            Some(t) => t.observation.clone(),
            None => self.state.observe(),
        };
        (obs, TerminationReason::FirstTimestep)
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done()
    }

    pub fn env_steps(&self) -> usize {
        self.transitions.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.reward
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn into_trajectory(self, generator: &str) -> Result<Trajectory> {
        let seed = self.state.seed();
        Trajectory::new(self.transitions, generator, seed)
    }

    fn env_step(&mut self, action: u8, llc: &mut impl Controller) -> Result<(f64, bool)> {
        let obs = self.state.observe();
        let out = self.state.step_id(action)?;
        self.transitions.push(Transition {
            observation: obs,
            action,
            reward: out.reward,
            done: out.done,
        });
        self.reward += out.reward;
        llc.observe(action, &self.state.observe());
        Ok((out.reward, out.done))
    }

    /// Runs one SMDP action to termination.
    pub fn execute(
        &mut self,
        action: SmdpAction,
        llc: &mut impl Controller,
        rng: &mut ChaCha8Rng,
    ) -> Result<OptionExecutionRecord> {
        if self.state.is_done() {
            return Err(Error::Terminal);
        }
        let mut steps = 0;
        let mut reward = 0.0;
        let mut done = false;
        let reason = match &action {
            SmdpAction::Primitive(a) => {
                Action::from_id(*a)?;
                for _ in 0..self.config.action_repeat {
                    let (r, d) = self.env_step(*a, llc)?;
                    steps += 1;
                    reward += r;
                    if d {
                        done = true;
                        break;
                    }
                }
                TerminationReason::PrimitiveDone
            }
            SmdpAction::Option(goal) => {
                if llc.initiation_value(goal) < self.config.tau {
                    let (r, d) = self.env_step(Action::Noop.id(), llc)?;
                    steps = 1;
                    reward = r;
                    done = d;
                    TerminationReason::FailedInitiation
                } else {
                    loop {
                        let a = llc.act(goal, &self.state, rng);
                        let (r, d) = self.env_step(a, llc)?;
                        steps += 1;
                        reward += r;
                        if d {
                            done = true;
                            break TerminationReason::Timeout;
                        }
                        if llc.attained(goal, &self.state) {
                            break TerminationReason::GoalAttained;
                        }
                        if steps >= self.config.timeout {
                            break TerminationReason::Timeout;
                        }
                    }
                }
            }
        };
        Ok(OptionExecutionRecord {
            action,
            env_steps: steps,
            reward,
            reason: if done {
                TerminationReason::LastTimestep
            } else {
                reason
            },
            observation: self.state.observe(),
            done,
        })
    }
}

/// Environment steps per high-level decision.
pub fn avg_llc_steps(records: &[OptionExecutionRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    Some(records.iter().map(|r| r.env_steps).sum::<usize>() as f64 / records.len() as f64)
}

/// Fraction of environment steps spent inside temporally extended
/// behavior beyond each decision's first step, given the average ratio.
pub fn extended_fraction(avg_steps: f64) -> f64 {
    1.0 - 1.0 / avg_steps
}

/// Share of each termination reason, counting records.
pub fn reason_fractions(records: &[OptionExecutionRecord]) -> BTreeMap<TerminationReason, f64> {
    let mut out = BTreeMap::new();
    if records.is_empty() {
        return out;
    }
    for r in records {
        *out.entry(r.reason).or_insert(0.0) += 1.0;
    }
    let n = records.len() as f64;
    out.values_mut().for_each(|v| *v /= n);
    out
}

/// [`reason_fractions`] per consecutive bin of `bin_size` environment steps.
/// A record belongs to the bin in which it starts.
pub fn termination_proportions(
    records: &[OptionExecutionRecord],
    bin_size: usize,
) -> Vec<BTreeMap<TerminationReason, f64>> {
    assert!(bin_size > 0, "bin size must be positive");
    let mut bins: Vec<Vec<OptionExecutionRecord>> = Vec::new();
    let mut frame = 0usize;
    for r in records {
        let b = frame / bin_size;
        if bins.len() <= b {
            bins.resize_with(b + 1, Vec::new);
        }
        bins[b].push(r.clone());
        frame += r.env_steps;
    }
    bins.iter()
        .filter(|b| !b.is_empty())
        .map(|b| reason_fractions(b))
        .collect()
}

/// Discount reaching a reward at the end of `records`, applied per decision
/// versus per environment step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDiscount {
    pub per_decision: f64,
    pub per_env_step: f64,
    pub decisions: usize,
    pub env_steps: usize,
}

pub fn effective_discount(gamma: f64, records: &[OptionExecutionRecord]) -> EffectiveDiscount {
    let decisions = records.len();
    let env_steps = records.iter().map(|r| r.env_steps).sum();
    EffectiveDiscount {
        per_decision: gamma.powi(decisions as i32),
        per_env_step: gamma.powi(env_steps as i32),
        decisions,
        env_steps,
    }
}
