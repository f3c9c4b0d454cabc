//! Hindsight goal relabeling.
//!
//! A replayed (sub)trajectory becomes a set of goal-reaching tasks: pick a
//! start `t_s` and an end `t_e`, take the observation at `t_e` as the goal,
//! and pay reward 1 exactly when `t_e` is reached. Indices here are
//! zero-based positions in the step slice handed in.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::Observation;
use crate::replay::Transition;

/// Goals whose similarity exceeds this percentile are never used.
pub const SIMILARITY_PERCENTILE: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoalSamplerConfig {
    pub min_len: usize,
    /// Goal horizon `n`: the furthest a goal may lie in the future.
    pub max_len: usize,
    pub p_reward: f64,
    pub goals_per_trajectory: usize,
}

impl Default for GoalSamplerConfig {
    fn default() -> Self {
        Self {
            min_len: 2,
            max_len: 16,
            p_reward: 0.3,
            goals_per_trajectory: 4,
        }
    }
}

impl GoalSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.min_len >= self.max_len {
            return Err(Error::Config(format!(
                "goal window bounds need 2 <= min < max, got min {} max {}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.p_reward) {
            return Err(Error::Config(format!(
                "p_reward {} outside [0, 1]",
                self.p_reward
            )));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// For each embedding, its largest cosine similarity to any other one.
pub fn goal_similarity(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    if embeddings.len() < 2 {
        return Err(Error::TooFewEmbeddings(embeddings.len()));
    }
    let norms: Vec<f64> = embeddings.iter().map(|e| norm(e)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm(i));
    }
    if embeddings.iter().any(|e| e.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("goal embedding"));
    }
    let n = embeddings.len();
    let mut sim = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| a * b)
                .sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            sim[i] = sim[i].max(c);
            sim[j] = sim[j].max(c);
        }
    }
    Ok(sim)
}

/// `q`-th percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Admissibility mask: `sim_t <= percentile_40(sim)`.
pub fn similarity_filter(sim: &[f64]) -> Vec<bool> {
    if sim.is_empty() {
        return Vec::new();
    }
    let cut = percentile(sim, SIMILARITY_PERCENTILE);
    sim.iter().map(|&s| s <= cut).collect()
}

/// All `(t_s, t_e)` in a trajectory of `len` steps meeting the window bounds
/// with an admissible end.
pub fn candidate_pairs(
    len: usize,
    admissible: &[bool],
    config: &GoalSamplerConfig,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for e in 0..len {
        if !admissible[e] {
            continue;
        }
        let lo = e.saturating_sub(config.max_len);
        for s in lo..e {
            if e - s >= config.min_len {
                out.push((s, e));
            }
        }
    }
    out
}

/// Draws `goals_per_trajectory` pairs. Each draw comes, with probability
/// `p_reward`, from the windows that contain a nonzero environment reward
/// (or from all candidates when there are none). Returns an empty list when
/// nothing is admissible.
pub fn sample_goal_pairs(
    rewards: &[f64],
    embeddings: &[Vec<f64>],
    config: &GoalSamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    if rewards.len() != embeddings.len() {
        return Err(Error::Length {
            what: "goal embeddings",
            expected: rewards.len(),
            got: embeddings.len(),
        });
    }
    if rewards.len() <= config.min_len {
        return Ok(Vec::new());
    }
    let admissible = similarity_filter(&goal_similarity(embeddings)?);
    let all = candidate_pairs(rewards.len(), &admissible, config);
    if all.is_empty() {
        return Ok(Vec::new());
    }
    // prefix[i] = rewarding steps among 0..i
    let mut prefix = vec![0usize; rewards.len() + 1];
    for (i, r) in rewards.iter().enumerate() {
        prefix[i + 1] = prefix[i] + usize::from(*r != 0.0);
    }
    let rewarding: Vec<(usize, usize)> = all
        .iter()
        .copied()
        .filter(|&(s, e)| prefix[e + 1] > prefix[s])
        .collect();
    let mut out = Vec::with_capacity(config.goals_per_trajectory);
    for _ in 0..config.goals_per_trajectory {
        let pool = if !rewarding.is_empty() && rng.random_bool(config.p_reward) {
            &rewarding
        } else {
            &all
        };
        out.push(*pool.choose(rng).expect("nonempty pool"));
    }
    Ok(out)
}

/// One relabeled goal-reaching task over steps `t_s..=t_e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HindsightTask {
    pub t_s: usize,
    pub t_e: usize,
    /// 1 at `t_e`, 0 elsewhere.
    pub rewards: Vec<f64>,
    /// `gamma` per step, 0 at `t_e` where the task ends.
    pub discounts: Vec<f64>,
    /// `t_e - t` clipped to the horizon.
    pub distance_labels: Vec<usize>,
    pub goal: Observation,
}

impl HindsightTask {
    pub fn len(&self) -> usize {
        self.t_e - self.t_s + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn relabel_indices(
    t_s: usize,
    t_e: usize,
    gamma: f64,
    horizon: usize,
) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    assert!(t_s < t_e, "relabel needs t_s < t_e");
    let n = t_e - t_s + 1;
    let mut rewards = vec![0.0; n];
    rewards[n - 1] = 1.0;
    let mut discounts = vec![gamma; n];
    discounts[n - 1] = 0.0;
    let labels = (t_s..=t_e).map(|t| (t_e - t).min(horizon)).collect();
    (rewards, discounts, labels)
}

pub fn relabel(
    steps: &[Transition],
    t_s: usize,
    t_e: usize,
    gamma: f64,
    horizon: usize,
) -> HindsightTask {
    assert!(
        t_e < steps.len(),
        "t_e {t_e} beyond trajectory of {} steps",
        steps.len()
    );
    let (rewards, discounts, distance_labels) = relabel_indices(t_s, t_e, gamma, horizon);
    HindsightTask {
        t_s,
        t_e,
        rewards,
        discounts,
        distance_labels,
        goal: steps[t_e].observation.clone(),
    }
}
