//! Trajectory storage, uniform sampling and replay/online batch mixing.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{EnvConfig, GridState, Observation, NUM_ACTIONS};

pub const DEFAULT_CAPACITY: usize = 2000;

/// One primitive step: the observation the action was taken from, the
/// action, and the reward and done flag it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Observation,
    pub action: u8,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    /// Which policy produced the data, e.g. `"random"` or `"h2o2"`.
    pub generator: String,
    pub seed: u64,
}

impl Trajectory {
    pub fn new(steps: Vec<Transition>, generator: impl Into<String>, seed: u64) -> Result<Self> {
        let t = Self {
            steps,
            generator: generator.into(),
            seed,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Checked before anything enters a [`ReplayBuffer`].
pub trait ReplayItem {
    fn validate(&self) -> Result<()>;
}

impl ReplayItem for Trajectory {
    fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let last = self.steps.len() - 1;
        if let Some(i) = self.steps[..last].iter().position(|s| s.done) {
            return Err(Error::EarlyDone(i));
        }
        Ok(())
    }
}

/// Bounded FIFO of shared items. Samples hand out `Arc`s, so a reader keeps
/// a consistent view of an item even after it has been evicted.
#[derive(Debug)]
pub struct ReplayBuffer<T> {
    items: VecDeque<Arc<T>>,
    capacity: usize,
    inserted: u64,
}

impl<T: ReplayItem> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            inserted: 0,
        }
    }

    pub fn insert(&mut self, item: T) -> Result<()> {
        self.insert_shared(Arc::new(item))
    }

    pub fn insert_shared(&mut self, item: Arc<T>) -> Result<()> {
        item.validate()?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
        self.inserted += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of insertions ever made.
    pub fn insertion_count(&self) -> u64 {
        self.inserted
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Arc<T>> {
        self.items.iter()
    }

    /// `count` i.i.d. uniform draws with replacement.
    pub fn sample_uniform(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<Arc<T>>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..count)
            .map(|_| Arc::clone(&self.items[rng.random_range(0..self.items.len())]))
            .collect())
    }
}

/// Producer/consumer queue of fresh items for the online half of a batch.
#[derive(Debug, Default)]
pub struct OnlineQueue<T> {
    items: Mutex<VecDeque<Arc<T>>>,
    ready: Condvar,
}

impl<T> OnlineQueue<T> {
    pub fn new() -> Self {
        Self {
            items: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
        }
    }

    pub fn push(&self, item: Arc<T>) {
        self.items.lock().expect("queue lock").push_back(item);
        self.ready.notify_all();
    }

    pub fn len(&self) -> usize {
        self.items.lock().expect("queue lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Removes the `n` oldest items, waiting until that many are available.
    pub fn pop_blocking(&self, n: usize) -> Vec<Arc<T>> {
        let mut items = self.items.lock().expect("queue lock");
        while items.len() < n {
            items = self.ready.wait(items).expect("queue lock");
        }
        items.drain(..n).collect()
    }
}

/// Number of replay items in a batch of `batch_size`.
pub fn replay_share(replay_proportion: f64, batch_size: usize) -> usize {
    ((replay_proportion * batch_size as f64).round() as usize).min(batch_size)
}

/// `round(replay_proportion * batch_size)` uniform replay draws followed by
/// the oldest remaining items of the online queue. Blocks while the queue
/// holds too few items.
pub fn mix_batch<T: ReplayItem>(
    online: &OnlineQueue<T>,
    buffer: &ReplayBuffer<T>,
    replay_proportion: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Arc<T>>> {
    if !(0.0..=1.0).contains(&replay_proportion) {
        return Err(Error::Config(format!(
            "replay proportion {replay_proportion} outside [0, 1]"
        )));
    }
    let n_replay = replay_share(replay_proportion, batch_size);
    let mut batch = if n_replay > 0 {
        buffer.sample_uniform(n_replay, rng)?
    } else {
        Vec::new()
    };
    batch.extend(online.pop_blocking(batch_size - n_replay));
    Ok(batch)
}

/// Uniform-random play on the layout generated from `seed`, until the
/// episode ends or `max_len` steps have been taken.
pub fn random_trajectory(
    env: EnvConfig,
    seed: u64,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let mut g = GridState::generate(seed, env)?;
    let mut steps = Vec::new();
    while steps.len() < max_len {
        let observation = g.observe();
        let action = rng.random_range(0..NUM_ACTIONS as u8);
        let out = g.step_id(action)?;
        steps.push(Transition {
            observation,
            action,
            reward: out.reward,
            done: out.done,
        });
        if out.done {
            break;
        }
    }
    Trajectory::new(steps, "random", seed)
}

#[derive(Serialize)]
struct Versioned<'a> {
    schema_version: u32,
    #[serde(flatten)]
    trajectory: &'a Trajectory,
}

/// Appends trajectories to a JSONL log, one record per line.
pub fn write_trajectory_log<'a>(
    path: &Path,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for trajectory in trajectories {
        let line = Versioned {
            schema_version: crate::harness::metrics::SCHEMA_VERSION,
            trajectory,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory_log(path: &Path) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}
