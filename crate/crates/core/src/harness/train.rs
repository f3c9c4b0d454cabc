//! The single-threaded acting/learning loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use h2o2_autodiff::{checkpoint, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::metrics::{JsonlLog, MetricsRecord, MetricsWriter, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::gridworld::GridState;
use crate::hlc::{
    HlcActor, HlcDiagnostics, HlcFrame, HlcLearner, HlcStep, HlcUnroll, UnrollBuilder,
};
use crate::llc::{LlcActor, LlcDiagnostics, LlcLearner};
use crate::replay::{mix_batch, replay_share, OnlineQueue, ReplayBuffer, Trajectory};
use crate::smdp::{Controller, Episode, NoLlc, OptionExecutionRecord, TerminationReason};

/// Both controllers of one agent.
#[derive(Clone, Debug)]
pub struct Learners {
    pub llc: Option<LlcLearner>,
    pub hlc: HlcLearner,
}

impl Learners {
    pub fn new(config: &ExperimentConfig, rng: &mut impl Rng) -> Result<Self> {
        let obs_dim = config.env.feature_dim();
        let llc = match config.variant.llc_mode() {
            Some(mode) => Some(LlcLearner::new(obs_dim, config.llc.clone(), mode, rng)?),
            None => None,
        };
        let hlc = HlcLearner::new(obs_dim, config.hlc.clone(), config.variant.options(), rng)?;
        Ok(Self { llc, hlc })
    }

    /// All parameters in one set; names keep their `llc.` / `hlc.` prefixes.
    pub fn combined_params(&self) -> Result<ParameterSet> {
        let mut out = ParameterSet::new();
        let sets = self
            .llc
            .iter()
            .map(|l| &l.nets.params)
            .chain([&self.hlc.nets.params]);
        for set in sets {
            for (name, t) in set.iter() {
                out.insert(name, t.clone())?;
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&self.combined_params()?, dir)?;
        Ok(())
    }

    /// Fresh learners for `config` with weights read from `dir`.
    pub fn load(config: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let stored = checkpoint::load(dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut learners = Self::new(config, &mut rng)?;
        if let Some(llc) = learners.llc.as_mut() {
            load_prefixed(&mut llc.nets.params, &stored, "llc.")?;
        }
        load_prefixed(&mut learners.hlc.nets.params, &stored, "hlc.")?;
        Ok(learners)
    }
}

fn load_prefixed(target: &mut ParameterSet, source: &ParameterSet, prefix: &str) -> Result<()> {
    let mut subset = ParameterSet::new();
    for (name, t) in source.iter().filter(|(n, _)| n.starts_with(prefix)) {
        subset.insert(name, t.clone())?;
    }
    if subset.len() != target.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} `{prefix}*` tensors, the config needs {}",
            subset.len(),
            target.len()
        )));
    }
    target.load_values_from(&subset)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeTelemetry {
    pub episode: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub env_steps: usize,
    pub hlc_steps: usize,
    pub reasons: BTreeMap<TerminationReason, usize>,
}

#[derive(Default)]
struct Bin {
    episodes: u64,
    return_sum: f64,
    successes: u64,
    decisions: u64,
    env_steps: u64,
    reasons: BTreeMap<TerminationReason, u64>,
    llc: Vec<LlcDiagnostics>,
    hlc: Vec<HlcDiagnostics>,
}

fn mean_of<T>(items: &[T], f: impl Fn(&T) -> f64) -> Option<f64> {
    (!items.is_empty()).then(|| items.iter().map(f).sum::<f64>() / items.len() as f64)
}

impl Bin {
    fn is_empty(&self) -> bool {
        self.episodes == 0 && self.decisions == 0
    }

    fn record(
        &self,
        label: &str,
        seed: u64,
        frames: u64,
        llc_steps: u64,
        hlc_steps: u64,
    ) -> MetricsRecord {
        let d = self.decisions as f64;
        MetricsRecord {
            schema_version: SCHEMA_VERSION,
            run: label.to_string(),
            seed,
            frames,
            episodes: self.episodes,
            episode_return_mean: (self.episodes > 0)
                .then(|| self.return_sum / self.episodes as f64),
            success_rate: (self.episodes > 0).then(|| self.successes as f64 / self.episodes as f64),
            decisions: self.decisions,
            avg_llc_steps: (self.decisions > 0).then(|| self.env_steps as f64 / d),
            termination: self
                .reasons
                .iter()
                .map(|(&r, &c)| (r, c as f64 / d))
                .collect(),
            llc_steps,
            hlc_steps,
            llc_loss: mean_of(&self.llc, |x| x.total),
            llc_kl_to_behavior: mean_of(&self.llc, |x| x.kl_to_behavior),
            llc_encoder_kl: mean_of(&self.llc, |x| x.encoder_kl),
            hlc_loss: mean_of(&self.hlc, |x| x.total),
            hlc_gate_probability: mean_of(&self.hlc, |x| x.gate_probability),
            hlc_value_loss: mean_of(&self.hlc, |x| x.value),
        }
    }
}

struct Sinks {
    dir: PathBuf,
    metrics: MetricsWriter,
    episodes: JsonlLog,
    llc: JsonlLog,
    hlc: JsonlLog,
}

impl Sinks {
    fn create(dir: &Path) -> Result<Self> {
        let metrics = MetricsWriter::create(dir, "metrics")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            episodes: JsonlLog::create(&dir.join("episodes.jsonl"))?,
            llc: JsonlLog::create(&dir.join("llc_diagnostics.jsonl"))?,
            hlc: JsonlLog::create(&dir.join("hlc_diagnostics.jsonl"))?,
        })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub learners: Learners,
    pub frames: u64,
    pub episodes: u64,
}

impl TrainOutcome {
    pub fn llc_steps(&self) -> u64 {
        self.learners.llc.as_ref().map_or(0, |l| l.steps())
    }

    pub fn hlc_steps(&self) -> u64 {
        self.learners.hlc.steps()
    }
}

pub struct Trainer {
    config: ExperimentConfig,
    label: String,
    learners: Learners,
    rng: ChaCha8Rng,
    replay: ReplayBuffer<Trajectory>,
    hlc_replay: ReplayBuffer<HlcUnroll>,
    online: OnlineQueue<HlcUnroll>,
    frames: u64,
    episodes: u64,
    next_learn: u64,
    next_metrics: u64,
    next_checkpoint: u64,
    bin: Bin,
    metrics: Vec<MetricsRecord>,
    sinks: Option<Sinks>,
}

impl Trainer {
    /// `out`, when given, receives metrics, logs and checkpoints.
    pub fn new(config: ExperimentConfig, label: &str, out: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let learners = Learners::new(&config, &mut rng)?;
        let sinks = out.map(Sinks::create).transpose()?;
        if let Some(s) = &sinks {
            std::fs::write(s.dir.join("config.kv"), config.to_kv()?)?;
        }
        Ok(Self {
            label: label.to_string(),
            replay: ReplayBuffer::new(config.replay_capacity),
            hlc_replay: ReplayBuffer::new(config.hlc_replay_capacity),
            online: OnlineQueue::new(),
            frames: 0,
            episodes: 0,
            next_learn: config.learn_every,
            next_metrics: config.metrics_every,
            next_checkpoint: if config.checkpoint_every > 0 {
                config.checkpoint_every
            } else {
                u64::MAX
            },
            bin: Bin::default(),
            metrics: Vec::new(),
            sinks,
            learners,
            rng,
            config,
        })
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.frames < self.config.budget {
            self.run_episode()?;
        }
        if !self.bin.is_empty() {
            self.close_bin()?;
        }
        if let Some(s) = self.sinks.take() {
            self.learners.save(&s.dir.join("checkpoint"))?;
            let Sinks {
                metrics,
                mut episodes,
                mut llc,
                mut hlc,
                ..
            } = s;
            metrics.finish()?;
            episodes.flush()?;
            llc.flush()?;
            hlc.flush()?;
        }
        Ok(TrainOutcome {
            metrics: self.metrics,
            learners: self.learners,
            frames: self.frames,
            episodes: self.episodes,
        })
    }

    fn run_episode(&mut self) -> Result<()> {
        let state = GridState::generate(self.rng.random(), self.config.env)?;
        // actors read a snapshot so the learners can update mid-episode
        let hlc_nets = self.learners.hlc.nets.clone();
        let mut hactor = HlcActor::new(&hlc_nets, self.learners.hlc.options);
        match self.learners.llc.as_ref().map(|l| (l.nets.clone(), l.mode)) {
            Some((nets, mode)) => {
                let mut actor = LlcActor::new(&nets, mode);
                self.drive(state, &mut actor, &mut hactor)
            }
            None => self.drive(state, &mut NoLlc, &mut hactor),
        }
    }

    fn drive(
        &mut self,
        state: GridState,
        llc: &mut impl Controller,
        hactor: &mut HlcActor<'_>,
    ) -> Result<()> {
        let mut ep = Episode::start(state, self.config.runtime, llc)?;
        let mut builder =
            UnrollBuilder::new(self.config.hlc.encoder.history, self.config.hlc.unroll);
        let (observation, reason) = ep.first_frame();
        let mut frame = HlcFrame {
            observation,
            reason,
        };
        let mut records: Vec<OptionExecutionRecord> = Vec::new();
        while !ep.is_done() && self.frames < self.config.budget {
            let (action, log_prob, _) = hactor.decide(&frame, &mut self.rng);
            let rec = ep.execute(action.clone(), llc, &mut self.rng)?;
            let next = HlcFrame {
                observation: rec.observation.clone(),
                reason: rec.reason,
            };
            let step = HlcStep {
                frame,
                action,
                behavior_log_prob: Some(log_prob),
                reward: rec.reward,
                env_steps: rec.env_steps,
                done: rec.done,
            };
            if let Some(u) = builder.push(step, (!rec.done).then(|| next.clone())) {
                let u = std::sync::Arc::new(u);
                self.hlc_replay.insert_shared(u.clone())?;
                self.online.push(u);
            }
            self.frames += rec.env_steps as u64;
            self.bin.decisions += 1;
            self.bin.env_steps += rec.env_steps as u64;
            *self.bin.reasons.entry(rec.reason).or_insert(0) += 1;
            records.push(rec);
            frame = next;

            while self.frames >= self.next_learn {
                self.learn()?;
                self.next_learn += self.config.learn_every;
            }
            if self.frames >= self.next_checkpoint {
                if let Some(s) = &self.sinks {
                    self.learners.save(&s.dir.join("checkpoint"))?;
                }
                while self.next_checkpoint <= self.frames {
                    self.next_checkpoint += self.config.checkpoint_every;
                }
            }
            // a finishing episode is counted in the bin it ends
            if !ep.is_done() {
                self.maybe_close_bin()?;
            }
        }
        if !ep.is_done() {
            return Ok(());
        }
        self.episodes += 1;
        let ret = ep.total_reward();
        self.bin.episodes += 1;
        self.bin.return_sum += ret;
        self.bin.successes += u64::from(ret > 0.0);
        if let Some(s) = self.sinks.as_mut() {
            let mut reasons = BTreeMap::new();
            for r in &records {
                *reasons.entry(r.reason).or_insert(0) += 1;
            }
            s.episodes.write(&EpisodeTelemetry {
                episode: self.episodes,
                episode_return: ret,
                env_steps: ep.env_steps(),
                hlc_steps: records.len(),
                reasons,
            })?;
        }
        if self.learners.llc.is_some() {
            self.replay.insert(ep.into_trajectory("h2o2")?)?;
        }
        self.maybe_close_bin()
    }

    fn maybe_close_bin(&mut self) -> Result<()> {
        if self.frames >= self.next_metrics {
            self.close_bin()?;
            while self.next_metrics <= self.frames {
                self.next_metrics += self.config.metrics_every;
            }
        }
        Ok(())
    }

    fn learn(&mut self) -> Result<()> {
        if let Some(llc) = self.learners.llc.as_mut() {
            if !self.replay.is_empty() {
                let d = llc
                    .train_step(&self.replay, &mut self.rng)
                    .map_err(|e| match e {
                        Error::NonFiniteLoss(c) => Error::NonFiniteLoss(format!("llc {c}")),
                        e => e,
                    })?;
                if let Some(s) = self.sinks.as_mut() {
                    s.llc.write(&d)?;
                }
                self.bin.llc.push(d);
            }
        }
        let hc = &self.learners.hlc.config;
        let (p, batch) = (hc.replay_proportion, hc.batch_size);
        let need_online = batch - replay_share(p, batch);
        let replay_ready = need_online == batch || !self.hlc_replay.is_empty();
        // one step per tick, plus catch-up steps so the online queue stays short
        let mut first = true;
        while replay_ready
            && self.online.len() >= need_online.max(1)
            && (first || (need_online > 0 && self.online.len() >= 2 * need_online))
        {
            first = false;
            let items = mix_batch(&self.online, &self.hlc_replay, p, batch, &mut self.rng)?;
            let d = self.learners.hlc.train_on(&items)?;
            if let Some(s) = self.sinks.as_mut() {
                s.hlc.write(&d)?;
            }
            self.bin.hlc.push(d);
        }
        Ok(())
    }

    fn close_bin(&mut self) -> Result<()> {
        let llc_steps = self.learners.llc.as_ref().map_or(0, |l| l.steps());
        let rec = self.bin.record(
            &self.label,
            self.config.seed,
            self.frames,
            llc_steps,
            self.learners.hlc.steps(),
        );
        if let Some(s) = self.sinks.as_mut() {
            s.metrics.write(&rec)?;
        }
        self.metrics.push(rec);
        self.bin = Bin::default();
        Ok(())
    }
}

/// Runs one configuration to its budget.
pub fn train(config: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    Trainer::new(config.clone(), config.variant.name(), out)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Variant;

    fn tiny(variant: Variant) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            variant,
            budget: 3000,
            metrics_every: 1000,
            ..Default::default()
        };
        c.llc.batch_size = 2;
        c.llc.unroll = 8;
        c.hlc.batch_size = 2;
        c.hlc.unroll = 4;
        c
    }

    #[test]
    fn zero_budget_saves_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            budget: 0,
            ..Default::default()
        };
        let out = train(&cfg, Some(dir.path())).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.frames, 0);
        let fresh = Learners::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let loaded = Learners::load(&cfg, &dir.path().join("checkpoint")).unwrap();
        let a = fresh.combined_params().unwrap();
        let b = loaded.combined_params().unwrap();
        for ((n1, t1), (n2, t2)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            assert!(t1
                .data()
                .iter()
                .zip(t2.data())
                .all(|(x, y)| (x - y).abs() < 1e-6));
        }
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }

    #[test]
    fn flat_variant_never_touches_the_llc() {
        let out = train(&tiny(Variant::Flat), None).unwrap();
        assert!(out.learners.llc.is_none());
        assert_eq!(out.llc_steps(), 0);
        assert!(out.hlc_steps() > 0);
        for m in &out.metrics {
            assert_eq!(m.avg_llc_steps, Some(1.0));
            assert_eq!(m.llc_loss, None);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let a = train(&tiny(Variant::H2o2), None).unwrap();
        let b = train(&tiny(Variant::H2o2), None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.llc_steps() > 0);
        let frames: Vec<u64> = a.metrics.iter().map(|m| m.frames).collect();
        assert!(frames.windows(2).all(|w| w[0] <= w[1]));
        assert!(a
            .metrics
            .iter()
            .all(|m| m.avg_llc_steps.is_none_or(|x| (1.0..=7.0).contains(&x))));
    }

    #[test]
    fn every_variant_runs() {
        for v in Variant::ALL {
            let mut cfg = tiny(v);
            cfg.budget = 600;
            if v == Variant::ActionRepeat {
                cfg.runtime.action_repeat = 2;
            }
            let out = train(&cfg, None).unwrap();
            assert!(out.frames >= 600, "{v:?}");
        }
    }
}
