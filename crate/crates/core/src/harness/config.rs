//! Experiment configuration.
//!
//! On disk a config is a UTF-8 file of `dotted.key = value` lines; `#` starts
//! a comment. Values are read as JSON when they parse as JSON and as bare
//! strings otherwise, so `variant = flat` and `variant = "flat"` agree. Keys
//! name fields of [`ExperimentConfig`]; anything unknown is rejected.
//!
//! ```
//! use h2o2::harness::config::ExperimentConfig;
//!
//! let cfg = ExperimentConfig::from_kv("runtime.timeout = 16\nllc.alpha = 0.5", &[]).unwrap();
//! assert_eq!(cfg.runtime.timeout, 16);
//! assert_eq!(cfg.llc.alpha, 0.5);
//! ```

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gridworld::EnvConfig;
use crate::hlc::HlcConfig;
use crate::llc::{LlcConfig, LlcMode};
use crate::smdp::RuntimeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    H2o2,
    Flat,
    AutopilotBc,
    AutopilotVtrace,
    ActionRepeat,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::H2o2,
        Variant::Flat,
        Variant::AutopilotBc,
        Variant::AutopilotVtrace,
        Variant::ActionRepeat,
    ];

    /// How the LLC is trained, or `None` when there is no LLC.
    pub fn llc_mode(self) -> Option<LlcMode> {
        match self {
            Variant::H2o2 => Some(LlcMode::GoalConditioned),
            Variant::AutopilotBc => Some(LlcMode::AutopilotBc),
            Variant::AutopilotVtrace => Some(LlcMode::AutopilotVtrace),
            Variant::Flat | Variant::ActionRepeat => None,
        }
    }

    /// Whether the HLC can issue options.
    pub fn options(self) -> bool {
        self.llc_mode().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::H2o2 => "h2o2",
            Variant::Flat => "flat",
            Variant::AutopilotBc => "autopilot_bc",
            Variant::AutopilotVtrace => "autopilot_vtrace",
            Variant::ActionRepeat => "action_repeat",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Environment steps to collect.
    pub budget: u64,
    /// Environment steps between learner updates (one LLC and one HLC step).
    pub learn_every: u64,
    /// Width of a metrics bin in environment steps.
    pub metrics_every: u64,
    /// Checkpoint cadence in environment steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Trajectories kept for the LLC.
    pub replay_capacity: usize,
    /// Unrolls kept for the HLC's replay share.
    pub hlc_replay_capacity: usize,
    pub env: EnvConfig,
    pub runtime: RuntimeConfig,
    pub llc: LlcConfig,
    pub hlc: HlcConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::H2o2,
            seed: 0,
            budget: 2_000_000,
            learn_every: 64,
            metrics_every: 50_000,
            checkpoint_every: 0,
            replay_capacity: 2000,
            hlc_replay_capacity: 2000,
            env: EnvConfig::default(),
            runtime: RuntimeConfig::default(),
            llc: LlcConfig::default(),
            hlc: HlcConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.runtime.validate()?;
        self.llc.validate()?;
        self.hlc.validate()?;
        if self.learn_every == 0 || self.metrics_every == 0 {
            return Err(Error::Config(
                "learn_every and metrics_every must be positive".into(),
            ));
        }
        if self.replay_capacity == 0 || self.hlc_replay_capacity == 0 {
            return Err(Error::Config("replay capacities must be positive".into()));
        }
        if self.variant.options() && self.llc.goal_dim != self.hlc.goal_dim {
            return Err(Error::Config(format!(
                "llc.goal_dim {} differs from hlc.goal_dim {}",
                self.llc.goal_dim, self.hlc.goal_dim
            )));
        }
        if self.runtime.action_repeat != 1 && self.variant != Variant::ActionRepeat {
            return Err(Error::Config(
                "runtime.action_repeat > 1 needs variant action_repeat".into(),
            ));
        }
        Ok(())
    }

    /// Defaults, then the lines of `text`, then `overrides` (each
    /// `key=value`), in that order.
    pub fn from_kv(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            set_path(&mut tree, k.trim(), v.trim())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}`: expected key=value")))?;
            set_path(&mut tree, k.trim(), v.trim())?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override to an existing config.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        self.with_all(&[(key, value)])
    }

    /// Applies several overrides together; validation runs once at the end.
    pub fn with_all<K: AsRef<str>, V: AsRef<str>>(&self, pairs: &[(K, V)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (k, v) in pairs {
            set_path(&mut tree, k.as_ref(), v.as_ref())?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every leaf as a `key = value` line; reads back through [`Self::from_kv`].
    pub fn to_kv(&self) -> Result<String> {
        let mut out = String::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    }
    if node.is_object() {
        return Err(Error::Config(format!("`{key}` is a section, not a value")));
    }
    *node = parse_value(raw);
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push_str(&format!("{prefix} = {leaf}\n")),
    }
}
