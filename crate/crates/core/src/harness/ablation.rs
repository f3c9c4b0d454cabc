//! Ablation presets: one run per arm and seed, sharing everything else.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::MetricsRecord;
use super::train::Trainer;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Timeout,
    Discount,
    Beta,
    GoalDim,
    ActionRepeat,
}

/// One arm: a label and the overrides it applies.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

fn arm(label: String, overrides: &[(&str, String)]) -> Arm {
    Arm {
        label,
        overrides: overrides
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    }
}

impl Preset {
    pub fn arms(self) -> Vec<Arm> {
        match self {
            Preset::Timeout => [7, 16, 32]
                .iter()
                .map(|t| {
                    arm(
                        format!("timeout={t}"),
                        &[("runtime.timeout", t.to_string())],
                    )
                })
                .collect(),
            Preset::Discount => [0.9, 0.99, 0.997]
                .iter()
                .map(|g| arm(format!("discount={g}"), &[("hlc.gamma", g.to_string())]))
                .collect(),
            Preset::Beta => [1e-9, 1e-3, 1e-2, 1e-1, 1.0]
                .iter()
                .map(|b| arm(format!("beta={b:e}"), &[("llc.beta", b.to_string())]))
                .collect(),
            Preset::GoalDim => [4, 8, 12]
                .iter()
                .map(|d| {
                    arm(
                        format!("goal_dim={d}"),
                        &[
                            ("llc.goal_dim", d.to_string()),
                            ("hlc.goal_dim", d.to_string()),
                        ],
                    )
                })
                .collect(),
            Preset::ActionRepeat => [1, 2, 3]
                .iter()
                .map(|r| {
                    arm(
                        format!("action_repeat={r}"),
                        &[
                            ("variant", "action_repeat".into()),
                            ("runtime.action_repeat", r.to_string()),
                        ],
                    )
                })
                .collect(),
        }
    }
}

impl Arm {
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        base.with_all(&self.overrides)
    }
}

#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs every arm for every seed. With `out`, each run writes its own
/// metrics stream under `<out>/<arm>/seed<k>/`; streams share the binning,
/// so they overlay directly.
pub fn run_ablation(
    preset: Preset,
    base: &ExperimentConfig,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<ArmRun>> {
    let mut runs = Vec::new();
    for a in preset.arms() {
        for &seed in seeds {
            let mut cfg = a.apply(base)?;
            cfg.seed = seed;
            let dir = out.map(|o| o.join(&a.label).join(format!("seed{seed}")));
            let outcome = Trainer::new(cfg, &a.label, dir.as_deref())?.run()?;
            runs.push(ArmRun {
                arm: a.label.clone(),
                seed,
                metrics: outcome.metrics,
            });
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(p: Preset) -> Vec<String> {
        p.arms().into_iter().map(|a| a.label).collect()
    }

    #[test]
    fn preset_arms() {
        assert_eq!(
            labels(Preset::Timeout),
            ["timeout=7", "timeout=16", "timeout=32"]
        );
        assert_eq!(
            labels(Preset::Discount),
            ["discount=0.9", "discount=0.99", "discount=0.997"]
        );
        assert_eq!(
            labels(Preset::Beta),
            [
                "beta=1e-9",
                "beta=1e-3",
                "beta=1e-2",
                "beta=1e-1",
                "beta=1e0"
            ]
        );
        let base = ExperimentConfig::default();
        for p in [
            Preset::Timeout,
            Preset::Discount,
            Preset::Beta,
            Preset::GoalDim,
            Preset::ActionRepeat,
        ] {
            for a in p.arms() {
                a.apply(&base).unwrap();
            }
        }
        let t32 = Preset::Timeout.arms()[2].apply(&base).unwrap();
        assert_eq!(t32.runtime.timeout, 32);
        let b = Preset::Beta.arms()[0].apply(&base).unwrap();
        assert_eq!(b.llc.beta, 1e-9);
    }
}
