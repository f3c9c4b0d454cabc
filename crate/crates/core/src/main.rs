use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use h2o2::gridworld::{GridState, NUM_ACTIONS};
use h2o2::harness::ablation::{run_ablation, Preset};
use h2o2::harness::config::{ExperimentConfig, Variant};
use h2o2::harness::eval::{probe_llc, ProbeReport};
use h2o2::harness::gradsuite::check_networks;
use h2o2::harness::{Learners, Trainer};
use h2o2::hindsight::{
    goal_similarity, relabel, sample_goal_pairs, similarity_filter, HindsightTask,
};
use h2o2::llc::LlcNetworks;
use h2o2::replay::{random_trajectory, read_trajectory_log, Trajectory};

#[derive(Parser)]
#[command(
    name = "h2o2",
    version,
    about = "Hierarchical hybrid offline-online agent"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set runtime.timeout=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> anyhow::Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => {
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
            }
            None => String::new(),
        };
        let mut overrides = extra.to_vec();
        overrides.extend(self.overrides.iter().cloned());
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Ok(ExperimentConfig::from_kv(&text, &overrides)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Flat,
    AutopilotBc,
    AutopilotVtrace,
    ActionRepeat,
}

impl Baseline {
    fn variant(self) -> Variant {
        match self {
            Baseline::Flat => Variant::Flat,
            Baseline::AutopilotBc => Variant::AutopilotBc,
            Baseline::AutopilotVtrace => Variant::AutopilotVtrace,
            Baseline::ActionRepeat => Variant::ActionRepeat,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write metrics plus a final checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Train a baseline variant.
    Baseline {
        #[arg(long, value_enum, default_value = "flat")]
        variant: Baseline,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/baseline")]
        out: PathBuf,
    },
    /// One run per arm of an ablation preset and per seed.
    Ablate {
        #[arg(long, value_enum)]
        preset: Preset,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Re-issue one fixed goal to many LLC instances from the same start.
    ProbeLlc {
        /// Run directory holding `config.kv` and `checkpoint/`.
        #[arg(long)]
        run: PathBuf,
        /// Layout seed for the start state.
        #[arg(long, default_value_t = 0)]
        layout: u64,
        /// Random-walk steps from the start to the goal observation.
        #[arg(long, default_value_t = 3)]
        goal_steps: usize,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full report (including tracks) here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dump relabeled hindsight tasks as JSON.
    RelabelInspect {
        /// Trajectory JSONL log; random play is generated when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Run directory whose goal encoder supplies the embeddings.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        trajectories: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks for every network.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn summarize(metrics: &[h2o2::harness::metrics::MetricsRecord]) {
    if let Some(last) = metrics.last() {
        println!(
            "frames={} success_rate={} avg_llc_steps={} llc_steps={} hlc_steps={}",
            last.frames,
            last.success_rate.map_or("-".into(), |v| format!("{v:.3}")),
            last.avg_llc_steps.map_or("-".into(), |v| format!("{v:.3}")),
            last.llc_steps,
            last.hlc_steps
        );
    }
}

fn train(cfg: ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let outcome = Trainer::new(cfg.clone(), cfg.variant.name(), Some(out))?.run()?;
    summarize(&outcome.metrics);
    println!("wrote {}", out.display());
    Ok(())
}

fn probe(
    run: &Path,
    layout: u64,
    goal_steps: usize,
    instances: usize,
    repetitions: usize,
    seed: u64,
) -> anyhow::Result<ProbeReport> {
    let text = std::fs::read_to_string(run.join("config.kv"))
        .with_context(|| format!("reading {}/config.kv", run.display()))?;
    let cfg = ExperimentConfig::from_kv(&text, &[])?;
    let learners = Learners::load(&cfg, &run.join("checkpoint"))?;
    let Some(llc) = learners.llc else {
        bail!("variant {} has no LLC", cfg.variant.name());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = GridState::generate(layout, cfg.env)?;
    let mut g = start.clone();
    for _ in 0..goal_steps {
        if g.step_id(rng.random_range(0..NUM_ACTIONS as u8))?.done {
            bail!("goal walk ended the episode; try another --layout or --seed");
        }
    }
    Ok(probe_llc(
        &llc.nets,
        &start,
        &g.observe(),
        instances,
        repetitions,
        cfg.runtime.timeout,
        &mut rng,
    )?)
}

#[derive(Serialize)]
struct Inspected {
    generator: String,
    seed: u64,
    len: usize,
    similarity: Vec<f64>,
    admissible: Vec<bool>,
    pairs: Vec<(usize, usize)>,
    tasks: Vec<HindsightTask>,
}

fn relabel_inspect(
    log: Option<&Path>,
    run: Option<&Path>,
    count: usize,
    seed: u64,
) -> anyhow::Result<Vec<Inspected>> {
    let cfg = match run {
        Some(r) => ExperimentConfig::from_kv(&std::fs::read_to_string(r.join("config.kv"))?, &[])?,
        None => ExperimentConfig::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nets = match run {
        Some(r) => match Learners::load(&cfg, &r.join("checkpoint"))?.llc {
            Some(l) => l.nets,
            None => bail!("variant {} has no LLC", cfg.variant.name()),
        },
        None => LlcNetworks::new(cfg.env.feature_dim(), &cfg.llc, &mut rng)?,
    };
    let trajectories: Vec<Trajectory> = match log {
        Some(p) => read_trajectory_log(p)?.into_iter().take(count).collect(),
        None => (0..count)
            .map(|i| random_trajectory(cfg.env, seed + i as u64, cfg.llc.unroll, &mut rng))
            .collect::<h2o2::Result<_>>()?,
    };
    let mut out = Vec::new();
    for t in trajectories {
        let embeddings = t
            .steps
            .iter()
            .map(|s| Ok(nets.encode_goal(&s.observation)?.mean))
            .collect::<h2o2::Result<Vec<_>>>()?;
        let similarity = goal_similarity(&embeddings)?;
        let admissible = similarity_filter(&similarity);
        let pairs = sample_goal_pairs(&t.rewards(), &embeddings, &cfg.llc.goals, &mut rng)?;
        let tasks = pairs
            .iter()
            .map(|&(s, e)| relabel(&t.steps, s, e, cfg.llc.gamma, cfg.llc.goals.max_len))
            .collect();
        out.push(Inspected {
            generator: t.generator.clone(),
            seed: t.seed,
            len: t.len(),
            similarity,
            admissible,
            pairs,
            tasks,
        });
    }
    Ok(out)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train { cfg, out } => train(cfg.load(&[])?, &out)?,
        Command::Baseline { variant, cfg, out } => {
            let v = variant.variant();
            let mut extra = vec![format!("variant={}", v.name())];
            if v == Variant::ActionRepeat {
                extra.push("runtime.action_repeat=2".into());
            }
            train(cfg.load(&extra)?, &out)?
        }
        Command::Ablate {
            preset,
            seeds,
            cfg,
            out,
        } => {
            let base = cfg.load(&[])?;
            for r in run_ablation(preset, &base, &seeds, Some(&out))? {
                print!("{} seed{}: ", r.arm, r.seed);
                summarize(&r.metrics);
            }
            println!("wrote {}", out.display());
        }
        Command::ProbeLlc {
            run,
            layout,
            goal_steps,
            instances,
            repetitions,
            seed,
            report,
        } => {
            let r = probe(&run, layout, goal_steps, instances, repetitions, seed)?;
            let mean_exec =
                r.executions.iter().sum::<usize>() as f64 / r.executions.len().max(1) as f64;
            println!(
                "instances={} attainment_rate={:.3} mean_executions={mean_exec:.2}",
                r.attained.len(),
                r.attainment_rate
            );
            if let Some(p) = report {
                std::fs::write(&p, serde_json::to_string(&r)?)?;
            }
        }
        Command::RelabelInspect {
            log,
            run,
            trajectories,
            seed,
        } => {
            let dump = relabel_inspect(log.as_deref(), run.as_deref(), trajectories, seed)?;
            println!("{}", serde_json::to_string_pretty(&dump)?);
        }
        Command::Gradcheck { seeds, tolerance } => {
            let mut ok = true;
            for seed in 0..seeds {
                for c in check_networks(seed)? {
                    let pass = c.max_relative_error <= tolerance;
                    ok &= pass;
                    println!(
                        "{} seed={} params={} max_rel_err={:.3e} {}",
                        c.network,
                        c.seed,
                        c.parameters,
                        c.max_relative_error,
                        if pass { "ok" } else { "FAIL" }
                    );
                }
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
