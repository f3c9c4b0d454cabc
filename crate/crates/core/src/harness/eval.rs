//! Goal-reaching evaluation and the LLC goal-following probe.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::goal_space::LatentGoal;
use crate::gridworld::{EnvConfig, GridState, Observation, NUM_ACTIONS};
use crate::llc::{ActingHead, LlcActor, LlcMode, LlcNetworks};
use crate::smdp::{Controller, Episode, RuntimeConfig, SmdpAction};

/// Ground-truth attainment: same egocentric view and key status. The
/// previous-action part of an observation is ignored.
pub fn observation_matches(a: &Observation, b: &Observation) -> bool {
    a.window == b.window && a.has_key == b.has_key
}

/// Start state plus a goal observation reached from it by a random walk.
#[derive(Clone, Debug)]
pub struct GoalTask {
    pub start: GridState,
    pub goal: Observation,
    /// Random-walk steps between start and goal.
    pub steps: usize,
}

/// Tasks from uniform-random play on fresh layouts: walk a random prefix,
/// then `1..=max_steps` more steps to pick the goal. Goals that already match
/// the start are redrawn.
pub fn sample_goal_tasks(
    env: EnvConfig,
    count: usize,
    max_steps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<GoalTask>> {
    let mut tasks = Vec::with_capacity(count);
    while tasks.len() < count {
        let mut g = GridState::generate(rng.random(), env)?;
        let prefix = rng.random_range(0..32);
        for _ in 0..prefix {
            if g.is_done() {
                break;
            }
            g.step_id(rng.random_range(0..NUM_ACTIONS as u8))?;
        }
        if g.is_done() {
            continue;
        }
        let start = g.clone();
        let steps = rng.random_range(1..=max_steps);
        let mut ok = true;
        for _ in 0..steps {
            if g.step_id(rng.random_range(0..NUM_ACTIONS as u8))?.done {
                ok = false;
                break;
            }
        }
        let goal = g.observe();
        if ok && !observation_matches(&goal, &start.observe()) {
            tasks.push(GoalTask { start, goal, steps });
        }
    }
    Ok(tasks)
}

/// Fraction of tasks where the LLC, acting with `head` toward the encoded
/// goal, shows the goal observation within `horizon` steps.
pub fn goal_reaching_rate(
    nets: &LlcNetworks,
    head: ActingHead,
    tasks: &[GoalTask],
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut hits = 0usize;
    for task in tasks {
        let goal = nets.goal_of(&task.goal)?;
        let mut actor = LlcActor::new(nets, LlcMode::GoalConditioned);
        actor.head = head;
        let mut g = task.start.clone();
        actor.reset(&g.observe());
        for _ in 0..horizon {
            let a = actor.act(&goal, &g, rng);
            let out = g.step_id(a)?;
            let obs = g.observe();
            if observation_matches(&obs, &task.goal) {
                hits += 1;
                break;
            }
            if out.done {
                break;
            }
            actor.observe(a, &obs);
        }
    }
    Ok(hits as f64 / tasks.len().max(1) as f64)
}

/// Uniform-random controller that never declares attainment.
pub struct RandomWalk;

impl Controller for RandomWalk {
    fn reset(&mut self, _: &Observation) {}
    fn observe(&mut self, _: u8, _: &Observation) {}
    fn initiation_value(&mut self, _: &LatentGoal) -> f64 {
        f64::INFINITY
    }
    fn act(&mut self, _: &LatentGoal, _: &GridState, rng: &mut ChaCha8Rng) -> u8 {
        rng.random_range(0..NUM_ACTIONS as u8)
    }
    fn attained(&mut self, _: &LatentGoal, _: &GridState) -> bool {
        false
    }
}

/// Runs the wrapped controller without an initiation veto, records agent
/// positions, and watches for the true goal observation.
struct Probed<'g, C> {
    inner: C,
    goal: &'g Observation,
    track: Vec<(usize, usize)>,
    reached: bool,
}

impl<C: Controller> Controller for Probed<'_, C> {
    fn reset(&mut self, obs: &Observation) {
        self.inner.reset(obs)
    }
    fn observe(&mut self, action: u8, obs: &Observation) {
        self.inner.observe(action, obs)
    }
    fn initiation_value(&mut self, _: &LatentGoal) -> f64 {
        f64::INFINITY
    }
    fn act(&mut self, goal: &LatentGoal, state: &GridState, rng: &mut ChaCha8Rng) -> u8 {
        self.inner.act(goal, state, rng)
    }
    fn attained(&mut self, goal: &LatentGoal, state: &GridState) -> bool {
        self.track.push(state.agent());
        if observation_matches(&state.observe(), self.goal) {
            self.reached = true;
            return true;
        }
        self.inner.attained(goal, state)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    /// Agent position per environment step, starting position first.
    pub tracks: Vec<Vec<(usize, usize)>>,
    /// Option executions per instance.
    pub executions: Vec<usize>,
    pub attained: Vec<bool>,
    pub attainment_rate: f64,
}

/// `instances` independent runs from `start`, each re-issuing `goal` after
/// every option termination, up to `repetitions` options.
pub fn probe<C: Controller>(
    mut make: impl FnMut() -> C,
    start: &GridState,
    goal_obs: &Observation,
    goal: &LatentGoal,
    instances: usize,
    repetitions: usize,
    timeout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeReport> {
    let runtime = RuntimeConfig {
        timeout,
        ..RuntimeConfig::default()
    };
    let mut report = ProbeReport {
        tracks: Vec::with_capacity(instances),
        executions: Vec::with_capacity(instances),
        attained: Vec::with_capacity(instances),
        attainment_rate: 0.0,
    };
    for _ in 0..instances {
        let mut c = Probed {
            inner: make(),
            goal: goal_obs,
            track: vec![start.agent()],
            reached: false,
        };
        let mut ep = Episode::start(start.clone(), runtime, &mut c)?;
        let mut n = 0;
        while n < repetitions && !c.reached && !ep.is_done() {
            ep.execute(SmdpAction::Option(goal.clone()), &mut c, rng)?;
            n += 1;
        }
        report.tracks.push(c.track);
        report.executions.push(n);
        report.attained.push(c.reached);
    }
    let hits = report.attained.iter().filter(|&&a| a).count();
    report.attainment_rate = hits as f64 / instances.max(1) as f64;
    Ok(report)
}

/// The goal-following probe for a learned LLC.
pub fn probe_llc(
    nets: &LlcNetworks,
    start: &GridState,
    goal_obs: &Observation,
    instances: usize,
    repetitions: usize,
    timeout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeReport> {
    let goal = nets.goal_of(goal_obs)?;
    probe(
        || LlcActor::new(nets, LlcMode::GoalConditioned),
        start,
        goal_obs,
        &goal,
        instances,
        repetitions,
        timeout,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llc::LlcConfig;
    use rand::SeedableRng;

    #[test]
    fn tasks_are_nontrivial_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tasks = sample_goal_tasks(EnvConfig::default(), 50, 16, &mut rng).unwrap();
        assert_eq!(tasks.len(), 50);
        for t in &tasks {
            assert!((1..=16).contains(&t.steps));
            assert!(!observation_matches(&t.start.observe(), &t.goal));
        }
    }

    #[test]
    fn probe_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = LlcConfig::default();
        let nets = LlcNetworks::new(EnvConfig::default().feature_dim(), &cfg, &mut rng).unwrap();
        let start = GridState::generate(5, EnvConfig::default()).unwrap();
        let goal_obs = start.observe();
        let r = probe_llc(&nets, &start, &goal_obs, 10, 20, 7, &mut rng).unwrap();
        assert_eq!(r.tracks.len(), 10);
        assert!(r.executions.iter().all(|&n| (1..=20).contains(&n)));
        for (track, &n) in r.tracks.iter().zip(&r.executions) {
            assert!(track.len() <= 1 + 7 * n);
        }
    }
}
