//! Scripted controllers and a fixed corridor for runtime tests.

use h2o2::goal_space::LatentGoal;
use h2o2::gridworld::{Action, GridState, Layout, Observation};
use h2o2::smdp::Controller;
use rand_chacha::ChaCha8Rng;

/// Always walks right. The initiation value is fixed, and attainment is
/// declared after `attain_after` steps of the current option.
pub struct WalkRight {
    pub value: f64,
    pub attain_after: Option<usize>,
    steps: usize,
}

impl WalkRight {
    pub fn new(value: f64, attain_after: Option<usize>) -> Self {
        Self {
            value,
            attain_after,
            steps: 0,
        }
    }
}

impl Controller for WalkRight {
    fn reset(&mut self, _: &Observation) {}
    fn observe(&mut self, _: u8, _: &Observation) {}
    fn initiation_value(&mut self, _: &LatentGoal) -> f64 {
        self.steps = 0;
        self.value
    }
    fn act(&mut self, _: &LatentGoal, _: &GridState, _: &mut ChaCha8Rng) -> u8 {
        self.steps += 1;
        Action::Right.id()
    }
    fn attained(&mut self, _: &LatentGoal, _: &GridState) -> bool {
        self.attain_after.is_some_and(|n| self.steps >= n)
    }
}

/// A 10-cell corridor with the agent at the left end and the apple nine
/// steps to the right.
pub fn corridor(step_limit: u32) -> GridState {
    GridState::from_layout(&Layout {
        width: 12,
        height: 5,
        step_limit,
        view_radius: 2,
        cells: vec![
            "############".into(),
            "#..........#".into(),
            "#.........A#".into(),
            "#..........#".into(),
            "############".into(),
        ],
        agent: [1, 2],
        has_key: false,
        steps: 0,
        seed: 0,
    })
    .unwrap()
}
