//! Procedurally generated key–door–apple gridworld.
//!
//! Every layout is a walled rectangle split in two rooms by a wall with a
//! single closed door. The agent and the key start in one room, the apple
//! sits in the other. Walking onto the key picks it up, walking into the
//! door while holding the key opens it, and walking onto the apple ends the
//! episode with reward 1. Every other transition has reward 0.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 5;

/// Channels of the egocentric observation window, one-hot per cell.
pub const NUM_CHANNELS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Noop = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Noop,
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or(Error::InvalidAction(id))
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Action::Noop => (0, 0),
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Empty,
    Wall,
    Key,
    ClosedDoor,
    OpenDoor,
    Apple,
}

impl Cell {
    fn channel(self) -> u8 {
        match self {
            Cell::Empty => 0,
            Cell::Wall => 1,
            Cell::Key => 2,
            Cell::ClosedDoor => 3,
            Cell::OpenDoor => 4,
            Cell::Apple => 5,
        }
    }

    fn to_char(self) -> char {
        match self {
            Cell::Empty => '.',
            Cell::Wall => '#',
            Cell::Key => 'K',
            Cell::ClosedDoor => 'D',
            Cell::OpenDoor => 'O',
            Cell::Apple => 'A',
        }
    }

    fn from_char(c: char) -> Option<Self> {
        Some(match c {
            '.' => Cell::Empty,
            '#' => Cell::Wall,
            'K' => Cell::Key,
            'D' => Cell::ClosedDoor,
            'O' => Cell::OpenDoor,
            'A' => Cell::Apple,
            _ => return None,
        })
    }
}

const AGENT_CHANNEL: u8 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub step_limit: u32,
    pub view_radius: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 9,
            height: 9,
            step_limit: 200,
            view_radius: 2,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 5 || self.height < 5 {
            return Err(Error::Config(format!(
                "grid {}x{} is too small to place a wall, door, key, agent and apple (min 5x5)",
                self.width, self.height
            )));
        }
        if self.step_limit < 1 {
            return Err(Error::Config("step limit must be at least 1".into()));
        }
        Ok(())
    }

    pub fn window_side(&self) -> usize {
        2 * self.view_radius + 1
    }

    /// Length of [`Observation::features`].
    pub fn feature_dim(&self) -> usize {
        observation_dim(self.view_radius)
    }
}

pub fn observation_dim(view_radius: usize) -> usize {
    let side = 2 * view_radius + 1;
    side * side * NUM_CHANNELS + 1 + NUM_ACTIONS
}

/// What the agent sees: an egocentric window, whether it holds the key, and
/// the action it took last.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    /// Active channel per window cell, row-major, agent at the centre.
    pub window: Vec<u8>,
    pub has_key: bool,
    pub prev_action: Option<Action>,
}

impl Observation {
    pub fn feature_dim(&self) -> usize {
        self.window.len() * NUM_CHANNELS + 1 + NUM_ACTIONS
    }

    /// Writes the flat 0/1 feature vector into `out`.
    pub fn write_features(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.feature_dim());
        out.fill(0.0);
        for (i, &ch) in self.window.iter().enumerate() {
            out[i * NUM_CHANNELS + ch as usize] = 1.0;
        }
        let base = self.window.len() * NUM_CHANNELS;
        if self.has_key {
            out[base] = 1.0;
        }
        if let Some(a) = self.prev_action {
            out[base + 1 + a.id() as usize] = 1.0;
        }
    }

    pub fn features(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.feature_dim()];
        self.write_features(&mut v);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    config: EnvConfig,
    cells: Vec<Cell>,
    agent: (usize, usize),
    has_key: bool,
    steps: u32,
    prev_action: Option<Action>,
    done: bool,
    seed: u64,
}

impl GridState {
    /// Deterministic layout for `seed`.
    pub fn generate(seed: u64, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (config.width, config.height);
        let mut cells = vec![Cell::Empty; w * h];
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                    cells[y * w + x] = Cell::Wall;
                }
            }
        }
        let split = rng.random_range(2..=w - 3);
        for y in 1..h - 1 {
            cells[y * w + split] = Cell::Wall;
        }
        let door_y = rng.random_range(1..=h - 2);
        cells[door_y * w + split] = Cell::ClosedDoor;

        let left: Vec<(usize, usize)> = (1..h - 1)
            .flat_map(|y| (1..split).map(move |x| (x, y)))
            .collect();
        let right: Vec<(usize, usize)> = (1..h - 1)
            .flat_map(|y| (split + 1..w - 1).map(move |x| (x, y)))
            .collect();
        let (start_room, apple_room) = if rng.random_bool(0.5) {
            (left, right)
        } else {
            (right, left)
        };
        if start_room.len() < 2 || apple_room.is_empty() {
            return Err(Error::Config(
                "rooms too small for key, agent and apple".into(),
            ));
        }
        let ai = rng.random_range(0..start_room.len());
        let mut ki = rng.random_range(0..start_room.len() - 1);
        if ki >= ai {
            ki += 1;
        }
        let agent = start_room[ai];
        let key = start_room[ki];
        let apple = apple_room[rng.random_range(0..apple_room.len())];
        cells[key.1 * w + key.0] = Cell::Key;
        cells[apple.1 * w + apple.0] = Cell::Apple;

        Ok(Self {
            config,
            cells,
            agent,
            has_key: false,
            steps: 0,
            prev_action: None,
            done: false,
            seed,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn has_key(&self) -> bool {
        self.has_key
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn cell(&self, x: usize, y: usize) -> Cell {
        self.cells[y * self.config.width + x]
    }

    fn cell_at(&self, x: i64, y: i64) -> Cell {
        let (w, h) = (self.config.width as i64, self.config.height as i64);
        if x < 0 || y < 0 || x >= w || y >= h {
            Cell::Wall
        } else {
            self.cells[(y * w + x) as usize]
        }
    }

    pub fn find(&self, target: Cell) -> Option<(usize, usize)> {
        let w = self.config.width;
        self.cells
            .iter()
            .position(|&c| c == target)
            .map(|i| (i % w, i / w))
    }

    /// Applies one primitive action.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Terminal);
        }
        let (dx, dy) = action.delta();
        let (tx, ty) = (
            self.agent.0 as i64 + dx as i64,
            self.agent.1 as i64 + dy as i64,
        );
        let mut reward = 0.0;
        if (dx, dy) != (0, 0) {
            let target = self.cell_at(tx, ty);
            let idx = ty as usize * self.config.width + tx as usize;
            let moved = match target {
                Cell::Wall => false,
                Cell::ClosedDoor if !self.has_key => false,
                Cell::ClosedDoor => {
                    self.cells[idx] = Cell::OpenDoor;
                    true
                }
                Cell::Key => {
                    self.has_key = true;
                    self.cells[idx] = Cell::Empty;
                    true
                }
                Cell::Apple => {
                    reward = 1.0;
                    self.done = true;
                    true
                }
                Cell::Empty | Cell::OpenDoor => true,
            };
            if moved {
                self.agent = (tx as usize, ty as usize);
            }
        }
        self.steps += 1;
        self.prev_action = Some(action);
        if self.steps >= self.config.step_limit {
            self.done = true;
        }
        Ok(StepOutcome {
            reward,
            done: self.done,
        })
    }

    /// Step by raw action id.
    pub fn step_id(&mut self, id: u8) -> Result<StepOutcome> {
        self.step(Action::from_id(id)?)
    }

    /// Egocentric window; cells beyond the border read as wall.
    pub fn observe(&self) -> Observation {
        let r = self.config.view_radius as i64;
        let side = self.config.window_side();
        let mut window = Vec::with_capacity(side * side);
        let (ax, ay) = (self.agent.0 as i64, self.agent.1 as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx == 0 && dy == 0 {
                    window.push(AGENT_CHANNEL);
                } else {
                    window.push(self.cell_at(ax + dx, ay + dy).channel());
                }
            }
        }
        Observation {
            window,
            has_key: self.has_key,
            prev_action: self.prev_action,
        }
    }

    /// Breadth-first search over (position, inventory, door state) for the
    /// shortest action sequence reaching a state that satisfies `goal`.
    /// Returns `Some(vec![])` if the current state already does.
    pub fn plan(&self, max_depth: usize, goal: impl Fn(&GridState) -> bool) -> Option<Vec<Action>> {
        if goal(self) {
            return Some(Vec::new());
        }
        type Key = ((usize, usize), bool, Vec<Cell>);
        let key = |s: &GridState| -> Key { (s.agent, s.has_key, s.cells.clone()) };
        let mut parent: HashMap<Key, (Key, Action)> = HashMap::new();
        let mut queue = VecDeque::new();
        let root = key(self);
        let mut seen = std::collections::HashSet::new();
        seen.insert(root.clone());
        queue.push_back((self.clone(), 0usize));
        while let Some((s, depth)) = queue.pop_front() {
            if depth >= max_depth {
                continue;
            }
            for a in &Action::ALL[1..] {
                let mut next = s.clone();
                if next.step(*a).is_err() {
                    continue;
                }
                let k = key(&next);
                if !seen.insert(k.clone()) {
                    continue;
                }
                parent.insert(k.clone(), (key(&s), *a));
                if goal(&next) {
                    let mut actions = vec![*a];
                    let mut cur = key(&s);
                    while cur != root {
                        let (p, pa) = parent[&cur].clone();
                        actions.push(pa);
                        cur = p;
                    }
                    actions.reverse();
                    return Some(actions);
                }
                if !next.done {
                    queue.push_back((next, depth + 1));
                }
            }
        }
        None
    }

    /// Shortest plan to the apple, ignoring the step limit.
    pub fn solve(&self) -> Option<Vec<Action>> {
        let mut unlimited = self.clone();
        unlimited.config.step_limit = u32::MAX;
        unlimited.plan(self.config.width * self.config.height * 4, |s| {
            s.cell(s.agent.0, s.agent.1) == Cell::Apple
        })
    }

    pub fn to_layout(&self) -> Layout {
        let w = self.config.width;
        Layout {
            width: self.config.width,
            height: self.config.height,
            step_limit: self.config.step_limit,
            view_radius: self.config.view_radius,
            cells: self
                .cells
                .chunks(w)
                .map(|row| row.iter().map(|c| c.to_char()).collect())
                .collect(),
            agent: [self.agent.0, self.agent.1],
            has_key: self.has_key,
            steps: self.steps,
            seed: self.seed,
        }
    }

    pub fn from_layout(layout: &Layout) -> Result<Self> {
        let config = EnvConfig {
            width: layout.width,
            height: layout.height,
            step_limit: layout.step_limit,
            view_radius: layout.view_radius,
        };
        config.validate()?;
        if layout.cells.len() != layout.height {
            return Err(Error::Config(format!(
                "layout has {} rows, expected {}",
                layout.cells.len(),
                layout.height
            )));
        }
        let mut cells = Vec::with_capacity(layout.width * layout.height);
        for row in &layout.cells {
            let parsed: Option<Vec<Cell>> = row.chars().map(Cell::from_char).collect();
            let parsed = parsed.ok_or_else(|| Error::Config(format!("bad layout row `{row}`")))?;
            if parsed.len() != layout.width {
                return Err(Error::Config(format!("layout row `{row}` has wrong width")));
            }
            cells.extend(parsed);
        }
        let agent = (layout.agent[0], layout.agent[1]);
        if agent.0 >= layout.width || agent.1 >= layout.height {
            return Err(Error::Config("agent outside the grid".into()));
        }
        Ok(Self {
            config,
            cells,
            agent,
            has_key: layout.has_key,
            steps: layout.steps,
            prev_action: None,
            done: layout.steps >= layout.step_limit,
            seed: layout.seed,
        })
    }
}

/// JSON-friendly dump of a [`GridState`] used for fixtures.
///
/// Cell legend: `#` wall, `.` empty, `K` key, `D` closed door, `O` open door,
/// `A` apple. The agent is stored separately.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub step_limit: u32,
    pub view_radius: usize,
    pub cells: Vec<String>,
    pub agent: [usize; 2],
    pub has_key: bool,
    pub steps: u32,
    pub seed: u64,
}
