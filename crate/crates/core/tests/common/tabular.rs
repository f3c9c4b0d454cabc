//! A 4-state, 2-action MDP and an exact oracle for the clipped-IS V-Trace
//! fixed point, independent of the library code.

use rand::Rng;

pub const STATES: usize = 4;
pub const ACTIONS: usize = 2;

pub struct Mdp {
    /// `p[s][a][s']`
    pub p: [[[f64; STATES]; ACTIONS]; STATES],
    pub r: [[f64; ACTIONS]; STATES],
    pub gamma: f64,
}

pub fn mdp() -> Mdp {
    Mdp {
        p: [
            [[0.1, 0.6, 0.2, 0.1], [0.7, 0.1, 0.1, 0.1]],
            [[0.2, 0.1, 0.6, 0.1], [0.5, 0.3, 0.1, 0.1]],
            [[0.1, 0.1, 0.1, 0.7], [0.3, 0.4, 0.2, 0.1]],
            [[0.6, 0.2, 0.1, 0.1], [0.1, 0.1, 0.2, 0.6]],
        ],
        r: [[0.0, 0.5], [0.2, -0.3], [1.0, 0.0], [-0.5, 2.0]],
        gamma: 0.9,
    }
}

/// Target policy; several actions have pi/mu above 1.
pub const PI: [[f64; ACTIONS]; STATES] = [[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.4, 0.6]];
/// Behavior policy.
pub const MU: [[f64; ACTIONS]; STATES] = [[0.5, 0.5], [0.6, 0.4], [0.3, 0.7], [0.5, 0.5]];

/// `min(rho_bar * mu, pi)`, renormalized per state.
pub fn clipped_policy(rho_bar: f64) -> [[f64; ACTIONS]; STATES] {
    let mut out = [[0.0; ACTIONS]; STATES];
    for s in 0..STATES {
        let raw: Vec<f64> = (0..ACTIONS)
            .map(|a| (rho_bar * MU[s][a]).min(PI[s][a]))
            .collect();
        let z: f64 = raw.iter().sum();
        for a in 0..ACTIONS {
            out[s][a] = raw[a] / z;
        }
    }
    out
}

/// Policy evaluation by repeated Bellman backups until the update is below
/// 1e-13.
pub fn evaluate(m: &Mdp, policy: &[[f64; ACTIONS]; STATES]) -> [f64; STATES] {
    let mut v = [0.0; STATES];
    loop {
        let mut next = [0.0; STATES];
        for s in 0..STATES {
            for a in 0..ACTIONS {
                let ev: f64 = (0..STATES).map(|s2| m.p[s][a][s2] * v[s2]).sum();
                next[s] += policy[s][a] * (m.r[s][a] + m.gamma * ev);
            }
        }
        let diff = (0..STATES)
            .map(|s| (next[s] - v[s]).abs())
            .fold(0.0, f64::max);
        v = next;
        if diff < 1e-13 {
            return v;
        }
    }
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub struct Unroll {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// State after the last step.
    pub last: usize,
}

/// One behavior-policy unroll of `len` steps from a uniform start state.
pub fn unroll(m: &Mdp, len: usize, rng: &mut impl Rng) -> Unroll {
    let mut s = rng.random_range(0..STATES);
    let mut u = Unroll {
        states: Vec::with_capacity(len),
        actions: Vec::with_capacity(len),
        rewards: Vec::with_capacity(len),
        last: 0,
    };
    for _ in 0..len {
        let a = draw(&MU[s], rng);
        u.states.push(s);
        u.actions.push(a);
        u.rewards.push(m.r[s][a]);
        s = draw(&m.p[s][a], rng);
    }
    u.last = s;
    u
}
