//! Frame-stack history encoder shared by both controllers.
//!
//! Each frame is embedded by a one-layer `tanh` encoder. The agent state is
//! an MLP over the last `k` embeddings, each paired with a one-hot side input
//! (the previous action for the LLC, the termination reason for the HLC).
//! Slots before the start of an episode are all-zero.

use std::collections::VecDeque;

use h2o2_autodiff::{Activation, Mlp, OutputInit, ParameterSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Frame embedding width (`c_t`).
    pub embedding: usize,
    /// Frames in the history stack.
    pub history: usize,
    pub hidden: usize,
    /// Agent-state width (`b_t`).
    pub state: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embedding: 64,
            history: 4,
            hidden: 128,
            state: 64,
        }
    }
}

/// One entry of a history stack: which embedded frame (if any) and which
/// side one-hot (if any).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Slot {
    pub frame: Option<usize>,
    pub side: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FrameStackEncoder {
    pub frame: Mlp,
    pub history: Mlp,
    pub k: usize,
    pub embedding: usize,
    pub side: usize,
}

impl FrameStackEncoder {
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        input: usize,
        side: usize,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let frame = Mlp::new(
            params,
            &format!("{prefix}.frame"),
            &[input, config.embedding],
            Activation::Tanh,
            OutputInit::Default,
            rng,
        )?;
        let history = Mlp::new(
            params,
            &format!("{prefix}.history"),
            &[
                config.history * (config.embedding + side),
                config.hidden,
                config.state,
            ],
            Activation::Tanh,
            OutputInit::Default,
            rng,
        )?;
        Ok(Self {
            frame,
            history,
            k: config.history,
            embedding: config.embedding,
            side,
        })
    }

    pub fn state_size(&self) -> usize {
        self.history.output_size()
    }

    /// `tanh` frame embeddings for a `[n, input]` feature matrix.
    pub fn embed(&self, tape: &mut Tape<'_>, features: Tensor) -> Result<Var> {
        let x = tape.constant(features);
        let h = self.frame.forward(tape, x)?;
        Ok(tape.tanh(h))
    }

    /// Agent states for `slots.len()` rows; `slots[r][j]` is the `j`-th most
    /// recent entry of row `r`.
    pub fn states(&self, tape: &mut Tape<'_>, embedded: Var, slots: &[Vec<Slot>]) -> Result<Var> {
        let rows = slots.len();
        let mut parts = Vec::with_capacity(2 * self.k);
        for j in 0..self.k {
            let idx: Vec<usize> = slots.iter().map(|s| s[j].frame.unwrap_or(0)).collect();
            let gathered = tape.gather_rows(embedded, &idx)?;
            let mut mask = vec![1.0; rows * self.embedding];
            let mut side = vec![0.0; rows * self.side];
            for (r, s) in slots.iter().enumerate() {
                if s[j].frame.is_none() {
                    mask[r * self.embedding..(r + 1) * self.embedding].fill(0.0);
                }
                if let Some(a) = s[j].side {
                    side[r * self.side + a] = 1.0;
                }
            }
            let m = tape.constant(Tensor::matrix(rows, self.embedding, mask)?);
            parts.push(tape.mul(gathered, m)?);
            parts.push(tape.constant(Tensor::matrix(rows, self.side, side)?));
        }
        let x = tape.concat(&parts)?;
        let h = self.history.forward(tape, x)?;
        Ok(tape.tanh(h))
    }

    pub fn embed_row(&self, params: &ParameterSet, features: &[f64]) -> Vec<f64> {
        let mut c = self.frame.eval_row(params, features);
        Activation::Tanh.apply_slice(&mut c);
        c
    }

    pub fn state_row(&self, params: &ParameterSet, stack: &StackTracker) -> Vec<f64> {
        let mut b = self
            .history
            .eval_row(params, &stack.input_row(self.embedding, self.side));
        Activation::Tanh.apply_slice(&mut b);
        b
    }
}

/// Rolling window of the last `k` (embedding, side) pairs during acting.
#[derive(Clone, Debug)]
pub struct StackTracker {
    frames: VecDeque<(Vec<f64>, Option<usize>)>,
    k: usize,
}

impl StackTracker {
    pub fn new(k: usize) -> Self {
        Self {
            frames: VecDeque::with_capacity(k + 1),
            k,
        }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, embedding: Vec<f64>, side: Option<usize>) {
        self.frames.push_front((embedding, side));
        self.frames.truncate(self.k);
    }

    pub fn latest(&self) -> Option<&[f64]> {
        self.frames.front().map(|(e, _)| e.as_slice())
    }

    /// Most recent first, zero-padded, matching [`FrameStackEncoder::states`].
    pub fn input_row(&self, embedding: usize, side: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.k * (embedding + side)];
        for (j, (e, s)) in self.frames.iter().enumerate() {
            let base = j * (embedding + side);
            out[base..base + embedding].copy_from_slice(e);
            if let Some(a) = s {
                out[base + embedding + a] = 1.0;
            }
        }
        out
    }
}

/// Slots for step `t` of a sequence whose frame `i` sits at embedded row
/// `row_of(i)` and whose side input at frame `i` is `side_of(i)`.
pub fn stack_slots(
    t: usize,
    k: usize,
    first: usize,
    row_of: impl Fn(usize) -> usize,
    side_of: impl Fn(usize) -> Option<usize>,
) -> Vec<Slot> {
    (0..k)
        .map(|j| {
            if t >= j && t - j >= first {
                let i = t - j;
                Slot {
                    frame: Some(row_of(i)),
                    side: side_of(i),
                }
            } else {
                Slot::default()
            }
        })
        .collect()
}
