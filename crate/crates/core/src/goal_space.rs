//! Variational goal encoder, the latent goal space, and the goal-model head.
//!
//! An observation embedding is mapped to a diagonal Gaussian; a latent goal
//! is a reparameterized sample squashed through `tanh`, so every component
//! lies in `[-1, 1]`. The KL to a standard normal is taken on the Gaussian
//! before the squash.

use h2o2_autodiff::{Activation, Mlp, OutputInit, ParameterSet, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const NUM_BINS: usize = 21;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    /// Clamps `log_std` into the valid range.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Length {
                what: "log_std",
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A point of `[-1, 1]^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGoal(pub Vec<f64>);

impl LatentGoal {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `g = tanh(mean + exp(log_std) * eps)`, `eps ~ N(0, I)`.
pub fn sample_goal(dist: &DiagGaussian, rng: &mut impl Rng) -> LatentGoal {
    LatentGoal(
        dist.mean
            .iter()
            .zip(&dist.log_std)
            .map(|(m, s)| {
                let eps: f64 = StandardNormal.sample(rng);
                (m + s.exp() * eps).tanh()
            })
            .collect(),
    )
}

/// Closed-form `KL(N(mean, diag(sigma^2)) || N(0, I))` in nats.
pub fn kl_to_standard(dist: &DiagGaussian) -> f64 {
    dist.mean
        .iter()
        .zip(&dist.log_std)
        .map(|(m, s)| 0.5 * (m * m + (2.0 * s).exp() - 1.0 - 2.0 * s))
        .sum()
}

pub fn bin_index(g: f64) -> usize {
    (((g + 1.0) / 2.0 * NUM_BINS as f64).floor().max(0.0) as usize).min(NUM_BINS - 1)
}

pub fn bin_center(i: usize) -> f64 {
    -1.0 + (i as f64 + 0.5) * 2.0 / NUM_BINS as f64
}

/// Index of the bin whose center equals `g` (within 1e-9), if any.
pub fn center_bin(g: f64) -> Option<usize> {
    let i = bin_index(g);
    ((bin_center(i) - g).abs() < 1e-9).then_some(i)
}

/// Observation embedding to Gaussian parameters: an MLP with a `2d` output
/// split into mean and log-std.
#[derive(Clone, Debug)]
pub struct GoalEncoder {
    pub mlp: Mlp,
    pub dim: usize,
}

impl GoalEncoder {
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        embedding: usize,
        hidden: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp = Mlp::new(
            params,
            prefix,
            &[embedding, hidden, 2 * dim],
            Activation::Tanh,
            OutputInit::Scaled(0.1),
            rng,
        )?;
        Ok(Self { mlp, dim })
    }

    /// Returns `(mean, log_std)`, each `[rows, d]`, with log-std clamped.
    pub fn forward(&self, tape: &mut Tape<'_>, embedding: Var) -> Result<(Var, Var)> {
        let out = self.mlp.forward(tape, embedding)?;
        let mean = tape.slice_cols(out, 0, self.dim)?;
        let raw = tape.slice_cols(out, self.dim, 2 * self.dim)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std))
    }

    /// Posterior for a single embedding.
    pub fn encode(&self, params: &ParameterSet, embedding: &[f64]) -> Result<DiagGaussian> {
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("goal encoder input"));
        }
        let mut tape = Tape::with_params(params);
        let x = tape.constant(Tensor::matrix(1, embedding.len(), embedding.to_vec())?);
        let (m, s) = self.forward(&mut tape, x)?;
        DiagGaussian::new(tape.value(m).data().to_vec(), tape.value(s).data().to_vec())
    }
}

/// Reparameterized sample on the tape; `eps` has the shape of `mean`.
pub fn sample_on_tape(tape: &mut Tape<'_>, mean: Var, log_std: Var, eps: Tensor) -> Result<Var> {
    let sigma = tape.exp(log_std);
    let e = tape.constant(eps);
    let noise = tape.mul(sigma, e)?;
    let z = tape.add(mean, noise)?;
    Ok(tape.tanh(z))
}

/// Per-row KL to the standard normal, shape `[rows]`.
pub fn kl_on_tape(tape: &mut Tape<'_>, mean: Var, log_std: Var) -> Result<Var> {
    let m2 = tape.square(mean);
    let two_s = tape.scale(log_std, 2.0);
    let var = tape.exp(two_s);
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, two_s)?;
    let c = tape.add_scalar(b, -1.0);
    let per_row = tape.sum_rows(c);
    Ok(tape.scale(per_row, 0.5))
}

/// Predicts the latent goal of an observation from its embedding as `d`
/// independent categoricals over [`NUM_BINS`] bins.
#[derive(Clone, Debug)]
pub struct GoalModel {
    pub mlp: Mlp,
    pub dim: usize,
}

impl GoalModel {
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        embedding: usize,
        hidden: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp = Mlp::new(
            params,
            prefix,
            &[embedding, hidden, dim * NUM_BINS],
            Activation::Tanh,
            OutputInit::Zero,
            rng,
        )?;
        Ok(Self { mlp, dim })
    }

    /// Logits, `[rows, d * NUM_BINS]`.
    pub fn forward(&self, tape: &mut Tape<'_>, embedding: Var) -> Result<Var> {
        Ok(self.mlp.forward(tape, embedding)?)
    }
}

/// Mean over rows of the summed per-dimension cross-entropy between
/// `logits` (`[rows, d * NUM_BINS]`) and the bins of `goals` (`[rows, d]`).
/// The goals sit behind a stop-gradient, so only the logits are shaped.
pub fn goal_model_loss(tape: &mut Tape<'_>, logits: Var, goals: Var) -> Result<Var> {
    let g = tape.stop_gradient(goals);
    let (rows, dim) = (tape.shape(g)[0], tape.shape(g)[1]);
    let targets: Vec<usize> = tape.value(g).data().iter().map(|&v| bin_index(v)).collect();
    let flat = tape.reshape(logits, &[rows * dim, NUM_BINS])?;
    let logp = tape.log_softmax(flat);
    let picked = tape.gather(logp, &targets)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / rows as f64))
}
