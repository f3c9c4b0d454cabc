//! Layers built from tape ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamId, ParameterSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// How the output layer of an [`Mlp`] is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputInit {
    /// Same scaled-uniform scheme as the hidden layers.
    Default,
    /// All-zero weights and bias: the head starts at a constant output.
    Zero,
    /// Uniform weights scaled by the given factor.
    Scaled(f64),
}

/// Affine layer `x @ w + b` with `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Registers `{prefix}.w` and `{prefix}.b`. Weights are drawn uniformly
    /// from `±gain * sqrt(6 / (in + out))`; bias starts at zero.
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        input: usize,
        output: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let limit = gain * (6.0 / (input + output) as f64).sqrt();
        let w: Vec<f64> = (0..input * output)
            .map(|_| {
                if limit == 0.0 {
                    0.0
                } else {
                    rng.random_range(-limit..limit)
                }
            })
            .collect();
        let weight = params.insert(format!("{prefix}.w"), Tensor::matrix(input, output, w)?)?;
        let bias = params.insert(format!("{prefix}.b"), Tensor::zeros(vec![output]))?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.affine(x, w, b)
    }

    /// `x @ w + b` for a single row, without recording anything.
    pub fn eval_row(&self, params: &ParameterSet, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input, "input width");
        let w = params.get(self.weight).data();
        let mut out = params.get(self.bias).data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * self.output..(i + 1) * self.output];
            for (o, wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        out
    }
}

impl Activation {
    pub fn apply_slice(self, x: &mut [f64]) {
        match self {
            Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Identity => {}
        }
    }
}

/// Stack of [`Linear`] layers with a hidden activation between them and no
/// activation after the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output, e.g.
    /// `[in, 64, 64, out]`.
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        output_init: OutputInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        assert!(
            sizes.len() >= 2,
            "an MLP needs at least input and output sizes"
        );
        let n = sizes.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, pair) in sizes.windows(2).enumerate() {
            let gain = if i + 1 == n {
                match output_init {
                    OutputInit::Default => 1.0,
                    OutputInit::Zero => 0.0,
                    OutputInit::Scaled(s) => s,
                }
            } else {
                1.0
            };
            layers.push(Linear::new(
                params,
                &format!("{prefix}.{i}"),
                pair[0],
                pair[1],
                gain,
                rng,
            )?);
        }
        Ok(Self { layers, activation })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Same computation as [`Mlp::forward`] on one row, off the tape.
    pub fn eval_row(&self, params: &ParameterSet, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval_row(params, &h);
            if i < last {
                self.activation.apply_slice(&mut h);
            }
        }
        h
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// Overwrites every parameter with N(0, std^2) noise. Used to get away from
/// special initializations (e.g. zeroed heads) before a gradient check.
pub fn randomize(params: &mut ParameterSet, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("valid std");
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v = normal.sample(rng);
        }
    }
}
