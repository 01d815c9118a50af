use rand::Rng;

use crate::error::Result;
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Affine map over the last axis: `x · W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(rng, &[input, output], input));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self {
            input,
            output,
            weight,
            bias,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, self.eps)?;
        let g = tape.param(store, self.gain);
        let s = tape.param(store, self.shift);
        let y = tape.mul(n, g)?;
        tape.add(y, s)
    }
}

/// Position-wise two-layer network with a ReLU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.outer.forward(tape, store, h)
    }
}
