use rand::Rng;

use crate::error::{NnError, Result};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hidden and cell state, each `[batch, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Single LSTM cell with separate gate matrices acting on `[h, x]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    pub w_forget: ParamId,
    pub w_input: ParamId,
    pub w_candidate: ParamId,
    pub w_output: ParamId,
    pub b_forget: ParamId,
    pub b_input: ParamId,
    pub b_candidate: ParamId,
    pub b_output: ParamId,
}

impl LstmCell {
    /// Gate weights uniform in ±1/√(hidden+input); forget bias starts at 1.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let fan_in = hidden + input;
        let mut w = |gate: &str, rng: &mut R| {
            store.add(format!("{name}.w_{gate}"), uniform_fan_in(rng, &[fan_in, hidden], fan_in))
        };
        let w_forget = w("forget", rng);
        let w_input = w("input", rng);
        let w_candidate = w("candidate", rng);
        let w_output = w("output", rng);
        let b_forget = store.add(format!("{name}.b_forget"), Tensor::full(&[hidden], 1.0));
        let b_input = store.add(format!("{name}.b_input"), Tensor::zeros(&[hidden]));
        let b_candidate = store.add(format!("{name}.b_candidate"), Tensor::zeros(&[hidden]));
        let b_output = store.add(format!("{name}.b_output"), Tensor::zeros(&[hidden]));
        Self {
            input,
            hidden,
            w_forget,
            w_input,
            w_candidate,
            w_output,
            b_forget,
            b_input,
            b_candidate,
            b_output,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<LstmState> {
        let h = tape.constant(Tensor::zeros(&[batch, self.hidden]))?;
        let c = tape.constant(Tensor::zeros(&[batch, self.hidden]))?;
        Ok(LstmState { h, c })
    }

    fn gate(&self, tape: &mut Tape, store: &ParamStore, hx: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let z = tape.matmul(hx, w)?;
        tape.add(z, b)
    }

    /// One time step; `x` is `[batch, input]`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, state: LstmState) -> Result<LstmState> {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.input {
            return Err(NnError::ShapeMismatch {
                op: "lstm_cell",
                lhs: xs.to_vec(),
                rhs: vec![self.input],
            });
        }
        let hx = tape.concat(&[state.h, x], 1)?;
        let zf = self.gate(tape, store, hx, self.w_forget, self.b_forget)?;
        let forget = tape.sigmoid(zf)?;
        let zi = self.gate(tape, store, hx, self.w_input, self.b_input)?;
        let input = tape.sigmoid(zi)?;
        let zc = self.gate(tape, store, hx, self.w_candidate, self.b_candidate)?;
        let candidate = tape.tanh(zc)?;
        let zo = self.gate(tape, store, hx, self.w_output, self.b_output)?;
        let output = tape.sigmoid(zo)?;

        let keep = tape.mul(forget, state.c)?;
        let write = tape.mul(input, candidate)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(output, tc)?;
        Ok(LstmState { h, c })
    }

    /// Runs the cell over `seq: [batch, len, input]`, returning every
    /// hidden state and the final state.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: Var,
        init: Option<LstmState>,
    ) -> Result<(Vec<Var>, LstmState)> {
        let s = tape.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.input {
            return Err(NnError::ShapeMismatch {
                op: "lstm_unroll",
                lhs: s,
                rhs: vec![self.input],
            });
        }
        let (batch, len) = (s[0], s[1]);
        let mut state = match init {
            Some(st) => st,
            None => self.zero_state(tape, batch)?,
        };
        let mut hs = Vec::with_capacity(len);
        for t in 0..len {
            let xt = tape.slice(seq, 1, t, 1)?;
            let xt = tape.reshape(xt, &[batch, self.input])?;
            state = self.step(tape, store, xt, state)?;
            hs.push(state.h);
        }
        Ok((hs, state))
    }
}
