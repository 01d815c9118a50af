use lobforge_autodiff::layers::{series_decompose, Linear, LstmCell, LstmState};
use lobforge_autodiff::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::{ContextMode, ModelConfig, Result};

/// Flattened window through ReLU hidden layers to the head.
#[derive(Debug, Clone)]
pub struct MlpNet {
    pub hidden: Vec<Linear>,
    pub head: Linear,
    flat: usize,
}

impl MlpNet {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        let flat = c.lx * c.input_dim;
        // Two hidden layers unless more are requested.
        let depth = c.n_layers.max(2);
        let mut hidden = Vec::with_capacity(depth);
        let mut width = flat;
        for i in 0..depth {
            hidden.push(Linear::new(store, &format!("mlp.hidden{i}"), width, c.hidden_dim, rng));
            width = c.hidden_dim;
        }
        Self {
            hidden,
            head: Linear::new(store, "mlp.head", width, c.output_dim(), rng),
            flat,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let mut h = tape.reshape(x, &[b, self.flat])?;
        for layer in &self.hidden {
            let z = layer.forward(tape, store, h)?;
            h = tape.relu(z)?;
        }
        Ok(self.head.forward(tape, store, h)?)
    }
}

/// Stacked LSTM layers; each layer reads the full hidden sequence of the one
/// below.
#[derive(Debug, Clone)]
pub struct LstmStack {
    pub layers: Vec<LstmCell>,
}

impl LstmStack {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth)
            .map(|i| LstmCell::new(store, &format!("{name}.layer{i}"), if i == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    /// Returns the top layer's hidden states and its final state.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<(Vec<Var>, LstmState)> {
        let (batch, len) = (tape.shape(seq)[0], tape.shape(seq)[1]);
        let mut input = seq;
        let mut out = None;
        for (i, cell) in self.layers.iter().enumerate() {
            let (hs, last) = cell.unroll(tape, store, input, None)?;
            if i + 1 < self.layers.len() {
                input = stack_steps(tape, &hs, batch, len, cell.hidden)?;
            }
            out = Some((hs, last));
        }
        Ok(out.expect("at least one layer"))
    }
}

/// `[B, H]` per step to `[B, L, H]`.
fn stack_steps(tape: &mut Tape, hs: &[Var], batch: usize, len: usize, hidden: usize) -> Result<Var> {
    let parts = hs
        .iter()
        .map(|&h| tape.reshape(h, &[batch, 1, hidden]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let seq = tape.concat(&parts, 1)?;
    debug_assert_eq!(tape.shape(seq), &[batch, len, hidden]);
    Ok(seq)
}

/// LSTM whose final hidden state feeds a linear head.
#[derive(Debug, Clone)]
pub struct LstmNet {
    pub encoder: LstmStack,
    pub head: Linear,
}

impl LstmNet {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        Self {
            encoder: LstmStack::new(store, "lstm", c.input_dim, c.hidden_dim, c.n_layers, rng),
            head: Linear::new(store, "lstm.head", c.hidden_dim, c.output_dim(), rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, last) = self.encoder.run(tape, store, x)?;
        Ok(self.head.forward(tape, store, last.h)?)
    }
}

/// Decomposition LSTM: the window is split into a moving-average trend and
/// its remainder, each branch gets its own LSTM, and the two final hidden
/// states are summed before the head.
#[derive(Debug, Clone)]
pub struct DlstmNet {
    pub window: usize,
    pub trend: LstmStack,
    pub remainder: LstmStack,
    pub head: Linear,
}

impl DlstmNet {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        Self {
            window: c.decompose_window,
            trend: LstmStack::new(store, "dlstm.trend", c.input_dim, c.hidden_dim, c.n_layers, rng),
            remainder: LstmStack::new(store, "dlstm.remainder", c.input_dim, c.hidden_dim, c.n_layers, rng),
            head: Linear::new(store, "dlstm.head", c.hidden_dim, c.output_dim(), rng),
        }
    }

    /// The branch inputs `(trend, remainder)` for a window.
    pub fn decompose(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        Ok(series_decompose(tape, x, 1, self.window)?)
    }

    /// Summed final hidden state `H_t + H_r`.
    pub fn hidden(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (trend, remainder) = self.decompose(tape, x)?;
        let (_, ht) = self.trend.run(tape, store, trend)?;
        let (_, hr) = self.remainder.run(tape, store, remainder)?;
        Ok(tape.add(ht.h, hr.h)?)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden(tape, store, x)?;
        Ok(self.head.forward(tape, store, h)?)
    }
}

/// Builds the decoder's previous-value input for step `j`: zero at the
/// first step, then the teacher value or the model's own last output.
fn previous_value(tape: &mut Tape, teacher: Option<Var>, outputs: &[Var], j: usize, batch: usize) -> Result<Var> {
    if j == 0 {
        return Ok(tape.constant(Tensor::zeros(&[batch, 1]))?);
    }
    Ok(match teacher {
        Some(t) => tape.slice(t, 1, j - 1, 1)?,
        None => outputs[j - 1],
    })
}

fn teacher_var(tape: &mut Tape, teacher: Option<&Tensor>, batch: usize, k: usize) -> Result<Option<Var>> {
    match teacher {
        Some(t) if t.shape() == [batch, k] => Ok(Some(tape.constant(t.clone())?)),
        Some(t) => Err(super::ModelError::Config(format!(
            "teacher targets have shape {:?}, expected [{batch}, {k}]",
            t.shape()
        ))),
        None => Ok(None),
    }
}

/// LSTM encoder-decoder. The context vector (last or mean encoder hidden
/// state) seeds the decoder and is fed alongside the previous value at
/// every step.
#[derive(Debug, Clone)]
pub struct Seq2SeqNet {
    pub k: usize,
    pub context: ContextMode,
    pub encoder: LstmStack,
    pub decoder: LstmCell,
    pub output: Linear,
}

impl Seq2SeqNet {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        Self {
            k: c.k,
            context: c.context,
            encoder: LstmStack::new(store, "seq2seq.encoder", c.input_dim, c.hidden_dim, c.n_layers, rng),
            decoder: LstmCell::new(store, "seq2seq.decoder", 1 + c.hidden_dim, c.hidden_dim, rng),
            output: Linear::new(store, "seq2seq.output", c.hidden_dim, 1, rng),
        }
    }

    fn context(&self, tape: &mut Tape, hs: &[Var], last: LstmState) -> Result<Var> {
        Ok(match self.context {
            ContextMode::Last => last.h,
            ContextMode::Mean => {
                let mut acc = hs[0];
                for &h in &hs[1..] {
                    acc = tape.add(acc, h)?;
                }
                tape.scale(acc, 1.0 / hs.len() as f64)?
            }
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, teacher: Option<&Tensor>) -> Result<Var> {
        let batch = tape.shape(x)[0];
        let teacher = teacher_var(tape, teacher, batch, self.k)?;
        let (hs, last) = self.encoder.run(tape, store, x)?;
        let ctx = self.context(tape, &hs, last)?;
        let mut state = LstmState { h: ctx, c: last.c };
        let mut outputs = Vec::with_capacity(self.k);
        for j in 0..self.k {
            let prev = previous_value(tape, teacher, &outputs, j, batch)?;
            let input = tape.concat(&[prev, ctx], 1)?;
            state = self.decoder.step(tape, store, input, state)?;
            outputs.push(self.output.forward(tape, store, state.h)?);
        }
        Ok(if outputs.len() == 1 { outputs[0] } else { tape.concat(&outputs, 1)? })
    }
}

/// Encoder-decoder whose context is recomputed at every decoder step as
/// the dot-product attention of the decoder state over all encoder states.
#[derive(Debug, Clone)]
pub struct AttentionNet {
    pub k: usize,
    pub encoder: LstmStack,
    pub decoder: LstmCell,
    pub output: Linear,
}

impl AttentionNet {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        Self {
            k: c.k,
            encoder: LstmStack::new(store, "attention.encoder", c.input_dim, c.hidden_dim, c.n_layers, rng),
            decoder: LstmCell::new(store, "attention.decoder", 1 + c.hidden_dim, c.hidden_dim, rng),
            output: Linear::new(store, "attention.output", 2 * c.hidden_dim, 1, rng),
        }
    }

    /// Context for decoder state `d: [B, H]` over encoder states
    /// `enc: [B, L, H]`. Returns `(context [B, H], weights [B, L])`.
    pub fn attend(tape: &mut Tape, enc: Var, d: Var) -> Result<(Var, Var)> {
        let s = tape.shape(enc).to_vec();
        let (b, l, h) = (s[0], s[1], s[2]);
        let dcol = tape.reshape(d, &[b, h, 1])?;
        let scores = tape.matmul(enc, dcol)?;
        let scores = tape.reshape(scores, &[b, l])?;
        let weights = tape.softmax(scores, 1)?;
        let wrow = tape.reshape(weights, &[b, 1, l])?;
        let ctx = tape.matmul(wrow, enc)?;
        let ctx = tape.reshape(ctx, &[b, h])?;
        Ok((ctx, weights))
    }

    /// Returns the `[B, k]` output and the attention weights of every step.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        teacher: Option<&Tensor>,
    ) -> Result<(Var, Vec<Var>)> {
        let s = tape.shape(x).to_vec();
        let (batch, len) = (s[0], s[1]);
        let teacher = teacher_var(tape, teacher, batch, self.k)?;
        let (hs, last) = self.encoder.run(tape, store, x)?;
        let enc = stack_steps(tape, &hs, batch, len, self.encoder.hidden())?;
        let mut state = last;
        let mut ctx = last.h;
        let mut outputs = Vec::with_capacity(self.k);
        let mut weights = Vec::with_capacity(self.k);
        for j in 0..self.k {
            let prev = previous_value(tape, teacher, &outputs, j, batch)?;
            let input = tape.concat(&[prev, ctx], 1)?;
            state = self.decoder.step(tape, store, input, state)?;
            let (c, w) = Self::attend(tape, enc, state.h)?;
            ctx = c;
            weights.push(w);
            let joined = tape.concat(&[state.h, ctx], 1)?;
            outputs.push(self.output.forward(tape, store, joined)?);
        }
        let out = if outputs.len() == 1 { outputs[0] } else { tape.concat(&outputs, 1)? };
        Ok((out, weights))
    }
}
