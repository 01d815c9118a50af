//! Forecasters: MLP baseline, LSTM, DLSTM, Seq2Seq, attention
//! encoder-decoder and the transformer, with regression or movement heads.

mod recurrent;
mod transformer;

use lobforge_autodiff::{NnError, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;

pub use recurrent::{AttentionNet, DlstmNet, LstmNet, LstmStack, MlpNet, Seq2SeqNet};
pub use transformer::{AttentionTrace, TransformerNet};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Lstm,
    Dlstm,
    Seq2seq,
    Attention,
    Transformer,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "mlp" => ModelKind::Mlp,
            "lstm" => ModelKind::Lstm,
            "dlstm" => ModelKind::Dlstm,
            "seq2seq" => ModelKind::Seq2seq,
            "attention" => ModelKind::Attention,
            "transformer" => ModelKind::Transformer,
            _ => return Err(format!("unknown model {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    RegressionSeq,
    Movement,
}

/// How the Seq2Seq encoder summarises its hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    #[default]
    Last,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// LSTM layers per branch, or hidden layers in the MLP.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub lx: usize,
    pub k: usize,
    pub head: HeadKind,
    pub decompose_window: usize,
    pub context: ContextMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lstm,
            input_dim: 41,
            hidden_dim: 64,
            n_layers: 1,
            n_heads: 4,
            d_model: 64,
            ffn_dim: 256,
            encoder_layers: 2,
            decoder_layers: 1,
            lx: 96,
            k: 20,
            head: HeadKind::Movement,
            decompose_window: 25,
            context: ContextMode::Last,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.input_dim == 0 || self.lx == 0 || self.k == 0 {
            return bad("input_dim, lx and k must be >= 1".into());
        }
        if self.hidden_dim == 0 || self.n_layers == 0 {
            return bad("hidden_dim and n_layers must be >= 1".into());
        }
        match self.kind {
            ModelKind::Seq2seq | ModelKind::Attention if self.head == HeadKind::Movement => {
                return bad(format!("{:?} only supports the regression head", self.kind));
            }
            ModelKind::Dlstm if self.decompose_window.is_multiple_of(2) => {
                return bad(format!("decompose_window must be odd, got {}", self.decompose_window));
            }
            ModelKind::Transformer => {
                if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
                    return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
                }
                if !self.d_model.is_multiple_of(2) {
                    return bad("d_model must be even".into());
                }
                if self.encoder_layers == 0 || self.decoder_layers == 0 || self.ffn_dim == 0 {
                    return bad("transformer needs >= 1 encoder and decoder layer".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Width of the model output: `k` values or 3 logits.
    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::RegressionSeq => self.k,
            HeadKind::Movement => 3,
        }
    }
}

#[derive(Debug, Clone)]
enum Net {
    Mlp(MlpNet),
    Lstm(LstmNet),
    Dlstm(DlstmNet),
    Seq2Seq(Seq2SeqNet),
    Attention(AttentionNet),
    Transformer(TransformerNet),
}

/// A forecaster and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    net: Net,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c = &config;
        let p = &mut params;
        let net = match c.kind {
            ModelKind::Mlp => Net::Mlp(MlpNet::new(p, c, &mut rng)),
            ModelKind::Lstm => Net::Lstm(LstmNet::new(p, c, &mut rng)),
            ModelKind::Dlstm => Net::Dlstm(DlstmNet::new(p, c, &mut rng)),
            ModelKind::Seq2seq => Net::Seq2Seq(Seq2SeqNet::new(p, c, &mut rng)),
            ModelKind::Attention => Net::Attention(AttentionNet::new(p, c, &mut rng)),
            ModelKind::Transformer => Net::Transformer(TransformerNet::new(p, c, &mut rng)?),
        };
        Ok(Self { config, params, net })
    }

    /// `x: [B, L_x, d]`, `ts`: `B·L_x` window timestamps. `teacher` holds the
    /// true `[B, k]` targets for teacher-forced decoders; it is ignored by
    /// every other model. Returns `[B, k]` values or `[B, 3]` logits.
    pub fn forward(&self, tape: &mut Tape, x: Var, ts: &[i64], teacher: Option<&Tensor>) -> Result<Var> {
        self.forward_with(tape, &self.params, x, ts, teacher)
    }

    /// [`Model::forward`] with an explicit parameter store of the same layout.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        p: &ParamStore,
        x: Var,
        ts: &[i64],
        teacher: Option<&Tensor>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.config.lx || s[2] != self.config.input_dim {
            return Err(ModelError::Nn(NnError::ShapeMismatch {
                op: "model_input",
                lhs: s,
                rhs: vec![self.config.lx, self.config.input_dim],
            }));
        }
        Ok(match &self.net {
            Net::Mlp(n) => n.forward(tape, p, x)?,
            Net::Lstm(n) => n.forward(tape, p, x)?,
            Net::Dlstm(n) => n.forward(tape, p, x)?,
            Net::Seq2Seq(n) => n.forward(tape, p, x, teacher)?,
            Net::Attention(n) => n.forward(tape, p, x, teacher)?.0,
            Net::Transformer(n) => n.forward(tape, p, x, ts)?,
        })
    }

    /// Forward pass over a dataset batch. Teacher forcing is used only when
    /// `train` is set.
    pub fn forward_batch(&self, tape: &mut Tape, batch: &Batch, train: bool) -> Result<Var> {
        let x = tape.constant(batch.x.clone())?;
        let teacher = if train { batch.y_seq.as_ref() } else { None };
        self.forward(tape, x, &batch.ts, teacher)
    }

    /// Task loss: MSE for regression, cross-entropy for movement.
    pub fn loss(&self, tape: &mut Tape, out: Var, batch: &Batch) -> Result<Var> {
        match self.config.head {
            HeadKind::RegressionSeq => {
                let y = batch
                    .y_seq
                    .as_ref()
                    .ok_or_else(|| ModelError::Config("regression head needs sequence targets".into()))?;
                Ok(tape.mse_loss(out, y)?)
            }
            HeadKind::Movement => {
                let y = batch
                    .y_class
                    .as_ref()
                    .ok_or_else(|| ModelError::Config("movement head needs class labels".into()))?;
                Ok(tape.cross_entropy(out, y)?)
            }
        }
    }

    /// Inference output for a batch (no teacher forcing).
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, batch, false)?;
        Ok(tape.value(out).clone())
    }

    /// Class probabilities `[B, 3]` for a movement model.
    pub fn predict_proba(&self, batch: &Batch) -> Result<Tensor> {
        if self.config.head != HeadKind::Movement {
            return Err(ModelError::Config("probabilities need a movement head".into()));
        }
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, batch, false)?;
        let p = tape.softmax(out, 1)?;
        Ok(tape.value(p).clone())
    }

    pub fn as_transformer(&self) -> Option<&TransformerNet> {
        match &self.net {
            Net::Transformer(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_attention(&self) -> Option<&AttentionNet> {
        match &self.net {
            Net::Attention(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_dlstm(&self) -> Option<&DlstmNet> {
        match &self.net {
            Net::Dlstm(d) => Some(d),
            _ => None,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise [`argmax`] of a `[B, C]` tensor.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().unwrap_or(&1);
    t.data().chunks(c).map(argmax).collect()
}
