use lobforge_autodiff::layers::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention, TimestampEncoding};
use lobforge_autodiff::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::{HeadKind, ModelConfig, Result};

/// Post-norm encoder block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), c.d_model, c.n_heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), c.d_model, c.ffn_dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c.d_model),
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let (a, w) = self.attn.forward(tape, store, x, x, None)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, x)?;
        let x = tape.add(x, f)?;
        Ok((self.norm2.forward(tape, store, x)?, w))
    }
}

/// Post-norm decoder block: causal self-attention, cross-attention over the
/// encoder memory, then the feed-forward layer.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), c.d_model, c.n_heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c.d_model),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), c.d_model, c.n_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), c.d_model, c.ffn_dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c.d_model),
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var, memory: Var, mask: &[bool]) -> Result<(Var, Vec<Var>)> {
        let (a, mut w) = self.self_attn.forward(tape, store, y, y, Some(mask))?;
        let y = tape.add(y, a)?;
        let y = self.norm1.forward(tape, store, y)?;
        let (c, wc) = self.cross_attn.forward(tape, store, y, memory, None)?;
        w.extend(wc);
        let y = tape.add(y, c)?;
        let y = self.norm2.forward(tape, store, y)?;
        let f = self.ffn.forward(tape, store, y)?;
        let y = tape.add(y, f)?;
        Ok((self.norm3.forward(tape, store, y)?, w))
    }
}

/// Encoder-decoder transformer emitting all `k` steps in one pass.
///
/// The decoder reads the last `k` rows of the input window (zero rows in
/// front when `k > L_x`) as its tokens, so the whole horizon is produced
/// from observed data only. For movement, a linear layer maps the `k`
/// predicted values to three logits.
#[derive(Debug, Clone)]
pub struct TransformerNet {
    pub k: usize,
    pub enc_embed: TimestampEncoding,
    pub dec_embed: TimestampEncoding,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub projection: Linear,
    pub movement_head: Option<Linear>,
}

/// Attention weights from one forward pass, per layer and head.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

impl TransformerNet {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        let enc_embed = TimestampEncoding::new(store, "transformer.enc_embed", c.input_dim, c.d_model, c.lx, rng)?;
        let dec_embed = TimestampEncoding::new(store, "transformer.dec_embed", c.input_dim, c.d_model, c.lx, rng)?;
        let encoder = (0..c.encoder_layers)
            .map(|i| EncoderLayer::new(store, &format!("transformer.encoder{i}"), c, rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..c.decoder_layers)
            .map(|i| DecoderLayer::new(store, &format!("transformer.decoder{i}"), c, rng))
            .collect::<Result<Vec<_>>>()?;
        let projection = Linear::new(store, "transformer.projection", c.d_model, 1, rng);
        let movement_head =
            (c.head == HeadKind::Movement).then(|| Linear::new(store, "transformer.movement_head", c.k, 3, rng));
        Ok(Self {
            k: c.k,
            enc_embed,
            dec_embed,
            encoder,
            decoder,
            projection,
            movement_head,
        })
    }

    /// Encoder memory `[B, L_x, d_model]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var, ts: &[i64], trace: &mut AttentionTrace) -> Result<Var> {
        let mut h = self.enc_embed.forward(tape, store, x, ts)?;
        for layer in &self.encoder {
            let (next, w) = layer.forward(tape, store, h)?;
            trace.encoder.extend(w);
            h = next;
        }
        Ok(h)
    }

    /// Decoder tokens `[B, k, d]`: window rows `L_x − k .. L_x`, zero-padded
    /// at the front when the window is shorter than `k`.
    pub fn decoder_input(&self, tape: &mut Tape, x: Var, ts: &[i64]) -> Result<(Var, Vec<i64>)> {
        let s = tape.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        let k = self.k;
        let tokens = if k <= l {
            tape.slice(x, 1, l - k, k)?
        } else {
            let zeros = tape.constant(Tensor::zeros(&[b, k - l, d]))?;
            tape.concat(&[zeros, x], 1)?
        };
        // Padding tokens borrow the first window timestamp.
        let mut dec_ts = Vec::with_capacity(b * k);
        for row in ts.chunks(l) {
            dec_ts.extend((0..k).map(|j| if j + l >= k { row[j + l - k] } else { row[0] }));
        }
        Ok((tokens, dec_ts))
    }

    /// Predicted sequence `[B, k]` from decoder tokens and encoder memory.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        tokens: Var,
        dec_ts: &[i64],
        trace: &mut AttentionTrace,
    ) -> Result<Var> {
        let b = tape.shape(tokens)[0];
        let mask = causal_mask(self.k);
        let mut y = self.dec_embed.forward(tape, store, tokens, dec_ts)?;
        for layer in &self.decoder {
            let (next, w) = layer.forward(tape, store, y, memory, &mask)?;
            trace.decoder.extend(w);
            y = next;
        }
        let p = self.projection.forward(tape, store, y)?;
        Ok(tape.reshape(p, &[b, self.k])?)
    }

    /// Applies the movement head to a predicted sequence, if there is one.
    pub fn head(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        match &self.movement_head {
            Some(h) => Ok(h.forward(tape, store, seq)?),
            None => Ok(seq),
        }
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ts: &[i64],
        trace: &mut AttentionTrace,
    ) -> Result<Var> {
        let memory = self.encode(tape, store, x, ts, trace)?;
        let (tokens, dec_ts) = self.decoder_input(tape, x, ts)?;
        let seq = self.decode(tape, store, memory, tokens, &dec_ts, trace)?;
        self.head(tape, store, seq)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ts: &[i64]) -> Result<Var> {
        self.forward_traced(tape, store, x, ts, &mut AttentionTrace::default())
    }
}
