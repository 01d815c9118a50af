use rand::Rng;

use crate::error::{NnError, Result};
use crate::layers::Linear;
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const HOURS: usize = 24;
const MINUTES: usize = 60;
const SECONDS: usize = 60;

/// Fixed sinusoid table `[len, d_model]`:
/// `pe[p, 2i] = sin(p / base^(2i/d))`, `pe[p, 2i+1] = cos(p / base^(2i/d))`.
pub fn sinusoid_table(len: usize, d_model: usize, base: f64) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in (0..d_model).step_by(2) {
            let angle = pos as f64 / base.powf(i as f64 / d_model as f64);
            data[pos * d_model + i] = angle.sin();
            if i + 1 < d_model {
                data[pos * d_model + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, d_model], data).expect("table length matches shape")
}

/// UTC (hour-of-day, minute-of-hour, second-of-minute) of a millisecond
/// timestamp.
pub fn calendar_components(ts_ms: i64) -> [usize; 3] {
    let secs = ts_ms.div_euclid(1000);
    [
        secs.div_euclid(3600).rem_euclid(24) as usize,
        secs.div_euclid(60).rem_euclid(60) as usize,
        secs.rem_euclid(60) as usize,
    ]
}

/// Input embedding for the transformer: `α·u + PE + Σ SE`, where `u` is a
/// width-1 convolution (per-step linear projection) of the raw features,
/// `PE` the fixed sinusoid table and `SE` learned calendar embeddings.
#[derive(Debug, Clone)]
pub struct TimestampEncoding {
    pub d_model: usize,
    pub value_proj: Linear,
    pub hour: ParamId,
    pub minute: ParamId,
    pub second: ParamId,
    pub alpha: f64,
    pub pe_base: f64,
}

impl TimestampEncoding {
    /// `window_len` sets the sinusoid base to twice the window length.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_input: usize,
        d_model: usize,
        window_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_model == 0 || !d_model.is_multiple_of(2) {
            return Err(NnError::InvalidArgument(format!("d_model must be even, got {d_model}")));
        }
        let mut table = |part: &str, rows: usize, rng: &mut R| {
            store.add(format!("{name}.{part}"), uniform_fan_in(rng, &[rows, d_model], d_model))
        };
        let hour = table("hour", HOURS, rng);
        let minute = table("minute", MINUTES, rng);
        let second = table("second", SECONDS, rng);
        Ok(Self {
            d_model,
            value_proj: Linear::new(store, &format!("{name}.value_proj"), d_input, d_model, rng),
            hour,
            minute,
            second,
            alpha: 1.0,
            pe_base: (2 * window_len.max(1)) as f64,
        })
    }

    /// `x: [batch, len, d_input]`, `ts`: `batch·len` timestamps in row order.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ts: &[i64]) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] * s[1] != ts.len() {
            return Err(NnError::ShapeMismatch {
                op: "timestamp_encoding",
                lhs: s,
                rhs: vec![ts.len()],
            });
        }
        let (batch, len) = (s[0], s[1]);
        let u = self.value_proj.forward(tape, store, x)?;
        let u = tape.scale(u, self.alpha)?;
        let pe = tape.constant(sinusoid_table(len, self.d_model, self.pe_base))?;
        let mut out = tape.add(u, pe)?;

        let comps: Vec<[usize; 3]> = ts.iter().map(|&t| calendar_components(t)).collect();
        let mut se: Option<Var> = None;
        for (slot, table) in [self.hour, self.minute, self.second].into_iter().enumerate() {
            let idx: Vec<usize> = comps.iter().map(|c| c[slot]).collect();
            let tv = tape.param(store, table);
            let g = tape.gather(tv, &idx)?;
            se = Some(match se {
                Some(acc) => tape.add(acc, g)?,
                None => g,
            });
        }
        let se = tape.reshape(se.expect("three tables"), &[batch, len, self.d_model])?;
        out = tape.add(out, se)?;
        Ok(out)
    }
}
