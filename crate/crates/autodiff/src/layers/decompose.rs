use crate::error::Result;
use crate::tape::{Tape, Var};

/// Splits a sequence into a moving-average trend (odd `window`, edge
/// replication keeps the length) and the remainder `x − trend`.
/// `time_axis` indexes the sequence dimension of `x`.
pub fn series_decompose(tape: &mut Tape, x: Var, time_axis: usize, window: usize) -> Result<(Var, Var)> {
    let trend = tape.moving_average(x, time_axis, window)?;
    let remainder = tape.sub(x, trend)?;
    Ok((trend, remainder))
}
