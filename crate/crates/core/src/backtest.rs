//! Signal-driven trading simulation at mid-price with execution delay and
//! per-side transaction costs.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::MS_PER_DAY;
use crate::labeling::MovementLabel;

#[derive(Debug, thiserror::Error)]
pub enum BacktestError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {signals} signals, {mids} mids, {ts} timestamps")]
    LengthMismatch { signals: usize, mids: usize, ts: usize },
    #[error("delay {delay} must be shorter than the series ({len} ticks)")]
    DelayTooLong { delay: usize, len: usize },
    #[error("invalid backtest config: {0}")]
    InvalidConfig(String),
    #[error("Sharpe ratio undefined: {0}")]
    UndefinedSharpe(String),
    #[error("invalid cost grid: {0}")]
    InvalidGrid(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    /// Shares traded per position (μ).
    pub shares: f64,
    /// Ticks between a signal and its fill.
    pub delay: usize,
    /// Fraction of notional charged on every buy and every sell.
    pub cost_rate: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self { shares: 1.0, delay: 5, cost_rate: 0.0 }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        if !(self.shares > 0.0 && self.shares.is_finite()) {
            return Err(BacktestError::InvalidConfig(format!("shares must be positive, got {}", self.shares)));
        }
        if !(self.cost_rate >= 0.0 && self.cost_rate.is_finite()) {
            return Err(BacktestError::InvalidConfig(format!("cost_rate must be >= 0, got {}", self.cost_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSide {
    Flat,
    Long,
    Short,
}

impl PositionSide {
    pub fn sign(self) -> f64 {
        match self {
            PositionSide::Flat => 0.0,
            PositionSide::Long => 1.0,
            PositionSide::Short => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositionState {
    Flat,
    Open { side: PositionSide, entry_price: f64, entry_ts: i64 },
}

impl PositionState {
    pub fn side(&self) -> PositionSide {
        match self {
            PositionState::Flat => PositionSide::Flat,
            PositionState::Open { side, .. } => *side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub open_ts: i64,
    pub close_ts: i64,
    pub side: PositionSide,
    pub open_price: f64,
    pub close_price: f64,
    pub pnl: f64,
    /// False for a position still open at the end and marked to the last mid.
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyReturn {
    /// Days since the Unix epoch (UTC).
    pub day: i64,
    pub cpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestLedger {
    pub config: BacktestConfig,
    pub trades: Vec<Trade>,
    pub ts: Vec<i64>,
    /// Position held after each tick.
    pub positions: Vec<PositionSide>,
    /// Realised pnl plus mark-to-market of the open position, per tick.
    pub equity: Vec<f64>,
    pub daily_cpr: Vec<DailyReturn>,
}

impl BacktestLedger {
    pub fn cpr(&self) -> f64 {
        cpr(self)
    }

    /// Annualised Sharpe ratio of the daily returns.
    pub fn sharpe(&self) -> Result<f64, BacktestError> {
        let daily: Vec<f64> = self.daily_cpr.iter().map(|d| d.cpr).collect();
        sharpe_annualized(&daily)
    }
}

fn trade_pnl(side: PositionSide, shares: f64, cost: f64, open: f64, close: f64) -> f64 {
    side.sign() * shares * (close - open) - cost * shares * (open + close)
}

/// Runs the position state machine. The signal at tick `t` acts at tick
/// `t + delay`: rise opens a long (closing any short first), fall opens a
/// short (closing any long first), stationary holds.
pub fn run_backtest(
    signals: &[MovementLabel],
    mids: &[f64],
    ts: &[i64],
    cfg: &BacktestConfig,
) -> Result<BacktestLedger, BacktestError> {
    cfg.validate()?;
    if signals.len() != mids.len() || mids.len() != ts.len() {
        return Err(BacktestError::LengthMismatch { signals: signals.len(), mids: mids.len(), ts: ts.len() });
    }
    if mids.is_empty() {
        return Err(BacktestError::Empty);
    }
    if cfg.delay >= mids.len() {
        return Err(BacktestError::DelayTooLong { delay: cfg.delay, len: mids.len() });
    }
    let (mu, cost) = (cfg.shares, cfg.cost_rate);
    let mut state = PositionState::Flat;
    let mut realised = 0.0;
    let mut trades = Vec::new();
    let mut positions = Vec::with_capacity(mids.len());
    let mut equity = Vec::with_capacity(mids.len());

    for u in 0..mids.len() {
        let price = mids[u];
        let target = match u.checked_sub(cfg.delay).map(|t| signals[t]) {
            Some(MovementLabel::Rise) => Some(PositionSide::Long),
            Some(MovementLabel::Fall) => Some(PositionSide::Short),
            _ => None,
        };
        if let Some(want) = target {
            if state.side() != want {
                if let PositionState::Open { side, entry_price, entry_ts } = state {
                    let pnl = trade_pnl(side, mu, cost, entry_price, price);
                    realised += pnl;
                    trades.push(Trade {
                        open_ts: entry_ts,
                        close_ts: ts[u],
                        side,
                        open_price: entry_price,
                        close_price: price,
                        pnl,
                        closed: true,
                    });
                }
                state = PositionState::Open { side: want, entry_price: price, entry_ts: ts[u] };
            }
        }
        let open_value = match state {
            PositionState::Flat => 0.0,
            PositionState::Open { side, entry_price, .. } => trade_pnl(side, mu, cost, entry_price, price),
        };
        positions.push(state.side());
        equity.push(realised + open_value);
    }
    if let PositionState::Open { side, entry_price, entry_ts } = state {
        let last = mids.len() - 1;
        trades.push(Trade {
            open_ts: entry_ts,
            close_ts: ts[last],
            side,
            open_price: entry_price,
            close_price: mids[last],
            pnl: trade_pnl(side, mu, cost, entry_price, mids[last]),
            closed: false,
        });
    }
    let daily_cpr = daily_returns(ts, &equity);
    Ok(BacktestLedger { config: *cfg, trades, ts: ts.to_vec(), positions, equity, daily_cpr })
}

/// Change in end-of-day equity for every UTC day present in `ts`.
fn daily_returns(ts: &[i64], equity: &[f64]) -> Vec<DailyReturn> {
    let mut close: BTreeMap<i64, f64> = BTreeMap::new();
    for (&t, &e) in ts.iter().zip(equity) {
        close.insert(t.div_euclid(MS_PER_DAY), e);
    }
    let mut prev = 0.0;
    close
        .into_iter()
        .map(|(day, e)| {
            let r = DailyReturn { day, cpr: e - prev };
            prev = e;
            r
        })
        .collect()
}

/// Cumulative price return: the sum of trade pnl, including the final
/// mark-to-market of an open position.
pub fn cpr(ledger: &BacktestLedger) -> f64 {
    ledger.trades.iter().map(|t| t.pnl).sum()
}

/// `√365 · mean / std` of daily returns, with the sample standard deviation.
pub fn sharpe_annualized(daily: &[f64]) -> Result<f64, BacktestError> {
    if daily.len() < 2 {
        return Err(BacktestError::UndefinedSharpe(format!("need at least 2 days, got {}", daily.len())));
    }
    let n = daily.len() as f64;
    let mean = daily.iter().sum::<f64>() / n;
    let var = daily.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(BacktestError::UndefinedSharpe("daily returns have zero standard deviation".into()));
    }
    Ok(365f64.sqrt() * mean / var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cost_rate: f64,
    pub cpr: f64,
    /// `None` when the Sharpe ratio is undefined for this run.
    pub sharpe: Option<f64>,
    pub n_trades: usize,
}

/// One backtest per cost rate, run concurrently. `grid` must be non-empty
/// and ascending.
pub fn cost_sweep(
    signals: &[MovementLabel],
    mids: &[f64],
    ts: &[i64],
    cfg: &BacktestConfig,
    grid: &[f64],
) -> Result<Vec<SweepRow>, BacktestError> {
    if grid.is_empty() {
        return Err(BacktestError::InvalidGrid("grid is empty".into()));
    }
    if !grid.is_sorted_by(|a, b| a <= b) {
        return Err(BacktestError::InvalidGrid("grid must be sorted ascending".into()));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&cost_rate| {
                scope.spawn(move || {
                    let ledger = run_backtest(signals, mids, ts, &BacktestConfig { cost_rate, ..*cfg })?;
                    Ok(SweepRow {
                        cost_rate,
                        cpr: ledger.cpr(),
                        sharpe: ledger.sharpe().ok(),
                        n_trades: ledger.trades.len(),
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

/// Parses `start:stop:count` into `count` evenly spaced values.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, BacktestError> {
    let bad = |m: &str| BacktestError::InvalidGrid(format!("{spec:?}: {m}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad("expected start:stop:count"));
    }
    let start: f64 = parts[0].parse().map_err(|_| bad("bad start"))?;
    let stop: f64 = parts[1].parse().map_err(|_| bad("bad stop"))?;
    let count: usize = parts[2].parse().map_err(|_| bad("bad count"))?;
    match count {
        0 => Err(bad("count must be >= 1")),
        1 => Ok(vec![start]),
        _ => Ok((0..count).map(|i| start + (stop - start) * i as f64 / (count - 1) as f64).collect()),
    }
}

pub const SIGNALS_HEADER: &str = "ts_ms,signal";

/// Per-tick signals: stationary everywhere except the predicted anchors.
pub fn signals_from_predictions(n_ticks: usize, anchors: &[usize], classes: &[usize]) -> Vec<MovementLabel> {
    let mut s = vec![MovementLabel::Stationary; n_ticks];
    for (&t, &c) in anchors.iter().zip(classes) {
        s[t] = MovementLabel::from_code(c).expect("class code < 3");
    }
    s
}

pub fn write_signals(path: &Path, ts: &[i64], signals: &[MovementLabel]) -> Result<(), BacktestError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{SIGNALS_HEADER}")?;
    for (t, s) in ts.iter().zip(signals) {
        writeln!(w, "{t},{}", s.code())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_signals(path: &Path) -> Result<(Vec<i64>, Vec<MovementLabel>), BacktestError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let (mut ts, mut signals) = (Vec::new(), Vec::new());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if n == 1 && line.trim() == SIGNALS_HEADER {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: &str| BacktestError::Malformed { line: n, reason: reason.into() };
        let (a, b) = line.split_once(',').ok_or_else(|| malformed("expected ts_ms,signal"))?;
        ts.push(a.trim().parse().map_err(|_| malformed("bad timestamp"))?);
        let code: usize = b.trim().parse().map_err(|_| malformed("bad signal"))?;
        signals.push(MovementLabel::from_code(code).ok_or_else(|| malformed("signal must be 0, 1 or 2"))?);
    }
    if ts.is_empty() {
        return Err(BacktestError::Empty);
    }
    Ok((ts, signals))
}

/// Equity curve as CSV: `ts_ms,mid,position,equity`.
pub fn write_equity_csv(path: &Path, ledger: &BacktestLedger, mids: &[f64]) -> Result<(), BacktestError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ts_ms,mid,position,equity")?;
    for (((ts, mid), pos), eq) in ledger.ts.iter().zip(mids).zip(&ledger.positions).zip(&ledger.equity) {
        writeln!(w, "{ts},{mid},{},{eq}", pos.sign())?;
    }
    w.flush()?;
    Ok(())
}
