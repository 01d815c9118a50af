use serde::{Deserialize, Serialize};
use std::fmt;

/// Book depth carried by every snapshot.
pub const DEPTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Level {
    pub price: f64,
    pub volume: f64,
}

impl From<(f64, f64)> for Level {
    fn from((price, volume): (f64, f64)) -> Self {
        Self { price, volume }
    }
}

impl From<Level> for (f64, f64) {
    fn from(l: Level) -> Self {
        (l.price, l.volume)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Ask,
    Bid,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Ask => "ask",
            Side::Bid => "bid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BookViolation {
    #[error("{side} side has {got} levels, expected {DEPTH}")]
    LevelCount { side: Side, got: usize },
    #[error("crossed book: best ask {ask} <= best bid {bid}")]
    Crossed { ask: f64, bid: f64 },
    #[error("{side} prices not strictly monotone at level {level}")]
    NonMonotonic { side: Side, level: usize },
    #[error("{side} level {level} has non-positive price")]
    NonPositivePrice { side: Side, level: usize },
    #[error("{side} level {level} has negative volume")]
    NegativeVolume { side: Side, level: usize },
    #[error("{side} level {level} is not finite")]
    NonFinite { side: Side, level: usize },
}

/// One tick of a ten-level book. Asks ascend in price, bids descend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LobSnapshot {
    pub ts: i64,
    pub asks: [Level; DEPTH],
    pub bids: [Level; DEPTH],
}

impl LobSnapshot {
    /// Builds and validates a snapshot from per-side level lists.
    pub fn new(ts: i64, asks: &[Level], bids: &[Level]) -> Result<Self, BookViolation> {
        let to_array = |side, levels: &[Level]| -> Result<[Level; DEPTH], BookViolation> {
            levels
                .try_into()
                .map_err(|_| BookViolation::LevelCount { side, got: levels.len() })
        };
        let snap = Self {
            ts,
            asks: to_array(Side::Ask, asks)?,
            bids: to_array(Side::Bid, bids)?,
        };
        snap.validate()?;
        Ok(snap)
    }

    pub fn validate(&self) -> Result<(), BookViolation> {
        for (side, levels) in [(Side::Ask, &self.asks), (Side::Bid, &self.bids)] {
            for (level, l) in levels.iter().enumerate() {
                if !l.price.is_finite() || !l.volume.is_finite() {
                    return Err(BookViolation::NonFinite { side, level });
                }
                if l.price <= 0.0 {
                    return Err(BookViolation::NonPositivePrice { side, level });
                }
                if l.volume < 0.0 {
                    return Err(BookViolation::NegativeVolume { side, level });
                }
            }
        }
        let (ask, bid) = (self.asks[0].price, self.bids[0].price);
        if ask <= bid {
            return Err(BookViolation::Crossed { ask, bid });
        }
        for level in 1..DEPTH {
            if self.asks[level].price <= self.asks[level - 1].price {
                return Err(BookViolation::NonMonotonic { side: Side::Ask, level });
            }
            if self.bids[level].price >= self.bids[level - 1].price {
                return Err(BookViolation::NonMonotonic { side: Side::Bid, level });
            }
        }
        Ok(())
    }

    pub fn best_ask(&self) -> Level {
        self.asks[0]
    }

    pub fn best_bid(&self) -> Level {
        self.bids[0]
    }

    pub fn spread(&self) -> f64 {
        self.asks[0].price - self.bids[0].price
    }
}

/// Time-ordered snapshots of one instrument.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TickSeries {
    pub symbol: String,
    pub source: String,
    pub snapshots: Vec<LobSnapshot>,
}

impl TickSeries {
    pub fn new(symbol: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            symbol: symbol.into(),
            source: source.into(),
            snapshots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.snapshots.iter().map(|s| s.ts).collect()
    }

    pub fn mids(&self) -> Vec<f64> {
        self.snapshots.iter().map(crate::features::mid_price).collect()
    }

    /// Appends with level-replace semantics: a snapshot sharing the last
    /// timestamp overwrites it. Returns `false` (and drops the snapshot)
    /// when its timestamp is older than the last one.
    pub fn push(&mut self, snap: LobSnapshot) -> bool {
        match self.snapshots.last_mut() {
            Some(last) if snap.ts == last.ts => {
                *last = snap;
                true
            }
            Some(last) if snap.ts < last.ts => false,
            _ => {
                self.snapshots.push(snap);
                true
            }
        }
    }

    /// Multiplies every price by `c`, leaving volumes unchanged.
    pub fn scaled_prices(&self, c: f64) -> TickSeries {
        let mut out = self.clone();
        for s in &mut out.snapshots {
            for l in s.asks.iter_mut().chain(s.bids.iter_mut()) {
                l.price *= c;
            }
        }
        out
    }
}
