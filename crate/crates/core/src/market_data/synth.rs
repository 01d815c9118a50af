//! Deterministic synthetic books with controllable mid-price dynamics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::snapshot::{Level, LobSnapshot, TickSeries, DEPTH};
use super::MarketDataError;

/// Mid-price dynamics, all expressed in ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// Gaussian increments with standard deviation `vol_scale` ticks.
    RandomWalk,
    /// Linear drift plus a sinusoidal swing plus i.i.d. Gaussian noise of
    /// `vol_scale` ticks around it.
    TrendPlusNoise {
        drift_ticks_per_tick: f64,
        amplitude_ticks: f64,
        period: usize,
    },
    /// Triangle wave: climbs `amplitude_ticks` over half a period, then
    /// descends. Noise-free and exactly periodic.
    Sawtooth { period: usize, amplitude_ticks: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_ticks: usize,
    pub seed: u64,
    pub regime: Regime,
    pub tick_size: f64,
    pub base_price: f64,
    /// Quoted spread in ticks (≥ 1).
    pub spread_ticks: f64,
    pub vol_scale: f64,
    pub start_ts_ms: i64,
    pub tick_interval_ms: i64,
    pub symbol: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ticks: 10_000,
            seed: 0,
            regime: Regime::RandomWalk,
            tick_size: 0.01,
            base_price: 100.0,
            spread_ticks: 2.0,
            vol_scale: 1.0,
            // 2022-07-03T00:00:00Z
            start_ts_ms: 1_656_806_400_000,
            tick_interval_ms: 100,
            symbol: "SYN-USD".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), MarketDataError> {
        let bad = |m: &str| Err(MarketDataError::InvalidConfig(m.to_string()));
        if self.n_ticks == 0 {
            return bad("n_ticks must be >= 1");
        }
        if !(self.tick_size > 0.0 && self.tick_size.is_finite()) {
            return bad("tick_size must be positive");
        }
        if !(self.spread_ticks >= 1.0 && self.spread_ticks.is_finite()) {
            return bad("spread_ticks must be >= 1");
        }
        if !(self.vol_scale >= 0.0 && self.vol_scale.is_finite()) {
            return bad("vol_scale must be non-negative");
        }
        if self.tick_interval_ms <= 0 {
            return bad("tick_interval_ms must be positive");
        }
        if self.base_price <= self.floor_mid() {
            return bad("base_price too low for a ten-level book");
        }
        match self.regime {
            Regime::Sawtooth { period, amplitude_ticks } => {
                if period < 2 || period % 2 != 0 {
                    return bad("sawtooth period must be even and >= 2");
                }
                if !amplitude_ticks.is_finite() {
                    return bad("amplitude must be finite");
                }
            }
            Regime::TrendPlusNoise { period, drift_ticks_per_tick, amplitude_ticks } => {
                if period == 0 || !drift_ticks_per_tick.is_finite() || !amplitude_ticks.is_finite() {
                    return bad("trend period must be >= 1 with finite drift and amplitude");
                }
            }
            Regime::RandomWalk => {}
        }
        Ok(())
    }

    /// Lowest mid that still keeps the deepest bid positive.
    fn floor_mid(&self) -> f64 {
        (self.spread_ticks / 2.0 + DEPTH as f64) * self.tick_size
    }
}

/// Triangle wave in [0, 1] over `period`; exact at integer phases.
fn triangle(t: usize, period: usize) -> f64 {
    let half = period / 2;
    let phase = t % period;
    if phase <= half {
        phase as f64 / half as f64
    } else {
        (period - phase) as f64 / half as f64
    }
}

/// Generates the mid path (in price units) for `cfg`.
pub fn synth_mids(cfg: &SynthConfig) -> Result<Vec<f64>, MarketDataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let floor = cfg.floor_mid();
    let reflect = |m: f64| if m < floor { 2.0 * floor - m } else { m };
    let tick = cfg.tick_size;
    let mut mids = Vec::with_capacity(cfg.n_ticks);
    match cfg.regime {
        Regime::RandomWalk => {
            let mut m = cfg.base_price;
            for t in 0..cfg.n_ticks {
                if t > 0 {
                    m = reflect(m + tick * cfg.vol_scale * noise.sample(&mut rng));
                }
                mids.push(m);
            }
        }
        Regime::TrendPlusNoise {
            drift_ticks_per_tick,
            amplitude_ticks,
            period,
        } => {
            for t in 0..cfg.n_ticks {
                let phase = 2.0 * std::f64::consts::PI * (t % period) as f64 / period as f64;
                let trend = drift_ticks_per_tick * t as f64 + amplitude_ticks * phase.sin();
                let eps = if t == 0 { 0.0 } else { cfg.vol_scale * noise.sample(&mut rng) };
                mids.push(reflect(cfg.base_price + tick * (trend + eps)));
            }
        }
        Regime::Sawtooth { period, amplitude_ticks } => {
            for t in 0..cfg.n_ticks {
                mids.push(reflect(cfg.base_price + tick * amplitude_ticks * triangle(t, period)));
            }
        }
    }
    Ok(mids)
}

/// Builds a full synthetic [`TickSeries`]: the regime drives the mid, and
/// each tick's book is ten levels one tick apart on either side of it with
/// log-normal volumes.
pub fn synth_lob(cfg: &SynthConfig) -> Result<TickSeries, MarketDataError> {
    let mids = synth_mids(cfg)?;
    // Volumes draw from their own stream so the mid path does not depend on
    // book construction.
    let mut vol_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let vol = LogNormal::new(0.0, 0.5).expect("valid log-normal");
    let half_spread = cfg.spread_ticks / 2.0;
    let mut series = TickSeries::new(cfg.symbol.clone(), "synth");
    series.snapshots.reserve(mids.len());
    for (t, &mid) in mids.iter().enumerate() {
        let mut asks = [Level { price: 0.0, volume: 0.0 }; DEPTH];
        let mut bids = asks;
        for i in 0..DEPTH {
            let offset = (half_spread + i as f64) * cfg.tick_size;
            asks[i] = Level { price: mid + offset, volume: vol.sample(&mut vol_rng) };
            bids[i] = Level { price: mid - offset, volume: vol.sample(&mut vol_rng) };
        }
        let snap = LobSnapshot::new(cfg.start_ts_ms + t as i64 * cfg.tick_interval_ms, &asks, &bids)
            .map_err(|violation| MarketDataError::Invariant { line: t + 1, violation })?;
        series.snapshots.push(snap);
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::mid_price;
    use proptest::prelude::*;

    #[test]
    fn sawtooth_mid_is_exactly_periodic() {
        let cfg = SynthConfig {
            n_ticks: 100,
            regime: Regime::Sawtooth { period: 40, amplitude_ticks: 20.0 },
            ..Default::default()
        };
        let mids = synth_lob(&cfg).unwrap().mids();
        for t in 40..100 {
            assert_eq!(mids[t].to_bits(), mids[t - 40].to_bits(), "t = {t}");
        }
        assert!(mids[20] > mids[0]);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = SynthConfig { n_ticks: 10_000, seed: 7, ..Default::default() };
        assert_eq!(synth_lob(&cfg).unwrap(), synth_lob(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..cfg.clone() };
        assert_ne!(synth_lob(&cfg).unwrap(), synth_lob(&other).unwrap());
    }

    #[test]
    fn trend_drift_over_seeds() {
        // Drift 0.01 tick/tick over 10⁴ ticks is 100 ticks; noise around the
        // trend is stationary so the endpoint difference has sd √2 ticks.
        for seed in 0..20 {
            let cfg = SynthConfig {
                n_ticks: 10_000,
                seed,
                regime: Regime::TrendPlusNoise {
                    drift_ticks_per_tick: 0.01,
                    amplitude_ticks: 0.0,
                    period: 1000,
                },
                ..Default::default()
            };
            let mids = synth_lob(&cfg).unwrap().mids();
            let drift_ticks = (mids[9_999] - mids[0]) / cfg.tick_size;
            assert!((drift_ticks - 100.0).abs() <= 30.0, "seed {seed}: {drift_ticks}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(synth_lob(&SynthConfig { n_ticks: 0, ..Default::default() }).is_err());
        assert!(synth_lob(&SynthConfig { tick_size: 0.0, ..Default::default() }).is_err());
        assert!(synth_lob(&SynthConfig {
            regime: Regime::Sawtooth { period: 7, amplitude_ticks: 3.0 },
            ..Default::default()
        })
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn every_snapshot_is_valid(
            seed in any::<u64>(),
            n in 1usize..400,
            regime_ix in 0usize..3,
            tick in 0.001f64..1.0,
            spread in 1.0f64..6.0,
            vol in 0.0f64..20.0,
        ) {
            let regime = match regime_ix {
                0 => Regime::RandomWalk,
                1 => Regime::TrendPlusNoise { drift_ticks_per_tick: -0.5, amplitude_ticks: 30.0, period: 50 },
                _ => Regime::Sawtooth { period: 20, amplitude_ticks: 15.0 },
            };
            let cfg = SynthConfig {
                n_ticks: n, seed, regime, tick_size: tick, spread_ticks: spread,
                vol_scale: vol, base_price: 40.0 * tick, ..Default::default()
            };
            let series = synth_lob(&cfg).unwrap();
            prop_assert_eq!(series.len(), n);
            for s in &series.snapshots {
                prop_assert!(s.validate().is_ok());
                prop_assert!(mid_price(s) > 0.0);
            }
        }
    }
}
