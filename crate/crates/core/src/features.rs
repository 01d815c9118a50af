//! Per-tick scalar features and the model input vector.

use crate::market_data::{LobSnapshot, DEPTH};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("level {0} outside 1..=10")]
    LevelOutOfRange(usize),
    #[error("zero total volume at level {0}; imbalance undefined")]
    ZeroVolume(usize),
}

pub fn mid_price(s: &LobSnapshot) -> f64 {
    (s.asks[0].price + s.bids[0].price) / 2.0
}

/// Volume imbalance `v_bid / (v_ask + v_bid)` at a 1-based level.
pub fn imbalance(s: &LobSnapshot, level: usize) -> Result<f64, FeatureError> {
    if !(1..=DEPTH).contains(&level) {
        return Err(FeatureError::LevelOutOfRange(level));
    }
    let (ask, bid) = (s.asks[level - 1], s.bids[level - 1]);
    let total = ask.volume + bid.volume;
    if total <= 0.0 {
        return Err(FeatureError::ZeroVolume(level));
    }
    Ok(bid.volume / total)
}

/// Imbalance-weighted price `I·p_ask + (1−I)·p_bid` at a 1-based level.
pub fn micro_price(s: &LobSnapshot, level: usize) -> Result<f64, FeatureError> {
    let i = imbalance(s, level)?;
    let (ask, bid) = (s.asks[level - 1].price, s.bids[level - 1].price);
    Ok(i * ask + (1.0 - i) * bid)
}

/// Level-interleaved `[ap_i, av_i, bp_i, bv_i]` for i = 1..10, with the mid
/// appended when `include_mid` is set.
pub fn feature_vector(s: &LobSnapshot, include_mid: bool) -> Vec<f64> {
    let mut v = Vec::with_capacity(4 * DEPTH + 1);
    for i in 0..DEPTH {
        v.extend([s.asks[i].price, s.asks[i].volume, s.bids[i].price, s.bids[i].volume]);
    }
    if include_mid {
        v.push(mid_price(s));
    }
    v
}

pub fn feature_dim(include_mid: bool) -> usize {
    4 * DEPTH + usize::from(include_mid)
}

/// Inverse of [`feature_vector`] on its first 40 entries.
pub fn snapshot_from_features(ts: i64, v: &[f64]) -> Result<LobSnapshot, crate::market_data::BookViolation> {
    use crate::market_data::Level;
    let mut asks = Vec::with_capacity(DEPTH);
    let mut bids = Vec::with_capacity(DEPTH);
    for c in v.chunks_exact(4).take(DEPTH) {
        asks.push(Level { price: c[0], volume: c[1] });
        bids.push(Level { price: c[2], volume: c[3] });
    }
    LobSnapshot::new(ts, &asks, &bids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::io::{csv_header, csv_row, read_from, Format};
    use crate::market_data::snapshot::fixtures::simple_book;
    use crate::market_data::Level;
    use proptest::prelude::*;

    fn book_with(ask: f64, bid: f64, v_ask: f64, v_bid: f64) -> LobSnapshot {
        let asks: Vec<Level> = (0..DEPTH)
            .map(|i| Level { price: ask + i as f64, volume: if i == 0 { v_ask } else { 1.0 } })
            .collect();
        let bids: Vec<Level> = (0..DEPTH)
            .map(|i| Level { price: bid - 0.5 * i as f64, volume: if i == 0 { v_bid } else { 1.0 } })
            .collect();
        LobSnapshot::new(0, &asks, &bids).unwrap()
    }

    #[test]
    fn mid_of_simple_book() {
        assert!((mid_price(&simple_book(0)) - 100.01).abs() < 1e-12);
        let s = book_with(50.0 + 0.25, 50.0 - 0.25, 1.0, 1.0);
        assert_eq!(mid_price(&s), 50.0);
    }

    #[test]
    fn micro_price_cases() {
        let s = book_with(101.0, 100.0, 1.0, 3.0);
        assert_eq!(imbalance(&s, 1).unwrap(), 0.75);
        assert!((micro_price(&s, 1).unwrap() - 100.75).abs() < 1e-12);

        let s = book_with(101.0, 100.0, 2.0, 2.0);
        assert_eq!(micro_price(&s, 1).unwrap(), mid_price(&s));

        let s = book_with(101.0, 100.0, 5.0, 0.0);
        assert_eq!(micro_price(&s, 1).unwrap(), 100.0);

        let s = book_with(101.0, 100.0, 0.0, 0.0);
        assert_eq!(micro_price(&s, 1), Err(FeatureError::ZeroVolume(1)));
        assert_eq!(micro_price(&s, 11), Err(FeatureError::LevelOutOfRange(11)));
        assert_eq!(micro_price(&s, 0), Err(FeatureError::LevelOutOfRange(0)));
    }

    #[test]
    fn feature_layout() {
        let s = simple_book(0);
        let v = feature_vector(&s, false);
        assert_eq!(v.len(), 40);
        assert_eq!(v[0], s.asks[0].price);
        assert_eq!(v[2], s.bids[0].price);
        let v = feature_vector(&s, true);
        assert_eq!(v.len(), 41);
        assert_eq!(v[40], mid_price(&s));
    }

    #[test]
    fn features_match_csv_fields() {
        let s = simple_book(9);
        let row = csv_row(&s);
        let text = format!("{}\n{row}", csv_header());
        let parsed = read_from(text.as_bytes(), Format::Csv).unwrap();
        let fields: Vec<f64> = row.split(',').skip(1).map(|f| f.parse().unwrap()).collect();
        assert_eq!(feature_vector(&parsed.snapshots[0], false), fields);
    }

    prop_compose! {
        fn arb_book()(
            mid in 1.0f64..1e5,
            half in 1e-4f64..1.0,
            steps in prop::collection::vec(1e-4f64..1.0, 2 * DEPTH),
            vols in prop::collection::vec(0.0f64..100.0, 2 * DEPTH),
        ) -> LobSnapshot {
            let mut asks = Vec::new();
            let mut bids = Vec::new();
            let (mut a, mut b) = (mid + half, mid - half * mid.min(1.0) * 0.5);
            for i in 0..DEPTH {
                asks.push(Level { price: a, volume: vols[i] });
                bids.push(Level { price: b.max(1e-9), volume: vols[DEPTH + i] });
                a += steps[i];
                b -= steps[DEPTH + i] * b / (mid + 1.0) ;
            }
            LobSnapshot::new(0, &asks, &bids).unwrap()
        }
    }

    proptest! {
        #[test]
        fn betweenness(s in arb_book()) {
            let (ask, bid) = (s.asks[0].price, s.bids[0].price);
            let m = mid_price(&s);
            prop_assert!(bid < m && m < ask);
            if let Ok(mp) = micro_price(&s, 1) {
                prop_assert!(bid <= mp && mp <= ask);
            }
        }

        #[test]
        fn scale_covariance(s in arb_book(), c in prop_oneof![Just(2.0f64), Just(0.5), Just(4.0), Just(0.25)]) {
            // Powers of two scale exactly in binary floating point.
            let scaled = {
                let mut t = s.clone();
                for l in t.asks.iter_mut().chain(t.bids.iter_mut()) { l.price *= c; }
                t
            };
            prop_assert_eq!(mid_price(&scaled), c * mid_price(&s));
            if let Ok(mp) = micro_price(&s, 1) {
                prop_assert!((micro_price(&scaled, 1).unwrap() - c * mp).abs() <= 1e-12 * c * mp);
            }
        }

        #[test]
        fn feature_vector_round_trips(s in arb_book()) {
            let v = feature_vector(&s, false);
            let back = snapshot_from_features(s.ts, &v).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(feature_vector(&back, false), v);
        }
    }
}
