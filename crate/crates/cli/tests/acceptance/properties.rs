use lobforge_autodiff::layers::series_decompose;
use lobforge_autodiff::{Tape, Tensor};
use lobforge_core::labeling::{
    calibrate_threshold, classify, label_series, threshold_grid, LabelConfig, MovementLabel,
};
use lobforge_core::market_data::{synth_lob, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Edge-replicated centred moving average, one column at a time.
fn moving_average(x: &[f64], len: usize, feats: usize, window: usize) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for f in 0..feats {
        for t in 0..len {
            let vals: Vec<f64> = (-half..=half)
                .map(|j| x[(t as isize + j).clamp(0, len as isize - 1) as usize * feats + f])
                .collect();
            out[t * feats + f] = vals.iter().sum::<f64>() / window as f64;
        }
    }
    out
}

pub fn decomposition() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut worst_identity, mut worst_trend) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let len = rng.random_range(1..=150);
        let feats = rng.random_range(1..=4);
        let window = 2 * rng.random_range(0..=20) + 1;
        let scale = 10f64.powf(rng.random_range(-2.0..3.0));
        let x: Vec<f64> = (0..len * feats).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![len, feats], x.clone()).unwrap()).unwrap();
        let (trend, rem) = series_decompose(&mut tape, xv, 0, window).unwrap();
        let (trend, rem) = (tape.value(trend).data(), tape.value(rem).data());
        let oracle = moving_average(&x, len, feats, window);
        for i in 0..x.len() {
            worst_identity = worst_identity.max((trend[i] + rem[i] - x[i]).abs());
            worst_trend = worst_trend.max((trend[i] - oracle[i]).abs() / scale);
        }
    }
    assert!(worst_identity <= 1e-12, "trend + remainder off by {worst_identity:e}");
    assert!(worst_trend <= 1e-12, "trend differs from the moving average by {worst_trend:e}");

    for _ in 0..200 {
        let c = rng.random_range(-1.0..1.0) * 10f64.powf(rng.random_range(-6.0..6.0));
        let len = rng.random_range(1..=100);
        let window = 2 * rng.random_range(0..=30) + 1;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::full(&[2, len, 3], c)).unwrap();
        let (_, rem) = series_decompose(&mut tape, xv, 1, window).unwrap();
        assert!(tape.value(rem).data().iter().all(|&r| r == 0.0), "constant {c} left a remainder");
    }
    format!("max |trend + remainder - x| = {worst_identity:e}; 200 constants give exact zero")
}

/// Smoothed relative changes computed directly from the mids.
fn changes(mid: &[f64], k: usize) -> Vec<f64> {
    (k - 1..mid.len() - k)
        .map(|t| {
            let past = mid[t + 1 - k..=t].iter().sum::<f64>() / k as f64;
            let future = mid[t + 1..=t + k].iter().sum::<f64>() / k as f64;
            (future - past) / past
        })
        .collect()
}

fn shares(changes: &[f64], delta: f64) -> [f64; 3] {
    let mut c = [0usize; 3];
    for &l in changes {
        let class = if l > delta { 2 } else if l < -delta { 0 } else { 1 };
        c[class] += 1;
    }
    c.map(|v| v as f64 / changes.len() as f64)
}

pub fn labels() -> String {
    let k = 20;
    let series = synth_lob(&SynthConfig { n_ticks: 3000, seed: 31, ..Default::default() }).unwrap();
    let delta = calibrate_threshold(&series, k).unwrap().delta;
    let cfg = LabelConfig { horizon_k: k, delta };
    let base = label_series(&series, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled = label_series(&series.scaled_prices(c), &cfg).unwrap();
        assert_eq!(scaled.mask, base.mask);
        assert_eq!(scaled.labels, base.labels, "labels changed under scale {c}");
    }

    // Stationary counts along an increasing sequence of thresholds.
    let l: Vec<f64> = base.changes.iter().zip(&base.mask).filter(|(_, &m)| m).map(|(&l, _)| l).collect();
    let mut deltas = threshold_grid(&l).unwrap();
    deltas.extend((0..100).map(|_| rng.random_range(0.0..2.0 * delta)));
    deltas.push(0.0);
    deltas.sort_by(f64::total_cmp);
    let counts: Vec<usize> = deltas
        .iter()
        .map(|&d| l.iter().filter(|&&x| classify(x, d) == MovementLabel::Stationary).count())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "stationary count decreased as delta grew");
    for &d in &deltas {
        let via_series = label_series(&series, &LabelConfig { horizon_k: k, delta: d }).unwrap().counts()[1];
        assert_eq!(via_series, l.iter().filter(|&&x| x.abs() <= d).count());
    }

    // Calibration on a long random walk against a brute-force grid search.
    let walk = synth_lob(&SynthConfig { n_ticks: 100_000, seed: 2024, ..Default::default() }).unwrap();
    let cal = calibrate_threshold(&walk, k).unwrap();
    let l = changes(&walk.mids(), k);
    let mut abs: Vec<f64> = l.iter().map(|x| x.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let pct = |p: f64| abs[(p * (abs.len() - 1) as f64).round() as usize];
    let (lo, hi) = (pct(0.01), pct(0.99));
    assert!(lo > 0.0);
    let mut best = (f64::NAN, [0.0; 3], f64::INFINITY);
    for i in 0..200 {
        let d = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / 199.0).exp();
        let s = shares(&l, d);
        let imb = s.iter().map(|v| (v - 1.0 / 3.0).abs()).fold(0.0, f64::max);
        if imb < best.2 {
            best = (d, s, imb);
        }
    }
    let tol = 2.0 / l.len() as f64;
    for c in 0..3 {
        assert!((0.30..=0.37).contains(&best.1[c]), "oracle share {c} = {}", best.1[c]);
        assert!((0.30..=0.37).contains(&cal.shares[c]), "calibrated share {c} = {}", cal.shares[c]);
        assert!((cal.shares[c] - best.1[c]).abs() <= tol, "share {c}: {} vs oracle {}", cal.shares[c], best.1[c]);
    }
    assert!((cal.delta - best.0).abs() <= 1e-9 * best.0, "delta {} vs oracle {}", cal.delta, best.0);
    format!(
        "50 scales identical, {} thresholds monotone, shares {:.4?} at delta {:.3e}",
        deltas.len(),
        cal.shares,
        cal.delta
    )
}
