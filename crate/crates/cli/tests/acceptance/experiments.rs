//! Training experiments on synthetic regimes.

use std::time::{Duration, Instant};

use lobforge_core::dataset::{Dataset, DatasetConfig, Split, SplitSpec, Task};
use lobforge_core::labeling::{calibrate_threshold, label_series, LabelConfig};
use lobforge_core::market_data::{synth_lob, Regime, SynthConfig};
use lobforge_core::metrics::evaluate;
use lobforge_core::models::{HeadKind, Model, ModelConfig, ModelKind};
use lobforge_core::train::{train, TrainConfig};

const K: usize = 20;
const LX: usize = 40;

fn movement_dataset(regime: Regime, n_ticks: usize, seed: u64) -> Dataset {
    let series = synth_lob(&SynthConfig { n_ticks, seed, regime, ..Default::default() }).unwrap();
    let delta = calibrate_threshold(&series, K).unwrap().delta;
    let labels = label_series(&series, &LabelConfig { horizon_k: K, delta }).unwrap();
    let cfg = DatasetConfig {
        task: Task::Movement,
        lx: LX,
        k: K,
        split: SplitSpec::fraction(0.6, 0.2, 0.2),
        include_mid: false,
        seed,
    };
    Dataset::build(&series, Some(&labels), &cfg).unwrap()
}

fn model(kind: ModelKind, data: &Dataset, decompose_window: usize, seed: u64) -> Model {
    Model::new(ModelConfig {
        kind,
        input_dim: data.dim(),
        hidden_dim: 32,
        d_model: 32,
        ffn_dim: 64,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        lx: LX,
        k: K,
        head: HeadKind::Movement,
        decompose_window,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Trains with `cfg` and returns test accuracy and wall time.
fn test_accuracy(mut m: Model, data: &Dataset, cfg: &TrainConfig) -> (f64, Duration) {
    let t = Instant::now();
    train(&mut m, data, cfg).unwrap();
    let report = evaluate(&m, data, Split::Test, 512).unwrap();
    (report.movement.unwrap().accuracy, t.elapsed())
}

/// Sawtooth mids make every label a function of the window's phase.
pub fn learnability() -> String {
    let data = movement_dataset(Regime::Sawtooth { period: 200, amplitude_ticks: 50.0 }, 12_000, 1);
    let cfg = TrainConfig { lr: 1e-3, epochs: 10, seed: 1, ..TrainConfig::for_task(Task::Movement) };
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for kind in [ModelKind::Lstm, ModelKind::Dlstm, ModelKind::Transformer] {
        let (acc, time) = test_accuracy(model(kind, &data, 9, 1), &data, &cfg);
        println!("    {kind:?}: test accuracy {acc:.4} in {time:.1?}");
        if acc < 0.95 || time >= Duration::from_secs(600) {
            failures.push(format!("{kind:?} {acc:.4} in {time:.1?}"));
        }
        lines.push(format!("{kind:?} {acc:.4}"));
    }
    assert!(failures.is_empty(), "below 95% or over 10 min: {}", failures.join(", "));
    lines.join(", ")
}

/// Sine trend five times the noise scale; default training settings.
pub fn decomposition_advantage() -> String {
    let regime = Regime::TrendPlusNoise { drift_ticks_per_tick: 0.0, amplitude_ticks: 5.0, period: 200 };
    let (mut lstm, mut dlstm) = (Vec::new(), Vec::new());
    for seed in 1..=5 {
        let data = movement_dataset(regime.clone(), 10_000, seed);
        let cfg = TrainConfig { seed, ..TrainConfig::for_task(Task::Movement) };
        let (a, _) = test_accuracy(model(ModelKind::Lstm, &data, 25, seed), &data, &cfg);
        let (b, _) = test_accuracy(model(ModelKind::Dlstm, &data, 25, seed), &data, &cfg);
        println!("    seed {seed}: lstm {a:.4} dlstm {b:.4}");
        lstm.push(a);
        dlstm.push(b);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ml, md) = (mean(&lstm), mean(&dlstm));
    let per_seed: Vec<String> = lstm.iter().zip(&dlstm).map(|(a, b)| format!("{a:.4}/{b:.4}")).collect();
    assert!(md >= ml, "mean dlstm {md:.4} < lstm {ml:.4}; per seed lstm/dlstm {per_seed:?}");
    format!("mean lstm {ml:.4}, dlstm {md:.4}; per seed lstm/dlstm {}", per_seed.join(" "))
}
