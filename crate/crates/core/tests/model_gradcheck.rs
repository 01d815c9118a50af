mod common;

use common::{check, check_params, random_tensor, TOL};
use lobforge_autodiff::Tensor;
use lobforge_core::models::{ContextMode, HeadKind, Model, ModelConfig, ModelKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// The `pub fn` checks are shared with the acceptance suite; `suite` below
// registers them as tests here.

const SEEDS: u64 = 20;
const BATCH: usize = 2;

fn tiny(kind: ModelKind, head: HeadKind, seed: u64) -> ModelConfig {
    ModelConfig {
        kind,
        input_dim: 3,
        hidden_dim: 4,
        n_layers: 1,
        n_heads: 2,
        d_model: 4,
        ffn_dim: 6,
        encoder_layers: 1,
        decoder_layers: 1,
        lx: 5,
        k: 3,
        head,
        decompose_window: 3,
        context: ContextMode::Last,
        seed,
    }
}

fn timestamps(seed: u64, n: usize) -> Vec<i64> {
    // Spread over hours so every calendar table gets several rows touched.
    (0..n as i64).map(|i| 1_656_806_400_000 + (seed as i64 * 7 + i) * 61_001).collect()
}

/// Checks parameter and input gradients of `cfg`'s model over all seeds.
fn run(kind: ModelKind, head: HeadKind, teacher: bool, tweak: impl Fn(&mut ModelConfig)) {
    for seed in 0..SEEDS {
        let mut cfg = tiny(kind, head, seed);
        tweak(&mut cfg);
        let mut model = Model::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        // Zero-initialised biases can leave a ReLU sitting exactly on its
        // kink (e.g. an all-dead hidden layer feeding the next one); checks
        // are run at a generic point instead.
        for id in model.params.ids().collect::<Vec<_>>() {
            let noise = random_tensor(&mut rng, model.params.get(id).shape(), 0.1);
            model.params.get_mut(id).add_assign(&noise);
        }
        let x = random_tensor(&mut rng, &[BATCH, cfg.lx, cfg.input_dim], 1.0);
        let y: Option<Tensor> = teacher.then(|| random_tensor(&mut rng, &[BATCH, cfg.k], 1.0));
        let ts = timestamps(seed, BATCH * cfg.lx);

        let err = check_params(&model.params, seed, |tape, store| {
            let xv = tape.constant(x.clone())?;
            model
                .forward_with(tape, store, xv, &ts, y.as_ref())
                .map_err(|e| lobforge_autodiff::NnError::InvalidArgument(e.to_string()))
        });
        assert!(err <= TOL, "{kind:?} {head:?} params seed {seed}: {err:e}");

        let err = check(std::slice::from_ref(&x), seed, |tape, vars| {
            model
                .forward(tape, vars[0], &ts, y.as_ref())
                .map_err(|e| lobforge_autodiff::NnError::InvalidArgument(e.to_string()))
        });
        assert!(err <= TOL, "{kind:?} {head:?} input seed {seed}: {err:e}");
    }
}

pub fn mlp() {
    run(ModelKind::Mlp, HeadKind::Movement, false, |_| {});
    run(ModelKind::Mlp, HeadKind::RegressionSeq, false, |_| {});
}

pub fn lstm() {
    run(ModelKind::Lstm, HeadKind::Movement, false, |_| {});
    run(ModelKind::Lstm, HeadKind::RegressionSeq, false, |c| c.n_layers = 2);
}

pub fn dlstm_through_both_branches() {
    run(ModelKind::Dlstm, HeadKind::Movement, false, |_| {});
    run(ModelKind::Dlstm, HeadKind::RegressionSeq, false, |c| c.decompose_window = 5);
}

pub fn seq2seq_free_running_and_teacher_forced() {
    run(ModelKind::Seq2seq, HeadKind::RegressionSeq, false, |_| {});
    run(ModelKind::Seq2seq, HeadKind::RegressionSeq, true, |c| c.context = ContextMode::Mean);
}

pub fn attention_decoder() {
    run(ModelKind::Attention, HeadKind::RegressionSeq, false, |_| {});
    run(ModelKind::Attention, HeadKind::RegressionSeq, true, |_| {});
}

pub fn transformer() {
    run(ModelKind::Transformer, HeadKind::Movement, false, |_| {});
    run(ModelKind::Transformer, HeadKind::RegressionSeq, false, |c| c.k = 7);
}

mod suite {
    #[test]
    fn mlp() {
        super::mlp();
    }

    #[test]
    fn lstm() {
        super::lstm();
    }

    #[test]
    fn dlstm_through_both_branches() {
        super::dlstm_through_both_branches();
    }

    #[test]
    fn seq2seq_free_running_and_teacher_forced() {
        super::seq2seq_free_running_and_teacher_forced();
    }

    #[test]
    fn attention_decoder() {
        super::attention_decoder();
    }

    #[test]
    fn transformer() {
        super::transformer();
    }
}
