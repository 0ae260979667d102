use std::collections::BTreeMap;

use proptest::prelude::*;
use salm_core::nn::{Arch, LanguageModel, LmConfig, Mode, State};
use salm_core::rng::RngStream;
use salm_core::tensor::{clip_grad_norm, AdamW, Graph, Sgd, Tensor};
use salm_core::train::{
    batch_loss, early_stop, make_windows, train, BpttBatcher, OptimizerKind, Schedule, TrainConfig, WindowMode,
};
use salm_oracles::schedule as oracle;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn eval_windows_partition_the_stream(n in 1usize..3000, block in 1usize..200, stride_pick in 0usize..200) {
        let stride = 1 + stride_pick % block;
        let ws = make_windows(n, block, stride, WindowMode::Eval).unwrap();
        let scored: Vec<(usize, usize)> = ws.iter().map(|w| (w.scored.start, w.scored.end)).collect();
        prop_assert!(oracle::coverage(n, &scored).iter().all(|&c| c == 1));
        for w in &ws {
            prop_assert!(w.start <= w.scored.start && w.scored.end <= w.start + w.len);
            prop_assert!(w.len <= block && w.start + w.len <= n);
        }
    }

    #[test]
    fn bptt_batches_cover_exactly_the_adjacent_pairs(
        stream in proptest::collection::vec(0u32..9, 4..400),
        batch in 1usize..5,
        len in 1usize..30,
        variable in any::<bool>(),
    ) {
        prop_assume!(stream.len() >= 2 * batch);
        let batcher = BpttBatcher::new(&stream, batch, len.max(10), variable, RngStream::new(len as u64)).unwrap();
        let mut got: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for b in batcher {
            for (&x, &y) in b.inputs.iter().zip(&b.targets) {
                *got.entry((x, y)).or_insert(0) += 1;
            }
        }
        prop_assert_eq!(got, oracle::adjacent_pairs(&stream, batch));
    }

    #[test]
    fn bptt_rows_continue_across_batches(stream in proptest::collection::vec(0u32..9, 40..300), batch in 1usize..4) {
        let mut batcher = BpttBatcher::new(&stream, batch, 7, false, RngStream::new(0)).unwrap();
        let rows = batcher.rows().to_vec();
        let mut cursor = 0;
        while let Some(b) = batcher.next_batch() {
            for (r, row) in rows.iter().enumerate().take(batch) {
                prop_assert_eq!(&b.inputs[r * b.len..(r + 1) * b.len], &row[cursor..cursor + b.len]);
            }
            cursor += b.len;
        }
        prop_assert_eq!(cursor, rows[0].len() - 1);
    }
}

#[test]
fn early_stop_agrees_with_window_oracle() {
    let mut rng = RngStream::new(3);
    for i in 0..1000 {
        let n = rng.below(15);
        let patience = 1 + rng.below(4);
        let mut level = 5.0;
        let history: Vec<f64> = (0..n)
            .map(|_| {
                // mostly improving, sometimes flat or worse, with exact repeats
                match rng.below(4) {
                    0 => level,
                    1 => level + rng.uniform(),
                    _ => {
                        level -= rng.uniform() * 0.5;
                        level
                    }
                }
            })
            .collect();
        assert_eq!(
            early_stop(&history, patience),
            oracle::should_stop(&history, patience, 1e-6),
            "case {i}: {history:?} patience {patience}"
        );
    }
}

#[test]
fn sgd_step_on_a_quadratic() {
    let mut w = vec![Tensor::scalar(1.0)];
    let grad = vec![Tensor::scalar(1.0)];
    Sgd { lr: 0.1 }.step(&mut w, &grad).unwrap();
    assert!((w[0].item() - 0.9).abs() < 1e-15);
}

#[test]
fn clipping_scales_to_the_bound() {
    let mut g = vec![Tensor::new(&[2], vec![6.0, 8.0]).unwrap()];
    let norm = clip_grad_norm(&mut g, 0.25).unwrap();
    assert_eq!(norm, 10.0);
    assert!((g[0].data()[0] - 6.0 * 0.025).abs() < 1e-15);
    assert!((g[0].data()[1] - 8.0 * 0.025).abs() < 1e-15);
}

#[test]
fn adamw_decay_with_zero_gradient() {
    let mut p = vec![Tensor::scalar(2.0)];
    let mut opt = AdamW::new(1e-3, 0.01);
    opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
    assert!((p[0].item() - 2.0 * (1.0 - 1e-3 * 0.01)).abs() < 1e-15);
}

fn lstm_config(vocab: usize) -> LmConfig {
    let mut c = LmConfig::new(Arch::Lstm, vocab);
    c.emb_dim = 8;
    c.hidden_dim = 8;
    c.n_layers = 1;
    c
}

/// Running two consecutive BPTT batches with the carried state gives the
/// same losses as one batch of twice the length.
#[test]
fn state_carry_matches_longer_batch() {
    let mut rng = RngStream::new(5);
    let stream: Vec<u32> = (0..200).map(|_| rng.below(9) as u32).collect();
    let m = LanguageModel::new(lstm_config(9), &mut RngStream::new(1)).unwrap();
    let mut short = BpttBatcher::new(&stream, 2, 10, false, RngStream::new(0)).unwrap();
    let mut long = BpttBatcher::new(&stream, 2, 20, false, RngStream::new(0)).unwrap();
    let (a, b, ab) = (short.next_batch().unwrap(), short.next_batch().unwrap(), long.next_batch().unwrap());
    let (la, state) = batch_loss(&m, &a.inputs, &a.targets, 2, &State::Empty).unwrap();
    let (lb, _) = batch_loss(&m, &b.inputs, &b.targets, 2, &state).unwrap();
    let (lab, _) = batch_loss(&m, &ab.inputs, &ab.targets, 2, &State::Empty).unwrap();
    assert!(((la + lb) / 2.0 - lab).abs() < 1e-6);
}

fn periodic_stream(n: usize, seed: u64) -> Vec<u32> {
    let pattern = [2u32, 3, 4, 5, 6, 7, 1];
    let mut rng = RngStream::new(seed);
    (0..n)
        .map(|i| if rng.uniform() < 0.1 { rng.below(9) as u32 } else { pattern[i % pattern.len()] })
        .collect()
}

fn tiny_transformer() -> (LanguageModel, TrainConfig) {
    let mut c = LmConfig::new(Arch::Transformer, 9);
    c.emb_dim = 16;
    c.hidden_dim = 16;
    c.n_layers = 1;
    c.n_heads = 2;
    c.block_size = 16;
    c.stride_train = 8;
    c.stride_eval = 8;
    c.dropout = Default::default();
    let m = LanguageModel::new(c, &mut RngStream::new(7)).unwrap();
    let mut t = TrainConfig::for_arch(Arch::Transformer);
    t.optimizer = OptimizerKind::AdamW;
    t.lr = 3e-3;
    t.batch_size = 4;
    t.max_steps = 80;
    t.eval_every = 40;
    t.schedule = Schedule::Linear;
    t.seed = 11;
    (m, t)
}

#[test]
fn transformer_training_lowers_validation_loss() {
    let (m, t) = tiny_transformer();
    let (tr, va) = (periodic_stream(1500, 1), periodic_stream(300, 2));
    let out = train(m, &t, &tr, &va).unwrap();
    assert!(out.aborted.is_none());
    let first = out.log.records.first().unwrap().valid_loss;
    let best = out.log.best_valid().unwrap();
    assert!(best < first - 0.5, "{first} -> {best}");
}

#[test]
fn same_seed_same_run() {
    let (tr, va) = (periodic_stream(800, 3), periodic_stream(200, 4));
    let (m1, mut t) = tiny_transformer();
    t.max_steps = 20;
    t.eval_every = 10;
    let a = train(m1, &t, &tr, &va).unwrap();
    let (m2, _) = tiny_transformer();
    let b = train(m2, &t, &tr, &va).unwrap();
    assert!(a.log.same_curve(&b.log));
    assert_eq!(a.model, b.model);
}

#[test]
fn every_architecture_trains_a_few_steps() {
    for arch in Arch::ALL {
        let mut c = LmConfig::new(arch, 9);
        c.emb_dim = 8;
        c.hidden_dim = 8;
        c.n_heads = 2;
        c.block_size = 16;
        c.stride_train = 8;
        c.stride_eval = 8;
        c.bptt_len = 12;
        let m = LanguageModel::new(c, &mut RngStream::new(1)).unwrap();
        let mut t = TrainConfig::for_arch(arch);
        t.max_steps = 6;
        t.max_epochs = 0;
        t.eval_every = 3;
        t.batch_size = 4;
        let out = train(m, &t, &periodic_stream(600, 5), &periodic_stream(100, 6)).unwrap();
        assert!(out.aborted.is_none(), "{arch}");
        assert_eq!(out.steps, 6, "{arch}");
        assert!(out.log.records.iter().all(|r| r.valid_loss.is_finite()), "{arch}");
    }
}

#[test]
fn exploding_learning_rate_aborts_with_best_model_kept() {
    let mut c = lstm_config(9);
    c.dropout = Default::default();
    let m = LanguageModel::new(c, &mut RngStream::new(2)).unwrap();
    let mut t = TrainConfig::for_arch(Arch::Lstm);
    t.lr = 1e200;
    t.clip = 0.0;
    t.max_steps = 50;
    t.eval_every = 1;
    let out = train(m.clone(), &t, &periodic_stream(600, 7), &periodic_stream(100, 8)).unwrap();
    assert!(matches!(out.aborted, Some(salm_core::Error::Numeric(_))), "{:?}", out.aborted);
    // the best model is finite and scores the validation stream
    let mut g = Graph::new();
    let p = out.model.bind(&mut g);
    let f = out.model.forward(&mut g, &p, &[2, 3, 4], 1, &State::Empty, &mut Mode::Eval).unwrap();
    assert!(g.value(f.logits).is_finite());
}
