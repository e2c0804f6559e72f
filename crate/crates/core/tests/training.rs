use std::collections::BTreeMap;

use gotune_core::geometry::{batch_constraint_loss, phi_step, ConstraintBatch};
use gotune_core::trainer::constraint_batch;
use gotune_core::{
    train_go, train_sda, GeometricWeights, MinedExample, Mode, ModelParams, NeighborEntry, NeighborSet, Source,
    TrainConfig, MASK_TOKEN,
};
use proptest::prelude::*;

fn vocab() -> Vec<String> {
    ["positive", "negative", "good", "great", "fine", "bad", "awful", "food", "was", "tasty", "cold", "the", "."]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn entry(token: &str, score: f64, seed: &str, row: usize) -> NeighborEntry {
    NeighborEntry { token: token.into(), score, seed: seed.into(), row }
}

fn neighbor_set() -> NeighborSet {
    NeighborSet {
        task: "sentiment".into(),
        entries: vec![
            entry("positive", 9.0, "positive", 0),
            entry("negative", 9.0, "negative", 1),
            entry("good", 6.0, "positive", 2),
            entry("great", 5.5, "positive", 3),
            entry("fine", 2.0, "positive", 4),
            entry("bad", 6.0, "negative", 5),
            entry("awful", 5.0, "negative", 6),
        ],
        seeds: vec!["positive".into(), "negative".into()],
        k_per_seed: 4,
    }
}

fn example(words: &[&str], target: &str, seed: &str, offset: u64) -> MinedExample {
    let mut tokens: Vec<String> = words.iter().map(|s| s.to_string()).collect();
    let mask_index = tokens.len();
    tokens.push(MASK_TOKEN.into());
    MinedExample { tokens, mask_index, target: target.into(), seed: seed.into(), weight: 1.0, source: Source { shard: 0, offset } }
}

fn dataset() -> Vec<MinedExample> {
    let pos = ["the", "food", "was", "tasty"];
    let neg = ["the", "food", "was", "cold"];
    let mut d = Vec::new();
    for (i, (w, t, s)) in [
        (&pos, "good", "positive"),
        (&pos, "great", "positive"),
        (&neg, "fine", "positive"),
        (&pos, "positive", "positive"),
        (&neg, "bad", "negative"),
        (&neg, "awful", "negative"),
        (&neg, "negative", "negative"),
    ]
    .into_iter()
    .enumerate()
    {
        d.push(example(w, t, s, i as u64));
    }
    d
}

fn model(seed: u64, tied: bool) -> ModelParams {
    ModelParams::init(vocab(), 6, 5, tied, seed).unwrap()
}

#[test]
fn seeds_only_sets_make_go_equal_sda() {
    let mut set = neighbor_set();
    set.entries.retain(|e| e.token == e.seed);
    let data: Vec<_> = dataset().into_iter().filter(|e| e.target == e.seed).collect();
    for tied in [false, true] {
        let cfg = TrainConfig { epochs: 3, batch_size: 2, rng_seed: 4, ..TrainConfig::default() };
        let go = train_go(model(1, tied), &data, &[set.clone()], &cfg).unwrap();
        let sda = train_sda(model(1, tied), &data, &TrainConfig { mode: Mode::Sda, ..cfg }).unwrap();
        assert_eq!(go.params, sda.params);
        assert!(go.weights.is_empty());
    }
}

#[test]
fn go_is_reproducible_and_weights_stay_normalized() {
    let cfg = TrainConfig { epochs: 4, batch_size: 3, phi_steps_per_epoch: 3, rng_seed: 9, ..TrainConfig::default() };
    let a = train_go(model(2, false), &dataset(), &[neighbor_set()], &cfg).unwrap();
    let b = train_go(model(2, false), &dataset(), &[neighbor_set()], &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 4);
    for gw in &a.weights {
        let w = gw.weights().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let c = train_go(model(2, false), &dataset(), &[neighbor_set()], &TrainConfig { rng_seed: 10, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn uncovered_target_is_an_error() {
    let mut data = dataset();
    data.push(example(&["the"], "food", "positive", 99));
    let err = train_go(model(0, false), &data, &[neighbor_set()], &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, gotune_core::Error::UncoveredTarget(_)), "{err:?}");
}

#[test]
fn frozen_output_table_does_not_move() {
    for tied in [false, true] {
        let cfg = TrainConfig { mode: Mode::Sda, epochs: 2, freeze_output: true, ..TrainConfig::default() };
        let before = model(3, tied);
        let after = train_sda(before.clone(), &dataset(), &cfg).unwrap().params;
        let (b, a) = (before.tensors(), after.tensors());
        if tied {
            assert_eq!(b.emb, a.emb);
        } else {
            assert_eq!(b.out, a.out);
            assert_ne!(b.emb, a.emb);
        }
        assert_ne!(b.w1, a.w1);
    }
}

fn records() -> Vec<GeometricWeights> {
    GeometricWeights::from_neighbor_set(&neighbor_set())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn phi_steps_descend_and_leave_the_model_alone(seed in 0u64..1000, lr in 0.01f64..20.0, noise in 0.0f64..2.0) {
        let m = model(seed, seed % 2 == 0);
        let snapshot = m.clone();
        let data = dataset();
        for mut gw in records() {
            gw.perturb_phi(&mut gotune_core::rng::Stream::new(seed, 0), noise);
            let batch: ConstraintBatch = constraint_batch(&m, &gw, &data).unwrap();
            let mut last = batch_constraint_loss(&gw, &batch).unwrap();
            for _ in 0..10 {
                let step = phi_step(&mut gw, &batch, lr, true).unwrap();
                prop_assert!(step.loss_after <= step.loss_before);
                prop_assert!(step.loss_before == last);
                last = step.loss_after;
                let w = gw.weights().unwrap();
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        prop_assert_eq!(m, snapshot);
    }

    #[test]
    fn sda_ignores_weights_in_the_file(w in prop::collection::vec(0.0f64..3.0, 7)) {
        let cfg = TrainConfig { mode: Mode::Sda, epochs: 1, batch_size: 4, ..TrainConfig::default() };
        let mut data = dataset();
        for (e, w) in data.iter_mut().zip(&w) {
            e.weight = *w;
        }
        let a = train_sda(model(5, false), &data, &cfg).unwrap();
        let b = train_sda(model(5, false), &dataset(), &cfg).unwrap();
        prop_assert_eq!(a.params, b.params);
    }
}

#[test]
fn scores_follow_the_trained_direction() {
    // Output rows from a datastore with the seeds on one axis; after SDA on
    // seed-only targets each seed wins on its own context.
    let v = vocab();
    let mut emb = vec![0f32; v.len() * 4];
    emb[0] = 3.0;
    emb[4] = -3.0;
    for (i, row) in emb.chunks_mut(4).enumerate().skip(2) {
        row[1 + i % 3] = 1.0;
    }
    let ds = gotune_core::LabelDatastore::new(v, emb, 4).unwrap();
    let data: Vec<_> = dataset().into_iter().filter(|e| e.target == e.seed).collect();
    let cfg = TrainConfig { mode: Mode::Sda, epochs: 250, batch_size: 2, lr_model: 0.5, ..TrainConfig::default() };
    let trained = train_sda(ModelParams::init_from_datastore(&ds, 8, false, 6).unwrap(), &data, &cfg).unwrap().params;
    let spec = gotune_core::TaskSpec::new("s", "the food was [input] [label]", ["positive", "negative"], "s").unwrap();
    for (input, want) in [("tasty", 0), ("cold", 1)] {
        let scores = trained.score_label(&spec, &BTreeMap::from([("input".to_string(), input.to_string())])).unwrap();
        let best = if scores[0] >= scores[1] { 0 } else { 1 };
        assert_eq!(best, want, "{input}: {scores:?}");
    }
}
