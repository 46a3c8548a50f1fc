mod common;

use common::*;
use mosbench::cli::fit;
use mosbench::data::UtteranceRecord;
use mosbench::features::{apply_unknown_dropout, assemble_bundle, CategoryKind, FeatureConfig, MetadataVocab, Mode};
use mosbench::model::{l1_subgradient, Example, Model, ModelConfig, TrainHyper};
use mosbench::simulator::{simulate_dataset, Counts, SimConfig, SplitPlan};
use mosbench::Error;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Forward pass written out loop by loop from the parameter tensors.
fn reference_forward(model: &Model, case: &GradCase) -> f64 {
    let p = &model.params;
    let mut head = Vec::new();
    if let Some(frames) = &case.frames {
        let n = frames.n_frames();
        let mut x: Vec<Vec<f64>> = (0..n).map(|t| frames.frame(t).to_vec()).collect();
        for layer in &p.conv {
            let half = layer.kernel as isize / 2;
            let mut y = vec![vec![0.0; layer.out_channels]; n];
            for (t, row) in y.iter_mut().enumerate() {
                for (o, out) in row.iter_mut().enumerate() {
                    let mut acc = layer.bias[o];
                    for k in 0..layer.kernel {
                        let src = t as isize + k as isize - half;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        for i in 0..layer.in_channels {
                            acc += layer.weight[(o * layer.kernel + k) * layer.in_channels + i] * x[src as usize][i];
                        }
                    }
                    *out = if acc > 0.0 { acc } else { 0.0 };
                }
            }
            x = y;
        }
        for c in 0..model.config.pooled_dim {
            head.push(x.iter().map(|r| r[c]).sum::<f64>() / n as f64);
        }
    }
    let block = |ids: &[String], id: &str, force_unknown: bool| -> Vec<f64> {
        let pos = ids.iter().position(|s| s == id).filter(|_| !force_unknown).unwrap_or(ids.len());
        (0..=ids.len()).map(|i| if i == pos { 1.0 } else { 0.0 }).collect()
    };
    if model.features.use_system {
        head.extend(block(model.vocab.systems(), &case.record.system_id, false));
    }
    if model.features.use_rater {
        head.extend(block(
            model.vocab.rater_groups(),
            &case.record.rater_group_id,
            model.features.rater_blinded,
        ));
    }
    if let Some(b) = case.baseline {
        head.push(b);
    }
    if head.is_empty() {
        head.push(1.0);
    }
    let mut x = head;
    for (l, layer) in p.dense.iter().enumerate() {
        let mut y = Vec::new();
        for o in 0..layer.out_dim {
            let mut acc = layer.bias[o];
            for i in 0..layer.in_dim {
                acc += layer.weight[o * layer.in_dim + i] * x[i];
            }
            y.push(if l + 1 == p.dense.len() || acc > 0.0 { acc } else { 0.0 });
        }
        x = y;
    }
    x[0]
}

fn predict(model: &Model, case: &GradCase) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = assemble_bundle(
        &model.features,
        &model.vocab,
        &case.record,
        case.frames.as_ref(),
        case.baseline,
        Mode::Infer,
        &mut rng,
    )
    .unwrap();
    model.forward(&b).unwrap().0
}

#[test]
fn forward_matches_loop_reference() {
    for seed in 100..140 {
        let case = grad_case(seed);
        let a = predict(&case.model, &case);
        let b = reference_forward(&case.model, &case);
        assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn unknown_slot_is_last() {
    let vocab = MetadataVocab::new(vec!["b".into(), "a".into()], vec!["g".into()]).unwrap();
    assert_eq!(vocab.unknown_index(CategoryKind::System), 2);
    assert_eq!(vocab.encoded_len(CategoryKind::RaterGroup), 2);
}

#[test]
fn parameter_count_closed_form_at_768() {
    let (ns, ng) = (40, 8);
    let vocab = MetadataVocab::new(
        (0..ns).map(|i| format!("s{i}")).collect(),
        (0..ng).map(|i| format!("g{i}")).collect(),
    )
    .unwrap();
    let features: FeatureConfig = "W2V+R+S+M".parse().unwrap();
    let model = Model::init(ModelConfig::default(), features, vocab).unwrap();
    let conv = (256 * 3 * 768 + 256) + (64 * 3 * 256 + 64);
    let head = 64 + (ns + 1) + (ng + 1) + 1;
    let fc = (head * 128 + 128) + (128 * 64 + 64) + (64 * 32 + 32) + (32 + 1);
    assert_eq!(model.parameter_count(), conv + fc);
    assert_eq!(model.head_input_width(), head);
}

#[test]
fn adam_climbs_toward_minimum_of_abs() {
    let vocab = MetadataVocab::new(vec!["s".into()], vec!["g".into()]).unwrap();
    let mut model = Model::init(ModelConfig::default(), FeatureConfig::default(), vocab).unwrap();
    let last = model.params.dense.len() - 1;
    let mut w = 0.0;
    for step in 0..100 {
        let mut grads = model.params.zeros_like();
        grads.dense[last].bias[0] = l1_subgradient(w, 1.0);
        model.adam_step(&grads, 0.001).unwrap();
        let next = model.params.dense[last].bias[0];
        assert!(next > w && next < 1.0, "step {step}: {w} -> {next}");
        if step == 0 {
            assert!((next - 0.001).abs() < 1e-9);
        }
        w = next;
    }
    assert!((w - 0.1).abs() < 1e-6);
}

fn small_dataset() -> (Vec<Example>, Vec<Example>) {
    let config = SimConfig {
        n_systems: 20,
        utterances_per_system: Counts::Constant(10),
        embed_dim: 8,
        frames_range: (3, 6),
        ..SimConfig::default()
    };
    let data = simulate_dataset(&config).unwrap();
    let splits = SplitPlan { test_per_system: Counts::Constant(0), ..SplitPlan::default() }
        .apply(&data.table, &config)
        .unwrap();
    (data.examples(&splits.train), data.examples(&data.table))
}

#[test]
fn training_loss_decreases_on_200_utterances() {
    let (train, _) = small_dataset();
    assert_eq!(train.len(), 200);
    for label in ["S+R", "W2V+S"] {
        let hyper = TrainHyper { epochs: 10, ..TrainHyper::default() };
        let (_, log) = fit(label.parse().unwrap(), &hyper, &train, None).unwrap();
        let first = log.epochs[0].train_loss;
        let last = log.epochs.last().unwrap().train_loss;
        assert!(last < first, "{label}: {first} -> {last}");
    }
}

#[test]
fn training_is_deterministic_in_seed() {
    let (train, _) = small_dataset();
    let hyper = TrainHyper { epochs: 3, seed: 11, ..TrainHyper::default() };
    let features: FeatureConfig = "W2V+R+S+M".parse().unwrap();
    let (a, la) = fit(features, &hyper, &train, Some(&train[..20])).unwrap();
    let (b, lb) = fit(features, &hyper, &train, Some(&train[..20])).unwrap();
    assert_eq!(a, b);
    assert!(la.same_trajectory(&lb));
    let (c, _) = fit(features, &TrainHyper { seed: 12, ..hyper }, &train, None).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn zero_epochs_leaves_initial_parameters() {
    let (train, _) = small_dataset();
    let features: FeatureConfig = "S+R".parse().unwrap();
    let (trained, log) = fit(features, &TrainHyper { epochs: 0, seed: 3, ..TrainHyper::default() }, &train, None).unwrap();
    assert!(log.epochs.is_empty());
    let config = ModelConfig { seed: 3, ..ModelConfig::default() };
    let init = Model::init(config, features, trained.vocab.clone()).unwrap();
    assert_eq!(trained, init);
}

#[test]
fn non_finite_baseline_stops_training() {
    let (mut train, _) = small_dataset();
    train[5].baseline = Some(f64::NAN);
    let err = fit("M".parse().unwrap(), &TrainHyper::default(), &train, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err:?}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn no_input_model_is_constant() {
    let (train, all) = small_dataset();
    let hyper = TrainHyper { epochs: 2, ..TrainHyper::default() };
    let (model, _) = fit(FeatureConfig::default(), &hyper, &train, None).unwrap();
    let preds = model.predict_batch(&all, false).unwrap();
    assert!(preds.iter().all(|(_, p)| p.to_bits() == preds[0].1.to_bits()));
}

#[test]
fn dropout_rate_and_single_draw() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 10_000;
    let hits = (0..n).filter(|_| apply_unknown_dropout(0, 9, 0.5, &mut rng) == 9).count();
    let rate = hits as f64 / n as f64;
    assert!((rate - 0.5).abs() <= 0.02, "rate {rate}");

    for p in [0.0, 1.0, 0.3] {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = a.clone();
        apply_unknown_dropout(1, 2, p, &mut a);
        let _: f64 = b.random();
        assert_eq!(a.next_u64(), b.next_u64());
    }
}

#[test]
fn inference_ignores_dropout_and_training_uses_it() {
    let vocab = MetadataVocab::new(vec!["s".into()], vec!["g".into()]).unwrap();
    let features = FeatureConfig { use_system: true, unknown_dropout_p: 1.0, ..FeatureConfig::default() };
    let rec = UtteranceRecord {
        utterance_id: "u".into(),
        system_id: "s".into(),
        rater_group_id: "g".into(),
        mos: 3.0,
        rating_count: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let infer = assemble_bundle(&features, &vocab, &rec, None, None, Mode::Infer, &mut rng).unwrap();
    let train = assemble_bundle(&features, &vocab, &rec, None, None, Mode::Train, &mut rng).unwrap();
    assert_eq!(infer.metadata, vec![1.0, 0.0]);
    assert_eq!(train.metadata, vec![0.0, 1.0]);
}
