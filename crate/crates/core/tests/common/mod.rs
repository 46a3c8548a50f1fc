//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use mosbench::data::UtteranceRecord;
use mosbench::emb::Frames;
use mosbench::features::{assemble_bundle, FeatureConfig, MetadataVocab, Mode};
use mosbench::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank of each element by counting: 1 + (# smaller) + (# equal others) / 2.
pub fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let less = x.iter().filter(|&&xj| xj < xi).count() as f64;
            let equal = x.iter().filter(|&&xj| xj == xi).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Textbook Pearson; `None` when either side has no variance.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

pub fn oracle_srcc(x: &[f64], y: &[f64]) -> Option<f64> {
    oracle_pearson(&oracle_ranks(x), &oracle_ranks(y))
}

pub fn oracle_mse(x: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len() {
        total += (x[i] - y[i]) * (x[i] - y[i]);
    }
    total / x.len() as f64
}

/// EMB1 bytes written field by field.
pub fn oracle_emb1(n_frames: u32, dim: u32, values: &[f32]) -> Vec<u8> {
    let mut out = b"EMB1".to_vec();
    out.extend_from_slice(&n_frames.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn record(utt: &str, sys: &str, grp: &str, mos: f64) -> UtteranceRecord {
    UtteranceRecord {
        utterance_id: utt.into(),
        system_id: sys.into(),
        rater_group_id: grp.into(),
        mos,
        rating_count: 8,
    }
}

/// Every regular file under `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub struct GradCase {
    pub model: Model,
    pub record: UtteranceRecord,
    pub frames: Option<Frames>,
    pub baseline: Option<f64>,
    pub target: f64,
}

impl GradCase {
    pub fn loss(&self, model: &Model) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = assemble_bundle(
            &model.features,
            &model.vocab,
            &self.record,
            self.frames.as_ref(),
            self.baseline,
            Mode::Infer,
            &mut rng,
        )
        .unwrap();
        let (p, _) = model.forward(&b).unwrap();
        (p - self.target).abs()
    }
}

/// Kink margin: a central difference with step h moves pre-activations by far
/// less than this, so the activation pattern is fixed across the stencil.
pub const KINK_MARGIN: f64 = 1e-3;

/// A random small model and input, resampled until the point is away from
/// every ReLU kink and from prediction == target.
pub fn grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let features = FeatureConfig {
            use_acoustic: rng.random_bool(0.7),
            use_system: rng.random_bool(0.5),
            use_rater: rng.random_bool(0.5),
            rater_blinded: false,
            use_baseline_mos: rng.random_bool(0.5),
            unknown_dropout_p: 0.0,
        };
        let embed_dim = rng.random_range(1..=8);
        let pooled = rng.random_range(2..=5);
        let config = ModelConfig {
            embed_dim,
            pooled_dim: pooled,
            conv_channels: vec![rng.random_range(2..=6), pooled],
            conv_kernel: if rng.random_bool(0.5) { 3 } else { 1 },
            fc_dims: vec![rng.random_range(2..=6), rng.random_range(2..=5), rng.random_range(2..=4)],
            seed: rng.random(),
        };
        let vocab = MetadataVocab::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["g1".into(), "g2".into()],
        )
        .unwrap();
        let mut model = Model::init(config, features, vocab).unwrap();
        for t in model.params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let n_frames = rng.random_range(1..=5);
        let frames = features.use_acoustic.then(|| {
            let data = (0..n_frames * embed_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            Frames::new(n_frames, embed_dim, data).unwrap()
        });
        let sys = ["a", "b", "c", "zz"][rng.random_range(0..4)];
        let grp = ["g1", "g2", "zz"][rng.random_range(0..3)];
        let case = GradCase {
            record: record("u", sys, grp, 0.0),
            baseline: features.use_baseline_mos.then(|| rng.random_range(1.0..5.0)),
            frames,
            target: rng.random_range(1.0..5.0),
            model,
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let b = assemble_bundle(
            &case.model.features,
            &case.model.vocab,
            &case.record,
            case.frames.as_ref(),
            case.baseline,
            Mode::Infer,
            &mut r,
        )
        .unwrap();
        let (p, cache) = case.model.forward(&b).unwrap();
        if (p - case.target).abs() > KINK_MARGIN && cache.min_abs_preactivation() > KINK_MARGIN {
            return case;
        }
    }
}

/// Largest relative error between analytic and central-difference gradients.
/// Relative error is |a - n| / max(|a|, |n|, floor).
pub fn max_gradient_error(case: &GradCase, h: f64, floor: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = assemble_bundle(
        &case.model.features,
        &case.model.vocab,
        &case.record,
        case.frames.as_ref(),
        case.baseline,
        Mode::Infer,
        &mut rng,
    )
    .unwrap();
    let (_, cache) = case.model.forward(&b).unwrap();
    let analytic = case.model.backward(&cache, case.target, 1.0).flatten();

    let mut worst: f64 = 0.0;
    let mut probe = case.model.clone();
    let mut flat = 0;
    let n_tensors = probe.params.tensors_mut().len();
    for k in 0..n_tensors {
        let len = probe.params.tensors_mut()[k].len();
        for i in 0..len {
            let orig = probe.params.tensors_mut()[k][i];
            probe.params.tensors_mut()[k][i] = orig + h;
            let up = case.loss(&probe);
            probe.params.tensors_mut()[k][i] = orig - h;
            let down = case.loss(&probe);
            probe.params.tensors_mut()[k][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            flat += 1;
        }
    }
    assert_eq!(flat, analytic.len());
    worst
}
