//! MOS regressor: 1-D convolutions with global mean pooling over acoustic
//! frames, concatenated with metadata, then a four-layer fully connected head.
//!
//! Forward and backward passes are written out by hand in `f64`. Parameters
//! are plain row-major buffers:
//!
//! * conv weight `(out_channels, kernel, in_channels)`, bias `(out_channels)`
//! * dense weight `(out_dim, in_dim)`, bias `(out_dim)`

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{join_list, KeyValues};
use crate::data::UtteranceRecord;
use crate::emb::Frames;
use crate::error::{Error, Result};
use crate::features::{assemble_bundle, FeatureBundle, FeatureConfig, MetadataVocab, Mode};
use crate::metrics::{self, Correlation};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub pooled_dim: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    /// Hidden widths of the head; the output layer is implied.
    pub fc_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 768,
            pooled_dim: 64,
            conv_channels: vec![256, 64],
            conv_kernel: 3,
            fc_dims: vec![128, 64, 32],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.pooled_dim == 0 {
            return Err(Error::Config("embed_dim and pooled_dim must be positive".into()));
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel must be a positive odd integer, got {}",
                self.conv_kernel
            )));
        }
        match self.conv_channels.last() {
            None => return Err(Error::Config("conv_channels is empty".into())),
            Some(&last) if last != self.pooled_dim => {
                return Err(Error::Config(format!(
                    "last conv channel count {last} differs from pooled_dim {}",
                    self.pooled_dim
                )))
            }
            _ => {}
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::Config("conv channel counts must be positive".into()));
        }
        if self.fc_dims.len() != 3 || self.fc_dims.contains(&0) {
            return Err(Error::Config(format!(
                "fc_dims must list 3 positive hidden widths, got [{}]",
                join_list(&self.fc_dims)
            )));
        }
        Ok(())
    }

    pub(crate) fn write_to(&self, kv: &mut KeyValues) {
        kv.set("embed_dim", self.embed_dim);
        kv.set("pooled_dim", self.pooled_dim);
        kv.set("conv_channels", join_list(&self.conv_channels));
        kv.set("conv_kernel", self.conv_kernel);
        kv.set("fc_dims", join_list(&self.fc_dims));
        kv.set("seed", self.seed);
    }

    pub(crate) fn read_from(kv: &KeyValues) -> Result<Self> {
        Ok(ModelConfig {
            embed_dim: kv.require("embed_dim")?,
            pooled_dim: kv.require("pooled_dim")?,
            conv_channels: kv.get_list("conv_channels")?.unwrap_or_default(),
            conv_kernel: kv.require("conv_kernel")?,
            fc_dims: kv.get_list("fc_dims")?.unwrap_or_default(),
            seed: kv.require("seed")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv1d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * kernel * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn w(&self, o: usize, j: usize) -> &[f64] {
        let start = (o * self.kernel + j) * self.in_channels;
        &self.weight[start..start + self.in_channels]
    }

    /// Stride-1, zero "same" padding. `input` is `n_frames x in_channels`.
    fn forward(&self, input: &[f64], n_frames: usize) -> Vec<f64> {
        let half = self.kernel / 2;
        let mut out = vec![0.0; n_frames * self.out_channels];
        for t in 0..n_frames {
            for o in 0..self.out_channels {
                let mut acc = self.bias[o];
                for j in 0..self.kernel {
                    let Some(src) = (t + j).checked_sub(half).filter(|s| *s < n_frames) else {
                        continue;
                    };
                    let x = &input[src * self.in_channels..(src + 1) * self.in_channels];
                    acc += dot(self.w(o, j), x);
                }
                out[t * self.out_channels + o] = acc;
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient if requested.
    fn backward(
        &self,
        input: &[f64],
        n_frames: usize,
        d_pre: &[f64],
        grad: &mut Conv1d,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let half = self.kernel / 2;
        let mut d_input = want_input_grad.then(|| vec![0.0; input.len()]);
        for t in 0..n_frames {
            for o in 0..self.out_channels {
                let g = d_pre[t * self.out_channels + o];
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                for j in 0..self.kernel {
                    let Some(src) = (t + j).checked_sub(half).filter(|s| *s < n_frames) else {
                        continue;
                    };
                    let range = src * self.in_channels..(src + 1) * self.in_channels;
                    let start = (o * self.kernel + j) * self.in_channels;
                    axpy(g, &input[range.clone()], &mut grad.weight[start..start + self.in_channels]);
                    if let Some(d) = d_input.as_mut() {
                        axpy(g, self.w(o, j), &mut d[range]);
                    }
                }
            }
        }
        d_input
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| self.bias[o] + dot(&self.weight[o * self.in_dim..(o + 1) * self.in_dim], x))
            .collect()
    }

    fn backward(&self, x: &[f64], d_pre: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in d_pre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = o * self.in_dim..(o + 1) * self.in_dim;
            axpy(g, x, &mut grad.weight[row.clone()]);
            axpy(g, &self.weight[row], &mut dx);
        }
        dx
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv: Vec<Conv1d>,
    pub dense: Vec<Dense>,
}

pub type Gradients = Params;

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            conv: self
                .conv
                .iter()
                .map(|c| Conv1d::zeros(c.in_channels, c.out_channels, c.kernel))
                .collect(),
            dense: self.dense.iter().map(|d| Dense::zeros(d.in_dim, d.out_dim)).collect(),
        }
    }

    /// Named tensors with shapes, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((
                format!("conv{i}.weight"),
                vec![c.out_channels, c.kernel, c.in_channels],
                c.weight.as_slice(),
            ));
            out.push((format!("conv{i}.bias"), vec![c.out_channels], c.bias.as_slice()));
        }
        for (i, d) in self.dense.iter().enumerate() {
            out.push((format!("fc{i}.weight"), vec![d.out_dim, d.in_dim], d.weight.as_slice()));
            out.push((format!("fc{i}.bias"), vec![d.out_dim], d.bias.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for c in &mut self.conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for d in &mut self.dense {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, _, t)| t.iter().copied()).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Activations retained by [`Model::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n_frames: usize,
    /// Input to each conv layer (frames, then post-ReLU activations).
    conv_inputs: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
    /// Inputs to each dense layer; the first is the head input.
    dense_inputs: Vec<Vec<f64>>,
    dense_pre: Vec<Vec<f64>>,
    pub prediction: f64,
}

impl ForwardCache {
    /// Smallest |pre-activation| over all ReLU units; finite-difference checks
    /// are only meaningful away from the kinks.
    pub fn min_abs_preactivation(&self) -> f64 {
        let hidden = self.dense_pre.len().saturating_sub(1);
        self.conv_pre
            .iter()
            .chain(&self.dense_pre[..hidden])
            .flat_map(|v| v.iter())
            .fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }

    pub fn head_input(&self) -> &[f64] {
        &self.dense_inputs[0]
    }
}

pub fn l1_loss(prediction: f64, target: f64) -> f64 {
    (prediction - target).abs()
}

/// d|p - t|/dp with the subgradient at 0 taken as 0.
pub fn l1_subgradient(prediction: f64, target: f64) -> f64 {
    let r = prediction - target;
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn mean_l1(predictions: &[f64], targets: &[f64]) -> f64 {
    predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| l1_loss(*p, *t))
        .sum::<f64>()
        / predictions.len() as f64
}

/// One utterance with whatever inputs the model may need.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub record: UtteranceRecord,
    pub frames: Option<Frames>,
    pub baseline: Option<f64>,
}

impl Example {
    pub fn metadata_only(record: UtteranceRecord) -> Self {
        Example {
            record,
            frames: None,
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 0.001,
            epochs: 25,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_srcc: Option<Correlation>,
    pub val_mse: Option<f64>,
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Equal up to wall-clock timings.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_srcc == b.val_srcc
                    && a.val_mse.map(f64::to_bits) == b.val_mse.map(f64::to_bits)
            })
    }

    /// CSV without timings, so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_utt_srcc,val_utt_mse\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{},{}\n",
                e.epoch,
                e.train_loss,
                e.val_srcc.map(|c| c.to_string()).unwrap_or_default(),
                e.val_mse.map(|m| format!("{m:?}")).unwrap_or_default()
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub features: FeatureConfig,
    pub vocab: MetadataVocab,
    pub params: Params,
    pub adam: AdamState,
}

impl Model {
    /// Glorot-uniform weights from `config.seed`, zero biases, zeroed Adam moments.
    pub fn init(config: ModelConfig, features: FeatureConfig, vocab: MetadataVocab) -> Result<Self> {
        config.validate()?;
        features.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut conv = Vec::new();
        if features.use_acoustic {
            let mut in_ch = config.embed_dim;
            for &out_ch in &config.conv_channels {
                let mut layer = Conv1d::zeros(in_ch, out_ch, config.conv_kernel);
                let fan_in = in_ch * config.conv_kernel;
                let fan_out = out_ch * config.conv_kernel;
                glorot_fill(&mut layer.weight, fan_in, fan_out, &mut rng);
                conv.push(layer);
                in_ch = out_ch;
            }
        }

        let mut dense = Vec::new();
        let mut in_dim = head_input_width(&config, &features, &vocab);
        for &out_dim in config.fc_dims.iter().chain(std::iter::once(&1)) {
            let mut layer = Dense::zeros(in_dim, out_dim);
            glorot_fill(&mut layer.weight, in_dim, out_dim, &mut rng);
            dense.push(layer);
            in_dim = out_dim;
        }

        let params = Params { conv, dense };
        let adam = AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        };
        Ok(Model {
            config,
            features,
            vocab,
            params,
            adam,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn head_input_width(&self) -> usize {
        head_input_width(&self.config, &self.features, &self.vocab)
    }

    pub fn forward(&self, bundle: &FeatureBundle<'_>) -> Result<(f64, ForwardCache)> {
        let mut conv_inputs = Vec::new();
        let mut conv_pre = Vec::new();
        let mut n_frames = 0;
        let mut head = Vec::with_capacity(self.head_input_width());

        if self.features.use_acoustic {
            let frames = bundle
                .frames
                .ok_or_else(|| Error::Config("model expects acoustic frames".into()))?;
            if frames.n_frames() == 0 {
                return Err(Error::Validation("frame matrix has no frames".into()));
            }
            if frames.dim() != self.config.embed_dim {
                return Err(Error::Validation(format!(
                    "frame dimension {} differs from model embed_dim {}",
                    frames.dim(),
                    self.config.embed_dim
                )));
            }
            n_frames = frames.n_frames();
            let mut x = frames.data().to_vec();
            for layer in &self.params.conv {
                let pre = layer.forward(&x, n_frames);
                let act = relu(&pre);
                conv_inputs.push(x);
                conv_pre.push(pre);
                x = act;
            }
            let channels = self.config.pooled_dim;
            let mut pooled = vec![0.0; channels];
            for t in 0..n_frames {
                axpy(1.0, &x[t * channels..(t + 1) * channels], &mut pooled);
            }
            pooled.iter_mut().for_each(|p| *p /= n_frames as f64);
            head.extend(pooled);
        } else if bundle.frames.is_some() {
            return Err(Error::Config("model does not take acoustic frames".into()));
        }

        let expected_meta = self.features.metadata_len(&self.vocab);
        if bundle.metadata.len() != expected_meta {
            return Err(Error::Validation(format!(
                "metadata vector has length {}, model expects {expected_meta}",
                bundle.metadata.len()
            )));
        }
        head.extend_from_slice(&bundle.metadata);
        match (self.features.use_baseline_mos, bundle.baseline_mos) {
            (true, Some(m)) => head.push(m),
            (false, None) => {}
            (true, None) => return Err(Error::Config("model expects a baseline MOS".into())),
            (false, Some(_)) => return Err(Error::Config("model does not take a baseline MOS".into())),
        }
        if head.is_empty() {
            head.push(1.0);
        }

        let mut dense_inputs = Vec::with_capacity(self.params.dense.len());
        let mut dense_pre = Vec::with_capacity(self.params.dense.len());
        let last = self.params.dense.len() - 1;
        let mut x = head;
        for (i, layer) in self.params.dense.iter().enumerate() {
            let pre = layer.forward(&x);
            let next = if i == last { pre.clone() } else { relu(&pre) };
            dense_inputs.push(x);
            dense_pre.push(pre);
            x = next;
        }
        let prediction = x[0];
        Ok((
            prediction,
            ForwardCache {
                n_frames,
                conv_inputs,
                conv_pre,
                dense_inputs,
                dense_pre,
                prediction,
            },
        ))
    }

    /// Gradients of `loss_scale * |prediction - target|`.
    pub fn backward(&self, cache: &ForwardCache, target: f64, loss_scale: f64) -> Gradients {
        let mut grads = self.params.zeros_like();
        self.backward_into(cache, target, loss_scale, &mut grads);
        grads
    }

    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        target: f64,
        loss_scale: f64,
        grads: &mut Gradients,
    ) {
        let d_out = loss_scale * l1_subgradient(cache.prediction, target);
        if d_out == 0.0 {
            return;
        }
        let last = self.params.dense.len() - 1;
        let mut d = vec![d_out];
        for i in (0..=last).rev() {
            let layer = &self.params.dense[i];
            if i != last {
                for (g, pre) in d.iter_mut().zip(&cache.dense_pre[i]) {
                    if *pre <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            d = layer.backward(&cache.dense_inputs[i], &d, &mut grads.dense[i]);
        }

        if self.params.conv.is_empty() {
            return;
        }
        // d now spans the head input; its leading block is the pooled vector.
        let channels = self.config.pooled_dim;
        let n = cache.n_frames;
        let mut d_act = vec![0.0; n * channels];
        for t in 0..n {
            for c in 0..channels {
                d_act[t * channels + c] = d[c] / n as f64;
            }
        }
        for l in (0..self.params.conv.len()).rev() {
            let mut d_pre = d_act;
            for (g, pre) in d_pre.iter_mut().zip(&cache.conv_pre[l]) {
                if *pre <= 0.0 {
                    *g = 0.0;
                }
            }
            let layer = &self.params.conv[l];
            match layer.backward(&cache.conv_inputs[l], n, &d_pre, &mut grads.conv[l], l > 0) {
                Some(d_in) => d_act = d_in,
                None => break,
            }
        }
    }

    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, _, t) in grads.tensors() {
            if t.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("non-finite gradient in {name}")));
            }
        }
        self.adam.step += 1;
        let step = self.adam.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(step);
        let bc2 = 1.0 - ADAM_BETA2.powi(step);
        let g_tensors = grads.tensors();
        let mut m_tensors = self.adam.m.tensors_mut();
        let mut v_tensors = self.adam.v.tensors_mut();
        let mut p_tensors = self.params.tensors_mut();
        for (k, (_, _, g)) in g_tensors.iter().enumerate() {
            let (m, v, p) = (&mut m_tensors[k], &mut v_tensors[k], &mut p_tensors[k]);
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        if p_tensors.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("parameters became non-finite".into()));
        }
        Ok(())
    }

    fn bundle<'a, R: Rng + ?Sized>(
        &self,
        features: &FeatureConfig,
        example: &'a Example,
        mode: Mode,
        rng: &mut R,
    ) -> Result<FeatureBundle<'a>> {
        let frames = if features.use_acoustic { example.frames.as_ref() } else { None };
        let baseline = if features.use_baseline_mos { example.baseline } else { None };
        assemble_bundle(features, &self.vocab, &example.record, frames, baseline, mode, rng)
    }

    /// Mini-batch training with mean L1 loss. Batches are reshuffled and
    /// unknown-class dropout resampled every epoch from `hyper.seed`.
    pub fn train(
        &mut self,
        train: &[Example],
        validation: Option<&[Example]>,
        hyper: &TrainHyper,
    ) -> Result<TrainLog> {
        if train.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        if hyper.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(hyper.lr.is_finite() && hyper.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", hyper.lr)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut log = TrainLog::default();
        let features = self.features;

        for epoch in 1..=hyper.epochs {
            let start = Instant::now();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in order.chunks(hyper.batch_size) {
                let mut grads = self.params.zeros_like();
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let ex = &train[i];
                    let bundle = self.bundle(&features, ex, Mode::Train, &mut rng)?;
                    let (pred, cache) = self.forward(&bundle)?;
                    loss_sum += l1_loss(pred, ex.record.mos);
                    self.backward_into(&cache, ex.record.mos, scale, &mut grads);
                }
                self.adam_step(&grads, hyper.lr)?;
            }
            let train_loss = loss_sum / train.len() as f64;
            if !train_loss.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}: training loss is not finite")));
            }

            let (val_srcc, val_mse) = match validation {
                Some(val) if !val.is_empty() => {
                    let preds: Vec<f64> =
                        self.predict_batch(val, false)?.into_iter().map(|(_, p)| p).collect();
                    let labels: Vec<f64> = val.iter().map(|e| e.record.mos).collect();
                    (
                        Some(Correlation::from_result(metrics::srcc(&preds, &labels))?),
                        Some(metrics::mse(&preds, &labels)?),
                    )
                }
                _ => (None, None),
            };
            let wall_clock = start.elapsed();
            log::info!(
                "epoch {epoch}: train L1 {train_loss:.4}{} ({:.2?})",
                match (val_srcc, val_mse) {
                    (Some(s), Some(m)) => format!(", val SRCC {s} MSE {m:.4}"),
                    _ => String::new(),
                },
                wall_clock
            );
            log.epochs.push(EpochLog {
                epoch,
                train_loss,
                val_srcc,
                val_mse,
                wall_clock,
            });
        }
        Ok(log)
    }

    /// Predicts every example with dropout disabled. `blinded` forces the rater
    /// block to the unknown slot; blinded checkpoints are always blinded.
    pub fn predict_batch(&self, examples: &[Example], blinded: bool) -> Result<Vec<(String, f64)>> {
        let mut features = self.features;
        if blinded && features.use_rater {
            features.rater_blinded = true;
        }
        examples
            .par_iter()
            .map(|ex| {
                // Inference never draws from the generator.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let bundle = self.bundle(&features, ex, Mode::Infer, &mut rng)?;
                let (pred, _) = self.forward(&bundle)?;
                Ok((ex.record.utterance_id.clone(), pred))
            })
            .collect()
    }
}

fn head_input_width(config: &ModelConfig, features: &FeatureConfig, vocab: &MetadataVocab) -> usize {
    let mut n = features.metadata_len(vocab);
    if features.use_acoustic {
        n += config.pooled_dim;
    }
    if features.use_baseline_mos {
        n += 1;
    }
    n.max(1)
}

fn glorot_fill<R: Rng + ?Sized>(w: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in w {
        *v = rng.random_range(-limit..limit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n_sys: usize, n_grp: usize) -> MetadataVocab {
        MetadataVocab::new(
            (0..n_sys).map(|i| format!("s{i}")).collect(),
            (0..n_grp).map(|i| format!("g{i}")).collect(),
        )
        .unwrap()
    }

    fn record(sys: usize, grp: usize, mos: f64) -> UtteranceRecord {
        UtteranceRecord {
            utterance_id: format!("u{sys}-{grp}-{mos}"),
            system_id: format!("s{sys}"),
            rater_group_id: format!("g{grp}"),
            mos,
            rating_count: 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            conv_channels: vec![256, 32],
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let even = ModelConfig {
            conv_kernel: 2,
            ..Default::default()
        };
        assert!(even.validate().is_err());
        let short = ModelConfig {
            fc_dims: vec![8, 8],
            ..Default::default()
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg: FeatureConfig = "W2V+R+S".parse().unwrap();
        let small = ModelConfig {
            embed_dim: 6,
            conv_channels: vec![5, 4],
            pooled_dim: 4,
            fc_dims: vec![7, 5, 3],
            seed: 42,
            ..Default::default()
        };
        let a = Model::init(small.clone(), cfg, vocab(3, 2)).unwrap();
        let b = Model::init(small, cfg, vocab(3, 2)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.adam.step, 0);
        assert!(a.adam.m.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_fc_width_for_system_only() {
        let model = Model::init(ModelConfig::default(), "S".parse().unwrap(), vocab(3, 2)).unwrap();
        assert_eq!(model.params.dense[0].in_dim, 4);
        assert!(model.params.conv.is_empty());
        assert_eq!(model.params.dense.len(), 4);
    }

    #[test]
    fn zero_weights_predict_zero() {
        let cfg = ModelConfig {
            embed_dim: 4,
            conv_channels: vec![3, 2],
            pooled_dim: 2,
            fc_dims: vec![3, 3, 2],
            ..Default::default()
        };
        let mut model = Model::init(cfg, "W2V+S".parse().unwrap(), vocab(2, 1)).unwrap();
        for t in model.params.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let frames = Frames::from_rows(&vec![vec![1.0, -2.0, 3.0, 0.5]; 3]).unwrap();
        let bundle = FeatureBundle {
            frames: Some(&frames),
            metadata: vec![0.0, 1.0, 0.0],
            baseline_mos: None,
        };
        assert_eq!(model.forward(&bundle).unwrap().0, 0.0);
    }

    #[test]
    fn empty_frame_matrix_rejected() {
        let cfg = ModelConfig {
            embed_dim: 2,
            conv_channels: vec![2],
            pooled_dim: 2,
            fc_dims: vec![2, 2, 2],
            ..Default::default()
        };
        let model = Model::init(cfg, "W2V".parse().unwrap(), vocab(1, 1)).unwrap();
        let frames = Frames::new(0, 2, vec![]).unwrap();
        let bundle = FeatureBundle {
            frames: Some(&frames),
            metadata: vec![],
            baseline_mos: None,
        };
        assert!(model.forward(&bundle).is_err());
    }

    #[test]
    fn l1_values() {
        assert_eq!(l1_loss(3.0, 3.0), 0.0);
        assert_eq!(l1_loss(2.0, 3.5), 1.5);
        assert_eq!(l1_subgradient(3.0, 3.0), 0.0);
        let preds = [1.0, 2.5, 4.0, 3.25];
        let targets = [1.5, 2.5, 3.0, 4.0];
        let by_hand = (0.5 + 0.0 + 1.0 + 0.75) / 4.0;
        assert_eq!(mean_l1(&preds, &targets), by_hand);
    }

    fn metadata_model() -> Model {
        let cfg = ModelConfig {
            fc_dims: vec![6, 5, 4],
            seed: 9,
            ..Default::default()
        };
        let mut m = Model::init(cfg, "S+R".parse().unwrap(), vocab(3, 2)).unwrap();
        // Nonzero biases so no layer is trivially dead.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in &mut m.params.dense {
            d.bias.iter_mut().for_each(|b| *b = rng.random_range(0.1..0.5));
        }
        m
    }

    #[test]
    fn zero_loss_zero_gradient() {
        let model = metadata_model();
        let ex = Example::metadata_only(record(1, 0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = model.bundle(&model.features, &ex, Mode::Infer, &mut rng).unwrap();
        let (pred, cache) = model.forward(&bundle).unwrap();
        let grads = model.backward(&cache, pred, 1.0);
        assert!(grads.flatten().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_linear_in_loss_scale() {
        let model = metadata_model();
        let ex = Example::metadata_only(record(2, 1, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = model.bundle(&model.features, &ex, Mode::Infer, &mut rng).unwrap();
        let (_, cache) = model.forward(&bundle).unwrap();
        let g1 = model.backward(&cache, 3.0, 1.0).flatten();
        let g2 = model.backward(&cache, 3.0, 2.0).flatten();
        assert!(g1.iter().any(|g| *g != 0.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut model = metadata_model();
        let before = model.params.clone();
        let zero = model.params.zeros_like();
        model.adam_step(&zero, 0.001).unwrap();
        assert_eq!(model.adam.step, 1);
        assert_eq!(model.params, before);

        let mut grads = model.params.zeros_like();
        grads.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|g| *g = 0.5));
        model.adam_step(&grads, 0.001).unwrap();
        let (m, v) = (model.adam.m.flatten(), model.adam.v.flatten());
        model.adam_step(&zero, 0.001).unwrap();
        for (before, after) in m.iter().zip(model.adam.m.flatten()) {
            assert_eq!(after, ADAM_BETA1 * before);
        }
        for (before, after) in v.iter().zip(model.adam.v.flatten()) {
            assert_eq!(after, ADAM_BETA2 * before);
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut model = metadata_model();
        let before = model.params.flatten();
        let mut grads = model.params.zeros_like();
        for (k, t) in grads.tensors_mut().into_iter().enumerate() {
            for (i, v) in t.iter_mut().enumerate() {
                *v = if (i + k) % 2 == 0 { 0.3 } else { -2.0 };
            }
        }
        let g = grads.flatten();
        model.adam_step(&grads, 0.001).unwrap();
        for ((b, a), g) in before.iter().zip(model.params.flatten()).zip(g) {
            let delta = a - b;
            assert!((delta + 0.001 * g.signum()).abs() < 1e-9, "{delta} vs {g}");
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut model = metadata_model();
        let mut grads = model.params.zeros_like();
        grads.tensors_mut()[2][0] = f64::NAN;
        assert!(matches!(model.adam_step(&grads, 0.001), Err(Error::NonFinite(_))));
    }

    #[test]
    fn epochs_zero_leaves_model_unchanged() {
        let mut model = metadata_model();
        let before = model.clone();
        let data: Vec<_> = (0..5).map(|i| Example::metadata_only(record(i % 3, i % 2, 3.0))).collect();
        let hyper = TrainHyper {
            epochs: 0,
            ..Default::default()
        };
        let log = model.train(&data, None, &hyper).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn predict_is_repeatable_and_total() {
        let model = metadata_model();
        let data = vec![
            Example::metadata_only(record(0, 0, 2.0)),
            Example::metadata_only(UtteranceRecord {
                system_id: "never-seen".into(),
                ..record(1, 1, 2.0)
            }),
        ];
        let a = model.predict_batch(&data, false).unwrap();
        let b = model.predict_batch(&data, false).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|(_, p)| p.is_finite()));
    }
}
