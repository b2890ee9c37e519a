//! Trainable action head.
//!
//! A feed-forward network maps `(feature, proprio)` to a `K × 5` action chunk
//! and is fitted by minimizing the mean over records of the squared L2 norm
//! of the flattened chunk residual. Gradients are computed in reverse mode by
//! hand; the dense products go through `matrixmultiply`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{self, CacheFile};
use crate::error::{Error, Result};
use crate::perception::ExtractorKind;
use crate::rng::{self, Stream};
use crate::sim::{Action, Proprio};

pub const ACTION_DIM: usize = 5;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "promptgrasp-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer, weights stored `outputs × inputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// Network parameters. Hidden layers use `activation`, the output layer is
/// linear and reshaped to `k × action_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub k: usize,
    pub action_dim: usize,
}

impl PolicyParams {
    pub fn zeros(sizes: &[usize], activation: Activation, k: usize, action_dim: usize) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Dimension("need at least input and output sizes".into()));
        }
        if sizes[sizes.len() - 1] != k * action_dim {
            return Err(Error::Dimension(format!(
                "output size {} != k * action_dim = {}",
                sizes[sizes.len() - 1],
                k * action_dim
            )));
        }
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self {
            layers,
            activation,
            k,
            action_dim,
        })
    }

    /// Uniform fan-in initialization of weights, zero biases.
    pub fn init(sizes: &[usize], activation: Activation, k: usize, action_dim: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(sizes, activation, k, action_dim)?;
        let mut rng = rng::rng_for(seed, Stream::Init);
        for layer in &mut p.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Forward pass for a row-major batch of `n` inputs. Returns the output of
    /// every layer, the input first.
    fn forward_batch(&self, input: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
        let d = self.input_dim();
        if input.len() != n * d {
            return Err(Error::Dimension(format!(
                "input has {} values, expected {n} x {d}",
                input.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let x = &acts[li];
            let mut z = Vec::with_capacity(n * layer.outputs);
            for _ in 0..n {
                z.extend_from_slice(&layer.bias);
            }
            // z (n × out) += x (n × in) · Wᵀ
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    layer.inputs,
                    layer.outputs,
                    1.0,
                    x.as_ptr(),
                    layer.inputs as isize,
                    1,
                    layer.weights.as_ptr(),
                    1,
                    layer.inputs as isize,
                    1.0,
                    z.as_mut_ptr(),
                    layer.outputs as isize,
                    1,
                );
            }
            if li != last {
                for v in &mut z {
                    *v = self.activation.apply(*v);
                }
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Raw network output for one input vector.
    pub fn forward_raw(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(input, 1)?.pop().expect("at least one layer"))
    }
}

/// `K` consecutive actions, one row of `[x, y, theta, height, grip_logit]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub k: usize,
    pub action_dim: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn action(&self, i: usize) -> Action {
        Action::from_row(self.row(i))
    }

    pub fn actions(&self) -> Vec<Action> {
        (0..self.k).map(|i| self.action(i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Raw forward of `feature ++ proprio`, no normalization.
pub fn forward(params: &PolicyParams, feature: &[f64], proprio: &[f64]) -> Result<ActionChunk> {
    let mut input = Vec::with_capacity(feature.len() + proprio.len());
    input.extend_from_slice(feature);
    input.extend_from_slice(proprio);
    if input.len() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "feature {} + proprio {} != network input {}",
            feature.len(),
            proprio.len(),
            params.input_dim()
        )));
    }
    Ok(ActionChunk {
        k: params.k,
        action_dim: params.action_dim,
        data: params.forward_raw(&input)?,
    })
}

/// Row-major training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn new(n: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Self {
        Self { n, inputs, targets }
    }

    fn check(&self, params: &PolicyParams) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if self.targets.len() != self.n * params.output_dim() {
            return Err(Error::Dimension(format!(
                "targets have {} values, expected {} x {}",
                self.targets.len(),
                self.n,
                params.output_dim()
            )));
        }
        Ok(())
    }
}

/// `(1/N) Σ ‖prediction − target‖²` over the flattened chunks.
pub fn loss(params: &PolicyParams, batch: &Batch) -> Result<f64> {
    batch.check(params)?;
    let out = params.forward_batch(&batch.inputs, batch.n)?.pop().unwrap();
    let sq: f64 = out
        .iter()
        .zip(&batch.targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sq / batch.n as f64)
}

/// Gradients with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            for g in v {
                *g *= s;
            }
        }
    }
}

/// Loss and its exact gradient with respect to every parameter.
pub fn backward(params: &PolicyParams, batch: &Batch) -> Result<(f64, Gradients)> {
    batch.check(params)?;
    let n = batch.n;
    let acts = params.forward_batch(&batch.inputs, n)?;
    let out = acts.last().unwrap();
    let scale = 2.0 / n as f64;
    let mut loss_sum = 0.0;
    let mut delta: Vec<f64> = out
        .iter()
        .zip(&batch.targets)
        .map(|(p, t)| {
            let r = p - t;
            loss_sum += r * r;
            scale * r
        })
        .collect();

    let nl = params.layers.len();
    let mut gw = vec![Vec::new(); nl];
    let mut gb = vec![Vec::new(); nl];
    for li in (0..nl).rev() {
        let layer = &params.layers[li];
        let x = &acts[li];
        let (nin, nout) = (layer.inputs, layer.outputs);
        // dW (out × in) = deltaᵀ (out × n) · x (n × in)
        let mut dw = vec![0.0; nout * nin];
        unsafe {
            matrixmultiply::dgemm(
                nout,
                n,
                nin,
                1.0,
                delta.as_ptr(),
                1,
                nout as isize,
                x.as_ptr(),
                nin as isize,
                1,
                0.0,
                dw.as_mut_ptr(),
                nin as isize,
                1,
            );
        }
        let mut db = vec![0.0; nout];
        for row in delta.chunks_exact(nout) {
            for (b, d) in db.iter_mut().zip(row) {
                *b += d;
            }
        }
        gw[li] = dw;
        gb[li] = db;
        if li > 0 {
            // dx (n × in) = delta (n × out) · W (out × in)
            let mut dx = vec![0.0; n * nin];
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    nout,
                    nin,
                    1.0,
                    delta.as_ptr(),
                    nout as isize,
                    1,
                    layer.weights.as_ptr(),
                    nin as isize,
                    1,
                    0.0,
                    dx.as_mut_ptr(),
                    nin as isize,
                    1,
                );
            }
            for (g, a) in dx.iter_mut().zip(x) {
                *g *= params.activation.derivative_from_output(*a);
            }
            delta = dx;
        }
    }
    Ok((
        loss_sum / n as f64,
        Gradients {
            weights: gw,
            bias: gb,
        },
    ))
}

/// Per-channel standardization. Channels with (near) zero spread keep unit
/// scale so encoding stays invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits statistics over row-major `rows` of width `dim`.
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = rows.len() / dim;
        if n == 0 {
            return Self::identity(dim);
        }
        let mut mean = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-6 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Encodes in place; `values.len()` must be a multiple of the dimension.
    pub fn encode(&self, values: &mut [f64]) {
        let d = self.dim();
        for (i, v) in values.iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - self.mean[c]) / self.std[c];
        }
    }

    pub fn decode(&self, values: &mut [f64]) {
        let d = self.dim();
        for (i, v) in values.iter_mut().enumerate() {
            let c = i % d;
            *v = *v * self.std[c] + self.mean[c];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub kind: ExtractorKind,
    pub feature_dim: usize,
    pub proprio_dim: usize,
    pub k: usize,
    pub chunk_stride: u64,
    pub dataset_fingerprint: String,
    /// Scene seeds used for training data; evaluation must avoid them.
    pub train_seed_range: [u64; 2],
}

/// Trained head together with its normalization and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: PolicyParams,
    pub input_norm: Normalizer,
    pub action_norm: Normalizer,
    pub meta: PolicyMeta,
}

impl Policy {
    /// Normalizes, runs the network and decodes into world units.
    pub fn act(&self, feature: &[f64], proprio: &[f64]) -> Result<ActionChunk> {
        let mut input = Vec::with_capacity(feature.len() + proprio.len());
        input.extend_from_slice(feature);
        input.extend_from_slice(proprio);
        if input.len() != self.input_norm.dim() {
            return Err(Error::Dimension(format!(
                "policy expects {} inputs, got {}",
                self.input_norm.dim(),
                input.len()
            )));
        }
        self.input_norm.encode(&mut input);
        let mut out = self.params.forward_raw(&input)?;
        self.action_norm.decode(&mut out);
        Ok(ActionChunk {
            k: self.params.k,
            action_dim: self.params.action_dim,
            data: out,
        })
    }

    pub fn check_compatible(&self, kind: ExtractorKind, feature_dim: usize) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Incompatible(format!(
                "checkpoint trained with {} cannot run with {kind}",
                self.meta.kind
            )));
        }
        if self.meta.feature_dim != feature_dim {
            return Err(Error::Dimension(format!(
                "checkpoint feature width {} != {feature_dim}",
                self.meta.feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Chunk length K.
    pub chunk_len: usize,
    /// Fraction of demo frames blacked out while caching features.
    pub augment_occlusion_p: f64,
    /// Shuffle object slots of whole-scene features while caching.
    pub augment_slot_permutation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Relu,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            clip_norm: 10.0,
            chunk_len: 20,
            augment_occlusion_p: 0.2,
            augment_slot_permutation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train: learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.chunk_len == 0 {
            return Err(Error::Config("train: batch_size and chunk_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_occlusion_p) {
            return Err(Error::Config("train: augment_occlusion_p outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut idx = 0;
        for (li, layer) in params.layers.iter_mut().enumerate() {
            for (p, g) in layer
                .weights
                .iter_mut()
                .zip(&grads.weights[li])
                .chain(layer.bias.iter_mut().zip(&grads.bias[li]))
            {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
                idx += 1;
            }
        }
    }
}

/// Optimizes `params` on fixed, already-normalized data. Returns the
/// per-epoch mean training loss.
pub fn fit(params: &mut PolicyParams, inputs: &[f64], targets: &[f64], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let din = params.input_dim();
    let dout = params.output_dim();
    let n = inputs.len() / din;
    if n == 0 || inputs.len() != n * din || targets.len() != n * dout {
        return Err(Error::Dimension("training data does not match network shape".into()));
    }
    let mut opt = Adam::new(params.num_params(), cfg);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step_no = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = cache::minibatch_indices(n, cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut total = 0.0;
        for idx in batches {
            let mut bx = Vec::with_capacity(idx.len() * din);
            let mut by = Vec::with_capacity(idx.len() * dout);
            for &i in &idx {
                bx.extend_from_slice(&inputs[i * din..(i + 1) * din]);
                by.extend_from_slice(&targets[i * dout..(i + 1) * dout]);
            }
            let batch = Batch::new(idx.len(), bx, by);
            let (l, mut g) = backward(params, &batch)?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: step_no,
                    detail: format!("loss {l}, gradient norm {}", g.norm()),
                });
            }
            let norm = g.norm();
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                g.scale(cfg.clip_norm / norm);
            }
            opt.step(params, &g);
            total += l * idx.len() as f64;
            step_no += 1;
        }
        let mean = total / n as f64;
        log::debug!("epoch {epoch}: loss {mean:.6e}");
        curve.push(mean);
    }
    if !params.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            step: step_no,
            detail: "non-finite parameters".into(),
        });
    }
    Ok(curve)
}

/// Trains a fresh head on a feature cache.
pub fn train(cache: &CacheFile, cfg: &TrainConfig) -> Result<(Policy, Vec<f64>)> {
    cfg.validate()?;
    let h = &cache.header;
    if h.k != cfg.chunk_len {
        return Err(Error::Dimension(format!(
            "cache chunk length {} != configured {}",
            h.k, cfg.chunk_len
        )));
    }
    if h.action_dim != ACTION_DIM {
        return Err(Error::Dimension(format!("cache action dim {} != {ACTION_DIM}", h.action_dim)));
    }
    if cache.records.is_empty() {
        return Err(Error::InvalidArgument("empty cache".into()));
    }
    let din = h.feature_dim + h.proprio_dim;
    let dout = h.k * h.action_dim;
    let n = cache.records.len();
    let mut inputs = Vec::with_capacity(n * din);
    let mut targets = Vec::with_capacity(n * dout);
    for r in &cache.records {
        if r.feature.len() != h.feature_dim || r.proprio.len() != h.proprio_dim {
            return Err(Error::Dimension(format!(
                "record ({}, {}) has inconsistent widths",
                r.episode_id, r.t
            )));
        }
        inputs.extend_from_slice(&r.feature);
        inputs.extend_from_slice(&r.proprio);
        for row in &r.action_chunk_target {
            targets.extend_from_slice(row);
        }
    }
    let input_norm = Normalizer::fit(&inputs, din);
    let action_norm = Normalizer::fit(&targets, h.action_dim);
    input_norm.encode(&mut inputs);
    action_norm.encode(&mut targets);

    let mut sizes = vec![din];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(dout);
    let mut params = PolicyParams::init(&sizes, cfg.activation, h.k, h.action_dim, cfg.seed)?;
    let curve = fit(&mut params, &inputs, &targets, cfg)?;
    let policy = Policy {
        params,
        input_norm,
        action_norm,
        meta: PolicyMeta {
            kind: h.kind,
            feature_dim: h.feature_dim,
            proprio_dim: h.proprio_dim,
            k: h.k,
            chunk_stride: h.chunk_stride,
            dataset_fingerprint: h.dataset_fingerprint.clone(),
            train_seed_range: h.train_seed_range,
        },
    };
    Ok((policy, curve))
}

pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    schema_version: u32,
    layer_sizes: Vec<usize>,
    activation: Activation,
    action_dim: usize,
    input_norm: Normalizer,
    action_norm: Normalizer,
    meta: PolicyMeta,
    n_params: usize,
}

/// Self-describing JSON header line followed by the little-endian f64
/// parameter blob.
pub fn checkpoint_bytes(policy: &Policy) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_MAGIC.into(),
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        layer_sizes: policy.params.sizes(),
        activation: policy.params.activation,
        action_dim: policy.params.action_dim,
        input_norm: policy.input_norm.clone(),
        action_norm: policy.action_norm.clone(),
        meta: policy.meta.clone(),
        n_params: policy.params.num_params(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in policy.params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(policy);
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8], origin: &Path) -> Result<Policy> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::corrupt(origin, "missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::corrupt(origin, format!("header: {e}")))?;
    if header.format != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(origin, "not a checkpoint"));
    }
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_SCHEMA_VERSION,
            found: header.schema_version,
        });
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != header.n_params * 8 {
        return Err(Error::corrupt(
            origin,
            format!("blob has {} bytes, expected {}", blob.len(), header.n_params * 8),
        ));
    }
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = PolicyParams::zeros(&header.layer_sizes, header.activation, header.meta.k, header.action_dim)?;
    params.load_flat(&flat)?;
    let din = header.meta.feature_dim + header.meta.proprio_dim;
    if params.input_dim() != din || header.input_norm.dim() != din || header.action_norm.dim() != header.action_dim {
        return Err(Error::corrupt(origin, "inconsistent dimensions"));
    }
    Ok(Policy {
        params,
        input_norm: header.input_norm,
        action_norm: header.action_norm,
        meta: header.meta,
    })
}

/// Loads a checkpoint; when `expect` is given, refuses a mismatched
/// extractor kind or feature width.
pub fn load_checkpoint(path: &Path, expect: Option<(ExtractorKind, usize)>) -> Result<Policy> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let policy = parse_checkpoint(&bytes, path)?;
    if let Some((kind, width)) = expect {
        policy.check_compatible(kind, width)?;
    }
    Ok(policy)
}

pub fn proprio_input(p: &Proprio) -> [f64; Proprio::DIM] {
    p.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // Naive triple-loop reference forward, independent of the dgemm path.
    fn oracle_forward(p: &PolicyParams, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (li, l) in p.layers.iter().enumerate() {
            let mut z = vec![0.0; l.outputs];
            for o in 0..l.outputs {
                let mut s = l.bias[o];
                for i in 0..l.inputs {
                    s += l.weights[o * l.inputs + i] * a[i];
                }
                z[o] = if li + 1 < p.layers.len() { s.tanh() } else { s };
            }
            a = z;
        }
        a
    }

    fn random_params(sizes: &[usize], k: usize, seed: u64) -> PolicyParams {
        let mut p = PolicyParams::init(sizes, Activation::Tanh, k, sizes[sizes.len() - 1] / k, seed).unwrap();
        let mut rng = rng::rng_from_seed(seed ^ 0xABCD);
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    #[test]
    fn zero_params_give_zero_chunk() {
        let p = PolicyParams::zeros(&[7, 4, 10], Activation::Tanh, 2, 5).unwrap();
        let c = forward(&p, &[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0]).unwrap();
        assert_eq!(c.data, vec![0.0; 10]);
        assert_eq!(c.k, 2);
    }

    #[test]
    fn identity_layer_copies_input() {
        let mut p = PolicyParams::zeros(&[8, 10], Activation::Tanh, 2, 5).unwrap();
        for i in 0..8 {
            p.layers[0].weights[i * 8 + i] = 1.0;
        }
        let feature = [0.1, -0.2, 0.3, 0.0, 0.0];
        let proprio = [0.5, 0.6, 0.7];
        let c = forward(&p, &feature, &proprio).unwrap();
        assert_eq!(&c.data[..8], &[0.1, -0.2, 0.3, 0.0, 0.0, 0.5, 0.6, 0.7]);
        assert_eq!(&c.data[8..], &[0.0, 0.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = rng::rng_from_seed(3);
        for seed in 0..20 {
            let p = random_params(&[9, 13, 7, 10], 2, seed);
            let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = forward(&p, &x[..6], &x[6..]).unwrap().data;
            let want = oracle_forward(&p, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = PolicyParams::zeros(&[7, 10], Activation::Tanh, 2, 5).unwrap();
        assert!(matches!(forward(&p, &[1.0; 3], &[1.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn loss_arithmetic() {
        let p = PolicyParams::zeros(&[1, 2], Activation::Tanh, 1, 2).unwrap();
        // zero output; residual (1, 2) -> 5
        let b = Batch::new(1, vec![0.3], vec![-1.0, -2.0]);
        assert_eq!(loss(&p, &b).unwrap(), 5.0);
        let b = Batch::new(1, vec![0.3], vec![0.0, 0.0]);
        assert_eq!(loss(&p, &b).unwrap(), 0.0);
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let p = random_params(&[4, 6, 6], 2, 1);
        let x = vec![0.1, 0.2, -0.3, 0.4];
        let y = p.forward_raw(&x).unwrap();
        let (l, g) = backward(&p, &Batch::new(1, x, y)).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn last_bias_gradient_is_mean_residual() {
        let p = random_params(&[3, 5, 4], 2, 4);
        let x = vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.5];
        let y = vec![0.5; 8];
        let batch = Batch::new(2, x.clone(), y.clone());
        let (_, g) = backward(&p, &batch).unwrap();
        let mut expect = vec![0.0; 4];
        for r in 0..2 {
            let out = p.forward_raw(&x[r * 3..(r + 1) * 3]).unwrap();
            for o in 0..4 {
                expect[o] += 2.0 / 2.0 * (out[o] - y[r * 4 + o]);
            }
        }
        for (a, b) in g.bias[1].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng::rng_from_seed(11);
        let mut p = random_params(&[5, 8, 6, 4], 2, 9);
        let n = 3;
        let x: Vec<f64> = (0..n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Batch::new(n, x, y);
        let (_, g) = backward(&p, &batch).unwrap();
        let analytic = g.flatten();
        let mut flat = p.flatten();
        let h = 1e-5;
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + h;
            p.load_flat(&flat).unwrap();
            let lp = loss(&p, &batch).unwrap();
            flat[i] = orig - h;
            p.load_flat(&flat).unwrap();
            let lm = loss(&p, &batch).unwrap();
            flat[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let denom = num.abs().max(analytic[i].abs()).max(1e-8);
            assert!((num - analytic[i]).abs() / denom < 1e-4, "param {i}: {num} vs {}", analytic[i]);
        }
    }

    #[test]
    fn normalizer_roundtrip() {
        let rows = vec![1.0, 5.0, 3.0, 5.0, -2.0, 5.0];
        let n = Normalizer::fit(&rows, 2);
        assert_eq!(n.std[1], 1.0);
        let mut v = vec![0.7, 123.0];
        n.encode(&mut v);
        n.decode(&mut v);
        assert!((v[0] - 0.7).abs() < 1e-12 && (v[1] - 123.0).abs() < 1e-12);
    }

    #[test]
    fn bias_only_model_averages_conflicting_targets() {
        // One input maps to two targets: the squared-error optimum is their mean.
        let mut p = PolicyParams::zeros(&[1, 2], Activation::Identity, 1, 2).unwrap();
        let y1 = [1.0, -3.0];
        let y2 = [3.0, 1.0];
        let batch = Batch::new(2, vec![0.0, 0.0], [y1, y2].concat());
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 2,
            epochs: 3000,
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        fit(&mut p, &batch.inputs, &batch.targets, &cfg).unwrap();
        let out = p.forward_raw(&[0.0]).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-6 && (out[1] + 1.0).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn fixed_seed_training_is_deterministic() {
        let mut rng = rng::rng_from_seed(1);
        let x: Vec<f64> = (0..40 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..40 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = TrainConfig {
            hidden: vec![8],
            epochs: 5,
            batch_size: 7,
            ..TrainConfig::default()
        };
        let run = || {
            let mut p = PolicyParams::init(&[3, 8, 2], Activation::Tanh, 1, 2, 5).unwrap();
            let c = fit(&mut p, &x, &y, &cfg).unwrap();
            (p, c)
        };
        assert_eq!(run(), run());
    }
}
