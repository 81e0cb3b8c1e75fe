//! The source model: a three-block 1-D CNN encoder and a linear classifier.
//!
//! Each block is conv1d (same padding, `k / 2` on both sides) followed by
//! batch norm, ReLU and non-overlapping max pooling. The last block's
//! output is averaged over time, so the feature dimension equals the last
//! block's filter count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Graph, RunningStats, Var};
use crate::data::{Dataset, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{self, Tensor};

pub const BLOCKS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub filters: [usize; BLOCKS],
    pub kernels: [usize; BLOCKS],
    pub strides: [usize; BLOCKS],
    pub pools: [usize; BLOCKS],
    pub bn_eps: f64,
}

impl EncoderConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            filters: [64, 128, 128],
            kernels: [8, 5, 3],
            strides: [1, 1, 1],
            pools: [2, 2, 2],
            bn_eps: 1e-5,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.filters[BLOCKS - 1]
    }

    /// Time extent after every block, or an error if some stage would be
    /// empty.
    pub fn lengths(&self, len: usize) -> Result<[usize; BLOCKS]> {
        let mut out = [0; BLOCKS];
        let mut l = len;
        for b in 0..BLOCKS {
            let (k, s, p) = (self.kernels[b], self.strides[b], self.pools[b]);
            let pad = k / 2;
            if l + 2 * pad < k {
                return Err(Error::Config(format!("block {b}: length {l} too short for kernel {k}")));
            }
            l = (l + 2 * pad - k) / s + 1;
            if l < p {
                return Err(Error::Config(format!("block {b}: length {l} too short for pool {p}")));
            }
            l /= p;
            out[b] = l;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.in_channels > 0
            && [self.filters, self.kernels, self.strides, self.pools]
                .iter()
                .all(|a| a.iter().all(|&v| v > 0));
        if !positive || !(self.bn_eps > 0.0) {
            return Err(Error::Config(format!("encoder extents must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Addresses one parameter tensor of a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    ConvWeight(usize),
    ConvBias(usize),
    BnGamma(usize),
    BnBeta(usize),
    ClassifierWeight,
    ClassifierBias,
}

impl ParamId {
    pub fn block(self) -> Option<usize> {
        match self {
            ParamId::ConvWeight(b) | ParamId::ConvBias(b) | ParamId::BnGamma(b) | ParamId::BnBeta(b) => Some(b),
            ParamId::ClassifierWeight | ParamId::ClassifierBias => None,
        }
    }

    pub fn is_bn_affine(self) -> bool {
        matches!(self, ParamId::BnGamma(_) | ParamId::BnBeta(_))
    }

    pub fn all() -> Vec<ParamId> {
        let mut ids = ParamId::encoder();
        ids.extend([ParamId::ClassifierWeight, ParamId::ClassifierBias]);
        ids
    }

    pub fn encoder() -> Vec<ParamId> {
        (0..BLOCKS)
            .flat_map(|b| [ParamId::ConvWeight(b), ParamId::ConvBias(b), ParamId::BnGamma(b), ParamId::BnBeta(b)])
            .collect()
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::ConvWeight(b) => write!(f, "block{b}.conv.weight"),
            ParamId::ConvBias(b) => write!(f, "block{b}.conv.bias"),
            ParamId::BnGamma(b) => write!(f, "block{b}.bn.gamma"),
            ParamId::BnBeta(b) => write!(f, "block{b}.bn.beta"),
            ParamId::ClassifierWeight => f.write_str("classifier.weight"),
            ParamId::ClassifierBias => f.write_str("classifier.bias"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: EncoderConfig,
    classes: usize,
    blocks: Vec<ConvBlock>,
    classifier_weight: Tensor,
    classifier_bias: Tensor,
}

/// Parameters of a [`Model`] placed on one graph.
pub struct BoundParams<'g> {
    vars: BTreeMap<ParamId, Var<'g>>,
}

impl<'g> BoundParams<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[&id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var<'g>)> + '_ {
        self.vars.iter().map(|(k, v)| (*k, *v))
    }
}

/// Features and logits of one forward pass.
pub struct Forward<'g> {
    pub features: Var<'g>,
    pub logits: Var<'g>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl Model {
    /// Fresh model with uniform `±1/sqrt(fan_in)` weights and biases, unit
    /// BN scale and zero BN shift.
    pub fn new(config: EncoderConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = config.in_channels;
        let mut blocks = Vec::with_capacity(BLOCKS);
        for b in 0..BLOCKS {
            let (cout, k) = (config.filters[b], config.kernels[b]);
            let bound = 1.0 / ((cin * k) as f64).sqrt();
            blocks.push(ConvBlock {
                weight: uniform(&[cout, cin, k], bound, &mut rng),
                bias: uniform(&[cout], bound, &mut rng),
                gamma: Tensor::full(&[cout], 1.0),
                beta: Tensor::zeros(&[cout]),
                stats: RunningStats::new(cout),
            });
            cin = cout;
        }
        let f = config.feature_dim();
        let bound = 1.0 / (f as f64).sqrt();
        Ok(Self {
            classifier_weight: uniform(&[classes, f], bound, &mut rng),
            classifier_bias: uniform(&[classes], bound, &mut rng),
            config,
            classes,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::ConvWeight(b) => &self.blocks[b].weight,
            ParamId::ConvBias(b) => &self.blocks[b].bias,
            ParamId::BnGamma(b) => &self.blocks[b].gamma,
            ParamId::BnBeta(b) => &self.blocks[b].beta,
            ParamId::ClassifierWeight => &self.classifier_weight,
            ParamId::ClassifierBias => &self.classifier_bias,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::ConvWeight(b) => &mut self.blocks[b].weight,
            ParamId::ConvBias(b) => &mut self.blocks[b].bias,
            ParamId::BnGamma(b) => &mut self.blocks[b].gamma,
            ParamId::BnBeta(b) => &mut self.blocks[b].beta,
            ParamId::ClassifierWeight => &mut self.classifier_weight,
            ParamId::ClassifierBias => &mut self.classifier_bias,
        }
    }

    /// Puts every parameter on `g`; those in `trainable` require gradients.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: &BTreeSet<ParamId>) -> BoundParams<'g> {
        let vars = ParamId::all()
            .into_iter()
            .map(|id| (id, g.leaf(self.param(id).clone(), trainable.contains(&id))))
            .collect();
        BoundParams { vars }
    }

    pub fn check_input(&self, x: &TimeSeriesBatch) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::shape(
                "encode",
                &x.shape(),
                &[x.batch_size(), self.config.in_channels, x.len()],
            ));
        }
        self.config.lengths(x.len()).map(|_| ())
    }

    /// Encoder only; `x` is `[B, Cin, L]`, the result `[B, F]`. In
    /// [`BnMode::TrainStats`] the running statistics are refreshed.
    pub fn encode_var<'g>(&mut self, p: &BoundParams<'g>, x: Var<'g>, mode: BnMode) -> Result<Var<'g>> {
        let mut h = x;
        let eps = self.config.bn_eps;
        for b in 0..BLOCKS {
            let k = self.config.kernels[b];
            h = h.conv1d(p.get(ParamId::ConvWeight(b)), p.get(ParamId::ConvBias(b)), self.config.strides[b], k / 2)?;
            h = h.batch_norm1d(
                p.get(ParamId::BnGamma(b)),
                p.get(ParamId::BnBeta(b)),
                &mut self.blocks[b].stats,
                mode,
                eps,
            )?;
            h = h.relu()?.max_pool1d(self.config.pools[b])?;
        }
        h.mean_axis(2)
    }

    /// `features · Wᵀ + bias`.
    pub fn classify_var<'g>(&self, p: &BoundParams<'g>, features: Var<'g>) -> Result<Var<'g>> {
        let w = p.get(ParamId::ClassifierWeight);
        features.matmul(w.t()?)?.add(p.get(ParamId::ClassifierBias))
    }

    pub fn forward<'g>(&mut self, p: &BoundParams<'g>, x: Var<'g>, mode: BnMode) -> Result<Forward<'g>> {
        let features = self.encode_var(p, x, mode)?;
        let logits = self.classify_var(p, features)?;
        Ok(Forward { features, logits })
    }

    /// Gradient-free encoder pass.
    pub fn encode(&mut self, x: &TimeSeriesBatch, mode: BnMode) -> Result<Tensor> {
        self.check_input(x)?;
        let g = Graph::new();
        let p = self.bind(&g, &BTreeSet::new());
        let xv = g.constant(x.to_tensor());
        Ok(self.encode_var(&p, xv, mode)?.value())
    }

    /// Gradient-free classifier pass on `[B, F]` features.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.bind(&g, &BTreeSet::new());
        let f = g.constant(features.clone());
        Ok(self.classify_var(&p, f)?.value())
    }

    /// Gradient-free pass returning `(features, logits)`.
    pub fn predict(&mut self, x: &TimeSeriesBatch, mode: BnMode) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let g = Graph::new();
        let p = self.bind(&g, &BTreeSet::new());
        let xv = g.constant(x.to_tensor());
        let out = self.forward(&p, xv, mode)?;
        Ok((out.features.value(), out.logits.value()))
    }

    /// Named tensors in a fixed order, running statistics included.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = ParamId::all()
            .into_iter()
            .map(|id| (id.to_string(), self.param(id).clone()))
            .collect();
        for (b, blk) in self.blocks.iter().enumerate() {
            let c = blk.stats.mean.len();
            out.push((format!("block{b}.bn.running_mean"), Tensor::from_parts(vec![c], blk.stats.mean.clone())));
            out.push((format!("block{b}.bn.running_var"), Tensor::from_parts(vec![c], blk.stats.var.clone())));
        }
        out
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        tensor::snapshot_bytes(&self.named_tensors())
    }

    fn from_named(config: EncoderConfig, classes: usize, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Model::new(config, classes, 0)?;
        let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Format(format!("snapshot is missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for id in ParamId::all() {
            let shape = model.param(id).shape().to_vec();
            *model.param_mut(id) = take(&id.to_string(), &shape)?;
        }
        for b in 0..BLOCKS {
            let c = model.blocks[b].stats.mean.len();
            model.blocks[b].stats.mean = take(&format!("block{b}.bn.running_mean"), &[c])?.into_data();
            model.blocks[b].stats.var = take(&format!("block{b}.bn.running_var"), &[c])?.into_data();
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra} in snapshot")));
        }
        Ok(model)
    }

    /// Writes `path` (tensor snapshot) and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        tensor::write_snapshot(BufWriter::new(file), &self.named_tensors())?;
        let meta = ModelMeta {
            encoder: self.config.clone(),
            classes: self.classes,
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let tensors = tensor::read_snapshot(std::io::BufReader::new(fs::File::open(path)?))?;
        Model::from_named(meta.encoder, meta.classes, tensors)
    }
}

/// Contents of the JSON sidecar written next to a model snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub encoder: EncoderConfig,
    pub classes: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Mean cross-entropy of `logits` `[B, C]` against hard labels.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let c = shape[1];
    let mut onehot = vec![0.0; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::LabelRange { label: l as i64, classes: c });
        }
        onehot[i * c + l] = 1.0;
    }
    let mask = logits.graph().constant(Tensor::from_parts(shape, onehot));
    logits.log_softmax()?.mul(mask)?.sum()?.scale(-1.0 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Sample-weighted mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Supervised training of every parameter on the labelled source set, with
/// BN in train-stats mode.
pub fn pretrain_source(model: &mut Model, train: &Dataset, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(Error::Config("pretraining set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if train.classes != model.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            train.classes,
            model.classes()
        )));
    }
    if let Some(&l) = train.labels.iter().find(|&&l| l >= model.classes()) {
        return Err(Error::LabelRange { label: l as i64, classes: model.classes() });
    }
    model.check_input(&train.inputs)?;
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    adam_cfg.validate()?;
    let mut opt = Adam::new(adam_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trainable: BTreeSet<ParamId> = ParamId::all().into_iter().collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in train.shuffled_batches(cfg.batch_size, &mut rng) {
            // A lone sample with a short series cannot be batch-normalised.
            if batch.labels.len() * batch.inputs.len() < 2 {
                continue;
            }
            let g = Graph::new();
            let p = model.bind(&g, &trainable);
            let x = g.constant(batch.inputs.to_tensor());
            let out = model.forward(&p, x, BnMode::TrainStats)?;
            let loss = cross_entropy(out.logits, &batch.labels)?;
            total += loss.item()? * batch.labels.len() as f64;
            let grads = g.backward(loss)?;
            opt.tick();
            for (id, var) in p.iter() {
                if let Some(gr) = grads.get(var) {
                    opt.update(&id, model.param_mut(id).data_mut(), gr);
                }
            }
        }
        epoch_losses.push(total / train.len() as f64);
    }
    Ok(PretrainReport { epoch_losses })
}
