//! The online adaptation loop.
//!
//! Every batch is seen once: it is predicted from the current parameters,
//! then used for one optimizer step on the selected encoder blocks. Inputs
//! enter as [`TimeSeriesBatch`], which has no label field, so nothing in
//! here can look at ground truth; labels travel alongside in
//! [`StreamItem`] and are only read after the stream has been consumed.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accup::{self, AccupConfig, PrototypeSet, SupportSet, WeightMode};
use crate::autodiff::{BnMode, Graph, Var};
use crate::backbone::{Forward, Model, ParamId, BLOCKS};
use crate::data::{Dataset, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::metrics::macro_f1;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Which encoder blocks take optimizer steps. The classifier never does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub blocks: [bool; BLOCKS],
}

impl Default for LayerMask {
    fn default() -> Self {
        Self { blocks: [true; BLOCKS] }
    }
}

impl LayerMask {
    pub fn only(block: usize) -> Self {
        let mut blocks = [false; BLOCKS];
        blocks[block] = true;
        Self { blocks }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.iter().any(|&b| b) {
            Ok(())
        } else {
            Err(Error::Config("at least one encoder block must be trainable".into()))
        }
    }

    pub fn trainable(&self) -> BTreeSet<ParamId> {
        ParamId::encoder()
            .into_iter()
            .filter(|id| id.block().is_some_and(|b| self.blocks[b]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub accup: AccupConfig,
    pub lr: f64,
    pub layers: LayerMask,
    /// Normalisation statistics for the adaptation forwards.
    pub bn: BnMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            accup: AccupConfig::default(),
            lr: 3e-4,
            layers: LayerMask::default(),
            bn: BnMode::TrainStats,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.accup.validate()?;
        self.layers.validate()?;
        AdamConfig::with_lr(self.lr).validate()
    }

    /// All modules off, running statistics, no learning: plain inference.
    pub fn inert() -> Self {
        Self {
            accup: AccupConfig {
                use_prototypes: false,
                use_entropy_comparison: false,
                use_augmentation: false,
                use_contrast: false,
                ..AccupConfig::default()
            },
            lr: 0.0,
            bn: BnMode::RunningStats,
            ..Self::default()
        }
    }
}

/// Optimizer slots: model parameters plus the ensemble weight logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Param(ParamId),
    WeightLogit,
}

/// Everything one adaptation step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// `argmax(p_out)`, from the forward pass before the update.
    pub predictions: Vec<usize>,
    pub p_out: Tensor,
    pub p_ens: Tensor,
    pub h_ens: Vec<f64>,
    /// Absent when prototypes are switched off.
    pub p_proto: Option<Tensor>,
    pub h_proto: Option<Vec<f64>>,
    pub loss: f64,
    /// Euclidean norm of the gradient over all trainable tensors.
    pub grad_norm: f64,
    /// Largest absolute difference between raw and augmented features.
    pub view_gap: f64,
    /// Loss rows (over both views) that came from prototype logits.
    pub proto_loss_rows: usize,
    /// Ensemble weight on the raw view used in this step.
    pub weight: f64,
}

/// Mutable state of one adaptation run.
#[derive(Clone, Debug)]
pub struct AdaptState {
    model: Model,
    config: AdaptConfig,
    trainable: BTreeSet<ParamId>,
    opt: Adam<Slot>,
    support: SupportSet,
    weight_logit: f64,
    steps: u64,
    rng: ChaCha8Rng,
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl AdaptState {
    pub fn new(model: Model, config: AdaptConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let support = SupportSet::from_classifier(model.param(ParamId::ClassifierWeight))?;
        let w = config.accup.weight;
        Ok(Self {
            trainable: config.layers.trainable(),
            opt: Adam::new(AdamConfig::with_lr(config.lr)),
            weight_logit: (w / (1.0 - w)).ln(),
            support,
            model,
            config,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn support(&self) -> &SupportSet {
        &self.support
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn trainable(&self) -> &BTreeSet<ParamId> {
        &self.trainable
    }

    /// Current raw-view ensemble weight.
    pub fn weight(&self) -> f64 {
        match self.config.accup.weight_mode {
            WeightMode::Fixed => self.config.accup.weight,
            WeightMode::Learnable => 1.0 / (1.0 + (-self.weight_logit).exp()),
        }
    }

    /// One arrival: predict, grow the support set, take one optimizer step.
    ///
    /// Only label-free input is accepted:
    ///
    /// ```compile_fail
    /// use accup::adapt::AdaptState;
    /// use accup::data::LabeledBatch;
    ///
    /// fn feed(state: &mut AdaptState, batch: &LabeledBatch) {
    ///     state.adapt_batch(batch).unwrap();
    /// }
    /// ```
    pub fn adapt_batch(&mut self, batch: &TimeSeriesBatch) -> Result<StepOutcome> {
        self.model.check_input(batch)?;
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let cfg = self.config.accup.clone();
        let augmented = if cfg.use_augmentation {
            Some(cfg.augment.apply(batch, &mut self.rng)?)
        } else {
            None
        };

        let g = Graph::new();
        let params = self.model.bind(&g, &self.trainable);
        let raw = self.model.forward(&params, g.constant(batch.to_tensor()), self.config.bn)?;
        let (w_var, w_leaf) = match cfg.weight_mode {
            WeightMode::Fixed => (g.constant(Tensor::scalar(cfg.weight)), None),
            WeightMode::Learnable => {
                let s = g.param(Tensor::scalar(self.weight_logit));
                (s.sigmoid()?, Some(s))
            }
        };
        let weight = w_var.item()?;
        let (aug, f_ens, p_ens) = match &augmented {
            Some(a) => {
                let aug = self.model.forward(&params, g.constant(a.to_tensor()), self.config.bn)?;
                let f = accup::ensemble_var(raw.features, aug.features, w_var)?.value();
                let p = accup::ensemble_var(raw.logits, aug.logits, w_var)?.value();
                (aug, f, p)
            }
            None => (
                Forward { features: raw.features, logits: raw.logits },
                raw.features.value(),
                raw.logits.value(),
            ),
        };
        let view_gap = max_abs_diff(&raw.features.value(), &aug.features.value());
        let h_ens = accup::row_entropies(&p_ens)?;

        let protos = if cfg.use_prototypes {
            self.support.update(&f_ens, &p_ens, &h_ens)?;
            Some(self.support.prototypes(cfg.k)?)
        } else {
            None
        };
        let (p_proto, h_proto) = match &protos {
            Some(ps) => {
                let p = accup::prototype_logits(&f_ens, ps, cfg.eta)?;
                let h = accup::row_entropies(&p)?;
                (Some(p), Some(h))
            }
            None => (None, None),
        };
        let (p_out, predictions) = match (&p_proto, &h_proto) {
            (Some(pp), Some(hp)) if cfg.use_entropy_comparison => {
                let sel = accup::entropy_compare(&p_ens, &h_ens, pp, hp)?;
                (sel.p_out, sel.labels)
            }
            _ => (p_ens.clone(), accup::row_argmax(&p_ens)),
        };

        let (loss, grads, proto_loss_rows) = if cfg.use_contrast {
            let labels: Vec<usize> = predictions.iter().chain(&predictions).copied().collect();
            let active = if cfg.use_entropy_comparison { protos.as_ref() } else { None };
            let (loss, rows) = loss_var(&cfg, &raw, &aug, active, &labels)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::numeric("adapt_batch", format!("loss {value} at step {}", self.steps)));
            }
            (value, Some(g.backward(loss)?), rows)
        } else {
            (0.0, None, 0)
        };

        self.opt.tick();
        let mut sq = 0.0;
        for (id, var) in params.iter().filter(|(id, _)| self.trainable.contains(id)) {
            let n = self.model.param(id).numel();
            let grad = grads
                .as_ref()
                .and_then(|gr| gr.get(var))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; n]);
            sq += grad.iter().map(|v| v * v).sum::<f64>();
            self.opt.update(&Slot::Param(id), self.model.param_mut(id).data_mut(), &grad);
        }
        if let Some(s) = w_leaf {
            let grad = grads.as_ref().and_then(|gr| gr.get(s)).map_or(0.0, |v| v[0]);
            sq += grad * grad;
            let mut logit = [self.weight_logit];
            self.opt.update(&Slot::WeightLogit, &mut logit, &[grad]);
            self.weight_logit = logit[0];
        }
        self.steps += 1;

        Ok(StepOutcome {
            predictions,
            p_out,
            p_ens,
            h_ens,
            p_proto,
            h_proto,
            loss,
            grad_norm: sq.sqrt(),
            view_gap,
            proto_loss_rows,
            weight,
        })
    }
}

/// Per-view loss logits: classifier logits, replaced row-wise by the
/// view's prototype logits where those have lower or equal entropy.
fn view_logits<'g>(view: &Forward<'g>, protos: Option<&PrototypeSet>, eta: f64) -> Result<(Var<'g>, usize)> {
    let Some(protos) = protos else {
        return Ok((view.logits, 0));
    };
    let pp = accup::prototype_logits_var(view.features, protos, eta)?;
    let h_cls = accup::row_entropies(&view.logits.value())?;
    let h_pp = accup::row_entropies(&pp.value())?;
    let pick: Vec<bool> = h_cls.iter().zip(&h_pp).map(|(c, p)| p <= c).collect();
    let n = pick.iter().filter(|&&p| p).count();
    Ok((accup::select_rows(view.logits, pp, &pick)?, n))
}

/// Contrastive loss over the raw and augmented views stacked in that order.
fn loss_var<'g>(
    cfg: &AccupConfig,
    raw: &Forward<'g>,
    aug: &Forward<'g>,
    protos: Option<&PrototypeSet>,
    labels: &[usize],
) -> Result<(Var<'g>, usize)> {
    let (lr_raw, n_raw) = view_logits(raw, protos, cfg.eta)?;
    let (lr_aug, n_aug) = view_logits(aug, protos, cfg.eta)?;
    let both = raw.logits.graph().concat(&[lr_raw, lr_aug], 0)?;
    Ok((accup::contrastive_loss(both, labels, cfg.tau, cfg.anchors)?, n_raw + n_aug))
}

/// Gradient per trainable tensor, in parameter order.
pub type ParamGrads = Vec<(ParamId, Vec<f64>)>;

/// The parts of a step that the loss treats as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    /// `None` reuses the raw view.
    pub augmented: Option<TimeSeriesBatch>,
    /// `None` keeps classifier logits for every row.
    pub prototypes: Option<PrototypeSet>,
    /// Pseudo-labels for the raw rows followed by the augmented rows.
    pub labels: Vec<usize>,
}

/// The adaptation loss of `model` on `batch` and its gradient with respect
/// to every tensor `config.layers` marks trainable. Works on a copy, so
/// running statistics of `model` are untouched.
pub fn accup_loss(
    model: &Model,
    config: &AdaptConfig,
    batch: &TimeSeriesBatch,
    targets: &LossTargets,
) -> Result<(f64, ParamGrads)> {
    let mut model = model.clone();
    model.check_input(batch)?;
    let trainable = config.layers.trainable();
    let g = Graph::new();
    let params = model.bind(&g, &trainable);
    let raw = model.forward(&params, g.constant(batch.to_tensor()), config.bn)?;
    let aug = match &targets.augmented {
        Some(a) => model.forward(&params, g.constant(a.to_tensor()), config.bn)?,
        None => Forward { features: raw.features, logits: raw.logits },
    };
    let (loss, _) = loss_var(&config.accup, &raw, &aug, targets.prototypes.as_ref(), &targets.labels)?;
    let value = loss.item()?;
    let grads = g.backward(loss)?;
    let out = params
        .iter()
        .filter(|(id, _)| trainable.contains(id))
        .map(|(id, var)| {
            let n = model.param(id).numel();
            (id, grads.get(var).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
        })
        .collect();
    Ok((value, out))
}

/// Predictions and loss of one streamed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchResult {
    pub predictions: Vec<usize>,
    pub loss: f64,
}

/// A strategy that consumes a stream one batch at a time.
pub trait Adapter {
    fn name(&self) -> String;
    fn model(&self) -> &Model;
    /// Optimizer steps taken so far.
    fn steps(&self) -> u64;
    fn adapt(&mut self, batch: &TimeSeriesBatch) -> Result<BatchResult>;
}

impl Adapter for AdaptState {
    fn name(&self) -> String {
        "accup".into()
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn adapt(&mut self, batch: &TimeSeriesBatch) -> Result<BatchResult> {
        let out = self.adapt_batch(batch)?;
        Ok(BatchResult {
            predictions: out.predictions,
            loss: out.loss,
        })
    }
}

/// One streamed batch; `labels` are read only when scoring the finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamItem {
    pub inputs: TimeSeriesBatch,
    pub labels: Option<Vec<usize>>,
}

/// Stored-order batches of `ds`, labels kept for scoring.
pub fn stream_from_dataset(ds: &Dataset, batch_size: usize) -> Vec<StreamItem> {
    ds.batches(batch_size)
        .into_iter()
        .map(|b| StreamItem {
            inputs: b.inputs,
            labels: Some(b.labels),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
    pub model_hash: String,
    pub batch_losses: Vec<f64>,
    pub predictions: Vec<Vec<usize>>,
    /// Present when every batch carried labels.
    pub macro_f1: Option<f64>,
    pub steps: u64,
    pub wall_ms: u64,
}

/// Lowercase hex SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Folds `adapter` over `stream` in order and scores the result.
pub fn run_adapter<A: Adapter + ?Sized>(
    adapter: &mut A,
    stream: &[StreamItem],
    seed: u64,
    config_hash: String,
) -> Result<RunRecord> {
    if stream.is_empty() {
        return Err(Error::Contract("cannot adapt on an empty stream".into()));
    }
    let model_hash = content_hash(&adapter.model().snapshot_bytes());
    let classes = adapter.model().classes();
    let start = Instant::now();
    let mut predictions = Vec::with_capacity(stream.len());
    let mut batch_losses = Vec::with_capacity(stream.len());
    for (i, item) in stream.iter().enumerate() {
        let r = adapter.adapt(&item.inputs).map_err(|e| e.context(&format!("batch {i}")))?;
        predictions.push(r.predictions);
        batch_losses.push(r.loss);
    }
    let wall_ms = start.elapsed().as_millis() as u64;
    let macro_f1 = if stream.iter().all(|s| s.labels.is_some()) {
        let truth: Vec<usize> = stream.iter().flat_map(|s| s.labels.iter().flatten().copied()).collect();
        let preds: Vec<usize> = predictions.iter().flatten().copied().collect();
        Some(macro_f1(&preds, &truth, classes)?.macro_f1)
    } else {
        None
    };
    Ok(RunRecord {
        strategy: adapter.name(),
        seed,
        config_hash,
        model_hash,
        batch_losses,
        predictions,
        macro_f1,
        steps: adapter.steps(),
        wall_ms,
    })
}

/// Adapts a copy of `model` over `stream` with ACCUP.
pub fn run_stream(model: &Model, stream: &[StreamItem], config: &AdaptConfig, seed: u64) -> Result<RunRecord> {
    let mut state = AdaptState::new(model.clone(), config.clone(), seed)?;
    let hash = content_hash(&serde_json::to_vec(config)?);
    run_adapter(&mut state, stream, seed, hash)
}
