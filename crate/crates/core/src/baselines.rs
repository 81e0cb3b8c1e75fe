//! Reference strategies run under the same streaming protocol.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::accup::row_argmax;
use crate::adapt::{Adapter, BatchResult};
use crate::autodiff::{BnMode, Graph, Var};
use crate::backbone::{cross_entropy, Model, ParamId};
use crate::data::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Frozen model, running statistics.
    Source,
    /// Current-batch normalisation statistics, no parameter update.
    BnStats,
    /// One step on BN affine parameters minimising mean prediction entropy.
    Tent,
    /// One step on BN affine parameters with cross-entropy on hard
    /// pseudo-labels.
    PseudoLabel,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Source => "source",
            BaselineKind::BnStats => "bn-stats",
            BaselineKind::Tent => "tent",
            BaselineKind::PseudoLabel => "pseudo-label",
        }
    }

    pub fn takes_steps(self) -> bool {
        matches!(self, BaselineKind::Tent | BaselineKind::PseudoLabel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: BaselineKind,
    pub lr: f64,
}

/// Mean Shannon entropy of the softmax of `logits` `[B, C]`.
pub fn mean_entropy<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    let b = logits.shape()[0];
    let p = logits.softmax()?;
    p.mul(logits.log_softmax()?)?.sum()?.scale(-1.0 / b as f64)
}

#[derive(Clone, Debug)]
pub struct BaselineState {
    model: Model,
    config: StrategyConfig,
    trainable: BTreeSet<ParamId>,
    opt: Adam<ParamId>,
    steps: u64,
}

impl BaselineState {
    pub fn new(model: Model, config: StrategyConfig) -> Result<Self> {
        let adam = AdamConfig::with_lr(config.lr);
        adam.validate()?;
        let trainable = if config.kind.takes_steps() {
            ParamId::encoder().into_iter().filter(|id| id.is_bn_affine()).collect()
        } else {
            BTreeSet::new()
        };
        Ok(Self {
            model,
            config,
            trainable,
            opt: Adam::new(adam),
            steps: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn adapt_batch(&mut self, batch: &TimeSeriesBatch) -> Result<BatchResult> {
        self.model.check_input(batch)?;
        let kind = self.config.kind;
        let mode = if kind == BaselineKind::Source { BnMode::RunningStats } else { BnMode::TrainStats };
        let g = Graph::new();
        let params = self.model.bind(&g, &self.trainable);
        let out = self.model.forward(&params, g.constant(batch.to_tensor()), mode)?;
        let logits = out.logits.value();
        let predictions = row_argmax(&logits);
        let loss = match kind {
            BaselineKind::Source | BaselineKind::BnStats => return Ok(BatchResult { predictions, loss: 0.0 }),
            BaselineKind::Tent => mean_entropy(out.logits)?,
            BaselineKind::PseudoLabel => cross_entropy(out.logits, &predictions)?,
        };
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::numeric(kind.name(), format!("loss {value}")));
        }
        let grads = g.backward(loss)?;
        self.opt.tick();
        for (id, var) in params.iter().filter(|(id, _)| self.trainable.contains(id)) {
            if let Some(gr) = grads.get(var) {
                self.opt.update(&id, self.model.param_mut(id).data_mut(), gr);
            }
        }
        self.steps += 1;
        Ok(BatchResult { predictions, loss: value })
    }
}

impl Adapter for BaselineState {
    fn name(&self) -> String {
        self.config.kind.name().into()
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn adapt(&mut self, batch: &TimeSeriesBatch) -> Result<BatchResult> {
        self.adapt_batch(batch)
    }
}
