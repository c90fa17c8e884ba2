//! SGD with momentum and coupled weight decay under a per-epoch cosine
//! schedule, the epoch loop, fine-tuning and the ablation sweep.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::model::{ablation_matrix, build_model, BackboneConfig, Model};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Gradients, Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.1,
            lr_min: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr_max) || self.lr_min < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "negative weight decay {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / total)) / 2`; the
/// endpoints return `lr_max` and `lr_min` exactly.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || epoch > total {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside [0, {total}]")));
    }
    Ok(match epoch {
        0 => lr_max,
        t if t == total => lr_min,
        t => lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t as f64 / total as f64).cos()),
    })
}

/// One parameter update: `g' = g + wd * theta; v = momentum * v - lr * g'; theta += v`.
pub fn sgd_update(
    theta: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if theta.shape() != grad.shape() || theta.shape() != velocity.shape() {
        return Err(Error::Shape(format!(
            "sgd: parameter {:?}, gradient {:?}, velocity {:?}",
            theta.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, &g), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Applies [`sgd_update`] to every named parameter. Velocities start at
/// zero; parameters without a gradient are treated as having a zero one.
pub fn sgd_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &Gradients,
    velocities: &mut BTreeMap<String, Tensor>,
    lr: f64,
    config: &OptimConfig,
) -> Result<()> {
    for (name, theta) in params {
        let grad = grads
            .param(&name)
            .unwrap_or_else(|| Tensor::zeros(theta.shape().to_vec()));
        let v = velocities
            .entry(name)
            .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
        sgd_update(theta, &grad, v, lr, config.momentum, config.weight_decay)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<(Metrics, f64)>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,val_accuracy,val_precision,val_recall,val_f1,val_auc";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = write!(out, "{},{},{}", r.epoch, r.lr, r.train_loss);
        match &r.val {
            Some((m, auc)) => {
                let _ = writeln!(out, ",{},{},{},{},{}", m.accuracy, m.precision, m.recall, m.f1, auc);
            }
            None => out.push_str(",,,,,\n"),
        }
    }
    out
}

pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Highest validation accuracy seen (first occurrence); equals `last`
    /// when there is no validation split or no epochs ran.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

fn batch_of(samples: &[Sample], indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].image).collect();
    let labels = indices.iter().map(|&i| samples[i].label).collect();
    Ok((Tensor::stack(&images)?, labels))
}

/// Deterministic training run. Batches follow a per-epoch permutation
/// drawn from `(seed, epoch)`; the learning rate is constant within an epoch.
pub fn train(model: &Model, data: &DatasetSplit, optim: &OptimConfig) -> Result<TrainOutcome> {
    run(model.clone(), data, optim, 0)
}

/// Continues from `checkpoint` on new data with fresh velocities and a fresh
/// schedule. A different class count re-initialises the head only.
pub fn finetune(checkpoint: &Checkpoint, data: &DatasetSplit, optim: &OptimConfig) -> Result<TrainOutcome> {
    let mut model = checkpoint.model.clone();
    if let Some(s) = data.train.first() {
        let (h, w, c) = model.backbone.input_size;
        if s.image.shape() != [c, h, w] {
            return Err(Error::Incompatible(format!(
                "checkpoint input is [{c},{h},{w}], data is {:?}",
                s.image.shape()
            )));
        }
    }
    let classes = data.classes.len();
    if classes != model.backbone.classes {
        model.reset_head(classes, derive_seed(optim.seed, "finetune-head"));
    }
    run(model, data, optim, checkpoint.epoch)
}

fn run(mut model: Model, data: &DatasetSplit, optim: &OptimConfig, epoch_offset: usize) -> Result<TrainOutcome> {
    optim.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if let Some(&label) = data
        .train
        .iter()
        .map(|s| &s.label)
        .find(|&&l| l >= model.backbone.classes)
    {
        return Err(Error::LabelOutOfRange {
            label,
            classes: model.backbone.classes,
        });
    }
    let n = data.train.len();
    let batch = optim.batch_size.min(n);
    let mut velocities = BTreeMap::new();
    let mut history = Vec::with_capacity(optim.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut steps = 0;

    for t in 0..optim.epochs {
        let lr = cosine_lr(t, optim.epochs, optim.lr_max, optim.lr_min)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(optim.seed, &format!("shuffle/{t}")));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let abort = |e: Error| Error::TrainingAborted {
                epoch: t + 1,
                batch: b,
                reason: e.to_string(),
            };
            let (images, labels) = batch_of(&data.train, chunk)?;
            let mut g = Graph::new();
            let x = g.constant(images)?;
            let trace = model.forward_graph(&mut g, x).map_err(abort)?;
            let loss = g.softmax_cross_entropy(trace.logits, &labels).map_err(abort)?;
            loss_sum += g.value(loss).data()[0] * chunk.len() as f64;
            let grads = g.backward(loss)?;
            sgd_step(model.params_mut(), &grads, &mut velocities, lr, optim)?;
            steps += 1;
        }
        let train_loss = loss_sum / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::TrainingAborted {
                epoch: t + 1,
                batch: 0,
                reason: "non-finite epoch loss".into(),
            });
        }
        let val = if data.val.is_empty() {
            None
        } else {
            let e = evaluate(&model, &data.val).map_err(|e| Error::TrainingAborted {
                epoch: t + 1,
                batch: 0,
                reason: format!("validation: {e}"),
            })?;
            Some((e.metrics, e.auc()))
        };
        history.push(EpochRecord {
            epoch: t + 1,
            lr,
            train_loss,
            val,
        });
        if let Some((m, _)) = val {
            if best.as_ref().is_none_or(|(acc, _)| m.accuracy > *acc) {
                let ck = Checkpoint {
                    model: model.clone(),
                    velocities: velocities.clone(),
                    epoch: epoch_offset + t + 1,
                    history: history.clone(),
                };
                best = Some((m.accuracy, ck));
            }
        }
    }
    let last = Checkpoint {
        model,
        velocities,
        epoch: epoch_offset + optim.epochs,
        history: history.clone(),
    };
    let best = best.map_or_else(|| last.clone(), |(_, ck)| ck);
    Ok(TrainOutcome {
        last,
        best,
        history,
        steps,
    })
}

/// One row of the placement/attention sweep.
pub struct AblationRow {
    pub config: crate::model::AblationConfig,
    /// Final-epoch validation metrics and AUC, or the failure message.
    pub result: std::result::Result<Option<(Metrics, f64)>, String>,
}

/// Trains every ablation configuration from the same seed and data. A
/// failing row is recorded and the sweep continues.
pub fn ablate(backbone: &BackboneConfig, data: &DatasetSplit, optim: &OptimConfig) -> Vec<AblationRow> {
    ablation_matrix()
        .into_iter()
        .map(|config| {
            let result = build_model(backbone, &config, derive_seed(optim.seed, "init"))
                .and_then(|m| train(&m, data, optim))
                .map(|o| o.history.last().and_then(|r| r.val))
                .map_err(|e| e.to_string());
            AblationRow { config, result }
        })
        .collect()
}

/// Table layout: one column per candidate stage and the attention flag,
/// then the metrics.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("row,stage4,stage5,stage6,cid,accuracy,precision,recall,f1,auc,status\n");
    for (i, r) in rows.iter().enumerate() {
        let mark = |s: usize| if r.config.dspp_stages.contains(&s) { "x" } else { "" };
        let _ = write!(
            out,
            "{},{},{},{},{}",
            i + 1,
            mark(4),
            mark(5),
            mark(6),
            if r.config.use_cid { "with" } else { "without" }
        );
        match &r.result {
            Ok(Some((m, auc))) => {
                let _ = writeln!(out, ",{},{},{},{},{},ok", m.accuracy, m.precision, m.recall, m.f1, auc);
            }
            Ok(None) => out.push_str(",,,,,,no-validation\n"),
            Err(e) => {
                let _ = writeln!(out, ",,,,,,error: {}", e.replace([',', '\n'], ";"));
            }
        }
    }
    out
}
