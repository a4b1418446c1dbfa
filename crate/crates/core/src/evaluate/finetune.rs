//! End-to-end fine-tuning of the backbone with a linear head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::adam::DownstreamAdamW;
use super::embed::{encode_rows, resampled_rows};
use super::probe::{
    accuracy, argmax, check_labels, select_epoch, EpochSelection, LinearClassifier,
};
use super::split::stratified_split;
use super::ts::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{
    encode, is_prototype_param, tokenize, Binder, EncodeOptions, ModelConfig, ModelParams,
};
use crate::numeric::{CrossEntropyTerm, Tape, Tensor};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Candidate peak learning rates; ties go to the smallest.
    pub lr_grid: Vec<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fraction of each training class held out to pick the learning rate.
    pub val_fraction: f64,
    pub selection: EpochSelection,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_grid: vec![1e-4, 2e-4, 1e-3],
            weight_decay: 0.05,
            batch_size: 32,
            val_fraction: 0.2,
            selection: EpochSelection::BestTest,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_grid.is_empty() {
            return Err(Error::Config(
                "finetune: epochs, batch_size and lr_grid must be non-empty".into(),
            ));
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0)) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "finetune: learning rates must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(
                "finetune: val_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrTrial {
    pub lr: f64,
    /// Best validation accuracy over epochs; drives the grid choice.
    pub val_accuracy: f64,
    pub val_curve: Vec<f64>,
    pub test_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub accuracy: f64,
    pub selected_lr: f64,
    /// 1-based epoch the accuracy was taken from.
    pub epoch: usize,
    pub trials: Vec<LrTrial>,
}

/// Cosine decay from `peak` to zero over `total` steps.
fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    0.5 * peak * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

struct Classifier<'a> {
    cfg: &'a ModelConfig,
    n_channels: usize,
    backbone: ModelParams,
    head: ModelParams,
}

impl Classifier<'_> {
    /// Mean cross-entropy over `rows` of `(series, labels)`; returns the loss
    /// and gradients for both parameter trees.
    fn grads(
        &self,
        x: &[Vec<f32>],
        y: &[usize],
        rows: &[usize],
        rng: &mut rng::Rng,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let (c, d) = (self.n_channels, self.cfg.d_model);
        let data: Vec<f32> = rows
            .iter()
            .flat_map(|&r| x[r * c..(r + 1) * c].iter().flatten().copied())
            .collect();
        let len = x[0].len();
        let mut tape = Tape::new();
        let mut bb = Binder::new(&self.backbone, true);
        let mut hb = Binder::new(&self.head, true);
        let input = tape.constant(Tensor::new([rows.len() * c, len], data)?);
        let tokens = tokenize(&mut tape, &mut bb, self.cfg, input)?;
        let out = encode(
            &mut tape,
            &mut bb,
            self.cfg,
            tokens,
            EncodeOptions {
                dropout: Some(rng),
                ..Default::default()
            },
        )?;
        let feats = tape.reshape(out.cls, &[rows.len(), c * d])?;
        let w = hb.get(&mut tape, "probe.weight")?;
        let b = hb.get(&mut tape, "probe.bias")?;
        let logits = tape.linear(feats, w, Some(b))?;
        let k = self.head.get("probe.bias")?.numel();
        let targets = Tensor::from_fn([rows.len(), k], |i| {
            f32::from(u8::from(y[rows[i / k]] == i % k))
        });
        let terms: Vec<CrossEntropyTerm> = (0..rows.len())
            .map(|i| CrossEntropyTerm {
                logit_row: i,
                target_row: i,
                weight: 1.0 / rows.len() as f64,
            })
            .collect();
        let loss = tape.soft_cross_entropy(logits, &targets, &terms, 1.0)?;
        let value = f64::from(tape.value(loss).item());
        tape.backward(loss)?;
        let mut grads = bb.grads(&mut tape);
        grads.extend(hb.grads(&mut tape));
        Ok((value, grads))
    }

    fn predict(&self, x: &[Vec<f32>], rows: &[usize]) -> Result<Vec<usize>> {
        let c = self.n_channels;
        let series: Vec<Vec<f32>> = rows
            .iter()
            .flat_map(|&r| x[r * c..(r + 1) * c].iter().cloned())
            .collect();
        let cls = encode_rows(&self.backbone, self.cfg, &series)?;
        let w = self.head.get("probe.weight")?;
        let b = self.head.get("probe.bias")?;
        let k = b.numel();
        let f = c * self.cfg.d_model;
        Ok((0..rows.len())
            .map(|i| {
                let feats = &cls.data()[i * f..(i + 1) * f];
                let logits: Vec<f64> = (0..k)
                    .map(|j| {
                        f64::from(b.data()[j])
                            + feats
                                .iter()
                                .enumerate()
                                .map(|(fi, &v)| f64::from(v) * f64::from(w.data()[fi * k + j]))
                                .sum::<f64>()
                    })
                    .collect();
                argmax(&logits)
            })
            .collect())
    }
}

/// Trains one copy of `backbone` per grid learning rate on the training
/// portion, picks the rate with the best validation accuracy, and reports its
/// test accuracy. No retraining on the full training split.
pub fn finetune(
    backbone: &ModelParams,
    cfg: &ModelConfig,
    data: &LabeledDataset,
    ft: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneResult> {
    ft.validate()?;
    let n_classes = data.train.class_labels.len();
    if data.train.class_labels != data.test.class_labels {
        return Err(Error::Input(
            "train and test splits declare different labels".into(),
        ));
    }
    let train_y = data.train.label_indices();
    let test_y = data.test.label_indices();
    check_labels(&train_y, n_classes)?;
    if train_y.len() < 2 || test_y.is_empty() {
        return Err(Error::Input(
            "finetune needs at least two training and one test sample".into(),
        ));
    }
    let train_x = resampled_rows(&data.train)?;
    let test_x = resampled_rows(&data.test)?;
    let (fit, val) = stratified_split(
        &train_y,
        ft.val_fraction,
        &mut stream(seed, "finetune:split", 0),
    );
    check_labels(
        &fit.iter().map(|&i| train_y[i]).collect::<Vec<_>>(),
        n_classes,
    )?;
    let val_truth: Vec<usize> = val.iter().map(|&i| train_y[i]).collect();
    let test_rows: Vec<usize> = (0..test_y.len()).collect();

    // Prototype layers play no part downstream.
    let trunk = ModelParams::from_map(
        backbone
            .iter()
            .filter(|(n, _)| !n.contains("_head.") && !is_prototype_param(n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect(),
    );
    let steps_per_epoch = fit.len().div_ceil(ft.batch_size);
    let total = steps_per_epoch * ft.epochs;

    let mut trials = Vec::with_capacity(ft.lr_grid.len());
    for &lr in &ft.lr_grid {
        let head = LinearClassifier::init(data.train.n_channels * cfg.d_model, n_classes, seed);
        let mut model = Classifier {
            cfg,
            n_channels: data.train.n_channels,
            backbone: trunk.clone(),
            head: ModelParams::from_map(head.params),
        };
        let mut opt = DownstreamAdamW::new(ft.weight_decay);
        let (mut val_curve, mut test_curve) = (Vec::new(), Vec::new());
        let mut step = 0;
        for epoch in 0..ft.epochs {
            let mut order = fit.clone();
            rng::shuffle(
                &mut stream(seed, "finetune:epoch", epoch as u64),
                &mut order,
            );
            let mut drop_rng = stream(seed, "finetune:dropout", epoch as u64);
            for batch in order.chunks(ft.batch_size) {
                let (loss, grads) = model.grads(&train_x, &train_y, batch, &mut drop_rng)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "fine-tuning loss {loss} at lr {lr}"
                    )));
                }
                let rate = cosine_lr(lr, step, total);
                opt.step(
                    model.backbone.iter_mut().chain(model.head.iter_mut()),
                    &grads,
                    rate,
                );
                step += 1;
            }
            val_curve.push(accuracy(&model.predict(&train_x, &val)?, &val_truth));
            test_curve.push(accuracy(&model.predict(&test_x, &test_rows)?, &test_y));
            log::debug!(
                "finetune lr {lr} epoch {}: val {:.4} test {:.4}",
                epoch + 1,
                val_curve[epoch],
                test_curve[epoch]
            );
        }
        let val_accuracy = val_curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        trials.push(LrTrial {
            lr,
            val_accuracy,
            val_curve,
            test_curve,
        });
    }
    let chosen = select_lr(&trials);
    let t = &trials[chosen];
    let e = select_epoch(ft.selection, &t.test_curve, &t.val_curve);
    Ok(FinetuneResult {
        accuracy: t.test_curve[e],
        selected_lr: t.lr,
        epoch: e + 1,
        trials,
    })
}

/// Index of the trial with the highest validation accuracy; ties go to the smallest learning rate.
pub fn select_lr(trials: &[LrTrial]) -> usize {
    let mut best = 0;
    for (i, t) in trials.iter().enumerate().skip(1) {
        let b = &trials[best];
        if t.val_accuracy > b.val_accuracy || (t.val_accuracy == b.val_accuracy && t.lr < b.lr) {
            best = i;
        }
    }
    best
}
