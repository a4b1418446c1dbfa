//! Linear classifier on frozen features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::adam::DownstreamAdamW;
use super::split::stratified_split;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::{self, stream};

/// How the reported epoch is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochSelection {
    /// Highest test accuracy over all epochs.
    BestTest,
    /// Test accuracy at the epoch with the highest accuracy on a held-out
    /// slice of the training data (latest epoch on ties).
    Validation,
    /// Test accuracy after the last epoch.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub selection: EpochSelection,
    /// Fraction of training rows held out in [`EpochSelection::Validation`] mode.
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            selection: EpochSelection::BestTest,
            val_fraction: 0.2,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "probe: epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "probe: lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(
                "probe: val_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// 1-based epoch the accuracy was taken from.
    pub epoch: usize,
    /// Full training-set cross-entropy after each epoch.
    pub train_loss: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// Empty unless validation selection is active.
    pub val_accuracy: Vec<f64>,
}

/// A linear softmax classifier `x W + b`.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub(crate) params: BTreeMap<String, Tensor>,
    n_features: usize,
    n_classes: usize,
}

impl LinearClassifier {
    /// Weights drawn from `N(0, 0.01²)`, zero bias.
    pub fn init(n_features: usize, n_classes: usize, seed: u64) -> Self {
        let mut r = stream(seed, "probe:init", 0);
        let w = Tensor::from_fn([n_features, n_classes], |_| {
            (0.01 * rng::normal(&mut r)) as f32
        });
        let b = Tensor::zeros([n_classes]);
        let params = BTreeMap::from([
            ("probe.weight".to_string(), w),
            ("probe.bias".to_string(), b),
        ]);
        Self {
            params,
            n_features,
            n_classes,
        }
    }

    fn logits_row(&self, x: &[f32]) -> Vec<f64> {
        let w = self.params["probe.weight"].data();
        let b = self.params["probe.bias"].data();
        let mut out: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
        for (f, &xf) in x.iter().enumerate() {
            let xf = f64::from(xf);
            for (o, &wv) in out
                .iter_mut()
                .zip(&w[f * self.n_classes..(f + 1) * self.n_classes])
            {
                *o += xf * f64::from(wv);
            }
        }
        out
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits_row(x))
    }

    /// Mean cross-entropy over `rows` and its gradient.
    fn loss_and_grad(
        &self,
        x: &Tensor,
        y: &[usize],
        rows: &[usize],
    ) -> (f64, BTreeMap<String, Tensor>) {
        let (f, k) = (self.n_features, self.n_classes);
        let mut gw = vec![0.0f64; f * k];
        let mut gb = vec![0.0f64; k];
        let mut loss = 0.0;
        let n = rows.len() as f64;
        for &r in rows {
            let xr = x.row(r);
            let p = softmax(&self.logits_row(xr));
            loss -= p[y[r]].max(f64::MIN_POSITIVE).ln();
            for c in 0..k {
                let d = (p[c] - f64::from(u8::from(c == y[r]))) / n;
                gb[c] += d;
                for (fi, &xf) in xr.iter().enumerate() {
                    gw[fi * k + c] += d * f64::from(xf);
                }
            }
        }
        let to_t = |shape: Vec<usize>, v: Vec<f64>| {
            Tensor::new(shape, v.into_iter().map(|a| a as f32).collect()).expect("sized above")
        };
        let grads = BTreeMap::from([
            ("probe.weight".to_string(), to_t(vec![f, k], gw)),
            ("probe.bias".to_string(), to_t(vec![k], gb)),
        ]);
        (loss / n, grads)
    }

    fn loss(&self, x: &Tensor, y: &[usize], rows: &[usize]) -> f64 {
        rows.iter()
            .map(|&r| {
                -softmax(&self.logits_row(x.row(r)))[y[r]]
                    .max(f64::MIN_POSITIVE)
                    .ln()
            })
            .sum::<f64>()
            / rows.len() as f64
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64
}

pub(crate) fn check_labels(train_y: &[usize], n_classes: usize) -> Result<()> {
    if let Some(&bad) = train_y.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Input(format!(
            "label {bad} outside {n_classes} classes"
        )));
    }
    let first = train_y.first().copied();
    if train_y.iter().all(|&y| Some(y) == first) {
        return Err(Error::Protocol(
            "training split must contain at least two classes".into(),
        ));
    }
    Ok(())
}

/// Picks the reported epoch according to `selection`.
pub(crate) fn select_epoch(selection: EpochSelection, test: &[f64], val: &[f64]) -> usize {
    let first_best = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    let last_best = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] >= v[b] { i } else { b });
    match selection {
        EpochSelection::BestTest => first_best(test),
        EpochSelection::Validation => last_best(val),
        EpochSelection::Last => test.len() - 1,
    }
}

/// Trains a linear classifier on `train_x[N, F]` and scores `test_x`.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    cfg.validate()?;
    if train_x.rank() != 2 || test_x.rank() != 2 || train_x.shape()[1] != test_x.shape()[1] {
        return Err(Error::Shape(format!(
            "probe: features {:?} and {:?}",
            train_x.shape(),
            test_x.shape()
        )));
    }
    if train_x.shape()[0] != train_y.len() || test_x.shape()[0] != test_y.len() || test_y.is_empty()
    {
        return Err(Error::Input(
            "probe: feature rows and labels disagree or test split is empty".into(),
        ));
    }
    check_labels(train_y, n_classes)?;
    check_labels(test_y, n_classes).or_else(|e| {
        if matches!(e, Error::Protocol(_)) {
            Ok(())
        } else {
            Err(e)
        }
    })?;

    let (fit_rows, val_rows) = if cfg.selection == EpochSelection::Validation {
        stratified_split(
            train_y,
            cfg.val_fraction,
            &mut stream(seed, "probe:split", 0),
        )
    } else {
        ((0..train_y.len()).collect(), Vec::new())
    };

    let mut clf = LinearClassifier::init(train_x.shape()[1], n_classes, seed);
    let mut opt = DownstreamAdamW::new(cfg.weight_decay);
    let test_rows: Vec<usize> = (0..test_y.len()).collect();
    let mut result = ProbeResult {
        accuracy: 0.0,
        epoch: 0,
        train_loss: vec![],
        test_accuracy: vec![],
        val_accuracy: vec![],
    };
    let predict = |clf: &LinearClassifier, x: &Tensor, rows: &[usize]| {
        rows.iter()
            .map(|&r| clf.predict(x.row(r)))
            .collect::<Vec<_>>()
    };

    for epoch in 0..cfg.epochs {
        let mut order = fit_rows.clone();
        rng::shuffle(&mut stream(seed, "probe:epoch", epoch as u64), &mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grads) = clf.loss_and_grad(train_x, train_y, batch);
            opt.step(clf.params.iter_mut(), &grads, cfg.lr);
        }
        result
            .train_loss
            .push(clf.loss(train_x, train_y, &fit_rows));
        result
            .test_accuracy
            .push(accuracy(&predict(&clf, test_x, &test_rows), test_y));
        if !val_rows.is_empty() {
            let truth: Vec<usize> = val_rows.iter().map(|&r| train_y[r]).collect();
            result
                .val_accuracy
                .push(accuracy(&predict(&clf, train_x, &val_rows), &truth));
        }
    }
    let e = select_epoch(cfg.selection, &result.test_accuracy, &result.val_accuracy);
    result.accuracy = result.test_accuracy[e];
    result.epoch = e + 1;
    Ok(result)
}
