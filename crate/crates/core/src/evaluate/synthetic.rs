//! Labelled toy problems with known structure.

use serde::{Deserialize, Serialize};

use super::ts::{LabeledDataset, TsSample, TsSplit};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Two classes of noisy oscillations that differ only in dominant frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyTaskConfig {
    pub length: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Cycles per series for class `a`, drawn uniformly from this range.
    pub cycles_a: (f64, f64),
    /// Cycles per series for class `b`.
    pub cycles_b: (f64, f64),
    /// Amplitude drawn uniformly from this range.
    pub amplitude: (f64, f64),
    /// Standard deviation of additive white noise.
    pub noise: f64,
    /// Offset drawn uniformly from `±offset`.
    pub offset: f64,
}

impl Default for FrequencyTaskConfig {
    fn default() -> Self {
        Self {
            length: 512,
            n_train: 100,
            n_test: 100,
            cycles_a: (2.0, 4.0),
            cycles_b: (10.0, 14.0),
            amplitude: (0.5, 2.0),
            noise: 0.1,
            offset: 1.0,
        }
    }
}

fn make_split(cfg: &FrequencyTaskConfig, seed: u64, tag: &str, n: usize) -> TsSplit {
    let samples = (0..n)
        .map(|i| {
            let mut r = stream(seed, tag, i as u64);
            let class = i % 2;
            let (lo, hi) = if class == 0 {
                cfg.cycles_a
            } else {
                cfg.cycles_b
            };
            let cycles = rng::uniform(&mut r, lo, hi);
            let amp = rng::uniform(&mut r, cfg.amplitude.0, cfg.amplitude.1);
            let phase = rng::uniform(&mut r, 0.0, std::f64::consts::TAU);
            let offset = rng::uniform(&mut r, -cfg.offset, cfg.offset);
            let series = (0..cfg.length)
                .map(|t| {
                    let w = std::f64::consts::TAU * cycles * t as f64 / cfg.length as f64;
                    (offset + amp * (w + phase).sin() + cfg.noise * rng::normal(&mut r)) as f32
                })
                .collect();
            TsSample {
                channels: vec![series],
                label: ["a", "b"][class].to_string(),
            }
        })
        .collect();
    TsSplit {
        problem_name: "Frequency".into(),
        n_channels: 1,
        class_labels: vec!["a".into(), "b".into()],
        samples,
    }
}

/// Balanced train and test splits; labels alternate `a`, `b`.
pub fn frequency_task(cfg: &FrequencyTaskConfig, seed: u64) -> Result<LabeledDataset> {
    if cfg.length < 2 || cfg.n_train < 2 || cfg.n_test < 1 {
        return Err(Error::Config(
            "frequency task needs length >= 2, n_train >= 2, n_test >= 1".into(),
        ));
    }
    Ok(LabeledDataset {
        name: "Frequency".into(),
        train: make_split(cfg, seed, "freq:train", cfg.n_train),
        test: make_split(cfg, seed, "freq:test", cfg.n_test),
    })
}
