//! Frozen CLS features for downstream series.

use rayon::prelude::*;

use super::ts::TsSplit;
use crate::error::{Error, Result};
use crate::model::{encode, tokenize, Binder, EncodeOptions, ModelConfig, ModelParams};
use crate::numeric::{resize_series, Tape, Tensor};

/// Every downstream series is resampled to this length before encoding.
pub const EMBED_LENGTH: usize = 512;

const CHUNK: usize = 64;

/// Resamples every channel of every sample to [`EMBED_LENGTH`].
/// Returns `[N * C, EMBED_LENGTH]` rows in sample-major, channel-minor order.
pub fn resampled_rows(split: &TsSplit) -> Result<Vec<Vec<f32>>> {
    let mut rows = Vec::with_capacity(split.len() * split.n_channels);
    for (i, s) in split.samples.iter().enumerate() {
        if s.channels.len() != split.n_channels {
            return Err(Error::Input(format!(
                "sample {i} has {} channels, split declares {}",
                s.channels.len(),
                split.n_channels
            )));
        }
        for ch in &s.channels {
            if ch.len() < 2 {
                return Err(Error::Input(format!(
                    "sample {i} has a series of length {}",
                    ch.len()
                )));
            }
            rows.push(resize_series(ch, EMBED_LENGTH));
        }
    }
    Ok(rows)
}

/// CLS vectors for univariate rows of equal length, `[rows, d_model]`.
pub fn encode_rows(params: &ModelParams, cfg: &ModelConfig, rows: &[Vec<f32>]) -> Result<Tensor> {
    let d = cfg.d_model;
    let chunks: Vec<Result<Vec<f32>>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let len = chunk[0].len();
            let data: Vec<f32> = chunk.iter().flatten().copied().collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(params, false);
            let x = tape.constant(Tensor::new([chunk.len(), len], data)?);
            let tokens = tokenize(&mut tape, &mut binder, cfg, x)?;
            let out = encode(
                &mut tape,
                &mut binder,
                cfg,
                tokens,
                EncodeOptions::default(),
            )?;
            Ok(tape.value(out.cls).data().to_vec())
        })
        .collect();
    let mut data = Vec::with_capacity(rows.len() * d);
    for c in chunks {
        data.extend(c?);
    }
    Tensor::new([rows.len(), d], data)
}

/// `[N, d_model * C]` features: each channel is encoded on its own and the
/// per-channel CLS vectors are concatenated in channel order.
pub fn embed(params: &ModelParams, cfg: &ModelConfig, split: &TsSplit) -> Result<Tensor> {
    if split.is_empty() {
        return Err(Error::Input("cannot embed an empty dataset".into()));
    }
    let rows = resampled_rows(split)?;
    let cls = encode_rows(params, cfg, &rows)?;
    cls.reshaped(vec![split.len(), split.n_channels * cfg.d_model])
}
