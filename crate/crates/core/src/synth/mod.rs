//! Synthetic pretraining corpus: Gaussian-process roots pushed through random causal DAGs.

mod dag;
mod kernel;

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dag::{Activation, DagNode, DagSpec, PropagateError, RootSpec};
pub use kernel::{cholesky, sample_gp, unit_grid, KernelRejected, KernelSpec, MeanSpec};

use crate::error::{config_err, Error, Result};
use crate::rng;

/// Generator constants. None of these are pinned by the method; they live
/// here so ablations only touch one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub max_nodes: usize,
    pub max_parents: usize,
    pub max_kernel_leaves: usize,
    pub max_poly_degree: usize,
    pub trend_probability: f64,
    /// Initial diagonal jitter, relative to the mean kernel variance.
    pub jitter: f64,
    pub max_jitter: f64,
    /// Standardized samples with a larger magnitude are rejected.
    pub max_abs_value: f64,
    /// Observed series with a smaller raw standard deviation are rejected.
    pub min_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            max_nodes: 12,
            max_parents: 3,
            max_kernel_leaves: 4,
            max_poly_degree: 2,
            trend_probability: 0.5,
            jitter: 1e-6,
            max_jitter: 1e-3,
            max_abs_value: 50.0,
            min_std: 1e-6,
        }
    }
}

/// Sample-major block of equal-length univariate series.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    n_samples: usize,
    length: usize,
    data: Vec<f32>,
}

const UTSD_MAGIC: &[u8; 4] = b"UTSD";
const UTSD_VERSION: u32 = 1;

impl Corpus {
    pub fn new(n_samples: usize, length: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_samples * length {
            return Err(Error::Input(format!(
                "corpus of {n_samples} x {length} needs {} values, got {}",
                n_samples * length,
                data.len()
            )));
        }
        Ok(Self {
            n_samples,
            length,
            data,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn series(&self, i: usize) -> &[f32] {
        &self.data[i * self.length..(i + 1) * self.length]
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(UTSD_MAGIC)?;
        w.write_all(&UTSD_VERSION.to_le_bytes())?;
        w.write_all(
            &u32::try_from(self.n_samples)
                .map_err(|_| Error::Input("too many samples".into()))?
                .to_le_bytes(),
        )?;
        w.write_all(
            &u32::try_from(self.length)
                .map_err(|_| Error::Input("series too long".into()))?
                .to_le_bytes(),
        )?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: origin.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| bad("truncated header"))?;
        if &header[0..4] != UTSD_MAGIC {
            return Err(bad("missing UTSD magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        if word(4) != UTSD_VERSION {
            return Err(bad(&format!("unsupported version {}", word(4))));
        }
        let (n, len) = (word(8) as usize, word(12) as usize);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * len * 4 {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                n * len * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n, len, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

/// Standardizes to zero mean and unit variance; `None` when the series is
/// (numerically) constant or exceeds the magnitude guard afterwards.
fn standardize(x: &[f64], cfg: &SynthConfig) -> Option<Vec<f32>> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > cfg.min_std) || !sd.is_finite() {
        return None;
    }
    let out: Vec<f32> = x.iter().map(|v| ((v - m) / sd) as f32).collect();
    out.iter()
        .all(|v| v.is_finite() && f64::from(v.abs()) <= cfg.max_abs_value)
        .then_some(out)
}

/// Everything one DAG contributes to the corpus, or `None` on numerical rejection.
fn dag_samples(
    seed: u64,
    dag_index: u64,
    length: usize,
    cfg: &SynthConfig,
) -> Option<Vec<Vec<f32>>> {
    let mut rng = rng::stream(seed, "dag", dag_index);
    let dag = DagSpec::sample(&mut rng, cfg.max_nodes, cfg);
    let mut roots = Vec::new();
    for r in dag.roots() {
        let spec = dag.nodes[r].root.as_ref().expect("roots carry a GP spec");
        roots.push(sample_gp(&mut rng, &spec.kernel, &spec.mean, length, cfg).ok()?);
    }
    let values = dag.propagate(&roots).ok()?;
    Some(
        dag.observed
            .iter()
            .filter_map(|&v| standardize(&values[v], cfg))
            .collect(),
    )
}

/// Generates `n_samples` series of length `length` (a multiple of 32).
///
/// DAG `d` draws from stream `(seed, "dag", d)`; DAGs are evaluated in
/// parallel chunks but consumed in index order, so the output does not
/// depend on the thread count.
pub fn generate_corpus(
    seed: u64,
    n_samples: usize,
    length: usize,
    cfg: &SynthConfig,
) -> Result<Corpus> {
    if n_samples == 0 {
        return Err(config_err!("corpus needs at least one sample"));
    }
    if length == 0 || length % 32 != 0 {
        return Err(config_err!(
            "series length {length} is not a positive multiple of 32"
        ));
    }
    if cfg.max_nodes < 2 {
        return Err(config_err!("max_nodes must be >= 2"));
    }
    const CHUNK: u64 = 32;
    const MAX_EMPTY_CHUNKS: usize = 64;
    let mut data = Vec::with_capacity(n_samples * length);
    let mut produced = 0;
    let mut next_dag = 0u64;
    let mut empty_chunks = 0;
    while produced < n_samples {
        let chunk: Vec<Option<Vec<Vec<f32>>>> = (next_dag..next_dag + CHUNK)
            .into_par_iter()
            .map(|d| dag_samples(seed, d, length, cfg))
            .collect();
        next_dag += CHUNK;
        let before = produced;
        for series in chunk.into_iter().flatten().flatten() {
            if produced == n_samples {
                break;
            }
            data.extend_from_slice(&series);
            produced += 1;
        }
        if produced == before {
            empty_chunks += 1;
            if empty_chunks >= MAX_EMPTY_CHUNKS {
                return Err(Error::Internal(
                    "synthetic generator keeps rejecting every DAG".into(),
                ));
            }
        }
    }
    Corpus::new(n_samples, length, data)
}
