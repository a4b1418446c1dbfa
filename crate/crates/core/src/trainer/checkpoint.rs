use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"UTCK";
pub const VERSION: u32 = 1;

/// Training runs draw all randomness from `(seed, step)` streams, so the
/// generator state is fully described by these two numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Number of completed steps; the next step to run.
    pub step: usize,
    pub config_hash: String,
    pub model: ModelConfig,
    pub optimizer_updates: u64,
    pub consecutive_nonfinite: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub teacher_temp: f64,
    pub rng: RngState,
}

/// Student, teacher and optimizer moments at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

const TREES: [&str; 4] = ["adam_m", "adam_v", "student", "teacher"];

fn u32_le(w: &mut impl Write, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Input(format!("{what} {v} does not fit the checkpoint format")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut entries: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (prefix, tree) in [
            ("student", self.student.iter().collect::<Vec<_>>()),
            ("teacher", self.teacher.iter().collect()),
        ] {
            for (n, t) in tree {
                entries.insert(format!("{prefix}.{n}"), t);
            }
        }
        for (prefix, tree) in [("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            for (n, t) in tree {
                entries.insert(format!("{prefix}.{n}"), t);
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        u32_le(w, meta.len(), "metadata length")?;
        w.write_all(&meta)?;
        u32_le(w, entries.len(), "entry count")?;
        for (name, t) in entries {
            u32_le(w, name.len(), "name length")?;
            w.write_all(name.as_bytes())?;
            u32_le(w, t.rank(), "rank")?;
            for &d in t.shape() {
                u32_le(w, d, "dimension")?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: PathBuf::from(path),
            msg,
        };
        let mut word = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<usize> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word) as usize)
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("missing UTCK magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(r)?;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta).map_err(|e| bad(format!("metadata: {e}")))?;
        let count = read_u32(r)?;
        let mut trees: BTreeMap<&str, BTreeMap<String, Tensor>> =
            TREES.iter().map(|&t| (t, BTreeMap::new())).collect();
        for _ in 0..count {
            let len = read_u32(r)?;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8".into()))?;
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let (prefix, rest) = name
                .split_once('.')
                .ok_or_else(|| bad(format!("entry {name} has no tree prefix")))?;
            let tree = trees
                .get_mut(prefix)
                .ok_or_else(|| bad(format!("unknown tree {prefix}")))?;
            tree.insert(rest.to_string(), Tensor::new(shape, data)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let mut take = |k: &str| trees.remove(k).unwrap_or_default();
        let ck = Checkpoint {
            meta,
            adam_m: take("adam_m"),
            adam_v: take("adam_v"),
            student: ModelParams::from_map(take("student")),
            teacher: ModelParams::from_map(take("teacher")),
        };
        if ck.student.is_empty() || !ck.student.same_layout(&ck.teacher) {
            return Err(bad("student and teacher trees are missing or differ".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?), path)
    }
}
