use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::Serialize;
use tsdistill::evaluate::{self, EvalRow, FeatureTable, LabeledDataset};
use tsdistill::synth::{generate_corpus, Corpus};
use tsdistill::trainer::{self, Checkpoint};

use crate::config::RunConfig;

/// Downstream series and generated corpora must split into whole patches.
const LENGTH_MULTIPLE: usize = 32;

pub struct Context {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Context {
    fn seeds(&self, requested: &[u64]) -> Vec<u64> {
        if requested.is_empty() {
            vec![self.cfg.train.seed]
        } else {
            requested.to_vec()
        }
    }
}

pub struct ResultSpec {
    pub out: PathBuf,
    pub dataset: Option<String>,
    pub method: String,
    pub seeds: Vec<u64>,
}

pub enum ProbeInput {
    Model {
        checkpoint: PathBuf,
        train: PathBuf,
        test: PathBuf,
    },
    Features {
        train: PathBuf,
        test: PathBuf,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn generate(ctx: &Context, out: &Path, samples: usize, length: usize) -> Result<()> {
    if samples == 0 {
        bail!("--samples must be positive");
    }
    if length == 0 || length % LENGTH_MULTIPLE != 0 {
        bail!("--length must be a positive multiple of {LENGTH_MULTIPLE}, got {length}");
    }
    let corpus = generate_corpus(ctx.cfg.train.seed, samples, length, &ctx.cfg.synth)?;
    corpus
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let n = corpus.data().len() as f64;
    let mean = corpus.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = corpus
        .data()
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    eprintln!(
        "n={} T={} mean={mean:.6} std={:.6}",
        corpus.n_samples(),
        corpus.length(),
        var.sqrt()
    );
    Ok(())
}

pub fn pretrain(ctx: &Context, corpus: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(corpus)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("run_config.json"), &ctx.cfg)?;
    std::fs::write(out.join("run_config_hash.txt"), format!("{}\n", ctx.hash))?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let outcome = trainer::pretrain(ctx.cfg.train.clone(), &corpus, Some(out), resume)?;
    if outcome.skipped_steps > 0 {
        log::warn!(
            "{} steps skipped for non-finite values",
            outcome.skipped_steps
        );
    }
    log::info!("finished at step {}", outcome.checkpoint.meta.step);
    Ok(())
}

fn load_pair(train: &Path, test: &Path) -> Result<LabeledDataset> {
    let train = evaluate::parse_ts_file(train)?;
    let test = evaluate::parse_ts_file(test)?;
    if train.n_channels != test.n_channels {
        bail!(
            "train has {} channels but test has {}",
            train.n_channels,
            test.n_channels
        );
    }
    Ok(LabeledDataset {
        name: train.problem_name.clone(),
        train,
        test,
    })
}

fn labels(split: &evaluate::TsSplit) -> Vec<String> {
    split.samples.iter().map(|s| s.label.clone()).collect()
}

pub fn embed(checkpoint: &Path, train: &Path, test: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = load_pair(train, test)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (split, tag) in [(&data.train, "TRAIN"), (&data.test, "TEST")] {
        let feats = evaluate::embed(&ck.teacher, &ck.meta.model, split)?;
        FeatureTable::new(labels(split), feats)?
            .write_csv(&out.join(format!("{}_{tag}.csv", data.name)))?;
    }
    Ok(())
}

fn write_rows(spec: &ResultSpec, rows: &[EvalRow]) -> Result<()> {
    evaluate::write_results_csv(&spec.out, rows)
        .with_context(|| format!("writing {}", spec.out.display()))
}

pub fn probe(ctx: &Context, input: ProbeInput, spec: &ResultSpec) -> Result<()> {
    let (name, train, test) = match input {
        ProbeInput::Features { train, test } => {
            let stem = train
                .file_stem()
                .map(|s| s.to_string_lossy().trim_end_matches("_TRAIN").to_string())
                .unwrap_or_default();
            (
                stem,
                FeatureTable::read_csv(&train)?,
                FeatureTable::read_csv(&test)?,
            )
        }
        ProbeInput::Model {
            checkpoint,
            train,
            test,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_pair(&train, &test)?;
            let tr = FeatureTable::new(
                labels(&data.train),
                evaluate::embed(&ck.teacher, &ck.meta.model, &data.train)?,
            )?;
            let te = FeatureTable::new(
                labels(&data.test),
                evaluate::embed(&ck.teacher, &ck.meta.model, &data.test)?,
            )?;
            (data.name, tr, te)
        }
    };
    let dataset = spec.dataset.clone().unwrap_or(name);
    let mut rows = Vec::new();
    for seed in ctx.seeds(&spec.seeds) {
        let r = evaluate::probe_tables(&train, &test, &ctx.cfg.probe, seed)?;
        log::info!(
            "{dataset} seed {seed}: probe accuracy {:.4} (epoch {})",
            r.accuracy,
            r.epoch
        );
        rows.push(EvalRow {
            dataset: dataset.clone(),
            seed,
            method: spec.method.clone(),
            regime: "probe".into(),
            accuracy: r.accuracy,
        });
    }
    write_rows(spec, &rows)
}

pub fn finetune(
    ctx: &Context,
    checkpoint: &Path,
    train: &Path,
    test: &Path,
    spec: &ResultSpec,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = load_pair(train, test)?;
    let dataset = spec.dataset.clone().unwrap_or_else(|| data.name.clone());
    let mut rows = Vec::new();
    for seed in ctx.seeds(&spec.seeds) {
        let r = evaluate::finetune(&ck.teacher, &ck.meta.model, &data, &ctx.cfg.finetune, seed)?;
        log::info!(
            "{dataset} seed {seed}: finetune accuracy {:.4} at lr {}",
            r.accuracy,
            r.selected_lr
        );
        rows.push(EvalRow {
            dataset: dataset.clone(),
            seed,
            method: spec.method.clone(),
            regime: "finetune".into(),
            accuracy: r.accuracy,
        });
    }
    write_rows(spec, &rows)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    report: &'a evaluate::EvalReport,
}

pub fn report(ctx: &Context, inputs: &[PathBuf], out: &Path, plot: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(
            evaluate::read_results_csv(p).with_context(|| format!("reading {}", p.display()))?,
        );
    }
    let report = evaluate::aggregate(&rows)?;
    write_json(
        out,
        &ReportFile {
            config_hash: &ctx.hash,
            report: &report,
        },
    )?;
    if let Some(p) = plot {
        write_json(p, &report.plot_data())?;
    }
    Ok(())
}
