//! Student-teacher pretraining: schedules, optimizer, EMA and checkpoints.

mod checkpoint;
mod optim;
mod schedule;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, MAGIC, VERSION};
pub(crate) use optim::no_decay;
pub use optim::{
    build_param_groups, ema_update, global_norm, AdamW, OptimConfig, ParamGroup, StepRates,
    StepStats,
};
pub use schedule::{ScheduleConfig, Schedules};

use crate::augment::{make_views, AugmentConfig};
use crate::config::content_hash;
use crate::error::{config_err, Error, Result};
use crate::losses::{total_loss, LossConfig, LossReport};
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::Tensor;
use crate::rng;
use crate::synth::Corpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    /// Consecutive non-finite steps tolerated before aborting.
    pub max_nonfinite_steps: usize,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 256,
            total_steps: 5000,
            checkpoint_every: 500,
            max_nonfinite_steps: 10,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(config_err!("batch_size and total_steps must be positive"));
        }
        self.model.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        if self.augment.global_len % self.model.patch_width != 0
            || self.augment.local_len % self.model.patch_width != 0
        {
            return Err(config_err!(
                "view lengths must be multiples of the patch width {}",
                self.model.patch_width
            ));
        }
        if self.augment.global_len / self.model.patch_width != self.augment.mask_patches {
            return Err(config_err!(
                "augment.mask_patches ({}) must equal the patch count of a global view ({})",
                self.augment.mask_patches,
                self.augment.global_len / self.model.patch_width
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        content_hash(self)
    }
}

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "lr",
    "wd",
    "ema_m",
    "tau_t",
    "dino",
    "ibot",
    "koleo",
    "total",
    "target_entropy",
];

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
    pub tau_t: f64,
    pub dino: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub total: f64,
    pub target_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub row: MetricsRow,
    pub report: Option<LossReport>,
    pub applied: bool,
    pub grad_norm: f64,
}

/// Rows of the corpus used at `step`: an epoch-wise permutation, wrapping
/// around when the last batch of an epoch runs short.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let spe = Schedules::steps_per_epoch(n, batch);
    let mut perm: Vec<usize> = (0..n).collect();
    rng::shuffle(
        &mut rng::stream(seed, "epoch", (step / spe) as u64),
        &mut perm,
    );
    let offset = (step % spe) * batch;
    (0..batch).map(|j| perm[(offset + j) % n]).collect()
}

pub struct Trainer<'c> {
    cfg: TrainConfig,
    corpus: &'c Corpus,
    schedules: Schedules,
    student: ModelParams,
    teacher: ModelParams,
    opt: AdamW,
    step: usize,
    consecutive_nonfinite: usize,
    hash: String,
}

impl<'c> Trainer<'c> {
    /// Fresh run: the teacher starts as a copy of the student.
    pub fn new(cfg: TrainConfig, corpus: &'c Corpus) -> Result<Self> {
        cfg.validate()?;
        if corpus.n_samples() == 0 {
            return Err(Error::Input("empty corpus".into()));
        }
        let student = ModelParams::init(&cfg.model, cfg.seed)?;
        let teacher = student.clone();
        let opt = AdamW::new(cfg.optim.clone(), &student, cfg.model.n_layers)?;
        let schedules = Schedules::new(
            cfg.schedule.clone(),
            Schedules::steps_per_epoch(corpus.n_samples(), cfg.batch_size),
            cfg.total_steps,
        )?;
        let hash = cfg.hash()?;
        Ok(Self {
            cfg,
            corpus,
            schedules,
            student,
            teacher,
            opt,
            step: 0,
            consecutive_nonfinite: 0,
            hash,
        })
    }

    /// Continues a run from `ck`, which must come from the same configuration.
    pub fn resume(cfg: TrainConfig, corpus: &'c Corpus, ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, corpus)?;
        if ck.meta.config_hash != t.hash {
            return Err(config_err!(
                "checkpoint config hash {} does not match the current config {}",
                ck.meta.config_hash,
                t.hash
            ));
        }
        if !ck.student.same_layout(&t.student) {
            return Err(config_err!(
                "checkpoint parameters do not match the model config"
            ));
        }
        t.student = ck.student;
        t.teacher = ck.teacher;
        t.opt.m = ck.adam_m;
        t.opt.v = ck.adam_v;
        t.opt.t = ck.meta.optimizer_updates;
        t.step = ck.meta.step;
        t.consecutive_nonfinite = ck.meta.consecutive_nonfinite;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn schedules(&self) -> &Schedules {
        &self.schedules
    }

    pub fn student(&self) -> &ModelParams {
        &self.student
    }

    pub fn teacher(&self) -> &ModelParams {
        &self.teacher
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Completed steps.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    fn batch(&self, step: usize) -> Result<Tensor> {
        let idx = batch_indices(
            self.cfg.seed,
            step,
            self.corpus.n_samples(),
            self.cfg.batch_size,
        );
        let t = self.corpus.length();
        let mut data = Vec::with_capacity(idx.len() * t);
        for i in idx {
            data.extend_from_slice(self.corpus.series(i));
        }
        Tensor::new(vec![self.cfg.batch_size, t], data)
    }

    /// Runs one step: views, loss, student update, teacher EMA.
    pub fn step(&mut self) -> Result<StepRecord> {
        let s = self.step;
        let sch = &self.schedules;
        let (lr, wd, ema, tau) = (
            sch.lr(s),
            sch.weight_decay(s),
            sch.ema_momentum(s),
            sch.teacher_temp(s),
        );
        let rates = StepRates {
            lr,
            prototype_lr: sch.prototype_lr(s),
            weight_decay: wd,
        };
        let x = self.batch(s)?;
        let views = make_views(&x, &self.cfg.augment, self.cfg.seed, s as u64)?;
        let mut drop_rng = rng::stream(self.cfg.seed, "dropout", s as u64);
        let mut row = MetricsRow {
            step: s,
            lr,
            wd,
            ema_m: ema,
            tau_t: tau,
            dino: f64::NAN,
            ibot: f64::NAN,
            koleo: f64::NAN,
            total: f64::NAN,
            target_entropy: f64::NAN,
        };
        let outcome = total_loss(
            &self.cfg.model,
            &self.cfg.loss,
            &self.student,
            &self.teacher,
            &views,
            tau as f32,
            Some(&mut drop_rng),
        );
        let (report, stats) = match outcome {
            Ok((report, grads)) => {
                row.dino = report.dino_total;
                row.ibot = report.ibot;
                row.koleo = report.koleo;
                row.total = report.total;
                row.target_entropy = report.target_entropy;
                let stats = self.opt.step(&mut self.student, &grads, rates)?;
                (Some(report), stats)
            }
            Err(Error::Diverged(msg)) => {
                warn!("step {s}: {msg}");
                (
                    None,
                    StepStats {
                        grad_norm: f64::NAN,
                        clip_scale: 0.0,
                        applied: false,
                    },
                )
            }
            Err(e) => return Err(e),
        };
        if stats.applied {
            ema_update(&mut self.teacher, &self.student, ema)?;
            self.consecutive_nonfinite = 0;
        } else {
            warn!(
                "step {s}: skipped (loss {}, grad norm {})",
                row.total, stats.grad_norm
            );
            self.consecutive_nonfinite += 1;
        }
        self.step += 1;
        let record = StepRecord {
            row,
            report,
            applied: stats.applied,
            grad_norm: stats.grad_norm,
        };
        if self.consecutive_nonfinite >= self.cfg.max_nonfinite_steps {
            return Err(Error::Diverged(format!(
                "{} consecutive non-finite steps ending at step {s}; last row {:?}",
                self.consecutive_nonfinite, record.row
            )));
        }
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let last = self.step.saturating_sub(1);
        let sch = &self.schedules;
        Checkpoint {
            meta: CheckpointMeta {
                step: self.step,
                config_hash: self.hash.clone(),
                model: self.cfg.model.clone(),
                optimizer_updates: self.opt.t,
                consecutive_nonfinite: self.consecutive_nonfinite,
                lr: sch.lr(last),
                weight_decay: sch.weight_decay(last),
                ema_momentum: sch.ema_momentum(last),
                teacher_temp: sch.teacher_temp(last),
                rng: RngState {
                    algorithm: "chacha8-stream".into(),
                    seed: self.cfg.seed,
                    next_step: self.step,
                },
            },
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub skipped_steps: usize,
}

fn write_metrics(path: &Path, rows: &[MetricsRow], append: bool) -> Result<()> {
    let file = if append {
        OpenOptions::new().append(true).create(true).open(path)?
    } else {
        File::create(path)?
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if !append {
        w.write_record(METRICS_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint-{step:07}.utck"))
}

/// Trains until `total_steps`, optionally from a checkpoint. With an output
/// directory it writes `metrics.csv`, periodic checkpoints and `final.utck`.
pub fn pretrain(
    cfg: TrainConfig,
    corpus: &Corpus,
    out: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<PretrainOutcome> {
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(cfg, corpus, ck)?,
        None => Trainer::new(cfg, corpus)?,
    };
    let resumed = trainer.step_count() > 0;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_metrics(&dir.join("metrics.csv"), &[], resumed)?;
    }
    let (mut metrics, mut skipped) = (Vec::new(), 0);
    let every = trainer.config().checkpoint_every;
    while !trainer.finished() {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e @ Error::Diverged(_)) => {
                if let Some(dir) = out {
                    let dump = serde_json::json!({ "error": e.to_string(), "recent": metrics.iter().rev().take(20).collect::<Vec<_>>() });
                    std::fs::write(
                        dir.join("divergence.json"),
                        serde_json::to_vec_pretty(&dump)?,
                    )?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        skipped += usize::from(!rec.applied);
        if rec.row.step % 50 == 0 {
            info!(
                "step {} total {:.4} entropy {:.3}",
                rec.row.step, rec.row.total, rec.row.target_entropy
            );
        }
        if let Some(dir) = out {
            write_metrics(
                &dir.join("metrics.csv"),
                std::slice::from_ref(&rec.row),
                true,
            )?;
            if every > 0 && trainer.step_count() % every == 0 {
                trainer
                    .checkpoint()
                    .save(&checkpoint_path(dir, trainer.step_count()))?;
            }
        }
        metrics.push(rec.row);
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out {
        checkpoint.save(&dir.join("final.utck"))?;
        let mut f = File::create(dir.join("config_hash.txt"))?;
        writeln!(f, "{}", checkpoint.meta.config_hash)?;
    }
    Ok(PretrainOutcome {
        checkpoint,
        metrics,
        skipped_steps: skipped,
    })
}
