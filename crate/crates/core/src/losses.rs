//! Distillation objectives and balanced teacher targets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::ViewSet;
use crate::error::{config_err, Error, Result};
use crate::model::{
    encode, project, tokenize, Binder, EncodeOptions, HeadKind, ModelConfig, ModelParams,
};
use crate::numeric::{CrossEntropyTerm, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_dino: f64,
    pub lambda_ibot: f64,
    pub lambda_koleo: f64,
    pub student_temp: f32,
    pub sinkhorn_iters: usize,
    pub koleo_eps: f32,
    /// Flips the sign of the masked-token term; only for auditing.
    pub ibot_negated: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dino: 1.0,
            lambda_ibot: 1.0,
            lambda_koleo: 0.1,
            student_temp: 0.1,
            sinkhorn_iters: 3,
            koleo_eps: 1e-8,
            ibot_negated: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_dino", self.lambda_dino),
            ("lambda_ibot", self.lambda_ibot),
            ("lambda_koleo", self.lambda_koleo),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("loss.{name} must be finite and non-negative"));
            }
        }
        if !(self.student_temp > 0.0) {
            return Err(config_err!("loss.student_temp must be positive"));
        }
        Ok(())
    }
}

/// Cross-worker reduction used by the target normalization. A single
/// process reduces nothing beyond its own values.
pub trait Reducer {
    fn sum_in_place(&self, values: &mut [f64]);
    fn max_in_place(&self, values: &mut [f64]);
    fn count(&self, local: usize) -> usize;
}

pub struct LocalReducer;

impl Reducer for LocalReducer {
    fn sum_in_place(&self, _values: &mut [f64]) {}

    fn max_in_place(&self, _values: &mut [f64]) {}

    fn count(&self, local: usize) -> usize {
        local
    }
}

/// Balanced soft assignments of `logits[N, K]` to prototypes, one row per sample.
pub fn sinkhorn_knopp(logits: &Tensor, tau: f32, n_iter: usize) -> Result<Tensor> {
    sinkhorn_knopp_with(logits, tau, n_iter, &LocalReducer)
}

pub fn sinkhorn_knopp_with(
    logits: &Tensor,
    tau: f32,
    n_iter: usize,
    reducer: &dyn Reducer,
) -> Result<Tensor> {
    Ok(sinkhorn_core(logits, tau, n_iter, reducer)?.0)
}

/// Also returns the per-prototype mass just before the final rescale.
pub fn sinkhorn_knopp_traced(
    logits: &Tensor,
    tau: f32,
    n_iter: usize,
) -> Result<(Tensor, Vec<f64>)> {
    sinkhorn_core(logits, tau, n_iter, &LocalReducer)
}

/// Per-prototype log of the summed mass, reduced across workers.
fn prototype_log_mass(lq: &[f64], k: usize, reducer: &dyn Reducer) -> Vec<f64> {
    let mut top = vec![f64::NEG_INFINITY; k];
    for sample in lq.chunks(k) {
        for (m, &v) in top.iter_mut().zip(sample) {
            *m = m.max(v);
        }
    }
    reducer.max_in_place(&mut top);
    let mut sum = vec![0.0f64; k];
    for sample in lq.chunks(k) {
        for ((s, &v), &m) in sum.iter_mut().zip(sample).zip(&top) {
            *s += (v - m).exp();
        }
    }
    reducer.sum_in_place(&mut sum);
    sum.iter().zip(&top).map(|(s, m)| s.ln() + m).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

// Runs in the log domain so that sharp temperatures cannot underflow a
// prototype's whole mass to zero; the iterates equal the textbook ones.
fn sinkhorn_core(
    logits: &Tensor,
    tau: f32,
    n_iter: usize,
    reducer: &dyn Reducer,
) -> Result<(Tensor, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(config_err!(
            "sinkhorn temperature must be positive, got {tau}"
        ));
    }
    if logits.rank() != 2 || logits.shape()[0] == 0 {
        return Err(Error::Shape(format!(
            "sinkhorn expects [N >= 1, K], got {:?}",
            logits.shape()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Input("sinkhorn got non-finite logits".into()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let tau = f64::from(tau);
    // Sample-major: lq[i * k + p] is log Q[p, i].
    let mut lq: Vec<f64> = logits.data().iter().map(|&z| f64::from(z) / tau).collect();
    let mut top = [lq.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))];
    reducer.max_in_place(&mut top);
    let mut total = [lq.iter().map(|&v| (v - top[0]).exp()).sum::<f64>()];
    reducer.sum_in_place(&mut total);
    let log_total = total[0].ln() + top[0];
    lq.iter_mut().for_each(|v| *v -= log_total);
    let (log_k, log_n) = ((k as f64).ln(), (reducer.count(n) as f64).ln());

    for _ in 0..n_iter {
        let mass = prototype_log_mass(&lq, k, reducer);
        for sample in lq.chunks_mut(k) {
            for (v, &m) in sample.iter_mut().zip(&mass) {
                *v -= m + log_k;
            }
        }
        for sample in lq.chunks_mut(k) {
            let s = log_sum_exp(sample);
            sample.iter_mut().for_each(|v| *v -= s + log_n);
        }
    }
    let mass: Vec<f64> = prototype_log_mass(&lq, k, reducer)
        .into_iter()
        .map(f64::exp)
        .collect();
    let mut out = Vec::with_capacity(n * k);
    for sample in lq.chunks(k) {
        let s = log_sum_exp(sample);
        out.extend(sample.iter().map(|&v| (v - s).exp() as f32));
    }
    Ok((Tensor::new(vec![n, k], out)?, mass))
}

/// Shannon entropy (nats) averaged over the rows of a probability matrix.
pub fn mean_entropy(probs: &Tensor) -> f64 {
    let k = probs.last_dim();
    let rows = probs.numel() / k.max(1);
    if rows == 0 {
        return 0.0;
    }
    let h: f64 = probs
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -f64::from(p) * f64::from(p).ln())
        .sum();
    h / rows as f64
}

/// The two cross-view terms and their mixing weights.
pub struct DinoTerms {
    pub global: Var,
    pub local: Var,
    pub total: Var,
    pub alpha_global: f64,
    pub alpha_local: f64,
}

/// Cross-view distillation loss.
///
/// `global_logits` is `[S_g * B, K]`, `local_logits` `[S_l * B, K]` and
/// `targets` `[T_g * B, K]`, all view-major (row `v * B + i`). Student global
/// view `s` is never compared with teacher view `s`.
pub fn dino_loss(
    tape: &mut Tape,
    global_logits: Var,
    local_logits: Option<Var>,
    targets: &Tensor,
    batch: usize,
    student_temp: f32,
) -> Result<DinoTerms> {
    let rows = |tape: &Tape, v: Var| tape.shape(v).first().copied().unwrap_or(0);
    let k = targets.last_dim();
    let views_of = |r: usize, what: &str| -> Result<usize> {
        if batch == 0 || r % batch != 0 {
            return Err(config_err!(
                "{what} has {r} rows, not a multiple of batch {batch}"
            ));
        }
        Ok(r / batch)
    };
    let t_g = views_of(targets.numel() / k.max(1), "teacher targets")?;
    let s_g = views_of(rows(tape, global_logits), "student global logits")?;
    let s_l = match local_logits {
        Some(l) => views_of(rows(tape, l), "student local logits")?,
        None => 0,
    };
    for v in std::iter::once(global_logits).chain(local_logits) {
        if tape.shape(v).len() != 2 || tape.shape(v)[1] != k {
            return Err(config_err!(
                "student logits {:?} do not match targets width {k}",
                tape.shape(v)
            ));
        }
    }
    let n_g = s_g * t_g - s_g.min(t_g);
    let n_l = s_l * t_g;
    let pairs = |s_views: usize, skip_diag: bool, n_terms: usize| -> Vec<CrossEntropyTerm> {
        let w = 1.0 / (batch * n_terms.max(1)) as f64;
        let mut terms = Vec::new();
        for s in 0..s_views {
            for t in 0..t_g {
                if skip_diag && s == t {
                    continue;
                }
                for i in 0..batch {
                    terms.push(CrossEntropyTerm {
                        logit_row: s * batch + i,
                        target_row: t * batch + i,
                        weight: w,
                    });
                }
            }
        }
        terms
    };
    let global =
        tape.soft_cross_entropy(global_logits, targets, &pairs(s_g, true, n_g), student_temp)?;
    let local = match local_logits {
        Some(l) => tape.soft_cross_entropy(l, targets, &pairs(s_l, false, n_l), student_temp)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let denom = (n_g + n_l).max(1) as f64;
    let (alpha_global, alpha_local) = (n_g as f64 / denom, n_l as f64 / denom);
    let a = tape.scale(global, alpha_global as f32);
    let b = tape.scale(local, alpha_local as f32);
    let total = tape.add(a, b)?;
    Ok(DinoTerms {
        global,
        local,
        total,
        alpha_global,
        alpha_local,
    })
}

/// Masked-token loss over `logits[M, K]` against `targets[M, K]`.
///
/// `owners[m]` is the masked row (sample, view) patch `m` belongs to and
/// `counts` the number of masked patches per row; each patch is weighted by
/// the inverse count of its row and the sum is divided by `rows`.
pub fn ibot_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &Tensor,
    owners: &[usize],
    counts: &[usize],
    student_temp: f32,
) -> Result<Var> {
    let m = owners.len();
    if counts.iter().sum::<usize>() != m {
        return Err(Error::Internal(format!(
            "{m} masked patches but counts sum to {}",
            counts.iter().sum::<usize>()
        )));
    }
    let mut seen = vec![0usize; counts.len()];
    for &o in owners {
        *seen
            .get_mut(o)
            .ok_or_else(|| Error::Internal(format!("masked patch owner {o} out of range")))? += 1;
    }
    if seen != counts {
        return Err(Error::Internal(
            "masked patch owners disagree with per-row counts".into(),
        ));
    }
    if m == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let rows = counts.len() as f64;
    let terms: Vec<CrossEntropyTerm> = owners
        .iter()
        .enumerate()
        .map(|(i, &o)| CrossEntropyTerm {
            logit_row: i,
            target_row: i,
            weight: 1.0 / (counts[o].max(1) as f64 * rows),
        })
        .collect();
    tape.soft_cross_entropy(logits, targets, &terms, student_temp)
}

/// Nearest-neighbour entropy regularizer on L2-normalized rows of `x[N, d]`.
pub fn koleo_loss(tape: &mut Tape, x: Var, eps: f32) -> Result<Var> {
    let n = tape.shape(x).first().copied().unwrap_or(0);
    if n < 2 {
        return Err(config_err!("KoLeo needs at least two rows, got {n}"));
    }
    let z = tape.l2_normalize(x, 1e-12)?;
    tape.nearest_neighbor_log_distance(z, eps)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dino_global: f64,
    pub dino_local: f64,
    pub dino_total: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub total: f64,
    pub alpha_global: f64,
    pub alpha_local: f64,
    /// Mean entropy of the class-token teacher targets.
    pub target_entropy: f64,
    pub masked_patches: usize,
}

/// Stacks `[B, V, L]` into `[V * B, L]` with view-major rows.
fn view_major(x: &Tensor) -> Result<Tensor> {
    let (b, v, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(x.numel());
    for view in 0..v {
        for i in 0..b {
            out.extend_from_slice(&x.data()[(i * v + view) * l..(i * v + view + 1) * l]);
        }
    }
    Tensor::new(vec![v * b, l], out)
}

/// Masked positions in view-major global rows: flat patch indices, owning row, per-row counts.
fn masked_layout(
    views: &ViewSet,
    patches: usize,
) -> Result<(Vec<bool>, Vec<usize>, Vec<usize>, Vec<usize>)> {
    let b = views.batch();
    let ng = views.global.shape()[1];
    if views.masks.len() != b * ng * patches {
        return Err(Error::Shape(format!(
            "{} mask flags for {b} samples x {ng} views x {patches} patches",
            views.masks.len()
        )));
    }
    let mut flat = vec![false; b * ng * patches];
    let (mut index, mut owner, mut counts) = (Vec::new(), Vec::new(), vec![0usize; b * ng]);
    for g in 0..ng {
        for i in 0..b {
            let row = g * b + i;
            for j in 0..patches {
                if views.masks[(i * ng + g) * patches + j] {
                    flat[row * patches + j] = true;
                    index.push(row * patches + j);
                    owner.push(row);
                    counts[row] += 1;
                }
            }
        }
    }
    Ok((flat, index, owner, counts))
}

fn gather_patches(tape: &mut Tape, patches: Var, index: &[usize]) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    let flat = tape.reshape(patches, &[s[0] * s[1], s[2]])?;
    tape.index_select(flat, index)
}

/// Full objective for one batch of views. Returns the report and student gradients.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    model: &ModelConfig,
    cfg: &LossConfig,
    student: &ModelParams,
    teacher: &ModelParams,
    views: &ViewSet,
    teacher_temp: f32,
    dropout: Option<&mut Rng>,
) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
    cfg.validate()?;
    let b = views.batch();
    let globals = view_major(&views.global)?;
    let locals = view_major(&views.local)?;
    let patches = views.global.shape()[2] / model.patch_width;
    let (flat_mask, mask_index, owners, counts) = masked_layout(views, patches)?;
    let use_dino = cfg.lambda_dino > 0.0;
    let use_ibot = cfg.lambda_ibot > 0.0 && !mask_index.is_empty();
    let use_koleo = cfg.lambda_koleo > 0.0;

    // Teacher: constants only, so nothing it computes records a backward closure.
    let mut tt = Tape::new();
    let mut tb = Binder::new(teacher, false);
    let gx = tt.constant(globals.clone());
    let tokens = tokenize(&mut tt, &mut tb, model, gx)?;
    let out = encode(&mut tt, &mut tb, model, tokens, EncodeOptions::default())?;
    let mut report = LossReport {
        masked_patches: mask_index.len(),
        ..Default::default()
    };
    let dino_targets = if use_dino {
        let logits = project(&mut tt, &mut tb, model, HeadKind::Dino, out.cls)?.logits;
        let t = sinkhorn_knopp(tt.value(logits), teacher_temp, cfg.sinkhorn_iters)?;
        report.target_entropy = mean_entropy(&t);
        Some(t)
    } else {
        None
    };
    let ibot_targets = if use_ibot {
        let sel = gather_patches(&mut tt, out.patches, &mask_index)?;
        let logits = project(&mut tt, &mut tb, model, HeadKind::Ibot, sel)?.logits;
        Some(sinkhorn_knopp(
            tt.value(logits),
            teacher_temp,
            cfg.sinkhorn_iters,
        )?)
    } else {
        None
    };
    drop(tt);

    let mut st = Tape::new();
    let mut sb = Binder::new(student, true);
    let mut dropout = dropout;
    let gx = st.constant(globals);
    let tokens = tokenize(&mut st, &mut sb, model, gx)?;
    let g_out = encode(
        &mut st,
        &mut sb,
        model,
        tokens,
        EncodeOptions {
            mask: Some(&flat_mask),
            dropout: dropout.as_deref_mut(),
            trace: None,
        },
    )?;
    let mut parts: Vec<(Var, f64)> = Vec::new();

    if let Some(targets) = &dino_targets {
        let g_logits = project(&mut st, &mut sb, model, HeadKind::Dino, g_out.cls)?.logits;
        let l_logits = if locals.shape()[0] > 0 {
            let lx = st.constant(locals);
            let tokens = tokenize(&mut st, &mut sb, model, lx)?;
            let l_out = encode(
                &mut st,
                &mut sb,
                model,
                tokens,
                EncodeOptions {
                    dropout: dropout.as_deref_mut(),
                    ..Default::default()
                },
            )?;
            Some(project(&mut st, &mut sb, model, HeadKind::Dino, l_out.cls)?.logits)
        } else {
            None
        };
        let terms = dino_loss(&mut st, g_logits, l_logits, targets, b, cfg.student_temp)?;
        report.dino_global = f64::from(st.value(terms.global).item());
        report.dino_local = f64::from(st.value(terms.local).item());
        report.dino_total = f64::from(st.value(terms.total).item());
        report.alpha_global = terms.alpha_global;
        report.alpha_local = terms.alpha_local;
        parts.push((terms.total, cfg.lambda_dino));
    }
    if let Some(targets) = &ibot_targets {
        let sel = gather_patches(&mut st, g_out.patches, &mask_index)?;
        let logits = project(&mut st, &mut sb, model, HeadKind::Ibot, sel)?.logits;
        let mut l = ibot_loss(&mut st, logits, targets, &owners, &counts, cfg.student_temp)?;
        if cfg.ibot_negated {
            l = st.scale(l, -1.0);
        }
        report.ibot = f64::from(st.value(l).item());
        parts.push((l, cfg.lambda_ibot));
    }
    if use_koleo {
        let l = koleo_loss(&mut st, g_out.cls, cfg.koleo_eps)?;
        report.koleo = f64::from(st.value(l).item());
        parts.push((l, cfg.lambda_koleo));
    }
    if parts.is_empty() {
        return Err(config_err!("every loss term is disabled"));
    }
    let mut total: Option<Var> = None;
    for (v, w) in parts {
        let scaled = st.scale(v, w as f32);
        total = Some(match total {
            Some(t) => st.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("at least one term");
    report.total = cfg.lambda_dino * report.dino_total
        + cfg.lambda_ibot * report.ibot
        + cfg.lambda_koleo * report.koleo;
    if !report.total.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {}", report.total)));
    }
    st.backward(total)?;
    let grads = sb.grads(&mut st);
    Ok((report, grads))
}
