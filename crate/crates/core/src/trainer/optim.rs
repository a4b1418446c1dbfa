use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{is_prototype_param, ModelParams};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling over all student parameters.
    pub clip_norm: f64,
    pub layer_decay: f64,
    /// Extra multiplier on the tokenizer on top of the deepest layer decay.
    pub tokenizer_lr_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 3.0,
            layer_decay: 0.9,
            tokenizer_lr_scale: 0.2,
        }
    }
}

/// Optimizer metadata of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    /// 0 for tokenizer and special tokens, `l` for encoder layer `l` (1-based),
    /// `n_layers + 1` for the final norm and heads.
    pub layer: usize,
    pub lr_scale: f64,
    pub weight_decay: bool,
    pub prototype: bool,
}

pub(crate) fn no_decay(name: &str) -> bool {
    name.ends_with(".bias")
        || name.contains("norm")
        || name.contains("gamma")
        || name.ends_with(".proto.g")
}

/// Layer-wise learning-rate multipliers `decay^(L + 1 - layer)`, the tokenizer
/// additionally scaled, and weight-decay flags. Unknown names are an error.
pub fn build_param_groups(
    params: &ModelParams,
    n_layers: usize,
    cfg: &OptimConfig,
) -> Result<BTreeMap<String, ParamGroup>> {
    let top = n_layers + 1;
    params
        .names()
        .map(|name| {
            let (layer, extra) = if name.starts_with("tokenizer.") {
                (0, cfg.tokenizer_lr_scale)
            } else if name == "encoder.cls_token" || name == "encoder.mask_token" {
                (0, 1.0)
            } else if let Some(rest) = name.strip_prefix("encoder.layers.") {
                let idx: usize = rest
                    .split('.')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| config_err!("cannot classify parameter {name}"))?;
                if idx >= n_layers {
                    return Err(config_err!(
                        "parameter {name} is beyond the {n_layers} encoder layers"
                    ));
                }
                (idx + 1, 1.0)
            } else if name.starts_with("encoder.norm.")
                || name.starts_with("dino_head.")
                || name.starts_with("ibot_head.")
            {
                (top, 1.0)
            } else {
                return Err(config_err!("cannot classify parameter {name}"));
            };
            let group = ParamGroup {
                layer,
                lr_scale: cfg.layer_decay.powi((top - layer) as i32) * extra,
                weight_decay: !no_decay(name),
                prototype: is_prototype_param(name),
            };
            Ok((name.clone(), group))
        })
        .collect()
}

/// Scheduled values for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub lr: f64,
    pub prototype_lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub applied: bool,
}

/// Global L2 norm of a gradient tree, accumulated in f64.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// AdamW with decoupled weight decay and per-parameter multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub groups: BTreeMap<String, ParamGroup>,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Number of applied updates.
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &ModelParams, n_layers: usize) -> Result<Self> {
        let groups = build_param_groups(params, n_layers, &cfg)?;
        let zeros = |p: &ModelParams| {
            p.iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        Ok(Self {
            cfg,
            groups,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        })
    }

    /// Clips, then applies one update. Non-finite gradients skip the step
    /// and leave parameters and moments untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        rates: StepRates,
    ) -> Result<StepStats> {
        if grads.len() != self.groups.len() || !grads.keys().eq(self.groups.keys()) {
            return Err(Error::Internal(
                "gradient tree does not match optimizer groups".into(),
            ));
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Ok(StepStats {
                grad_norm: norm,
                clip_scale: 0.0,
                applied: false,
            });
        }
        let clip = if norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let group = &self.groups[name];
            let base = if group.prototype {
                rates.prototype_lr
            } else {
                rates.lr
            };
            let lr = base * group.lr_scale;
            let wd = if group.weight_decay {
                rates.weight_decay
            } else {
                0.0
            };
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "{name}: gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.get_mut(name).expect("moment exists for every group");
            let v = self.v.get_mut(name).expect("moment exists for every group");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = f64::from(gi) * clip;
                let mn = b1 * f64::from(*mi) + (1.0 - b1) * gi;
                let vn = b2 * f64::from(*vi) + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                if lr == 0.0 {
                    continue;
                }
                let mut x = f64::from(*pi) * (1.0 - lr * wd);
                x -= lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
                *pi = x as f32;
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clip_scale: clip,
            applied: true,
        })
    }
}

/// `teacher <- m * teacher + (1 - m) * student` for every parameter.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, momentum: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::Internal(
            "teacher and student parameter trees differ".into(),
        ));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (ti, &si) in t.data_mut().iter_mut().zip(s.data()) {
            *ti = (momentum * f64::from(*ti) + (1.0 - momentum) * f64::from(si)) as f32;
        }
    }
    Ok(())
}
