use super::{Binder, ModelConfig};
use crate::error::{shape_err, Result};
use crate::numeric::{Tape, Var};

/// Which of the two projection heads to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Dino,
    Ibot,
}

impl HeadKind {
    pub fn prefix(self) -> &'static str {
        match self {
            HeadKind::Dino => "dino_head",
            HeadKind::Ibot => "ibot_head",
        }
    }
}

pub struct HeadOutput {
    /// Unit-norm bottleneck features `[N, bottleneck]`.
    pub bottleneck: Var,
    /// Prototype scores `[N, K]`.
    pub logits: Var,
}

/// MLP, L2 normalization and a weight-normalized prototype layer.
pub fn project(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    kind: HeadKind,
    features: Var,
) -> Result<HeadOutput> {
    let s = tape.shape(features);
    if s.len() != 2 || s[1] != cfg.d_model {
        return Err(shape_err!(
            "project: features {:?}, expected [N, {}]",
            s,
            cfg.d_model
        ));
    }
    let prefix = kind.prefix();
    let mut h = features;
    for i in 0..3 {
        let w = binder.get(tape, &format!("{prefix}.mlp.{i}.weight"))?;
        let b = binder.get(tape, &format!("{prefix}.mlp.{i}.bias"))?;
        h = tape.linear(h, w, Some(b))?;
        if i < 2 {
            h = tape.gelu(h);
        }
    }
    let bottleneck = tape.l2_normalize(h, cfg.l2_eps)?;
    let v = binder.get(tape, &format!("{prefix}.proto.v"))?;
    let g = binder.get(tape, &format!("{prefix}.proto.g"))?;
    let w = tape.weight_norm(v, g)?;
    let logits = tape.matmul(bottleneck, w)?;
    Ok(HeadOutput { bottleneck, logits })
}

/// Parameters of the weight-normalized prototype layers.
pub fn is_prototype_param(name: &str) -> bool {
    name.ends_with(".proto.v") || name.ends_with(".proto.g")
}

/// Zeroes the prototype-layer gradients while `frozen`, so an optimizer step
/// driven by these gradients cannot move the prototypes.
pub fn freeze_prototypes(
    grads: &mut std::collections::BTreeMap<String, crate::Tensor>,
    frozen: bool,
) {
    if !frozen {
        return;
    }
    for (name, g) in grads.iter_mut() {
        if is_prototype_param(name) {
            g.data_mut().fill(0.0);
        }
    }
}
