use super::{Binder, ModelConfig};
use crate::error::{shape_err, Result};
use crate::numeric::{sinusoidal_pe, Tape, Tensor, Var};
use crate::rng::Rng;

/// Per-call switches for [`encode`].
#[derive(Default)]
pub struct EncodeOptions<'a> {
    /// `[B * P]` flags; flagged tokens are replaced by the mask vector.
    pub mask: Option<&'a [bool]>,
    /// Dropout is active only when a generator is supplied.
    pub dropout: Option<&'a mut Rng>,
    pub trace: Option<&'a mut EncodeTrace>,
}

/// Intermediate values captured during [`encode`].
#[derive(Clone, Debug, Default)]
pub struct EncodeTrace {
    /// Patch tokens after mask substitution, before positions are added.
    pub masked_tokens: Option<Tensor>,
    /// Post-softmax attention per layer, `[B, heads, S, S]` with `S = P + 1`.
    pub attention: Vec<Tensor>,
}

pub struct EncodeOutput {
    pub cls: Var,
    pub patches: Var,
}

fn dropout(tape: &mut Tape, x: Var, p: f32, rng: &mut Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => tape.dropout(x, p, true, r),
        _ => Ok(x),
    }
}

fn attention(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    opts: &mut EncodeOptions,
) -> Result<Var> {
    let (b, s) = (tape.shape(x)[0], tape.shape(x)[1]);
    let (h, dh) = (cfg.n_heads, cfg.head_dim);
    let mut split = |tape: &mut Tape, m: &str| -> Result<Var> {
        let w = binder.get(tape, &format!("{prefix}.attn.{m}.weight"))?;
        let bias = binder.get(tape, &format!("{prefix}.attn.{m}.bias"))?;
        let y = tape.linear(x, w, Some(bias))?;
        let y = tape.reshape(y, &[b, s, h, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[b * h, s, dh])
    };
    let q = split(tape, "q")?;
    let k = split(tape, "k")?;
    let v = split(tape, "v")?;
    let scores = tape.bmm(q, k, true)?;
    let probs = tape.softmax(scores, (dh as f32).sqrt())?;
    if let Some(trace) = opts.trace.as_deref_mut() {
        trace
            .attention
            .push(tape.value(probs).clone().reshaped(vec![b, h, s, s])?);
    }
    let probs = dropout(tape, probs, cfg.dropout, &mut opts.dropout)?;
    let o = tape.bmm(probs, v, false)?;
    let o = tape.reshape(o, &[b, h, s, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[b, s, h * dh])?;
    let w = binder.get(tape, &format!("{prefix}.attn.out.weight"))?;
    let bias = binder.get(tape, &format!("{prefix}.attn.out.bias"))?;
    tape.linear(o, w, Some(bias))
}

fn norm(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    name: &str,
    x: Var,
) -> Result<Var> {
    let g = binder.get(tape, &format!("{name}.weight"))?;
    let b = binder.get(tape, &format!("{name}.bias"))?;
    tape.layer_norm(x, g, b, cfg.layer_norm_eps)
}

/// Runs the transformer over patch tokens `[B, P, d]` with a prepended class token.
pub fn encode(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    tokens: Var,
    mut opts: EncodeOptions,
) -> Result<EncodeOutput> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model || shape[1] == 0 {
        return Err(shape_err!(
            "encode: tokens {:?}, expected [B, P, {}]",
            shape,
            cfg.d_model
        ));
    }
    let (b, p, d) = (shape[0], shape[1], shape[2]);
    let mut x = tokens;
    if let Some(mask) = opts.mask {
        if mask.len() != b * p {
            return Err(shape_err!(
                "encode: mask has {} entries for [{b}, {p}] tokens",
                mask.len()
            ));
        }
        let m = binder.get(tape, "encoder.mask_token")?;
        x = tape.mask_replace(x, mask, m)?;
    }
    if let Some(trace) = opts.trace.as_deref_mut() {
        trace.masked_tokens = Some(tape.value(x).clone());
    }

    let cls = binder.get(tape, "encoder.cls_token")?;
    let cls = tape.reshape(cls, &[1, d])?;
    let cls = tape.index_select(cls, &vec![0; b])?;
    let cls = tape.reshape(cls, &[b, 1, d])?;
    let mut h = tape.concat(&[cls, x], 1)?;
    if cfg.positional_encoding {
        let pe = tape.constant(sinusoidal_pe(p + 1, d)?);
        h = tape.add_bcast(h, pe)?;
    }

    for l in 0..cfg.n_layers {
        let prefix = format!("encoder.layers.{l}");
        let a = norm(tape, binder, cfg, &format!("{prefix}.norm1"), h)?;
        let a = attention(tape, binder, cfg, &prefix, a, &mut opts)?;
        h = tape.add(h, a)?;
        let m = norm(tape, binder, cfg, &format!("{prefix}.norm2"), h)?;
        let w1 = binder.get(tape, &format!("{prefix}.mlp.fc1.weight"))?;
        let b1 = binder.get(tape, &format!("{prefix}.mlp.fc1.bias"))?;
        let w2 = binder.get(tape, &format!("{prefix}.mlp.fc2.weight"))?;
        let b2 = binder.get(tape, &format!("{prefix}.mlp.fc2.bias"))?;
        let m = tape.linear(m, w1, Some(b1))?;
        let m = tape.gelu(m);
        let m = tape.linear(m, w2, Some(b2))?;
        let m = dropout(tape, m, cfg.dropout, &mut opts.dropout)?;
        h = tape.add(h, m)?;
    }
    let h = norm(tape, binder, cfg, "encoder.norm", h)?;
    let cls = tape.narrow(h, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[b, d])?;
    let patches = tape.narrow(h, 1, 1, p)?;
    Ok(EncodeOutput { cls, patches })
}
