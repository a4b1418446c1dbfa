use super::{Binder, ModelConfig};
use crate::error::{shape_err, Result};
use crate::numeric::{Tape, Var};

/// Magnitude scales of the scalar encoders, `10^-4 ..= 10^4`.
pub const SCALAR_SCALES: [f32; 9] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4];

fn conv_branch(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    x: Var,
    branch: &str,
) -> Result<Var> {
    let (b, t) = (tape.shape(x)[0], tape.shape(x)[1]);
    let w = binder.get(tape, &format!("tokenizer.conv_{branch}.weight"))?;
    let bias = binder.get(tape, &format!("tokenizer.conv_{branch}.bias"))?;
    let g = binder.get(tape, &format!("tokenizer.norm_{branch}.weight"))?;
    let beta = binder.get(tape, &format!("tokenizer.norm_{branch}.bias"))?;
    let x = tape.reshape(x, &[b, 1, t])?;
    let h = tape.conv1d_same(x, w, bias)?;
    let h = tape.permute(h, &[0, 2, 1])?;
    let h = tape.layer_norm(h, g, beta, cfg.layer_norm_eps)?;
    let p = t / cfg.patch_width;
    let h = tape.reshape(h, &[b, p, cfg.patch_width, cfg.d_model])?;
    tape.mean_axis(h, 2)
}

/// Patch tokens `[B, T / patch_width, d_model]` for a batch of series `[B, T]`.
///
/// Feature layout before the projector: `[conv_a | conv_b | mean_enc | std_enc]`.
pub fn tokenize(tape: &mut Tape, binder: &mut Binder, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = cfg.patch_width;
    if shape.len() != 2 || shape[1] == 0 || shape[1] % w != 0 {
        return Err(shape_err!(
            "tokenize: series batch {:?} must be [B, T] with T a multiple of {w}",
            shape
        ));
    }
    let (b, t) = (shape[0], shape[1]);
    let p = t / w;

    let z = tape.normalize_last(x, cfg.zscore_eps)?;
    let dz = tape.diff_front_pad(z);
    let a = conv_branch(tape, binder, cfg, z, "a")?;
    let d = conv_branch(tape, binder, cfg, dz, "b")?;

    let patches = tape.reshape(x, &[b, p, w])?;
    let mean = tape.mean_axis(patches, 2)?;
    let std = tape.std_last(patches, cfg.patch_std_eps)?;
    let mut stats = Vec::with_capacity(2);
    for (name, v) in [("mean", mean), ("std", std)] {
        let e = binder.get(tape, &format!("tokenizer.{name}_enc.embed"))?;
        let c = binder.get(tape, &format!("tokenizer.{name}_enc.bias"))?;
        stats.push(tape.scalar_encode(v, e, c, &SCALAR_SCALES, cfg.scalar_tolerance)?);
    }

    let feats = tape.concat(&[a, d, stats[0], stats[1]], 2)?;
    let pw = binder.get(tape, "tokenizer.proj.weight")?;
    let pb = binder.get(tape, "tokenizer.proj.bias")?;
    tape.linear(feats, pw, Some(pb))
}
