use std::collections::{BTreeMap, HashMap};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::rng;

/// The full named parameter tree of one network (tokenizer, encoder, both heads).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

enum Init {
    TruncNormal,
    /// Truncated normal with std `1/sqrt(fan_in)`; keeps stem outputs at unit scale.
    FanIn,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let (d, k, dsc) = (cfg.d_model, cfg.conv_kernel, cfg.d_scalar);
    let n_scales = super::SCALAR_SCALES.len();
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    for branch in ["a", "b"] {
        push(
            format!("tokenizer.conv_{branch}.weight"),
            vec![d, 1, k],
            FanIn,
        );
        push(format!("tokenizer.conv_{branch}.bias"), vec![d], Zeros);
        push(format!("tokenizer.norm_{branch}.weight"), vec![d], Ones);
        push(format!("tokenizer.norm_{branch}.bias"), vec![d], Zeros);
    }
    for stat in ["mean", "std"] {
        push(
            format!("tokenizer.{stat}_enc.embed"),
            vec![n_scales, dsc],
            TruncNormal,
        );
        push(
            format!("tokenizer.{stat}_enc.bias"),
            vec![n_scales, dsc],
            Zeros,
        );
    }
    push(
        "tokenizer.proj.weight".into(),
        vec![2 * d + 2 * dsc, d],
        FanIn,
    );
    push("tokenizer.proj.bias".into(), vec![d], Zeros);

    push("encoder.cls_token".into(), vec![d], TruncNormal);
    push("encoder.mask_token".into(), vec![d], Zeros);
    let aw = cfg.attn_width();
    for l in 0..cfg.n_layers {
        let p = format!("encoder.layers.{l}");
        push(format!("{p}.norm1.weight"), vec![d], Ones);
        push(format!("{p}.norm1.bias"), vec![d], Zeros);
        for m in ["q", "k", "v"] {
            push(format!("{p}.attn.{m}.weight"), vec![d, aw], TruncNormal);
            push(format!("{p}.attn.{m}.bias"), vec![aw], Zeros);
        }
        push(format!("{p}.attn.out.weight"), vec![aw, d], TruncNormal);
        push(format!("{p}.attn.out.bias"), vec![d], Zeros);
        push(format!("{p}.norm2.weight"), vec![d], Ones);
        push(format!("{p}.norm2.bias"), vec![d], Zeros);
        push(
            format!("{p}.mlp.fc1.weight"),
            vec![d, cfg.mlp_hidden],
            TruncNormal,
        );
        push(format!("{p}.mlp.fc1.bias"), vec![cfg.mlp_hidden], Zeros);
        push(
            format!("{p}.mlp.fc2.weight"),
            vec![cfg.mlp_hidden, d],
            TruncNormal,
        );
        push(format!("{p}.mlp.fc2.bias"), vec![d], Zeros);
    }
    push("encoder.norm.weight".into(), vec![d], Ones);
    push("encoder.norm.bias".into(), vec![d], Zeros);

    for head in ["dino_head", "ibot_head"] {
        let dims = [d, cfg.head_hidden, cfg.head_hidden, cfg.head_bottleneck];
        for (i, w) in dims.windows(2).enumerate() {
            push(
                format!("{head}.mlp.{i}.weight"),
                vec![w[0], w[1]],
                TruncNormal,
            );
            push(format!("{head}.mlp.{i}.bias"), vec![w[1]], Zeros);
        }
        push(
            format!("{head}.proto.v"),
            vec![cfg.head_bottleneck, cfg.n_prototypes],
            TruncNormal,
        );
        push(format!("{head}.proto.g"), vec![cfg.n_prototypes], Ones);
    }
    out
}

impl ModelParams {
    /// Fresh parameters; each tensor draws from its own `(seed, "init:<name>")` stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let std = f64::from(cfg.init_std);
        let tensors = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, 1.0),
                    Init::TruncNormal => {
                        let mut r = rng::stream(seed, &format!("init:{name}"), 0);
                        Tensor::from_fn(shape, |_| rng::truncated_normal(&mut r, std) as f32)
                    }
                    Init::FanIn => {
                        let mut r = rng::stream(seed, &format!("init:{name}"), 0);
                        // Conv weights are [out, in, k]; linear weights are [in, out].
                        let fan_in = if shape.len() == 3 {
                            shape[1] * shape[2]
                        } else {
                            shape[0]
                        };
                        let s = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_fn(shape, |_| rng::truncated_normal(&mut r, s) as f32)
                    }
                };
                (name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// True when both trees hold the same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// Copies every tensor whose name starts with one of `prefixes` from `src`.
    pub fn copy_prefixes(&mut self, src: &Self, prefixes: &[&str]) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                let s = src.get(name)?;
                if s.shape() != t.shape() {
                    return Err(Error::Shape(format!(
                        "{name}: {:?} vs {:?}",
                        s.shape(),
                        t.shape()
                    )));
                }
                *t = s.clone();
            }
        }
        Ok(())
    }
}

/// Lazily places parameters on a tape. Only parameters a forward pass
/// actually touches become tape leaves; the rest get zero gradients.
pub struct Binder<'p> {
    params: &'p ModelParams,
    vars: HashMap<String, Var>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    /// Parameters are gradient leaves when `trainable`, constants otherwise.
    pub fn new(params: &'p ModelParams, trainable: bool) -> Self {
        Self {
            params,
            vars: HashMap::new(),
            trainable,
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = tape.leaf(t, self.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every parameter after `tape.backward`, zeros for untouched ones.
    pub fn grads(&self, tape: &mut Tape) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, t)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|&v| tape.take_grad(v))
                    .map(|g| {
                        Tensor::new(t.shape().to_vec(), g).expect("gradient matches parameter")
                    })
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}
