//! Tokenizer, transformer encoder and projection heads over named parameters.

mod encoder;
mod heads;
mod params;
mod tokenizer;

use serde::{Deserialize, Serialize};

pub use encoder::{encode, EncodeOptions, EncodeOutput, EncodeTrace};
pub use heads::{freeze_prototypes, is_prototype_param, project, HeadKind, HeadOutput};
pub use params::{Binder, ModelParams};
pub use tokenizer::{tokenize, SCALAR_SCALES};

use crate::error::{config_err, Result};

/// Architecture hyper-parameters. Defaults are the full-size model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub dropout: f32,
    /// Samples per patch; a 512-long series yields 32 patches.
    pub patch_width: usize,
    pub conv_kernel: usize,
    pub d_scalar: usize,
    pub scalar_tolerance: f32,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    pub n_prototypes: usize,
    pub init_std: f32,
    pub zscore_eps: f32,
    pub layer_norm_eps: f32,
    pub patch_std_eps: f32,
    pub l2_eps: f32,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_layers: 6,
            n_heads: 8,
            head_dim: 128,
            mlp_hidden: 512,
            dropout: 0.1,
            patch_width: 16,
            conv_kernel: 3,
            d_scalar: 32,
            scalar_tolerance: 1.1,
            head_hidden: 2048,
            head_bottleneck: 256,
            n_prototypes: 65_536,
            init_std: 0.02,
            zscore_eps: 1e-6,
            layer_norm_eps: 1e-5,
            patch_std_eps: 1e-8,
            l2_eps: 1e-8,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model used by the smoke runs.
    pub fn tiny() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            head_dim: 16,
            mlp_hidden: 64,
            d_scalar: 8,
            head_hidden: 64,
            head_bottleneck: 32,
            n_prototypes: 128,
            ..Self::default()
        }
    }

    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("patch_width", self.patch_width),
            ("d_scalar", self.d_scalar),
            ("head_hidden", self.head_hidden),
            ("head_bottleneck", self.head_bottleneck),
            ("n_prototypes", self.n_prototypes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("model.{name} must be positive"));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(config_err!(
                "model.conv_kernel must be odd, got {}",
                self.conv_kernel
            ));
        }
        if self.d_model % 2 != 0 {
            return Err(config_err!(
                "model.d_model must be even for sinusoidal positions"
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("model.dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}
