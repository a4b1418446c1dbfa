//! Multi-crop views with jitter, and patch masks for the masked-token objective.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numeric::{mean_var, resize_series, Tensor};
use crate::rng::{self, Rng};

/// How a selected view draws its mask ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskRatio {
    /// Uniform choice among `points` evenly spaced ratios in the range.
    Linspace { points: usize },
    /// Continuous uniform ratio in the range.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_len: usize,
    pub local_len: usize,
    pub global_fraction: (f64, f64),
    pub local_fraction: (f64, f64),
    /// Jitter standard deviation as a multiple of the source series std.
    pub jitter_scale: f64,
    pub local_jitter_prob: f64,
    /// Patches per global view.
    pub mask_patches: usize,
    pub mask_prob: f64,
    pub mask_ratio_range: (f64, f64),
    pub mask_ratio: MaskRatio,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_global: 2,
            n_local: 8,
            global_len: 512,
            local_len: 256,
            global_fraction: (0.4, 1.0),
            local_fraction: (0.1, 0.4),
            jitter_scale: 0.2,
            local_jitter_prob: 0.5,
            mask_patches: 32,
            mask_prob: 0.5,
            mask_ratio_range: (0.1, 0.7),
            mask_ratio: MaskRatio::Linspace { points: 32 },
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi <= 1.0;
        if !frac_ok(self.global_fraction) || !frac_ok(self.local_fraction) {
            return Err(config_err!("crop fractions must satisfy 0 < lo <= hi <= 1"));
        }
        if self.n_global == 0 || self.global_len < 2 || (self.n_local > 0 && self.local_len < 2) {
            return Err(config_err!(
                "need at least one global view and view lengths >= 2"
            ));
        }
        let (rlo, rhi) = self.mask_ratio_range;
        if !(0.0..=1.0).contains(&rlo) || !(rlo..=1.0).contains(&rhi) {
            return Err(config_err!(
                "mask ratio range must satisfy 0 <= lo <= hi <= 1"
            ));
        }
        if let MaskRatio::Linspace { points } = self.mask_ratio {
            if points == 0 {
                return Err(config_err!("mask ratio linspace needs at least one point"));
            }
        }
        for (name, p) in [
            ("local_jitter_prob", self.local_jitter_prob),
            ("mask_prob", self.mask_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("{name} must lie in [0, 1]"));
            }
        }
        if self.jitter_scale < 0.0 {
            return Err(config_err!("jitter_scale must be non-negative"));
        }
        Ok(())
    }

    /// Smallest and largest non-zero mask count a selected view can receive.
    pub fn mask_count_bounds(&self) -> (usize, usize) {
        let n = self.mask_patches as f64;
        (
            (self.mask_ratio_range.0 * n).floor() as usize,
            (self.mask_ratio_range.1 * n).floor() as usize,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
}

/// Where a view came from in its source series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropMeta {
    pub kind: ViewKind,
    pub start: usize,
    pub len: usize,
    pub fraction: f64,
    pub jittered: bool,
}

/// All views of one batch.
#[derive(Clone, Debug)]
pub struct ViewSet {
    /// `[B, n_global, global_len]`
    pub global: Tensor,
    /// `[B, n_local, local_len]`
    pub local: Tensor,
    /// `[B, n_global, mask_patches]`, row-major.
    pub masks: Vec<bool>,
    /// `meta[b * (n_global + n_local) + v]`, globals first.
    pub meta: Vec<CropMeta>,
}

impl ViewSet {
    pub fn batch(&self) -> usize {
        self.global.shape()[0]
    }

    /// Number of masked patches per (sample, global view).
    pub fn mask_counts(&self, patches: usize) -> Vec<usize> {
        self.masks
            .chunks(patches)
            .map(|m| m.iter().filter(|&&v| v).count())
            .collect()
    }
}

/// Adds `N(0, sigma²)` noise in place.
pub fn jitter(x: &mut [f32], sigma: f64, rng: &mut Rng) {
    if sigma <= 0.0 {
        return;
    }
    for v in x {
        *v = (f64::from(*v) + sigma * rng::normal(rng)) as f32;
    }
}

/// Draws a crop fraction, start and resized contents.
fn crop(
    x: &[f32],
    fraction: (f64, f64),
    out_len: usize,
    kind: ViewKind,
    rng: &mut Rng,
) -> (Vec<f32>, CropMeta) {
    let t = x.len();
    let r = rng::uniform(rng, fraction.0, fraction.1);
    let len = ((r * t as f64).ceil() as usize).clamp(2, t);
    let start = rng::int_in(rng, 0, t - len);
    let view = resize_series(&x[start..start + len], out_len);
    (
        view,
        CropMeta {
            kind,
            start,
            len,
            fraction: r,
            jittered: false,
        },
    )
}

/// One mask row of `cfg.mask_patches` flags.
fn mask_row(cfg: &AugmentConfig, rng: &mut Rng) -> Vec<bool> {
    let n = cfg.mask_patches;
    let mut row = vec![false; n];
    if !rng::bernoulli(rng, cfg.mask_prob) {
        return row;
    }
    let (lo, hi) = cfg.mask_ratio_range;
    let ratio = match cfg.mask_ratio {
        MaskRatio::Linspace { points } if points > 1 => {
            let k = rng::int_in(rng, 0, points - 1);
            lo + (hi - lo) * k as f64 / (points - 1) as f64
        }
        MaskRatio::Linspace { .. } => lo,
        MaskRatio::Uniform => rng::uniform(rng, lo, hi),
    };
    // Guard against 0.7 * 32 landing a hair under an integer.
    let count = ((ratio * n as f64 + 1e-9).floor() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng::int_in(rng, i, n - 1);
        idx.swap(i, j);
        row[idx[i]] = true;
    }
    row
}

/// Independent masks for `b * n_views` views, `[b, n_views, mask_patches]` row-major.
pub fn sample_masks(b: usize, n_views: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<bool> {
    (0..b * n_views).flat_map(|_| mask_row(cfg, rng)).collect()
}

/// Builds the views of series batch `x[B, T]` for batch number `batch`.
///
/// Sample `i` draws from its own stream keyed by `(seed, batch, i)`, so a
/// batch is reproducible from those numbers alone.
pub fn make_views(x: &Tensor, cfg: &AugmentConfig, seed: u64, batch: u64) -> Result<ViewSet> {
    cfg.validate()?;
    if x.rank() != 2 {
        return Err(Error::Shape(format!(
            "make_views expects [B, T], got {:?}",
            x.shape()
        )));
    }
    let (b, t) = (x.shape()[0], x.shape()[1]);
    if t < 2 {
        return Err(Error::Input(format!(
            "series of length {t} is too short to crop"
        )));
    }
    let (ng, nl) = (cfg.n_global, cfg.n_local);
    let mut global = Vec::with_capacity(b * ng * cfg.global_len);
    let mut local = Vec::with_capacity(b * nl * cfg.local_len);
    let mut masks = Vec::with_capacity(b * ng * cfg.mask_patches);
    let mut meta = Vec::with_capacity(b * (ng + nl));
    for i in 0..b {
        let src = x.row(i);
        let mut r = rng::stream(seed, "views", (batch << 32) | i as u64);
        let sigma = cfg.jitter_scale * mean_var(src).1.sqrt();
        let jittered_global = rng::int_in(&mut r, 0, ng - 1);
        for g in 0..ng {
            let (mut v, mut m) = crop(
                src,
                cfg.global_fraction,
                cfg.global_len,
                ViewKind::Global,
                &mut r,
            );
            if g == jittered_global {
                jitter(&mut v, sigma, &mut r);
                m.jittered = sigma > 0.0;
            }
            global.extend(v);
            meta.push(m);
        }
        for _ in 0..nl {
            let (mut v, mut m) = crop(
                src,
                cfg.local_fraction,
                cfg.local_len,
                ViewKind::Local,
                &mut r,
            );
            if rng::bernoulli(&mut r, cfg.local_jitter_prob) {
                jitter(&mut v, sigma, &mut r);
                m.jittered = sigma > 0.0;
            }
            local.extend(v);
            meta.push(m);
        }
        masks.extend(sample_masks(1, ng, cfg, &mut r));
    }
    Ok(ViewSet {
        global: Tensor::new(vec![b, ng, cfg.global_len], global)?,
        local: Tensor::new(vec![b, nl, cfg.local_len], local)?,
        masks,
        meta,
    })
}
