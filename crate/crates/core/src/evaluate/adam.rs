use std::collections::BTreeMap;

use crate::numeric::Tensor;
use crate::trainer::no_decay;

/// Plain AdamW with decoupled weight decay, one learning rate for all tensors.
/// Biases and normalization parameters are not decayed.
pub(crate) struct DownstreamAdamW {
    weight_decay: f64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl DownstreamAdamW {
    pub(crate) fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub(crate) fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a String, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let decay = if no_decay(name) {
                1.0
            } else {
                1.0 - lr * self.weight_decay
            };
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = f64::from(gi);
                let m_new = BETA1 * f64::from(*mi) + (1.0 - BETA1) * gi;
                let v_new = BETA2 * f64::from(*vi) + (1.0 - BETA2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let upd = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + EPS);
                *w = (f64::from(*w) * decay - upd) as f32;
            }
        }
    }
}
