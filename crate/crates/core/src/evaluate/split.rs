use std::collections::BTreeMap;

use crate::rng::{self, Rng};

/// Train/validation index split holding out `fraction` of each class.
///
/// Falls back to a plain random split (with a warning) when some class has
/// fewer than two samples. Both sides are non-empty whenever `labels.len() >= 2`.
pub fn stratified_split(
    labels: &[usize],
    fraction: f64,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    if by_class.values().any(|v| v.len() < 2) {
        log::warn!("a class has fewer than 2 training samples; using a random validation split");
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        rng::shuffle(rng, &mut idx);
        let n_val = ((labels.len() as f64 * fraction).round() as usize)
            .clamp(1, labels.len().saturating_sub(1).max(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    } else {
        for idx in by_class.values_mut() {
            rng::shuffle(rng, idx);
            let n_val = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
