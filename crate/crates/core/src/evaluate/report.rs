//! Cross-dataset aggregation: mean ± std per cell, wins and average rank.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub seed: u64,
    pub method: String,
    /// Evaluation protocol, e.g. `probe` or `finetune`.
    pub regime: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub dataset: String,
    pub method: String,
    pub mean: f64,
    /// Population standard deviation over the seed set.
    pub std: f64,
    pub rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub wins: usize,
    pub average_rank: f64,
    pub average_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: String,
    pub seeds: Vec<u64>,
    pub datasets: Vec<String>,
    pub methods: Vec<MethodSummary>,
    pub cells: Vec<CellSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regimes: Vec<RegimeReport>,
}

/// Bar-chart data: one bar per method with its win count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub regime: String,
    pub x: Vec<String>,
    pub y: Vec<f64>,
    pub wins: Vec<usize>,
}

impl EvalReport {
    pub fn plot_data(&self) -> Vec<PlotData> {
        self.regimes
            .iter()
            .map(|r| PlotData {
                regime: r.regime.clone(),
                x: r.methods.iter().map(|m| m.method.clone()).collect(),
                y: r.methods.iter().map(|m| m.average_accuracy).collect(),
                wins: r.methods.iter().map(|m| m.wins).collect(),
            })
            .collect()
    }
}

/// Ranks with 1 = best; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn aggregate_regime(regime: &str, rows: &[&EvalRow]) -> Result<RegimeReport> {
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    let datasets: BTreeSet<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    let methods: BTreeSet<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    let mut table: BTreeMap<(&str, &str), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows {
        if !r.accuracy.is_finite() {
            return Err(Error::Input(format!(
                "{regime}/{}/{}: non-finite accuracy",
                r.dataset, r.method
            )));
        }
        if table
            .entry((r.dataset.as_str(), r.method.as_str()))
            .or_default()
            .insert(r.seed, r.accuracy)
            .is_some()
        {
            return Err(Error::Input(format!(
                "{regime}/{}/{}: seed {} appears twice",
                r.dataset, r.method, r.seed
            )));
        }
    }

    let mut cells = Vec::new();
    let mut rank_sum: BTreeMap<&str, f64> = BTreeMap::new();
    let mut acc_sum: BTreeMap<&str, f64> = BTreeMap::new();
    let mut wins: BTreeMap<&str, usize> = BTreeMap::new();
    for &ds in &datasets {
        let mut means = Vec::with_capacity(methods.len());
        let mut stds = Vec::with_capacity(methods.len());
        for &m in &methods {
            let per_seed = table.get(&(ds, m)).ok_or_else(|| {
                Error::Input(format!(
                    "{regime}: no results for method {m} on dataset {ds}"
                ))
            })?;
            if let Some(s) = seeds.iter().find(|s| !per_seed.contains_key(s)) {
                return Err(Error::Input(format!(
                    "{regime}: method {m} on dataset {ds} lacks seed {s}"
                )));
            }
            let n = per_seed.len() as f64;
            let mean = per_seed.values().sum::<f64>() / n;
            let var = per_seed.values().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            means.push(mean);
            stds.push(var.sqrt());
        }
        let ranks = average_ranks(&means);
        let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, &m) in methods.iter().enumerate() {
            *rank_sum.entry(m).or_default() += ranks[i];
            *acc_sum.entry(m).or_default() += means[i];
            *wins.entry(m).or_default() += usize::from(means[i] == best);
            cells.push(CellSummary {
                dataset: ds.to_string(),
                method: m.to_string(),
                mean: means[i],
                std: stds[i],
                rank: ranks[i],
            });
        }
    }
    let n_ds = datasets.len() as f64;
    Ok(RegimeReport {
        regime: regime.to_string(),
        seeds: seeds.into_iter().collect(),
        datasets: datasets.iter().map(|s| s.to_string()).collect(),
        methods: methods
            .iter()
            .map(|&m| MethodSummary {
                method: m.to_string(),
                wins: wins[m],
                average_rank: rank_sum[m] / n_ds,
                average_accuracy: acc_sum[m] / n_ds,
            })
            .collect(),
        cells,
    })
}

/// Summarizes results per regime. Every method must have a result for every
/// dataset and every seed seen in that regime.
pub fn aggregate(rows: &[EvalRow]) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Input("no results to aggregate".into()));
    }
    let mut by_regime: BTreeMap<&str, Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        by_regime.entry(r.regime.as_str()).or_default().push(r);
    }
    let regimes = by_regime
        .into_iter()
        .map(|(k, v)| aggregate_regime(k, &v))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { regimes })
}

pub fn read_results_csv(path: &std::path::Path) -> Result<Vec<EvalRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr
        .deserialize()
        .collect::<std::result::Result<Vec<EvalRow>, _>>()?)
}

pub fn write_results_csv(path: &std::path::Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
