//! Labelled feature tables on disk (`label,f0,f1,...`).

use std::path::Path;

use super::probe::{linear_probe, ProbeConfig, ProbeResult};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub labels: Vec<String>,
    /// `[N, F]`
    pub features: Tensor,
}

impl FeatureTable {
    pub fn new(labels: Vec<String>, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for features {:?}",
                labels.len(),
                features.shape()
            )));
        }
        Ok(Self { labels, features })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let f = self.features.shape()[1];
        let mut header = vec!["label".to_string()];
        header.extend((0..f).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path)?;
        let width = rdr.headers()?.len();
        if width < 2 {
            return Err(Error::Parse {
                path: origin,
                line: 1,
                msg: "expected a label column and at least one feature".into(),
            });
        }
        let (mut labels, mut data) = (Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            labels.push(rec[0].to_string());
            for v in rec.iter().skip(1) {
                let x: f32 = v.trim().parse().map_err(|_| Error::Parse {
                    path: origin.clone(),
                    line,
                    msg: format!("bad feature value {v:?}"),
                })?;
                data.push(x);
            }
        }
        if labels.is_empty() {
            return Err(Error::Input(format!("{origin}: no rows")));
        }
        Self::new(
            labels.clone(),
            Tensor::new([labels.len(), width - 1], data)?,
        )
    }
}

/// Label vocabulary in order of first appearance, training rows first.
pub fn label_vocabulary<'a>(splits: impl IntoIterator<Item = &'a [String]>) -> Vec<String> {
    let mut vocab: Vec<String> = Vec::new();
    for labels in splits {
        for l in labels {
            if !vocab.contains(l) {
                vocab.push(l.clone());
            }
        }
    }
    vocab
}

/// Linear probe between two feature tables with string labels.
pub fn probe_tables(
    train: &FeatureTable,
    test: &FeatureTable,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let vocab = label_vocabulary([train.labels.as_slice(), test.labels.as_slice()]);
    let index = |ls: &[String]| {
        ls.iter()
            .map(|l| {
                vocab
                    .iter()
                    .position(|v| v == l)
                    .expect("vocabulary covers all labels")
            })
            .collect::<Vec<_>>()
    };
    linear_probe(
        &train.features,
        &index(&train.labels),
        &test.features,
        &index(&test.labels),
        vocab.len(),
        cfg,
        seed,
    )
}
