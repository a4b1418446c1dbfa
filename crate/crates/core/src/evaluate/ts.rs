//! Reader and writer for the `.ts` classification format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One labelled multichannel series.
#[derive(Clone, Debug, PartialEq)]
pub struct TsSample {
    /// `channels[c][t]`; all channels of a sample share one length.
    pub channels: Vec<Vec<f32>>,
    pub label: String,
}

/// A train or test split.
#[derive(Clone, Debug, PartialEq)]
pub struct TsSplit {
    pub problem_name: String,
    pub n_channels: usize,
    /// Declared label vocabulary, in header order.
    pub class_labels: Vec<String>,
    pub samples: Vec<TsSample>,
}

impl TsSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Label indices into `class_labels`.
    pub fn label_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| {
                self.class_labels
                    .iter()
                    .position(|l| *l == s.label)
                    .expect("labels are validated on construction")
            })
            .collect()
    }
}

/// Train and test splits of one problem.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub train: TsSplit,
    pub test: TsSplit,
}

impl LabeledDataset {
    /// Loads `<dir>/<name>_TRAIN.ts` and `<dir>/<name>_TEST.ts`.
    pub fn load_dir(dir: &Path, name: &str) -> Result<Self> {
        let train = parse_ts_file(&dir.join(format!("{name}_TRAIN.ts")))?;
        let test = parse_ts_file(&dir.join(format!("{name}_TEST.ts")))?;
        if train.n_channels != test.n_channels {
            return Err(Error::Input(format!(
                "{name}: train has {} channels, test {}",
                train.n_channels, test.n_channels
            )));
        }
        Ok(Self {
            name: name.to_string(),
            train,
            test,
        })
    }
}

pub fn parse_ts_file(path: &Path) -> Result<TsSplit> {
    let text = std::fs::read_to_string(path)?;
    parse_ts(&text, &path.display().to_string())
}

#[derive(Default)]
struct Header {
    problem_name: Option<String>,
    univariate: Option<bool>,
    dimensions: Option<usize>,
    class_labels: Option<Vec<String>>,
}

fn parse_bool(v: Option<&str>) -> Option<bool> {
    match v.map(str::to_ascii_lowercase).as_deref() {
        Some("true") => Some(true),
        Some("false") => Some(false),
        _ => None,
    }
}

/// Parses one split. `origin` names the source in error messages.
pub fn parse_ts(text: &str, origin: &str) -> Result<TsSplit> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut header = Header::default();
    let mut in_data = false;
    let mut samples = Vec::new();
    let mut n_channels = 0;
    let mut labels: Vec<String> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            if !line.starts_with('@') {
                return Err(err(ln, "expected a header directive before @data".into()));
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default().to_ascii_lowercase();
            let rest: Vec<&str> = parts.collect();
            match key.as_str() {
                "@problemname" => {
                    let name = rest.join(" ");
                    if name.is_empty() {
                        return Err(err(ln, "@problemName needs a value".into()));
                    }
                    header.problem_name = Some(name);
                }
                "@timestamps" | "@missing" | "@equallength" => {
                    let v = parse_bool(rest.first().copied())
                        .ok_or_else(|| err(ln, format!("{key} expects true or false")))?;
                    if key == "@timestamps" && v {
                        return Err(err(ln, "timestamped series are not supported".into()));
                    }
                }
                "@serieslength" => {
                    rest.first()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| err(ln, "@seriesLength expects an integer".into()))?;
                }
                "@univariate" => {
                    header.univariate = Some(
                        parse_bool(rest.first().copied())
                            .ok_or_else(|| err(ln, "@univariate expects true or false".into()))?,
                    );
                }
                "@dimensions" | "@dimension" => {
                    let d = rest
                        .first()
                        .and_then(|v| v.parse::<usize>().ok())
                        .filter(|&d| d > 0)
                        .ok_or_else(|| err(ln, "@dimensions expects a positive integer".into()))?;
                    header.dimensions = Some(d);
                }
                "@classlabel" => {
                    match parse_bool(rest.first().copied()) {
                        Some(true) if rest.len() > 1 => {}
                        Some(true) => {
                            return Err(err(ln, "@classLabel true needs at least one label".into()))
                        }
                        _ => {
                            return Err(err(
                                ln,
                                "only labelled classification files are supported".into(),
                            ))
                        }
                    }
                    header.class_labels = Some(rest[1..].iter().map(|s| s.to_string()).collect());
                }
                "@data" => {
                    labels = header
                        .class_labels
                        .clone()
                        .ok_or_else(|| err(ln, "@data before @classLabel".into()))?;
                    if header.problem_name.is_none() {
                        return Err(err(ln, "@data before @problemName".into()));
                    }
                    n_channels = match (header.univariate, header.dimensions) {
                        (Some(true), None) | (Some(true), Some(1)) => 1,
                        (Some(true), Some(d)) => {
                            return Err(err(
                                ln,
                                format!("@univariate true conflicts with @dimensions {d}"),
                            ))
                        }
                        (_, Some(d)) => d,
                        (Some(false), None) => 0,
                        (None, None) => {
                            return Err(err(ln, "@data before @univariate or @dimensions".into()))
                        }
                    };
                    in_data = true;
                }
                other => return Err(err(ln, format!("unknown directive {other}"))),
            }
            continue;
        }

        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(err(
                ln,
                "a data line needs at least one dimension and a label".into(),
            ));
        }
        let label = fields[fields.len() - 1].trim();
        if !labels.iter().any(|l| l == label) {
            return Err(err(ln, format!("unknown class label {label:?}")));
        }
        let dims = &fields[..fields.len() - 1];
        if n_channels == 0 {
            n_channels = dims.len();
        }
        if dims.len() != n_channels {
            return Err(err(
                ln,
                format!("expected {n_channels} dimensions, found {}", dims.len()),
            ));
        }
        let mut channels = Vec::with_capacity(dims.len());
        for (c, d) in dims.iter().enumerate() {
            let values = d
                .split(',')
                .map(|v| {
                    let v = v.trim();
                    if v == "?" {
                        return Err(err(ln, format!("missing value in dimension {c}")));
                    }
                    match v.parse::<f32>() {
                        Ok(x) if x.is_finite() => Ok(x),
                        _ => Err(err(ln, format!("bad value {v:?} in dimension {c}"))),
                    }
                })
                .collect::<Result<Vec<f32>>>()?;
            if let Some(first) = channels.first().map(Vec::len) {
                if values.len() != first {
                    return Err(err(
                        ln,
                        format!("ragged dimensions: {} values vs {first}", values.len()),
                    ));
                }
            }
            channels.push(values);
        }
        samples.push(TsSample {
            channels,
            label: label.to_string(),
        });
    }
    if !in_data {
        return Err(err(text.lines().count().max(1), "no @data section".into()));
    }
    Ok(TsSplit {
        problem_name: header.problem_name.unwrap_or_default(),
        n_channels,
        class_labels: labels,
        samples,
    })
}

/// Writes a split in the `.ts` format; `parse_ts` reads it back unchanged.
pub fn serialize_ts(split: &TsSplit) -> String {
    let mut out = String::new();
    let lengths: Vec<usize> = split
        .samples
        .iter()
        .map(|s| s.channels.first().map_or(0, Vec::len))
        .collect();
    let equal = lengths.windows(2).all(|w| w[0] == w[1]);
    let _ = writeln!(out, "@problemName {}", split.problem_name);
    let _ = writeln!(out, "@timeStamps false");
    let _ = writeln!(out, "@missing false");
    if split.n_channels == 1 {
        let _ = writeln!(out, "@univariate true");
    } else {
        let _ = writeln!(out, "@univariate false");
        let _ = writeln!(out, "@dimensions {}", split.n_channels);
    }
    let _ = writeln!(out, "@equalLength {equal}");
    if equal {
        if let Some(len) = lengths.first() {
            let _ = writeln!(out, "@seriesLength {len}");
        }
    }
    let _ = writeln!(out, "@classLabel true {}", split.class_labels.join(" "));
    let _ = writeln!(out, "@data");
    for s in &split.samples {
        for ch in &s.channels {
            let vals: Vec<String> = ch.iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(","));
            out.push(':');
        }
        out.push_str(&s.label);
        out.push('\n');
    }
    out
}
