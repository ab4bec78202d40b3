//! Points CSV and dataset manifests.
//!
//! CSV layout: header `sample_id,point_id,x0,x1[,x2,...],label`, one row per
//! particle, the `label` column optional. Rows of a sample must be contiguous.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{DiscreteMeasure, Sample};
use crate::tensor::Tensor;

pub fn load_points_csv(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "point_id" {
        return Err(Error::Schema(format!(
            "{}: header must start with `sample_id,point_id`",
            path.display()
        )));
    }
    let has_label = cols.last() == Some(&"label");
    let coord_cols = &cols[2..cols.len() - usize::from(has_label)];
    if coord_cols.is_empty() {
        return Err(Error::Schema(format!(
            "{}: no coordinate columns",
            path.display()
        )));
    }
    for (k, c) in coord_cols.iter().enumerate() {
        if *c != format!("x{k}") {
            return Err(Error::Schema(format!(
                "{}: expected column `x{k}`, found `{c}`",
                path.display()
            )));
        }
    }
    let d = coord_cols.len();

    struct Pending {
        id: String,
        rows: Vec<f64>,
        label: Option<usize>,
    }
    let mut samples = Vec::new();
    let mut current: Option<Pending> = None;
    let mut seen = std::collections::HashSet::new();
    let finish = |p: Pending| -> Result<Sample> {
        let n = p.rows.len() / d;
        let input = DiscreteMeasure::new(Tensor::from_vec(&[n, d], p.rows)?)?;
        Ok(Sample {
            id: p.id,
            input,
            label: p.label,
            target: None,
        })
    };

    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let id = rec[0].to_string();
        rec[1]
            .parse::<u64>()
            .map_err(|e| perr(format!("point_id `{}`: {e}", &rec[1])))?;
        let mut coords = Vec::with_capacity(d);
        for k in 0..d {
            let v = rec[2 + k]
                .parse::<f64>()
                .map_err(|e| perr(format!("x{k} `{}`: {e}", &rec[2 + k])))?;
            coords.push(v);
        }
        let label = if has_label {
            let s = &rec[2 + d];
            if s.is_empty() {
                None
            } else {
                Some(
                    s.parse::<usize>()
                        .map_err(|e| perr(format!("label `{s}`: {e}")))?,
                )
            }
        } else {
            None
        };
        match current.as_mut() {
            Some(p) if p.id == id => {
                if p.label != label {
                    return Err(perr(format!("inconsistent label within sample `{id}`")));
                }
                p.rows.extend(coords);
            }
            _ => {
                if let Some(p) = current.take() {
                    samples.push(finish(p)?);
                }
                if !seen.insert(id.clone()) {
                    return Err(perr(format!("rows of sample `{id}` are not contiguous")));
                }
                current = Some(Pending {
                    id,
                    rows: coords,
                    label,
                });
            }
        }
    }
    if let Some(p) = current.take() {
        samples.push(finish(p)?);
    }
    Ok(samples)
}

/// Writes the active particles of each sample's input.
///
/// The label column is emitted when any sample carries a label.
pub fn save_points_csv(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = samples.first().map_or(2, |s| s.input.dim());
    let with_label = samples.iter().any(|s| s.label.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "point_id".to_string()];
    header.extend((0..d).map(|k| format!("x{k}")));
    if with_label {
        header.push("label".into());
    }
    let csv_err = |e: csv::Error| Error::Schema(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for s in samples {
        if s.input.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.input.dim(),
            });
        }
        for (pid, row) in s.input.active_rows().enumerate() {
            let mut rec = vec![s.id.clone(), pid.to_string()];
            // `{:?}` prints the shortest string that round-trips
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            if with_label {
                rec.push(s.label.map(|l| l.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Removal radius for partial clouds (completion).
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_free_fraction")]
    pub free_fraction: f64,
    #[serde(default)]
    pub noise_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}
fn default_radius() -> f64 {
    0.6
}
fn default_free_fraction() -> f64 {
    0.275
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            normalize: true,
            radius: default_radius(),
            free_fraction: default_free_fraction(),
            noise_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Split → CSV path, task, and preprocessing parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: TaskKind,
    pub splits: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub preprocess: Preprocess,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in m.splits.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, name: &str) -> Result<&Path> {
        self.splits
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("manifest has no `{name}` split")))
    }
}
