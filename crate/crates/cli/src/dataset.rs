//! Dataset descriptors and readers for IDX, CSV and synthetic data.

use std::path::{Path, PathBuf};

use efqat_core::data::{synthetic, Dataset, SyntheticSpec};
use efqat_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn default_eval_fraction() -> f64 {
    0.2
}

fn default_label_column() -> String {
    "label".into()
}

/// Where the train and eval sets come from.
///
/// File-backed kinds take an explicit eval file pair or, without one, hold
/// out the trailing `eval_fraction` of the training file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_labels: Option<PathBuf>,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_path: Option<PathBuf>,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
    Synthetic(SyntheticSpec),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Synthetic(SyntheticSpec::desk(0))
    }
}

impl DatasetConfig {
    /// Rewrites relative paths against `base` and makes them absolute.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let fix = |p: &mut PathBuf| -> Result<()> {
            let joined = if p.is_relative() {
                base.join(&*p)
            } else {
                p.clone()
            };
            *p = joined
                .canonicalize()
                .map_err(CliError::io("open dataset file", joined.clone()))?;
            Ok(())
        };
        match self {
            Self::Idx {
                images,
                labels,
                eval_images,
                eval_labels,
                ..
            } => {
                fix(images)?;
                fix(labels)?;
                if let Some(p) = eval_images {
                    fix(p)?;
                }
                if let Some(p) = eval_labels {
                    fix(p)?;
                }
            }
            Self::Csv { path, eval_path, .. } => {
                fix(path)?;
                if let Some(p) = eval_path {
                    fix(p)?;
                }
            }
            Self::Synthetic(_) => {}
        }
        Ok(())
    }

    /// Loads `(train, eval)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            Self::Synthetic(spec) => Ok(synthetic(spec)?),
            Self::Idx {
                images,
                labels,
                eval_images,
                eval_labels,
                eval_fraction,
                classes,
            } => {
                let x = read_idx_images(images)?;
                let y = read_idx_labels(labels)?;
                let (x, y) = pair(x, y, images, labels)?;
                let parts = match (eval_images, eval_labels) {
                    (Some(ei), Some(el)) => {
                        let ex = read_idx_images(ei)?;
                        let ey = read_idx_labels(el)?;
                        ((x, y), pair(ex, ey, ei, el)?)
                    }
                    (None, None) => split(x, y, *eval_fraction)?,
                    _ => {
                        return Err(CliError::Invalid(
                            "dataset: eval_images and eval_labels must be given together".into(),
                        ))
                    }
                };
                finish(parts, *classes)
            }
            Self::Csv {
                path,
                eval_path,
                label_column,
                eval_fraction,
                classes,
            } => {
                let (x, y) = read_csv(path, label_column)?;
                let parts = match eval_path {
                    Some(ep) => {
                        let (ex, ey) = read_csv(ep, label_column)?;
                        if ex.shape()[1] != x.shape()[1] {
                            return Err(CliError::Invalid(format!(
                                "{} has {} feature columns but {} has {}",
                                ep.display(),
                                ex.shape()[1],
                                path.display(),
                                x.shape()[1]
                            )));
                        }
                        ((x, y), (ex, ey))
                    }
                    None => split(x, y, *eval_fraction)?,
                };
                finish(parts, *classes)
            }
        }
    }
}

fn pair(x: Tensor, y: Vec<usize>, images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>)> {
    if x.shape()[0] != y.len() {
        return Err(CliError::Invalid(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            x.shape()[0],
            labels.display(),
            y.len()
        )));
    }
    Ok((x, y))
}

type Split = ((Tensor, Vec<usize>), (Tensor, Vec<usize>));

/// Keeps the leading samples for training and the trailing
/// `round(n·fraction)` for evaluation.
fn split(x: Tensor, y: Vec<usize>, fraction: f64) -> Result<Split> {
    let n = y.len();
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Invalid(format!(
            "dataset: eval_fraction {fraction} must lie strictly between 0 and 1"
        )));
    }
    let n_eval = (n as f64 * fraction).round() as usize;
    if n_eval == 0 || n_eval == n {
        return Err(CliError::Invalid(format!(
            "dataset: {n} samples cannot be split with eval_fraction {fraction}"
        )));
    }
    let n_train = n - n_eval;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let eval_idx: Vec<usize> = (n_train..n).collect();
    Ok((
        (x.select_rows(&train_idx), y[..n_train].to_vec()),
        (x.select_rows(&eval_idx), y[n_train..].to_vec()),
    ))
}

fn finish(((x, y), (ex, ey)): Split, classes: Option<usize>) -> Result<(Dataset, Dataset)> {
    let observed = y.iter().chain(&ey).max().map_or(0, |m| m + 1);
    let classes = classes.unwrap_or(observed);
    if observed > classes {
        return Err(CliError::Invalid(format!(
            "dataset: label {} found but classes = {classes}",
            observed - 1
        )));
    }
    Ok((Dataset::new(x, y, classes)?, Dataset::new(ex, ey, classes)?))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(CliError::io("read", path))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| CliError::Bytes {
            path: path.into(),
            offset: bytes.len() as u64,
            msg: format!("file ends inside the header while reading {what} at byte {offset}"),
        })
}

fn idx_payload<'a>(
    bytes: &'a [u8],
    path: &Path,
    magic: u32,
    kind: &str,
    dims: usize,
) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path, "the magic number")?;
    if found != magic {
        return Err(CliError::Bytes {
            path: path.into(),
            offset: 0,
            msg: format!("bad magic 0x{found:08x}, expected 0x{magic:08x} (IDX unsigned-byte {kind})"),
        });
    }
    let shape = (0..dims)
        .map(|d| be_u32(bytes, 4 + 4 * d, path, &format!("dimension {d}")).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * dims;
    let need: usize = shape.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(CliError::Bytes {
            path: path.into(),
            offset: bytes.len() as u64,
            msg: format!(
                "payload truncated: header declares {shape:?} = {need} bytes from byte {start}, file holds {have}"
            ),
        });
    }
    if have > need {
        return Err(CliError::Bytes {
            path: path.into(),
            offset: (start + need) as u64,
            msg: format!("{} unexpected trailing bytes after the payload", have - need),
        });
    }
    Ok((shape, &bytes[start..]))
}

/// Parses an IDX image file into `[N, 1, rows, cols]` with pixels scaled to
/// `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (shape, payload) = idx_payload(bytes, path, IDX_IMAGES_MAGIC, "images", 3)?;
    if shape.contains(&0) {
        return Err(CliError::Bytes {
            path: path.into(),
            offset: 4,
            msg: format!("image file declares an empty shape {shape:?}"),
        });
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![shape[0], 1, shape[1], shape[2]], data)?)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let (_, payload) = idx_payload(bytes, path, IDX_LABELS_MAGIC, "labels", 1)?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    parse_idx_images(&read_file(path)?, path)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    parse_idx_labels(&read_file(path)?, path)
}

/// Reads a headed CSV: every column except `label_column` is a numeric
/// feature; the label column holds non-negative integers.
pub fn read_csv(path: &Path, label_column: &str) -> Result<(Tensor, Vec<usize>)> {
    let file = std::fs::File::open(path).map_err(CliError::io("open", path))?;
    parse_csv(file, path, label_column)
}

pub fn parse_csv(input: impl std::io::Read, path: &Path, label_column: &str) -> Result<(Tensor, Vec<usize>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let csv_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        CliError::Line {
            path: path.into(),
            line,
            msg: e.to_string(),
        }
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| CliError::Line {
            path: path.into(),
            line: 1,
            msg: format!(
                "no `{label_column}` column in header {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        })?;
    let features = headers.len() - 1;
    if features == 0 {
        return Err(CliError::Line {
            path: path.into(),
            line: 1,
            msg: "header has no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if col == label_idx {
                let label = cell.parse::<usize>().map_err(|_| CliError::Line {
                    path: path.into(),
                    line,
                    msg: format!(
                        "column `{}`: `{cell}` is not a non-negative integer label",
                        &headers[col]
                    ),
                })?;
                labels.push(label);
            } else {
                let v = cell
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::Line {
                        path: path.into(),
                        line,
                        msg: format!("column `{}`: `{cell}` is not a finite number", &headers[col]),
                    })?;
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(CliError::Line {
            path: path.into(),
            line: 2,
            msg: "no data rows".into(),
        });
    }
    Ok((Tensor::new(vec![labels.len(), features], data)?, labels))
}
