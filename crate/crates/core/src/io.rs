//! File formats: IDX (MNIST), prediction and example CSVs, logit dumps and
//! the dataset JSON envelope.
//!
//! Prediction CSV:
//!
//! ```text
//! confidence,correct
//! 0.9,1
//! 0.5,0
//! ```
//!
//! Logit CSV: header `logit_0,...,logit_{C-1},label`, one sample per row.
//! Example CSV: header `x_0,...,x_{F-1},label`.
//!
//! Floats are written with the shortest representation that parses back to
//! the same `f64`, so write/read round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{Dataset, LabeledExample, PredictionBatch};
use crate::error::{Error, Result};

const IDX_U8_LABELS: u32 = 0x0000_0801;
const IDX_U8_IMAGES: u32 = 0x0000_0803;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parsed IDX payload: dimensions and raw unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parse an unsigned-byte IDX file (magic `0x00000801` or `0x00000803`).
///
/// The header is big-endian: a 4-byte magic whose low byte is the number of
/// dimensions, then one 4-byte size per dimension. For error reporting the
/// "line" is the byte offset.
pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<IdxArray> {
    let be32 = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| parse_err(path, off, "truncated IDX header"))
    };
    let magic = be32(0)?;
    if magic != IDX_U8_LABELS && magic != IDX_U8_IMAGES {
        return Err(parse_err(
            path,
            0,
            format!("unsupported IDX magic {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|d| be32(4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(parse_err(
            path,
            header,
            format!(
                "IDX payload has {} bytes, header declares {count}",
                payload.len()
            ),
        ));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Load an IDX image file and its matching label file.
///
/// Pixels are scaled to `[0, 1]`; each image is flattened row-major, so a
/// `2 x 28 x 28` file yields two 784-feature examples. The class count is
/// `max(label) + 1`, at least 2.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx(images, &read_bytes(images)?)?;
    if img.dims.len() != 3 {
        return Err(parse_err(images, 0, "image file must have 3 dimensions"));
    }
    let lab = parse_idx(labels, &read_bytes(labels)?)?;
    if lab.dims.len() != 1 {
        return Err(parse_err(labels, 0, "label file must have 1 dimension"));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::invalid(format!(
            "{n} images but {} labels",
            lab.dims[0]
        )));
    }
    let width = img.dims[1] * img.dims[2];
    let examples = img
        .data
        .chunks(width.max(1))
        .zip(&lab.data)
        .map(|(px, &y)| LabeledExample {
            features: px.iter().map(|&p| f64::from(p) / 255.0).collect(),
            label: usize::from(y),
        })
        .collect();
    let classes = lab
        .data
        .iter()
        .map(|&y| usize::from(y) + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, classes, examples)
}

/// Non-empty data lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("`{field}` is not a number")))
}

fn parse_label(path: &Path, line: usize, field: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("`{field}` is not a class index")))
}

pub fn parse_predictions_csv(path: &Path, text: &str) -> Result<PredictionBatch> {
    let mut lines = data_lines(text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header row"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["confidence", "correct"] {
        return Err(parse_err(
            path,
            hline,
            format!("expected header `confidence,correct`, got `{header}`"),
        ));
    }
    let mut confidence = Vec::new();
    let mut correct = Vec::new();
    for (line, row) in lines {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected 2 fields, got {}", fields.len()),
            ));
        }
        let z = parse_f64(path, line, fields[0])?;
        if !(0.0..=1.0).contains(&z) {
            return Err(parse_err(
                path,
                line,
                format!("confidence {z} outside [0, 1]"),
            ));
        }
        let c = match fields[1].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(parse_err(
                    path,
                    line,
                    format!("correct must be 1 or 0, got `{other}`"),
                ))
            }
        };
        confidence.push(z);
        correct.push(c);
    }
    if confidence.is_empty() {
        return Err(parse_err(path, hline, "no prediction rows"));
    }
    PredictionBatch::new(confidence, correct)
}

pub fn read_csv_predictions(path: &Path) -> Result<PredictionBatch> {
    parse_predictions_csv(path, &read_text(path)?)
}

pub fn predictions_to_csv(batch: &PredictionBatch) -> String {
    let mut out = String::from("confidence,correct\n");
    for (z, c) in batch.iter() {
        out.push_str(&format!("{z},{}\n", u8::from(c)));
    }
    out
}

pub fn write_csv_predictions(path: &Path, batch: &PredictionBatch) -> Result<()> {
    write_text(path, &predictions_to_csv(batch))
}

/// Rows of `x_0..x_{F-1},label`. The class count is `max(label) + 1`, at least 2.
pub fn read_csv_examples(path: &Path) -> Result<Dataset> {
    let text = read_text(path)?;
    let mut lines = data_lines(&text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header row"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols.last() != Some(&"label") {
        return Err(parse_err(
            path,
            hline,
            "header must end with a `label` column",
        ));
    }
    let width = cols.len() - 1;
    let mut examples = Vec::new();
    for (line, row) in lines {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, got {}", cols.len(), fields.len()),
            ));
        }
        let features = fields[..width]
            .iter()
            .map(|f| parse_f64(path, line, f))
            .collect::<Result<Vec<_>>>()?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, line, "non-finite feature"));
        }
        let label = parse_label(path, line, fields[width])?;
        examples.push(LabeledExample { features, label });
    }
    let classes = examples
        .iter()
        .map(|e| e.label + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(name, classes, examples)
}

/// Saved logits with their labels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDump {
    pub num_classes: usize,
    pub logits: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LogitDump {
    pub fn new(num_classes: usize, logits: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if num_classes < 2 || logits.len() != num_classes * labels.len() || labels.is_empty() {
            return Err(Error::invalid("logit dump shape mismatch"));
        }
        if labels.iter().any(|&y| y >= num_classes) {
            return Err(Error::invalid("logit dump label out of range"));
        }
        Ok(Self {
            num_classes,
            logits,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.logits.chunks(self.num_classes)
    }

    pub fn to_csv(&self) -> String {
        let mut out: Vec<String> = (0..self.num_classes)
            .map(|k| format!("logit_{k}"))
            .collect();
        out.push("label".into());
        let mut text = out.join(",");
        text.push('\n');
        for (row, y) in self.rows().zip(&self.labels) {
            for v in row {
                text.push_str(&format!("{v},"));
            }
            text.push_str(&format!("{y}\n"));
        }
        text
    }

    pub fn parse_csv(path: &Path, text: &str) -> Result<Self> {
        let mut lines = data_lines(text);
        let (hline, header) = lines
            .next()
            .ok_or_else(|| parse_err(path, 1, "missing header row"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let c = cols.len().saturating_sub(1);
        let expected: Vec<String> = (0..c)
            .map(|k| format!("logit_{k}"))
            .chain(std::iter::once("label".into()))
            .collect();
        if c < 2 || cols != expected {
            return Err(parse_err(
                path,
                hline,
                "expected header `logit_0,...,logit_{C-1},label` with C >= 2",
            ));
        }
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for (line, row) in lines {
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != c + 1 {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected {} fields, got {}", c + 1, fields.len()),
                ));
            }
            for f in &fields[..c] {
                let v = parse_f64(path, line, f)?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, "non-finite logit"));
                }
                logits.push(v);
            }
            let y = parse_label(path, line, fields[c])?;
            if y >= c {
                return Err(parse_err(path, line, format!("label {y} >= {c} classes")));
            }
            labels.push(y);
        }
        if labels.is_empty() {
            return Err(parse_err(path, hline, "no logit rows"));
        }
        LogitDump::new(c, logits, labels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_csv(path, &read_text(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

pub fn read_dataset_json(path: &Path) -> Result<Dataset> {
    let ds: Dataset = serde_json::from_str(&read_text(path)?)?;
    ds.validated()
}

pub fn write_dataset_json(path: &Path, d: &Dataset) -> Result<()> {
    write_text(path, &serde_json::to_string(d)?)
}

/// Write any serializable value as pretty JSON.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_string(path: &Path, text: &str) -> Result<()> {
    write_text(path, text)
}
