//! Labeled examples and datasets, with the CSV on-disk format
//! `f0,...,fd,label` (0-based integer label).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// A nonempty, ordered collection of examples sharing class count and
/// feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, num_classes: usize) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Shape("dataset must be nonempty".into()))?;
        if num_classes < 2 {
            return Err(Error::Shape(format!("need at least 2 classes, got {num_classes}")));
        }
        let dim = first.x.len();
        for (i, e) in examples.iter().enumerate() {
            if e.x.len() != dim {
                return Err(Error::Shape(format!(
                    "example {i} has dimension {}, expected {dim}",
                    e.x.len()
                )));
            }
            if e.y >= num_classes {
                return Err(Error::Shape(format!(
                    "example {i} has label {} but only {num_classes} classes",
                    e.y
                )));
            }
        }
        Ok(Dataset {
            examples,
            num_classes,
        })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.examples[0].x.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.y)
    }

    /// Subset by example indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            indices.iter().map(|&i| self.examples[i].clone()).collect(),
            self.num_classes,
        )
    }

    /// Writes the dataset as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for e in &self.examples {
            let mut row: Vec<String> = e.x.iter().map(|v| format!("{v:?}")).collect();
            row.push(e.y.to_string());
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV dataset; `num_classes` defaults to `max label + 1`.
    pub fn read_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let name = path.display().to_string();
        let headers = r.headers().map_err(|e| csv_parse(&name, e))?.clone();
        let ncols = headers.len();
        if ncols < 2 || headers.get(ncols - 1) != Some("label") {
            return Err(Error::Parse {
                source_name: name,
                line: 1,
                column: 1,
                message: "header must be f0,...,fd,label".into(),
            });
        }
        for (i, h) in headers.iter().take(ncols - 1).enumerate() {
            if h != format!("f{i}") {
                return Err(Error::Parse {
                    source_name: name,
                    line: 1,
                    column: i + 1,
                    message: format!("expected column f{i}, found {h}"),
                });
            }
        }
        let mut examples = Vec::new();
        for (row_idx, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_parse(&name, e))?;
            let line = row_idx + 2;
            let bad = |column: usize, message: String| Error::Parse {
                source_name: name.clone(),
                line,
                column,
                message,
            };
            let x = rec
                .iter()
                .take(ncols - 1)
                .enumerate()
                .map(|(c, s)| s.trim().parse::<f64>().map_err(|e| bad(c + 1, e.to_string())))
                .collect::<Result<Vec<f64>>>()?;
            let y = rec[ncols - 1]
                .trim()
                .parse::<usize>()
                .map_err(|e| bad(ncols, e.to_string()))?;
            examples.push(LabeledExample { x, y });
        }
        let inferred = examples.iter().map(|e| e.y + 1).max().unwrap_or(0).max(2);
        Dataset::new(examples, num_classes.unwrap_or(inferred))
    }
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    let name = path.display().to_string();
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        csv_parse(&name, e)
    }
}

pub(crate) fn csv_parse(name: &str, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        source_name: name.to_string(),
        line,
        column: 0,
        message: e.to_string(),
    }
}
