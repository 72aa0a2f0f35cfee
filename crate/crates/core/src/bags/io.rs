use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::simplex::ProbVector;

/// Reads a dataset from CSV: numeric feature columns, then an integer label
/// column. A header row is detected by any non-numeric cell in the first row.
///
/// The class count is one more than the largest label seen.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_dataset_csv(file).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn parse_dataset_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;

    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Parse {
            location: format!("row {row}"),
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if r == 0 && record.iter().any(|cell| cell.parse::<f64>().is_err()) {
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected || expected < 2 {
            return Err(Error::Parse {
                location: format!("row {row}"),
                message: format!("expected {expected} columns, found {}", record.len()),
            });
        }
        for (col, cell) in record.iter().take(expected - 1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                location: format!("row {row}, column {}", col + 1),
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    location: format!("row {row}, column {}", col + 1),
                    message: format!("non-finite cell {cell:?}"),
                });
            }
            features.push(v);
        }
        let cell = &record[expected - 1];
        let label: usize = cell.parse().map_err(|_| Error::Parse {
            location: format!("row {row}, column {expected}"),
            message: format!("label {cell:?} is not a nonnegative integer"),
        })?;
        labels.push(label);
    }

    let width = width.unwrap_or(0);
    if labels.is_empty() {
        return Err(Error::Parse {
            location: "row 1".into(),
            message: "no data rows".into(),
        });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::from_flat(features, width - 1, labels, classes)
}

/// Writes `x0,..,x{d-1},label` with a header row.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.features(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.labels[i].to_string());
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Leading line of a bags file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagsMeta {
    pub n_bags: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct BagLine {
    bag_id: usize,
    indices: Vec<usize>,
    gamma_hat: Vec<f64>,
    gamma_true: Option<Vec<f64>>,
}

/// JSON lines: the metadata object, then one object per bag.
pub fn write_bags_jsonl<W: Write>(meta: &BagsMeta, bags: &[Bag], mut writer: W) -> Result<()> {
    serde_json::to_writer(&mut writer, meta).map_err(json_io)?;
    writer.write_all(b"\n")?;
    for (bag_id, bag) in bags.iter().enumerate() {
        let line = BagLine {
            bag_id,
            indices: bag.indices.clone(),
            gamma_hat: bag.gamma_hat.as_slice().to_vec(),
            gamma_true: bag.gamma_true.as_ref().map(|g| g.as_slice().to_vec()),
        };
        serde_json::to_writer(&mut writer, &line).map_err(json_io)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_bags_jsonl<R: Read>(reader: R) -> Result<(BagsMeta, Vec<Bag>)> {
    let mut lines = BufReader::new(reader)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let parse_err = |line: usize, e: &dyn std::fmt::Display| Error::Parse {
        location: format!("line {}", line + 1),
        message: e.to_string(),
    };

    let (n, first) = lines.next().ok_or_else(|| Error::Parse {
        location: "line 1".into(),
        message: "empty bags file".into(),
    })?;
    let meta: BagsMeta = serde_json::from_str(&first?).map_err(|e| parse_err(n, &e))?;

    let mut bags = Vec::with_capacity(meta.n_bags);
    for (n, line) in lines {
        let line: BagLine = serde_json::from_str(&line?).map_err(|e| parse_err(n, &e))?;
        if line.bag_id != bags.len() {
            return Err(parse_err(
                n,
                &format!("bag_id {} out of sequence, expected {}", line.bag_id, bags.len()),
            ));
        }
        if line.gamma_hat.len() != meta.classes {
            return Err(parse_err(
                n,
                &format!("gamma_hat has {} entries for {} classes", line.gamma_hat.len(), meta.classes),
            ));
        }
        let gamma_hat = ProbVector::new(line.gamma_hat).map_err(|e| parse_err(n, &e))?;
        let gamma_true = line
            .gamma_true
            .map(ProbVector::new)
            .transpose()
            .map_err(|e| parse_err(n, &e))?;
        bags.push(Bag {
            indices: line.indices,
            gamma_hat,
            gamma_true,
        });
    }
    if bags.len() != meta.n_bags {
        return Err(Error::Parse {
            location: "end of file".into(),
            message: format!("metadata promises {} bags, found {}", meta.n_bags, bags.len()),
        });
    }
    Ok((meta, bags))
}

fn json_io(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
