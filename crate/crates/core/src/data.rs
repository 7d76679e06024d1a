//! CSV ingestion and the permuted-feature design used to plant known-null
//! covariates next to real ones.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::family::{Dataset, ExponentialFamily};
use crate::ising::BinarySamples;
use crate::seed::task_rng;

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    /// Covariate names in column order.
    pub columns: Vec<String>,
    /// Rows discarded because some field was missing.
    pub dropped: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | "?")
}

/// Reads a headed numeric CSV. Rows with a missing field (empty, `NA`, `NaN`
/// or `?`) are dropped and counted; any other non-numeric field is an error.
/// Row numbers in errors are 1-based file lines.
pub fn load_csv(path: &Path, response_column: &str, family: ExponentialFamily) -> Result<LoadedData> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, response_column, family)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
    dropped: usize,
}

fn parse_table<R: std::io::Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() {
        return Err(Error::InvalidData("missing header row".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row: line,
                column: header.get(rec.len().min(header.len() - 1)).cloned().unwrap_or_default(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        if rec.iter().any(is_missing) {
            dropped += 1;
            continue;
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, f)| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    row: line,
                    column: header[c].clone(),
                    message: format!("`{f}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    Ok(Table { header, rows, dropped })
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    response_column: &str,
    family: ExponentialFamily,
) -> Result<LoadedData> {
    let t = parse_table(reader)?;
    let resp = t
        .header
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| Error::InvalidData(format!("no column named `{response_column}`")))?;
    if t.header.len() < 2 {
        return Err(Error::InvalidData("need a response and at least one covariate".into()));
    }
    let cov: Vec<usize> = (0..t.header.len()).filter(|&c| c != resp).collect();
    let x = DMatrix::from_fn(t.rows.len(), cov.len(), |i, k| t.rows[i][cov[k]]);
    let y = DVector::from_iterator(t.rows.len(), t.rows.iter().map(|r| r[resp]));
    Ok(LoadedData {
        dataset: Dataset::new(x, y, family)?,
        columns: cov.iter().map(|&c| t.header[c].clone()).collect(),
        dropped: t.dropped,
    })
}

#[derive(Debug, Clone)]
pub struct LoadedSamples {
    pub samples: BinarySamples,
    pub columns: Vec<String>,
    pub dropped: usize,
}

/// Reads 0/1 node observations, one column per node.
pub fn load_samples_csv(path: &Path) -> Result<LoadedSamples> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples_csv(file)
}

pub fn read_samples_csv<R: std::io::Read>(reader: R) -> Result<LoadedSamples> {
    let t = parse_table(reader)?;
    let x = DMatrix::from_fn(t.rows.len(), t.header.len(), |i, j| t.rows[i][j]);
    Ok(LoadedSamples {
        samples: BinarySamples::new(x)?,
        columns: t.header,
        dropped: t.dropped,
    })
}

/// Writes samples with header `x0, x1, …`.
pub fn write_samples_csv<W: std::io::Write>(samples: &BinarySamples, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((0..samples.p()).map(|j| format!("x{j}")))?;
    for row in samples.matrix().row_iter() {
        w.write_record(row.iter().map(|v| if *v == 1.0 { "1" } else { "0" }))?;
    }
    w.flush().map_err(|e| Error::InvalidData(e.to_string()))
}

/// Appends `k_blocks` copies of the covariate block, each with its rows
/// shuffled by one seeded permutation shared across the block's columns.
pub fn make_permuted_design(data: &Dataset, k_blocks: usize, seed: u64) -> Dataset {
    let (n, p) = (data.n(), data.p());
    let mut x = DMatrix::zeros(n, p * (1 + k_blocks));
    x.columns_mut(0, p).copy_from(data.x());
    for b in 0..k_blocks {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut task_rng(seed, b as u64));
        let start = p * (b + 1);
        for j in 0..p {
            for (i, &src) in perm.iter().enumerate() {
                x[(i, start + j)] = data.x()[(src, j)];
            }
        }
    }
    Dataset::from_parts_unchecked(x, data.y().clone(), data.family())
}
