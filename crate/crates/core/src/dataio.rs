//! CSV formats.
//!
//! Series files have a header `label,c0,c1,…` (or `c0,c1,…` when unlabeled)
//! and one row per time step. Detection files have a header
//! `start,end,predicted,p0,…,provisional`, one row per window, with `end`
//! exclusive.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::preprocess::RawSeries;

/// Rows read from a series file; `labels` is `None` without a label column.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSeries<T> {
    pub values: Matrix<T>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Scalar> CsvSeries<T> {
    /// Labeled series with `class_count = max label + 1` (at least 1).
    pub fn into_raw(self) -> Result<RawSeries<T>> {
        match self.labels {
            Some(labels) => {
                let n = labels.iter().max().map_or(1, |m| m + 1);
                RawSeries::new(self.values, labels, n)
            }
            None => Err(invalid("series has no label column")),
        }
    }
}

fn parse_err(line: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

pub fn read_series<T: Scalar, R: Read>(reader: R) -> Result<CsvSeries<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let labeled = names.first() == Some(&"label");
    let channels = names.len() - usize::from(labeled);
    if names.is_empty() || names == [""] || channels == 0 {
        return Err(parse_err(1, "header must list at least one channel"));
    }
    for (k, name) in names[usize::from(labeled)..].iter().enumerate() {
        if *name != format!("c{k}") {
            return Err(parse_err(1, format!("expected column c{k}, found '{name}'")));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", names.len(), record.len())));
        }
        let mut fields = record.iter();
        if labeled {
            let raw = fields.next().unwrap().trim();
            let l = raw
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("label '{raw}' is not a non-negative integer")))?;
            labels.push(l);
        }
        for raw in fields {
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("value '{raw}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("value '{raw}' is not finite")));
            }
            values.push(T::lit(v));
        }
    }
    let rows = values.len() / channels;
    if rows == 0 {
        return Err(Error::Empty("data file has no rows"));
    }
    Ok(CsvSeries {
        values: Matrix::from_vec(rows, channels, values)?,
        labels: labeled.then_some(labels),
    })
}

pub fn read_series_file<T: Scalar>(path: &Path) -> Result<CsvSeries<T>> {
    read_series(File::open(path)?)
}

/// Writes values with shortest round-trip formatting.
pub fn write_series<T: Scalar, W: Write>(mut out: W, values: &Matrix<T>, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != values.rows() {
            return Err(invalid("label count differs from row count"));
        }
    }
    let mut header: Vec<String> = (0..values.cols()).map(|c| format!("c{c}")).collect();
    if labels.is_some() {
        header.insert(0, "label".into());
    }
    writeln!(out, "{}", header.join(","))?;
    let mut line = String::new();
    for r in 0..values.rows() {
        line.clear();
        if let Some(l) = labels {
            line.push_str(&l[r].to_string());
        }
        for (c, v) in values.row(r).iter().enumerate() {
            if c > 0 || labels.is_some() {
                line.push(',');
            }
            line.push_str(&v.to_f64_lossy().to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_series_file<T: Scalar>(path: &Path, values: &Matrix<T>, labels: Option<&[usize]>) -> Result<()> {
    write_series(BufWriter::new(File::create(path)?), values, labels)
}

/// Removes rows whose label is in `drop` and renumbers the remaining labels
/// densely in increasing order. Returns the series and `(old, new)` pairs.
pub fn drop_classes<T: Scalar>(series: &RawSeries<T>, drop: &[usize]) -> Result<(RawSeries<T>, Vec<(usize, usize)>)> {
    if drop.contains(&0) {
        return Err(invalid("class 0 (normal operation) cannot be dropped"));
    }
    let n = series.class_count();
    let mut mapping = Vec::new();
    let mut new_id = vec![None; n];
    for (old, slot) in new_id.iter_mut().enumerate() {
        if !drop.contains(&old) {
            *slot = Some(mapping.len());
            mapping.push((old, mapping.len()));
        }
    }
    let d = series.channels();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, &l) in series.labels().iter().enumerate() {
        if let Some(new) = new_id[l] {
            values.extend_from_slice(series.values().row(r));
            labels.push(new);
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("series after dropping classes"));
    }
    let kept = Matrix::from_vec(labels.len(), d, values)?;
    Ok((RawSeries::new(kept, labels, mapping.len())?, mapping))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRow {
    pub start: usize,
    pub end: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub provisional: bool,
}

pub fn write_detections<W: Write>(mut out: W, rows: &[DetectionRow], class_count: usize) -> Result<()> {
    let probs: Vec<String> = (0..class_count).map(|c| format!("p{c}")).collect();
    writeln!(out, "start,end,predicted,{},provisional", probs.join(","))?;
    for row in rows {
        if row.probabilities.len() != class_count {
            return Err(invalid("probability vector width differs from class count"));
        }
        let p: Vec<String> = row.probabilities.iter().map(f64::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{}",
            row.start,
            row.end,
            row.predicted,
            p.join(","),
            u8::from(row.provisional)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Parsed detections and the class count implied by the header.
pub fn read_detections<R: Read>(reader: R) -> Result<(Vec<DetectionRow>, usize)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let n = names.len().saturating_sub(4);
    let ok = names.len() >= 5
        && names[..3] == ["start", "end", "predicted"]
        && names[names.len() - 1] == "provisional"
        && (0..n).all(|c| names[3 + c] == format!("p{c}"));
    if !ok {
        return Err(parse_err(1, "expected header start,end,predicted,p0,…,provisional"));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let int = |k: usize| -> Result<usize> {
            record[k]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("field {} is not an integer", k + 1)))
        };
        let probabilities = (0..n)
            .map(|c| {
                record[3 + c]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(line, format!("probability p{c} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        let row = DetectionRow {
            start: int(0)?,
            end: int(1)?,
            predicted: int(2)?,
            probabilities,
            provisional: match record[3 + n].trim() {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(line, format!("provisional flag '{other}' is not 0 or 1"))),
            },
        };
        if row.end <= row.start || row.predicted >= n {
            return Err(parse_err(line, "window bounds or predicted class out of range"));
        }
        rows.push(row);
    }
    Ok((rows, n))
}

/// True label of each window, `None` for windows spanning several labels.
pub fn window_truths(rows: &[DetectionRow], labels: &[usize]) -> Result<Vec<Option<usize>>> {
    rows.iter()
        .map(|r| {
            if r.end > labels.len() {
                return Err(invalid(format!(
                    "window {}..{} runs past the {} labeled rows",
                    r.start,
                    r.end,
                    labels.len()
                )));
            }
            let first = labels[r.start];
            Ok(labels[r.start..r.end].iter().all(|&l| l == first).then_some(first))
        })
        .collect()
}
