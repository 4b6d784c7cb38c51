use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Tensor;

use super::RawSeries;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

/// Reads a series: one header row of channel names, then one row of
/// decimal values per timestep.
pub fn load_series(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(parse_err(path, 1, "missing header row of channel names"));
    }
    let c = names.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows += 1;
        if rec.len() != c {
            return Err(parse_err(
                path,
                line,
                format!("row {rows} has {} fields, header has {c}", rec.len()),
            ));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(
                    path,
                    line,
                    format!("row {rows}, column {}: {cell:?} is not a number", names[j]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("row {rows}: non-finite value {cell:?}")));
            }
            data.push(v);
        }
    }
    RawSeries::new(Tensor::matrix(rows, c, data)?, None, names)
}

/// Reads a single-column file of 0/1 labels without header.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let cell = raw.trim();
        if cell.is_empty() {
            continue;
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("label {cell:?} is not 0 or 1")))?;
        let label = if v == 0.0 {
            0
        } else if v == 1.0 {
            1
        } else {
            return Err(parse_err(path, i + 1, format!("label {cell:?} is not 0 or 1")));
        };
        labels.push(label);
    }
    Ok(labels)
}

/// Loads an unlabelled training series and a labelled test series.
pub fn load_csv(
    train_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
) -> Result<(RawSeries, RawSeries)> {
    let train = load_series(&train_path)?;
    let mut test = load_series(&test_path)?;
    if train.channel_names != test.channel_names {
        return Err(Error::Dimension(format!(
            "train channels {:?} differ from test channels {:?}",
            train.channel_names, test.channel_names
        )));
    }
    let label_path = label_path.as_ref();
    let labels = load_labels(label_path)?;
    if labels.len() != test.len() {
        return Err(parse_err(
            label_path,
            labels.len(),
            format!("{} labels for {} test rows", labels.len(), test.len()),
        ));
    }
    test.labels = Some(labels);
    Ok((train, test))
}

pub fn write_series(path: impl AsRef<Path>, series: &RawSeries) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(&series.channel_names)
        .map_err(|e| csv_err(path, e))?;
    for i in 0..series.len() {
        w.write_record(series.values.row(i).iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in labels {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
