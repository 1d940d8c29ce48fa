//! CSV and JSON artifacts. Every file is written to a sibling temporary
//! path and renamed into place.
//!
//! Floats are written in shortest round-trip form, so reading an artifact
//! back reproduces the in-memory values bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::Tensor2;
use crate::distill::LogRow;
use crate::error::{Error, Result};
use crate::metrics::FieldRow;

pub const POINTS_HEADER: [&str; 2] = ["x0", "x1"];
pub const LOSS_HEADER: [&str; 2] = ["iter", "loss"];
pub const RUN_LOG_HEADER: [&str; 5] = ["iter", "stage", "mf_loss", "tda_g_loss", "tda_d_loss"];
pub const FIELD_HEADER: [&str; 4] = ["x", "y", "ux", "uy"];

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn csv_bytes<R: AsRef<[String]>>(header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::contract(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.as_ref()).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::contract(format!("csv encoding failed: {e}")))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn points_csv(points: &Tensor2) -> Result<Vec<u8>> {
    if points.cols() != 2 {
        return Err(Error::shape("points_csv", format!("{:?}", points.shape())));
    }
    csv_bytes(
        &POINTS_HEADER,
        points.iter_rows().map(|r| vec![r[0].to_string(), r[1].to_string()]),
    )
}

pub fn write_points(path: &Path, points: &Tensor2) -> Result<()> {
    write_atomic(path, &points_csv(points)?)
}

pub fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let rows = losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()]);
    write_atomic(path, &csv_bytes(&LOSS_HEADER, rows)?)
}

pub fn write_run_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let rows = log.iter().map(|l| {
        vec![
            l.iter.to_string(),
            l.stage.as_str().to_owned(),
            l.record.mf_loss.to_string(),
            opt(l.record.tda_g_loss),
            opt(l.record.tda_d_loss),
        ]
    });
    write_atomic(path, &csv_bytes(&RUN_LOG_HEADER, rows)?)
}

pub fn write_field(path: &Path, field: &[FieldRow]) -> Result<()> {
    let rows = field
        .iter()
        .map(|r| vec![r.x.to_string(), r.y.to_string(), r.ux.to_string(), r.uy.to_string()]);
    write_atomic(path, &csv_bytes(&FIELD_HEADER, rows)?)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// 64-bit FNV-1a digest of a file's bytes, as 16 hex digits. Used to notice
/// that a recorded input has changed, not as a security measure.
pub fn fingerprint(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", crate::data::fnv1a(&bytes)))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a headed numeric CSV whose header must equal `header`.
/// Errors carry the 1-based line number of the offending row.
pub fn parse_numeric_csv(path: &Path, text: &str, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_owned(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut saw_header = false;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if !saw_header {
            let got: Vec<&str> = rec.iter().map(str::trim).collect();
            if got != header {
                return Err(parse_err(line, format!("expected header {}, got {}", header.join(","), got.join(","))));
            }
            saw_header = true;
            continue;
        }
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let row = rec
            .iter()
            .map(|f| {
                let v: f64 = f.trim().parse().map_err(|_| parse_err(line, format!("not a number: {f:?}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("non-finite value {f:?}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if !saw_header {
        return Err(parse_err(1, format!("missing header {}", header.join(","))));
    }
    Ok(rows)
}

/// Reads an `x0,x1` point file.
pub fn read_points(path: &Path) -> Result<Tensor2> {
    let rows = parse_numeric_csv(path, &read_to_string(path)?, &POINTS_HEADER)?;
    let n = rows.len();
    Tensor2::from_vec(n, 2, rows.into_iter().flatten().collect())
}
