//! File formats: JSON for configs and solutions, CSV for tables, and a
//! little-endian binary layout for power maps.
//!
//! Binary map layout: `b"BRSP"`, `u32` version, `u32` rows, `u32` cols,
//! `f64` noise floor, then `rows·cols` `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::simulate::{BeamCodebook, BrsrpMap};
use crate::toa::PathEstimate;

pub const BRSRP_MAGIC: &[u8; 4] = b"BRSP";
pub const BRSRP_VERSION: u32 = 1;

fn file_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(file_error(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(file_error(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(file_error(path))?))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(file_error(path))?;
    w.flush().map_err(file_error(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn encode_brsrp(map: &BrsrpMap) -> Vec<u8> {
    let (rows, cols) = map.values.shape();
    let mut out = Vec::with_capacity(24 + 8 * rows * cols);
    out.extend_from_slice(BRSRP_MAGIC);
    out.extend_from_slice(&BRSRP_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&map.noise_floor.to_le_bytes());
    for i in 0..rows {
        for j in 0..cols {
            out.extend_from_slice(&map.values[(i, j)].to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_brsrp`]; the codebook is not stored and must match
/// the map shape.
pub fn decode_brsrp(bytes: &[u8], codebook: BeamCodebook) -> Result<BrsrpMap> {
    let bad = |m: &str| Error::Format(format!("binary power map: {m}"));
    if bytes.len() < 24 || &bytes[..4] != BRSRP_MAGIC {
        return Err(bad("missing BRSP header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != BRSRP_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (rows, cols) = (u32_at(8) as usize, u32_at(12) as usize);
    if bytes.len() != 24 + 8 * rows * cols {
        return Err(bad(&format!("{} bytes for a {rows}×{cols} map", bytes.len())));
    }
    let floor = f64_at(16);
    let values = DMatrix::from_fn(rows, cols, |i, j| f64_at(24 + 8 * (i * cols + j)));
    BrsrpMap::new(values, codebook, floor)
}

pub fn write_brsrp(path: &Path, map: &BrsrpMap) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode_brsrp(map)).map_err(file_error(path))?;
    w.flush().map_err(file_error(path))
}

pub fn read_brsrp(path: &Path, codebook: BeamCodebook) -> Result<BrsrpMap> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(file_error(path))?;
    decode_brsrp(&bytes, codebook).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Matrix as headerless CSV, one row per line.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(file_error(path))
}

/// One channel estimate in the flat table written by the estimate stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub position: usize,
    pub method: String,
    pub power_ratio: f64,
    pub threshold_scale: f64,
    pub aod_deg: f64,
    pub aoa_deg: f64,
    pub power: f64,
    pub tx_index: usize,
    pub rx_index: usize,
    pub toa_ns: f64,
    pub range_m: f64,
}

impl EstimateRow {
    pub fn new(position: usize, method: &str, power_ratio: f64, threshold_scale: f64, e: &PathEstimate) -> Self {
        Self {
            position,
            method: method.to_string(),
            power_ratio,
            threshold_scale,
            aod_deg: e.aod.to_degrees(),
            aoa_deg: e.aoa.to_degrees(),
            power: e.power,
            tx_index: e.tx_index,
            rx_index: e.rx_index,
            toa_ns: e.toa * 1e9,
            range_m: e.range(),
        }
    }
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(file_error(path))
}

pub fn read_csv_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Flat per-position view of an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub position: usize,
    pub position_error_m: Option<f64>,
    pub heading_error_deg: Option<f64>,
    pub bias_error_m: Option<f64>,
    pub gospa_deg: Option<f64>,
    pub false_detections: Option<usize>,
    pub missed_detections: Option<usize>,
    pub slfd_count: Option<usize>,
    pub runtime_s: f64,
}

pub fn report_rows(report: &EvalReport) -> Vec<ReportRow> {
    report
        .positions
        .iter()
        .map(|p| ReportRow {
            position: p.index,
            position_error_m: p.position_error,
            heading_error_deg: p.heading_error_deg,
            bias_error_m: p.bias_error,
            gospa_deg: p.gospa.as_ref().map(|g| g.value),
            false_detections: p.gospa.as_ref().map(|g| g.false_detections),
            missed_detections: p.gospa.as_ref().map(|g| g.missed_detections),
            slfd_count: p.slfd.as_ref().map(|s| s.count),
            runtime_s: p.runtime_s,
        })
        .collect()
}

/// `statistic, position, heading, bias, time` with RMSE and STD rows; the
/// time column holds the mean runtime and is left empty on the STD row.
pub fn write_summary_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["statistic", "position", "heading", "bias", "time"])?;
    let t = &report.trajectory;
    let time = report.mean_runtime_s.to_string();
    w.write_record(["rmse", &t.position.rmse.to_string(), &t.heading.rmse.to_string(), &t.bias.rmse.to_string(), &time])?;
    w.write_record(["std", &t.position.std.to_string(), &t.heading.std.to_string(), &t.bias.std.to_string(), ""])?;
    w.flush().map_err(file_error(path))
}
