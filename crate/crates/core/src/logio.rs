//! Run artifacts: JSON Lines sensor logs, CSV tables, and the
//! per-run manifest that makes reproducibility checkable from checksums
//! alone.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RallyError, Result};
use crate::track::{GpsFix, ImuSample, SensorStreams, TruthSample, WheelSample};

/// One JSONL record: a timestamped reading from a named stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub stream: String,
    pub t: f64,
    pub values: Vec<f64>,
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> RallyError {
    RallyError::Input(format!("{what} {}: {e}", path.display()))
}

/// Writes sensor streams merged by timestamp (ties broken by stream
/// name) so the log reads chronologically.
pub fn write_sensor_jsonl(path: &Path, streams: &SensorStreams) -> Result<()> {
    let mut records = Vec::new();
    for g in &streams.gps {
        records.push(StreamRecord {
            stream: "gps".into(),
            t: g.t,
            values: vec![g.x, g.y, g.z],
        });
    }
    for s in &streams.imu {
        let mut values = s.gyro.to_vec();
        values.extend_from_slice(&s.accel);
        records.push(StreamRecord {
            stream: "imu".into(),
            t: s.t,
            values,
        });
    }
    for w in &streams.wheel {
        records.push(StreamRecord {
            stream: "wheel".into(),
            t: w.t,
            values: vec![w.omega_f, w.omega_r],
        });
    }
    records.sort_by(|a, b| {
        a.t.partial_cmp(&b.t)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.stream.cmp(&b.stream))
    });
    write_jsonl(path, &records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err("cannot create", path, e))?,
    );
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| RallyError::Input(format!("serialization failed: {e}")))?;
        writeln!(out, "{line}").map_err(|e| io_err("cannot write", path, e))?;
    }
    out.flush().map_err(|e| io_err("cannot write", path, e))?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| io_err("cannot open", path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err("cannot read", path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            RallyError::Input(format!("{}:{}: bad record: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Splits a JSONL sensor log back into typed streams; unknown stream
/// names are an error.
pub fn read_sensor_jsonl(path: &Path) -> Result<SensorStreams> {
    let records: Vec<StreamRecord> = read_jsonl(path)?;
    let mut streams = SensorStreams::default();
    for r in records {
        match (r.stream.as_str(), r.values.as_slice()) {
            ("gps", [x, y, z]) => streams.gps.push(GpsFix {
                t: r.t,
                x: *x,
                y: *y,
                z: *z,
            }),
            ("imu", [gx, gy, gz, ax, ay, az]) => streams.imu.push(ImuSample {
                t: r.t,
                gyro: [*gx, *gy, *gz],
                accel: [*ax, *ay, *az],
            }),
            ("wheel", [f, r_]) => streams.wheel.push(WheelSample {
                t: r.t,
                omega_f: *f,
                omega_r: *r_,
            }),
            (name, values) => {
                return Err(RallyError::Input(format!(
                    "unrecognized record: stream \"{name}\" with {} values",
                    values.len()
                )))
            }
        }
    }
    Ok(streams)
}

/// Writes a CSV table from a header and float rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| RallyError::Input(format!("cannot create {}: {e}", path.display())))?;
    w.write_record(header)
        .map_err(|e| RallyError::Input(format!("csv write failed: {e}")))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(RallyError::Input(format!(
                "csv row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        let fields: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        w.write_record(&fields)
            .map_err(|e| RallyError::Input(format!("csv write failed: {e}")))?;
    }
    w.flush().map_err(|e| io_err("cannot write", path, e))?;
    Ok(())
}

/// Reads a float CSV produced by `write_csv`; returns header and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| RallyError::Input(format!("cannot open {}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| RallyError::Input(format!("csv read failed: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| RallyError::Input(format!("csv read failed: {e}")))?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| RallyError::Input(format!("bad number \"{f}\": {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Truth trajectory as a plot-ready CSV.
pub fn write_truth_csv(path: &Path, truth: &[TruthSample]) -> Result<()> {
    let rows: Vec<Vec<f64>> = truth
        .iter()
        .map(|s| {
            vec![
                s.t, s.state.p_x, s.state.p_y, s.state.psi, s.state.v_x, s.state.v_y, s.state.r,
                s.state.omega_f, s.state.omega_r, s.a_x, s.a_y,
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "t", "p_x", "p_y", "psi", "v_x", "v_y", "r", "omega_f", "omega_r", "a_x", "a_y",
        ],
        &rows,
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err("cannot read", path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Reproducibility record written by every CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the resolved config document.
    pub config_sha256: String,
    pub seed: u64,
    /// Artifact version (crate version at build time).
    pub version: String,
    pub subcommand: String,
    /// File name -> SHA-256, sorted for stable serialization.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config_text: &str, seed: u64) -> Self {
        Self {
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            outputs: BTreeMap::new(),
        }
    }

    /// Checksums the named file (relative to `dir`) into the manifest.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<()> {
        let digest = sha256_file(&dir.join(name))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| RallyError::Input(format!("manifest serialization failed: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| io_err("cannot write", &path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text =
            std::fs::read_to_string(&path).map_err(|e| io_err("cannot read", &path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| RallyError::Input(format!("{}: bad manifest: {e}", path.display())))
    }
}
