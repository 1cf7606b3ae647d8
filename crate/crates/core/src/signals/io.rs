use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{Dataset, NormStats, Trajectory, TrajectoryMeta};

const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryEntry {
    file: String,
    dt: f64,
    t0: f64,
    samples: usize,
    state_dim: usize,
    input_dim: usize,
    meta: TrajectoryMeta,
}

fn header(dx: usize, du: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=dx).map(|i| format!("x{i}")))
        .chain((1..=du).map(|i| format!("u{i}")))
        .collect()
}

/// Writes `t,x1..,u1..` with round-trip-exact decimal values.
pub fn write_trajectory_csv(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header(traj.state_dim(), traj.input_dim()))
        .map_err(|e| csv_error(path, e))?;
    let mut record = Vec::with_capacity(1 + traj.state_dim() + traj.input_dim());
    for k in 0..traj.len() {
        record.clear();
        record.push(traj.time(k).to_string());
        record.extend(traj.states.row(k).iter().map(f64::to_string));
        record.extend(traj.inputs.row(k).iter().map(f64::to_string));
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

struct RawCsv {
    times: Vec<f64>,
    states: DMatrix<f64>,
    inputs: DMatrix<f64>,
}

fn parse_csv(path: &Path) -> Result<RawCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let head = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = head.iter().map(str::trim).collect();
    if names.first() != Some(&"t") {
        return Err(Error::format(path, "first column must be `t`"));
    }
    let dx = names.iter().filter(|n| n.starts_with('x')).count();
    let du = names.iter().filter(|n| n.starts_with('u')).count();
    let expected = header(dx, du);
    if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::format(
            path,
            format!("header {names:?} does not match expected {expected:?}"),
        ));
    }
    let width = 1 + dx + du;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        // Data rows are numbered from 1, after the header.
        let row = row + 1;
        if record.len() != width {
            return Err(Error::format(
                path,
                format!("row {row} has {} columns, expected {width}", record.len()),
            ));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {row} column {col}: `{field}` is not a number")))?;
            if col == 0 {
                times.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = times.len();
    let at = |k: usize, j: usize| values[k * (dx + du) + j];
    Ok(RawCsv {
        times,
        states: DMatrix::from_fn(n, dx, |k, j| at(k, j)),
        inputs: DMatrix::from_fn(n, du, |k, j| at(k, dx + j)),
    })
}

/// Reads a standalone trajectory CSV; `dt` is inferred from the time column.
pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let raw = parse_csv(path)?;
    let n = raw.times.len();
    if n < 2 {
        return Err(Error::format(path, format!("trajectory has {n} samples, need at least 2")));
    }
    let dt = (raw.times[n - 1] - raw.times[0]) / (n - 1) as f64;
    Trajectory::new(dt, raw.times[0], raw.states, raw.inputs).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `manifest.json` plus one CSV per trajectory into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        let file = format!("traj_{i:03}.csv");
        write_trajectory_csv(traj, dir.join(&file))?;
        entries.push(TrajectoryEntry {
            file,
            dt: traj.dt,
            t0: traj.t0,
            samples: traj.len(),
            state_dim: traj.state_dim(),
            input_dim: traj.input_dim(),
            meta: traj.meta.clone(),
        });
    }
    let mut manifest = dataset.manifest.clone();
    manifest.insert("norm".into(), serde_json::to_value(&dataset.norm).expect("norm serializes"));
    manifest.insert("trajectories".into(), serde_json::to_value(&entries).expect("entries serialize"));
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::format(&path, "dataset manifest not found"));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut manifest: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let entries: Vec<TrajectoryEntry> = match manifest.remove("trajectories") {
        Some(v) => serde_json::from_value(v).map_err(|e| Error::format(&path, format!("trajectories: {e}")))?,
        None => return Err(Error::format(&path, "manifest has no `trajectories` list")),
    };
    let norm: Option<NormStats> = match manifest.remove("norm") {
        Some(v) => serde_json::from_value(v).map_err(|e| Error::format(&path, format!("norm: {e}")))?,
        None => None,
    };
    let mut trajectories = Vec::with_capacity(entries.len());
    for entry in entries {
        let csv_path = dir.join(&entry.file);
        let raw = parse_csv(&csv_path)?;
        if raw.times.len() != entry.samples || raw.states.ncols() != entry.state_dim || raw.inputs.ncols() != entry.input_dim {
            return Err(Error::format(
                &csv_path,
                format!(
                    "file has {} samples with d_x={}, d_u={}; manifest says {} samples with d_x={}, d_u={}",
                    raw.times.len(),
                    raw.states.ncols(),
                    raw.inputs.ncols(),
                    entry.samples,
                    entry.state_dim,
                    entry.input_dim
                ),
            ));
        }
        let mut traj =
            Trajectory::new(entry.dt, entry.t0, raw.states, raw.inputs).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        traj.meta = entry.meta;
        trajectories.push(traj);
    }
    let mut dataset = Dataset::new(trajectories).map_err(|e| Error::format(&path, e.to_string()))?;
    dataset.norm = norm;
    dataset.manifest = manifest;
    Ok(dataset)
}
