//! Per-iteration training telemetry as CSV.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const TELEMETRY_HEADER: [&str; 14] = [
    "iteration",
    "env_steps",
    "mean_reward",
    "success_count",
    "collision_count",
    "oob_count",
    "timeout_count",
    "mean_episode_len",
    "policy_loss",
    "value_loss",
    "entropy",
    "mean_kl",
    "beta",
    "clip_fraction",
];

/// One training iteration. `mean_reward` is the mean scaled per-step
/// reward over the rollout; `mean_episode_len` is empty when no episode
/// ended during the iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub iteration: u64,
    pub env_steps: u64,
    pub mean_reward: f64,
    pub success_count: u64,
    pub collision_count: u64,
    pub oob_count: u64,
    pub timeout_count: u64,
    pub mean_episode_len: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_kl: f64,
    pub beta: f64,
    pub clip_fraction: f64,
}

pub struct TelemetryWriter {
    inner: csv::Writer<File>,
}

impl TelemetryWriter {
    /// Creates `path` with a header line, replacing any previous file.
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        inner.write_record(TELEMETRY_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    /// Reopens `path` for a resumed run, dropping rows at or beyond
    /// `iteration` so the file matches an uninterrupted run.
    pub fn resume(path: &Path, iteration: u64) -> io::Result<Self> {
        let kept: Vec<TelemetryRow> = read_telemetry(File::open(path)?)?
            .into_iter()
            .filter(|r| r.iteration < iteration)
            .collect();
        let mut w = Self::create(path)?;
        for row in &kept {
            w.append(row)?;
        }
        drop(w);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    pub fn append(&mut self, row: &TelemetryRow) -> io::Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()
    }
}

/// Parses telemetry, checking the header. Errors name the offending row.
pub fn read_telemetry<R: Read>(reader: R) -> io::Result<Vec<TelemetryRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(reader));
    let header = rdr.headers().map_err(invalid)?.clone();
    if header.iter().ne(TELEMETRY_HEADER.iter().copied()) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unexpected telemetry header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("telemetry row {}: {e}", i + 1))
            })
        })
        .collect()
}

fn invalid(e: csv::Error) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64) -> TelemetryRow {
        TelemetryRow {
            iteration: i,
            env_steps: 2048 * (i + 1),
            mean_reward: 0.1 * i as f64 + 1e-17,
            success_count: i,
            collision_count: 1,
            oob_count: 0,
            timeout_count: 0,
            mean_episode_len: if i == 0 { None } else { Some(55.5) },
            policy_loss: -0.01,
            value_loss: 0.3,
            entropy: 2.8,
            mean_kl: 0.004,
            beta: 1.0,
            clip_fraction: 0.1,
        }
    }

    #[test]
    fn write_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut w = TelemetryWriter::create(&path).unwrap();
        let rows: Vec<_> = (0..4).map(row).collect();
        for r in &rows {
            w.append(r).unwrap();
        }
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&TELEMETRY_HEADER.join(",")));
        assert_eq!(read_telemetry(text.as_bytes()).unwrap(), rows);
    }

    #[test]
    fn resume_truncates_later_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut w = TelemetryWriter::create(&path).unwrap();
        for i in 0..5 {
            w.append(&row(i)).unwrap();
        }
        drop(w);
        let mut w = TelemetryWriter::resume(&path, 3).unwrap();
        w.append(&row(3)).unwrap();
        drop(w);
        let back = read_telemetry(File::open(&path).unwrap()).unwrap();
        assert_eq!(back, (0..4).map(row).collect::<Vec<_>>());
    }

    #[test]
    fn bad_row_is_named() {
        let text = format!("{}\n1,2,x,0,0,0,0,,0,0,0,0,1,0\n", TELEMETRY_HEADER.join(","));
        let err = read_telemetry(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }
}
