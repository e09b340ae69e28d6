//! Line-delimited JSON persistence.
//!
//! Every record occupies exactly one line terminated by `\n`. A file whose
//! last line has no terminator is treated as a torn write and rejected.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Trajectory;

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct TrajectoryRecordRef<'a> {
    schema_version: u32,
    #[serde(flatten)]
    trajectory: &'a Trajectory,
}

#[derive(Deserialize)]
struct TrajectoryRecord {
    schema_version: u32,
    #[serde(flatten)]
    trajectory: Trajectory,
}

fn encode_trajectory(t: &Trajectory) -> Result<String> {
    serde_json::to_string(&TrajectoryRecordRef {
        schema_version: TRAJECTORY_SCHEMA_VERSION,
        trajectory: t,
    })
    .map_err(|e| Error::invalid(format!("cannot encode trajectory {}: {e}", t.id)))
}

pub fn save_trajectories(trajectories: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let lines = trajectories
        .iter()
        .map(encode_trajectory)
        .collect::<Result<Vec<_>>>()?;
    write_lines_atomic(path.as_ref(), &lines)
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let records: Vec<TrajectoryRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.schema_version != TRAJECTORY_SCHEMA_VERSION {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("unsupported schema_version {}", r.schema_version),
                });
            }
            r.trajectory.validate().map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(r.trajectory)
        })
        .collect()
}

/// Writes one JSON record per line, replacing the file atomically.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let lines = items
        .iter()
        .map(|item| {
            serde_json::to_string(item).map_err(|e| {
                Error::invalid(format!("{}: cannot encode record: {e}", path.display()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_lines_atomic(path, &lines)
}

pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| {
            Error::invalid(format!("{}: cannot encode record: {e}", path.display()))
        })?;
        buf.push_str(&line);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Reads every record, failing on the first malformed line. No partial
/// result is ever returned.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(path, &content)
}

fn parse_jsonl<T: DeserializeOwned>(path: &Path, content: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut rest = content;
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let (line, terminated) = match rest.find('\n') {
            Some(end) => {
                let line = &rest[..end];
                rest = &rest[end + 1..];
                (line, true)
            }
            None => {
                let line = rest;
                rest = "";
                (line, false)
            }
        };
        let corrupt = |message: String| Error::Corrupt {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if !terminated {
            return Err(corrupt("truncated record (missing line terminator)".into()));
        }
        if line.trim().is_empty() {
            return Err(corrupt("blank line".into()));
        }
        let record = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

fn write_lines_atomic(path: &Path, lines: &[String]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for line in lines {
            w.write_all(line.as_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Atomically replaces `path` with `contents`.
pub fn write_atomic(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    let tmp = tmp_path(path);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Single-writer queue: any number of producers send trajectories, one
/// background thread appends them to the file in arrival order.
pub struct TrajectoryWriter {
    tx: Option<mpsc::Sender<Trajectory>>,
    handle: Option<JoinHandle<Result<usize>>>,
}

impl TrajectoryWriter {
    pub fn spawn(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let (tx, rx) = mpsc::channel::<Trajectory>();
        let handle = std::thread::spawn(move || {
            let mut w = BufWriter::new(file);
            let mut count = 0;
            for t in rx {
                let line = encode_trajectory(&t)?;
                w.write_all(line.as_bytes())
                    .map_err(|e| Error::io(&path, e))?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
                count += 1;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(count)
        });
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    pub fn sender(&self) -> mpsc::Sender<Trajectory> {
        self.tx.clone().expect("writer not finished")
    }

    /// Closes the queue and waits for the writer; returns records written.
    pub fn finish(mut self) -> Result<usize> {
        self.tx.take();
        let handle = self.handle.take().expect("writer not finished");
        handle
            .join()
            .map_err(|_| Error::invalid("trajectory writer thread panicked"))?
    }
}

impl Drop for TrajectoryWriter {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
