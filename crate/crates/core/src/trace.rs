//! On-disk formats: trace CSVs and flat binary tensor dumps.
//!
//! Binary dumps start with one ASCII line `shape d0 d1 ...\n` followed by the
//! elements as little-endian `f32` in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::CacheTraceRow;
use crate::numerics::Tensor;
use crate::selector::RouteRecord;

pub const CACHE_TRACE_FILE: &str = "cache_trace.csv";
pub const SELECTION_TRACE_FILE: &str = "selection_trace.csv";

/// Selection trace row; list columns are `;`-joined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SelectionRow {
    block: usize,
    step: usize,
    scored: u8,
    candidates: String,
    scores: String,
    selected: String,
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn split<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|p| p.parse().map_err(|_| format!("bad {what} entry {p:?}")))
        .collect()
}

impl From<&RouteRecord> for SelectionRow {
    fn from(r: &RouteRecord) -> Self {
        Self {
            block: r.block,
            step: r.step,
            scored: r.scored as u8,
            candidates: join(&r.candidates),
            scores: join(&r.scores),
            selected: join(&r.selected),
        }
    }
}

impl SelectionRow {
    fn into_record(self) -> std::result::Result<RouteRecord, String> {
        Ok(RouteRecord {
            block: self.block,
            step: self.step,
            scored: self.scored != 0,
            candidates: split(&self.candidates, "candidate")?,
            scores: split(&self.scores, "score")?,
            selected: split(&self.selected, "selected")?,
        })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.display().to_string(),
            message: format!("{other:?}"),
        },
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "trace file is missing"),
        ));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_cache_trace(path: &Path, rows: &[CacheTraceRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_cache_trace(path: &Path) -> Result<Vec<CacheTraceRow>> {
    read_rows(path)
}

pub fn write_selection_trace(path: &Path, records: &[RouteRecord]) -> Result<()> {
    write_rows(path, records.iter().map(SelectionRow::from))
}

pub fn read_selection_trace(path: &Path) -> Result<Vec<RouteRecord>> {
    read_rows::<SelectionRow>(path)?
        .into_iter()
        .map(|r| {
            r.into_record().map_err(|message| Error::Parse {
                path: path.display().to_string(),
                message,
            })
        })
        .collect()
}

/// Streaming writer for a dump whose leading dimension grows as data
/// arrives. The header is padded so it can be rewritten in place.
pub struct DumpWriter {
    file: BufWriter<File>,
    path: std::path::PathBuf,
    tail: Vec<usize>,
    rows: usize,
}

const HEADER_WIDTH: usize = 64;

fn header(shape: &[usize]) -> Result<Vec<u8>> {
    let text = format!(
        "shape {}",
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    );
    if text.len() >= HEADER_WIDTH {
        return Err(Error::invalid(format!("shape header {text:?} is too long")));
    }
    let mut bytes = format!("{text:<width$}", width = HEADER_WIDTH - 1).into_bytes();
    bytes.push(b'\n');
    Ok(bytes)
}

impl DumpWriter {
    /// `tail` is the shape of one row (everything after the leading axis).
    pub fn create(path: &Path, tail: &[usize]) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            file: BufWriter::new(f),
            path: path.to_path_buf(),
            tail: tail.to_vec(),
            rows: 0,
        };
        let h = header(&w.shape())?;
        w.file.write_all(&h).map_err(|e| Error::io(path, e))?;
        Ok(w)
    }

    fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.rows];
        s.extend(&self.tail);
        s
    }

    /// Appends a tensor of shape `[k, tail...]` or `tail`.
    pub fn append(&mut self, t: &Tensor) -> Result<()> {
        let rows = if t.shape() == self.tail.as_slice() {
            1
        } else if t.shape().len() == self.tail.len() + 1 && t.shape()[1..] == self.tail[..] {
            t.dim(0)
        } else {
            return Err(Error::invalid(format!(
                "dump {}: tensor {:?} does not match row shape {:?}",
                self.path.display(),
                t.shape(),
                self.tail
            )));
        };
        for v in t.data() {
            self.file
                .write_all(&(*v as f32).to_le_bytes())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.rows += rows;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        use std::io::{Seek, SeekFrom};
        let h = header(&self.shape())?;
        let io = |e| Error::io(&self.path, e);
        self.file.flush().map_err(io)?;
        let f = self.file.get_mut();
        f.seek(SeekFrom::Start(0)).map_err(io)?;
        f.write_all(&h).map_err(io)?;
        f.flush().map_err(io)
    }
}

/// Writes one tensor as a dump.
pub fn write_dump(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = DumpWriter::create(path, &t.shape()[1..])?;
    w.append(t)?;
    w.finish()
}

/// Reads a dump back (values widened to `f64`).
pub fn read_dump(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Parse {
        path: path.display().to_string(),
        message: m,
    };
    let mut parts = line.split_whitespace();
    if parts.next() != Some("shape") {
        return Err(bad(format!("missing shape header, got {line:?}")));
    }
    let shape: Vec<usize> = parts
        .map(|p| p.parse().map_err(|_| bad(format!("bad dimension {p:?}"))))
        .collect::<Result<_>>()?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(bad(format!("{} payload bytes for shape {shape:?}", bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}
