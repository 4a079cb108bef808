use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{Episode, HiddenFactors};
use crate::error::{Error, Result};

fn write_lines<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| Error::contract(format!("serialising {}: {e}", path.display())))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    parse_lines(&buf)
}

/// Parses newline-delimited JSON; errors carry the 1-based line and the
/// byte offset of the failure within the whole input.
pub(crate) fn parse_lines<T: DeserializeOwned>(buf: &[u8]) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (n, line) in buf.split_inclusive(|b| *b == b'\n').enumerate() {
        let body = line.strip_suffix(b"\n").unwrap_or(line);
        if !body.iter().all(u8::is_ascii_whitespace) {
            match serde_json::from_slice::<T>(body) {
                Ok(v) => out.push(v),
                Err(e) => {
                    let col = column_to_offset(body, e.line(), e.column());
                    return Err(Error::Parse {
                        line: n + 1,
                        offset: offset + col,
                        message: e.to_string(),
                    });
                }
            }
        }
        offset += line.len();
    }
    Ok(out)
}

fn column_to_offset(body: &[u8], line: usize, column: usize) -> usize {
    // serde_json reports 1-based line/column inside the slice
    let mut pos = 0;
    for _ in 1..line.max(1) {
        match body[pos..].iter().position(|b| *b == b'\n') {
            Some(p) => pos += p + 1,
            None => break,
        }
    }
    (pos + column.saturating_sub(1)).min(body.len())
}

/// Writes the model-visible cohort, one episode per line.
pub fn write_cohort(episodes: &[Episode], path: impl AsRef<Path>) -> Result<()> {
    write_lines(episodes, path.as_ref())
}

pub fn read_cohort(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let episodes: Vec<Episode> = read_lines(path.as_ref())?;
    for e in &episodes {
        e.validate()?;
    }
    Ok(episodes)
}

/// Writes the generator-only sidecar keyed by `patient_id`.
pub fn write_oracle(hidden: &[HiddenFactors], path: impl AsRef<Path>) -> Result<()> {
    write_lines(hidden, path.as_ref())
}

pub fn read_oracle(path: impl AsRef<Path>) -> Result<Vec<HiddenFactors>> {
    read_lines(path.as_ref())
}

/// Number of non-empty lines, used by tests and the CLI summary.
pub fn count_records(path: impl AsRef<Path>) -> Result<usize> {
    let r = BufReader::new(File::open(path)?);
    let mut n = 0;
    for line in r.lines() {
        if !line?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}
