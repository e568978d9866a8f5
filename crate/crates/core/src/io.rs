//! Point, flow and checkpoint files.
//!
//! Text point files hold one `x y z` row per line. Binary point files start
//! with the magic `PPWC`, a `u32` version and a `u64` row count, followed by
//! little-endian `f64` triples.
//!
//! Checkpoints are little-endian:
//!
//! ```text
//! magic    8 bytes  "PPWCCKPT"
//! version  u32      1
//! step     u64      optimiser steps taken
//! count    u32      number of tensors
//! count x {
//!     name_len u32, name (utf-8)
//!     ndim     u32, dims (u64 each)
//!     data     f64 x prod(dims)
//! }
//! ```
//!
//! Tensors are the network parameters in layout order, followed by the
//! optimiser moments `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::harness::Adam;

pub const POINTS_MAGIC: &[u8; 4] = b"PPWC";
pub const POINTS_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PPWCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads rows of three floats, detecting the binary variant by its magic.
pub fn read_rows(path: &Path) -> Result<Vec<[f64; 3]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(POINTS_MAGIC) {
        return parse_binary(path, &bytes);
    }
    let text = std::str::from_utf8(&bytes).map_err(|_| format_err(path, "not utf-8 text"))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 3 {
            return Err(format_err(
                path,
                format!("line {}: expected 3 values, got {}", i + 1, vals.len()),
            ));
        }
        let mut row = [0.0; 3];
        for (r, v) in row.iter_mut().zip(&vals) {
            *r = v
                .parse()
                .map_err(|_| format_err(path, format!("line {}: bad number {v:?}", i + 1)))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<Vec<[f64; 3]>> {
    let mut r = bytes;
    r = &r[4..];
    let version = take_u32(&mut r).ok_or_else(|| format_err(path, "truncated header"))?;
    if version != POINTS_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = take_u64(&mut r).ok_or_else(|| format_err(path, "truncated header"))? as usize;
    if r.len() != count.saturating_mul(24) {
        return Err(format_err(
            path,
            format!("expected {count} rows, payload has {} bytes", r.len()),
        ));
    }
    Ok(r.chunks_exact(24)
        .map(|c| [0, 1, 2].map(|k| f64::from_le_bytes(c[k * 8..k * 8 + 8].try_into().unwrap())))
        .collect())
}

fn take_u32(r: &mut &[u8]) -> Option<u32> {
    let (head, rest) = r.split_first_chunk::<4>()?;
    *r = rest;
    Some(u32::from_le_bytes(*head))
}

fn take_u64(r: &mut &[u8]) -> Option<u64> {
    let (head, rest) = r.split_first_chunk::<8>()?;
    *r = rest;
    Some(u64::from_le_bytes(*head))
}

/// Writes text, or binary when the extension is `.bin`. Text uses the
/// shortest round-trip decimal form, so read-back is exact.
pub fn write_rows(path: &Path, rows: &[[f64; 3]]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let binary = path.extension().is_some_and(|e| e == "bin");
    let res = (|| -> std::io::Result<()> {
        if binary {
            w.write_all(POINTS_MAGIC)?;
            w.write_all(&POINTS_VERSION.to_le_bytes())?;
            w.write_all(&(rows.len() as u64).to_le_bytes())?;
            for r in rows {
                for v in r {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        } else {
            for r in rows {
                writeln!(w, "{:?} {:?} {:?}", r[0], r[1], r[2])?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Named tensors plus step counter as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_state(params: &ParamSet, adam: Option<&Adam>, step: u64) -> Self {
        let mut tensors: Vec<(String, Tensor)> = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some(adam) = adam {
            for (prefix, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
                for ((name, _), m) in params.iter().zip(moments) {
                    tensors.push((format!("{prefix}{name}"), m.clone()));
                }
            }
        }
        Self { step, tensors }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| format_err(path, d);
        let mut r = bytes;
        let magic = r
            .split_first_chunk::<8>()
            .ok_or_else(|| bad("truncated header"))?;
        if magic.0 != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        r = magic.1;
        let version = take_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let step = take_u64(&mut r).ok_or_else(|| bad("truncated header"))?;
        let count = take_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = take_u32(&mut r).ok_or_else(|| bad("truncated tensor name"))? as usize;
            if r.len() < len {
                return Err(bad("truncated tensor name"));
            }
            let name = std::str::from_utf8(&r[..len])
                .map_err(|_| bad("tensor name is not utf-8"))?
                .to_string();
            r = &r[len..];
            let ndim = take_u32(&mut r).ok_or_else(|| bad("truncated shape"))?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                shape.push(take_u64(&mut r).ok_or_else(|| bad("truncated shape"))? as usize);
            }
            let n: usize = shape.iter().product();
            if r.len() < n * 8 {
                return Err(format_err(
                    path,
                    format!("truncated data for tensor {name}"),
                ));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[n * 8..];
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self { step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }

    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies parameters (and optimiser moments when `adam` is given) into
    /// the layout, failing on the first missing, mis-shaped or unexpected
    /// tensor.
    pub fn restore(&self, params: &mut ParamSet, adam: Option<&mut Adam>) -> Result<()> {
        let mismatch = |name: &str, detail: String| Error::CheckpointMismatch {
            name: name.to_string(),
            detail,
        };
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let has_moments =
            adam.is_some() && self.tensors.iter().any(|(n, _)| n.starts_with("adam."));
        let mut expected: Vec<(String, Vec<usize>)> = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        if has_moments {
            for prefix in ["adam.m.", "adam.v."] {
                expected.extend(
                    params
                        .iter()
                        .map(|(n, t)| (format!("{prefix}{n}"), t.shape().to_vec())),
                );
            }
        }
        for (name, want) in &expected {
            match self.lookup(name) {
                None => return Err(mismatch(name, "missing from checkpoint".into())),
                Some(t) if t.shape() != want.as_slice() => {
                    return Err(mismatch(
                        name,
                        format!("shape {:?} in checkpoint, {:?} expected", t.shape(), want),
                    ));
                }
                Some(_) => {}
            }
        }
        for (name, _) in &self.tensors {
            // Optimiser moments are skipped, not rejected, when only weights are wanted.
            let skipped = !has_moments && name.starts_with("adam.");
            if !skipped && !expected.iter().any(|(n, _)| n == name) {
                return Err(mismatch(name, "not part of the configured network".into()));
            }
        }
        let ids: Vec<_> = params.ids().collect();
        for (id, name) in ids.iter().zip(&names) {
            *params.get_mut(*id) = self.lookup(name).unwrap().clone();
        }
        if let (true, Some(adam)) = (has_moments, adam) {
            for (i, name) in names.iter().enumerate() {
                adam.m[i] = self.lookup(&format!("adam.m.{name}")).unwrap().clone();
                adam.v[i] = self.lookup(&format!("adam.v.{name}")).unwrap().clone();
            }
            adam.t = self.step;
        }
        Ok(())
    }
}

/// Appends records to a CSV loss log, writing the header for new files.
pub fn append_log(path: &Path, rows: &[String]) -> Result<()> {
    let new = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if new {
        text.push_str(crate::harness::LOG_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Drops log rows with a step above `step`, so a resumed run continues the
/// numbering without duplicates.
pub fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(s) => s <= step,
            None => true,
        };
        if keep {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
