//! Parameter checkpoint file.
//!
//! ```text
//! VEPE-CKPT-1\n
//! <count>\n
//! <name> <rank> <dim_1> ... <dim_rank>\n      (count lines)
//! <payload: every tensor as little-endian f64, manifest order>
//! ```

use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::Tensor;

pub const HEADER: &str = "VEPE-CKPT-1";

/// Upper bound on total stored values; keeps hostile manifests from forcing huge allocations.
const MAX_VALUES: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_err(offset: usize, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Parse { offset, reason: reason.into() }
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = format!("{HEADER}\n{}\n", store.len());
    for id in store.ids() {
        let shape = store.value(id).shape();
        out.push_str(store.name(id));
        out.push_str(&format!(" {}", shape.len()));
        for d in shape {
            out.push_str(&format!(" {d}"));
        }
        out.push('\n');
    }
    let mut bytes = out.into_bytes();
    for id in store.ids() {
        for v in store.value(id).data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<(usize, &'a str), CheckpointError> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| parse_err(start, "unterminated line"))?;
        self.pos = start + end + 1;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| parse_err(start, "manifest is not UTF-8"))?;
        Ok((start, text))
    }
}

fn number(offset: usize, token: Option<&str>, what: &str) -> Result<usize, CheckpointError> {
    let t = token.ok_or_else(|| parse_err(offset, format!("missing {what}")))?;
    t.parse().map_err(|_| parse_err(offset, format!("bad {what} {t:?}")))
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let (_, header) = cur.line().map_err(|_| parse_err(0, format!("expected header {HEADER:?}")))?;
    if header != HEADER {
        return Err(parse_err(0, format!("expected header {HEADER:?}")));
    }
    let (off, count_line) = cur.line()?;
    let count = number(off, Some(count_line.trim()), "tensor count")?;
    let mut manifest = Vec::new();
    let mut total = 0usize;
    for _ in 0..count {
        let (off, line) = cur.line()?;
        let mut tokens = line.split(' ');
        let name = tokens.next().filter(|n| !n.is_empty()).ok_or_else(|| parse_err(off, "empty name"))?;
        let rank = number(off, tokens.next(), "rank")?;
        if rank == 0 || rank > 8 {
            return Err(parse_err(off, format!("rank {rank} outside 1..=8")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = number(off, tokens.next(), "dimension")?;
            if d == 0 {
                return Err(parse_err(off, "zero dimension"));
            }
            shape.push(d);
        }
        if tokens.next().is_some() {
            return Err(parse_err(off, "trailing tokens"));
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= MAX_VALUES);
        total = numel
            .and_then(|n| total.checked_add(n))
            .filter(|&t| t <= MAX_VALUES)
            .ok_or_else(|| parse_err(off, "tensor too large"))?;
        if manifest.iter().any(|(n, _): &(String, Vec<usize>)| n == name) {
            return Err(parse_err(off, format!("duplicate name {name}")));
        }
        manifest.push((name.to_string(), shape));
    }
    let payload = &bytes[cur.pos..];
    if payload.len() != total * 8 {
        return Err(parse_err(cur.pos, format!("payload has {} bytes, manifest needs {}", payload.len(), total * 8)));
    }
    let mut chunks = payload.chunks_exact(8);
    let mut out = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let data = chunks.by_ref().take(n).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| parse_err(cur.pos, e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Loads values into an existing store; names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<(), CheckpointError> {
    let entries = decode(bytes)?;
    if entries.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!("{} tensors in file, model has {}", entries.len(), store.len())));
    }
    for (name, tensor) in entries {
        let id = store.find(&name).ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {name}")))?;
        store.set(id, tensor).map_err(|e| CheckpointError::Mismatch(format!("{name}: {e}")))?;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    load_into(store, &std::fs::read(path)?)
}
