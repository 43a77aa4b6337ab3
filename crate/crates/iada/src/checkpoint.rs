//! Checkpoint serialization.
//!
//! Layout (all integers little-endian): magic `IADA1`, u32 format version,
//! u32 entry count, then per entry a u32 name length, the UTF-8 name, u32
//! rows, u32 cols, and rows*cols f64 element bits in row-major order.
//! Elements keep their full 64-bit representation so a save/load cycle is
//! bit-for-bit exact. Writes go through a temporary file and a rename.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::params::ParamStore;

const MAGIC: &[u8; 5] = b"IADA1";
const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(String),
    BadMagic,
    BadVersion(u32),
    Truncated(&'static str),
    UnknownEntry(String),
    ShapeMismatch {
        name: String,
        file: (usize, usize),
        store: (usize, usize),
    },
    MissingEntry(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(m) => write!(f, "checkpoint i/o error: {m}"),
            CheckpointError::BadMagic => f.write_str("not a checkpoint file (bad magic)"),
            CheckpointError::BadVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            CheckpointError::Truncated(what) => {
                write!(f, "truncated checkpoint while reading {what}")
            }
            CheckpointError::UnknownEntry(n) => {
                write!(f, "checkpoint entry '{n}' does not exist in the model")
            }
            CheckpointError::ShapeMismatch { name, file, store } => write!(
                f,
                "checkpoint entry '{name}' has shape {}x{} but the model expects {}x{}",
                file.0, file.1, store.0, store.1
            ),
            CheckpointError::MissingEntry(n) => {
                write!(f, "model parameter '{n}' is missing from the checkpoint")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

type Result<T> = std::result::Result<T, CheckpointError>;

fn io_err<E: fmt::Display>(e: E) -> CheckpointError {
    CheckpointError::Io(e.to_string())
}

/// Save every parameter in registration order, atomically.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(p.cols as u32).to_le_bytes());
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)
}

struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &'static str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 5, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(&mut pos, 4, "version")?);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = u32_at(take(&mut pos, 4, "entry count")?) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(take(&mut pos, 4, "name length")?) as usize;
        let name = String::from_utf8(take(&mut pos, name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("utf-8 name"))?;
        let rows = u32_at(take(&mut pos, 4, "rows")?) as usize;
        let cols = u32_at(take(&mut pos, 4, "cols")?) as usize;
        let raw = take(&mut pos, rows * cols * 8, "element data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry {
            name,
            rows,
            cols,
            data,
        });
    }
    Ok(entries)
}

fn apply(store: &mut ParamStore, e: &Entry) -> Result<()> {
    let id = store
        .by_name(&e.name)
        .ok_or_else(|| CheckpointError::UnknownEntry(e.name.clone()))?;
    let p = store.get_mut(id);
    if (p.rows, p.cols) != (e.rows, e.cols) {
        return Err(CheckpointError::ShapeMismatch {
            name: e.name.clone(),
            file: (e.rows, e.cols),
            store: (p.rows, p.cols),
        });
    }
    p.data.copy_from_slice(&e.data);
    Ok(())
}

/// Strict load: the checkpoint and the store must hold exactly the same
/// named shapes.
pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = read_entries(path)?;
    for e in &entries {
        apply(store, e)?;
    }
    let have: std::collections::HashSet<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    for (_, p) in store.iter() {
        if !have.contains(p.name.as_str()) {
            return Err(CheckpointError::MissingEntry(p.name.clone()));
        }
    }
    Ok(())
}

/// Subset load: every checkpoint entry must exist in the store, but the store
/// may hold extra parameters (fresh adapters or aggregator) left untouched.
pub fn load_subset(store: &mut ParamStore, path: &Path) -> Result<usize> {
    let entries = read_entries(path)?;
    for e in &entries {
        apply(store, e)?;
    }
    Ok(entries.len())
}
