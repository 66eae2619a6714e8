//! Versioned flat checkpoints of named parameter tensors.
//!
//! Layout: an ASCII header, then the payload.
//!
//! ```text
//! LXFUSE-CKPT 1
//! byte-order little-endian f64
//! meta <one line of JSON, may be {}>
//! tensors <count>
//! <name> <d1>x<d2>... <offset>
//! ...
//! end
//! <payload>
//! ```
//!
//! Offsets count f64 values from the start of the payload.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Parameterized;

const MAGIC: &str = "LXFUSE-CKPT 1";
const ORDER: &str = "byte-order little-endian f64";

pub fn to_bytes<M: Parameterized + ?Sized>(model: &M, meta: &str) -> Result<Vec<u8>> {
    if meta.contains('\n') {
        return Err(Error::Checkpoint("metadata must fit on one line".into()));
    }
    let mut header = format!("{MAGIC}\n{ORDER}\nmeta {meta}\n");
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    model.visit_params("", &mut |name, p| {
        let shape: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
        entries.push(format!("{name} {} {offset}", shape.join("x")));
        offset += p.numel();
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let _ = writeln!(header, "tensors {}", entries.len());
    for e in entries {
        let _ = writeln!(header, "{e}");
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend(payload);
    Ok(out)
}

/// Restores every parameter of `model` from `bytes`; returns the metadata line.
/// Names, order and shapes must match exactly.
pub fn load_from_bytes<M: Parameterized + ?Sized>(model: &mut M, bytes: &[u8]) -> Result<String> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(bad(format!("expected {MAGIC:?} header")));
    }
    if lines.get(1).map(String::as_str) != Some(ORDER) {
        return Err(bad("unsupported byte order".into()));
    }
    let meta = lines
        .get(2)
        .and_then(|l| l.strip_prefix("meta "))
        .ok_or_else(|| bad("missing meta line".into()))?
        .to_string();
    let count: usize = lines
        .get(3)
        .and_then(|l| l.strip_prefix("tensors "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing tensor count".into()))?;
    let entries = &lines[4..];
    if entries.len() != count {
        return Err(bad(format!("header lists {} tensors, expected {count}", entries.len())));
    }
    let payload = &bytes[pos..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut idx = 0;
    let mut err = None;
    model.visit_params_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(entry) = entries.get(idx) else {
            err = Some(bad(format!("checkpoint has no entry for {name}")));
            return;
        };
        idx += 1;
        let parts: Vec<&str> = entry.split(' ').collect();
        let shape: String = p.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        if parts.len() != 3 || parts[0] != name || parts[1] != shape {
            err = Some(bad(format!("entry {entry:?} does not match parameter {name} {shape}")));
            return;
        }
        let Ok(off) = parts[2].parse::<usize>() else {
            err = Some(bad(format!("bad offset in {entry:?}")));
            return;
        };
        let Some(src) = values.get(off..off + p.numel()) else {
            err = Some(bad(format!("payload too short for {name}")));
            return;
        };
        p.value.data_mut().copy_from_slice(src);
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != count {
        return Err(bad(format!("checkpoint holds {count} tensors, model has {idx}")));
    }
    Ok(meta)
}

pub fn save<M: Parameterized + ?Sized>(model: &M, meta: &str, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load<M: Parameterized + ?Sized>(model: &mut M, path: &Path) -> Result<String> {
    load_from_bytes(model, &fs::read(path)?)
}

/// Metadata line of a checkpoint file, without touching any model.
pub fn read_meta(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(64 * 1024)]);
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint(format!("expected {MAGIC:?} header")));
    }
    lines
        .find_map(|l| l.strip_prefix("meta ").map(str::to_string))
        .ok_or_else(|| Error::Checkpoint("missing meta line".into()))
}
