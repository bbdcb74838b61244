//! Raw float64 dumps of heatmap stacks.
//!
//! Layout, little-endian:
//!
//! ```text
//! b"MMDNHMAP" u32 version u32 width u32 height u32 count
//! count × { u8 kind, width·height × f64 }
//! ```

use std::fs;
use std::path::Path;

use super::{Heatmap, HeatmapKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MMDNHMAP";
const VERSION: u32 = 1;

fn kind_code(k: HeatmapKind) -> u8 {
    match k {
        HeatmapKind::Landmark => 0,
        HeatmapKind::Boundary => 1,
        HeatmapKind::Fused => 2,
    }
}

/// Serializes maps that all share one size.
pub fn stack_to_bytes(maps: &[Heatmap]) -> Result<Vec<u8>> {
    let (w, h) = maps.first().map_or((0, 0), |m| (m.width, m.height));
    if let Some(m) = maps.iter().find(|m| (m.width, m.height) != (w, h)) {
        return Err(Error::dim("heatmap stack", &[m.height, m.width], &[h, w]));
    }
    let mut out = Vec::with_capacity(24 + maps.len() * (1 + 8 * w * h));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, w as u32, h as u32, maps.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in maps {
        out.push(kind_code(m.kind));
        for v in &m.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: &str) -> Error {
    Error::contract(format!("heatmap dump: {msg}"))
}

pub fn stack_from_bytes(bytes: &[u8]) -> Result<Vec<Heatmap>> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad header"));
    }
    let word = |i: usize| {
        u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    if word(0) != VERSION as usize {
        return Err(corrupt("unsupported version"));
    }
    let (w, h, count) = (word(1), word(2), word(3));
    let per = 1 + 8 * w * h;
    if bytes.len() != 24 + count * per {
        return Err(corrupt("size does not match header"));
    }
    bytes[24..]
        .chunks(per)
        .map(|chunk| {
            let kind = match chunk[0] {
                0 => HeatmapKind::Landmark,
                1 => HeatmapKind::Boundary,
                2 => HeatmapKind::Fused,
                _ => return Err(corrupt("unknown map kind")),
            };
            let values = chunk[1..]
                .chunks(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Heatmap::new(w, h, values, kind)
        })
        .collect()
}

pub fn write_stack(path: &Path, maps: &[Heatmap]) -> Result<()> {
    fs::write(path, stack_to_bytes(maps)?).map_err(|e| Error::io(path, e))
}

pub fn read_stack(path: &Path) -> Result<Vec<Heatmap>> {
    stack_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
