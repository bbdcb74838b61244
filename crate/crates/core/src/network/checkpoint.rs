//! Binary checkpoints: named tensors plus momentum, tagged with a config
//! fingerprint.
//!
//! Layout, little-endian:
//!
//! ```text
//! b"MMDNCKPT" u32 version [u8; 32] fingerprint u64 iteration u32 count
//! count × { u32 name_len, name, u32 rank, rank × u64 dim, f64 data..., f64 velocity... }
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{NetworkConfig, NetworkState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MMDNCKPT";
const VERSION: u32 = 1;

pub fn to_bytes(state: &NetworkState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.config.fingerprint());
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (p, v) in state.params.iter().zip(&state.velocity) {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in p.tensor.data().iter().chain(v.data()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::contract(format!("checkpoint: {}", msg.into()))
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|_| corrupt("truncated"))?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.bytes()?)))
            .collect()
    }
}

/// Restores a state for `config`; refuses data written for another config.
pub fn from_bytes(bytes: &[u8], config: &NetworkConfig) -> Result<NetworkState> {
    let mut r = Reader(Cursor::new(bytes));
    if &r.bytes::<8>()? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    if r.bytes::<32>()? != config.fingerprint() {
        return Err(Error::config(
            "checkpoint was written for a different network configuration",
        ));
    }
    let mut state = NetworkState::build(config.clone(), 0)?;
    state.iteration = r.u64()?;
    let count = r.u32()? as usize;
    if count != state.params.len() {
        return Err(corrupt(format!(
            "{count} tensors, expected {}",
            state.params.len()
        )));
    }
    for i in 0..count {
        let len = r.u32()? as usize;
        let mut name = vec![0u8; len];
        r.0.read_exact(&mut name)
            .map_err(|_| corrupt("truncated"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let slot = &mut state.params[i];
        if name != slot.name {
            return Err(corrupt(format!(
                "tensor {i} is `{name}`, expected `{}`",
                slot.name
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != slot.tensor.shape() {
            return Err(corrupt(format!(
                "`{name}` has shape {shape:?}, expected {:?}",
                slot.tensor.shape()
            )));
        }
        let n = slot.tensor.len();
        slot.tensor = Tensor::new(&shape, r.f64s(n)?)?;
        state.velocity[i] = Tensor::new(&shape, r.f64s(n)?)?;
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(state)
}

pub fn save(state: &NetworkState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, config: &NetworkConfig) -> Result<NetworkState> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut s = NetworkState::build(NetworkConfig::desk(5), 4).unwrap();
        s.iteration = 17;
        s.velocity[3].data_mut()[0] = 0.25;
        let back = from_bytes(&to_bytes(&s), &s.config).unwrap();
        assert_eq!(back.params, s.params);
        assert_eq!(back.velocity, s.velocity);
        assert_eq!(back.iteration, 17);
    }

    #[test]
    fn other_config_refused() {
        let s = NetworkState::build(NetworkConfig::desk(5), 4).unwrap();
        let other = NetworkConfig {
            ns_iterations: 6,
            ..NetworkConfig::desk(5)
        };
        assert!(matches!(
            from_bytes(&to_bytes(&s), &other),
            Err(Error::Config(_))
        ));
        let mut bytes = to_bytes(&s);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            from_bytes(&bytes, &s.config),
            Err(Error::Contract(_))
        ));
    }
}
