//! Versioned binary parameter file.
//!
//! Layout (little endian): magic `EFELABCK`, `u32` version, `u32` network
//! count; per network a length-prefixed name and `u32` tensor count; per
//! tensor a length-prefixed key, `u32` rank, `u64` dims, then `f32` values.

use std::io::{Read, Write};

use efe_autodiff::{Module, Real, StateMap, Tensor};

use crate::error::NetworkError;

const MAGIC: &[u8; 8] = b"EFELABCK";
const VERSION: u32 = 1;

/// Named network states, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    networks: Vec<(String, StateMap<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `module`'s state under `name`, replacing any earlier entry.
    pub fn insert<T: Real, M: Module<T> + ?Sized>(&mut self, name: &str, module: &M) {
        let state = module.state().into_iter().map(|(k, v)| (k, v.cast::<f32>())).collect();
        match self.networks.iter_mut().find(|(n, _)| n == name) {
            Some((_, s)) => *s = state,
            None => self.networks.push((name.to_string(), state)),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.networks.iter().map(|(n, _)| n.as_str())
    }

    /// Overwrites `module` with the state stored under `name`; shapes and
    /// key sets must match exactly.
    pub fn load_into<T: Real, M: Module<T> + ?Sized>(&self, name: &str, module: &mut M) -> Result<(), NetworkError> {
        let (_, state) = self.networks.iter().find(|(n, _)| n == name).ok_or_else(|| NetworkError::MissingNetwork(name.to_string()))?;
        let state = state.iter().map(|(k, v)| (k.clone(), v.cast::<T>())).collect();
        module.load_full_state(state)?;
        Ok(())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), NetworkError> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        write_u32(&mut out, self.networks.len())?;
        for (name, state) in &self.networks {
            write_str(&mut out, name)?;
            write_u32(&mut out, state.len())?;
            for (key, t) in state {
                write_str(&mut out, key)?;
                write_u32(&mut out, t.shape().len())?;
                for &d in t.shape() {
                    out.write_all(&(d as u64).to_le_bytes())?;
                }
                let mut buf = Vec::with_capacity(t.len() * 4);
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                out.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut src: R) -> Result<Self, NetworkError> {
        let mut magic = [0u8; 8];
        src.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NetworkError::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut src)?;
        if version != VERSION {
            return Err(NetworkError::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut src)?;
        let mut networks = Vec::new();
        for _ in 0..count {
            let name = read_str(&mut src)?;
            let tensors = read_u32(&mut src)?;
            let mut state = StateMap::new();
            for _ in 0..tensors {
                let key = read_str(&mut src)?;
                let rank = read_u32(&mut src)? as usize;
                if rank > 8 {
                    return Err(NetworkError::Format(format!("tensor `{key}` has rank {rank}")));
                }
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    let mut b = [0u8; 8];
                    src.read_exact(&mut b)?;
                    shape.push(u64::from_le_bytes(b) as usize);
                }
                let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| NetworkError::Format("tensor too large".into()))?;
                let mut bytes = vec![0u8; n.checked_mul(4).ok_or_else(|| NetworkError::Format("tensor too large".into()))?];
                src.read_exact(&mut bytes)?;
                let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                state.insert(key, Tensor::new(&shape, data)?);
            }
            networks.push((name, state));
        }
        Ok(Checkpoint { networks })
    }
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<(), NetworkError> {
    let v = u32::try_from(v).map_err(|_| NetworkError::Format("count exceeds u32".into()))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<(), NetworkError> {
    write_u32(out, s.len())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(src: &mut R) -> Result<u32, NetworkError> {
    let mut b = [0u8; 4];
    src.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(src: &mut R) -> Result<String, NetworkError> {
    let len = read_u32(src)? as usize;
    if len > 1 << 16 {
        return Err(NetworkError::Format(format!("name of length {len}")));
    }
    let mut b = vec![0u8; len];
    src.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| NetworkError::Format("name is not utf-8".into()))
}
