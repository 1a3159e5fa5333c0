//! `EPT1` checkpoints: a step counter and named little-endian `f64` tensors.

use std::fs;
use std::path::Path;

use super::CliError;
use crate::numerics::{ParamStore, Tensor};
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 4] = b"EPT1";
pub const VERSION: u32 = 1;

const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Parameters followed by the AdamW moments under `optim.m.*` / `optim.v.*`.
    pub fn from_training(store: &ParamStore, state: &OptimizerState) -> Result<Self, CliError> {
        if !state.matches(store) {
            return Err(bad("optimizer state does not match the parameters"));
        }
        let mut tensors: Vec<(String, Tensor)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        for (prefix, moments) in [(MOMENT1, &state.m), (MOMENT2, &state.v)] {
            for ((_, p), m) in store.iter().zip(moments) {
                tensors.push((format!("{prefix}{}", p.name), Tensor::new(p.value.shape().to_vec(), m.clone())?));
            }
        }
        Ok(Self { step: state.step, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the checkpoint; a missing name
    /// or a shape difference is an error.
    pub fn load_params(&self, store: &mut ParamStore) -> Result<(), CliError> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.get(&name).ok_or_else(|| bad(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(bad(format!("{name}: checkpoint shape {:?}, model shape {:?}", t.shape(), store.value(id).shape())));
            }
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    /// Optimizer state for `store`; zero moments when the checkpoint holds none.
    pub fn optimizer_state(&self, store: &ParamStore) -> Result<OptimizerState, CliError> {
        let mut state = OptimizerState::new(store);
        state.step = self.step;
        let has_moments = self.tensors.iter().any(|(n, _)| n.starts_with(MOMENT1));
        if !has_moments {
            return Ok(state);
        }
        for (id, p) in store.iter() {
            for (prefix, dst) in [(MOMENT1, &mut state.m), (MOMENT2, &mut state.v)] {
                let name = format!("{prefix}{}", p.name);
                let t = self.get(&name).ok_or_else(|| bad(format!("checkpoint lacks {name}")))?;
                if t.shape() != p.value.shape() {
                    return Err(bad(format!("{name} has shape {:?}", t.shape())));
                }
                dst[id.index()] = t.data().to_vec();
            }
        }
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| bad("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            if self.tensors[..i].iter().any(|(n, _)| n == name) {
                return Err(bad(format!("duplicate tensor name {name}")));
            }
            let len = u32::try_from(name.len()).map_err(|_| bad("name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic, expected EPT1"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(bad(format!("duplicate tensor name {name}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("extent overflows usize"))?);
            }
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| bad("tensor too large"))?;
            let payload = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_bytes(&fs::read(path).map_err(|e| CliError::io(path, e))?)
    }
}
