//! Binary model snapshots.
//!
//! Layout, all integers little-endian:
//! `SFCMP1` · u32 version · u32 spec length · spec JSON · 32-byte SHA-256 of
//! the target spec as JSON · f64 Ω · f64 ε · u64 iteration · u64 seed · u32 parameter
//! count · per parameter { u32 rank · u64 dims… · f64 values… · u8 masked ·
//! [u64 active count · packed mask bits, LSB first] }.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{assemble_target, TargetSpec};
use crate::numcore::Tensor;
use crate::sparse::{Mask, SparseModel};

pub const MAGIC: &[u8; 6] = b"SFCMP1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SparseModel,
    pub iteration: u64,
    /// Run seed; attack splits are rebuilt from it.
    pub seed: u64,
}

pub fn spec_digest(spec: &TargetSpec) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(spec)?;
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(&json));
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let spec = serde_json::to_vec(&m.spec)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&spec_digest(&m.spec)?);
        out.extend_from_slice(&m.omega.to_le_bytes());
        out.extend_from_slice(&m.epsilon.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(m.store.len() as u32).to_le_bytes());
        for p in m.store.iter() {
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            match &p.mask {
                None => out.push(0),
                Some(mask) => {
                    out.push(1);
                    out.extend_from_slice(&(mask.active_count() as u64).to_le_bytes());
                    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
                    for i in mask.active_indices() {
                        bytes[i / 8] |= 1 << (i % 8);
                    }
                    out.extend_from_slice(&bytes);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = r.u32()? as usize;
        let spec_json = r.take(len)?;
        let spec: TargetSpec = serde_json::from_slice(spec_json).map_err(|e| bad(format!("bad spec: {e}")))?;
        let digest = r.take(32)?;
        if digest != spec_digest(&spec)? {
            return Err(bad("spec digest mismatch"));
        }
        let omega = r.f64()?;
        let epsilon = r.f64()?;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let mut model = assemble_target(&spec, omega)?;
        model.epsilon = epsilon;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(bad(format!("{count} parameters recorded, spec builds {}", model.store.len())));
        }
        for p in model.store.iter_mut() {
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            if shape != p.value.shape() {
                return Err(bad(format!("shape {shape:?} does not match spec shape {:?}", p.value.shape())));
            }
            let n = p.value.len();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            p.value = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            let masked = r.take(1)?[0];
            match (masked, p.mask.is_some()) {
                (0, false) => {}
                (1, true) => {
                    let active = r.u64()? as usize;
                    let packed = r.take(n.div_ceil(8))?;
                    let bits: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
                    let mask = Mask::from_bits(bits);
                    if mask.active_count() != active {
                        return Err(bad(format!(
                            "mask popcount {} differs from recorded {active}",
                            mask.active_count()
                        )));
                    }
                    p.mask = Some(mask);
                }
                _ => return Err(bad("mask flag does not match the target spec")),
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        if !model.is_consistent() {
            return Err(bad("inactive weights are not zero"));
        }
        Ok(Self { model, iteration, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
