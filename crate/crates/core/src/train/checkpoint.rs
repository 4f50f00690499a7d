use std::fs;
use std::path::Path;

use super::TrainConfig;
use crate::error::{bail, Error, Result};
use crate::policy::PolicyModel;
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"ADG1";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or run a model: parameters, optimizer
/// moments, the epoch counter and the shuffle RNG position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Shuffle RNG as `(seed, stream)`; the stream is the next epoch index.
    pub rng: (u64, u64),
    pub params: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<PolicyModel> {
        PolicyModel::from_params(self.config.model.clone(), self.params.clone())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Corrupt, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Little-endian binary layout: magic, version, config JSON, epoch, RNG,
/// named tensors, Adam state, then a CRC-32 of everything before it.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    if ck.adam.m.len() != ck.params.len() {
        bail!(Contract, "optimizer state does not match parameters");
    }
    let mut w = Writer(Vec::with_capacity(16 * ck.params.total_len() + 4096));
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes(&serde_json::to_vec(&ck.config)?);
    w.u64(ck.epoch);
    w.u64(ck.rng.0);
    w.u64(ck.rng.1);
    w.u32(ck.params.len() as u32);
    for (_, name, t) in ck.params.iter() {
        w.bytes(name.as_bytes());
        w.u32(t.dims().len() as u32);
        for &d in t.dims() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
    let a = &ck.adam;
    w.f64s(&[a.config.lr, a.config.beta1, a.config.beta2, a.config.epsilon]);
    w.u64(a.step_count);
    for i in 0..a.m.len() {
        w.u64(a.tensor_steps[i]);
        w.f64s(&a.m[i]);
        w.f64s(&a.v[i]);
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < 12 || &buf[..4] != MAGIC {
        bail!(Corrupt, "not a checkpoint (bad magic)");
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        bail!(Corrupt, "checkpoint format version {} is not supported (expected {})", version, FORMAT_VERSION);
    }
    let body = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body..].try_into().expect("4 bytes"));
    if crc32fast::hash(&buf[..body]) != stored {
        bail!(Corrupt, "checkpoint checksum mismatch (truncated or modified)");
    }
    let r = &mut Reader { buf: &buf[..body], pos: r.pos };
    let config: TrainConfig = serde_json::from_slice(r.bytes()?)?;
    let epoch = r.u64()?;
    let rng = (r.u64()?, r.u64()?);
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?.to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Corrupt("tensor too large".into()))?;
        let data = r.f64s(len)?;
        params.add(name, Tensor::new(dims, data).map_err(|e| Error::Corrupt(e.to_string()))?);
    }
    let config_adam = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, epsilon: r.f64()? };
    let mut adam = AdamState::new(&params, config_adam);
    adam.step_count = r.u64()?;
    for i in 0..n {
        let len = adam.m[i].len();
        adam.tensor_steps[i] = r.u64()?;
        adam.m[i] = r.f64s(len)?;
        adam.v[i] = r.f64s(len)?;
    }
    if r.pos != body {
        bail!(Corrupt, "{} trailing bytes in checkpoint", body - r.pos);
    }
    Ok(Checkpoint { config, epoch, rng, params, adam })
}

/// Writes through a temporary file so a crash never leaves a partial
/// checkpoint under `path`.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
