//! Bit-exact checkpoint serialization.
//!
//! File layout:
//!   - 5 ASCII magic bytes `TVAE1`
//!   - u32 LE header length, then a JSON header (config, phase, counters,
//!     seed, rng state, optimizer hyperparameters, checksum algorithm id)
//!   - named blobs: model parameters sorted by name, then optimizer first
//!     and second moments as `optim.m.<name>` / `optim.v.<name>`; each blob
//!     is u32 LE name length, name bytes, u32 LE rank, u64 LE dims, u64 LE
//!     byte count, little-endian f32 values
//!   - u32 LE CRC32 of every preceding byte

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffcore::{Rng, Tensor};
use crate::model::{ModelConfig, TransformerVae};
use crate::trainer::{AdamW, MetricSnapshot, OptimConfig, TrainState};
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"TVAE1";

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    magic: String,
    version: u32,
    checksum: String,
    config: ModelConfig,
    phase: u8,
    epoch_in_phase: u32,
    step_in_phase: u64,
    global_step: u64,
    seed: u64,
    rng_state: [u64; 4],
    opt_t: u64,
    opt_cfg: OptimConfig,
    #[serde(default)]
    metrics: Option<MetricSnapshot>,
}

fn put_blob(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a training state to `path`.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let header = Header {
        magic: "TVAE1".into(),
        version: 1,
        checksum: "crc32".into(),
        config: state.model.config().clone(),
        phase: state.phase,
        epoch_in_phase: state.epoch_in_phase,
        step_in_phase: state.step_in_phase,
        global_step: state.global_step,
        seed: state.seed,
        rng_state: state.rng.state(),
        opt_t: state.opt.t,
        opt_cfg: state.opt.cfg,
        metrics: state.last_metrics,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (name, t) in state.model.params() {
        put_blob(&mut buf, name, t.shape(), t.data());
    }
    for (name, m) in &state.opt.m {
        put_blob(&mut buf, &format!("optim.m.{name}"), &[m.len()], m);
    }
    for (name, v) in &state.opt.v {
        put_blob(&mut buf, &format!("optim.v.{name}"), &[v.len()], v);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn read_blob(r: &mut Reader) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|e| Error::Checkpoint(format!("blob name not utf-8: {e}")))?;
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let byte_count = r.u64()? as usize;
    let numel: usize = shape.iter().product();
    if byte_count != numel * 4 {
        return Err(Error::Checkpoint(format!(
            "blob `{name}`: byte count {byte_count} does not match shape {shape:?}"
        )));
    }
    let raw = r.take(byte_count)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, shape, data))
}

/// Load a training state. Verifies the magic, the CRC32 trailer, and every
/// parameter shape against the stored config.
pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint(format!("{}: file too short", path.display())));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?} (want TVAE1)",
            path.display(),
            &bytes[..5.min(bytes.len())]
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch (stored {stored_crc:#x}, computed {actual_crc:#x})",
            path.display()
        )));
    }

    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("{}: header parse: {e}", path.display())))?;
    if header.magic != "TVAE1" || header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported header (magic {}, version {})",
            path.display(),
            header.magic,
            header.version
        )));
    }

    let mut params: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut opt_m: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut opt_v: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    while r.remaining() > 0 {
        let (name, shape, data) = read_blob(&mut r)?;
        if let Some(n) = name.strip_prefix("optim.m.") {
            opt_m.insert(n.to_string(), data);
        } else if let Some(n) = name.strip_prefix("optim.v.") {
            opt_v.insert(n.to_string(), data);
        } else {
            params.insert(name, Tensor::param(shape, data));
        }
    }

    let model = TransformerVae::from_params(header.config, params)?;
    for (name, buf) in opt_m.iter().chain(opt_v.iter()) {
        let want = model.param(name).numel();
        if buf.len() != want {
            return Err(Error::Checkpoint(format!(
                "optimizer state for `{name}` has {} values, parameter has {want}",
                buf.len()
            )));
        }
    }
    let mut opt = AdamW::new(header.opt_cfg);
    opt.t = header.opt_t;
    opt.m = opt_m;
    opt.v = opt_v;

    Ok(TrainState {
        model,
        opt,
        rng: Rng::from_state(header.rng_state),
        phase: header.phase,
        epoch_in_phase: header.epoch_in_phase,
        step_in_phase: header.step_in_phase,
        global_step: header.global_step,
        seed: header.seed,
        last_metrics: header.metrics,
    })
}
