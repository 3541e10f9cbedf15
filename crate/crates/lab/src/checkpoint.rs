//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LDARCKPT"  u32 version  u64 header_len  header (JSON)
//! u32 n_tensors
//! repeated: u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[product(dims)]
//! ```
//!
//! The header carries the policy and trainer configs, a SHA-256 hash of
//! both, the step, the baseline and the rollout RNG state. Tensors are the
//! policy parameters followed by `adam.m.<name>` and `adam.v.<name>`.

use std::path::Path;

use ldar_core::diffcore::Tensor;
use ldar_core::policy::{PolicyConfig, PolicyParams};
use ldar_core::rng::RngState;
use ldar_core::trainer::{Trainer, TrainerConfig, TrainerState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PolicyDoc, TrainerDoc};
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"LDARCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub trainer: TrainerConfig,
    pub state: TrainerState,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    policy: PolicyDoc,
    trainer: TrainerDoc,
    config_hash: String,
    step: u64,
    baseline_bits: String,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
}

/// Hex SHA-256 of the policy and trainer configs.
pub fn config_hash(policy: &PolicyConfig, trainer: &TrainerConfig) -> String {
    let text = serde_json::to_string(&(PolicyDoc::from(policy), TrainerDoc::from(trainer))).expect("configs serialize");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflows".to_string())
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader<'_>) -> std::result::Result<(String, Vec<usize>, Vec<f64>), String> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| "tensor name is not UTF-8")?.to_string();
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim.min(8));
    for _ in 0..ndim {
        shape.push(r.len()?);
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor size overflows")?;
    let raw = r.take(numel.checked_mul(8).ok_or("tensor size overflows")?)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((name, shape, data))
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint { params: t.params.clone(), trainer: t.config, state: t.state.clone(), rng: t.rng_state() }
    }

    pub fn into_trainer(self) -> ldar_core::Result<Trainer> {
        Trainer::from_parts(self.params, self.state, self.trainer, self.rng)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let policy = self.params.config();
        let header = Header {
            policy: PolicyDoc::from(policy),
            trainer: TrainerDoc::from(&self.trainer),
            config_hash: config_hash(policy, &self.trainer),
            step: self.state.step,
            baseline_bits: format!("{:016x}", self.state.baseline.to_bits()),
            rng_seed: self.rng.seed.to_vec(),
            rng_stream: self.rng.stream,
            rng_word_pos: self.rng.word_pos.to_string(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(3 * self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_tensor(&mut out, name, t.shape(), t.data());
        }
        for (prefix, moments) in [("adam.m.", &self.state.m), ("adam.v.", &self.state.v)] {
            for ((name, t), data) in self.params.iter().zip(moments) {
                write_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), data);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |detail: String| LabError::Format { path: path.to_path_buf(), detail };
        let shape = |detail: String| LabError::Shape { path: path.to_path_buf(), detail };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(format)? != MAGIC {
            return Err(format("missing LDARCKPT magic".into()));
        }
        let version = r.u32().map_err(format)?;
        if version != VERSION {
            return Err(format(format!("version {version}, expected {VERSION}")));
        }
        let header_len = r.len().map_err(format)?;
        let header: Header = serde_json::from_slice(r.take(header_len).map_err(format)?)
            .map_err(|e| format(format!("bad header: {e}")))?;
        let policy = header.policy.to_config().map_err(|e| format(e.to_string()))?;
        let trainer = header.trainer.to_config();
        if header.config_hash != config_hash(&policy, &trainer) {
            return Err(format("config hash does not match the stored configs".into()));
        }
        let count = r.u32().map_err(format)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            tensors.push(read_tensor(&mut r).map_err(format)?);
        }
        if r.pos != bytes.len() {
            return Err(format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if count % 3 != 0 {
            return Err(shape(format!("{count} tensors is not parameters plus two moment sets")));
        }
        let k = count / 3;
        let moments = tensors.split_off(k);
        let named = tensors
            .into_iter()
            .map(|(name, s, data)| Ok((name, Tensor::new(s, data)?)))
            .collect::<ldar_core::Result<Vec<_>>>()
            .map_err(|e| shape(e.to_string()))?;
        let params = PolicyParams::from_named(policy, named).map_err(|e| shape(e.to_string()))?;
        let mut m = Vec::with_capacity(k);
        let mut v = Vec::with_capacity(k);
        for (j, (name, s, data)) in moments.into_iter().enumerate() {
            let (prefix, i, dst) = if j < k { ("adam.m.", j, &mut m) } else { ("adam.v.", j - k, &mut v) };
            let expected = format!("{prefix}{}", params.name(i));
            if name != expected || s != params.tensor(i).shape() {
                return Err(shape(format!("expected {expected} {:?}, found {name} {s:?}", params.tensor(i).shape())));
            }
            dst.push(data);
        }
        let baseline = u64::from_str_radix(&header.baseline_bits, 16)
            .map(f64::from_bits)
            .map_err(|_| format("bad baseline".into()))?;
        let seed: [u8; 32] = header.rng_seed.try_into().map_err(|_| format("rng seed must be 32 bytes".into()))?;
        let word_pos = header.rng_word_pos.parse().map_err(|_| format("bad rng position".into()))?;
        let state = TrainerState { step: header.step, m, v, baseline };
        Ok(Checkpoint { params, trainer, state, rng: RngState { seed, stream: header.rng_stream, word_pos } })
    }

    /// Writes through a temporary file so a crash never leaves half a
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| LabError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Shape error unless the stored policy was built from `expected`.
    pub fn expect_policy(&self, expected: &PolicyConfig, path: &Path) -> Result<()> {
        let found = self.params.config();
        if found != expected {
            return Err(LabError::Shape {
                path: path.to_path_buf(),
                detail: format!("checkpoint policy {:?} differs from the requested {:?}", PolicyDoc::from(found), PolicyDoc::from(expected)),
            });
        }
        Ok(())
    }
}
