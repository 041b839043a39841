//! Binary checkpoints: magic, format version, JSON metadata, named f64
//! arrays (parameters and optimizer moments) and a trailing SHA-256.
//!
//! ```text
//! "SPFCKPT\0" | u32 version | u64 len | metadata JSON
//! u32 n_arrays | { u32 len | name | u32 ndim | u64 dims.. | f64 data.. }*
//! sha256 of everything above
//! ```
//! Integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spformer_core::agent::{check_compatible, TrainConfig, Trainer};
use spformer_core::net::{NetConfig, ParameterSet};
use spformer_core::sim::ScenarioConfig;
use spformer_core::tensor::{AdamConfig, AdamState, Tensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"SPFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub scenario: ScenarioConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Episodes completed.
    pub episode: usize,
    pub epsilon: f64,
    pub updates: u64,
    pub adam: AdamConfig,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterSet,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                scenario: t.scenario.clone(),
                net: t.params.config.clone(),
                train: t.config.clone(),
                episode: t.episode,
                epsilon: t.epsilon,
                updates: t.updates,
                adam: t.adam.config,
                adam_step: t.adam.step,
            },
            params: t.params.clone(),
            adam: t.adam.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let names = self.params.names();
        let mut arrays: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, tensors) in [("param", &self.params.tensors), ("adam_m", &self.adam.first), ("adam_v", &self.adam.second)] {
            arrays.extend(names.iter().zip(tensors).map(|(n, t)| (format!("{prefix}/{n}"), t)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let bad = |msg: &str| CliError::Version {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("format version {version}, expected {VERSION}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u64().ok_or_else(|| bad("truncated"))? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len).ok_or_else(|| bad("truncated"))?).map_err(|e| bad(&e.to_string()))?;
        let n = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let a = r.array().ok_or_else(|| bad("truncated array"))?;
            arrays.push(a);
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        let names = spformer_core::net::parameter_shapes(&meta.net);
        let k = names.len();
        if arrays.len() != 3 * k {
            return Err(bad(&format!("{} arrays, expected {}", arrays.len(), 3 * k)));
        }
        let mut groups = arrays.chunks(k).zip(["param", "adam_m", "adam_v"]).map(|(chunk, prefix)| {
            chunk
                .iter()
                .zip(&names)
                .map(|((name, t), (want, shape))| {
                    if *name != format!("{prefix}/{want}") || t.shape() != shape.as_slice() {
                        Err(bad(&format!("array {name} {:?} does not match {prefix}/{want} {shape:?}", t.shape())))
                    } else {
                        Ok((want.clone(), t.clone()))
                    }
                })
                .collect::<CliResult<Vec<_>>>()
        });
        let params = groups.next().unwrap()?;
        let first: Vec<Tensor> = groups.next().unwrap()?.into_iter().map(|(_, t)| t).collect();
        let second: Vec<Tensor> = groups.next().unwrap()?.into_iter().map(|(_, t)| t).collect();
        let params = ParameterSet::from_named(meta.net.clone(), params).map_err(|e| bad(&e.to_string()))?;
        check_compatible(&meta.net, &meta.scenario).map_err(|e| bad(&e.to_string()))?;
        Ok(Checkpoint {
            adam: AdamState {
                config: meta.adam,
                first,
                second,
                step: meta.adam_step,
            },
            params,
            meta,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let tmp = tmp_path(path);
        fs::write(&tmp, self.to_bytes()).map_err(CliError::io(&tmp))?;
        fs::rename(&tmp, path).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fails with a version error when the network cannot run `scenario`.
    pub fn check_scenario(&self, scenario: &ScenarioConfig, path: &Path) -> CliResult<()> {
        check_compatible(&self.meta.net, scenario).map_err(|e| CliError::Version {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn array(&mut self) -> Option<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(usize::try_from(self.u64()?).ok()?);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let raw = self.take(count.checked_mul(8)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Some((name, Tensor::new(shape, data).ok()?))
    }
}
