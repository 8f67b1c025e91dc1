//! Checkpoint file: one line of JSON header, a newline, then the
//! little-endian f32 payload of every tensor in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ModelParams, Tensor};
use crate::error::{Error, Result};

const FORMAT: &str = "cfdense-checkpoint/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    /// Momentum buffers, when saved mid-training.
    pub velocity: Option<ModelParams<f32>>,
    /// Extra tensors such as a segmentation head.
    pub extra: Vec<Tensor<f32>>,
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    arch: ArchConfig,
    step: u64,
    seed: u64,
    config_hash: String,
    tensors: Vec<TensorHeader>,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, seed: u64, step: u64, config_hash: impl Into<String>) -> Self {
        Self { params, velocity: None, extra: vec![], seed, step, config_hash: config_hash.into() }
    }

    pub fn arch(&self) -> ArchConfig {
        self.params.arch
    }

    fn groups(&self) -> Vec<(&str, &Tensor<f32>)> {
        let mut out: Vec<(&str, &Tensor<f32>)> = self.params.tensors.iter().map(|t| ("params", t)).collect();
        if let Some(v) = &self.velocity {
            out.extend(v.tensors.iter().map(|t| ("velocity", t)));
        }
        out.extend(self.extra.iter().map(|t| ("extra", t)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let groups = self.groups();
        let header = Header {
            format: FORMAT.into(),
            arch: self.arch(),
            step: self.step,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            tensors: groups
                .iter()
                .map(|(g, t)| TensorHeader { group: g.to_string(), name: t.name.clone(), shape: t.shape.clone() })
                .collect(),
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        for (_, t) in groups {
            bytes.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing header terminator"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, e.to_string()))?;
        if header.format != FORMAT {
            return Err(Error::format(path, format!("unsupported format `{}`", header.format)));
        }
        header.arch.validate()?;
        let mut payload = &bytes[nl + 1..];
        let mut params = ModelParams::<f32>::zeros(header.arch);
        let mut velocity: Option<ModelParams<f32>> = None;
        let mut extra = Vec::new();
        let (mut pi, mut vi) = (0, 0);
        for th in &header.tensors {
            let n: usize = th.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(Error::format(path, format!("payload truncated in `{}`", th.name)));
            }
            let data: Vec<f32> = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            payload = &payload[4 * n..];
            let tensor = Tensor { name: th.name.clone(), shape: th.shape.clone(), data };
            let slot = match th.group.as_str() {
                "params" => {
                    pi += 1;
                    params.tensors.get_mut(pi - 1)
                }
                "velocity" => {
                    vi += 1;
                    velocity.get_or_insert_with(|| ModelParams::zeros(header.arch)).tensors.get_mut(vi - 1)
                }
                "extra" => {
                    extra.push(tensor);
                    continue;
                }
                g => return Err(Error::format(path, format!("unknown tensor group `{g}`"))),
            };
            match slot {
                Some(s) if s.name == tensor.name && s.shape == tensor.shape => *s = tensor,
                _ => return Err(Error::format(path, format!("tensor `{}` does not match the architecture", th.name))),
            }
        }
        if pi != params.tensors.len() || velocity.as_ref().is_some_and(|v| vi != v.tensors.len()) {
            return Err(Error::format(path, "incomplete tensor list"));
        }
        if !payload.is_empty() {
            return Err(Error::format(path, format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self { params, velocity, extra, seed: header.seed, step: header.step, config_hash: header.config_hash })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
