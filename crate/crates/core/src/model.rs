//! The dual-branch student and its checkpoint file.
//!
//! Checkpoint layout: magic `PRVC`, a `u32` LE header length, the JSON
//! header, then every parameter as `f32` LE in the order of
//! [`ModelState::named_params`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compute::Tensor;
use crate::data::Dims;
use crate::encoders::{init_params, EncoderKind, EncoderParams, EncoderShape};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PRVC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder architecture shared by all four encoders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub depth: usize,
    /// Longer videos are uniformly subsampled to this many frames.
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 384,
            heads: 4,
            ff_mult: 4,
            depth: 1,
            max_frames: 128,
        }
    }
}

impl ModelConfig {
    pub fn encoder_shape(&self, input_dim: usize) -> EncoderShape {
        EncoderShape {
            input_dim,
            hidden: self.hidden,
            heads: self.heads,
            ff_mult: self.ff_mult,
            depth: self.depth,
            max_frames: self.max_frames,
        }
    }
}

/// Which branches train and how.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// Inheritance branch distills from the teacher, exploration branch
    /// learns from its own soft targets.
    #[default]
    Dual,
    InheritanceOnly,
    ExplorationOnly,
    /// Two independently initialized exploration branches, no teacher.
    DoubleExploration,
}

impl BranchMode {
    /// Fusion weight used at evaluation: single-branch models score with
    /// their only trained branch.
    pub fn effective_sigma(self, sigma: f64) -> f64 {
        match self {
            BranchMode::InheritanceOnly => 0.0,
            BranchMode::ExplorationOnly => 1.0,
            _ => sigma,
        }
    }

    pub fn trains_inheritance(self) -> bool {
        self != BranchMode::ExplorationOnly
    }

    pub fn trains_exploration(self) -> bool {
        self != BranchMode::InheritanceOnly
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, BranchMode::Dual | BranchMode::InheritanceOnly)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub video: EncoderParams,
    pub text: EncoderParams,
}

impl BranchParams {
    pub fn init(cfg: &ModelConfig, dims: &Dims, video_seed: u64, text_seed: u64) -> Result<Self> {
        Ok(Self {
            video: init_params(EncoderKind::Video, video_seed, &cfg.encoder_shape(dims.video_dim))?,
            text: init_params(EncoderKind::Text, text_seed, &cfg.encoder_shape(dims.text_dim))?,
        })
    }
}

/// Parameters of both student branches. They never share storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub inheritance: BranchParams,
    pub exploration: BranchParams,
}

impl ModelState {
    /// Seeded initialization; every encoder draws from its own stream.
    pub fn init(cfg: &ModelConfig, dims: &Dims, seed: u64) -> Result<Self> {
        let s = seed.wrapping_mul(4);
        Ok(Self {
            inheritance: BranchParams::init(cfg, dims, s, s.wrapping_add(1))?,
            exploration: BranchParams::init(cfg, dims, s.wrapping_add(2), s.wrapping_add(3))?,
        })
    }

    /// Every parameter with its dotted name, in serialization order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (branch, p) in [("inheritance", &self.inheritance), ("exploration", &self.exploration)] {
            for (enc, params) in [("video", &p.video), ("text", &p.text)] {
                let names = params.map(|name, _| format!("{branch}.{enc}.{name}"));
                out.extend(names.params().into_iter().cloned().zip(params.params()));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.inheritance.video.params_mut();
        out.extend(self.inheritance.text.params_mut());
        out.extend(self.exploration.video.params_mut());
        out.extend(self.exploration.text.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rounds every parameter to `f32`, as a checkpoint stores it.
    pub fn rounded_to_f32(&self) -> ModelState {
        let mut out = self.clone();
        for t in out.params_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dims: Dims,
    pub model: ModelConfig,
    pub branches: BranchMode,
    pub sigma: f64,
    pub seed: u64,
    /// SHA-256 of the resolved training config JSON.
    pub config_hash: String,
    /// Epochs trained when the state was saved.
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(state: &ModelState, header: &CheckpointHeader) -> Vec<u8> {
    let mut header = header.clone();
    header.version = CHECKPOINT_VERSION;
    header.tensors = state
        .named_params()
        .into_iter()
        .map(|(name, t)| TensorEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 4 * state.param_count());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in state.named_params() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, state: &ModelState, header: &CheckpointHeader) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_checkpoint(state, header)).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelState, CheckpointHeader)> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 8 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fail(0, "bad magic bytes, expected \"PRVC\"".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| fail(bytes.len(), "truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| fail(8, format!("invalid header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(fail(8, format!("unsupported checkpoint version {}", header.version)));
    }
    let mut state = ModelState::init(&header.model, &header.dims, 0)
        .map_err(|e| fail(8, format!("header describes an invalid model: {e}")))?;
    let expected: Vec<TensorEntry> = state
        .named_params()
        .into_iter()
        .map(|(name, t)| TensorEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    if expected != header.tensors {
        return Err(fail(8, "tensor table does not match the model config".into()));
    }
    let mut at = 8 + hlen;
    for t in state.params_mut() {
        let n = t.numel();
        let chunk = bytes
            .get(at..at + 4 * n)
            .ok_or_else(|| fail(bytes.len(), "truncated parameter data".into()))?;
        for (v, c) in t.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
        }
        at += 4 * n;
    }
    if at != bytes.len() {
        return Err(fail(at, "trailing bytes after parameters".into()));
    }
    Ok((state, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
