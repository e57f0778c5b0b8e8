//! Checkpoint files: magic, a length-prefixed JSON header, then one tensor
//! blob per weight matrix and bias vector (raw parameters, then EMA shadow).

use std::io::Read;

use serde::{Deserialize, Serialize};

use super::mlp::DenoiserParams;
use super::{EmaState, TrainError};
use crate::blob::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub sizes: Vec<usize>,
    pub ema_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: DenoiserParams,
    pub ema: EmaState,
}

fn push_params(out: &mut Vec<u8>, p: &DenoiserParams) {
    for l in 0..p.layer_count() {
        let (w, b) = p.layer(l);
        let (n_in, n_out) = (p.sizes()[l], p.sizes()[l + 1]);
        out.extend(Tensor::f64(vec![n_out, n_in], w.to_vec()).expect("layer shape").to_bytes());
        out.extend(Tensor::f64(vec![n_out], b.to_vec()).expect("layer shape").to_bytes());
    }
}

fn read_params(r: &mut &[u8], sizes: &[usize]) -> Result<DenoiserParams, TrainError> {
    let mut values = Vec::new();
    for w in sizes.windows(2) {
        let wt = Tensor::read_from(r)?;
        wt.expect_dims(&[w[1], w[0]])?;
        values.extend_from_slice(wt.as_f64()?);
        let bt = Tensor::read_from(r)?;
        bt.expect_dims(&[w[1]])?;
        values.extend_from_slice(bt.as_f64()?);
    }
    DenoiserParams::from_values(sizes.to_vec(), values)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        push_params(&mut out, &self.params);
        push_params(&mut out, &self.ema.shadow);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        let mut word = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic bytes".into()));
        }
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let params = read_params(&mut r, &header.sizes)?;
        let shadow = read_params(&mut r, &header.sizes)?;
        Ok(Self {
            ema: EmaState {
                shadow,
                decay: header.ema_decay,
            },
            header,
            params,
        })
    }
}
