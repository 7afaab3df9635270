//! Binary checkpoints: an 8-byte magic, a little-endian u64 header length,
//! a JSON header, then every tensor as little-endian f32 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::trainer::{AdamMoments, AdamW, Model, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"MKPCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub trainable: bool,
    /// Offset in f32 elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: TrainConfig,
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub vocab: Vec<String>,
    pub iteration: usize,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let model = &state.model;
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push =
        |name: &str, kind, trainable, a: &Array2<f32>, tensors: &mut Vec<TensorEntry>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                rows: a.nrows(),
                cols: a.ncols(),
                trainable,
                offset,
            });
            offset += a.len();
            for v in a.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        };
    for (name, p) in model.params.iter() {
        push(name, TensorKind::Param, p.trainable, &p.value, &mut tensors);
    }
    for (name, m) in &state.optimizer.moments {
        push(name, TensorKind::AdamM, false, &m.m, &mut tensors);
        push(name, TensorKind::AdamV, false, &m.v, &mut tensors);
    }
    let header = Header {
        config: model.config.clone(),
        width: model.width,
        height: model.height,
        views: model.views,
        vocab: model.vocab.tokens().to_vec(),
        iteration: state.iteration,
        optimizer_step: state.optimizer.step,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    header.config.validate()?;
    let data = &bytes[data_start..];
    let read = |e: &TensorEntry| -> Result<Array2<f32>> {
        let n = e.rows * e.cols;
        let (s, t) = (e.offset * 4, (e.offset + n) * 4);
        if t > data.len() {
            return Err(bad(format!("tensor {} exceeds data section", e.name)));
        }
        let vals: Vec<f32> = data[s..t]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((e.rows, e.cols), vals).expect("length checked"))
    };
    let mut params = ParamStore::new();
    let mut moments: IndexMap<String, AdamMoments<f32>> = IndexMap::new();
    for e in &header.tensors {
        let a = read(e)?;
        match e.kind {
            TensorKind::Param => params.insert(e.name.clone(), a, e.trainable),
            TensorKind::AdamM => {
                moments.insert(
                    e.name.clone(),
                    AdamMoments {
                        m: a.clone(),
                        v: Array2::zeros(a.raw_dim()),
                    },
                );
            }
            TensorKind::AdamV => {
                let m = moments.get_mut(&e.name).ok_or_else(|| {
                    bad(format!("second moment of {} precedes the first", e.name))
                })?;
                m.v = a;
            }
        }
    }
    let vocab = Vocab::from_tokens(header.vocab)?;
    Ok(TrainState {
        model: Model {
            params,
            config: header.config,
            vocab,
            width: header.width,
            height: header.height,
            views: header.views,
        },
        optimizer: AdamW {
            step: header.optimizer_step,
            moments,
        },
        iteration: header.iteration,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(state))
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::vision::EncoderConfig;

    fn state() -> TrainState {
        let cfg = TrainConfig {
            encoder: EncoderConfig {
                patch_size: 16,
                embed_dim: 8,
                depth: 1,
                heads: 2,
                lora_rank: 2,
            },
            decoder: DecoderConfig {
                embed_dim: 8,
                depth: 1,
                heads: 2,
                max_seq_len: 64,
                lora_rank: 2,
                ..DecoderConfig::default()
            },
            scene_token_count: 64,
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(Model::init(&cfg, 128, 128, 1).unwrap());
        s.iteration = 5;
        s.optimizer.step = 5;
        for (i, m) in s.optimizer.moments.values_mut().enumerate() {
            m.m.fill(i as f32 * 0.25 - 1.0);
            m.v.fill(f32::MIN_POSITIVE);
        }
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let bytes = to_bytes(&s);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = to_bytes(&state());
        assert!(from_bytes(&bytes[..20]).is_err());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let s = state();
        save(&s, &path).unwrap();
        assert_eq!(load(&path).unwrap(), s);
    }
}
