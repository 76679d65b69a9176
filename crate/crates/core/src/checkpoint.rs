//! Checkpoint directory format: `manifest.json` describing the model plus
//! `weights.bin` with little-endian f64 tensors concatenated in manifest
//! order. Byte-identical for identical model state and provenance inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use dmoe_numeric::Tensor;

use crate::artifact::{read_json, sha256_bytes, write_json};
use crate::error::{io_err, DmoeError, Result};
use crate::model::{
    AttentionParams, Block, FfnKind, FfnParams, LayerNormParams, ModelConfig, MoeParams,
    TransformerModel,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Moe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeMeta {
    /// Indices of the extended blocks.
    pub layers: Vec<usize>,
    pub num_experts: usize,
    pub top_k: usize,
    /// Group label per expert index (shared across extended layers).
    pub expert_groups: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into weights.bin.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub layer_kinds: Vec<LayerKind>,
    pub moe: Option<MoeMeta>,
    pub tensors: Vec<TensorRecord>,
    pub inputs: BTreeMap<String, String>,
}

/// In-memory checkpoint: plain data, safe to move across threads.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    /// Tensor data aligned with `manifest.tensors`.
    pub data: Vec<Vec<f64>>,
}

fn weights_bytes(data: &[Vec<f64>]) -> Vec<u8> {
    let total: usize = data.iter().map(|t| t.len() * 8).sum();
    let mut bytes = Vec::with_capacity(total);
    for tensor in data {
        for v in tensor {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

impl Checkpoint {
    pub fn from_model(
        model: &TransformerModel,
        inputs: BTreeMap<String, String>,
    ) -> Checkpoint {
        let named = model.named_params();
        let mut tensors = Vec::with_capacity(named.len());
        let mut data = Vec::with_capacity(named.len());
        let mut offset = 0u64;
        for (name, t) in named {
            tensors.push(TensorRecord { name, shape: t.shape().to_vec(), offset });
            offset += (t.numel() * 8) as u64;
            data.push(t.to_vec());
        }
        let layer_kinds = model
            .blocks
            .iter()
            .map(|b| match b.ffn {
                FfnKind::Dense(_) => LayerKind::Dense,
                FfnKind::Moe(_) => LayerKind::Moe,
            })
            .collect();
        let moe = model.blocks.iter().find_map(|b| match &b.ffn {
            FfnKind::Moe(m) => Some(MoeMeta {
                layers: model.moe_layers(),
                num_experts: m.experts.len(),
                top_k: m.top_k,
                expert_groups: m.expert_groups.clone(),
            }),
            FfnKind::Dense(_) => None,
        });
        Checkpoint {
            manifest: CheckpointManifest {
                version: CHECKPOINT_VERSION,
                model: model.config,
                layer_kinds,
                moe,
                tensors,
                inputs,
            },
            data,
        }
    }

    /// Content hash of the weight bytes; used as the checkpoint identity in
    /// downstream artifacts.
    pub fn id(&self) -> String {
        sha256_bytes(&weights_bytes(&self.data))
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.manifest
            .tensors
            .iter()
            .position(|r| r.name == name)
            .map(|i| (self.manifest.tensors[i].shape.as_slice(), self.data[i].as_slice()))
    }

    pub fn require_tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensor(name)
            .ok_or_else(|| DmoeError::validation(format!("checkpoint missing tensor {name}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        let path = dir.join("weights.bin");
        fs::write(&path, weights_bytes(&self.data)).map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(DmoeError::validation(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let path = dir.join("weights.bin");
        if !path.exists() {
            return Err(DmoeError::MissingInput(path));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let mut data = Vec::with_capacity(manifest.tensors.len());
        for record in &manifest.tensors {
            let numel: usize = record.shape.iter().product();
            let start = record.offset as usize;
            let end = start + numel * 8;
            if end > bytes.len() {
                return Err(DmoeError::validation(format!(
                    "tensor {} overruns weights.bin",
                    record.name
                )));
            }
            let values = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data.push(values);
        }
        Ok(Checkpoint { manifest, data })
    }

    /// Rebuilds a live model; the inverse of [`Checkpoint::from_model`].
    pub fn to_model(&self) -> Result<TransformerModel> {
        let cfg = self.manifest.model;
        cfg.validate()?;
        if self.manifest.layer_kinds.len() != cfg.num_layers {
            return Err(DmoeError::validation("layer_kinds length disagrees with config"));
        }
        let leaf = |name: &str| -> Result<Tensor> {
            let (shape, data) = self.require_tensor(name)?;
            Ok(Tensor::leaf(data.to_vec(), shape.to_vec(), true)?)
        };
        let ln = |prefix: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams { gamma: leaf(&format!("{prefix}.gamma"))?, beta: leaf(&format!("{prefix}.beta"))? })
        };
        let ffn = |prefix: &str| -> Result<FfnParams> {
            Ok(FfnParams {
                w1: leaf(&format!("{prefix}.w1"))?,
                b1: leaf(&format!("{prefix}.b1"))?,
                w2: leaf(&format!("{prefix}.w2"))?,
                b2: leaf(&format!("{prefix}.b2"))?,
            })
        };
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for (l, kind) in self.manifest.layer_kinds.iter().enumerate() {
            let p = format!("block{l}");
            let ffn_kind = match kind {
                LayerKind::Dense => FfnKind::Dense(ffn(&format!("{p}.ffn"))?),
                LayerKind::Moe => {
                    let meta = self.manifest.moe.as_ref().ok_or_else(|| {
                        DmoeError::validation("moe layer present but moe metadata missing")
                    })?;
                    let experts = (0..meta.num_experts)
                        .map(|e| ffn(&format!("{p}.moe.expert{e}")))
                        .collect::<Result<Vec<_>>>()?;
                    FfnKind::Moe(MoeParams {
                        experts,
                        router: leaf(&format!("{p}.moe.router"))?,
                        top_k: meta.top_k,
                        expert_groups: meta.expert_groups.clone(),
                    })
                }
            };
            blocks.push(Block {
                ln1: ln(&format!("{p}.ln1"))?,
                attn: AttentionParams {
                    wq: leaf(&format!("{p}.attn.wq"))?,
                    bq: leaf(&format!("{p}.attn.bq"))?,
                    wk: leaf(&format!("{p}.attn.wk"))?,
                    bk: leaf(&format!("{p}.attn.bk"))?,
                    wv: leaf(&format!("{p}.attn.wv"))?,
                    bv: leaf(&format!("{p}.attn.bv"))?,
                    wo: leaf(&format!("{p}.attn.wo"))?,
                    bo: leaf(&format!("{p}.attn.bo"))?,
                },
                ln2: ln(&format!("{p}.ln2"))?,
                ffn: ffn_kind,
            });
        }
        Ok(TransformerModel {
            config: cfg,
            token_embedding: leaf("token_embedding")?,
            pos_embedding: leaf("pos_embedding")?,
            blocks,
            final_ln: ln("final_ln")?,
            head_w: leaf("head.w")?,
            head_b: leaf("head.b")?,
        })
    }
}
