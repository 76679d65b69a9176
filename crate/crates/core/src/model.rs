//! Decoder-only transformer whose feed-forward sub-layers are either dense or
//! mixture-of-experts with a per-token linear router.
//!
//! Pre-norm blocks, learned positional embeddings, GELU activations, no
//! weight tying. Experts replace only the FFN; attention and norms stay
//! shared. Router logits are computed from the pre-FFN normalized hidden
//! state.

use serde::{Deserialize, Serialize};

use dmoe_numeric::{ops, Rng, Tensor};

use crate::error::{DmoeError, Result};

pub const INIT_STD: f64 = 0.02;
const TAG_MODEL_INIT: u64 = 0x21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_sequence_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 8,
            hidden_dim: 128,
            num_heads: 4,
            ffn_dim: 512,
            vocab_size: 33,
            max_sequence_length: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_dim == 0
            || self.num_heads == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
            || self.max_sequence_length == 0
        {
            return Err(DmoeError::validation("all model dimensions must be >= 1"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(DmoeError::validation(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct MoeParams {
    pub experts: Vec<FfnParams>,
    pub router: Tensor,
    pub top_k: usize,
    /// Language-group label carried by each expert.
    pub expert_groups: Vec<usize>,
}

pub enum FfnKind {
    Dense(FfnParams),
    Moe(MoeParams),
}

pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnKind,
}

pub struct TransformerModel {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub pos_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNormParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Per-token routing decision for training and inference.
#[derive(Clone, Copy, Debug)]
pub enum RoutingMode<'a> {
    /// Combine the top_k experts per token with renormalized gates.
    SoftTopK,
    /// Force every token through one expert with gate 1.
    HardExpert(usize),
    /// Route each token to the expert indexed by its sequence's group.
    HardGroup(&'a [usize]),
}

/// Data-level router summary: probabilities, top-k picks, renormalized gates.
#[derive(Clone, Debug)]
pub struct RouterOutput {
    pub num_experts: usize,
    /// Row-major [tokens x num_experts] softmax probabilities.
    pub probabilities: Vec<f64>,
    pub selected_experts: Vec<Vec<usize>>,
    pub gate_weights: Vec<Vec<f64>>,
}

/// Top-k selection with ties broken toward the lower expert index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn router_output_from_probs(probs: &[f64], tokens: usize, g: usize, top_k: usize) -> RouterOutput {
    let mut selected = Vec::with_capacity(tokens);
    let mut gates = Vec::with_capacity(tokens);
    for t in 0..tokens {
        let row = &probs[t * g..(t + 1) * g];
        let picks = top_k_indices(row, top_k);
        let total: f64 = picks.iter().map(|&e| row[e]).sum();
        gates.push(picks.iter().map(|&e| row[e] / total).collect());
        selected.push(picks);
    }
    RouterOutput {
        num_experts: g,
        probabilities: probs.to_vec(),
        selected_experts: selected,
        gate_weights: gates,
    }
}

/// Everything a forward pass produces: logits plus per-MoE-layer router
/// tensors (kept differentiable for the classification loss).
pub struct ForwardOutput {
    pub logits: Tensor,
    pub batch_size: usize,
    pub sequence_length: usize,
    /// (layer index, router logits [T x g], router probabilities [T x g])
    pub routers: Vec<(usize, Tensor, Tensor)>,
}

pub(crate) fn normal_tensor(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    rng.fill_normal(&mut data, std);
    Tensor::leaf(data, shape, true).expect("init tensor")
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape, true)
}

fn ones_param(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::leaf(vec![1.0; n], shape, true).expect("ones tensor")
}

fn new_ffn(rng: &mut Rng, d: usize, f: usize) -> FfnParams {
    FfnParams {
        w1: normal_tensor(rng, vec![d, f], INIT_STD),
        b1: zeros_param(vec![f]),
        w2: normal_tensor(rng, vec![f, d], INIT_STD),
        b2: zeros_param(vec![d]),
    }
}

impl TransformerModel {
    /// Fresh dense model with N(0, 0.02^2) weights.
    pub fn new_dense(config: ModelConfig, seed: u64) -> Result<TransformerModel> {
        config.validate()?;
        let mut rng = Rng::stream(seed, &[TAG_MODEL_INIT]);
        let d = config.hidden_dim;
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln1: LayerNormParams { gamma: ones_param(vec![d]), beta: zeros_param(vec![d]) },
                attn: AttentionParams {
                    wq: normal_tensor(&mut rng, vec![d, d], INIT_STD),
                    bq: zeros_param(vec![d]),
                    wk: normal_tensor(&mut rng, vec![d, d], INIT_STD),
                    bk: zeros_param(vec![d]),
                    wv: normal_tensor(&mut rng, vec![d, d], INIT_STD),
                    bv: zeros_param(vec![d]),
                    wo: normal_tensor(&mut rng, vec![d, d], INIT_STD),
                    bo: zeros_param(vec![d]),
                },
                ln2: LayerNormParams { gamma: ones_param(vec![d]), beta: zeros_param(vec![d]) },
                ffn: FfnKind::Dense(new_ffn(&mut rng, d, config.ffn_dim)),
            })
            .collect();
        Ok(TransformerModel {
            token_embedding: normal_tensor(&mut rng, vec![config.vocab_size, d], INIT_STD),
            pos_embedding: normal_tensor(&mut rng, vec![config.max_sequence_length, d], INIT_STD),
            blocks,
            final_ln: LayerNormParams { gamma: ones_param(vec![d]), beta: zeros_param(vec![d]) },
            head_w: normal_tensor(&mut rng, vec![d, config.vocab_size], INIT_STD),
            head_b: zeros_param(vec![config.vocab_size]),
            config,
        })
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| matches!(b.ffn, FfnKind::Moe(_)).then_some(i))
            .collect()
    }

    pub fn num_experts(&self) -> Option<usize> {
        self.blocks.iter().find_map(|b| match &b.ffn {
            FfnKind::Moe(m) => Some(m.experts.len()),
            FfnKind::Dense(_) => None,
        })
    }

    /// Parameters in a stable, name-paired order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("token_embedding".to_string(), self.token_embedding.clone()));
        out.push(("pos_embedding".to_string(), self.pos_embedding.clone()));
        for (l, block) in self.blocks.iter().enumerate() {
            let p = format!("block{l}");
            out.push((format!("{p}.ln1.gamma"), block.ln1.gamma.clone()));
            out.push((format!("{p}.ln1.beta"), block.ln1.beta.clone()));
            for (n, t) in [
                ("wq", &block.attn.wq),
                ("bq", &block.attn.bq),
                ("wk", &block.attn.wk),
                ("bk", &block.attn.bk),
                ("wv", &block.attn.wv),
                ("bv", &block.attn.bv),
                ("wo", &block.attn.wo),
                ("bo", &block.attn.bo),
            ] {
                out.push((format!("{p}.attn.{n}"), (*t).clone()));
            }
            out.push((format!("{p}.ln2.gamma"), block.ln2.gamma.clone()));
            out.push((format!("{p}.ln2.beta"), block.ln2.beta.clone()));
            match &block.ffn {
                FfnKind::Dense(f) => {
                    out.push((format!("{p}.ffn.w1"), f.w1.clone()));
                    out.push((format!("{p}.ffn.b1"), f.b1.clone()));
                    out.push((format!("{p}.ffn.w2"), f.w2.clone()));
                    out.push((format!("{p}.ffn.b2"), f.b2.clone()));
                }
                FfnKind::Moe(m) => {
                    for (e, f) in m.experts.iter().enumerate() {
                        out.push((format!("{p}.moe.expert{e}.w1"), f.w1.clone()));
                        out.push((format!("{p}.moe.expert{e}.b1"), f.b1.clone()));
                        out.push((format!("{p}.moe.expert{e}.w2"), f.w2.clone()));
                        out.push((format!("{p}.moe.expert{e}.b2"), f.b2.clone()));
                    }
                    out.push((format!("{p}.moe.router"), m.router.clone()));
                }
            }
        }
        out.push(("final_ln.gamma".to_string(), self.final_ln.gamma.clone()));
        out.push(("final_ln.beta".to_string(), self.final_ln.beta.clone()));
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn total_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    fn ffn_forward(f: &FfnParams, x: &Tensor) -> Result<Tensor> {
        let h = ops::add_bias(&ops::matmul(x, &f.w1)?, &f.b1)?;
        let h = ops::gelu(&h)?;
        Ok(ops::add_bias(&ops::matmul(&h, &f.w2)?, &f.b2)?)
    }

    /// Dispatch a token subset through one expert and scatter it back,
    /// scaled by per-token gates (`None` means gate 1).
    fn expert_dispatch(
        expert: &FfnParams,
        h: &Tensor,
        idx: &[usize],
        gates: Option<&Tensor>,
        total_tokens: usize,
    ) -> Result<Tensor> {
        let all = idx.len() == total_tokens && idx.iter().enumerate().all(|(i, &t)| i == t);
        let x = if all { h.clone() } else { ops::gather_rows(h, idx)? };
        let mut out = Self::ffn_forward(expert, &x)?;
        if let Some(g) = gates {
            let sub = if all {
                g.clone()
            } else {
                let g2 = ops::reshape(g, vec![total_tokens, 1])?;
                ops::reshape(&ops::gather_rows(&g2, idx)?, vec![idx.len()])?
            };
            out = ops::scale_rows(&out, &sub)?;
        }
        if all {
            Ok(out)
        } else {
            Ok(ops::scatter_rows(&out, idx, total_tokens)?)
        }
    }

    fn moe_forward(
        moe: &MoeParams,
        h: &Tensor,
        mode: &RoutingMode,
        batch: usize,
        seq: usize,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let tokens = batch * seq;
        let g = moe.experts.len();
        let router_logits = ops::matmul(h, &moe.router)?;
        let router_probs = ops::softmax(&router_logits)?;

        let out = match mode {
            RoutingMode::HardExpert(e) => {
                if *e >= g {
                    return Err(DmoeError::validation(format!(
                        "hard routing to expert {e} but layer has {g} experts"
                    )));
                }
                Self::ffn_forward(&moe.experts[*e], h)?
            }
            RoutingMode::HardGroup(groups) => {
                if groups.len() != batch {
                    return Err(DmoeError::validation(format!(
                        "hard group routing needs one group per sequence ({} != {batch})",
                        groups.len()
                    )));
                }
                if let Some(&bad) = groups.iter().find(|&&gr| gr >= g) {
                    return Err(DmoeError::validation(format!(
                        "group {bad} exceeds expert count {g}"
                    )));
                }
                let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); g];
                for t in 0..tokens {
                    per_expert[groups[t / seq]].push(t);
                }
                let mut acc: Option<Tensor> = None;
                for (e, idx) in per_expert.iter().enumerate() {
                    if idx.is_empty() {
                        continue;
                    }
                    let part = Self::expert_dispatch(&moe.experts[e], h, idx, None, tokens)?;
                    acc = Some(match acc {
                        None => part,
                        Some(a) => ops::add(&a, &part)?,
                    });
                }
                acc.expect("non-empty batch")
            }
            RoutingMode::SoftTopK => {
                let probs = router_probs.to_vec();
                let mut mask = vec![0.0; tokens * g];
                let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); g];
                for t in 0..tokens {
                    for e in top_k_indices(&probs[t * g..(t + 1) * g], moe.top_k) {
                        mask[t * g + e] = 1.0;
                        per_expert[e].push(t);
                    }
                }
                let mask = Tensor::constant(mask, vec![tokens, g])?;
                let selected = ops::mul(&router_probs, &mask)?;
                let denom = ops::row_sum(&selected)?;
                let gates = ops::div_rows(&selected, &denom)?;
                let mut acc: Option<Tensor> = None;
                for (e, idx) in per_expert.iter().enumerate() {
                    if idx.is_empty() {
                        continue;
                    }
                    let gate_col = ops::col(&gates, e)?;
                    let part =
                        Self::expert_dispatch(&moe.experts[e], h, idx, Some(&gate_col), tokens)?;
                    acc = Some(match acc {
                        None => part,
                        Some(a) => ops::add(&a, &part)?,
                    });
                }
                acc.expect("non-empty batch")
            }
        };
        Ok((out, router_logits, router_probs))
    }

    /// Forward pass over a [batch x seq] token matrix.
    pub fn forward(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        mode: RoutingMode,
    ) -> Result<ForwardOutput> {
        if batch == 0 || seq == 0 || batch * seq != tokens.len() {
            return Err(DmoeError::validation(format!(
                "token buffer {} does not match {batch}x{seq}",
                tokens.len()
            )));
        }
        if seq > self.config.max_sequence_length {
            return Err(DmoeError::validation(format!(
                "sequence length {seq} exceeds maximum {}",
                self.config.max_sequence_length
            )));
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(DmoeError::validation(format!("token {bad} outside vocabulary {v}")));
        }

        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let t_total = batch * seq;

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..t_total).map(|t| t % seq).collect();
        let tok = ops::gather_rows(&self.token_embedding, &ids)?;
        let pe = ops::gather_rows(&self.pos_embedding, &pos)?;
        let mut x = ops::add(&tok, &pe)?;

        let mut routers = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            // Attention sub-layer.
            let h = ops::layer_norm(&x, &block.ln1.gamma, &block.ln1.beta)?;
            let q = ops::add_bias(&ops::matmul(&h, &block.attn.wq)?, &block.attn.bq)?;
            let k = ops::add_bias(&ops::matmul(&h, &block.attn.wk)?, &block.attn.bk)?;
            let vv = ops::add_bias(&ops::matmul(&h, &block.attn.wv)?, &block.attn.bv)?;
            let split = |t: &Tensor| -> Result<Tensor> {
                let t = ops::reshape(t, vec![batch, seq, heads, dh])?;
                let t = ops::permute(&t, &[0, 2, 1, 3])?;
                Ok(ops::reshape(&t, vec![batch * heads, seq, dh])?)
            };
            let (q, k, vv) = (split(&q)?, split(&k)?, split(&vv)?);
            // Scaling q (S x dh) is cheaper than scaling scores (S x S).
            let q = ops::scale(&q, 1.0 / (dh as f64).sqrt())?;
            let scores = ops::bmm_nt(&q, &k)?;
            let probs = ops::causal_softmax(&scores)?;
            let ctx = ops::bmm(&probs, &vv)?;
            let ctx = ops::reshape(&ctx, vec![batch, heads, seq, dh])?;
            let ctx = ops::permute(&ctx, &[0, 2, 1, 3])?;
            let ctx = ops::reshape(&ctx, vec![t_total, d])?;
            let attn_out = ops::add_bias(&ops::matmul(&ctx, &block.attn.wo)?, &block.attn.bo)?;
            x = ops::add(&x, &attn_out)?;

            // FFN sub-layer (dense or MoE).
            let h2 = ops::layer_norm(&x, &block.ln2.gamma, &block.ln2.beta)?;
            let ffn_out = match &block.ffn {
                FfnKind::Dense(f) => Self::ffn_forward(f, &h2)?,
                FfnKind::Moe(m) => {
                    let (out, rl, rp) = Self::moe_forward(m, &h2, &mode, batch, seq)?;
                    routers.push((l, rl, rp));
                    out
                }
            };
            x = ops::add(&x, &ffn_out)?;
        }

        let x = ops::layer_norm(&x, &self.final_ln.gamma, &self.final_ln.beta)?;
        let logits = ops::add_bias(&ops::matmul(&x, &self.head_w)?, &self.head_b)?;
        let logits = ops::reshape(&logits, vec![batch, seq, v])?;
        Ok(ForwardOutput { logits, batch_size: batch, sequence_length: seq, routers })
    }

    /// Mean next-token cross-entropy over positions 1..seq-1.
    pub fn clm_loss(output: &ForwardOutput, tokens: &[u32]) -> Result<Tensor> {
        let (b, s) = (output.batch_size, output.sequence_length);
        if s < 2 {
            return Err(DmoeError::validation("causal LM loss needs sequences of length >= 2"));
        }
        let v = output.logits.shape()[2];
        let preds = ops::slice(&output.logits, 1, 0, s - 1)?;
        let preds = ops::reshape(&preds, vec![b * (s - 1), v])?;
        let mut targets = Vec::with_capacity(b * (s - 1));
        for seq_idx in 0..b {
            for t in 1..s {
                targets.push(tokens[seq_idx * s + t] as usize);
            }
        }
        Ok(ops::cross_entropy(&preds, &targets)?)
    }

    pub fn causal_lm_loss(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        mode: RoutingMode,
    ) -> Result<Tensor> {
        let out = self.forward(tokens, batch, seq, mode)?;
        Self::clm_loss(&out, tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dmoe_numeric::{backward, zero_grads, AdamW, AdamWConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 11,
            max_sequence_length: 16,
        }
    }

    fn demo_tokens(n: usize, seed: u64) -> Vec<u32> {
        let mut rng = Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.below(11) as u32).collect()
    }

    /// Clones every parameter of `from` into a MoE copy with `g` identical
    /// experts at `layers` (test-local extension; the real one lives in the
    /// training module).
    fn extend_identical(from: &TransformerModel, layers: &[usize], g: usize) -> TransformerModel {
        let clone_t =
            |t: &Tensor| Tensor::leaf(t.to_vec(), t.shape().to_vec(), true).unwrap();
        let clone_ffn = |f: &FfnParams| FfnParams {
            w1: clone_t(&f.w1),
            b1: clone_t(&f.b1),
            w2: clone_t(&f.w2),
            b2: clone_t(&f.b2),
        };
        let mut rng = Rng::seed_from_u64(99);
        let blocks = from
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| Block {
                ln1: LayerNormParams { gamma: clone_t(&b.ln1.gamma), beta: clone_t(&b.ln1.beta) },
                attn: AttentionParams {
                    wq: clone_t(&b.attn.wq),
                    bq: clone_t(&b.attn.bq),
                    wk: clone_t(&b.attn.wk),
                    bk: clone_t(&b.attn.bk),
                    wv: clone_t(&b.attn.wv),
                    bv: clone_t(&b.attn.bv),
                    wo: clone_t(&b.attn.wo),
                    bo: clone_t(&b.attn.bo),
                },
                ln2: LayerNormParams { gamma: clone_t(&b.ln2.gamma), beta: clone_t(&b.ln2.beta) },
                ffn: match &b.ffn {
                    FfnKind::Dense(f) if layers.contains(&l) => FfnKind::Moe(MoeParams {
                        experts: (0..g).map(|_| clone_ffn(f)).collect(),
                        router: normal_tensor(&mut rng, vec![from.config.hidden_dim, g], 0.02),
                        top_k: 2.min(g),
                        expert_groups: (0..g).collect(),
                    }),
                    FfnKind::Dense(f) => FfnKind::Dense(clone_ffn(f)),
                    FfnKind::Moe(_) => unreachable!("test extends dense models"),
                },
            })
            .collect();
        TransformerModel {
            config: from.config,
            token_embedding: clone_t(&from.token_embedding),
            pos_embedding: clone_t(&from.pos_embedding),
            blocks,
            final_ln: LayerNormParams {
                gamma: clone_t(&from.final_ln.gamma),
                beta: clone_t(&from.final_ln.beta),
            },
            head_w: clone_t(&from.head_w),
            head_b: clone_t(&from.head_b),
        }
    }

    #[test]
    fn dense_model_has_no_router_outputs() {
        let m = TransformerModel::new_dense(tiny_config(), 1).unwrap();
        let tokens = demo_tokens(2 * 8, 5);
        let out = m.forward(&tokens, 2, 8, RoutingMode::SoftTopK).unwrap();
        assert!(out.routers.is_empty());
        assert_eq!(out.logits.shape(), &[2, 8, 11]);
    }

    #[test]
    fn identical_experts_match_hard_expert_zero() {
        let dense = TransformerModel::new_dense(tiny_config(), 2).unwrap();
        let moe = extend_identical(&dense, &[0, 1], 3);
        let tokens = demo_tokens(2 * 8, 6);
        let soft = moe.forward(&tokens, 2, 8, RoutingMode::SoftTopK).unwrap();
        let hard = moe.forward(&tokens, 2, 8, RoutingMode::HardExpert(0)).unwrap();
        let dense_out = dense.forward(&tokens, 2, 8, RoutingMode::SoftTopK).unwrap();
        for ((a, b), c) in soft
            .logits
            .data()
            .iter()
            .zip(hard.logits.data().iter())
            .zip(dense_out.logits.data().iter())
        {
            assert!((a - b).abs() < 1e-9);
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn gate_weights_match_renormalized_router_probs() {
        let dense = TransformerModel::new_dense(tiny_config(), 3).unwrap();
        let moe = extend_identical(&dense, &[1], 2);
        let tokens = demo_tokens(4, 7);
        let out = moe.forward(&tokens, 1, 4, RoutingMode::SoftTopK).unwrap();
        assert_eq!(out.routers.len(), 1);
        let (layer, logits, probs) = &out.routers[0];
        assert_eq!(*layer, 1);
        let ro = router_output_from_probs(&probs.to_vec(), 4, 2, 2);
        for t in 0..4 {
            let gsum: f64 = ro.gate_weights[t].iter().sum();
            assert!((gsum - 1.0).abs() < 1e-9);
            let psum: f64 = ro.probabilities[t * 2..(t + 1) * 2].iter().sum();
            assert!((psum - 1.0).abs() < 1e-9);
            // Direct softmax-renormalization from router logits.
            let row = &logits.to_vec()[t * 2..(t + 1) * 2];
            let m = row[0].max(row[1]);
            let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, &exp) in ro.selected_experts[t].iter().enumerate() {
                assert!((ro.gate_weights[t][j] - e[exp] / z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hard_expert_out_of_range_rejected() {
        let dense = TransformerModel::new_dense(tiny_config(), 4).unwrap();
        let moe = extend_identical(&dense, &[0], 2);
        let tokens = demo_tokens(8, 8);
        assert!(moe.forward(&tokens, 1, 8, RoutingMode::HardExpert(2)).is_err());
    }

    #[test]
    fn causality_perturbation_only_affects_later_positions() {
        let m = TransformerModel::new_dense(tiny_config(), 5).unwrap();
        let tokens = demo_tokens(10, 9);
        let mut perturbed = tokens.clone();
        let t_mod = 6;
        perturbed[t_mod] = (perturbed[t_mod] + 1) % 11;
        let a = m.forward(&tokens, 1, 10, RoutingMode::SoftTopK).unwrap();
        let b = m.forward(&perturbed, 1, 10, RoutingMode::SoftTopK).unwrap();
        let (av, bv) = (a.logits.to_vec(), b.logits.to_vec());
        for pos in 0..t_mod {
            assert_eq!(
                av[pos * 11..(pos + 1) * 11],
                bv[pos * 11..(pos + 1) * 11],
                "position {pos} changed by a later-token perturbation"
            );
        }
        assert_ne!(av[t_mod * 11..], bv[t_mod * 11..]);
    }

    #[test]
    fn uniform_logits_give_ln_vocab_loss() {
        let cfg = ModelConfig { vocab_size: 33, ..tiny_config() };
        let m = TransformerModel::new_dense(cfg, 6).unwrap();
        // Zero the head: logits become exactly uniform.
        m.head_w.apply_update(|d| d.fill(0.0));
        m.head_b.apply_update(|d| d.fill(0.0));
        let tokens: Vec<u32> = (0..16).map(|i| (i % 33) as u32).collect();
        let loss = m.causal_lm_loss(&tokens, 2, 8, RoutingMode::SoftTopK).unwrap();
        assert!((loss.item() - (33f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn clm_loss_is_shifted_cross_entropy() {
        let m = TransformerModel::new_dense(tiny_config(), 7).unwrap();
        let tokens = demo_tokens(2 * 6, 11);
        let out = m.forward(&tokens, 2, 6, RoutingMode::SoftTopK).unwrap();
        let loss = TransformerModel::clm_loss(&out, &tokens).unwrap();

        // Independent recomputation from raw logits.
        let lv = out.logits.to_vec();
        let v = 11;
        let mut total = 0.0;
        let mut count = 0.0;
        for b in 0..2 {
            for t in 0..5 {
                let row = &lv[(b * 6 + t) * v..(b * 6 + t + 1) * v];
                let target = tokens[b * 6 + t + 1] as usize;
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                total += m + z.ln() - row[target];
                count += 1.0;
            }
        }
        assert!((loss.item() - total / count).abs() < 1e-12);
    }

    #[test]
    fn short_sequences_rejected() {
        let m = TransformerModel::new_dense(tiny_config(), 8).unwrap();
        assert!(m.causal_lm_loss(&[1], 1, 1, RoutingMode::SoftTopK).is_err());
    }

    #[test]
    fn overfits_repeating_token() {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 5,
            max_sequence_length: 8,
        };
        let m = TransformerModel::new_dense(cfg, 9).unwrap();
        let tokens = vec![3u32; 8];
        let params = m.params();
        let mut opt =
            AdamW::new(&params, AdamWConfig { learning_rate: 3e-3, ..Default::default() })
                .unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            zero_grads(&params);
            let loss = m.causal_lm_loss(&tokens, 1, 8, RoutingMode::SoftTopK).unwrap();
            last = loss.item();
            backward(&loss).unwrap();
            opt.step(&params).unwrap();
        }
        assert!(last < 0.01, "memorization loss {last}");
    }
}
