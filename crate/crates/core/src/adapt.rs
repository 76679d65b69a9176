//! New-language adaptation.
//!
//! Scoring forces every token through one expert at every MoE layer and
//! ranks experts by held-out perplexity on the new language. The winner is
//! copied as a fresh expert, the router gains a column, and fine-tuning
//! touches only the new experts and the router (DLA). Full fine-tuning
//! (LAPT) is the forgetting-prone baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use dmoe_numeric::{backward, zero_grads, AdamW, Rng, Tensor};

use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::corpus::{sample_monolingual_batch, TokenizedCorpus};
use crate::error::{DmoeError, Result};
use crate::eval::{stream_nll, EvalConfig};
use crate::model::{RoutingMode, TransformerModel};
use crate::train::{rc_loss_tensor, TrainRecord, TrainReport, TrainerConfig};

const TAG_GRAFT: u64 = 0x51;
const TAG_DLA: u64 = 0x52;
const TAG_LAPT: u64 = 0x53;

pub const ROUTER_GRAFT_NOISE_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub steps: usize,
    pub alpha: f64,
    pub router_scope: RouterScope,
    pub column_init: RouterColumnInit,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            steps: 150,
            alpha: 1.28,
            router_scope: RouterScope::Full,
            column_init: RouterColumnInit::CopyNoise,
        }
    }
}

/// How much of the router stays trainable during DLA.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterScope {
    /// Whole router matrix trainable (default).
    Full,
    /// Only the freshly added column receives updates.
    NewColumnOnly,
    /// Router frozen entirely; diagnostic mode for freezing-soundness checks.
    Frozen,
}

/// Initialization of the grafted router column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterColumnInit {
    /// Copy of the chosen expert's column plus N(0, 0.01^2) noise.
    CopyNoise,
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub new_language: String,
    pub chosen_expert: usize,
    pub per_expert_ppl: Vec<f64>,
    pub frozen_parameter_names: BTreeSet<String>,
    pub trainable_parameter_names: BTreeSet<String>,
    pub inputs: BTreeMap<String, String>,
}

/// Held-out perplexity of the new language under hard routing to each expert
/// (the same expert index forced at every MoE layer).
pub fn score_experts(
    ckpt: &Checkpoint,
    corpus: &TokenizedCorpus,
    new_language: &str,
    eval_cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    let meta = ckpt
        .manifest
        .moe
        .as_ref()
        .ok_or_else(|| DmoeError::validation("expert scoring needs a MoE checkpoint"))?;
    let lang_idx = corpus.index_of(new_language)?;
    let stream = &corpus.languages[lang_idx].heldout;
    if stream.len() < 2 {
        return Err(DmoeError::validation(format!(
            "held-out stream for {new_language} is empty"
        )));
    }
    let model = ckpt.to_model()?;
    let mut ppls = Vec::with_capacity(meta.num_experts);
    for e in 0..meta.num_experts {
        let (nll, tokens) = stream_nll(&model, stream, eval_cfg, RoutingMode::HardExpert(e))?;
        ppls.push((nll / tokens as f64).exp());
    }
    Ok(ppls)
}

/// Lowest-perplexity expert, ties resolved to the lower index.
pub fn choose_expert(per_expert_ppl: &[f64]) -> usize {
    let mut best = 0;
    for (e, &p) in per_expert_ppl.iter().enumerate() {
        if p < per_expert_ppl[best] {
            best = e;
        }
    }
    best
}

/// Appends a deep copy of `chosen_expert` at every MoE layer and grows the
/// router by one column. Existing weights are untouched.
pub fn graft_expert(
    ckpt: &Checkpoint,
    chosen_expert: usize,
    column_init: RouterColumnInit,
    seed: u64,
) -> Result<Checkpoint> {
    let meta = ckpt
        .manifest
        .moe
        .as_ref()
        .ok_or_else(|| DmoeError::validation("grafting needs a MoE checkpoint"))?
        .clone();
    if chosen_expert >= meta.num_experts {
        return Err(DmoeError::validation(format!(
            "chosen expert {chosen_expert} out of range ({} experts)",
            meta.num_experts
        )));
    }
    let g = meta.num_experts;
    let new_expert = g;
    let d = ckpt.manifest.model.hidden_dim;

    let mut tensors: Vec<TensorRecord> = Vec::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0u64;
    let push = |name: String, shape: Vec<usize>, values: Vec<f64>,
                    tensors: &mut Vec<TensorRecord>,
                    data: &mut Vec<Vec<f64>>,
                    offset: &mut u64| {
        tensors.push(TensorRecord { name, shape, offset: *offset });
        *offset += (values.len() * 8) as u64;
        data.push(values);
    };

    for (i, rec) in ckpt.manifest.tensors.iter().enumerate() {
        if let Some(layer) = meta
            .layers
            .iter()
            .find(|&&l| rec.name == format!("block{l}.moe.router"))
        {
            let l = *layer;
            // Insert the copied expert ahead of the router so the tensor
            // order keeps matching the model's parameter order.
            for part in ["w1", "b1", "w2", "b2"] {
                let src = format!("block{l}.moe.expert{chosen_expert}.{part}");
                let (shape, values) = ckpt.require_tensor(&src)?;
                push(
                    format!("block{l}.moe.expert{new_expert}.{part}"),
                    shape.to_vec(),
                    values.to_vec(),
                    &mut tensors,
                    &mut data,
                    &mut offset,
                );
            }
            // Router [d, g] -> [d, g+1].
            let old = &ckpt.data[i];
            let mut grown = vec![0.0; d * (g + 1)];
            let mut rng = Rng::stream(seed, &[TAG_GRAFT, l as u64]);
            for r in 0..d {
                for c in 0..g {
                    grown[r * (g + 1) + c] = old[r * g + c];
                }
                grown[r * (g + 1) + g] = match column_init {
                    RouterColumnInit::CopyNoise => {
                        old[r * g + chosen_expert] + rng.normal() * ROUTER_GRAFT_NOISE_STD
                    }
                    RouterColumnInit::Zero => 0.0,
                };
            }
            push(rec.name.clone(), vec![d, g + 1], grown, &mut tensors, &mut data, &mut offset);
        } else {
            push(
                rec.name.clone(),
                rec.shape.clone(),
                ckpt.data[i].clone(),
                &mut tensors,
                &mut data,
                &mut offset,
            );
        }
    }

    let mut manifest = ckpt.manifest.clone();
    manifest.tensors = tensors;
    let mut new_meta = meta;
    new_meta.num_experts += 1;
    // The grafted expert serves the next group index.
    let next_group = new_meta.expert_groups.iter().max().map(|m| m + 1).unwrap_or(0);
    new_meta.expert_groups.push(next_group);
    manifest.moe = Some(new_meta);
    Ok(Checkpoint { manifest, data })
}

/// Splits a grafted checkpoint's parameters into the DLA trainable set (new
/// experts plus router) and the frozen remainder.
pub fn partition_parameters(
    grafted: &Checkpoint,
    new_expert: usize,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut trainable = BTreeSet::new();
    let mut frozen = BTreeSet::new();
    let expert_tag = format!(".moe.expert{new_expert}.");
    for rec in &grafted.manifest.tensors {
        if rec.name.contains(&expert_tag) || rec.name.ends_with(".moe.router") {
            trainable.insert(rec.name.clone());
        } else {
            frozen.insert(rec.name.clone());
        }
    }
    (trainable, frozen)
}

pub fn build_plan(
    new_language: &str,
    per_expert_ppl: &[f64],
    grafted: &Checkpoint,
    inputs: BTreeMap<String, String>,
) -> Result<AdaptationPlan> {
    let meta = grafted
        .manifest
        .moe
        .as_ref()
        .ok_or_else(|| DmoeError::validation("plan needs a grafted checkpoint"))?;
    let new_expert = meta.num_experts - 1;
    let (trainable, frozen) = partition_parameters(grafted, new_expert);
    Ok(AdaptationPlan {
        new_language: new_language.to_string(),
        chosen_expert: choose_expert(per_expert_ppl),
        per_expert_ppl: per_expert_ppl.to_vec(),
        frozen_parameter_names: frozen,
        trainable_parameter_names: trainable,
        inputs,
    })
}

/// Fine-tunes only the new experts and the router on the new language. All
/// shared blocks, embeddings, head, and old experts stay bitwise unchanged.
/// Training routes the new language hard to its expert and keeps the router
/// classification loss on the new group, mirroring the specialization stage.
pub fn dla_finetune(
    grafted: &Checkpoint,
    corpus: &TokenizedCorpus,
    new_language: &str,
    steps: usize,
    trainer: &TrainerConfig,
    alpha: f64,
    router_scope: RouterScope,
    seed: u64,
) -> Result<(Checkpoint, TrainReport)> {
    let meta = grafted
        .manifest
        .moe
        .as_ref()
        .ok_or_else(|| DmoeError::validation("DLA needs a grafted checkpoint"))?;
    let g = meta.num_experts;
    let new_expert = g - 1;
    let new_group = *meta
        .expert_groups
        .last()
        .ok_or_else(|| DmoeError::validation("grafted checkpoint lacks expert groups"))?;
    let lang_idx = corpus.index_of(new_language)?;
    let start = Instant::now();
    let model = grafted.to_model()?;

    let (trainable_names, _) = partition_parameters(grafted, new_expert);
    let named = model.named_params();
    let trainable: Vec<Tensor> = named
        .iter()
        .filter(|(n, _)| match router_scope {
            RouterScope::Frozen => {
                trainable_names.contains(n) && !n.ends_with(".moe.router")
            }
            _ => trainable_names.contains(n),
        })
        .map(|(_, t)| t.clone())
        .collect();
    let routers: Vec<Tensor> = named
        .iter()
        .filter(|(n, _)| n.ends_with(".moe.router"))
        .map(|(_, t)| t.clone())
        .collect();

    let mut opt = AdamW::new(&trainable, trainer.optimizer())?;
    let mut rng = Rng::stream(seed, &[TAG_DLA, lang_idx as u64]);
    let (b, s) = (trainer.batch_size, trainer.sequence_length);
    let all_params = model.params();
    let mut records = Vec::new();
    let mut tokens_seen = 0u64;
    for step in 0..steps {
        let tokens = sample_monolingual_batch(&corpus.languages[lang_idx], b, s, &mut rng)?;
        zero_grads(&all_params);
        let seq_groups = vec![new_group; b];
        let out = model.forward(&tokens, b, s, RoutingMode::HardGroup(&seq_groups))?;
        let clm = TransformerModel::clm_loss(&out, &tokens)?;
        let (loss, clm_value, rc_value) = if alpha > 0.0 {
            let token_groups = vec![new_group; b * s];
            let rc = rc_loss_tensor(&out, &token_groups)?;
            let combined = dmoe_numeric::ops::add(
                &clm,
                &dmoe_numeric::ops::scale(&rc, alpha)?,
            )?;
            (combined, clm.item(), rc.item())
        } else {
            (clm.clone(), clm.item(), 0.0)
        };
        let combined_value = loss.item();
        backward(&loss)?;
        if router_scope == RouterScope::NewColumnOnly {
            for router in &routers {
                let cols = g;
                router.modify_grad(|grad| {
                    for row in grad.chunks_mut(cols) {
                        for c in 0..cols - 1 {
                            row[c] = 0.0;
                        }
                    }
                });
            }
        }
        opt.step(&trainable)?;
        tokens_seen += (b * s) as u64;
        if step % trainer.log_every == 0 || step + 1 == steps {
            records.push(TrainRecord {
                step,
                clm: clm_value,
                rc: rc_value,
                combined: combined_value,
                tokens_seen,
            });
        }
    }
    let checkpoint = Checkpoint::from_model(&model, grafted.manifest.inputs.clone());
    let report = TrainReport {
        records,
        token_count: tokens_seen,
        final_checkpoint_id: checkpoint.id(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((checkpoint, report))
}

/// Language-adaptation pre-training baseline: every parameter trains on the
/// new language with the plain CLM loss.
pub fn lapt_finetune(
    ckpt: &Checkpoint,
    corpus: &TokenizedCorpus,
    new_language: &str,
    steps: usize,
    trainer: &TrainerConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainReport)> {
    let lang_idx = corpus.index_of(new_language)?;
    let start = Instant::now();
    let model = ckpt.to_model()?;
    let params = model.params();
    let mut opt = AdamW::new(&params, trainer.optimizer())?;
    let mut rng = Rng::stream(seed, &[TAG_LAPT, lang_idx as u64]);
    let (b, s) = (trainer.batch_size, trainer.sequence_length);
    let mut records = Vec::new();
    let mut tokens_seen = 0u64;
    for step in 0..steps {
        let tokens = sample_monolingual_batch(&corpus.languages[lang_idx], b, s, &mut rng)?;
        zero_grads(&params);
        let loss = model.causal_lm_loss(&tokens, b, s, RoutingMode::SoftTopK)?;
        let clm_value = loss.item();
        backward(&loss)?;
        opt.step(&params)?;
        tokens_seen += (b * s) as u64;
        if step % trainer.log_every == 0 || step + 1 == steps {
            records.push(TrainRecord {
                step,
                clm: clm_value,
                rc: 0.0,
                combined: clm_value,
                tokens_seen,
            });
        }
    }
    let checkpoint = Checkpoint::from_model(&model, ckpt.manifest.inputs.clone());
    let report = TrainReport {
        records,
        token_count: tokens_seen,
        final_checkpoint_id: checkpoint.id(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((checkpoint, report))
}
