//! Layer selection, MoE extension, and the two-stage DMoE trainer.
//!
//! Stage 1 routes every group-homogeneous batch hard to its group's expert
//! and trains with the combined CLM + alpha * router-classification loss.
//! Stage 2 switches to soft top-k routing with the plain CLM loss over mixed
//! batches. The dense continual-pretraining baseline shares the same loop
//! with no MoE machinery, so token budgets are directly comparable.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use dmoe_numeric::{backward, ops, zero_grads, AdamW, AdamWConfig, Rng, Tensor};

use crate::checkpoint::{Checkpoint, LayerKind, MoeMeta, TensorRecord};
use crate::cluster::GroupAssignment;
use crate::corpus::{BatchMode, BatchPlan, BatchStream, TokenizedCorpus};
use crate::error::{DmoeError, Result};
use crate::model::{ForwardOutput, RoutingMode, TransformerModel, INIT_STD};
use crate::probe::{layer_profile, DeviationRecord};

const TAG_EXTEND: u64 = 0x41;
const TAG_STAGE1: u64 = 0x42;
const TAG_STAGE2: u64 = 0x43;
const TAG_DENSE: u64 = 0x44;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtensionConfig {
    pub epsilon: f64,
    pub num_experts: usize,
    pub alpha: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub aggregation: Aggregation,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        ExtensionConfig {
            epsilon: 0.4,
            num_experts: 4,
            alpha: 1.28,
            stage1_steps: 180,
            stage2_steps: 120,
            aggregation: Aggregation::Mean,
        }
    }
}

/// Optimizer and batching knobs shared by every training stage. The base
/// learning rate follows the reference recipe; `lr_scale` adapts it to
/// desk-scale models trained from scratch.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub sequence_length: usize,
    pub learning_rate: f64,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub log_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 16,
            sequence_length: 128,
            learning_rate: 2e-5,
            lr_scale: 50.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            log_every: 1,
        }
    }
}

impl TrainerConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate * self.lr_scale,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn plan(&self, mode: BatchMode) -> BatchPlan {
        BatchPlan {
            batch_size: self.batch_size,
            sequence_length: self.sequence_length,
            mode,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub clm: f64,
    pub rc: f64,
    pub combined: f64,
    pub tokens_seen: u64,
}

/// Per-step loss decomposition plus totals. Wall clock never reaches the
/// serialized artifact; it belongs to the sidecar log.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub token_count: u64,
    pub final_checkpoint_id: String,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("train record"));
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Snapshot at the stage-1/stage-2 boundary when stage 1 ran.
    pub stage1_checkpoint: Option<Checkpoint>,
    pub report: TrainReport,
}

// ── Layer selection ───────────────────────────────────────────────────────

/// Aggregates normalized per-layer deviation profiles across languages and
/// returns the indices of the top ceil(epsilon * N) layers (ascending).
pub fn select_layers(
    records: &[DeviationRecord],
    epsilon: f64,
    aggregation: Aggregation,
) -> Result<Vec<usize>> {
    if records.is_empty() {
        return Err(DmoeError::validation("no deviation records to select layers from"));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(DmoeError::validation(format!("epsilon {epsilon} outside (0, 1]")));
    }
    let n = records[0].num_layers();
    if records.iter().any(|r| r.num_layers() != n) {
        return Err(DmoeError::validation("records disagree on layer count"));
    }
    let mut aggregated = vec![0.0f64; n];
    match aggregation {
        Aggregation::Mean => {
            for r in records {
                for (a, p) in aggregated.iter_mut().zip(layer_profile(r)?) {
                    *a += p / records.len() as f64;
                }
            }
        }
        Aggregation::Max => {
            for r in records {
                for (a, p) in aggregated.iter_mut().zip(layer_profile(r)?) {
                    *a = a.max(p);
                }
            }
        }
    }
    let count = (epsilon * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        aggregated[b].partial_cmp(&aggregated[a]).unwrap().then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(count).collect();
    selected.sort_unstable();
    Ok(selected)
}

// ── MoE extension ─────────────────────────────────────────────────────────

/// Clones the FFN of each selected layer into `g` identical experts and adds
/// a randomly initialized router column per expert. Expert e carries group
/// label e. Unselected layers are untouched, so the extended model computes
/// the same function as the dense one until training begins.
pub fn extend_to_moe(
    dense: &Checkpoint,
    layers: &[usize],
    num_experts: usize,
    assignment: &GroupAssignment,
    seed: u64,
) -> Result<Checkpoint> {
    if dense.manifest.moe.is_some() {
        return Err(DmoeError::validation("checkpoint already has MoE layers"));
    }
    if num_experts == 0 {
        return Err(DmoeError::validation("need at least one expert"));
    }
    if num_experts != assignment.num_groups {
        return Err(DmoeError::validation(format!(
            "expert count {num_experts} must equal group count {}",
            assignment.num_groups
        )));
    }
    let n = dense.manifest.model.num_layers;
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != layers.len() {
        return Err(DmoeError::validation("duplicate layer indices"));
    }
    if sorted.is_empty() {
        return Err(DmoeError::validation("no layers selected for extension"));
    }
    if let Some(&bad) = sorted.iter().find(|&&l| l >= n) {
        return Err(DmoeError::validation(format!("layer {bad} out of range (N = {n})")));
    }

    let d = dense.manifest.model.hidden_dim;
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

    let mut i = 0;
    let records = &dense.manifest.tensors;
    while i < records.len() {
        let rec = &records[i];
        let ffn_layer = sorted.iter().find(|&&l| rec.name == format!("block{l}.ffn.w1"));
        if let Some(&l) = ffn_layer {
            // The four dense FFN tensors become g expert copies plus router.
            let names = ["w1", "b1", "w2", "b2"];
            let mut ffn_parts = Vec::new();
            for (j, part) in names.iter().enumerate() {
                let rec = &records[i + j];
                if rec.name != format!("block{l}.ffn.{part}") {
                    return Err(DmoeError::validation(format!(
                        "unexpected tensor order at {}",
                        rec.name
                    )));
                }
                ffn_parts.push((rec.shape.clone(), dense.data[i + j].clone()));
            }
            for e in 0..num_experts {
                for (part, (shape, values)) in names.iter().zip(&ffn_parts) {
                    push(
                        format!("block{l}.moe.expert{e}.{part}"),
                        shape.clone(),
                        values.clone(),
                        &mut tensors,
                        &mut data,
                        &mut offset,
                    );
                }
            }
            let mut rng = Rng::stream(seed, &[TAG_EXTEND, l as u64]);
            let mut router = vec![0.0; d * num_experts];
            rng.fill_normal(&mut router, INIT_STD);
            push(
                format!("block{l}.moe.router"),
                vec![d, num_experts],
                router,
                &mut tensors,
                &mut data,
                &mut offset,
            );
            i += 4;
        } else {
            push(
                rec.name.clone(),
                rec.shape.clone(),
                dense.data[i].clone(),
                &mut tensors,
                &mut data,
                &mut offset,
            );
            i += 1;
        }
    }

    let mut manifest = dense.manifest.clone();
    manifest.tensors = tensors;
    for &l in &sorted {
        manifest.layer_kinds[l] = LayerKind::Moe;
    }
    manifest.moe = Some(MoeMeta {
        layers: sorted,
        num_experts,
        top_k: 2.min(num_experts),
        expert_groups: (0..num_experts).collect(),
    });
    Ok(Checkpoint { manifest, data })
}

// ── Router classification loss ────────────────────────────────────────────

/// Mean over tokens and MoE layers of -log P(group | token). Data-level
/// reference used for reporting and tests.
pub fn router_classification_loss(
    router_probs: &[Vec<f64>],
    group_ids: &[usize],
    num_experts: usize,
) -> Result<f64> {
    if router_probs.is_empty() {
        return Err(DmoeError::validation("no MoE layers for classification loss"));
    }
    let t = group_ids.len();
    if let Some(&bad) = group_ids.iter().find(|&&g| g >= num_experts) {
        return Err(DmoeError::validation(format!(
            "group id {bad} out of range ({num_experts} experts)"
        )));
    }
    let mut total = 0.0;
    for layer in router_probs {
        if layer.len() != t * num_experts {
            return Err(DmoeError::validation("router probability shape mismatch"));
        }
        for (tok, &g) in group_ids.iter().enumerate() {
            total -= layer[tok * num_experts + g].ln();
        }
    }
    Ok(total / (t * router_probs.len()) as f64)
}

/// Differentiable form computed from router logits (numerically equal to the
/// data-level definition on the softmax probabilities).
pub(crate) fn rc_loss_tensor(output: &ForwardOutput, group_ids: &[usize]) -> Result<Tensor> {
    let layers = &output.routers;
    if layers.is_empty() {
        return Err(DmoeError::validation("no MoE layers for classification loss"));
    }
    let mut acc: Option<Tensor> = None;
    for (_, logits, _) in layers {
        let ce = ops::cross_entropy(logits, group_ids)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => ops::add(&a, &ce)?,
        });
    }
    Ok(ops::scale(&acc.unwrap(), 1.0 / layers.len() as f64)?)
}

// ── Training loops ────────────────────────────────────────────────────────

fn snapshot(model: &TransformerModel, inputs: &BTreeMap<String, String>) -> Checkpoint {
    Checkpoint::from_model(model, inputs.clone())
}

/// Two-stage DMoE training. Stage 1: hard group routing, combined loss over
/// group-homogeneous batches. Stage 2: soft top-k routing, CLM loss over
/// mixed batches, everything trainable.
pub fn train_dmoe(
    moe: &Checkpoint,
    corpus: &TokenizedCorpus,
    assignment: &GroupAssignment,
    ext: &ExtensionConfig,
    trainer: &TrainerConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let meta = moe
        .manifest
        .moe
        .as_ref()
        .ok_or_else(|| DmoeError::validation("train_dmoe needs an extended checkpoint"))?;
    if meta.num_experts != assignment.num_groups {
        return Err(DmoeError::validation(format!(
            "expert count {} must equal group count {}",
            meta.num_experts, assignment.num_groups
        )));
    }
    if ext.alpha < 0.0 {
        return Err(DmoeError::validation("alpha must be non-negative"));
    }
    let start = Instant::now();
    let model = moe.to_model()?;
    let params = model.params();
    let mut opt = AdamW::new(&params, trainer.optimizer())?;
    let mut records = Vec::new();
    let mut tokens_seen = 0u64;
    let group_map = &assignment.group_of;

    // Stage 1: language-specialized experts and routers.
    if ext.stage1_steps > 0 {
        let mut stream = BatchStream::new(
            corpus,
            trainer.plan(BatchMode::GroupHomogeneous),
            Some(group_map),
            seed ^ TAG_STAGE1,
        )?;
        for step in 0..ext.stage1_steps {
            let batch = stream.next_batch();
            let group = batch.group.expect("homogeneous batch");
            let seq_groups = vec![group; batch.batch_size];
            let token_groups = vec![group; batch.batch_size * batch.sequence_length];
            zero_grads(&params);
            let out = model.forward(
                &batch.tokens,
                batch.batch_size,
                batch.sequence_length,
                RoutingMode::HardGroup(&seq_groups),
            )?;
            let clm = TransformerModel::clm_loss(&out, &batch.tokens)?;
            let (loss, clm_value, rc_value) = if ext.alpha > 0.0 {
                let rc = rc_loss_tensor(&out, &token_groups)?;
                let combined = ops::add(&clm, &ops::scale(&rc, ext.alpha)?)?;
                (combined, clm.item(), rc.item())
            } else {
                // Ablation without the classification loss: the router gets
                // no gradient under hard routing. Still report its value.
                let probs: Vec<Vec<f64>> =
                    out.routers.iter().map(|(_, _, p)| p.to_vec()).collect();
                let rc = router_classification_loss(&probs, &token_groups, meta.num_experts)?;
                (clm.clone(), clm.item(), rc)
            };
            let combined_value = loss.item();
            backward(&loss)?;
            opt.step(&params)?;
            tokens_seen += (batch.batch_size * batch.sequence_length) as u64;
            if step % trainer.log_every == 0 || step + 1 == ext.stage1_steps {
                records.push(TrainRecord {
                    step,
                    clm: clm_value,
                    rc: if ext.alpha > 0.0 { rc_value } else { 0.0 },
                    combined: combined_value,
                    tokens_seen,
                });
            }
        }
    }
    let stage1_checkpoint =
        (ext.stage1_steps > 0).then(|| snapshot(&model, &moe.manifest.inputs));

    // Stage 2: normal training with soft top-k routing.
    if ext.stage2_steps > 0 {
        let mut stream = BatchStream::new(
            corpus,
            trainer.plan(BatchMode::Mixed),
            None,
            seed ^ TAG_STAGE2,
        )?;
        for step in 0..ext.stage2_steps {
            let batch = stream.next_batch();
            zero_grads(&params);
            let loss = model.causal_lm_loss(
                &batch.tokens,
                batch.batch_size,
                batch.sequence_length,
                RoutingMode::SoftTopK,
            )?;
            let clm_value = loss.item();
            backward(&loss)?;
            opt.step(&params)?;
            tokens_seen += (batch.batch_size * batch.sequence_length) as u64;
            let global = ext.stage1_steps + step;
            if step % trainer.log_every == 0 || step + 1 == ext.stage2_steps {
                records.push(TrainRecord {
                    step: global,
                    clm: clm_value,
                    rc: 0.0,
                    combined: clm_value,
                    tokens_seen,
                });
            }
        }
    }

    let checkpoint = snapshot(&model, &moe.manifest.inputs);
    let report = TrainReport {
        records,
        token_count: tokens_seen,
        final_checkpoint_id: checkpoint.id(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { checkpoint, stage1_checkpoint, report })
}

/// Standard CLM training over mixed-language batches; serves both the base
/// pretraining stage and the continual-pretraining comparison arm.
pub fn train_dense_baseline(
    ckpt: &Checkpoint,
    corpus: &TokenizedCorpus,
    steps: usize,
    trainer: &TrainerConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainReport)> {
    let start = Instant::now();
    let model = ckpt.to_model()?;
    let params = model.params();
    let mut opt = AdamW::new(&params, trainer.optimizer())?;
    let mut records = Vec::new();
    let mut tokens_seen = 0u64;
    if steps > 0 {
        let mut stream =
            BatchStream::new(corpus, trainer.plan(BatchMode::Mixed), None, seed ^ TAG_DENSE)?;
        for step in 0..steps {
            let batch = stream.next_batch();
            zero_grads(&params);
            let loss = model.causal_lm_loss(
                &batch.tokens,
                batch.batch_size,
                batch.sequence_length,
                RoutingMode::SoftTopK,
            )?;
            let clm_value = loss.item();
            backward(&loss)?;
            opt.step(&params)?;
            tokens_seen += (batch.batch_size * batch.sequence_length) as u64;
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
    }
    let out = snapshot(&model, &ckpt.manifest.inputs);
    let report = TrainReport {
        records,
        token_count: tokens_seen,
        final_checkpoint_id: out.id(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((out, report))
}
