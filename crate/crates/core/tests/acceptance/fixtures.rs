//! Shared experiment artifacts for the acceptance criteria.
//!
//! Heavy criteria reuse one pipeline per seed: corpus -> base -> probes ->
//! recovered clusters -> extension -> two-stage DMoE training, plus a dense
//! continual-pretraining arm and held-out evaluations. Each stage is built
//! lazily, at most once per seed, so a criterion only ever pays for what it
//! is first to need.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use dmoe_core::checkpoint::Checkpoint;
use dmoe_core::cluster::{adjusted_rand_index, greedy_cluster, GroupAssignment};
use dmoe_core::corpus::{build_corpus, CorpusConfig, TokenizedCorpus};
use dmoe_core::eval::{evaluate, EvalConfig, EvalReport};
use dmoe_core::model::{ModelConfig, RoutingMode, TransformerModel};
use dmoe_core::probe::{probe_all, similarity_matrix, ProbeConfig};
use dmoe_core::train::{
    extend_to_moe, select_layers, train_dense_baseline, train_dmoe, Aggregation,
    ExtensionConfig, TrainerConfig,
};

/// Model scale for the directional experiments (criteria 7-11). The spec's
/// desk-scale default (8x128/512, S=128) exceeds this sandbox's runtime
/// budgets; layer count, heads, vocabulary, and batch size stay at the
/// defaults so layer-selection arithmetic and batching semantics carry over.
pub fn ci_model() -> ModelConfig {
    ModelConfig {
        num_layers: 8,
        hidden_dim: 96,
        num_heads: 4,
        ffn_dim: 384,
        vocab_size: 33,
        max_sequence_length: 96,
    }
}

pub fn ci_trainer() -> TrainerConfig {
    TrainerConfig { sequence_length: 96, ..Default::default() }
}

pub fn ci_probe() -> ProbeConfig {
    ProbeConfig { sequence_length: 96, ..Default::default() }
}

pub fn ci_eval() -> EvalConfig {
    EvalConfig { sequence_length: 96, batch_size: 16, max_windows_per_language: 32 }
}

pub fn ci_extension() -> ExtensionConfig {
    ExtensionConfig {
        epsilon: 0.4,
        num_experts: 4,
        alpha: 1.28,
        stage1_steps: 120,
        stage2_steps: 80,
        aggregation: Aggregation::Mean,
    }
}

pub const CI_BASE_STEPS: usize = 100;
pub const ADAPT_STEPS: usize = 100;

pub fn ci_dense_steps() -> usize {
    let ext = ci_extension();
    ext.stage1_steps + ext.stage2_steps
}

/// Everything up to and including DMoE training.
pub struct PipelineArtifacts {
    pub seed: u64,
    pub corpus: TokenizedCorpus,
    /// Ground-truth family id per base language.
    pub families: BTreeMap<String, usize>,
    pub base: Checkpoint,
    /// Clusters recovered from the last-3-layer similarity matrix.
    pub assignment: GroupAssignment,
    pub recovery_ari: f64,
    pub layers: Vec<usize>,
    pub extended: Checkpoint,
    pub dmoe: Checkpoint,
    pub dmoe_stage1: Checkpoint,
}

/// Held-out evaluations of the DMoE model and the equal-budget dense arm.
pub struct ComparisonArtifacts {
    pub eval_dmoe: EvalReport,
    pub eval_dense: EvalReport,
}

impl PipelineArtifacts {
    /// Mean char-PPL over the 12 base languages.
    pub fn macro_ppl(&self, report: &EvalReport) -> f64 {
        let vals: Vec<f64> = report
            .entries
            .iter()
            .filter(|e| self.families.contains_key(&e.language))
            .map(|e| e.char_ppl)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn adapt_language(&self) -> String {
        self.corpus
            .languages
            .iter()
            .find(|l| l.adapt)
            .map(|l| l.code.clone())
            .expect("corpus has an adaptation language")
    }
}

fn build_pipeline(seed: u64) -> PipelineArtifacts {
    let set = build_corpus(&CorpusConfig::default(), seed).expect("corpus");
    let corpus = TokenizedCorpus::from_set(&set).expect("tokenize");
    let families: BTreeMap<String, usize> = corpus
        .languages
        .iter()
        .filter(|l| !l.adapt)
        .map(|l| (l.code.clone(), l.family_id))
        .collect();

    let trainer = ci_trainer();
    let init = Checkpoint::from_model(
        &TransformerModel::new_dense(ci_model(), seed).expect("model"),
        BTreeMap::new(),
    );
    let (base, _) =
        train_dense_baseline(&init, &corpus, CI_BASE_STEPS, &trainer, seed).expect("base");

    let records = probe_all(&base, &corpus, &ci_probe(), seed).expect("probes");
    let n = ci_model().num_layers;
    let sim = similarity_matrix(&records, &[n - 3, n - 2, n - 1]).expect("similarity");
    let assignment = greedy_cluster(&sim, 4).expect("cluster");
    let recovery_ari = adjusted_rand_index(&assignment.group_of, &families).expect("ari");

    let ext = ci_extension();
    let layers = select_layers(&records, ext.epsilon, ext.aggregation).expect("layers");
    let extended =
        extend_to_moe(&base, &layers, ext.num_experts, &assignment, seed).expect("extension");
    let outcome =
        train_dmoe(&extended, &corpus, &assignment, &ext, &trainer, seed).expect("dmoe");

    PipelineArtifacts {
        seed,
        corpus,
        families,
        base,
        assignment,
        recovery_ari,
        layers,
        extended,
        dmoe: outcome.checkpoint,
        dmoe_stage1: outcome.stage1_checkpoint.expect("stage1 snapshot"),
    }
}

fn build_comparison(p: &PipelineArtifacts) -> ComparisonArtifacts {
    let trainer = ci_trainer();
    let (dense, _) =
        train_dense_baseline(&p.base, &p.corpus, ci_dense_steps(), &trainer, p.seed)
            .expect("dense");
    let eval_cfg = ci_eval();
    let eval_dmoe = evaluate(
        &p.dmoe,
        &p.corpus,
        &eval_cfg,
        RoutingMode::SoftTopK,
        BTreeMap::new(),
    )
    .expect("eval dmoe");
    let eval_dense =
        evaluate(&dense, &p.corpus, &eval_cfg, RoutingMode::SoftTopK, BTreeMap::new())
            .expect("eval dense");
    ComparisonArtifacts { eval_dmoe, eval_dense }
}

static PIPELINES: [OnceLock<PipelineArtifacts>; 3] =
    [OnceLock::new(), OnceLock::new(), OnceLock::new()];
static COMPARISONS: [OnceLock<ComparisonArtifacts>; 3] =
    [OnceLock::new(), OnceLock::new(), OnceLock::new()];

pub fn pipeline(seed: u64) -> &'static PipelineArtifacts {
    PIPELINES[seed as usize].get_or_init(|| build_pipeline(seed))
}

pub fn comparison(seed: u64) -> &'static ComparisonArtifacts {
    COMPARISONS[seed as usize].get_or_init(|| build_comparison(pipeline(seed)))
}

pub const MAIN_SEEDS: [u64; 3] = [0, 1, 2];
