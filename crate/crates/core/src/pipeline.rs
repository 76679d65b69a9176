//! Stage orchestration over a run directory.
//!
//! Layout: `run/<name>/{corpus,deviations,groups,checkpoints,reports}`.
//! Every stage validates that its inputs exist, records their hashes in the
//! artifacts it writes, and appends a wall-clock line to the sidecar log
//! (the only place timestamps live, so artifacts stay byte-identical across
//! reruns).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::adapt::{
    build_plan, dla_finetune, graft_expert, lapt_finetune, score_experts,
};
use crate::artifact::{hash_inputs, read_json, write_json};
use crate::checkpoint::Checkpoint;
use crate::cluster::{greedy_cluster, objective, GroupAssignment, GroupAssignmentFile};
use crate::config::RunConfig;
use crate::corpus::{build_corpus, CorpusSet, TokenizedCorpus};
use crate::error::{io_err, DmoeError, Result};
use crate::eval::{compare_models, evaluate, router_top1_stats, EvalReport};
use crate::model::{RoutingMode, TransformerModel};
use crate::probe::{
    load_deviation, probe_all, save_deviation, similarity_matrix, DeviationRecord,
    SimilarityMatrix,
};
use crate::train::{
    extend_to_moe, select_layers, train_dense_baseline, train_dmoe, TrainReport,
};

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> RunPaths {
        RunPaths { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn deviations_dir(&self) -> PathBuf {
        self.root.join("deviations")
    }
    pub fn groups_dir(&self) -> PathBuf {
        self.root.join("groups")
    }
    pub fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn similarity_csv(&self) -> PathBuf {
        self.groups_dir().join("similarity.csv")
    }
    pub fn assignment_json(&self) -> PathBuf {
        self.groups_dir().join("assignment.json")
    }
    pub fn sidecar_log(&self) -> PathBuf {
        self.root.join("pipeline.log")
    }
}

/// Appends a timestamped line to the sidecar log; artifacts never carry time.
pub fn log_stage(paths: &RunPaths, stage: &str, message: &str) {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let line = format!("[{now}] {stage}: {message}\n");
    if fs::create_dir_all(&paths.root).is_ok() {
        use std::io::Write;
        if let Ok(mut f) =
            fs::OpenOptions::new().create(true).append(true).open(paths.sidecar_log())
        {
            let _ = f.write_all(line.as_bytes());
        }
    }
}

fn write_train_report(
    paths: &RunPaths,
    name: &str,
    report: &TrainReport,
    inputs: &BTreeMap<String, String>,
) -> Result<()> {
    let dir = paths.reports_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(format!("{name}_train.jsonl"));
    fs::write(&path, report.to_jsonl()).map_err(io_err(path))?;
    write_json(
        &dir.join(format!("{name}_train.meta.json")),
        &serde_json::json!({
            "token_count": report.token_count,
            "final_checkpoint_id": report.final_checkpoint_id,
            "inputs": inputs,
        }),
    )?;
    Ok(())
}

fn load_corpus(paths: &RunPaths) -> Result<(CorpusSet, TokenizedCorpus)> {
    let manifest = paths.corpus_dir().join("manifest.json");
    if !manifest.exists() {
        return Err(DmoeError::MissingInput(manifest));
    }
    let set = CorpusSet::load(&paths.corpus_dir())?;
    let tokens = TokenizedCorpus::from_set(&set)?;
    Ok((set, tokens))
}

fn load_checkpoint(paths: &RunPaths, name: &str) -> Result<Checkpoint> {
    Checkpoint::load(&paths.checkpoint_dir(name))
}

fn checkpoint_inputs(paths: &RunPaths, name: &str) -> Vec<(String, PathBuf)> {
    vec![
        (format!("checkpoint.{name}.manifest"), paths.checkpoint_dir(name).join("manifest.json")),
        (format!("checkpoint.{name}.weights"), paths.checkpoint_dir(name).join("weights.bin")),
    ]
}

fn provenance(
    cfg: &RunConfig,
    labeled_paths: &[(String, PathBuf)],
) -> Result<BTreeMap<String, String>> {
    let borrowed: Vec<(&str, &Path)> =
        labeled_paths.iter().map(|(l, p)| (l.as_str(), p.as_path())).collect();
    let mut map = hash_inputs(&borrowed)?;
    map.insert("config".to_string(), cfg.content_hash());
    Ok(map)
}

// ── Stages ────────────────────────────────────────────────────────────────

pub fn stage_gen_corpus(cfg: &RunConfig) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let mut set = build_corpus(&cfg.corpus, cfg.seed)?;
    set.manifest.inputs.insert("config".to_string(), cfg.content_hash());
    set.save(&paths.corpus_dir())?;
    let summary = format!(
        "{} languages ({} adaptation), alphabet size {}",
        set.manifest.languages.len(),
        set.manifest.languages.iter().filter(|l| l.adapt).count(),
        set.manifest.alphabet.chars().count(),
    );
    log_stage(&paths, "gen-corpus", &format!("{summary} in {:.1}s", started.elapsed().as_secs_f64()));
    Ok(summary)
}

pub fn stage_pretrain_base(cfg: &RunConfig) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let (_, corpus) = load_corpus(&paths)?;
    let mut model_cfg = cfg.model;
    model_cfg.vocab_size = corpus.alphabet.vocab_size();
    let model = TransformerModel::new_dense(model_cfg, cfg.seed)?;
    let inputs = provenance(
        cfg,
        &[("corpus.manifest".to_string(), paths.corpus_dir().join("manifest.json"))],
    )?;
    let init = Checkpoint::from_model(&model, inputs);
    let (trained, report) =
        train_dense_baseline(&init, &corpus, cfg.base_steps, &cfg.trainer, cfg.seed)?;
    let base_inputs = trained.manifest.inputs.clone();
    trained.save(&paths.checkpoint_dir("base"))?;
    write_train_report(&paths, "base", &report, &base_inputs)?;
    let summary = format!(
        "base model trained {} steps ({} tokens), final loss {:.4}",
        cfg.base_steps,
        report.token_count,
        report.records.last().map(|r| r.clm).unwrap_or(f64::NAN),
    );
    log_stage(
        &paths,
        "pretrain-base",
        &format!("{summary} in {:.1}s", started.elapsed().as_secs_f64()),
    );
    Ok(summary)
}

pub fn stage_probe(cfg: &RunConfig, languages: Option<&[String]>) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let (_, corpus) = load_corpus(&paths)?;
    let base = load_checkpoint(&paths, "base")?;
    let mut labeled =
        vec![("corpus.manifest".to_string(), paths.corpus_dir().join("manifest.json"))];
    labeled.extend(checkpoint_inputs(&paths, "base"));
    let inputs = provenance(cfg, &labeled)?;

    let records: Vec<DeviationRecord> = match languages {
        None => probe_all(&base, &corpus, &cfg.probe, cfg.seed)?,
        Some(codes) => {
            let mut out = Vec::new();
            for code in codes {
                out.push(crate::probe::probe_language(
                    &base, &corpus, code, &cfg.probe, cfg.seed,
                )?);
            }
            out
        }
    };
    for record in &records {
        save_deviation(record, &paths.deviations_dir(), inputs.clone())?;
    }
    let summary = format!(
        "probed {} languages for {} steps each",
        records.len(),
        cfg.probe.steps
    );
    log_stage(&paths, "probe", &format!("{summary} in {:.1}s", started.elapsed().as_secs_f64()));
    Ok(summary)
}

fn load_all_deviations(paths: &RunPaths, corpus: &TokenizedCorpus) -> Result<Vec<DeviationRecord>> {
    corpus
        .base_codes()
        .iter()
        .map(|code| load_deviation(&paths.deviations_dir(), code))
        .collect()
}

pub fn stage_cluster(
    cfg: &RunConfig,
    matrix_path: Option<&Path>,
    k: Option<usize>,
    out: Option<&Path>,
) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let k = k.unwrap_or(cfg.extension.num_experts);

    let (matrix, matrix_file) = match matrix_path {
        Some(p) => (SimilarityMatrix::load_csv(p)?, p.to_path_buf()),
        None => {
            let (_, corpus) = load_corpus(&paths)?;
            let records = load_all_deviations(&paths, &corpus)?;
            let matrix = similarity_matrix(&records, &cfg.similarity_layers())?;
            let csv_path = paths.similarity_csv();
            matrix.save_csv(&csv_path)?;
            let mut labeled = vec![(
                "corpus.manifest".to_string(),
                paths.corpus_dir().join("manifest.json"),
            )];
            for code in corpus.base_codes() {
                labeled.push((
                    format!("deviation.{code}"),
                    paths.deviations_dir().join(format!("{code}.bin")),
                ));
            }
            let meta = provenance(cfg, &labeled)?;
            write_json(&paths.groups_dir().join("similarity.meta.json"), &meta)?;
            (matrix, csv_path)
        }
    };

    let assignment = greedy_cluster(&matrix, k)?;
    let score = objective(&matrix, &assignment)?;
    let matrix_hash = crate::artifact::sha256_file(&matrix_file)?;
    let file = GroupAssignmentFile {
        num_groups: assignment.num_groups,
        group_of: assignment.group_of.clone(),
        objective: score,
        similarity_matrix_sha256: matrix_hash,
        inputs: provenance(cfg, &[("similarity.csv".to_string(), matrix_file.clone())])?,
    };
    let out_path = out.map(Path::to_path_buf).unwrap_or_else(|| paths.assignment_json());
    write_json(&out_path, &file)?;
    let summary = format!(
        "{k} groups over {} languages, objective {score:.4}",
        matrix.languages.len()
    );
    log_stage(&paths, "cluster", &format!("{summary} in {:.1}s", started.elapsed().as_secs_f64()));
    Ok(summary)
}

fn load_assignment(paths: &RunPaths) -> Result<GroupAssignment> {
    let file: GroupAssignmentFile = read_json(&paths.assignment_json())?;
    GroupAssignment::new(file.num_groups, file.group_of)
}

pub fn stage_extend(cfg: &RunConfig) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let (_, corpus) = load_corpus(&paths)?;
    let base = load_checkpoint(&paths, "base")?;
    let assignment = load_assignment(&paths)?;
    let records = load_all_deviations(&paths, &corpus)?;
    let layers = select_layers(&records, cfg.extension.epsilon, cfg.extension.aggregation)?;

    let mut labeled =
        vec![("groups.assignment".to_string(), paths.assignment_json())];
    labeled.extend(checkpoint_inputs(&paths, "base"));
    let inputs = provenance(cfg, &labeled)?;

    let mut extended =
        extend_to_moe(&base, &layers, cfg.extension.num_experts, &assignment, cfg.seed)?;
    extended.manifest.inputs = inputs;
    extended.save(&paths.checkpoint_dir("extended"))?;
    write_json(
        &paths.groups_dir().join("selected_layers.json"),
        &serde_json::json!({
            "layers": layers,
            "epsilon": cfg.extension.epsilon,
            "aggregation": cfg.extension.aggregation,
        }),
    )?;
    let summary = format!(
        "extended layers {:?} to {} experts",
        layers, cfg.extension.num_experts
    );
    log_stage(&paths, "extend", &format!("{summary} in {:.1}s", started.elapsed().as_secs_f64()));
    Ok(summary)
}

pub fn stage_train(cfg: &RunConfig) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let (_, corpus) = load_corpus(&paths)?;
    let extended = load_checkpoint(&paths, "extended")?;
    let assignment = load_assignment(&paths)?;
    let outcome =
        train_dmoe(&extended, &corpus, &assignment, &cfg.extension, &cfg.trainer, cfg.seed)?;

    let mut labeled = vec![("groups.assignment".to_string(), paths.assignment_json())];
    labeled.extend(checkpoint_inputs(&paths, "extended"));
    let inputs = provenance(cfg, &labeled)?;
    let mut final_ckpt = outcome.checkpoint;
    final_ckpt.manifest.inputs = inputs.clone();
    final_ckpt.save(&paths.checkpoint_dir("dmoe"))?;
    if let Some(mut stage1) = outcome.stage1_checkpoint {
        stage1.manifest.inputs = inputs.clone();
        stage1.save(&paths.checkpoint_dir("dmoe_stage1"))?;
    }
    write_train_report(&paths, "dmoe", &outcome.report, &inputs)?;
    let summary = format!(
        "DMoE trained {}+{} steps ({} tokens), final loss {:.4}",
        cfg.extension.stage1_steps,
        cfg.extension.stage2_steps,
        outcome.report.token_count,
        outcome.report.records.last().map(|r| r.clm).unwrap_or(f64::NAN),
    );
    log_stage(
        &paths,
        "train",
        &format!("{summary} in {:.1}s ({:.1}s train)", started.elapsed().as_secs_f64(), outcome.report.wall_clock_secs),
    );
    Ok(summary)
}

pub fn stage_train_baseline(cfg: &RunConfig) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let (_, corpus) = load_corpus(&paths)?;
    let base = load_checkpoint(&paths, "base")?;
    let steps = cfg.baseline_steps();
    let (mut trained, report) =
        train_dense_baseline(&base, &corpus, steps, &cfg.trainer, cfg.seed)?;
    trained.manifest.inputs = provenance(cfg, &checkpoint_inputs(&paths, "base"))?;
    let baseline_inputs = trained.manifest.inputs.clone();
    trained.save(&paths.checkpoint_dir("dense_baseline"))?;
    write_train_report(&paths, "dense_baseline", &report, &baseline_inputs)?;
    let summary = format!(
        "dense baseline trained {steps} steps ({} tokens)",
        report.token_count
    );
    log_stage(
        &paths,
        "train-baseline",
        &format!("{summary} in {:.1}s", started.elapsed().as_secs_f64()),
    );
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMethod {
    Dla,
    Lapt,
}

pub fn stage_adapt(
    cfg: &RunConfig,
    language: Option<&str>,
    method: AdaptMethod,
) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let (set, corpus) = load_corpus(&paths)?;
    let code = match language {
        Some(c) => c.to_string(),
        None => set
            .manifest
            .languages
            .iter()
            .find(|l| l.adapt)
            .map(|l| l.code.clone())
            .ok_or_else(|| DmoeError::validation("corpus has no adaptation language"))?,
    };
    corpus.index_of(&code)?;
    let dmoe = load_checkpoint(&paths, "dmoe")?;
    let mut labeled = vec![(
        "corpus.manifest".to_string(),
        paths.corpus_dir().join("manifest.json"),
    )];
    labeled.extend(checkpoint_inputs(&paths, "dmoe"));
    let inputs = provenance(cfg, &labeled)?;

    let summary = match method {
        AdaptMethod::Dla => {
            let ppls = score_experts(&dmoe, &corpus, &code, &cfg.evaluation)?;
            let grafted = graft_expert(
                &dmoe,
                crate::adapt::choose_expert(&ppls),
                cfg.adaptation.column_init,
                cfg.seed,
            )?;
            let plan = build_plan(&code, &ppls, &grafted, inputs.clone())?;
            write_json(
                &paths.reports_dir().join(format!("adaptation_{code}.json")),
                &plan,
            )?;
            let mut grafted_saved = grafted.clone();
            grafted_saved.manifest.inputs = inputs.clone();
            grafted_saved.save(&paths.checkpoint_dir(&format!("grafted_{code}")))?;
            let (mut tuned, report) = dla_finetune(
                &grafted,
                &corpus,
                &code,
                cfg.adaptation.steps,
                &cfg.trainer,
                cfg.adaptation.alpha,
                cfg.adaptation.router_scope,
                cfg.seed,
            )?;
            tuned.manifest.inputs = inputs.clone();
            tuned.save(&paths.checkpoint_dir(&format!("dla_{code}")))?;
            write_train_report(&paths, &format!("dla_{code}"), &report, &inputs)?;
            format!(
                "DLA adapted {code}: expert {} copied (per-expert ppl {:?})",
                plan.chosen_expert,
                plan.per_expert_ppl.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>(),
            )
        }
        AdaptMethod::Lapt => {
            let (mut tuned, report) = lapt_finetune(
                &dmoe,
                &corpus,
                &code,
                cfg.adaptation.steps,
                &cfg.trainer,
                cfg.seed,
            )?;
            tuned.manifest.inputs = inputs.clone();
            tuned.save(&paths.checkpoint_dir(&format!("lapt_{code}")))?;
            write_train_report(&paths, &format!("lapt_{code}"), &report, &inputs)?;
            format!("LAPT adapted {code} for {} steps", cfg.adaptation.steps)
        }
    };
    log_stage(&paths, "adapt", &format!("{summary} in {:.1}s", started.elapsed().as_secs_f64()));
    Ok(summary)
}

/// Routing flag accepted by eval-like subcommands.
pub fn parse_routing(spec: &str) -> Result<RoutingMode<'static>> {
    if spec == "soft" || spec == "soft_topk" {
        return Ok(RoutingMode::SoftTopK);
    }
    if let Some(rest) = spec.strip_prefix("hard-expert=") {
        let e: usize = rest
            .parse()
            .map_err(|_| DmoeError::validation(format!("bad expert index {rest:?}")))?;
        return Ok(RoutingMode::HardExpert(e));
    }
    Err(DmoeError::validation(format!(
        "unknown routing {spec:?}; expected soft or hard-expert=N"
    )))
}

pub fn stage_eval(cfg: &RunConfig, model_name: &str, routing: &str) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let (_, corpus) = load_corpus(&paths)?;
    let ckpt = load_checkpoint(&paths, model_name)?;
    let mode = parse_routing(routing)?;
    let mut labeled = vec![(
        "corpus.manifest".to_string(),
        paths.corpus_dir().join("manifest.json"),
    )];
    labeled.extend(checkpoint_inputs(&paths, model_name));
    let inputs = provenance(cfg, &labeled)?;
    let report = evaluate(&ckpt, &corpus, &cfg.evaluation, mode, inputs)?;
    let dir = paths.reports_dir();
    write_json(&dir.join(format!("eval_{model_name}.json")), &report)?;
    let csv = dir.join(format!("eval_{model_name}.csv"));
    fs::write(&csv, report.to_csv()).map_err(io_err(csv))?;
    let summary = format!(
        "{model_name}: macro char-PPL {:.4} over {} languages",
        report.macro_avg_char_ppl(),
        report.entries.len()
    );
    log_stage(&paths, "eval", &format!("{summary} in {:.1}s", started.elapsed().as_secs_f64()));
    Ok(summary)
}

pub fn stage_route_stats(cfg: &RunConfig, model_name: &str) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let started = Instant::now();
    let (_, corpus) = load_corpus(&paths)?;
    let ckpt = load_checkpoint(&paths, model_name)?;
    let stats = router_top1_stats(&ckpt, &corpus, &cfg.evaluation)?;
    let dir = paths.reports_dir().join(format!("route_stats_{model_name}"));
    stats.save_csvs(&dir)?;
    let mut labeled = vec![(
        "corpus.manifest".to_string(),
        paths.corpus_dir().join("manifest.json"),
    )];
    labeled.extend(checkpoint_inputs(&paths, model_name));
    write_json(&dir.join("meta.json"), &provenance(cfg, &labeled)?)?;
    let summary = format!(
        "router stats over {} MoE layers, {} languages",
        stats.layers.len(),
        stats.languages.len()
    );
    log_stage(
        &paths,
        "route-stats",
        &format!("{summary} in {:.1}s", started.elapsed().as_secs_f64()),
    );
    Ok(summary)
}

pub fn stage_report(cfg: &RunConfig, baseline: &str, candidate: &str) -> Result<String> {
    let paths = RunPaths::new(&cfg.run_dir);
    let dir = paths.reports_dir();
    let base: EvalReport = read_json(&dir.join(format!("eval_{baseline}.json")))?;
    let cand: EvalReport = read_json(&dir.join(format!("eval_{candidate}.json")))?;
    let cmp = compare_models(&base, &cand)?;
    let json_path = dir.join(format!("compare_{baseline}_vs_{candidate}.json"));
    write_json(&json_path, &cmp)?;
    let csv_path = dir.join(format!("compare_{baseline}_vs_{candidate}.csv"));
    fs::write(&csv_path, cmp.to_csv()).map_err(io_err(csv_path))?;
    let summary = format!(
        "{candidate} vs {baseline}: macro {:.4} -> {:.4} ({:+.2}%)",
        cmp.baseline_macro_avg, cmp.candidate_macro_avg, cmp.macro_improvement_pct
    );
    log_stage(&paths, "report", &summary);
    Ok(summary)
}
