// Calibration sweep for the acceptance-scale experiments: family recovery,
// router specialization, DMoE vs dense perplexity, and adaptation forgetting
// on one seed. Prints measurements; asserts nothing.
#[global_allocator]
static ALLOCATOR: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::collections::BTreeMap;
use std::time::Instant;

use dmoe_core::adapt::{
    dla_finetune, graft_expert, lapt_finetune, score_experts, RouterColumnInit, RouterScope,
};
use dmoe_core::checkpoint::Checkpoint;
use dmoe_core::cluster::{adjusted_rand_index, greedy_cluster, random_balanced_assignment};
use dmoe_core::corpus::{build_corpus, CorpusConfig, TokenizedCorpus};
use dmoe_core::eval::{evaluate, router_top1_stats, EvalConfig};
use dmoe_core::model::{ModelConfig, RoutingMode, TransformerModel};
use dmoe_core::probe::{deviation_cosine, probe_all, similarity_matrix, ProbeConfig};
use dmoe_core::train::{
    extend_to_moe, select_layers, train_dense_baseline, train_dmoe, Aggregation,
    ExtensionConfig, TrainerConfig,
};
use dmoe_numeric::Rng;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let t0 = Instant::now();
    let stamp = |label: &str| {
        println!("[{:7.1}s] {label}", t0.elapsed().as_secs_f64());
    };

    let corpus_cfg = CorpusConfig::default();
    let model_cfg = ModelConfig {
        num_layers: 8,
        hidden_dim: 96,
        num_heads: 4,
        ffn_dim: 192,
        vocab_size: 33,
        max_sequence_length: 96,
    };
    let trainer = TrainerConfig { sequence_length: 96, ..Default::default() };
    let probe_cfg = ProbeConfig { sequence_length: 96, ..Default::default() };
    let eval_cfg = EvalConfig {
        sequence_length: 96,
        batch_size: 16,
        max_windows_per_language: 64,
    };
    let ext = ExtensionConfig {
        epsilon: 0.4,
        num_experts: 4,
        alpha: 1.28,
        stage1_steps: 180,
        stage2_steps: 120,
        aggregation: Aggregation::Mean,
    };
    let base_steps = 100;
    let dense_steps = ext.stage1_steps + ext.stage2_steps;

    let set = build_corpus(&corpus_cfg, seed).unwrap();
    let corpus = TokenizedCorpus::from_set(&set).unwrap();
    stamp("corpus built");
    let families: BTreeMap<String, usize> = corpus
        .languages
        .iter()
        .filter(|l| !l.adapt)
        .map(|l| (l.code.clone(), l.family_id))
        .collect();

    let init = Checkpoint::from_model(
        &TransformerModel::new_dense(model_cfg, seed).unwrap(),
        BTreeMap::new(),
    );
    let (base, base_report) =
        train_dense_baseline(&init, &corpus, base_steps, &trainer, seed).unwrap();
    stamp(&format!(
        "base: {} steps, loss {:.3} -> {:.3}",
        base_steps,
        base_report.records.first().unwrap().clm,
        base_report.records.last().unwrap().clm
    ));

    // Probes and family recovery.
    let records = probe_all(&base, &corpus, &probe_cfg, seed).unwrap();
    stamp("probes done");
    let layers_last3: Vec<usize> = (5..8).collect();
    let sim = similarity_matrix(&records, &layers_last3).unwrap();
    let assignment = greedy_cluster(&sim, 4).unwrap();
    let ari = adjusted_rand_index(&assignment.group_of, &families).unwrap();
    stamp(&format!("last-3 similarity ARI vs families: {ari:.3}"));

    let sim_all = similarity_matrix(&records, &(0..8).collect::<Vec<_>>()).unwrap();
    let assignment_all = greedy_cluster(&sim_all, 4).unwrap();
    let ari_all = adjusted_rand_index(&assignment_all.group_of, &families).unwrap();
    stamp(&format!("all-layer ARI: {ari_all:.3}"));

    // Deviation stability at 10 vs 40 steps.
    let probe40 = ProbeConfig { steps: 40, ..probe_cfg };
    let records40 = probe_all(&base, &corpus, &probe40, seed).unwrap();
    let mut min_cos = f64::INFINITY;
    for (a, b) in records.iter().zip(&records40) {
        let c = deviation_cosine(a, b).unwrap();
        min_cos = min_cos.min(c);
    }
    stamp(&format!("min cosine(delta@10, delta@40) over languages: {min_cos:.3}"));

    // Layer selection profile.
    let layers = select_layers(&records, ext.epsilon, Aggregation::Mean).unwrap();
    stamp(&format!("selected layers: {layers:?}"));

    // DMoE vs dense at equal budget, using the recovered assignment.
    let extended = extend_to_moe(&base, &layers, 4, &assignment, seed).unwrap();
    let outcome = train_dmoe(&extended, &corpus, &assignment, &ext, &trainer, seed).unwrap();
    stamp(&format!(
        "dmoe: loss {:.3} -> {:.3}",
        outcome.report.records.first().unwrap().clm,
        outcome.report.records.last().unwrap().clm
    ));
    let (dense, dense_report) =
        train_dense_baseline(&base, &corpus, dense_steps, &trainer, seed).unwrap();
    stamp(&format!(
        "dense: loss {:.3} -> {:.3} (tokens {} vs {})",
        dense_report.records.first().unwrap().clm,
        dense_report.records.last().unwrap().clm,
        dense_report.token_count,
        outcome.report.token_count,
    ));

    // Router specialization after stage 1.
    let stage1 = outcome.stage1_checkpoint.as_ref().unwrap();
    let stats = router_top1_stats(stage1, &corpus, &eval_cfg).unwrap();
    let base_langs: Vec<usize> = corpus.base_language_indices();
    let mut per_layer = Vec::new();
    for (pos, _) in stats.layers.iter().enumerate() {
        let g = stats.num_experts;
        let mut acc = 0.0;
        for &li in &base_langs {
            let code = &stats.languages[li];
            acc += stats.frequencies[pos][li * g + assignment.group_of[code]];
        }
        per_layer.push(acc / base_langs.len() as f64);
    }
    stamp(&format!("stage1 router own-group top-1 per layer: {per_layer:?}"));

    // Ablation: alpha = 0.
    let ext0 = ExtensionConfig { alpha: 0.0, stage2_steps: 0, ..ext };
    let outcome0 = train_dmoe(&extended, &corpus, &assignment, &ext0, &trainer, seed).unwrap();
    let stats0 = router_top1_stats(
        outcome0.stage1_checkpoint.as_ref().unwrap(),
        &corpus,
        &eval_cfg,
    )
    .unwrap();
    let mut per_layer0 = Vec::new();
    for (pos, _) in stats0.layers.iter().enumerate() {
        let g = stats0.num_experts;
        let mut acc = 0.0;
        for &li in &base_langs {
            let code = &stats0.languages[li];
            acc += stats0.frequencies[pos][li * g + assignment.group_of[code]];
        }
        per_layer0.push(acc / base_langs.len() as f64);
    }
    stamp(&format!("alpha=0 router own-group top-1 per layer: {per_layer0:?}"));

    // Perplexity comparison.
    let eval_dense = evaluate(&dense, &corpus, &eval_cfg, RoutingMode::SoftTopK, BTreeMap::new()).unwrap();
    let eval_dmoe = evaluate(&outcome.checkpoint, &corpus, &eval_cfg, RoutingMode::SoftTopK, BTreeMap::new()).unwrap();
    let mut wins = 0;
    let mut rows = String::new();
    let mut tier_impr: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (d, m) in eval_dense.entries.iter().zip(&eval_dmoe.entries) {
        if m.language.starts_with("a2") && families.get(&m.language).is_none() {
            continue;
        }
        if !families.contains_key(&m.language) {
            continue;
        }
        if m.char_ppl < d.char_ppl {
            wins += 1;
        }
        let impr = (d.char_ppl - m.char_ppl) / d.char_ppl * 100.0;
        tier_impr.entry(d.resource_tier.clone()).or_default().push(impr);
        rows.push_str(&format!(
            "  {}: dense {:.3} dmoe {:.3} ({:+.2}%) [{}]\n",
            m.language, d.char_ppl, m.char_ppl, impr, d.resource_tier
        ));
    }
    let macro_d: f64 = eval_dense.entries.iter().filter(|e| families.contains_key(&e.language)).map(|e| e.char_ppl).sum::<f64>() / 12.0;
    let macro_m: f64 = eval_dmoe.entries.iter().filter(|e| families.contains_key(&e.language)).map(|e| e.char_ppl).sum::<f64>() / 12.0;
    stamp(&format!(
        "ppl (12 base languages): dense macro {macro_d:.3}, dmoe macro {macro_m:.3}, dmoe wins {wins}/12"
    ));
    print!("{rows}");
    for (tier, vals) in &tier_impr {
        println!(
            "  tier {tier}: mean improvement {:+.2}%",
            vals.iter().sum::<f64>() / vals.len() as f64
        );
    }

    if std::env::var("CALIB_QUICK").is_ok() {
        stamp("quick mode: skipping ablations and adaptation");
        return;
    }

    // Random-cluster ablation.
    let mut rng = Rng::stream(seed, &[0x77]);
    let rand_assign = random_balanced_assignment(&corpus.base_codes(), 4, &mut rng).unwrap();
    let extended_r = extend_to_moe(&base, &layers, 4, &rand_assign, seed).unwrap();
    let outcome_r = train_dmoe(&extended_r, &corpus, &rand_assign, &ext, &trainer, seed).unwrap();
    let eval_r = evaluate(&outcome_r.checkpoint, &corpus, &eval_cfg, RoutingMode::SoftTopK, BTreeMap::new()).unwrap();
    let macro_r: f64 = eval_r.entries.iter().filter(|e| families.contains_key(&e.language)).map(|e| e.char_ppl).sum::<f64>() / 12.0;
    stamp(&format!("random-cluster dmoe macro ppl: {macro_r:.3} (recovered {macro_m:.3})"));

    // Random-layer ablation.
    let mut rngl = Rng::stream(seed, &[0x78]);
    let mut all_layers: Vec<usize> = (0..8).collect();
    for i in (1..all_layers.len()).rev() {
        all_layers.swap(i, rngl.below(i + 1));
    }
    let mut rand_layers = all_layers[..4].to_vec();
    rand_layers.sort_unstable();
    let extended_l = extend_to_moe(&base, &rand_layers, 4, &assignment, seed).unwrap();
    let outcome_l = train_dmoe(&extended_l, &corpus, &assignment, &ext, &trainer, seed).unwrap();
    let eval_l = evaluate(&outcome_l.checkpoint, &corpus, &eval_cfg, RoutingMode::SoftTopK, BTreeMap::new()).unwrap();
    let macro_l: f64 = eval_l.entries.iter().filter(|e| families.contains_key(&e.language)).map(|e| e.char_ppl).sum::<f64>() / 12.0;
    stamp(&format!(
        "random layers {rand_layers:?} macro ppl: {macro_l:.3} (ranked {layers:?}: {macro_m:.3})"
    ));

    // Adaptation: DLA vs LAPT on the held-out language.
    let new_code = corpus.languages.iter().find(|l| l.adapt).unwrap().code.clone();
    let ppls = score_experts(&outcome.checkpoint, &corpus, &new_code, &eval_cfg).unwrap();
    stamp(&format!("expert scores for {new_code}: {ppls:?}"));
    let grafted = graft_expert(
        &outcome.checkpoint,
        dmoe_core::adapt::choose_expert(&ppls),
        RouterColumnInit::CopyNoise,
        seed,
    )
    .unwrap();
    let adapt_steps = 80;
    let (dla, _) = dla_finetune(
        &grafted, &corpus, &new_code, adapt_steps, &trainer, 1.28, RouterScope::Full, seed,
    )
    .unwrap();
    let (lapt, _) =
        lapt_finetune(&outcome.checkpoint, &corpus, &new_code, adapt_steps, &trainer, seed)
            .unwrap();
    let eval_frozen = eval_dmoe;
    let eval_dla = evaluate(&dla, &corpus, &eval_cfg, RoutingMode::SoftTopK, BTreeMap::new()).unwrap();
    let eval_lapt = evaluate(&lapt, &corpus, &eval_cfg, RoutingMode::SoftTopK, BTreeMap::new()).unwrap();
    let old_mean = |r: &dmoe_core::eval::EvalReport| -> f64 {
        r.entries.iter().filter(|e| families.contains_key(&e.language)).map(|e| e.char_ppl).sum::<f64>() / 12.0
    };
    let new_ppl = |r: &dmoe_core::eval::EvalReport| r.entry(&new_code).unwrap().char_ppl;
    stamp(&format!(
        "adaptation: frozen old {:.3} new {:.3} | dla old {:.3} new {:.3} | lapt old {:.3} new {:.3}",
        old_mean(&eval_frozen),
        new_ppl(&eval_frozen),
        old_mean(&eval_dla),
        new_ppl(&eval_dla),
        old_mean(&eval_lapt),
        new_ppl(&eval_lapt),
    ));
    stamp("done");
}
