//! Held-out perplexity, router top-1 statistics, and model comparison.
//!
//! The held-out stream of each language is cut into consecutive windows of
//! the evaluation sequence length; positions 1..len-1 of every window are
//! teacher-forced. Per-row negative log-likelihoods are computed directly
//! from the logits and summed in window order, so the totals are independent
//! of how windows are grouped into batches.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::TokenizedCorpus;
use crate::error::{io_err, DmoeError, Result};
use crate::model::{RoutingMode, TransformerModel};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sequence_length: usize,
    pub batch_size: usize,
    /// Cap on scored windows per language; 0 means the full held-out stream.
    pub max_windows_per_language: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { sequence_length: 128, batch_size: 16, max_windows_per_language: 64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalEntry {
    pub language: String,
    pub token_ppl: f64,
    pub char_ppl: f64,
    pub bits_per_char: f64,
    pub nll_total: f64,
    pub tokens_scored: usize,
    pub chars_scored: usize,
    pub resource_tier: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub routing: String,
    pub entries: Vec<EvalEntry>,
    pub inputs: BTreeMap<String, String>,
}

/// exp(total NLL / reference unit count); the unit count is pluggable so
/// other normalizations can reuse the same path.
pub fn normalized_ppl(nll_total: f64, units: usize) -> f64 {
    (nll_total / units as f64).exp()
}

/// Sum of per-position NLLs for one window, read off the logits data.
fn window_nll(logits: &[f64], vocab: usize, window: &[u32]) -> f64 {
    let mut nll = 0.0;
    for t in 1..window.len() {
        let row = &logits[(t - 1) * vocab..t * vocab];
        let target = window[t] as usize;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        nll += max + z.ln() - row[target];
    }
    nll
}

/// Teacher-forced total NLL and predicted-token count over a fixed stream.
pub fn stream_nll(
    model: &TransformerModel,
    stream: &[u32],
    cfg: &EvalConfig,
    mode: RoutingMode,
) -> Result<(f64, usize)> {
    if stream.len() < 2 {
        return Err(DmoeError::validation("evaluation stream too short"));
    }
    let s = cfg.sequence_length.min(model.config.max_sequence_length);
    let mut windows: Vec<&[u32]> = stream.chunks(s).filter(|w| w.len() >= 2).collect();
    if cfg.max_windows_per_language > 0 {
        windows.truncate(cfg.max_windows_per_language);
    }
    if windows.is_empty() {
        return Err(DmoeError::validation("no scoreable window in stream"));
    }
    let vocab = model.config.vocab_size;
    let mut nll_total = 0.0;
    let mut predicted = 0usize;

    // Full windows batched; the final short window (if any) goes alone.
    let full: Vec<&[u32]> = windows.iter().copied().filter(|w| w.len() == s).collect();
    for chunk in full.chunks(cfg.batch_size.max(1)) {
        let mut tokens = Vec::with_capacity(chunk.len() * s);
        for w in chunk {
            tokens.extend_from_slice(w);
        }
        let out = model.forward(&tokens, chunk.len(), s, mode)?;
        let logits = out.logits.data();
        for (i, w) in chunk.iter().enumerate() {
            nll_total += window_nll(&logits[i * s * vocab..(i + 1) * s * vocab], vocab, w);
            predicted += w.len() - 1;
        }
    }
    for w in windows.iter().filter(|w| w.len() < s) {
        let out = model.forward(w, 1, w.len(), mode)?;
        nll_total += window_nll(&out.logits.data(), vocab, w);
        predicted += w.len() - 1;
    }
    Ok((nll_total, predicted))
}

/// Resource tier by train-size rank: thirds labeled low / medium / high.
pub fn resource_tiers(sizes: &BTreeMap<String, usize>) -> BTreeMap<String, String> {
    let mut ranked: Vec<(&String, &usize)> = sizes.iter().collect();
    ranked.sort_by_key(|(code, &n)| (n, (*code).clone()));
    let n = ranked.len();
    ranked
        .into_iter()
        .enumerate()
        .map(|(i, (code, _))| {
            let tier = if i * 3 < n {
                "low"
            } else if i * 3 < 2 * n {
                "medium"
            } else {
                "high"
            };
            (code.clone(), tier.to_string())
        })
        .collect()
}

/// Held-out perplexity for every language in the corpus.
pub fn evaluate(
    ckpt: &Checkpoint,
    corpus: &TokenizedCorpus,
    cfg: &EvalConfig,
    mode: RoutingMode,
    inputs: BTreeMap<String, String>,
) -> Result<EvalReport> {
    let model = ckpt.to_model()?;
    let tiers = resource_tiers(&corpus.train_sizes());
    let mut entries = Vec::new();
    for lang in &corpus.languages {
        let (nll, tokens) = stream_nll(&model, &lang.heldout, cfg, mode)?;
        // One character per token under the character tokenizer.
        let chars = tokens;
        entries.push(EvalEntry {
            language: lang.code.clone(),
            token_ppl: normalized_ppl(nll, tokens),
            char_ppl: normalized_ppl(nll, chars),
            bits_per_char: nll / (std::f64::consts::LN_2 * chars as f64),
            nll_total: nll,
            tokens_scored: tokens,
            chars_scored: chars,
            resource_tier: tiers.get(&lang.code).cloned().unwrap_or_else(|| "new".to_string()),
        });
    }
    Ok(EvalReport {
        model_id: ckpt.id(),
        routing: match mode {
            RoutingMode::SoftTopK => "soft_topk".to_string(),
            RoutingMode::HardExpert(e) => format!("hard_expert_{e}"),
            RoutingMode::HardGroup(_) => "hard_group".to_string(),
        },
        entries,
        inputs,
    })
}

impl EvalReport {
    pub fn entry(&self, code: &str) -> Option<&EvalEntry> {
        self.entries.iter().find(|e| e.language == code)
    }

    pub fn macro_avg_char_ppl(&self) -> f64 {
        self.entries.iter().map(|e| e.char_ppl).sum::<f64>() / self.entries.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "language,token_ppl,char_ppl,bits_per_char,nll_total,tokens_scored,chars_scored,resource_tier\n",
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
                e.language,
                e.token_ppl,
                e.char_ppl,
                e.bits_per_char,
                e.nll_total,
                e.tokens_scored,
                e.chars_scored,
                e.resource_tier
            ));
        }
        out
    }
}

// ── Router top-1 statistics ───────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RouterStats {
    pub languages: Vec<String>,
    /// MoE layer indices, aligned with `frequencies`.
    pub layers: Vec<usize>,
    /// frequencies[layer][language * num_experts + e]
    pub frequencies: Vec<Vec<f64>>,
    pub num_experts: usize,
}

/// Frequency of each expert being the top-1 router choice, per language and
/// per MoE layer, over held-out windows.
pub fn router_top1_stats(
    ckpt: &Checkpoint,
    corpus: &TokenizedCorpus,
    cfg: &EvalConfig,
) -> Result<RouterStats> {
    let model = ckpt.to_model()?;
    let moe_layers = model.moe_layers();
    if moe_layers.is_empty() {
        return Err(DmoeError::validation("model has no MoE layers"));
    }
    let g = model.num_experts().unwrap();
    let n_lang = corpus.languages.len();
    let mut counts = vec![vec![0u64; n_lang * g]; moe_layers.len()];
    let mut totals = vec![vec![0u64; n_lang]; moe_layers.len()];
    let s = cfg.sequence_length.min(model.config.max_sequence_length);

    for (lang_idx, lang) in corpus.languages.iter().enumerate() {
        let mut windows: Vec<&[u32]> = lang.heldout.chunks(s).filter(|w| w.len() >= 2).collect();
        if cfg.max_windows_per_language > 0 {
            windows.truncate(cfg.max_windows_per_language);
        }
        let full: Vec<&[u32]> = windows.iter().copied().filter(|w| w.len() == s).collect();
        for chunk in full.chunks(cfg.batch_size.max(1)) {
            let mut tokens = Vec::with_capacity(chunk.len() * s);
            for w in chunk {
                tokens.extend_from_slice(w);
            }
            let out = model.forward(&tokens, chunk.len(), s, RoutingMode::SoftTopK)?;
            for (li, (_, _, probs)) in out.routers.iter().enumerate() {
                let pd = probs.data();
                for t in 0..chunk.len() * s {
                    let row = &pd[t * g..(t + 1) * g];
                    let top = crate::model::top_k_indices(row, 1)[0];
                    counts[li][lang_idx * g + top] += 1;
                    totals[li][lang_idx] += 1;
                }
            }
        }
    }
    let frequencies = counts
        .iter()
        .zip(&totals)
        .map(|(layer_counts, layer_totals)| {
            let mut freq = vec![0.0; n_lang * g];
            for lang in 0..n_lang {
                let total = layer_totals[lang].max(1) as f64;
                for e in 0..g {
                    freq[lang * g + e] = layer_counts[lang * g + e] as f64 / total;
                }
            }
            freq
        })
        .collect();
    Ok(RouterStats {
        languages: corpus.codes(),
        layers: moe_layers,
        frequencies,
        num_experts: g,
    })
}

impl RouterStats {
    /// Mean over languages of the top-1 mass on the expert whose index equals
    /// the language's group, for one MoE layer.
    pub fn mean_diagonal_mass(&self, layer_pos: usize, group_of: &BTreeMap<String, usize>) -> f64 {
        let g = self.num_experts;
        let mut acc = 0.0;
        for (li, code) in self.languages.iter().enumerate() {
            acc += self.frequencies[layer_pos][li * g + group_of[code]];
        }
        acc / self.languages.len() as f64
    }

    pub fn layer_csv(&self, layer_pos: usize) -> String {
        let mut out = String::from("language");
        for e in 0..self.num_experts {
            out.push_str(&format!(",expert{e}"));
        }
        out.push('\n');
        for (li, code) in self.languages.iter().enumerate() {
            out.push_str(code);
            for e in 0..self.num_experts {
                out.push_str(&format!(
                    ",{:.6}",
                    self.frequencies[layer_pos][li * self.num_experts + e]
                ));
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (pos, layer) in self.layers.iter().enumerate() {
            let path = dir.join(format!("router_top1_layer{layer}.csv"));
            fs::write(&path, self.layer_csv(pos)).map_err(io_err(path))?;
        }
        Ok(())
    }
}

// ── Model comparison ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub language: String,
    pub baseline_ppl: f64,
    pub candidate_ppl: f64,
    /// baseline - candidate: positive means the candidate improved.
    pub delta: f64,
    pub improvement_pct: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub baseline_macro_avg: f64,
    pub candidate_macro_avg: f64,
    pub macro_delta: f64,
    pub macro_improvement_pct: f64,
}

/// Per-language char-PPL deltas of `candidate` against `baseline`.
pub fn compare_models(baseline: &EvalReport, candidate: &EvalReport) -> Result<Comparison> {
    let a_langs: Vec<&String> = baseline.entries.iter().map(|e| &e.language).collect();
    let b_langs: Vec<&String> = candidate.entries.iter().map(|e| &e.language).collect();
    if a_langs != b_langs {
        return Err(DmoeError::validation("reports cover different language sets"));
    }
    let rows: Vec<ComparisonRow> = baseline
        .entries
        .iter()
        .zip(&candidate.entries)
        .map(|(a, b)| ComparisonRow {
            language: a.language.clone(),
            baseline_ppl: a.char_ppl,
            candidate_ppl: b.char_ppl,
            delta: a.char_ppl - b.char_ppl,
            improvement_pct: (a.char_ppl - b.char_ppl) / a.char_ppl * 100.0,
        })
        .collect();
    let base_avg = baseline.macro_avg_char_ppl();
    let cand_avg = candidate.macro_avg_char_ppl();
    Ok(Comparison {
        rows,
        baseline_macro_avg: base_avg,
        candidate_macro_avg: cand_avg,
        macro_delta: base_avg - cand_avg,
        macro_improvement_pct: (base_avg - cand_avg) / base_avg * 100.0,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("language,baseline_ppl,candidate_ppl,delta,improvement_pct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.4}\n",
                r.language, r.baseline_ppl, r.candidate_ppl, r.delta, r.improvement_pct
            ));
        }
        out.push_str(&format!(
            "macro_avg,{:.6},{:.6},{:.6},{:.4}\n",
            self.baseline_macro_avg,
            self.candidate_macro_avg,
            self.macro_delta,
            self.macro_improvement_pct
        ));
        out
    }
}
