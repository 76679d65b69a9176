//! Synthetic languages with controllable family structure.
//!
//! A language is an order-1 Markov chain over a shared 32-character alphabet;
//! documents are newline-separated runs. Languages inside one family are
//! convex perturbations of a shared base transition table, so ground-truth
//! family labels exist for clustering validation. Tokenization is a character
//! bijection over the alphabet plus the separator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dmoe_numeric::Rng;

use crate::artifact::{read_json, write_json};
use crate::error::{io_err, DmoeError, Result};

/// Content symbols; the separator brings the vocabulary to 33.
pub const CONTENT_SYMBOLS: usize = 32;
pub const SEPARATOR: char = '\n';

const DOC_LEN_MIN: usize = 64;
const DOC_LEN_SPAN: usize = 193; // doc length uniform in [64, 256]
const ROW_SHARPNESS: f64 = 3.5;

// RNG stream tags.
const TAG_FAMILY_BASE: u64 = 0x11;
const TAG_LANGUAGE_TABLE: u64 = 0x12;
const TAG_TEXT: u64 = 0x13;
const TAG_BATCH: u64 = 0x14;

// ── Tokenizer ─────────────────────────────────────────────────────────────

/// Character-level bijective tokenizer over a declared alphabet.
#[derive(Clone, Debug)]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        let mut chars: Vec<char> = ('a'..='z').collect();
        chars.extend('0'..='5');
        debug_assert_eq!(chars.len(), CONTENT_SYMBOLS);
        chars.push(SEPARATOR);
        Alphabet { chars }
    }
}

impl Alphabet {
    pub fn from_string(s: &str) -> Result<Alphabet> {
        let chars: Vec<char> = s.chars().collect();
        let unique: std::collections::BTreeSet<char> = chars.iter().copied().collect();
        if unique.len() != chars.len() || chars.is_empty() {
            return Err(DmoeError::validation("alphabet must be non-empty and duplicate-free"));
        }
        Ok(Alphabet { chars })
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len()
    }

    pub fn separator_id(&self) -> u32 {
        (self.chars.len() - 1) as u32
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&a| a == c)
                    .map(|i| i as u32)
                    .ok_or_else(|| DmoeError::validation(format!("character {c:?} not in alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                self.chars
                    .get(t as usize)
                    .copied()
                    .ok_or_else(|| DmoeError::validation(format!("token {t} out of vocabulary")))
            })
            .collect()
    }
}

// ── Language specs and family generation ──────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub code: String,
    pub family_id: usize,
    /// Row-stochastic [CONTENT_SYMBOLS x CONTENT_SYMBOLS] transition table.
    pub transition: Vec<f64>,
    pub corpus_size_chars: usize,
    pub seed: u64,
}

impl LanguageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.transition.len() != CONTENT_SYMBOLS * CONTENT_SYMBOLS {
            return Err(DmoeError::validation(format!(
                "{}: transition table has {} entries",
                self.code,
                self.transition.len()
            )));
        }
        for (i, row) in self.transition.chunks(CONTENT_SYMBOLS).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(DmoeError::validation(format!(
                    "{}: transition row {i} sums to {s}",
                    self.code
                )));
            }
        }
        Ok(())
    }
}

fn random_stochastic_table(rng: &mut Rng) -> Vec<f64> {
    let n = CONTENT_SYMBOLS;
    let mut table = vec![0.0; n * n];
    for row in table.chunks_mut(n) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // Sharpened exponential weights give sparse, language-like rows.
            *v = (-rng.open_f64().ln()).powf(ROW_SHARPNESS);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    table
}

fn renormalize_rows(table: &mut [f64]) {
    for row in table.chunks_mut(CONTENT_SYMBOLS) {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// One member of a family: convex mixture of the family base table and a
/// member-specific noise table, mixed by `perturbation`. Members are
/// independent streams, so any member can be generated in isolation.
pub fn language_spec(
    family_id: usize,
    member: usize,
    base_seed: u64,
    perturbation: f64,
) -> Result<LanguageSpec> {
    if !(0.0..=1.0).contains(&perturbation) {
        return Err(DmoeError::validation(format!(
            "perturbation {perturbation} outside [0, 1]"
        )));
    }
    let mut base_rng = Rng::stream(base_seed, &[TAG_FAMILY_BASE, family_id as u64]);
    let base = random_stochastic_table(&mut base_rng);
    let mut noise_rng =
        Rng::stream(base_seed, &[TAG_LANGUAGE_TABLE, family_id as u64, member as u64]);
    let noise = random_stochastic_table(&mut noise_rng);
    let mut table: Vec<f64> = base
        .iter()
        .zip(&noise)
        .map(|(b, n)| (1.0 - perturbation) * b + perturbation * n)
        .collect();
    renormalize_rows(&mut table);
    let family_char = char::from(b'a' + (family_id % 26) as u8);
    let spec = LanguageSpec {
        code: format!("{family_char}{member}"),
        family_id,
        transition: table,
        corpus_size_chars: 0,
        seed: base_seed ^ ((family_id as u64) << 32) ^ member as u64,
    };
    spec.validate()?;
    Ok(spec)
}

/// Languages of one family: convex mixtures of a shared base table with
/// per-language noise tables, mixed by `perturbation`.
pub fn generate_family(
    family_id: usize,
    num_languages: usize,
    base_seed: u64,
    perturbation: f64,
) -> Result<Vec<LanguageSpec>> {
    if num_languages == 0 {
        return Err(DmoeError::validation("family must contain at least one language"));
    }
    (0..num_languages)
        .map(|j| language_spec(family_id, j, base_seed, perturbation))
        .collect()
}

/// Mean total-variation distance between two transition tables.
pub fn table_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = CONTENT_SYMBOLS;
    let mut acc = 0.0;
    for i in 0..n {
        let mut tv = 0.0;
        for j in 0..n {
            tv += (a[i * n + j] - b[i * n + j]).abs();
        }
        acc += 0.5 * tv;
    }
    acc / n as f64
}

/// Markov text for one language; documents are newline-terminated.
pub fn generate_text(spec: &LanguageSpec, alphabet: &Alphabet) -> Result<String> {
    spec.validate()?;
    let n = CONTENT_SYMBOLS;
    // Per-row CDF for binary-search sampling.
    let mut cdf = spec.transition.clone();
    for row in cdf.chunks_mut(n) {
        for j in 1..n {
            row[j] += row[j - 1];
        }
    }
    let sample_row = |row: &[f64], u: f64| -> usize {
        row.partition_point(|&c| c < u).min(n - 1)
    };
    let mut rng = Rng::stream(spec.seed, &[TAG_TEXT]);
    let mut out = String::with_capacity(spec.corpus_size_chars + 300);
    while out.len() < spec.corpus_size_chars {
        let doc_len = DOC_LEN_MIN + rng.below(DOC_LEN_SPAN);
        let mut state = rng.below(n);
        out.push(alphabet.chars[state]);
        for _ in 1..doc_len {
            state = sample_row(&cdf[state * n..(state + 1) * n], rng.next_f64());
            out.push(alphabet.chars[state]);
        }
        out.push(SEPARATOR);
    }
    Ok(out)
}

// ── Corpus set on disk ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLanguage {
    pub code: String,
    pub family_id: usize,
    pub corpus_size_chars: usize,
    pub seed: u64,
    /// Held out of base training, probing, and clustering; used by the
    /// language-adaptation stage.
    #[serde(default)]
    pub adapt: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub alphabet: String,
    pub languages: Vec<ManifestLanguage>,
    pub heldout_fraction: f64,
    pub sampling_exponent: f64,
    pub inputs: BTreeMap<String, String>,
}

pub struct CorpusSet {
    pub manifest: CorpusManifest,
    pub texts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_families: usize,
    pub languages_per_family: usize,
    pub perturbation: f64,
    pub size_min_chars: usize,
    pub size_max_chars: usize,
    pub heldout_fraction: f64,
    pub sampling_exponent: f64,
    /// Extra unseen languages (one per family, round robin) reserved for
    /// adaptation experiments.
    pub adapt_languages: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_families: 4,
            languages_per_family: 3,
            perturbation: 0.1,
            size_min_chars: 200_000,
            size_max_chars: 2_000_000,
            heldout_fraction: 0.05,
            sampling_exponent: 0.3,
            adapt_languages: 1,
        }
    }
}

/// Generates the full language set. Corpus sizes are log-spaced between the
/// configured bounds and interleaved across families so every family spans
/// the resource tiers.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64) -> Result<CorpusSet> {
    if cfg.num_families == 0 || cfg.languages_per_family == 0 {
        return Err(DmoeError::validation("corpus must have at least one language"));
    }
    if !(0.0..0.5).contains(&cfg.heldout_fraction) {
        return Err(DmoeError::validation("heldout_fraction must be in [0, 0.5)"));
    }
    let alphabet = Alphabet::default();
    let total = cfg.num_families * cfg.languages_per_family;
    let mut specs: Vec<LanguageSpec> = Vec::with_capacity(total);
    for f in 0..cfg.num_families {
        specs.extend(generate_family(f, cfg.languages_per_family, seed, cfg.perturbation)?);
    }
    // Size rank for language (f, j) is j * num_families + f.
    for (i, spec) in specs.iter_mut().enumerate() {
        let f = i / cfg.languages_per_family;
        let j = i % cfg.languages_per_family;
        let rank = j * cfg.num_families + f;
        let t = if total == 1 { 0.0 } else { rank as f64 / (total - 1) as f64 };
        let size = (cfg.size_min_chars as f64
            * (cfg.size_max_chars as f64 / cfg.size_min_chars as f64).powf(t))
        .round() as usize;
        spec.corpus_size_chars = size;
    }
    // Unseen adaptation languages: fresh members of existing families with a
    // mid-range corpus size, excluded from training and probing.
    let train_count = specs.len();
    let adapt_size =
        ((cfg.size_min_chars as f64) * (cfg.size_max_chars as f64 / cfg.size_min_chars as f64).sqrt())
            .round() as usize;
    for j in 0..cfg.adapt_languages {
        let family = j % cfg.num_families;
        let member = cfg.languages_per_family + j / cfg.num_families;
        let mut spec = language_spec(family, member, seed, cfg.perturbation)?;
        spec.corpus_size_chars = adapt_size;
        specs.push(spec);
    }
    let rendered: Vec<(String, String, usize)> = specs
        .par_iter()
        .map(|s| {
            let text = generate_text(s, &alphabet)?;
            let len = text.len();
            Ok((s.code.clone(), text, len))
        })
        .collect::<Result<_>>()?;
    let mut texts = BTreeMap::new();
    let mut languages = Vec::new();
    for (i, ((code, text, len), spec)) in rendered.into_iter().zip(&specs).enumerate() {
        languages.push(ManifestLanguage {
            code: code.clone(),
            family_id: spec.family_id,
            corpus_size_chars: len,
            seed: spec.seed,
            adapt: i >= train_count,
        });
        texts.insert(code, text);
    }
    Ok(CorpusSet {
        manifest: CorpusManifest {
            version: 1,
            alphabet: alphabet.as_string(),
            languages,
            heldout_fraction: cfg.heldout_fraction,
            sampling_exponent: cfg.sampling_exponent,
            inputs: BTreeMap::new(),
        },
        texts,
    })
}

impl CorpusSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (code, text) in &self.texts {
            let path = dir.join(format!("{code}.txt"));
            fs::write(&path, text).map_err(io_err(path))?;
        }
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<CorpusSet> {
        let manifest: CorpusManifest = read_json(&dir.join("manifest.json"))?;
        let mut texts = BTreeMap::new();
        for lang in &manifest.languages {
            let path = dir.join(format!("{}.txt", lang.code));
            if !path.exists() {
                return Err(DmoeError::MissingInput(path));
            }
            texts.insert(lang.code.clone(), fs::read_to_string(&path).map_err(io_err(path))?);
        }
        Ok(CorpusSet { manifest, texts })
    }

    pub fn codes(&self) -> Vec<String> {
        self.manifest.languages.iter().map(|l| l.code.clone()).collect()
    }
}

// ── Tokenized view with train/held-out split ──────────────────────────────

pub struct LanguageTokens {
    pub code: String,
    pub family_id: usize,
    pub adapt: bool,
    pub train: Vec<u32>,
    pub heldout: Vec<u32>,
}

pub struct TokenizedCorpus {
    pub alphabet: Alphabet,
    pub languages: Vec<LanguageTokens>,
    pub sampling_exponent: f64,
}

impl TokenizedCorpus {
    /// Tokenizes and reserves the final `heldout_fraction` of each language
    /// (aligned to a document boundary) for evaluation.
    pub fn from_set(set: &CorpusSet) -> Result<TokenizedCorpus> {
        let alphabet = Alphabet::from_string(&set.manifest.alphabet)?;
        let mut languages = Vec::new();
        for lang in &set.manifest.languages {
            let text = &set.texts[&lang.code];
            let tokens = alphabet.encode(text)?;
            let cut = ((1.0 - set.manifest.heldout_fraction) * tokens.len() as f64) as usize;
            let sep = alphabet.separator_id();
            let boundary = tokens[cut.min(tokens.len().saturating_sub(1))..]
                .iter()
                .position(|&t| t == sep)
                .map(|p| cut + p + 1)
                .unwrap_or(cut);
            languages.push(LanguageTokens {
                code: lang.code.clone(),
                family_id: lang.family_id,
                adapt: lang.adapt,
                train: tokens[..boundary].to_vec(),
                heldout: tokens[boundary..].to_vec(),
            });
        }
        Ok(TokenizedCorpus {
            alphabet,
            languages,
            sampling_exponent: set.manifest.sampling_exponent,
        })
    }

    pub fn index_of(&self, code: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l.code == code)
            .ok_or_else(|| DmoeError::validation(format!("unknown language {code}")))
    }

    pub fn codes(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.code.clone()).collect()
    }

    /// Train-split sizes of the base languages (adaptation languages are
    /// excluded from every training and probing stream).
    pub fn train_sizes(&self) -> BTreeMap<String, usize> {
        self.languages
            .iter()
            .filter(|l| !l.adapt)
            .map(|l| (l.code.clone(), l.train.len()))
            .collect()
    }

    /// Indices of the base (non-adaptation) languages.
    pub fn base_language_indices(&self) -> Vec<usize> {
        self.languages
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.adapt)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn base_codes(&self) -> Vec<String> {
        self.languages.iter().filter(|l| !l.adapt).map(|l| l.code.clone()).collect()
    }
}

/// Uniform monolingual batch from one language's train split (probing and
/// adaptation fine-tuning).
pub fn sample_monolingual_batch(
    lang: &LanguageTokens,
    batch_size: usize,
    sequence_length: usize,
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    if lang.train.len() <= sequence_length {
        return Err(DmoeError::validation(format!(
            "language {} corpus too small for sequence length {sequence_length}",
            lang.code
        )));
    }
    let mut tokens = Vec::with_capacity(batch_size * sequence_length);
    for _ in 0..batch_size {
        let start = rng.below(lang.train.len() - sequence_length);
        tokens.extend_from_slice(&lang.train[start..start + sequence_length]);
    }
    Ok(tokens)
}

// ── Temperature-balanced sampling weights ─────────────────────────────────

/// p_x = n_x^exponent / sum_y n_y^exponent
pub fn sample_language_weights(
    sizes: &BTreeMap<String, usize>,
    exponent: f64,
) -> Result<BTreeMap<String, f64>> {
    if sizes.is_empty() {
        return Err(DmoeError::validation("empty corpus-size map"));
    }
    if !(exponent > 0.0) {
        return Err(DmoeError::validation(format!("exponent {exponent} must be positive")));
    }
    if let Some((code, _)) = sizes.iter().find(|(_, &n)| n == 0) {
        return Err(DmoeError::validation(format!("language {code} has zero size")));
    }
    let powered: Vec<(String, f64)> = sizes
        .iter()
        .map(|(c, &n)| (c.clone(), (n as f64).powf(exponent)))
        .collect();
    let total: f64 = powered.iter().map(|(_, w)| w).sum();
    Ok(powered.into_iter().map(|(c, w)| (c, w / total)).collect())
}

// ── Batch stream ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Languages drawn independently per sequence (probe/base stage).
    Mixed,
    /// Every sequence in a batch comes from one language group.
    GroupHomogeneous,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub sequence_length: usize,
    pub mode: BatchMode,
}

pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub batch_size: usize,
    pub sequence_length: usize,
    /// Language index (into corpus order) per sequence.
    pub languages: Vec<usize>,
    /// Group id shared by the whole batch in homogeneous mode.
    pub group: Option<usize>,
}

pub struct BatchStream<'a> {
    corpus: &'a TokenizedCorpus,
    plan: BatchPlan,
    rng: Rng,
    /// Corpus indices of the sampleable (non-adaptation) languages.
    active: Vec<usize>,
    /// Cumulative language weights for mixed sampling, aligned with `active`.
    lang_cdf: Vec<f64>,
    group_cdf: Vec<f64>,
    group_langs: Vec<Vec<usize>>,
    group_lang_cdfs: Vec<Vec<f64>>,
}

fn cdf_from(weights: &[f64]) -> Vec<f64> {
    let mut cdf = weights.to_vec();
    for i in 1..cdf.len() {
        cdf[i] += cdf[i - 1];
    }
    cdf
}

fn sample_cdf(rng: &mut Rng, cdf: &[f64]) -> usize {
    let u = rng.next_f64() * cdf.last().copied().unwrap_or(1.0);
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

impl<'a> BatchStream<'a> {
    pub fn new(
        corpus: &'a TokenizedCorpus,
        plan: BatchPlan,
        group_of: Option<&BTreeMap<String, usize>>,
        seed: u64,
    ) -> Result<BatchStream<'a>> {
        if plan.batch_size == 0 || plan.sequence_length < 2 {
            return Err(DmoeError::validation("batch_size >= 1 and sequence_length >= 2 required"));
        }
        for lang in corpus.languages.iter().filter(|l| !l.adapt) {
            if lang.train.len() <= plan.sequence_length {
                return Err(DmoeError::validation(format!(
                    "language {} train split shorter than one sequence",
                    lang.code
                )));
            }
        }
        let weights_map =
            sample_language_weights(&corpus.train_sizes(), corpus.sampling_exponent)?;
        let active = corpus.base_language_indices();
        let weights: Vec<f64> = active
            .iter()
            .map(|&i| weights_map[&corpus.languages[i].code])
            .collect();

        let mut stream = BatchStream {
            corpus,
            plan,
            rng: Rng::stream(seed, &[TAG_BATCH]),
            active: active.clone(),
            lang_cdf: cdf_from(&weights),
            group_cdf: Vec::new(),
            group_langs: Vec::new(),
            group_lang_cdfs: Vec::new(),
        };

        if plan.mode == BatchMode::GroupHomogeneous {
            let map = group_of.ok_or_else(|| {
                DmoeError::validation("group-homogeneous batching requires a group assignment")
            })?;
            let mut per_lang = Vec::with_capacity(active.len());
            for &i in &active {
                let code = &corpus.languages[i].code;
                let g = *map.get(code).ok_or_else(|| {
                    DmoeError::validation(format!(
                        "language {code} has no group in homogeneous mode"
                    ))
                })?;
                per_lang.push(g);
            }
            let num_groups = per_lang.iter().max().map(|m| m + 1).unwrap_or(0);
            let mut group_weight = vec![0.0; num_groups];
            let mut group_langs = vec![Vec::new(); num_groups];
            for (slot, &g) in per_lang.iter().enumerate() {
                group_weight[g] += weights[slot];
                group_langs[g].push(active[slot]);
            }
            let group_lang_cdfs = group_langs
                .iter()
                .map(|langs| {
                    cdf_from(
                        &langs
                            .iter()
                            .map(|&i| weights_map[&corpus.languages[i].code])
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            stream.group_cdf = cdf_from(&group_weight);
            stream.group_langs = group_langs;
            stream.group_lang_cdfs = group_lang_cdfs;
        }
        Ok(stream)
    }

    fn sample_sequence(&mut self, lang_idx: usize, out: &mut Vec<u32>) {
        let train = &self.corpus.languages[lang_idx].train;
        let start = self.rng.below(train.len() - self.plan.sequence_length);
        out.extend_from_slice(&train[start..start + self.plan.sequence_length]);
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        let b = self.plan.batch_size;
        let s = self.plan.sequence_length;
        let mut tokens = Vec::with_capacity(b * s);
        let mut languages = Vec::with_capacity(b);
        let group = match self.plan.mode {
            BatchMode::GroupHomogeneous => {
                let g = sample_cdf(&mut self.rng, &self.group_cdf);
                for _ in 0..b {
                    let within = sample_cdf(&mut self.rng, &self.group_lang_cdfs[g]);
                    let lang = self.group_langs[g][within];
                    languages.push(lang);
                    self.sample_sequence(lang, &mut tokens);
                }
                Some(g)
            }
            BatchMode::Mixed => {
                for _ in 0..b {
                    let lang = self.active[sample_cdf(&mut self.rng, &self.lang_cdf)];
                    languages.push(lang);
                    self.sample_sequence(lang, &mut tokens);
                }
                None
            }
        };
        TokenBatch { tokens, batch_size: b, sequence_length: s, languages, group }
    }
}
