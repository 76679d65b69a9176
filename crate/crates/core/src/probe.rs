//! Per-language parameter-deviation fingerprints.
//!
//! A probe fine-tunes a fresh copy of the base model on monolingual batches
//! for a handful of optimizer steps; the per-block parameter deltas and their
//! norms are the language's fingerprint. Cosine similarity between
//! fingerprints (by default over the last three blocks) drives clustering.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dmoe_numeric::{backward, zero_grads, AdamW, AdamWConfig, Rng};

use crate::artifact::{read_json, write_json};
use crate::checkpoint::Checkpoint;
use crate::corpus::TokenizedCorpus;
use crate::error::{io_err, DmoeError, Result};
use crate::model::RoutingMode;

const TAG_PROBE: u64 = 0x31;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 10,
            batch_size: 16,
            sequence_length: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl ProbeConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Per-language deviation fingerprint: one flattened delta vector per
/// transformer block (embeddings and head excluded) plus its L2 norm.
#[derive(Clone, Debug)]
pub struct DeviationRecord {
    pub language: String,
    pub per_layer_delta: Vec<Vec<f64>>,
    pub per_layer_norm: Vec<f64>,
    pub probe_steps: usize,
    pub base_checkpoint_id: String,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl DeviationRecord {
    pub fn num_layers(&self) -> usize {
        self.per_layer_delta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_layer_delta.len() != self.per_layer_norm.len() {
            return Err(DmoeError::validation("layer delta/norm length mismatch"));
        }
        for (l, (delta, &norm)) in
            self.per_layer_delta.iter().zip(&self.per_layer_norm).enumerate()
        {
            if (l2(delta) - norm).abs() > 1e-9 {
                return Err(DmoeError::validation(format!(
                    "{}: stored norm for layer {l} disagrees with delta",
                    self.language
                )));
            }
        }
        Ok(())
    }
}

/// Fine-tunes a fresh copy of `base` on monolingual batches and returns the
/// per-block deviations. The base checkpoint itself is never mutated.
pub fn probe_language(
    base: &Checkpoint,
    corpus: &TokenizedCorpus,
    code: &str,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<DeviationRecord> {
    if cfg.steps == 0 {
        return Err(DmoeError::validation("probe requires at least one step"));
    }
    let lang_idx = corpus.index_of(code)?;
    let lang = &corpus.languages[lang_idx];
    if lang.train.len() <= cfg.sequence_length {
        return Err(DmoeError::validation(format!(
            "language {code} corpus too small for probing"
        )));
    }
    let model = base.to_model()?;
    if cfg.sequence_length > model.config.max_sequence_length || cfg.sequence_length < 2 {
        return Err(DmoeError::validation(format!(
            "probe sequence length {} invalid for model (max {})",
            cfg.sequence_length, model.config.max_sequence_length
        )));
    }
    let params = model.params();
    let mut opt = AdamW::new(&params, cfg.optimizer())?;
    let mut rng = Rng::stream(seed, &[TAG_PROBE, lang_idx as u64]);
    let (b, s) = (cfg.batch_size, cfg.sequence_length);
    for _ in 0..cfg.steps {
        let mut tokens = Vec::with_capacity(b * s);
        for _ in 0..b {
            let start = rng.below(lang.train.len() - s);
            tokens.extend_from_slice(&lang.train[start..start + s]);
        }
        zero_grads(&params);
        let loss = model.causal_lm_loss(&tokens, b, s, RoutingMode::SoftTopK)?;
        backward(&loss)?;
        opt.step(&params)?;
    }

    let tuned: BTreeMap<String, Vec<f64>> =
        model.named_params().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let n_layers = model.config.num_layers;
    let mut per_layer_delta = Vec::with_capacity(n_layers);
    let mut per_layer_norm = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let prefix = format!("block{l}.");
        let mut delta = Vec::new();
        for record in &base.manifest.tensors {
            if !record.name.starts_with(&prefix) {
                continue;
            }
            let (_, base_data) = base.require_tensor(&record.name)?;
            let tuned_data = &tuned[&record.name];
            delta.extend(tuned_data.iter().zip(base_data).map(|(a, b)| a - b));
        }
        per_layer_norm.push(l2(&delta));
        per_layer_delta.push(delta);
    }
    Ok(DeviationRecord {
        language: code.to_string(),
        per_layer_delta,
        per_layer_norm,
        probe_steps: cfg.steps,
        base_checkpoint_id: base.id(),
    })
}

/// Probes every language in parallel; each worker owns a private model copy.
pub fn probe_all(
    base: &Checkpoint,
    corpus: &TokenizedCorpus,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<DeviationRecord>> {
    let codes = corpus.base_codes();
    codes
        .par_iter()
        .map(|code| probe_language(base, corpus, code, cfg, seed))
        .collect()
}

/// Normalized per-layer deviation distribution.
pub fn layer_profile(record: &DeviationRecord) -> Result<Vec<f64>> {
    let total: f64 = record.per_layer_norm.iter().sum();
    if total <= 0.0 {
        return Err(DmoeError::validation(format!(
            "{}: all-zero deviation has no layer profile",
            record.language
        )));
    }
    Ok(record.per_layer_norm.iter().map(|n| n / total).collect())
}

fn concat_subset(record: &DeviationRecord, layer_subset: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &l in layer_subset {
        out.extend_from_slice(&record.per_layer_delta[l]);
    }
    out
}

/// Cosine similarity of two full-concatenation deviations.
pub fn deviation_cosine(a: &DeviationRecord, b: &DeviationRecord) -> Result<f64> {
    let layers: Vec<usize> = (0..a.num_layers()).collect();
    let (va, vb) = (concat_subset(a, &layers), concat_subset(b, &layers));
    cosine(&va, &vb)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DmoeError::validation("cosine of mismatched vectors"));
    }
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(DmoeError::validation("cosine of zero-norm deviation"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Default similarity layer subset: the last three blocks.
pub fn default_layer_subset(num_layers: usize) -> Vec<usize> {
    (num_layers.saturating_sub(3)..num_layers).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub languages: Vec<String>,
    /// Row-major symmetric matrix.
    pub values: Vec<f64>,
    pub layer_subset: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.languages.len() + j]
    }

    pub fn index_of(&self, code: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| DmoeError::validation(format!("unknown language {code}")))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.languages.len();
        if self.values.len() != n * n {
            return Err(DmoeError::validation("similarity matrix is not square"));
        }
        for i in 0..n {
            if (self.get(i, i) - 1.0).abs() > 1e-9 {
                return Err(DmoeError::validation(format!("diagonal {i} != 1")));
            }
            for j in 0..n {
                let v = self.get(i, j);
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                    return Err(DmoeError::validation(format!("similarity ({i},{j}) = {v}")));
                }
                if (v - self.get(j, i)).abs() > 1e-12 {
                    return Err(DmoeError::validation(format!("asymmetry at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    /// CSV with language codes in the first row and column, 6 decimals.
    pub fn to_csv(&self) -> String {
        let n = self.languages.len();
        let mut out = String::new();
        out.push_str(&format!(",{}\n", self.languages.join(",")));
        for i in 0..n {
            out.push_str(&self.languages[i]);
            for j in 0..n {
                out.push_str(&format!(",{:.6}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, self.to_csv()).map_err(io_err(path))?;
        Ok(())
    }

    pub fn from_csv(text: &str, layer_subset: Vec<usize>) -> Result<SimilarityMatrix> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DmoeError::validation("empty similarity csv"))?;
        let languages: Vec<String> =
            header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let n = languages.len();
        let mut values = vec![0.0; n * n];
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let code = fields.next().unwrap_or_default().trim();
            if i >= n || code != languages[i] {
                return Err(DmoeError::validation(format!("unexpected csv row {code}")));
            }
            for (j, field) in fields.enumerate() {
                if j >= n {
                    return Err(DmoeError::validation("similarity csv row too long"));
                }
                values[i * n + j] = field.trim().parse::<f64>().map_err(|e| {
                    DmoeError::validation(format!("bad similarity value {field:?}: {e}"))
                })?;
            }
        }
        let m = SimilarityMatrix { languages, values, layer_subset };
        m.validate()?;
        Ok(m)
    }

    pub fn load_csv(path: &Path) -> Result<SimilarityMatrix> {
        if !path.exists() {
            return Err(DmoeError::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        SimilarityMatrix::from_csv(&text, Vec::new())
    }
}

/// Pairwise cosine between deviation concatenations over `layer_subset`.
pub fn similarity_matrix(
    records: &[DeviationRecord],
    layer_subset: &[usize],
) -> Result<SimilarityMatrix> {
    if records.is_empty() {
        return Err(DmoeError::validation("no deviation records"));
    }
    if layer_subset.is_empty() {
        return Err(DmoeError::validation("empty layer subset"));
    }
    let n_layers = records[0].num_layers();
    let base = &records[0].base_checkpoint_id;
    for r in records {
        if &r.base_checkpoint_id != base {
            return Err(DmoeError::validation(format!(
                "{} probed from a different base checkpoint",
                r.language
            )));
        }
        if r.num_layers() != n_layers {
            return Err(DmoeError::validation("records disagree on layer count"));
        }
    }
    if let Some(&bad) = layer_subset.iter().find(|&&l| l >= n_layers) {
        return Err(DmoeError::validation(format!("layer {bad} out of range")));
    }
    let vectors: Vec<Vec<f64>> = records.iter().map(|r| concat_subset(r, layer_subset)).collect();
    let n = records.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let c = cosine(&vectors[i], &vectors[j])?;
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    let m = SimilarityMatrix {
        languages: records.iter().map(|r| r.language.clone()).collect(),
        values,
        layer_subset: layer_subset.to_vec(),
    };
    m.validate()?;
    Ok(m)
}

// ── Disk format: <code>.json + <code>.bin (f32 deltas) ───────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviationLayerMeta {
    layer: usize,
    offset: u64,
    len: u64,
    norm: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviationFileMeta {
    language: String,
    probe_steps: usize,
    base_checkpoint: String,
    layers: Vec<DeviationLayerMeta>,
    inputs: BTreeMap<String, String>,
}

/// Writes `<dir>/<code>.json` and `<dir>/<code>.bin`. Deltas are truncated to
/// f32 on disk; norms are recorded at f64 before truncation.
pub fn save_deviation(
    record: &DeviationRecord,
    dir: &Path,
    inputs: BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut layers = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    for (l, delta) in record.per_layer_delta.iter().enumerate() {
        layers.push(DeviationLayerMeta {
            layer: l,
            offset: bytes.len() as u64,
            len: delta.len() as u64,
            norm: record.per_layer_norm[l],
        });
        for &v in delta {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let meta = DeviationFileMeta {
        language: record.language.clone(),
        probe_steps: record.probe_steps,
        base_checkpoint: record.base_checkpoint_id.clone(),
        layers,
        inputs,
    };
    write_json(&dir.join(format!("{}.json", record.language)), &meta)?;
    let bin = dir.join(format!("{}.bin", record.language));
    fs::write(&bin, bytes).map_err(io_err(bin))?;
    Ok(())
}

/// Loads a deviation record; norms are recomputed at f64 from the stored f32
/// deltas so the norm/delta invariant holds exactly on the loaded record.
pub fn load_deviation(dir: &Path, code: &str) -> Result<DeviationRecord> {
    let meta: DeviationFileMeta = read_json(&dir.join(format!("{code}.json")))?;
    let bin_path = dir.join(format!("{code}.bin"));
    if !bin_path.exists() {
        return Err(DmoeError::MissingInput(bin_path));
    }
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let mut per_layer_delta = Vec::with_capacity(meta.layers.len());
    let mut per_layer_norm = Vec::with_capacity(meta.layers.len());
    for layer in &meta.layers {
        let start = layer.offset as usize;
        let end = start + layer.len as usize * 4;
        if end > bytes.len() {
            return Err(DmoeError::validation(format!(
                "{code}: deviation layer {} overruns binary file",
                layer.layer
            )));
        }
        let delta: Vec<f64> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        per_layer_norm.push(l2(&delta));
        per_layer_delta.push(delta);
    }
    Ok(DeviationRecord {
        language: meta.language,
        per_layer_delta,
        per_layer_norm,
        probe_steps: meta.probe_steps,
        base_checkpoint_id: meta.base_checkpoint,
    })
}
