//! Run configuration: one strict JSON document with per-key overrides.
//!
//! Every field has a default; unknown keys are rejected. Overrides use
//! dotted paths (`--set extension.alpha=1.28`) applied to the JSON tree
//! before the strict re-parse, so a typo in a key fails loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationConfig;
use crate::artifact::sha256_bytes;
use crate::corpus::CorpusConfig;
use crate::error::{io_err, DmoeError, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::train::{ExtensionConfig, TrainerConfig};

pub const RUN_DIR_ENV: &str = "DMOE_RUN_DIR";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub probe: ProbeConfig,
    /// Layers contributing to the similarity matrix: the last `similarity_last_layers`
    /// blocks, or every block when 0.
    pub similarity_last_layers: usize,
    pub extension: ExtensionConfig,
    pub trainer: TrainerConfig,
    /// Steps of multilingual pretraining that produce the shared base model.
    pub base_steps: usize,
    /// Steps for the dense continual-pretraining arm; defaults to the DMoE
    /// stage budget so token counts match.
    pub baseline_steps: Option<usize>,
    pub adaptation: AdaptationConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            run_dir: PathBuf::from("run/default"),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            probe: ProbeConfig::default(),
            similarity_last_layers: 3,
            extension: ExtensionConfig::default(),
            trainer: TrainerConfig::default(),
            base_steps: 150,
            baseline_steps: None,
            adaptation: AdaptationConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn baseline_steps(&self) -> usize {
        self.baseline_steps
            .unwrap_or(self.extension.stage1_steps + self.extension.stage2_steps)
    }

    pub fn similarity_layers(&self) -> Vec<usize> {
        let n = self.model.num_layers;
        if self.similarity_last_layers == 0 || self.similarity_last_layers >= n {
            (0..n).collect()
        } else {
            (n - self.similarity_last_layers..n).collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.extension.num_experts == 0 {
            return Err(DmoeError::validation("extension.num_experts must be >= 1"));
        }
        if !(self.extension.epsilon > 0.0 && self.extension.epsilon <= 1.0) {
            return Err(DmoeError::validation("extension.epsilon must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Canonical serialized form; hashed into every artifact's provenance.
    /// The run directory is a storage location, not semantic content, so it
    /// is normalized out: the same experiment hashes identically wherever it
    /// is stored.
    pub fn canonical_json(&self) -> String {
        let mut canonical = self.clone();
        canonical.run_dir = PathBuf::from(".");
        serde_json::to_string_pretty(&canonical).expect("config serializes")
    }

    pub fn content_hash(&self) -> String {
        sha256_bytes(self.canonical_json().as_bytes())
    }
}

/// `path` dotted key, `raw` parsed as JSON when possible, else as a string.
fn apply_override(tree: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let mut cursor = tree;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            DmoeError::validation(format!("override path {path}: {seg} is not an object"))
        })?;
        if i + 1 == segments.len() {
            let value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        cursor = obj.get_mut(*seg).ok_or_else(|| {
            DmoeError::validation(format!("override path {path}: unknown section {seg}"))
        })?;
    }
    Ok(())
}

/// Loads the config file (defaults when absent), applies `--set` overrides
/// and the optional seed override, then re-parses strictly.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
    seed: Option<u64>,
    run_dir: Option<PathBuf>,
) -> Result<RunConfig> {
    let mut tree: serde_json::Value = match path {
        Some(p) => {
            if !p.exists() {
                return Err(DmoeError::MissingInput(p.to_path_buf()));
            }
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|source| DmoeError::Json {
                path: p.to_path_buf(),
                source,
            })?
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config"),
    };
    for (key, value) in overrides {
        apply_override(&mut tree, key, value)?;
    }
    if let Some(s) = seed {
        apply_override(&mut tree, "seed", &s.to_string())?;
    }
    if let Some(dir) = run_dir {
        apply_override(&mut tree, "run_dir", &format!("{:?}", dir.display().to_string()))?;
    }
    let config: RunConfig = serde_json::from_value(tree).map_err(|source| DmoeError::Json {
        path: path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<overrides>")),
        source,
    })?;
    config.validate()?;
    Ok(config)
}
