//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use synthedit_core::gateway::{canonical_json, Mode};
use synthedit_core::preference::content_digest;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Chat-completions base URL, or `scripted://demo` for the offline responder.
    pub endpoint: Option<String>,
    pub model: String,
    pub judge_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_reprompts: u32,
    pub mode: Mode,
    pub cassette: Option<PathBuf>,
    pub parallelism: usize,
    pub timeout_secs: u64,
    pub max_attempts: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "gpt-3.5-turbo".into(),
            judge_model: "gpt-4".into(),
            temperature: 1.0,
            max_tokens: 1024,
            max_reprompts: 2,
            mode: Mode::Replay,
            cassette: None,
            parallelism: 4,
            timeout_secs: 60,
            max_attempts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub threshold: f64,
    pub strict: bool,
    pub drop_flagged: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            threshold: synthedit_core::analysis::DEFAULT_THRESHOLD,
            strict: false,
            drop_flagged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub context_order: usize,
    pub beta: f64,
    pub sft_lr: f64,
    pub sft_epochs: usize,
    pub dpo_lr: f64,
    pub dpo_epochs: usize,
    pub seed: u64,
    pub max_generate_tokens: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let toy = synthedit_core::alignment::ToyConfig::default();
        Self {
            context_order: toy.context_order,
            beta: toy.dpo.beta,
            sft_lr: toy.sft.learning_rate,
            sft_epochs: toy.sft.epochs,
            dpo_lr: toy.dpo.learning_rate,
            dpo_epochs: toy.dpo.epochs,
            seed: 0,
            max_generate_tokens: 80,
        }
    }
}

impl TrainSection {
    pub fn toy(&self) -> synthedit_core::alignment::ToyConfig {
        use synthedit_core::alignment::{ToyConfig, TrainConfig};
        ToyConfig {
            context_order: self.context_order,
            sft: TrainConfig {
                learning_rate: self.sft_lr,
                epochs: self.sft_epochs,
                beta: 0.0,
                seed: self.seed,
            },
            dpo: TrainConfig {
                learning_rate: self.dpo_lr,
                epochs: self.dpo_epochs,
                beta: self.beta,
                seed: self.seed,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    /// Concept lexicon TSV; the bundled demo lexicon when absent.
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub llm: LlmConfig,
    pub analysis: AnalysisConfig,
    pub train: TrainSection,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&raw).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.corpus,
            &mut cfg.paths.workdir,
            &mut cfg.paths.lexicon,
            &mut cfg.llm.cassette,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Stable hash of the settings that influence artifacts. Paths are left
    /// out so moving a run directory does not invalidate it.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("paths");
        if let Some(llm) = v.get_mut("llm").and_then(|l| l.as_object_mut()) {
            for k in ["cassette", "mode", "parallelism", "timeout_secs", "max_attempts", "endpoint"] {
                llm.remove(k);
            }
        }
        content_digest(canonical_json(&v).as_bytes())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
