//! Staged, resumable pipeline: corpus, synthesize, classify, dataset,
//! train and eval. Each stage's input digest covers the effective config
//! and the bytes of every file it reads, so a stage reruns exactly when
//! something upstream changed.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use synthedit_core::alignment::{run_toy, Checkpoint, PolicyModel, ToyReport};
use synthedit_core::analysis::{classify_edits, EditEvent};
use synthedit_core::corpus::{self, Corpus, CORPUS_FILE};
use synthedit_core::demo::{ScriptedTransport, SCRIPTED_ENDPOINT};
use synthedit_core::gateway::{
    Cassette, Gateway, GatewayError, HttpTransport, Mode, RetryPolicy, Transport, API_KEY_ENV,
};
use synthedit_core::metrics::{evaluate_run, ConceptLexicon, EvalReport, GEvalConfig};
use synthedit_core::preference::{self, content_digest, FlagPolicy};
use synthedit_core::synthesis::{synthesize_all, SynthesisConfig, SynthesisError, SynthesisResult};

use crate::config::RunConfig;
use crate::io;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SYNTH_FILE: &str = "synth.jsonl";
pub const EDITS_FILE: &str = "edits.jsonl";
pub const DPO_FILE: &str = "dpo.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const EVAL_FILE: &str = "eval_report.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub output: String,
    pub input_digest: String,
    pub output_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Trained policy plus the run summary that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub checkpoint: Checkpoint,
    pub training: ToyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemOutput {
    pub document_id: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config_digest: String,
    pub report: EvalReport,
    pub outputs: Vec<SystemOutput>,
}

pub fn gateway(cfg: &RunConfig) -> Result<Gateway, CliError> {
    let llm = &cfg.llm;
    let retry = RetryPolicy {
        max_attempts: llm.max_attempts,
        ..RetryPolicy::default()
    };
    let cassette = || -> Result<Cassette, CliError> {
        let path = llm
            .cassette
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("mode {:?} needs a cassette path", llm.mode)))?;
        Cassette::open(path).map_err(|e| CliError::Input(e.to_string()))
    };
    let transport = || -> Result<Arc<dyn Transport>, CliError> {
        match llm.endpoint.as_deref() {
            Some(SCRIPTED_ENDPOINT) => Ok(ScriptedTransport::shared()),
            Some(url) => {
                let key = std::env::var(API_KEY_ENV).map_err(|_| {
                    CliError::Usage(format!("live calls need {API_KEY_ENV} in the environment"))
                })?;
                Ok(Arc::new(HttpTransport::new(url, key, Duration::from_secs(llm.timeout_secs))))
            }
            None => Err(CliError::Usage(GatewayError::NotConfigured.to_string())),
        }
    };
    Ok(match llm.mode {
        Mode::Replay => {
            let path = llm
                .cassette
                .as_ref()
                .ok_or_else(|| CliError::Usage("replay mode needs a cassette path".into()))?;
            if !path.exists() {
                return Err(CliError::Input(format!("cassette {} does not exist", path.display())));
            }
            Gateway::replay(cassette()?)
        }
        Mode::Live => Gateway::live(transport()?, retry),
        Mode::Record => Gateway::record(transport()?, cassette()?, retry),
    })
}

pub fn synthesis_config(cfg: &RunConfig) -> SynthesisConfig {
    SynthesisConfig {
        model: cfg.llm.model.clone(),
        temperature: cfg.llm.temperature,
        max_tokens: cfg.llm.max_tokens,
        max_reprompts: cfg.llm.max_reprompts,
        strict: cfg.analysis.strict,
    }
}

pub fn lexicon(cfg: &RunConfig) -> Result<ConceptLexicon, CliError> {
    match &cfg.paths.lexicon {
        Some(p) => ConceptLexicon::load(p).map_err(|e| CliError::Input(e.to_string())),
        None => Ok(ConceptLexicon::demo()),
    }
}

/// Synthesizes every document. Gateway errors abort; documents whose
/// responses stay unparsable (or violate constraints in strict mode) are
/// skipped with a warning.
pub async fn synthesize_corpus(corpus: &Corpus, gw: &Gateway, cfg: &RunConfig) -> Result<Vec<SynthesisResult>, CliError> {
    let results = synthesize_all(&corpus.documents, gw, &synthesis_config(cfg), cfg.llm.parallelism.max(1)).await;
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(s) => out.push(s),
            Err(e @ SynthesisError::Gateway { .. }) => return Err(CliError::Input(e.to_string())),
            Err(e) => tracing::warn!(error = %e, "document skipped"),
        }
    }
    Ok(out)
}

pub fn classify_all(corpus: &Corpus, synth: &[SynthesisResult], threshold: f64) -> Result<Vec<EditEvent>, CliError> {
    let mut events = Vec::new();
    for s in synth {
        let doc = corpus.require(&s.document_id).map_err(|e| CliError::Input(e.to_string()))?;
        let c = classify_edits(doc, s, threshold).map_err(|e| CliError::Input(format!("{}: {e}", doc.id)))?;
        events.extend(c.events);
    }
    Ok(events)
}

pub fn generate_outputs(policy: &PolicyModel, corpus: &Corpus, max_tokens: usize) -> Vec<SystemOutput> {
    corpus
        .documents
        .iter()
        .map(|d| {
            let ids = policy.generate(&policy.vocab().encode(&d.article), max_tokens);
            SystemOutput {
                document_id: d.id.clone(),
                summary: policy.vocab().decode(&ids),
            }
        })
        .collect()
}

struct Runner<'a> {
    workdir: &'a Path,
    previous: Option<Manifest>,
    manifest: Manifest,
    log: Vec<String>,
}

fn digest_files(paths: &[PathBuf]) -> Result<Vec<String>, CliError> {
    paths
        .iter()
        .map(|p| {
            std::fs::read(p)
                .map(|b| content_digest(&b))
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        })
        .collect()
}

impl Runner<'_> {
    fn save(&self) -> Result<(), CliError> {
        io::write(&self.workdir.join(MANIFEST_FILE), &io::pretty(&self.manifest))
    }

    /// Runs `body` unless the previous manifest already holds this stage
    /// with the same input digest and the output on disk still matches.
    async fn stage<F, Fut>(&mut self, name: &str, output: &str, inputs: &[PathBuf], body: F) -> Result<(), CliError>
    where
        F: FnOnce() -> Fut,
        Fut: std::future::Future<Output = Result<String, CliError>>,
    {
        let mut key = vec![name.to_string(), self.manifest.config_digest.clone()];
        key.extend(digest_files(inputs)?);
        let input_digest = content_digest(key.join("\n").as_bytes());
        let out_path = self.workdir.join(output);

        if let Some(prev) = self.previous.as_ref().and_then(|m| m.stage(name)) {
            if prev.input_digest == input_digest
                && std::fs::read(&out_path).is_ok_and(|b| content_digest(&b) == prev.output_digest)
            {
                self.manifest.stages.push(prev.clone());
                self.log.push(format!("{name}: skipped (up to date)"));
                return Ok(());
            }
        }
        let body = body().await.map_err(|e| {
            let _ = self.save();
            CliError::Stage {
                stage: name.to_string(),
                message: e.to_string(),
            }
        })?;
        io::write(&out_path, &body)?;
        self.manifest.stages.push(StageRecord {
            stage: name.to_string(),
            output: output.to_string(),
            input_digest,
            output_digest: content_digest(body.as_bytes()),
        });
        self.save()?;
        self.log.push(format!("{name}: wrote {output}"));
        Ok(())
    }
}

pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub log: Vec<String>,
}

pub async fn run(cfg: &RunConfig, corpus_dir: &Path, workdir: &Path) -> Result<PipelineOutcome, CliError> {
    std::fs::create_dir_all(workdir).map_err(|e| CliError::Input(format!("{}: {e}", workdir.display())))?;
    let previous = std::fs::read_to_string(workdir.join(MANIFEST_FILE))
        .ok()
        .and_then(|raw| serde_json::from_str::<Manifest>(&raw).ok());
    let config_digest = cfg.digest();
    let mut r = Runner {
        workdir,
        previous,
        manifest: Manifest {
            config_digest: config_digest.clone(),
            stages: Vec::new(),
        },
        log: Vec::new(),
    };
    let src = corpus_dir.join(CORPUS_FILE);
    let corpus_path = workdir.join(CORPUS_FILE);
    let synth_path = workdir.join(SYNTH_FILE);
    let dpo_path = workdir.join(DPO_FILE);
    let model_path = workdir.join(MODEL_FILE);

    r.stage("corpus", CORPUS_FILE, std::slice::from_ref(&src), || async {
        let corpus = corpus::ingest(&src).map_err(|e| CliError::Input(e.to_string()))?;
        for e in &corpus.errors {
            tracing::warn!(line = e.line, message = %e.message, "corpus line skipped");
        }
        Ok(corpus.to_jsonl())
    })
    .await?;

    let load_corpus = || corpus::ingest(&corpus_path).map_err(|e| CliError::Input(e.to_string()));

    r.stage("synthesize", SYNTH_FILE, std::slice::from_ref(&corpus_path), || async {
        let corpus = load_corpus()?;
        let gw = gateway(cfg)?;
        Ok(io::to_jsonl(&synthesize_corpus(&corpus, &gw, cfg).await?))
    })
    .await?;

    r.stage("classify", EDITS_FILE, &[corpus_path.clone(), synth_path.clone()], || async {
        let corpus = load_corpus()?;
        let synth: Vec<SynthesisResult> = io::read_jsonl(&synth_path)?;
        Ok(io::to_jsonl(&classify_all(&corpus, &synth, cfg.analysis.threshold)?))
    })
    .await?;

    r.stage("dataset", DPO_FILE, &[corpus_path.clone(), synth_path.clone()], || async {
        let corpus = load_corpus()?;
        let synth: Vec<SynthesisResult> = io::read_jsonl(&synth_path)?;
        let policy = if cfg.analysis.drop_flagged {
            FlagPolicy::DropFlagged
        } else {
            FlagPolicy::KeepFlagged
        };
        let (pairs, report) = preference::assemble(&corpus, &synth, policy).map_err(|e| CliError::Input(e.to_string()))?;
        for w in &report.warnings {
            tracing::warn!("{w}");
        }
        if pairs.is_empty() {
            return Err(CliError::Input(preference::PreferenceError::Empty.to_string()));
        }
        Ok(preference::to_jsonl(&pairs))
    })
    .await?;

    r.stage("train", MODEL_FILE, std::slice::from_ref(&dpo_path), || async {
        let pairs = preference::read(&dpo_path).map_err(|e| CliError::Input(e.to_string()))?;
        let (policy, training) = run_toy(&pairs, &cfg.train.toy()).map_err(|e| CliError::Input(e.to_string()))?;
        Ok(io::pretty(&ModelArtifact {
            checkpoint: policy.to_checkpoint(&config_digest),
            training,
        }))
    })
    .await?;

    r.stage("eval", EVAL_FILE, &[corpus_path.clone(), model_path.clone()], || async {
        let corpus = load_corpus()?;
        let model: ModelArtifact = serde_json::from_str(&io::read(&model_path)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", model_path.display())))?;
        let policy = PolicyModel::from_checkpoint(&model.checkpoint).map_err(|e| CliError::Input(e.to_string()))?;
        let outputs = generate_outputs(&policy, &corpus, cfg.train.max_generate_tokens);
        let pairs: Vec<(String, String)> = outputs.iter().map(|o| (o.document_id.clone(), o.summary.clone())).collect();
        let gw = gateway(cfg)?;
        let judge = GEvalConfig {
            model: cfg.llm.judge_model.clone(),
            ..GEvalConfig::default()
        };
        let report = evaluate_run(&pairs, &corpus, &lexicon(cfg)?, Some((&gw, &judge)))
            .await
            .map_err(|e| CliError::Input(e.to_string()))?;
        Ok(io::pretty(&EvalArtifact {
            config_digest: config_digest.clone(),
            report,
            outputs,
        }))
    })
    .await?;

    r.save()?;
    Ok(PipelineOutcome {
        manifest: r.manifest,
        log: r.log,
    })
}
