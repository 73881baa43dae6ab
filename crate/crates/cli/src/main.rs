use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use synthedit_core::alignment::{gradcheck_suite, run_toy, GRADCHECK_TOL};
use synthedit_core::analysis::{aggregate_stats, classify_edits, EditEvent, HallucinationLabels};
use synthedit_core::annotation::{self, AnnotationRecord, AppState, RecordStore};
use synthedit_core::corpus::{self, Corpus, SplitSizes};
use synthedit_core::demo::{annotated_examples, demo_corpus, SCRIPTED_ENDPOINT};
use synthedit_core::gateway::Mode;
use synthedit_core::metrics::{evaluate_run, GEvalConfig};
use synthedit_core::preference::{self, FlagPolicy};
use synthedit_core::synthesis::SynthesisResult;

mod config;
mod io;
mod pipeline;

use config::RunConfig;
use pipeline::{ModelArtifact, SystemOutput};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) | CliError::Stage { .. } => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "synthedit", version, about = "Synthetic hallucination-edit preference data toolkit")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct LlmFlags {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    cassette: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    parallelism: Option<usize>,
}

impl LlmFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.llm.mode = m;
        }
        if let Some(c) = &self.cassette {
            cfg.llm.cassette = Some(c.clone());
        }
        if let Some(e) = &self.endpoint {
            cfg.llm.endpoint = Some(e.clone());
        }
        if let Some(m) = &self.model {
            cfg.llm.model = m.clone();
        }
        if let Some(t) = self.temperature {
            cfg.llm.temperature = t;
        }
        if let Some(p) = self.parallelism {
            cfg.llm.parallelism = p;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL corpus and store it in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded train/valid/test partition of a corpus directory.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        valid: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate hallucinated summaries through the LLM gateway.
    Synthesize {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        llm: LlmFlags,
    },
    /// Classify realized edits into the edit taxonomy.
    Classify {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Edit-type distributions, optionally joined with annotator labels.
    Stats {
        #[arg(long)]
        edits: PathBuf,
        #[arg(long, requires_all = ["synth", "corpus"])]
        annotations: Option<PathBuf>,
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Preference dataset operations.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// SFT then DPO on a preference file with the toy policy.
    TrainToy {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Finite-difference check of the SFT and DPO gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
    },
    /// Score system outputs against reference summaries.
    Eval {
        metric: Metric,
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[command(flatten)]
        llm: LlmFlags,
    },
    /// Inter-annotator agreement from a judgment log.
    Kappa {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        by_document: bool,
    },
    /// Run the annotation HTTP service.
    Serve {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        store: PathBuf,
    },
    /// Run every stage, skipping those whose inputs are unchanged.
    Pipeline {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[command(flatten)]
        llm: LlmFlags,
    },
    /// Write an offline demo: corpus, recorded cassette, config and annotations.
    Demo {
        #[arg(long)]
        out: PathBuf,
        /// Synthetic documents added to the two annotated examples.
        #[arg(long, default_value_t = 48)]
        synthetic: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    Emit {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drop_flagged: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Rouge,
    ConceptF1,
    Geval,
}

fn corpus_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.paths.corpus.clone())
        .ok_or_else(|| CliError::Usage("no corpus directory (use --corpus or paths.corpus)".into()))
}

fn load_corpus(dir: &Path) -> Result<Corpus, CliError> {
    Corpus::load_dir(dir).map_err(|e| CliError::Input(e.to_string()))
}

fn print_json<T: serde::Serialize>(v: &T) {
    print!("{}", io::pretty(v));
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { input, out } => {
            let corpus = corpus::ingest(&input).map_err(|e| CliError::Input(e.to_string()))?;
            corpus.save_dir(&out).map_err(|e| CliError::Input(e.to_string()))?;
            print_json(&serde_json::json!({
                "documents": corpus.len(),
                "skipped_lines": corpus.errors,
            }));
        }
        Command::Split { corpus, train, valid, test, seed, out } => {
            let c = load_corpus(&corpus)?;
            let s = corpus::split(&c, SplitSizes { train, valid, test }, seed).map_err(|e| CliError::Input(e.to_string()))?;
            for name in ["train", "valid", "test"] {
                let docs = s.partition(name).expect("known partition").to_vec();
                Corpus::from_documents(docs)
                    .and_then(|p| p.save_dir(&out.join(name)))
                    .map_err(|e| CliError::Input(e.to_string()))?;
            }
            print_json(&serde_json::json!({
                "train": s.train.len(), "valid": s.valid.len(), "test": s.test.len(),
                "unused": c.len() - s.train.len() - s.valid.len() - s.test.len(), "seed": seed,
            }));
        }
        Command::Synthesize { corpus, out, strict, llm } => {
            llm.apply(&mut cfg);
            cfg.analysis.strict |= strict;
            let c = load_corpus(&corpus_dir(corpus, &cfg)?)?;
            let gw = pipeline::gateway(&cfg)?;
            let results = pipeline::synthesize_corpus(&c, &gw, &cfg).await?;
            io::write(&out, &io::to_jsonl(&results))?;
            let flagged = results.iter().filter(|r| !r.validation.is_clean()).count();
            print_json(&serde_json::json!({
                "documents": c.len(), "synthesized": results.len(), "constraint_flagged": flagged,
                "config_digest": cfg.digest(),
            }));
        }
        Command::Classify { corpus, synth, out, threshold } => {
            let threshold = threshold.unwrap_or(cfg.analysis.threshold);
            let c = load_corpus(&corpus_dir(corpus, &cfg)?)?;
            let results: Vec<SynthesisResult> = io::read_jsonl(&synth)?;
            let mut events = Vec::new();
            let mut unrealized = Vec::new();
            for r in &results {
                let doc = c.require(&r.document_id).map_err(|e| CliError::Input(e.to_string()))?;
                let cl = classify_edits(doc, r, threshold).map_err(|e| CliError::Input(format!("{}: {e}", doc.id)))?;
                events.extend(cl.events);
                unrealized.extend(cl.unrealized);
            }
            io::write(&out, &io::to_jsonl(&events))?;
            print_json(&serde_json::json!({ "events": events.len(), "unrealized": unrealized }));
        }
        Command::Stats { edits, annotations, synth, corpus } => {
            let events: Vec<EditEvent> = io::read_jsonl(&edits)?;
            let labels: Option<HallucinationLabels> = match annotations {
                Some(path) => {
                    let c = load_corpus(&corpus_dir(corpus, &cfg)?)?;
                    let results: Vec<SynthesisResult> = io::read_jsonl(synth.as_deref().expect("clap requires synth"))?;
                    let tasks = annotation::load_tasks(&results, &c).map_err(|e| CliError::Input(e.to_string()))?;
                    let mut store = RecordStore::in_memory();
                    for r in io::read_jsonl::<AnnotationRecord>(&path)? {
                        store.submit(&tasks, r).map_err(|e| CliError::Input(e.to_string()))?;
                    }
                    Some(store.labels(&tasks))
                }
                None => None,
            };
            let stats = aggregate_stats(&events, labels.as_ref()).map_err(|e| CliError::Input(e.to_string()))?;
            print_json(&stats);
        }
        Command::Dataset {
            action: DatasetAction::Emit { corpus, synth, out, drop_flagged },
        } => {
            let c = load_corpus(&corpus_dir(corpus, &cfg)?)?;
            let results: Vec<SynthesisResult> = io::read_jsonl(&synth)?;
            let policy = if drop_flagged || cfg.analysis.drop_flagged {
                FlagPolicy::DropFlagged
            } else {
                FlagPolicy::KeepFlagged
            };
            let (pairs, report) = preference::assemble(&c, &results, policy).map_err(|e| CliError::Input(e.to_string()))?;
            let manifest = preference::emit(&pairs, &out, &cfg.digest()).map_err(|e| CliError::Input(e.to_string()))?;
            print_json(&serde_json::json!({ "manifest": manifest, "assembly": report }));
        }
        Command::TrainToy { pairs, out, beta, lr, epochs } => {
            if let Some(b) = beta {
                cfg.train.beta = b;
            }
            if let Some(l) = lr {
                cfg.train.dpo_lr = l;
            }
            if let Some(e) = epochs {
                cfg.train.dpo_epochs = e;
            }
            let pairs = preference::read(&pairs).map_err(|e| CliError::Input(e.to_string()))?;
            let (policy, training) = run_toy(&pairs, &cfg.train.toy()).map_err(|e| CliError::Input(e.to_string()))?;
            let artifact = ModelArtifact {
                checkpoint: policy.to_checkpoint(&cfg.digest()),
                training,
            };
            io::write(&out, &io::pretty(&artifact))?;
            let t = &artifact.training;
            print_json(&serde_json::json!({
                "pairs": t.pairs, "vocab_size": t.vocab_size,
                "sft_final_loss": t.sft.final_loss, "dpo_final_loss": t.dpo.final_loss,
                "gap_at_init": t.gap_at_init, "gap_after_dpo": t.gap_after_dpo,
                "margin_positive_fraction": t.dpo.margins.as_ref().map(|m| m.positive_fraction),
            }));
        }
        Command::Gradcheck { seeds, beta } => {
            let report = gradcheck_suite(0..seeds, beta);
            print_json(&serde_json::json!({
                "seeds": report.seeds.len(), "entries_checked": report.entries_checked,
                "max_relative_error": report.max_relative_error, "tolerance": GRADCHECK_TOL,
                "passed": report.passed(),
            }));
            if !report.passed() {
                return Err(CliError::CheckFailed(format!(
                    "{} gradient entries exceed tolerance; first: {}",
                    report.failures.len(),
                    report.failures[0]
                )));
            }
        }
        Command::Eval { metric, outputs, corpus, lexicon, llm } => {
            llm.apply(&mut cfg);
            if lexicon.is_some() {
                cfg.paths.lexicon = lexicon;
            }
            let c = load_corpus(&corpus_dir(corpus, &cfg)?)?;
            let outs: Vec<SystemOutput> = io::read_jsonl(&outputs)?;
            let pairs: Vec<(String, String)> = outs.into_iter().map(|o| (o.document_id, o.summary)).collect();
            let lex = pipeline::lexicon(&cfg)?;
            let report = match metric {
                Metric::Geval => {
                    let gw = pipeline::gateway(&cfg)?;
                    let judge = GEvalConfig {
                        model: cfg.llm.judge_model.clone(),
                        ..GEvalConfig::default()
                    };
                    evaluate_run(&pairs, &c, &lex, Some((&gw, &judge))).await
                }
                _ => evaluate_run(&pairs, &c, &lex, None).await,
            }
            .map_err(|e| CliError::Input(e.to_string()))?;
            let s = &report.summary;
            let docs: Vec<serde_json::Value> = report
                .documents
                .iter()
                .map(|d| match metric {
                    Metric::Rouge => serde_json::json!({"document_id": d.document_id, "rouge": d.rouge}),
                    Metric::ConceptF1 => serde_json::json!({"document_id": d.document_id, "concept": d.concept}),
                    Metric::Geval => serde_json::json!({"document_id": d.document_id, "g_eval": d.geval}),
                })
                .collect();
            let summary = match metric {
                Metric::Rouge => serde_json::json!({"R1": s.r1, "R2": s.r2, "RL": s.rl}),
                Metric::ConceptF1 => serde_json::json!({"UMLS-F1": s.umls_f1}),
                Metric::Geval => serde_json::json!({"G-Eval": s.g_eval}),
            };
            print_json(&serde_json::json!({ "summary": summary, "documents": docs, "failures": report.failures }));
        }
        Command::Kappa { annotations, by_document } => {
            let records: Vec<AnnotationRecord> = io::read_jsonl(&annotations)?;
            let result = annotation::agreement_from_records(&records);
            if by_document {
                print_json(&result);
            } else {
                print_json(&serde_json::json!({ "mean_kappa": result.mean_kappa, "documents": result.per_document_kappa.len() }));
            }
        }
        Command::Serve { tasks, corpus, port, store } => {
            let c = load_corpus(&corpus_dir(corpus, &cfg)?)?;
            let results: Vec<SynthesisResult> = io::read_jsonl(&tasks)?;
            let task_store = annotation::load_tasks(&results, &c).map_err(|e| CliError::Input(e.to_string()))?;
            let records = RecordStore::open(&store).map_err(|e| CliError::Input(e.to_string()))?;
            eprintln!("serving {} tasks on port {port}", task_store.len());
            annotation::serve(AppState::new(task_store, records), SocketAddr::from(([127, 0, 0, 1], port)))
                .await
                .map_err(|e| CliError::Input(e.to_string()))?;
        }
        Command::Pipeline { corpus, workdir, llm } => {
            llm.apply(&mut cfg);
            let corpus = corpus_dir(corpus, &cfg)?;
            let workdir = workdir
                .or_else(|| cfg.paths.workdir.clone())
                .ok_or_else(|| CliError::Usage("no work directory (use --workdir or paths.workdir)".into()))?;
            let outcome = pipeline::run(&cfg, &corpus, &workdir).await?;
            for line in &outcome.log {
                eprintln!("{line}");
            }
            print_json(&outcome.manifest);
        }
        Command::Demo { out, synthetic, seed } => demo(&out, synthetic, seed).await?,
    }
    Ok(())
}

/// Demo run settings: short training so the whole pipeline stays quick.
fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.llm.endpoint = Some(SCRIPTED_ENDPOINT.into());
    cfg.llm.mode = Mode::Replay;
    cfg.llm.cassette = Some("cassette.jsonl".into());
    cfg.paths.corpus = Some("corpus".into());
    cfg.paths.workdir = Some("run".into());
    cfg.train.sft_epochs = 40;
    cfg.train.dpo_epochs = 40;
    cfg
}

async fn demo(out: &Path, synthetic: usize, seed: u64) -> Result<(), CliError> {
    let mut docs: Vec<_> = annotated_examples().iter().map(|e| e.document()).collect();
    docs.extend(demo_corpus(synthetic, seed).documents);
    let corpus = Corpus::from_documents(docs).map_err(|e| CliError::Input(e.to_string()))?;
    corpus.save_dir(&out.join("corpus")).map_err(|e| CliError::Input(e.to_string()))?;

    let cfg_path = out.join("run.toml");
    io::write(&cfg_path, &demo_config().to_toml())?;
    let cassette = out.join("cassette.jsonl");
    if cassette.exists() {
        std::fs::remove_file(&cassette).map_err(|e| CliError::Input(e.to_string()))?;
    }

    // Record every LLM call once through the scripted responder.
    let mut cfg = RunConfig::load(&cfg_path)?;
    cfg.llm.mode = Mode::Record;
    let record_dir = out.join("record-run");
    let outcome = pipeline::run(&cfg, &out.join("corpus"), &record_dir).await?;

    let results: Vec<SynthesisResult> = io::read_jsonl(&record_dir.join(pipeline::SYNTH_FILE))?;
    let tasks = annotation::load_tasks(&results, &corpus).map_err(|e| CliError::Input(e.to_string()))?;
    let mut records = Vec::new();
    for ex in annotated_examples() {
        let Some(task) = tasks.task_for_document(&ex.id) else { continue };
        for (who, judgments) in &ex.annotators {
            for j in judgments {
                records.push(AnnotationRecord {
                    task_id: task.task_id.clone(),
                    annotator_id: who.clone(),
                    instruction_index: j.instruction_index,
                    hallucination_label: j.hallucination_label,
                    edit_type: None,
                    comment: j.comment.clone(),
                    timestamp: 0,
                });
            }
        }
    }
    io::write(&out.join("annotations.jsonl"), &io::to_jsonl(&records))?;
    print_json(&serde_json::json!({
        "documents": corpus.len(),
        "config": cfg_path,
        "cassette": cassette,
        "recorded_stages": outcome.manifest.stages.len(),
        "annotations": records.len(),
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
