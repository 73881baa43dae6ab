//! Human-annotation backend: task store built from synthesis results, an
//! append-only JSONL judgment log with last-write-wins replay, agreement
//! statistics and the HTTP API.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::RwLock;

use crate::analysis::{aggregate_stats, classify_edits, EditStats, EditType, HallucinationLabels, DEFAULT_THRESHOLD};
use crate::corpus::{Corpus, Document};
use crate::metrics::{cohen_kappa, AgreementResult};
use crate::synthesis::{EditInstruction, SynthesisResult};

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("synthesis result refers to unknown document {0}")]
    UnknownDocument(String),
    #[error("{0}")]
    Invalid(String),
    #[error("annotation store {path}: {message}")]
    Store { path: String, message: String },
}

impl AnnotationError {
    fn status(&self) -> StatusCode {
        match self {
            AnnotationError::UnknownTask(_) => StatusCode::NOT_FOUND,
            AnnotationError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for AnnotationError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Open,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub document: Document,
    pub instructions: Vec<EditInstruction>,
    pub hallucinated_summary: String,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub task_id: String,
    pub annotator_id: String,
    pub instruction_index: usize,
    /// 0 marks a hallucination instruction, 1 marks one that is not.
    pub hallucination_label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_type: Option<EditType>,
    pub comment: String,
    /// Milliseconds since the Unix epoch, assigned on submit.
    #[serde(default)]
    pub timestamp: u64,
}

fn task_id(result: &SynthesisResult) -> String {
    let synth = serde_json::to_vec(result).expect("synthesis result serializes");
    let mut h = Sha256::new();
    h.update(result.document_id.as_bytes());
    h.update([0u8]);
    h.update(Sha256::digest(&synth));
    hex::encode(&h.finalize()[..8])
}

/// Immutable set of tasks, in load order.
#[derive(Debug, Clone, Default)]
pub struct TaskStore {
    tasks: BTreeMap<String, (AnnotationTask, SynthesisResult)>,
    order: Vec<String>,
}

pub fn load_tasks(synth: &[SynthesisResult], corpus: &Corpus) -> Result<TaskStore, AnnotationError> {
    let mut store = TaskStore::default();
    for result in synth {
        let doc = corpus
            .get(&result.document_id)
            .ok_or_else(|| AnnotationError::UnknownDocument(result.document_id.clone()))?;
        if result.instructions.is_empty() {
            return Err(AnnotationError::Invalid(format!(
                "document {} has no edit instructions",
                doc.id
            )));
        }
        let id = task_id(result);
        if store.tasks.contains_key(&id) {
            continue;
        }
        let task = AnnotationTask {
            task_id: id.clone(),
            document: doc.clone(),
            instructions: result.instructions.clone(),
            hallucinated_summary: result.hallucinated_summary.clone(),
            status: TaskStatus::Open,
        };
        store.order.push(id.clone());
        store.tasks.insert(id, (task, result.clone()));
    }
    Ok(store)
}

impl TaskStore {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn get(&self, id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(id).map(|(t, _)| t)
    }

    pub fn task_for_document(&self, document_id: &str) -> Option<&AnnotationTask> {
        self.order
            .iter()
            .filter_map(|id| self.get(id))
            .find(|t| t.document.id == document_id)
    }

    fn indices(&self, id: &str) -> Option<BTreeSet<usize>> {
        self.get(id).map(|t| t.instructions.iter().map(|i| i.index).collect())
    }
}

/// Judgment log. Every accepted submission is appended to disk; the
/// in-memory view keeps the latest record per (task, annotator, instruction).
#[derive(Debug, Default)]
pub struct RecordStore {
    path: Option<PathBuf>,
    latest: BTreeMap<(String, String, usize), AnnotationRecord>,
    appended: usize,
}

impl RecordStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays an existing log (if any) and appends to it afterwards.
    pub fn open(path: &Path) -> Result<Self, AnnotationError> {
        let mut store = Self {
            path: Some(path.to_path_buf()),
            ..Self::default()
        };
        if path.exists() {
            let raw = std::fs::read_to_string(path).map_err(|e| store_err(path, e.to_string()))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: AnnotationRecord = serde_json::from_str(line)
                    .map_err(|e| store_err(path, format!("line {}: {e}", i + 1)))?;
                store.apply(rec);
                store.appended += 1;
            }
        }
        Ok(store)
    }

    fn apply(&mut self, rec: AnnotationRecord) {
        let key = (rec.task_id.clone(), rec.annotator_id.clone(), rec.instruction_index);
        self.latest.insert(key, rec);
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    /// Number of lines in the log, including overwritten submissions.
    pub fn log_len(&self) -> usize {
        self.appended
    }

    pub fn records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.latest.values()
    }

    pub fn submit(&mut self, tasks: &TaskStore, mut rec: AnnotationRecord) -> Result<AnnotationRecord, AnnotationError> {
        let indices = tasks
            .indices(&rec.task_id)
            .ok_or_else(|| AnnotationError::UnknownTask(rec.task_id.clone()))?;
        if rec.hallucination_label > 1 {
            return Err(AnnotationError::Invalid(format!(
                "hallucination_label must be 0 or 1, got {}",
                rec.hallucination_label
            )));
        }
        if !indices.contains(&rec.instruction_index) {
            return Err(AnnotationError::Invalid(format!(
                "task {} has no instruction {}",
                rec.task_id, rec.instruction_index
            )));
        }
        if rec.comment.trim().is_empty() {
            return Err(AnnotationError::Invalid("comment must not be empty".into()));
        }
        if rec.annotator_id.trim().is_empty() {
            return Err(AnnotationError::Invalid("annotator_id must not be empty".into()));
        }
        if rec.timestamp == 0 {
            rec.timestamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or_default();
        }
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| store_err(path, e.to_string()))?;
        }
        self.appended += 1;
        self.apply(rec.clone());
        Ok(rec)
    }

    /// Label vectors of annotators who labeled every instruction of `task`.
    fn complete_annotators(&self, task: &AnnotationTask) -> BTreeMap<String, Vec<u8>> {
        let mut by_annotator: BTreeMap<&str, BTreeMap<usize, u8>> = BTreeMap::new();
        for ((t, a, i), r) in &self.latest {
            if t == &task.task_id {
                by_annotator.entry(a).or_default().insert(*i, r.hallucination_label);
            }
        }
        by_annotator
            .into_iter()
            .filter_map(|(a, labels)| {
                let v: Option<Vec<u8>> = task.instructions.iter().map(|ins| labels.get(&ins.index).copied()).collect();
                v.map(|v| (a.to_string(), v))
            })
            .collect()
    }

    pub fn status(&self, task: &AnnotationTask) -> TaskStatus {
        if self.complete_annotators(task).len() >= 2 {
            TaskStatus::Complete
        } else {
            TaskStatus::Open
        }
    }

    /// Labels keyed by (document, instruction index) for edit statistics.
    pub fn labels(&self, tasks: &TaskStore) -> HallucinationLabels {
        let mut out = HallucinationLabels::new();
        for r in self.latest.values() {
            if let Some(t) = tasks.get(&r.task_id) {
                out.entry((t.document.id.clone(), r.instruction_index))
                    .or_default()
                    .push(r.hallucination_label);
            }
        }
        out
    }
}

fn store_err(path: &Path, message: String) -> AnnotationError {
    AnnotationError::Store {
        path: path.display().to_string(),
        message,
    }
}

/// Per-task kappa over hallucination labels. Tasks with fewer than two
/// complete annotators are excluded; with more than two, the first two
/// annotator ids in sorted order are compared.
pub fn agreement(tasks: &TaskStore, records: &RecordStore, filter: Option<&str>) -> AgreementResult {
    let mut kappas = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for id in tasks.ids() {
        if filter.is_some_and(|f| f != id) {
            continue;
        }
        let task = tasks.get(id).expect("listed task exists");
        let key = if tasks.ids().iter().filter(|o| tasks.get(o).unwrap().document.id == task.document.id).count() > 1 {
            format!("{}:{}", task.document.id, id)
        } else {
            task.document.id.clone()
        };
        let complete = records.complete_annotators(task);
        let mut it = complete.values();
        match (it.next(), it.next()) {
            (Some(a), Some(b)) => match cohen_kappa(a, b) {
                Ok(k) => {
                    kappas.insert(key, k);
                }
                Err(e) => {
                    excluded.insert(key, e.to_string());
                }
            },
            _ => {
                excluded.insert(
                    key,
                    format!("{} complete annotator(s); need at least 2", complete.len()),
                );
            }
        }
    }
    AgreementResult::from_kappas(kappas, excluded)
}

/// Agreement straight from a judgment log, without the task definitions.
/// A task's instruction set is taken as every index any annotator labeled.
pub fn agreement_from_records<'a>(records: impl IntoIterator<Item = &'a AnnotationRecord>) -> AgreementResult {
    let mut latest: BTreeMap<(&str, &str, usize), u8> = BTreeMap::new();
    for r in records {
        latest.insert((&r.task_id, &r.annotator_id, r.instruction_index), r.hallucination_label);
    }
    let mut by_task: BTreeMap<&str, BTreeMap<&str, BTreeMap<usize, u8>>> = BTreeMap::new();
    for ((t, a, i), l) in latest {
        by_task.entry(t).or_default().entry(a).or_default().insert(i, l);
    }
    let mut kappas = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for (task, annotators) in by_task {
        let indices: BTreeSet<usize> = annotators.values().flat_map(|m| m.keys().copied()).collect();
        let complete: Vec<Vec<u8>> = annotators
            .values()
            .filter(|m| m.len() == indices.len())
            .map(|m| m.values().copied().collect())
            .collect();
        if complete.len() < 2 {
            excluded.insert(task.to_string(), format!("{} complete annotator(s); need at least 2", complete.len()));
            continue;
        }
        match cohen_kappa(&complete[0], &complete[1]) {
            Ok(k) => {
                kappas.insert(task.to_string(), k);
            }
            Err(e) => {
                excluded.insert(task.to_string(), e.to_string());
            }
        }
    }
    AgreementResult::from_kappas(kappas, excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceStats {
    pub task_count: usize,
    pub complete_tasks: usize,
    pub record_count: usize,
    pub annotators: Vec<String>,
    pub edit_stats: Option<EditStats>,
}

pub fn stats(tasks: &TaskStore, records: &RecordStore) -> ServiceStats {
    let mut events = Vec::new();
    for (task, synth) in tasks.order.iter().map(|id| &tasks.tasks[id]) {
        if let Ok(c) = classify_edits(&task.document, synth, DEFAULT_THRESHOLD) {
            events.extend(c.events);
        }
    }
    let labels = records.labels(tasks);
    let edit_stats = aggregate_stats(&events, (!labels.is_empty()).then_some(&labels)).ok();
    ServiceStats {
        task_count: tasks.len(),
        complete_tasks: tasks
            .order
            .iter()
            .filter(|id| records.status(tasks.get(id).unwrap()) == TaskStatus::Complete)
            .count(),
        record_count: records.len(),
        annotators: records
            .records()
            .map(|r| r.annotator_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        edit_stats,
    }
}

pub struct AppState {
    pub tasks: TaskStore,
    pub records: RwLock<RecordStore>,
}

impl AppState {
    pub fn new(tasks: TaskStore, records: RecordStore) -> Arc<Self> {
        Arc::new(Self {
            tasks,
            records: RwLock::new(records),
        })
    }
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub document_id: String,
    pub instruction_count: usize,
    pub status: TaskStatus,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskPage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<TaskSummary>,
}

#[derive(Debug, Deserialize)]
struct Submission {
    #[serde(default)]
    task_id: Option<String>,
    annotator_id: String,
    instruction_index: usize,
    hallucination_label: i64,
    #[serde(default)]
    edit_type: Option<EditType>,
    comment: String,
}

#[derive(Debug, Deserialize)]
struct AgreementQuery {
    task: Option<String>,
}

async fn list_tasks(State(s): State<Arc<AppState>>, Query(p): Query<Page>) -> Json<TaskPage> {
    let limit = p.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    let records = s.records.read().await;
    let items = s
        .tasks
        .ids()
        .iter()
        .skip(p.offset)
        .take(limit)
        .map(|id| {
            let t = s.tasks.get(id).expect("listed task exists");
            TaskSummary {
                task_id: id.clone(),
                document_id: t.document.id.clone(),
                instruction_count: t.instructions.len(),
                status: records.status(t),
            }
        })
        .collect();
    Json(TaskPage {
        total: s.tasks.len(),
        offset: p.offset,
        limit,
        items,
    })
}

async fn get_task(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<AnnotationTask>, AnnotationError> {
    let mut task = s.tasks.get(&id).cloned().ok_or(AnnotationError::UnknownTask(id))?;
    task.status = s.records.read().await.status(&task);
    Ok(Json(task))
}

async fn submit(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<Submission>,
) -> Result<(StatusCode, Json<AnnotationRecord>), AnnotationError> {
    if body.task_id.as_ref().is_some_and(|t| t != &id) {
        return Err(AnnotationError::Invalid("task_id in body does not match the URL".into()));
    }
    let label = u8::try_from(body.hallucination_label)
        .ok()
        .filter(|l| *l <= 1)
        .ok_or_else(|| {
            AnnotationError::Invalid(format!(
                "hallucination_label must be 0 or 1, got {}",
                body.hallucination_label
            ))
        })?;
    let rec = AnnotationRecord {
        task_id: id,
        annotator_id: body.annotator_id,
        instruction_index: body.instruction_index,
        hallucination_label: label,
        edit_type: body.edit_type,
        comment: body.comment,
        timestamp: 0,
    };
    let stored = s.records.write().await.submit(&s.tasks, rec)?;
    Ok((StatusCode::CREATED, Json(stored)))
}

async fn get_agreement(State(s): State<Arc<AppState>>, Query(q): Query<AgreementQuery>) -> Result<Json<AgreementResult>, AnnotationError> {
    if let Some(t) = &q.task {
        if s.tasks.get(t).is_none() {
            return Err(AnnotationError::UnknownTask(t.clone()));
        }
    }
    let records = s.records.read().await;
    Ok(Json(agreement(&s.tasks, &records, q.task.as_deref())))
}

async fn get_stats(State(s): State<Arc<AppState>>) -> Json<ServiceStats> {
    let records = s.records.read().await;
    Json(stats(&s.tasks, &records))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/annotations", post(submit))
        .route("/agreement", get(get_agreement))
        .route("/stats", get(get_stats))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "annotation service listening");
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{annotated_corpus, annotated_examples};
    use crate::synthesis::{parse_response, validate_constraints};
    use axum::body::Body;
    use axum::http::Request;
    use tower::ServiceExt;

    fn synth_results() -> Vec<SynthesisResult> {
        annotated_examples()
            .into_iter()
            .map(|e| {
                let p = parse_response(&e.raw_response).unwrap();
                SynthesisResult {
                    document_id: e.id.clone(),
                    validation: validate_constraints(&e.reference_summary, &p.instructions, &p.hallucinated_summary),
                    instructions: p.instructions,
                    hallucinated_summary: p.hallucinated_summary,
                    raw_response: e.raw_response,
                    warnings: p.warnings,
                }
            })
            .collect()
    }

    fn record(task: &str, who: &str, idx: usize, label: u8) -> AnnotationRecord {
        AnnotationRecord {
            task_id: task.into(),
            annotator_id: who.into(),
            instruction_index: idx,
            hallucination_label: label,
            edit_type: None,
            comment: "ok".into(),
            timestamp: 0,
        }
    }

    #[test]
    fn loads_tasks_deterministically() {
        let corpus = annotated_corpus();
        let a = load_tasks(&synth_results(), &corpus).unwrap();
        let b = load_tasks(&synth_results(), &corpus).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.ids(), b.ids());
        let counts: Vec<usize> = a.ids().iter().map(|id| a.get(id).unwrap().instructions.len()).collect();
        assert_eq!(counts, vec![8, 12]);
        assert!(load_tasks(&[], &corpus).unwrap().is_empty());
        let empty = Corpus::default();
        assert!(matches!(load_tasks(&synth_results(), &empty), Err(AnnotationError::UnknownDocument(_))));
    }

    #[test]
    fn submit_validates_and_overwrites() {
        let tasks = load_tasks(&synth_results(), &annotated_corpus()).unwrap();
        let id = tasks.ids()[0].clone();
        let mut store = RecordStore::in_memory();
        let mut r = record(&id, "a1", 1, 0);
        r.comment = "Important instruction for any potential emergencies".into();
        assert!(store.submit(&tasks, r).is_ok());
        assert!(matches!(store.submit(&tasks, record(&id, "a1", 1, 2)), Err(AnnotationError::Invalid(_))));
        assert!(matches!(store.submit(&tasks, record("nope", "a1", 1, 0)), Err(AnnotationError::UnknownTask(_))));
        assert!(matches!(store.submit(&tasks, record(&id, "a1", 99, 0)), Err(AnnotationError::Invalid(_))));
        let mut blank = record(&id, "a1", 1, 0);
        blank.comment = "  ".into();
        assert!(matches!(store.submit(&tasks, blank), Err(AnnotationError::Invalid(_))));
        store.submit(&tasks, record(&id, "a1", 1, 1)).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.records().next().unwrap().hallucination_label, 1);
        assert_eq!(store.log_len(), 2);
    }

    #[test]
    fn log_replay_reproduces_agreement() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let tasks = load_tasks(&synth_results(), &annotated_corpus()).unwrap();
        let mut store = RecordStore::open(&path).unwrap();
        for (id, ex) in tasks.ids().iter().zip(annotated_examples()) {
            for (who, js) in &ex.annotators {
                for j in js {
                    let mut r = record(id, who, j.instruction_index, j.hallucination_label);
                    r.comment = j.comment.clone();
                    store.submit(&tasks, r).unwrap();
                }
            }
        }
        let live = agreement(&tasks, &store, None);
        let replayed = agreement(&tasks, &RecordStore::open(&path).unwrap(), None);
        assert_eq!(live, replayed);
        assert!((live.per_document_kappa["annotated-1"] - -0.75).abs() < 1e-12);
        assert!((live.per_document_kappa["annotated-2"] - 5.0 / 13.0).abs() < 1e-12);
        assert!((live.mean_kappa.unwrap() - (-0.75 + 5.0 / 13.0) / 2.0).abs() < 1e-12);
        let offline = agreement_from_records(store.records());
        let mut by_task: Vec<f64> = offline.per_document_kappa.values().copied().collect();
        by_task.sort_by(f64::total_cmp);
        assert!((by_task[0] - -0.75).abs() < 1e-12 && (by_task[1] - 5.0 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn agreement_exclusions_and_identity() {
        let tasks = load_tasks(&synth_results(), &annotated_corpus()).unwrap();
        let id = tasks.ids()[0].clone();
        let mut store = RecordStore::in_memory();
        for i in 1..=8 {
            store.submit(&tasks, record(&id, "solo", i, (i % 2) as u8)).unwrap();
        }
        let r = agreement(&tasks, &store, Some(&id));
        assert!(r.per_document_kappa.is_empty());
        assert!(r.excluded["annotated-1"].contains("1 complete"));
        for i in 1..=8 {
            store.submit(&tasks, record(&id, "twin", i, (i % 2) as u8)).unwrap();
        }
        assert_eq!(agreement(&tasks, &store, Some(&id)).mean_kappa, Some(1.0));
    }

    fn app() -> (Router, String) {
        let tasks = load_tasks(&synth_results(), &annotated_corpus()).unwrap();
        let id = tasks.ids()[0].clone();
        (router(AppState::new(tasks, RecordStore::in_memory())), id)
    }

    async fn call(app: &Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
    }

    fn post_json(uri: &str, body: serde_json::Value) -> Request<Body> {
        Request::post(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap()
    }

    #[tokio::test]
    async fn http_endpoints() {
        let (app, id) = app();
        let (s, v) = call(&app, Request::get("/tasks?limit=1").body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["total"], 2);
        assert_eq!(v["items"].as_array().unwrap().len(), 1);

        let (s, v) = call(&app, Request::get(format!("/tasks/{id}")).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["instructions"].as_array().unwrap().len(), 8);
        let (s, _) = call(&app, Request::get("/tasks/missing").body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::NOT_FOUND);

        let ok = serde_json::json!({"annotator_id": "a1", "instruction_index": 1, "hallucination_label": 0,
            "comment": "Important instruction for any potential emergencies", "edit_type": "AR-MI"});
        let (s, v) = call(&app, post_json(&format!("/tasks/{id}/annotations"), ok)).await;
        assert_eq!(s, StatusCode::CREATED);
        assert_eq!(v["edit_type"], "AR-MI");

        let bad = serde_json::json!({"annotator_id": "a1", "instruction_index": 1, "hallucination_label": 2, "comment": "x"});
        let (s, _) = call(&app, post_json(&format!("/tasks/{id}/annotations"), bad)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
        let blank = serde_json::json!({"annotator_id": "a1", "instruction_index": 1, "hallucination_label": 1, "comment": ""});
        let (s, _) = call(&app, post_json(&format!("/tasks/{id}/annotations"), blank)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
        let unknown = serde_json::json!({"annotator_id": "a1", "instruction_index": 1, "hallucination_label": 1, "comment": "x"});
        let (s, _) = call(&app, post_json("/tasks/missing/annotations", unknown)).await;
        assert_eq!(s, StatusCode::NOT_FOUND);

        let (s, v) = call(&app, Request::get("/agreement").body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        assert!(v["mean_kappa"].is_null());
        let (s, v) = call(&app, Request::get("/stats").body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["task_count"], 2);
        assert_eq!(v["record_count"], 1);
        assert!(v["edit_stats"]["event_count"].as_u64().unwrap() > 0);
    }
}
