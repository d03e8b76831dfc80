//! Live edit/query service over one shared memory bank.
//!
//! - `POST /edits` `{statement, edit_input?, edit_target?, id?}` -> `{entry_id}`
//! - `POST /query` `{question, k?, max_new_tokens?}` -> `{answer, retrieved, rendered_prompt}`
//! - `DELETE /edits/{id}` -> `{ok}`
//! - `POST /snapshot` -> `{ok, path, entries}`
//! - `GET /healthz` -> `{ok, bank_size}`

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{oneshot, Semaphore};

use lte_core::backend::{Backend, BackendError, GenerationRequest};
use lte_core::corpus::EditDescriptor;
use lte_core::memory::{MemoryBank, MemoryError};
use lte_core::prompt::PromptTemplate;

use crate::config::ServeConfig;

pub struct AppState {
    bank: RwLock<MemoryBank>,
    backend: Arc<dyn Backend>,
    template: PromptTemplate,
    k: usize,
    requests: AtomicU64,
    generations: Semaphore,
    snapshot_path: Option<PathBuf>,
}

impl AppState {
    /// Builds the embedder and backend, restoring the snapshot if one exists.
    pub fn from_config(cfg: &ServeConfig) -> Result<Self> {
        cfg.validate()?;
        let embedder = cfg.embedder.build()?;
        let bank = match &cfg.snapshot_path {
            Some(p) if p.exists() => MemoryBank::restore(p, embedder)
                .with_context(|| format!("restoring {}", p.display()))?,
            _ => MemoryBank::new(embedder),
        };
        Ok(Self {
            bank: RwLock::new(bank),
            backend: cfg.backend.build()?,
            template: cfg.template.clone(),
            k: cfg.k,
            requests: AtomicU64::new(0),
            generations: Semaphore::new(cfg.max_concurrent_generations),
            snapshot_path: cfg.snapshot_path.clone(),
        })
    }

    pub fn bank_size(&self) -> usize {
        self.bank.read().expect("bank lock poisoned").len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn bad_request(field: Option<String>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request",
            message: message.into(),
            field,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            message: message.into(),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "kind": self.kind, "message": self.message });
        if let Some(f) = self.field {
            err["field"] = Value::String(f);
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

impl From<MemoryError> for ApiError {
    fn from(e: MemoryError) -> Self {
        match e {
            MemoryError::EmptyStatement(_) => {
                ApiError::bad_request(Some("statement".into()), e.to_string())
            }
            MemoryError::InvalidK => ApiError::bad_request(Some("k".into()), e.to_string()),
            MemoryError::Embed(_) => Self {
                status: StatusCode::BAD_GATEWAY,
                kind: "upstream",
                message: e.to_string(),
                field: None,
            },
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let (status, kind) = if e.is_upstream() {
            (StatusCode::BAD_GATEWAY, "upstream")
        } else {
            (StatusCode::BAD_REQUEST, "bad_request")
        };
        Self {
            status,
            kind,
            message: e.to_string(),
            field: None,
        }
    }
}

/// Field named in a serde error message such as "missing field `k`".
fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            return ApiError::bad_request(None, format!("malformed JSON: {inner}"));
        }
        let msg = inner.to_string();
        let field = if path == "." {
            (msg.starts_with("missing field") || msg.starts_with("unknown field"))
                .then(|| backticked(&msg))
                .flatten()
        } else {
            Some(path)
        };
        ApiError::bad_request(field, msg)
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    statement: String,
    #[serde(default)]
    edit_input: Option<String>,
    #[serde(default)]
    edit_target: Option<String>,
    #[serde(default)]
    id: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    question: String,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    max_new_tokens: Option<u32>,
}

#[derive(Debug, Serialize)]
struct RetrievedOut {
    entry_id: u64,
    statement: String,
    score: f64,
}

async fn add_edit(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let req: EditBody = parse_body(&body)?;
    if req.statement.trim().is_empty() {
        return Err(ApiError::bad_request(
            Some("statement".into()),
            "statement is empty",
        ));
    }
    let n = state.requests.fetch_add(1, Ordering::Relaxed);
    let descriptor = EditDescriptor::new(
        req.id.unwrap_or_else(|| format!("edit-{n}")),
        req.edit_input.unwrap_or_default(),
        req.edit_target.unwrap_or_default(),
        Some(req.statement),
    );
    let entry_id = blocking(move || -> Result<u64, MemoryError> {
        // Embedding happens under the shared lock; only the append is exclusive.
        let prepared = state
            .bank
            .read()
            .expect("bank lock poisoned")
            .prepare(descriptor)?;
        state
            .bank
            .write()
            .expect("bank lock poisoned")
            .commit(prepared)
    })
    .await??;
    Ok(Json(json!({ "entry_id": entry_id })))
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: QueryBody = parse_body(&body)?;
    if req.question.trim().is_empty() {
        return Err(ApiError::bad_request(
            Some("question".into()),
            "question is empty",
        ));
    }
    let k = req.k.unwrap_or(state.k);
    if k == 0 {
        return Err(ApiError::bad_request(Some("k".into()), "k must be >= 1"));
    }
    state.requests.fetch_add(1, Ordering::Relaxed);
    let question = req.question;
    let st = state.clone();
    let (retrieved, prompt) = blocking(move || -> Result<_, MemoryError> {
        let result = st
            .bank
            .read()
            .expect("bank lock poisoned")
            .retrieve(&question, k)?;
        let prompt = st.template.render_str(&result.statements(), &question);
        let retrieved: Vec<RetrievedOut> = result
            .entries
            .into_iter()
            .map(|e| RetrievedOut {
                entry_id: e.entry_id,
                statement: e.descriptor.statement,
                score: e.score,
            })
            .collect();
        Ok((retrieved, prompt))
    })
    .await??;

    let mut request = GenerationRequest::new(prompt.clone());
    if let Some(m) = req.max_new_tokens {
        request.max_new_tokens = m;
    }
    let _permit = state
        .generations
        .acquire()
        .await
        .map_err(|_| ApiError::internal("service shutting down"))?;
    let backend = state.backend.clone();
    let generated = blocking(move || backend.generate(&request)).await??;
    Ok(Json(json!({
        "answer": generated.text,
        "retrieved": retrieved,
        "rendered_prompt": prompt,
    })))
}

async fn delete_edit(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    let Ok(entry_id) = id.parse::<u64>() else {
        return Err(ApiError::bad_request(
            Some("id".into()),
            format!("`{id}` is not an entry id"),
        ));
    };
    let removed = state
        .bank
        .write()
        .expect("bank lock poisoned")
        .remove(entry_id);
    match removed {
        Some(_) => Ok(Json(json!({ "ok": true }))),
        None => Err(ApiError {
            status: StatusCode::NOT_FOUND,
            kind: "not_found",
            message: format!("no entry with id {entry_id}"),
            field: None,
        }),
    }
}

async fn snapshot(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let Some(path) = state.snapshot_path.clone() else {
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            kind: "not_configured",
            message: "no snapshot_path configured".into(),
            field: None,
        });
    };
    let (p, entries) = blocking(move || -> Result<_, MemoryError> {
        let bank = state.bank.read().expect("bank lock poisoned");
        bank.snapshot(&path)?;
        Ok((path, bank.len()))
    })
    .await??;
    Ok(Json(
        json!({ "ok": true, "path": p.display().to_string(), "entries": entries }),
    ))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "ok": true, "bank_size": state.bank_size() }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/edits", post(add_edit))
        .route("/edits/:id", delete(delete_edit))
        .route("/query", post(query))
        .route("/snapshot", post(snapshot))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(cfg: ServeConfig) -> Result<()> {
    let state = Arc::new(tokio::task::block_in_place(|| AppState::from_config(&cfg))?);
    let listener = tokio::net::TcpListener::bind(cfg.listen)
        .await
        .with_context(|| format!("binding {}", cfg.listen))?;
    tracing::info!(addr = %listener.local_addr()?, bank_size = state.bank_size(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("server error")
}

/// A service running on its own runtime thread.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Starts the service in the background. Port 0 picks a free port.
pub fn spawn(cfg: ServeConfig) -> Result<ServiceHandle> {
    let state = Arc::new(AppState::from_config(&cfg)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("building runtime")?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(cfg.listen))
        .with_context(|| format!("binding {}", cfg.listen))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state.clone());
    let thread = thread::spawn(move || {
        runtime.block_on(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServiceHandle {
        addr,
        state,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
