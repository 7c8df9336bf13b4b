//! `minimt serve`: the translation service.
//!
//! JSON over HTTP, api_version 1:
//!
//! * `POST /translate` — body is one request object or an array of them.
//!   A request is `{"id": <any json>, "src": "text", "opts": {…}}`; `id` is
//!   echoed back untouched and `opts` may override the decoding knobs
//!   (`beam_size`, `max_len`, `n_best`, `length_alpha`, `coverage_beta`,
//!   `replace_unk`) plus `attn: true` to include the attention matrix.
//!   The response mirrors the input shape: one object for an object, an
//!   array for an array. Items fail independently — a bad item becomes
//!   `{"id": …, "error": "…"}` while the rest of the batch proceeds.
//! * `GET /health` — model name, config hash, uptime, api version.
//!
//! Malformed JSON is a 400; unknown paths 404; wrong methods 405. Requests
//! are handled concurrently against the immutable loaded model. Shutdown
//! via [`RunningServer::stop`] drains in-flight requests before returning.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tiny_http::{Header, Method, Request, Response, Server};

use crate::beam::DecodeOptions;
use crate::config::ServeConfig;
use crate::error::{Error, Result};

use super::pipeline::{load_phrase_table, LoadedModel};

/// Decoding knobs a request may override; absent fields keep the server's
/// configured values.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestOpts {
    pub beam_size: Option<usize>,
    pub max_len: Option<usize>,
    pub n_best: Option<usize>,
    pub length_alpha: Option<f64>,
    pub coverage_beta: Option<f64>,
    pub replace_unk: Option<bool>,
    /// Include the attention matrix of the best hypothesis in the response.
    #[serde(default)]
    pub attn: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerRequest {
    #[serde(default)]
    pub id: Value,
    pub src: String,
    #[serde(default)]
    pub opts: Option<RequestOpts>,
}

#[derive(Debug, Serialize)]
pub struct NBestEntry {
    pub tgt: String,
    pub score: f64,
    pub raw_score: f64,
}

#[derive(Debug, Serialize)]
pub struct ServerResponse {
    pub id: Value,
    /// Best hypothesis, fully detokenized.
    pub tgt: String,
    /// Normalized score of the best hypothesis.
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attn: Option<Vec<Vec<f64>>>,
    pub n_best: Vec<NBestEntry>,
}

/// One item of a batch: a translation or a per-item error.
#[derive(Debug, Serialize)]
#[serde(untagged)]
enum Item {
    Ok(Box<ServerResponse>),
    Err { id: Value, error: String },
}

struct ServerState {
    loaded: LoadedModel,
    base_opts: DecodeOptions,
    started: Instant,
}

fn apply_overrides(base: &DecodeOptions, req: Option<&RequestOpts>) -> DecodeOptions {
    let mut opts = base.clone();
    if let Some(o) = req {
        if let Some(v) = o.beam_size {
            opts.beam_size = v;
        }
        if let Some(v) = o.max_len {
            opts.max_len = v;
        }
        if let Some(v) = o.n_best {
            opts.n_best = v;
        }
        if let Some(v) = o.length_alpha {
            opts.length_alpha = v;
        }
        if let Some(v) = o.coverage_beta {
            opts.coverage_beta = v;
        }
        if let Some(v) = o.replace_unk {
            opts.replace_unk = v;
        }
    }
    opts
}

fn translate_item(state: &ServerState, raw: Value) -> Item {
    // Keep the id for error reporting even when the rest fails to parse.
    let id = raw.get("id").cloned().unwrap_or(Value::Null);
    let req: ServerRequest = match serde_json::from_value(raw) {
        Ok(r) => r,
        Err(e) => return Item::Err { id, error: format!("bad request: {e}") },
    };
    let opts = apply_overrides(&state.base_opts, req.opts.as_ref());
    if let Err(e) = opts.validate() {
        return Item::Err { id: req.id, error: e.to_string() };
    }
    let src_len = match state.loaded.prepare(&req.src) {
        Ok(prep) => prep.sentence.ids.len(),
        Err(e) => return Item::Err { id: req.id, error: e.to_string() },
    };
    if src_len > opts.max_len {
        return Item::Err {
            id: req.id,
            error: format!("source is {src_len} tokens after tokenization, limit {}", opts.max_len),
        };
    }
    let lines = [req.src];
    match state.loaded.translate_lines(&lines, &opts).pop().expect("one line in, one out") {
        Err(e) => Item::Err { id: req.id, error: e.to_string() },
        Ok(hyps) => {
            let include_attn = req.opts.as_ref().is_some_and(|o| o.attn);
            let best = &hyps[0];
            Item::Ok(Box::new(ServerResponse {
                id: req.id,
                tgt: best.text.clone(),
                score: best.normalized_score,
                attn: include_attn.then(|| best.attn.clone()),
                n_best: hyps
                    .iter()
                    .map(|h| NBestEntry {
                        tgt: h.text.clone(),
                        score: h.normalized_score,
                        raw_score: h.raw_score,
                    })
                    .collect(),
            }))
        }
    }
}

/// Status plus response body for one HTTP exchange.
type Reply = (u16, String);

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn handle_translate(state: &ServerState, body: &str) -> Reply {
    let parsed: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => return (400, error_body(&format!("malformed JSON: {e}"))),
    };
    match parsed {
        Value::Array(raw_items) => {
            let items: Vec<Item> =
                raw_items.into_iter().map(|v| translate_item(state, v)).collect();
            (200, serde_json::to_string(&items).expect("response serializes"))
        }
        single => {
            let item = translate_item(state, single);
            (200, serde_json::to_string(&item).expect("response serializes"))
        }
    }
}

fn handle_health(state: &ServerState) -> Reply {
    let body = serde_json::json!({
        "model": state.loaded.name,
        "config_hash": state.loaded.meta.config_hash,
        "uptime_secs": state.started.elapsed().as_secs(),
        "api_version": 1,
    });
    (200, body.to_string())
}

fn handle(state: &ServerState, mut request: Request) {
    let (status, body) = match (request.method().clone(), request.url()) {
        (Method::Post, "/translate") => {
            let mut body = String::new();
            match request.as_reader().read_to_string(&mut body) {
                Ok(_) => handle_translate(state, &body),
                Err(e) => (400, error_body(&format!("unreadable body: {e}"))),
            }
        }
        (Method::Get, "/health") => handle_health(state),
        (_, "/translate") | (_, "/health") => (405, error_body("method not allowed")),
        _ => (404, error_body("not found")),
    };
    let content_type = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
        .expect("static header");
    let response =
        Response::from_string(body).with_status_code(status).with_header(content_type);
    // A client hanging up mid-response is its own problem, not the server's.
    let _ = request.respond(response);
}

/// A live server: bound address, worker pool, and the handle to stop it.
pub struct RunningServer {
    pub addr: SocketAddr,
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl RunningServer {
    /// Signals the workers, drains in-flight requests, and joins the pool.
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        for worker in self.workers.drain(..) {
            let _ = worker.join();
        }
    }
}

/// Loads the model, binds the socket (`port` 0 picks a free one), and
/// starts the worker pool. Returns once the server is accepting requests.
pub fn spawn(cfg: &ServeConfig) -> Result<RunningServer> {
    let loaded = LoadedModel::open(&cfg.model, cfg.bpe.as_deref())?;
    let base_opts = DecodeOptions {
        beam_size: cfg.beam_size,
        max_len: cfg.max_len,
        n_best: cfg.n_best,
        length_alpha: cfg.length_alpha,
        coverage_beta: cfg.coverage_beta,
        replace_unk: cfg.replace_unk,
        phrase_table: cfg.phrase_table.as_deref().map(load_phrase_table).transpose()?,
        filters: Vec::new(),
    };
    base_opts.validate()?;
    let state = Arc::new(ServerState { loaded, base_opts, started: Instant::now() });

    let bind = format!("{}:{}", cfg.host, cfg.port);
    let server = Server::http(&bind)
        .map_err(|e| Error::Server(format!("failed to bind {bind}: {e}")))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Server("server bound to a non-IP address".into()))?;
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));

    let n_workers = thread::available_parallelism().map(|n| n.get()).unwrap_or(1).clamp(2, 8);
    let workers = (0..n_workers)
        .map(|_| {
            let server = Arc::clone(&server);
            let state = Arc::clone(&state);
            let stop = Arc::clone(&stop);
            thread::spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(request)) => handle(&state, request),
                    Ok(None) => {}
                    Err(_) => break,
                }
            })
        })
        .collect();

    Ok(RunningServer { addr, server, stop, workers })
}

/// Blocking entry point for `minimt serve`.
pub fn run(cfg: &ServeConfig) -> Result<()> {
    let running = spawn(cfg)?;
    println!("listening on http://{}", running.addr);
    loop {
        thread::park();
    }
}
