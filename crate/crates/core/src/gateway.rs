//! Single choke-point for all text and vision model calls, with
//! deterministic record/replay for offline runs.
//!
//! Requests are hashed over a canonical JSON serialization (sorted keys,
//! images reduced to content digests), and a cassette maps request hashes
//! to recorded responses as append-only JSON lines. Replay mode performs
//! zero transport activity; record mode is read-through, so a request
//! already on the cassette is served from it rather than re-asked.

use crate::prompts;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Logical model role. Roles are configured independently even when they
/// resolve to the same underlying model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Solver,
    Planner,
    Coder,
    Judge,
    VisionJudge,
}

impl ModelRole {
    pub const ALL: [ModelRole; 5] = [
        ModelRole::Solver,
        ModelRole::Planner,
        ModelRole::Coder,
        ModelRole::Judge,
        ModelRole::VisionJudge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelRole::Solver => "solver",
            ModelRole::Planner => "planner",
            ModelRole::Coder => "coder",
            ModelRole::Judge => "judge",
            ModelRole::VisionJudge => "vision_judge",
        }
    }
}

/// Model name and decoding settings for one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub model: String,
    pub temperature: f64,
}

/// One chat message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub text: String,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Message {
            role: "user".into(),
            text: text.into(),
        }
    }
}

/// Image attachment for vision calls.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePayload {
    pub media_type: String,
    pub data: Vec<u8>,
}

impl ImagePayload {
    pub fn digest_hex(&self) -> String {
        Sha256::digest(&self.data)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// A fully-specified model call.
#[derive(Debug, Clone)]
pub struct ModelRequest {
    pub role: ModelRole,
    pub config: RoleConfig,
    /// Template label, used for call accounting and cassette-miss
    /// diagnostics.
    pub label: String,
    pub messages: Vec<Message>,
    pub images: Vec<ImagePayload>,
}

impl ModelRequest {
    pub fn text(
        role: ModelRole,
        config: RoleConfig,
        label: impl Into<String>,
        prompt: impl Into<String>,
    ) -> Self {
        ModelRequest {
            role,
            config,
            label: label.into(),
            messages: vec![Message::user(prompt)],
            images: Vec::new(),
        }
    }

    /// Canonical JSON for hashing: object keys sorted, image bytes replaced
    /// by their content digest.
    pub fn canonical_json(&self) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = self
            .messages
            .iter()
            .map(|m| serde_json::json!({ "role": m.role, "text": m.text }))
            .collect();
        let images: Vec<serde_json::Value> = self
            .images
            .iter()
            .map(|i| {
                serde_json::json!({
                    "media_type": i.media_type,
                    "sha256": i.digest_hex(),
                    "len": i.data.len(),
                })
            })
            .collect();
        serde_json::json!({
            "role": self.role.as_str(),
            "model": self.config.model,
            "temperature": self.config.temperature,
            "label": self.label,
            "messages": messages,
            "images": images,
        })
    }

    /// Deterministic digest of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = self.canonical_json().to_string();
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Where a response came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSource {
    Live,
    Replay,
}

/// A model completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub latency_s: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub source: ResponseSource,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("provider error after {attempts} attempt(s): {message}")]
    Provider { message: String, attempts: u32 },
    #[error("cassette miss for hash {hash} (looks like template '{template}')")]
    CassetteMiss { hash: String, template: String },
    #[error("no transport configured for {0} mode")]
    NoTransport(&'static str),
    #[error("cassette io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cassette line {line}: {message}")]
    CassetteFormat { line: usize, message: String },
}

/// Raw reply from a transport before bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct TransportReply {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// A live backend. Implementations must be safe for concurrent sends.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ModelRequest) -> Result<TransportReply, String>;
}

/// Transport that shells out to a configured command: the request is
/// written to stdin as JSON (image bytes base64-encoded) and the
/// completion read from stdout, either as plain text or as a JSON object
/// `{"text": ..., "prompt_tokens": ..., "completion_tokens": ...}`.
///
/// This keeps provider wiring out of the crate: a small script bridges to
/// whatever HTTP API is in use, while tests plug in local fakes.
pub struct CommandTransport {
    pub argv: Vec<String>,
}

impl Transport for CommandTransport {
    fn send(&self, request: &ModelRequest) -> Result<TransportReply, String> {
        use std::process::{Command, Stdio};
        if self.argv.is_empty() {
            return Err("empty transport command".to_string());
        }
        let payload = serde_json::json!({
            "model": request.config.model,
            "temperature": request.config.temperature,
            "messages": request.messages.iter().map(|m| serde_json::json!({
                "role": m.role, "text": m.text,
            })).collect::<Vec<_>>(),
            "images": request.images.iter().map(|i| serde_json::json!({
                "media_type": i.media_type,
                "base64": base64_encode(&i.data),
            })).collect::<Vec<_>>(),
        });
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawn {}: {e}", self.argv[0]))?;
        child
            .stdin
            .as_mut()
            .expect("stdin piped")
            .write_all(payload.to_string().as_bytes())
            .map_err(|e| format!("write request: {e}"))?;
        let out = child.wait_with_output().map_err(|e| format!("wait: {e}"))?;
        if !out.status.success() {
            return Err(format!(
                "transport command failed ({}): {}",
                out.status,
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        let stdout = String::from_utf8_lossy(&out.stdout).to_string();
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&stdout) {
            if let Some(text) = v.get("text").and_then(|t| t.as_str()) {
                return Ok(TransportReply {
                    text: text.to_string(),
                    prompt_tokens: v.get("prompt_tokens").and_then(|t| t.as_u64()).unwrap_or(0),
                    completion_tokens: v
                        .get("completion_tokens")
                        .and_then(|t| t.as_u64())
                        .unwrap_or(0),
                });
            }
        }
        Ok(TransportReply {
            text: stdout,
            ..Default::default()
        })
    }
}

fn base64_encode(data: &[u8]) -> String {
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(data.len().div_ceil(3) * 4);
    for chunk in data.chunks(3) {
        let b = [
            chunk[0],
            *chunk.get(1).unwrap_or(&0),
            *chunk.get(2).unwrap_or(&0),
        ];
        let n = (u32::from(b[0]) << 16) | (u32::from(b[1]) << 8) | u32::from(b[2]);
        out.push(TABLE[(n >> 18) as usize & 63] as char);
        out.push(TABLE[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 {
            TABLE[(n >> 6) as usize & 63] as char
        } else {
            '='
        });
        out.push(if chunk.len() > 2 {
            TABLE[n as usize & 63] as char
        } else {
            '='
        });
    }
    out
}

/// How the gateway answers requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

impl GatewayMode {
    pub fn parse(s: &str) -> Option<GatewayMode> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Some(GatewayMode::Live),
            "record" => Some(GatewayMode::Record),
            "replay" => Some(GatewayMode::Replay),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CassetteRecord {
    hash: String,
    request: serde_json::Value,
    response: StoredResponse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredResponse {
    text: String,
    latency_s: f64,
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Retry policy for live transport failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 250,
            max_delay_ms: 4000,
        }
    }
}

struct CassetteState {
    entries: BTreeMap<String, StoredResponse>,
    path: Option<PathBuf>,
}

/// The model-call choke point.
pub struct Gateway {
    mode: GatewayMode,
    transport: Option<Box<dyn Transport>>,
    retry: RetryPolicy,
    cassette: Mutex<CassetteState>,
    call_counts: Mutex<BTreeMap<String, u64>>,
}

impl Gateway {
    /// Replay-only gateway over an existing cassette file.
    pub fn replay(cassette_path: &Path) -> Result<Self, GatewayError> {
        let entries = load_cassette(cassette_path)?;
        Ok(Gateway {
            mode: GatewayMode::Replay,
            transport: None,
            retry: RetryPolicy::default(),
            cassette: Mutex::new(CassetteState {
                entries,
                path: Some(cassette_path.to_path_buf()),
            }),
            call_counts: Mutex::new(BTreeMap::new()),
        })
    }

    /// Recording gateway: live transport, read-through cassette. The
    /// cassette file is created immediately so a recording session with no
    /// calls still leaves a loadable (empty) cassette.
    pub fn record(
        cassette_path: &Path,
        transport: Box<dyn Transport>,
        retry: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        let entries = if cassette_path.exists() {
            load_cassette(cassette_path)?
        } else {
            if let Some(parent) = cassette_path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(cassette_path)?;
            BTreeMap::new()
        };
        Ok(Gateway {
            mode: GatewayMode::Record,
            transport: Some(transport),
            retry,
            cassette: Mutex::new(CassetteState {
                entries,
                path: Some(cassette_path.to_path_buf()),
            }),
            call_counts: Mutex::new(BTreeMap::new()),
        })
    }

    /// Live gateway with no cassette.
    pub fn live(transport: Box<dyn Transport>, retry: RetryPolicy) -> Self {
        Gateway {
            mode: GatewayMode::Live,
            transport: Some(transport),
            retry,
            cassette: Mutex::new(CassetteState {
                entries: BTreeMap::new(),
                path: None,
            }),
            call_counts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    /// complete() invocations per request label, for instrumentation.
    pub fn call_counts(&self) -> BTreeMap<String, u64> {
        self.call_counts.lock().expect("counts lock").clone()
    }

    pub fn call_count(&self, label: &str) -> u64 {
        *self
            .call_counts
            .lock()
            .expect("counts lock")
            .get(label)
            .unwrap_or(&0)
    }

    /// Executes one model call according to the gateway mode.
    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        *self
            .call_counts
            .lock()
            .expect("counts lock")
            .entry(request.label.clone())
            .or_insert(0) += 1;

        let hash = request.hash();
        if self.mode != GatewayMode::Live {
            let state = self.cassette.lock().expect("cassette lock");
            if let Some(stored) = state.entries.get(&hash) {
                return Ok(ModelResponse {
                    text: stored.text.clone(),
                    latency_s: stored.latency_s,
                    prompt_tokens: stored.prompt_tokens,
                    completion_tokens: stored.completion_tokens,
                    source: ResponseSource::Replay,
                });
            }
            if self.mode == GatewayMode::Replay {
                let template = request
                    .messages
                    .first()
                    .and_then(|m| prompts::identify_template(&m.text))
                    .map(|n| n.as_str().to_string())
                    .unwrap_or_else(|| "unknown".to_string());
                return Err(GatewayError::CassetteMiss { hash, template });
            }
        }

        let transport = self.transport.as_deref().ok_or(GatewayError::NoTransport(
            if self.mode == GatewayMode::Live {
                "live"
            } else {
                "record"
            },
        ))?;

        let started = Instant::now();
        let mut attempts = 0;
        let reply = loop {
            attempts += 1;
            match transport.send(request) {
                Ok(reply) => break reply,
                Err(message) => {
                    if attempts > self.retry.max_retries {
                        return Err(GatewayError::Provider { message, attempts });
                    }
                    let exp = self.retry.base_delay_ms.saturating_mul(1 << (attempts - 1));
                    std::thread::sleep(Duration::from_millis(exp.min(self.retry.max_delay_ms)));
                }
            }
        };
        let latency_s = started.elapsed().as_secs_f64();

        if self.mode == GatewayMode::Record {
            let stored = StoredResponse {
                text: reply.text.clone(),
                latency_s,
                prompt_tokens: reply.prompt_tokens,
                completion_tokens: reply.completion_tokens,
            };
            let mut state = self.cassette.lock().expect("cassette lock");
            if !state.entries.contains_key(&hash) {
                if let Some(path) = state.path.clone() {
                    append_cassette_line(
                        &path,
                        &CassetteRecord {
                            hash: hash.clone(),
                            request: request.canonical_json(),
                            response: stored.clone(),
                        },
                    )?;
                }
                state.entries.insert(hash, stored);
            }
        }

        Ok(ModelResponse {
            text: reply.text,
            latency_s,
            prompt_tokens: reply.prompt_tokens,
            completion_tokens: reply.completion_tokens,
            source: ResponseSource::Live,
        })
    }
}

fn load_cassette(path: &Path) -> Result<BTreeMap<String, StoredResponse>, GatewayError> {
    let mut entries = BTreeMap::new();
    let content = fs::read_to_string(path)?;
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CassetteRecord =
            serde_json::from_str(line).map_err(|e| GatewayError::CassetteFormat {
                line: i + 1,
                message: e.to_string(),
            })?;
        entries.insert(record.hash, record.response);
    }
    Ok(entries)
}

fn append_cassette_line(path: &Path, record: &CassetteRecord) -> Result<(), GatewayError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut line = serde_json::to_string(record).expect("cassette record serializes");
    line.push('\n');
    file.write_all(line.as_bytes())?;
    Ok(())
}
