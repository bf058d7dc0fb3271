//! Record/replay archive: a directory of content-addressed request/response
//! files, one per request hash.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, BackendError, BackendKind, ChatRequest, ChatResponse};

/// Canonical content hash of a request.
///
/// Covers system prompt, user message, and sampling parameters; the request
/// tag is accounting metadata and is deliberately excluded. Floats hash by
/// bit pattern, strings are length-prefixed.
pub fn request_key(request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    let mut field = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    field(request.system_prompt.as_bytes());
    field(request.user_message.as_bytes());
    field(&request.temperature.to_bits().to_le_bytes());
    field(&request.top_p.to_bits().to_le_bytes());
    field(&request.max_tokens.to_le_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// One archived exchange, stored verbatim as UTF-8 JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub request: ChatRequest,
    pub response: ChatResponse,
}

fn entry_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

/// Wraps a backend and persists every exchange keyed by the request hash.
/// Re-recording an identical request keeps the first entry.
pub struct RecordBackend {
    inner: Arc<dyn Backend>,
    dir: PathBuf,
}

impl RecordBackend {
    pub fn new(inner: Arc<dyn Backend>, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl Backend for RecordBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(request)?;
        let path = entry_path(&self.dir, &request_key(request));
        if !path.exists() {
            let entry = ArchiveEntry {
                request: request.clone(),
                response: response.clone(),
            };
            let json = serde_json::to_string_pretty(&entry)
                .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
            // write-then-rename so a killed run never leaves a torn entry
            let tmp = path.with_extension("json.tmp");
            std::fs::write(&tmp, json)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(response)
    }
}

/// Serves responses from an archive directory; any unseen request is a miss.
pub struct ReplayBackend {
    dir: PathBuf,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = request_key(request);
        let path = entry_path(&self.dir, &key);
        let data = match std::fs::read_to_string(&path) {
            Ok(data) => data,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(BackendError::ReplayMiss { key })
            }
            Err(e) => return Err(BackendError::Archive(e)),
        };
        let entry: ArchiveEntry = serde_json::from_str(&data)
            .map_err(|e| BackendError::InvalidResponse(format!("archive entry {key}: {e}")))?;
        Ok(ChatResponse {
            backend_kind: BackendKind::Replay,
            ..entry.response
        })
    }
}

/// Read every entry in an archive directory, e.g. for request audits.
pub fn read_archive(dir: &Path) -> Result<Vec<ArchiveEntry>, BackendError> {
    let mut entries = Vec::new();
    for item in std::fs::read_dir(dir)? {
        let path = item?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let data = std::fs::read_to_string(&path)?;
        let entry: ArchiveEntry = serde_json::from_str(&data).map_err(|e| {
            BackendError::InvalidResponse(format!("archive entry {}: {e}", path.display()))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}
