//! Learnable prompt state with content-addressed lineage.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Content-addressed prompt identifier: a hash of the body and the parent id,
/// so replaying a run reproduces identical ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineageId(pub String);

impl LineageId {
    fn derive(body: &str, parent: Option<&LineageId>) -> Self {
        let mut hasher = Sha256::new();
        hasher.update((body.len() as u64).to_le_bytes());
        hasher.update(body.as_bytes());
        match parent {
            Some(p) => {
                hasher.update((p.0.len() as u64).to_le_bytes());
                hasher.update(p.0.as_bytes());
            }
            None => hasher.update(u64::MAX.to_le_bytes()),
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(32);
        for b in &digest[..16] {
            hex.push_str(&format!("{b:02x}"));
        }
        LineageId(hex)
    }
}

impl std::fmt::Display for LineageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Whether a prompt drives the answering model or the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Generator,
    Critic,
}

/// A system prompt: the learnable body plus formatting instructions that stay
/// constant for the whole run. Updates replace the body only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub body: String,
    pub format_suffix: String,
    pub role: PromptRole,
    pub lineage_id: LineageId,
    pub parent_id: Option<LineageId>,
}

impl PromptState {
    /// Root of a lineage tree.
    pub fn initial(body: impl Into<String>, format_suffix: impl Into<String>, role: PromptRole) -> Self {
        let body = body.into();
        let lineage_id = LineageId::derive(&body, None);
        Self {
            body,
            format_suffix: format_suffix.into(),
            role,
            lineage_id,
            parent_id: None,
        }
    }

    /// New state with an updated body; role and format suffix carry over.
    pub fn child(&self, body: impl Into<String>) -> Self {
        let body = body.into();
        let lineage_id = LineageId::derive(&body, Some(&self.lineage_id));
        Self {
            body,
            format_suffix: self.format_suffix.clone(),
            role: self.role,
            lineage_id,
            parent_id: Some(self.lineage_id.clone()),
        }
    }

    /// The full system prompt sent to the model.
    pub fn rendered(&self) -> String {
        if self.format_suffix.is_empty() {
            self.body.clone()
        } else {
            format!("{}\n\n{}", self.body, self.format_suffix)
        }
    }
}
