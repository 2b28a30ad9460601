//! Edit requests and the prompt forms they carry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (subject, relation) query posed to the model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub subject: String,
    pub relation: String,
}

impl Prompt {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>) -> Self {
        Prompt { subject: subject.into(), relation: relation.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    #[serde(rename = "str")]
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl Target {
    pub fn new(token: impl Into<String>) -> Self {
        Target { token: token.into(), id: None }
    }

    pub fn with_id(token: impl Into<String>, id: impl Into<String>) -> Self {
        Target { token: token.into(), id: Some(id.into()) }
    }
}

/// One factual rewrite `(subject, relation): target_true → target_new`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub case_id: u64,
    pub subject: String,
    pub relation: String,
    pub target_new: Target,
    pub target_true: Target,
    pub rewrite_prompts: Vec<Prompt>,
    #[serde(default)]
    pub paraphrase_prompts: Vec<Prompt>,
    #[serde(default)]
    pub neighborhood_prompts: Vec<Prompt>,
    #[serde(default)]
    pub portability_prompts: Vec<Prompt>,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| Error::Schema { case_id: self.case_id, message: message.into() };
        if self.rewrite_prompts.is_empty() {
            return Err(fail("at least one rewrite prompt is required"));
        }
        if self.target_new.token == self.target_true.token {
            return Err(fail("target_new must differ from target_true"));
        }
        if self.subject.is_empty() || self.relation.is_empty() {
            return Err(fail("subject and relation must be non-empty"));
        }
        Ok(())
    }

    /// Human-readable template in the `"{} relation"` style.
    pub fn prompt_template(&self) -> String {
        format!("{{}} {}", self.relation)
    }
}

pub fn read_requests_jsonl(text: &str) -> Result<Vec<EditRequest>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let req: EditRequest =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        req.validate()?;
        out.push(req);
    }
    Ok(out)
}

pub fn write_requests_jsonl(requests: &[EditRequest]) -> Result<String> {
    let mut out = String::new();
    for r in requests {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
