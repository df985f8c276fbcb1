//! Deterministic model stand-ins.
//!
//! [`ScriptedClient`] replays a script file, a JSON list of
//! `{"step": int, "role": "policy"|"evaluator", "texts": [string, ...]}`.
//! Entries are keyed by position: the n-th call made with a given role gets
//! that role's n-th entry in ascending `step` order, regardless of prompt
//! content. Running past the end of the script is an error.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{GenerationRequest, GenerationResponse, ModelClient, ModelError, PromptInput, Role, Usage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub step: u64,
    pub role: Role,
    pub texts: Vec<String>,
}

#[derive(Debug)]
pub struct ScriptedClient {
    queues: HashMap<Role, Vec<ScriptEntry>>,
    cursors: Mutex<HashMap<Role, usize>>,
}

impl ScriptedClient {
    pub fn new(mut entries: Vec<ScriptEntry>) -> Result<Self, ModelError> {
        entries.sort_by_key(|e| e.step);
        let mut queues: HashMap<Role, Vec<ScriptEntry>> = HashMap::new();
        for e in entries {
            let q = queues.entry(e.role).or_default();
            if q.last().is_some_and(|prev| prev.step == e.step) {
                return Err(ModelError::Config(format!(
                    "duplicate script entry for step {} role {}",
                    e.step, e.role
                )));
            }
            q.push(e);
        }
        Ok(Self {
            queues,
            cursors: Mutex::new(HashMap::new()),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(text).map_err(|e| ModelError::Config(format!("mock script: {e}")))?;
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Number of entries consumed so far for `role`.
    pub fn consumed(&self, role: Role) -> usize {
        *self.cursors.lock().unwrap().get(&role).unwrap_or(&0)
    }

    /// Entries not yet consumed, over all roles.
    pub fn remaining(&self) -> usize {
        let cursors = self.cursors.lock().unwrap();
        self.queues
            .iter()
            .map(|(r, q)| q.len() - cursors.get(r).copied().unwrap_or(0))
            .sum()
    }
}

impl ModelClient for ScriptedClient {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ModelError> {
        req.validate()?;
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(req.role).or_insert(0);
        let entry = self
            .queues
            .get(&req.role)
            .and_then(|q| q.get(*cursor))
            .ok_or(ModelError::ScriptExhausted {
                role: req.role,
                step: *cursor,
            })?;
        if entry.texts.len() != req.num_samples {
            return Err(ModelError::ScriptMismatch(format!(
                "step {} ({}) has {} texts, request wants {}",
                entry.step,
                req.role,
                entry.texts.len(),
                req.num_samples
            )));
        }
        *cursor += 1;
        Ok(GenerationResponse {
            texts: entry.texts.clone(),
            usage: Usage::default(),
            model: "scripted-mock".into(),
        })
    }
}

/// Answers inference prompts with the majority label among the reference
/// exemplars shown; ties go to the label of the best-ranked exemplar among
/// the tied classes. With no exemplars it cannot answer and says so.
#[derive(Debug, Default, Clone, Copy)]
pub struct NearestExemplarPolicy;

impl NearestExemplarPolicy {
    pub fn decide(labels: &[&str]) -> Option<String> {
        let mut counts: Vec<(&str, usize, usize)> = Vec::new();
        for (rank, l) in labels.iter().enumerate() {
            match counts.iter_mut().find(|(name, _, _)| name == l) {
                Some(entry) => entry.1 += 1,
                None => counts.push((l, 1, rank)),
            }
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
            .map(|(l, _, _)| l.to_string())
    }
}

impl ModelClient for NearestExemplarPolicy {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ModelError> {
        req.validate()?;
        let PromptInput::Multimodal(prompt) = &req.prompt else {
            return Err(ModelError::InvalidRequest(
                "nearest-exemplar policy only answers inference prompts".into(),
            ));
        };
        let labels = prompt.exemplar_labels();
        let text = match Self::decide(&labels) {
            Some(label) => format!(
                "Majority of {} reference cases is {label}.\nANSWER: {label}",
                labels.len()
            ),
            None => "No reference cases to compare against.".to_string(),
        };
        Ok(GenerationResponse {
            texts: vec![text; req.num_samples],
            usage: Usage::default(),
            model: "nearest-exemplar-mock".into(),
        })
    }
}

type Responder = dyn Fn(&GenerationRequest) -> Result<String, ModelError> + Send + Sync;

/// Client backed by a closure; each sample calls the closure once.
pub struct FnClient {
    f: Box<Responder>,
}

impl FnClient {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&GenerationRequest) -> Result<String, ModelError> + Send + Sync + 'static,
    {
        Self { f: Box::new(f) }
    }
}

impl ModelClient for FnClient {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ModelError> {
        req.validate()?;
        let texts = (0..req.num_samples)
            .map(|_| (self.f)(req))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GenerationResponse {
            texts,
            usage: Usage::default(),
            model: "fn-mock".into(),
        })
    }
}
