//! The experience bank: a capacity-bounded, versioned list of textual
//! heuristics, and the transition function that applies one update action.
//!
//! The bank never decides anything itself. Which action to take is the
//! update policy's job (see [`crate::sres`]); this module validates the
//! action and produces the next state. Every applied action, `Keep`
//! included, advances `version` by exactly one.
//!
//! Heuristic ids are minted from the version at which they were added
//! (`h{version + 1}`), so they are unique for the life of the bank and do not
//! depend on the heuristic text.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEFAULT_CAPACITY: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BankError {
    #[error("bank is full ({capacity} entries); Add is not allowed")]
    AddWhenFull { capacity: usize },
    #[error("no heuristic with id {0:?}")]
    UnknownTarget(String),
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("bank invariant violated: {0}")]
    InvariantViolation(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("bank file parse error: {0}")]
    Parse(String),
}

type Result<T> = std::result::Result<T, BankError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heuristic {
    pub id: String,
    pub text: String,
    pub created_step: u64,
    pub modified_step: u64,
    #[serde(default)]
    pub source_ids: Vec<String>,
}

/// A freshly summarized heuristic that has not been placed in the bank yet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub source_ids: Vec<String>,
}

impl Candidate {
    pub fn new(text: impl Into<String>, source_ids: Vec<String>) -> Self {
        Self {
            text: text.into(),
            source_ids,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Add,
    Delete,
    Keep,
    Modify,
}

impl std::fmt::Display for ActionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ActionKind::Add => "Add",
            ActionKind::Delete => "Delete",
            ActionKind::Keep => "Keep",
            ActionKind::Modify => "Modify",
        };
        f.write_str(s)
    }
}

/// One bank update decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAction", into = "RawAction")]
pub enum UpdateAction {
    Add { new_text: String },
    Delete { target_id: String },
    Keep,
    Modify { target_id: String, new_text: String },
}

impl UpdateAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            UpdateAction::Add { .. } => ActionKind::Add,
            UpdateAction::Delete { .. } => ActionKind::Delete,
            UpdateAction::Keep => ActionKind::Keep,
            UpdateAction::Modify { .. } => ActionKind::Modify,
        }
    }

    pub fn target_id(&self) -> Option<&str> {
        match self {
            UpdateAction::Delete { target_id } | UpdateAction::Modify { target_id, .. } => Some(target_id),
            _ => None,
        }
    }
}

/// Flat wire form; field presence must match `kind` exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAction {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_text: Option<String>,
}

impl TryFrom<RawAction> for UpdateAction {
    type Error = BankError;

    fn try_from(raw: RawAction) -> Result<Self> {
        let malformed = |m: &str| Err(BankError::MalformedAction(format!("{}: {m}", raw.kind)));
        let text_ok = raw.new_text.as_ref().is_some_and(|t| !t.trim().is_empty());
        match (raw.kind, &raw.target_id, &raw.new_text) {
            (ActionKind::Add, None, Some(_)) if text_ok => Ok(UpdateAction::Add {
                new_text: raw.new_text.unwrap(),
            }),
            (ActionKind::Delete, Some(_), None) => Ok(UpdateAction::Delete {
                target_id: raw.target_id.unwrap(),
            }),
            (ActionKind::Keep, None, None) => Ok(UpdateAction::Keep),
            (ActionKind::Modify, Some(_), Some(_)) if text_ok => Ok(UpdateAction::Modify {
                target_id: raw.target_id.unwrap(),
                new_text: raw.new_text.unwrap(),
            }),
            (ActionKind::Add | ActionKind::Modify, _, Some(_)) if !text_ok => malformed("empty text"),
            _ => malformed("fields do not match the action kind"),
        }
    }
}

impl From<UpdateAction> for RawAction {
    fn from(a: UpdateAction) -> Self {
        let kind = a.kind();
        let (target_id, new_text) = match a {
            UpdateAction::Add { new_text } => (None, Some(new_text)),
            UpdateAction::Delete { target_id } => (Some(target_id), None),
            UpdateAction::Keep => (None, None),
            UpdateAction::Modify { target_id, new_text } => (Some(target_id), Some(new_text)),
        };
        RawAction {
            kind,
            target_id,
            new_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceBank {
    pub capacity: usize,
    pub version: u64,
    pub entries: Vec<Heuristic>,
}

impl Default for ExperienceBank {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl ExperienceBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            version: 0,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn remaining(&self) -> usize {
        self.capacity.saturating_sub(self.entries.len())
    }

    pub fn get(&self, id: &str) -> Option<&Heuristic> {
        self.entries.iter().find(|h| h.id == id)
    }

    pub fn texts(&self) -> Vec<&str> {
        self.entries.iter().map(|h| h.text.as_str()).collect()
    }

    /// Id the next `Add` will receive.
    pub fn next_id(&self) -> String {
        format!("h{}", self.version + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BankError::InvariantViolation(m));
        if self.capacity == 0 {
            return bad("capacity must be positive".into());
        }
        if self.entries.len() > self.capacity {
            return bad(format!(
                "{} entries exceed capacity {}",
                self.entries.len(),
                self.capacity
            ));
        }
        let mut ids = HashSet::new();
        for h in &self.entries {
            if !ids.insert(h.id.as_str()) {
                return bad(format!("duplicate id {:?}", h.id));
            }
            if h.text.trim().is_empty() {
                return bad(format!("heuristic {:?} has empty text", h.id));
            }
            if h.modified_step < h.created_step {
                return bad(format!("heuristic {:?} modified before creation", h.id));
            }
            if h.modified_step > self.version {
                return bad(format!("heuristic {:?} stamped after bank version", h.id));
            }
        }
        Ok(())
    }

    /// Applies `action` and returns the next state; `self` is left as is.
    pub fn apply_update(&self, candidate: &Candidate, action: &UpdateAction) -> Result<ExperienceBank> {
        let step = self.version;
        let mut next = self.clone();
        match action {
            UpdateAction::Add { new_text } => {
                if new_text.trim().is_empty() {
                    return Err(BankError::MalformedAction("Add: empty text".into()));
                }
                if self.is_full() {
                    return Err(BankError::AddWhenFull {
                        capacity: self.capacity,
                    });
                }
                next.entries.push(Heuristic {
                    id: self.next_id(),
                    text: new_text.clone(),
                    created_step: step,
                    modified_step: step,
                    source_ids: candidate.source_ids.clone(),
                });
            }
            UpdateAction::Delete { target_id } => {
                let pos = self.position(target_id)?;
                next.entries.remove(pos);
            }
            UpdateAction::Keep => {}
            UpdateAction::Modify { target_id, new_text } => {
                if new_text.trim().is_empty() {
                    return Err(BankError::MalformedAction("Modify: empty text".into()));
                }
                let pos = self.position(target_id)?;
                let h = &mut next.entries[pos];
                h.text = new_text.clone();
                h.modified_step = step;
                for s in &candidate.source_ids {
                    if !h.source_ids.contains(s) {
                        h.source_ids.push(s.clone());
                    }
                }
            }
        }
        next.version += 1;
        Ok(next)
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|h| h.id == id)
            .ok_or_else(|| BankError::UnknownTarget(id.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bank serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| BankError::Io(e.to_string()))
    }

    /// Loads and validates a bank file. A file with no content is an empty
    /// bank of default capacity.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperienceBank> {
        let text = fs::read_to_string(path).map_err(|e| BankError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<ExperienceBank> {
        if text.trim().is_empty() {
            return Ok(ExperienceBank::default());
        }
        let bank: ExperienceBank = serde_json::from_str(text).map_err(|e| BankError::Parse(e.to_string()))?;
        bank.validate()?;
        Ok(bank)
    }
}
