//! Prompt construction: the inference prompt (query and reference visuals
//! followed by the heuristic bank and the answer instruction) and the three
//! auxiliary text prompts used while evolving the bank.
//!
//! Only the scoring prompt may carry the query's ground-truth label. The
//! summarization and update prompts redact every whole-word, case-insensitive
//! occurrence of it and then re-check; a surviving occurrence is a
//! [`PromptError::MaskViolation`].
//!
//! Templates are versioned text files with `{{name}}` placeholders. The
//! built-in set lives in `templates/v1`:
//!
//! | template            | placeholders |
//! |---------------------|--------------|
//! | `instruction.txt`   | `task`, `classes` |
//! | `summarization.txt` | `count`, `max_score`, `rollouts` |
//! | `update.txt`        | `capacity`, `size`, `remaining`, `entries`, `candidate`, `add_rule` |
//! | `scoring.txt`       | `context`, `ground_truth`, `rollout`, `criteria`, `num_criteria`, `score_format` |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::ExperienceBank;

pub const MASK_TOKEN: &str = "[MASKED]";

/// Default criteria set for the evaluator.
pub const DEFAULT_CRITERIA: [&str; 5] = [
    "correctness",
    "validity",
    "comprehensiveness",
    "discriminability",
    "consistency",
];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("record {0:?} has no image reference")]
    MissingImageRef(String),
    #[error("ground-truth label {0:?} leaked into a masked prompt")]
    MaskViolation(String),
    #[error("need at least two rollouts with differing scores to contrast")]
    DegenerateGroup,
    #[error("criteria list is empty")]
    NoCriteria,
    #[error("segments out of order: {0}")]
    OutOfOrder(String),
    #[error("rendered prompt has {len} characters, limit is {max}")]
    TooLong { len: usize, max: usize },
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid task spec: {0}")]
    InvalidTask(String),
}

type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub class_names: Vec<String>,
    /// Overrides the instruction template when set.
    #[serde(default)]
    pub instruction: Option<String>,
    #[serde(default)]
    pub multi_label: bool,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, class_names: Vec<String>) -> Self {
        Self {
            name: name.into(),
            class_names,
            instruction: None,
            multi_label: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.class_names[class]
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(PromptError::InvalidTask("no class names".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.class_names {
            if n.trim().is_empty() {
                return Err(PromptError::InvalidTask("empty class name".into()));
            }
            if !seen.insert(n.to_lowercase()) {
                return Err(PromptError::InvalidTask(format!("duplicate class name {n:?}")));
            }
        }
        if let Some(c) = num_classes {
            if c != self.class_names.len() {
                return Err(PromptError::InvalidTask(format!(
                    "{} class names for {} classes",
                    self.class_names.len(),
                    c
                )));
            }
        }
        Ok(())
    }
}

/// One piece of an inference prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    VisualQuery {
        image_ref: String,
    },
    VisualExemplar {
        image_ref: String,
        label: String,
        rank: usize,
        similarity: f64,
    },
    HeuristicsBlock {
        texts: Vec<String>,
    },
    Instruction {
        text: String,
    },
}

impl Segment {
    fn stage(&self) -> u8 {
        match self {
            Segment::VisualQuery { .. } => 0,
            Segment::VisualExemplar { .. } => 1,
            Segment::HeuristicsBlock { .. } => 2,
            Segment::Instruction { .. } => 3,
        }
    }
}

/// Text or image slot, in prompt order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(String),
}

/// Ordered prompt segments: the query visual, reference visuals, the
/// heuristics block, then the instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalPrompt {
    segments: Vec<Segment>,
}

impl MultimodalPrompt {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let queries = segments
            .iter()
            .filter(|s| matches!(s, Segment::VisualQuery { .. }))
            .count();
        if queries != 1 {
            return Err(PromptError::OutOfOrder(format!("{queries} query segments")));
        }
        if segments.windows(2).any(|w| w[0].stage() > w[1].stage()) {
            return Err(PromptError::OutOfOrder("visuals, heuristics, instruction".into()));
        }
        if segments
            .iter()
            .filter(|s| matches!(s, Segment::HeuristicsBlock { .. } | Segment::Instruction { .. }))
            .map(Segment::stage)
            .collect::<Vec<_>>()
            .windows(2)
            .any(|w| w[0] == w[1])
        {
            return Err(PromptError::OutOfOrder("repeated block".into()));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn exemplar_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::VisualExemplar { .. }))
            .count()
    }

    /// Labels of the reference visuals, best rank first.
    pub fn exemplar_labels(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::VisualExemplar { label, .. } => Some(label.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn query_image(&self) -> &str {
        self.segments
            .iter()
            .find_map(|s| match s {
                Segment::VisualQuery { image_ref } => Some(image_ref.as_str()),
                _ => None,
            })
            .expect("constructor guarantees one query segment")
    }

    pub fn parts(&self) -> Vec<Part> {
        let mut parts = Vec::new();
        for s in &self.segments {
            match s {
                Segment::VisualQuery { image_ref } => {
                    parts.push(Part::Text("Query image:".into()));
                    parts.push(Part::Image(image_ref.clone()));
                }
                Segment::VisualExemplar {
                    image_ref,
                    label,
                    rank,
                    similarity,
                } => {
                    parts.push(Part::Text(format!(
                        "Reference case {rank} (label: {label}, similarity {similarity:.4}):"
                    )));
                    parts.push(Part::Image(image_ref.clone()));
                }
                Segment::HeuristicsBlock { texts } => {
                    let mut block = String::from("Diagnostic heuristics:");
                    for (i, t) in texts.iter().enumerate() {
                        block.push_str(&format!("\n{}. {}", i + 1, t));
                    }
                    parts.push(Part::Text(block));
                }
                Segment::Instruction { text } => parts.push(Part::Text(text.clone())),
            }
        }
        parts
    }

    /// Plain-text form with images as `<image:REF>` slots.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in self.parts() {
            match p {
                Part::Text(t) => {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(&t);
                }
                Part::Image(r) => {
                    out.push_str(&format!(" <image:{r}>"));
                }
            }
        }
        out.push('\n');
        out
    }
}

/// A retrieved reference case ready to be shown in a prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exemplar {
    pub id: String,
    pub image_ref: Option<String>,
    pub class: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub version: String,
    pub instruction: String,
    pub summarization: String,
    pub update: String,
    pub scoring: String,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            version: include_str!("../templates/v1/VERSION").trim().to_string(),
            instruction: include_str!("../templates/v1/instruction.txt").to_string(),
            summarization: include_str!("../templates/v1/summarization.txt").to_string(),
            update: include_str!("../templates/v1/update.txt").to_string(),
            scoring: include_str!("../templates/v1/scoring.txt").to_string(),
        }
    }

    /// Loads `instruction.txt`, `summarization.txt`, `update.txt`,
    /// `scoring.txt` and an optional `VERSION` file from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| PromptError::Template(format!("{}: {e}", dir.join(name).display())))
        };
        Ok(Self {
            version: read("VERSION")
                .map(|v| v.trim().to_string())
                .unwrap_or_else(|_| dir.display().to_string()),
            instruction: read("instruction.txt")?,
            summarization: read("summarization.txt")?,
            update: read("update.txt")?,
            scoring: read("scoring.txt")?,
        })
    }
}

/// Substitutes `{{name}}` placeholders in one pass. Unknown placeholders are
/// an error; substituted values are not re-scanned.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| PromptError::Template("unterminated placeholder".into()))?;
        let name = after[..end].trim();
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| PromptError::Template(format!("unknown placeholder {{{{{name}}}}}")))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte ranges of whole-word, case-insensitive occurrences of `label`.
fn label_matches(text: &str, label: &str) -> Vec<(usize, usize)> {
    if label.trim().is_empty() {
        return Vec::new();
    }
    let re = regex::Regex::new(&format!("(?i){}", regex::escape(label))).expect("escaped pattern");
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(m) = re.find_at(text, pos) {
        let before = text[..m.start()].chars().next_back();
        let after = text[m.end()..].chars().next();
        let first = m.as_str().chars().next();
        let last = m.as_str().chars().next_back();
        // Boundaries only matter where the label itself starts or ends with a word character.
        let left_ok = !(first.is_some_and(is_word_char) && before.is_some_and(is_word_char));
        let right_ok = !(last.is_some_and(is_word_char) && after.is_some_and(is_word_char));
        if left_ok && right_ok {
            out.push((m.start(), m.end()));
            pos = m.end();
        } else {
            pos = m.start() + m.as_str().chars().next().map_or(1, char::len_utf8);
        }
        if pos > text.len() {
            break;
        }
    }
    out
}

pub fn count_label(text: &str, label: &str) -> usize {
    label_matches(text, label).len()
}

pub fn contains_label(text: &str, label: &str) -> bool {
    !label_matches(text, label).is_empty()
}

/// Replaces every whole-word occurrence of `label` with [`MASK_TOKEN`].
pub fn redact(text: &str, label: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (s, e) in label_matches(text, label) {
        out.push_str(&text[last..s]);
        out.push_str(MASK_TOKEN);
        last = e;
    }
    out.push_str(&text[last..]);
    out
}

/// A rollout paired with its total reward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredText<'a> {
    pub text: &'a str,
    pub score: u32,
}

#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub templates: TemplateSet,
    /// Hard limit on rendered prompt length, in characters.
    pub max_chars: usize,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self::new(TemplateSet::builtin())
    }
}

impl PromptBuilder {
    pub const DEFAULT_MAX_CHARS: usize = 200_000;

    pub fn new(templates: TemplateSet) -> Self {
        Self {
            templates,
            max_chars: Self::DEFAULT_MAX_CHARS,
        }
    }

    fn check_len(&self, text: &str) -> Result<()> {
        let len = text.chars().count();
        if len > self.max_chars {
            return Err(PromptError::TooLong {
                len,
                max: self.max_chars,
            });
        }
        Ok(())
    }

    pub fn instruction(&self, task: &TaskSpec) -> Result<String> {
        let template = task.instruction.as_deref().unwrap_or(&self.templates.instruction);
        let classes = task.class_names.join(", ");
        render_template(template, &[("task", &task.name), ("classes", &classes)])
    }

    /// Query visual, exemplars in the given (descending-similarity) order,
    /// the bank's heuristics verbatim when the bank is non-empty, then the
    /// answer instruction.
    pub fn build_inference_prompt(
        &self,
        query_id: &str,
        query_image: Option<&str>,
        exemplars: &[Exemplar],
        bank: Option<&ExperienceBank>,
        task: &TaskSpec,
    ) -> Result<MultimodalPrompt> {
        let image_ref = query_image.ok_or_else(|| PromptError::MissingImageRef(query_id.to_string()))?;
        let mut segments = vec![Segment::VisualQuery {
            image_ref: image_ref.to_string(),
        }];
        for (rank, ex) in exemplars.iter().enumerate() {
            let image_ref = ex
                .image_ref
                .clone()
                .ok_or_else(|| PromptError::MissingImageRef(ex.id.clone()))?;
            if ex.class >= task.num_classes() {
                return Err(PromptError::InvalidTask(format!("exemplar class {} has no name", ex.class)));
            }
            segments.push(Segment::VisualExemplar {
                image_ref,
                label: task.class_name(ex.class).to_string(),
                rank: rank + 1,
                similarity: ex.similarity,
            });
        }
        if let Some(bank) = bank.filter(|b| !b.is_empty()) {
            segments.push(Segment::HeuristicsBlock {
                texts: bank.texts().into_iter().map(String::from).collect(),
            });
        }
        segments.push(Segment::Instruction {
            text: self.instruction(task)?,
        });
        let prompt = MultimodalPrompt::new(segments)?;
        self.check_len(&prompt.render())?;
        Ok(prompt)
    }

    /// Contrastive summarization prompt over a scored group. The ground
    /// truth is redacted from every rollout and asserted absent.
    pub fn build_summarization_prompt(
        &self,
        rollouts: &[ScoredText<'_>],
        max_score: u32,
        ground_truth: &str,
    ) -> Result<String> {
        if rollouts.len() < 2 || rollouts.iter().all(|r| r.score == rollouts[0].score) {
            return Err(PromptError::DegenerateGroup);
        }
        let body = rollouts
            .iter()
            .enumerate()
            .map(|(g, r)| {
                format!(
                    "--- Path {} (score {}/{}) ---\n{}",
                    g + 1,
                    r.score,
                    max_score,
                    redact(r.text.trim(), ground_truth)
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let prompt = render_template(
            &self.templates.summarization,
            &[
                ("count", &rollouts.len().to_string()),
                ("max_score", &max_score.to_string()),
                ("rollouts", &body),
            ],
        )?;
        assert_masked(&prompt, ground_truth)?;
        self.check_len(&prompt)?;
        Ok(prompt)
    }

    /// Bank-update decision prompt. When `masked_label` is given it is
    /// redacted from the listed rules and the candidate.
    pub fn build_update_prompt(
        &self,
        bank: &ExperienceBank,
        candidate: &str,
        masked_label: Option<&str>,
        forbid_add: bool,
    ) -> Result<String> {
        let mask = |t: &str| match masked_label {
            Some(l) => redact(t, l),
            None => t.to_string(),
        };
        let entries = if bank.is_empty() {
            "(none)".to_string()
        } else {
            bank.entries
                .iter()
                .map(|h| format!("[{}] {}", h.id, mask(&h.text)))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let add_rule = if forbid_add || bank.is_full() {
            "The bank has no free slot: Add is NOT allowed. Choose Delete, Keep or Modify."
        } else {
            "Add is allowed while slots remain."
        };
        let prompt = render_template(
            &self.templates.update,
            &[
                ("capacity", &bank.capacity.to_string()),
                ("size", &bank.len().to_string()),
                ("remaining", &bank.remaining().to_string()),
                ("entries", &entries),
                ("candidate", &mask(candidate)),
                ("add_rule", add_rule),
            ],
        )?;
        if let Some(l) = masked_label {
            assert_masked(&prompt, l)?;
        }
        self.check_len(&prompt)?;
        Ok(prompt)
    }

    /// Evaluator prompt; the only prompt allowed to show the ground truth.
    pub fn build_scoring_prompt(
        &self,
        rollout: &str,
        context: &str,
        ground_truth: &str,
        criteria: &[String],
    ) -> Result<String> {
        if criteria.is_empty() {
            return Err(PromptError::NoCriteria);
        }
        let format = (1..=criteria.len())
            .map(|i| format!("c{i}"))
            .collect::<Vec<_>>()
            .join(",");
        let prompt = render_template(
            &self.templates.scoring,
            &[
                ("context", context.trim_end()),
                ("ground_truth", ground_truth),
                ("rollout", rollout.trim()),
                ("criteria", &criteria.join(", ")),
                ("num_criteria", &criteria.len().to_string()),
                ("score_format", &format),
            ],
        )?;
        self.check_len(&prompt)?;
        Ok(prompt)
    }
}

fn assert_masked(prompt: &str, label: &str) -> Result<()> {
    if contains_label(prompt, label) {
        return Err(PromptError::MaskViolation(label.to_string()));
    }
    Ok(())
}
