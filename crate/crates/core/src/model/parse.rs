//! Parsers that turn model text into labels, scores and bank actions.
//!
//! Answer grammar (`parse_answer`), tried in order:
//!
//! | input                                   | result |
//! |-----------------------------------------|--------|
//! | last line `ANSWER: <x>`, `<x>` equals a class name (case-insensitive; surrounding quotes, `*` and a trailing `.` ignored) | that class |
//! | last line `ANSWER: <x>`, anything else (`maybe melanoma or nevus`, empty) | `Unparseable` |
//! | no `ANSWER:` line, final non-empty line names exactly one class as a whole word | that class |
//! | no `ANSWER:` line, zero or several classes named | `Unparseable` |
//!
//! When class names overlap (`nevus` inside `blue nevus`) the longer match
//! wins in the fallback.
//!
//! Score grammar: last line `SCORES: v1,...,vn` with exactly `n = |criteria|`
//! comma-separated numbers, each `0` or `1`. Wrong arity or non-numbers are
//! `Unparseable`; numbers other than 0/1 are `OutOfRange`.
//!
//! Action grammar: last line starting `ACTION:` followed by one of `Add`,
//! `Keep`, `Delete(<id>)`, `Modify(<id>)` (case-insensitive keyword). A
//! `TEXT: <rule>` may follow on the same line or on a later line; for `Add`
//! and `Modify` it supplies the stored text and defaults to the candidate.
//!
//! | input                                   | result |
//! |-----------------------------------------|--------|
//! | `ACTION: Keep`                          | Keep |
//! | `ACTION: Add` (bank not full)           | Add(candidate text) |
//! | `ACTION: Add` (bank full)               | `AddWhenFull` |
//! | `ACTION: Modify(h3) TEXT: refined rule` | Modify(h3, "refined rule") |
//! | `ACTION: Delete(h9)`, no `h9` in bank   | `UnknownTarget` |
//! | `ACTION: Replace(h1)`                   | `Unparseable` |

use std::sync::OnceLock;

use regex::Regex;

use crate::bank::{ExperienceBank, UpdateAction};
use crate::prompt::TaskSpec;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("unparseable model output: {0:?}")]
    Unparseable(String),
    #[error("score value {0} is outside {{0, 1}}")]
    OutOfRange(String),
    #[error("action targets unknown heuristic {0:?}")]
    UnknownTarget(String),
    #[error("Add requested but the bank is full")]
    AddWhenFull,
}

fn excerpt(text: &str) -> String {
    let t: String = text.chars().take(120).collect();
    if t.len() < text.len() {
        format!("{t}...")
    } else {
        t
    }
}

/// Returns the remainder of the last line starting with `keyword:` (case-insensitive).
fn last_tagged_line<'a>(text: &'a str, keyword: &str) -> Option<(usize, &'a str)> {
    let lines: Vec<&str> = text.lines().collect();
    lines.iter().enumerate().rev().find_map(|(i, line)| {
        let l = line.trim().trim_start_matches(['*', '#', '>', ' ']);
        let head = l.get(..keyword.len() + 1)?;
        if head.eq_ignore_ascii_case(&format!("{keyword}:")) {
            Some((i, l[keyword.len() + 1..].trim()))
        } else {
            None
        }
    })
}

fn clean_answer(s: &str) -> &str {
    s.trim()
        .trim_matches(|c: char| c == '*' || c == '"' || c == '\'' || c == '`')
        .trim()
        .trim_end_matches('.')
        .trim()
}

pub fn parse_answer(text: &str, task: &TaskSpec) -> Result<usize, ParseError> {
    if let Some((_, rest)) = last_tagged_line(text, "ANSWER") {
        let x = clean_answer(rest);
        return task
            .class_names
            .iter()
            .position(|c| c.eq_ignore_ascii_case(x))
            .ok_or_else(|| ParseError::Unparseable(excerpt(text)));
    }
    let last = text
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| ParseError::Unparseable(excerpt(text)))?;
    let mut hits: Vec<(usize, usize, usize)> = Vec::new();
    for (class, name) in task.class_names.iter().enumerate() {
        let pat = format!(r"(?i)(^|[^\w]){}($|[^\w])", regex::escape(name));
        let re = Regex::new(&pat).expect("escaped pattern");
        for m in re.captures_iter(last) {
            let whole = m.get(0).unwrap();
            let start = whole.start() + m.get(1).map_or(0, |g| g.len());
            let end = whole.end() - m.get(2).map_or(0, |g| g.len());
            hits.push((start, end, class));
        }
    }
    let maximal: Vec<usize> = hits
        .iter()
        .filter(|&&(s, e, _)| {
            !hits
                .iter()
                .any(|&(s2, e2, _)| s2 <= s && e <= e2 && (e2 - s2) > (e - s))
        })
        .map(|&(_, _, c)| c)
        .collect();
    let mut distinct = maximal.clone();
    distinct.sort_unstable();
    distinct.dedup();
    match distinct.as_slice() {
        [c] => Ok(*c),
        _ => Err(ParseError::Unparseable(excerpt(text))),
    }
}

pub fn parse_scores(text: &str, num_criteria: usize) -> Result<Vec<u8>, ParseError> {
    let (_, rest) = last_tagged_line(text, "SCORES").ok_or_else(|| ParseError::Unparseable(excerpt(text)))?;
    let fields: Vec<&str> = rest.split(',').map(str::trim).collect();
    if fields.len() != num_criteria || fields.iter().any(|f| f.is_empty()) {
        return Err(ParseError::Unparseable(excerpt(text)));
    }
    fields
        .into_iter()
        .map(|f| {
            let v: f64 = f.parse().map_err(|_| ParseError::Unparseable(excerpt(text)))?;
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(ParseError::OutOfRange(f.to_string()))
            }
        })
        .collect()
}

pub fn render_scores(scores: &[u8]) -> String {
    let vals: Vec<String> = scores.iter().map(u8::to_string).collect();
    format!("SCORES: {}", vals.join(","))
}

fn action_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^(add|keep|delete|modify)\s*(?:\(\s*([^)\s]+)\s*\))?$").expect("valid regex")
    })
}

fn split_text(s: &str) -> (&str, Option<&str>) {
    let lower = s.to_ascii_lowercase();
    match lower.find("text:") {
        Some(i) => (s[..i].trim(), Some(s[i + 5..].trim())),
        None => (s.trim(), None),
    }
}

pub fn parse_action(text: &str, bank: &ExperienceBank, candidate: &str) -> Result<UpdateAction, ParseError> {
    let unparseable = || ParseError::Unparseable(excerpt(text));
    let (line_idx, rest) = last_tagged_line(text, "ACTION").ok_or_else(unparseable)?;
    let (token, inline_text) = split_text(rest);
    let body = match inline_text {
        Some(t) => Some(t.to_string()),
        None => last_tagged_line(text, "TEXT")
            .filter(|(i, _)| *i > line_idx)
            .map(|(i, first)| {
                let tail: Vec<&str> = text.lines().skip(i + 1).collect();
                let mut s = first.to_string();
                if !tail.is_empty() {
                    s.push('\n');
                    s.push_str(&tail.join("\n"));
                }
                s.trim().to_string()
            }),
    }
    .filter(|t| !t.is_empty());

    let caps = action_re().captures(token.trim_end_matches('.')).ok_or_else(unparseable)?;
    let kind = caps[1].to_ascii_lowercase();
    let target = caps.get(2).map(|m| m.as_str().to_string());
    let new_text = || body.clone().unwrap_or_else(|| candidate.to_string());
    let check_target = |id: &Option<String>| -> Result<String, ParseError> {
        let id = id.clone().ok_or_else(unparseable)?;
        if bank.get(&id).is_none() {
            return Err(ParseError::UnknownTarget(id));
        }
        Ok(id)
    };
    match kind.as_str() {
        "keep" if target.is_none() => Ok(UpdateAction::Keep),
        "add" if target.is_none() => {
            if bank.is_full() {
                return Err(ParseError::AddWhenFull);
            }
            Ok(UpdateAction::Add { new_text: new_text() })
        }
        "delete" => Ok(UpdateAction::Delete {
            target_id: check_target(&target)?,
        }),
        "modify" => Ok(UpdateAction::Modify {
            target_id: check_target(&target)?,
            new_text: new_text(),
        }),
        _ => Err(unparseable()),
    }
}
