//! Reasoning-trace parsing.
//!
//! A reasoning model answers as
//!
//! ```text
//! <think>
//! step one
//! PROFILE_UPDATE: emotion=frustrated
//! step two
//! </think>
//! final answer
//! ```
//!
//! Non-empty lines inside the think region are steps, except directive lines
//! which become profile deltas. Text after the closing tag is the answer.
//! Output with no think region is taken whole as the answer.

use crate::domain::ReasoningTrace;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const PROFILE_UPDATE_PREFIX: &str = "PROFILE_UPDATE:";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("model output is empty")]
    EmptyInput,
    #[error("model output has no final answer after the reasoning region")]
    EmptyAnswer,
}

/// Delimiter strings; configurable per deployment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceSyntax {
    pub open: String,
    pub close: String,
    pub directive: String,
}

impl Default for TraceSyntax {
    fn default() -> Self {
        Self { open: THINK_OPEN.into(), close: THINK_CLOSE.into(), directive: PROFILE_UPDATE_PREFIX.into() }
    }
}

impl TraceSyntax {
    /// Splits raw model output into steps, profile deltas and final answer.
    pub fn parse(&self, raw: &str) -> Result<ReasoningTrace, TraceError> {
        if raw.trim().is_empty() {
            return Err(TraceError::EmptyInput);
        }
        let close_at = raw.find(&self.close);
        let open_at = raw.find(&self.open).filter(|o| close_at.is_none_or(|c| *o < c));

        let (region, answer) = match (open_at, close_at) {
            (Some(o), Some(c)) => (Some(&raw[o + self.open.len()..c]), &raw[c + self.close.len()..]),
            // Some distilled reasoning models omit the opening tag.
            (None, Some(c)) => (Some(&raw[..c]), &raw[c + self.close.len()..]),
            // Opened but never closed: generation stopped mid-thought.
            (Some(_), None) => return Err(TraceError::EmptyAnswer),
            (None, None) => (None, raw),
        };

        let final_answer = self.scrub(answer).trim().to_string();
        if final_answer.is_empty() {
            return Err(TraceError::EmptyAnswer);
        }

        let mut steps = Vec::new();
        let mut profile_deltas = Vec::new();
        for line in region.unwrap_or("").lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match self.directive(line) {
                Some(delta) => profile_deltas.push(delta),
                None => steps.push(line.to_string()),
            }
        }

        Ok(ReasoningTrace { raw: raw.to_string(), steps, final_answer, profile_deltas })
    }

    /// Canonical text form: think region with steps then directives, then the answer.
    /// A trace with neither steps nor deltas serializes to the bare answer.
    pub fn serialize(&self, trace: &ReasoningTrace) -> String {
        if trace.steps.is_empty() && trace.profile_deltas.is_empty() {
            return trace.final_answer.clone();
        }
        let mut out = String::new();
        out.push_str(&self.open);
        out.push('\n');
        for step in &trace.steps {
            out.push_str(step);
            out.push('\n');
        }
        for (field, value) in &trace.profile_deltas {
            out.push_str(&format!("{} {}={}\n", self.directive, field, value));
        }
        out.push_str(&self.close);
        out.push('\n');
        out.push_str(&trace.final_answer);
        out
    }

    fn directive(&self, line: &str) -> Option<(String, String)> {
        let body = line.strip_prefix(&self.directive)?;
        let (field, value) = body.split_once('=')?;
        Some((field.trim().to_string(), value.trim().to_string()))
    }

    fn scrub(&self, text: &str) -> String {
        let mut out = text.to_string();
        // removal can splice a new delimiter together ("<thi<think>nk>")
        while out.contains(&self.open) || out.contains(&self.close) {
            out = out.replace(&self.open, "").replace(&self.close, "");
        }
        out
    }
}

/// [`TraceSyntax::parse`] with the default delimiters.
pub fn parse_trace(raw: &str) -> Result<ReasoningTrace, TraceError> {
    TraceSyntax::default().parse(raw)
}

/// [`TraceSyntax::serialize`] with the default delimiters.
pub fn serialize_trace(trace: &ReasoningTrace) -> String {
    TraceSyntax::default().serialize(trace)
}
