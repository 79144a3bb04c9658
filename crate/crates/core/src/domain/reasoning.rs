use serde::{Deserialize, Serialize};

/// Parsed chain-of-thought output: ordered steps followed by the final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    /// Verbatim model output.
    pub raw: String,
    pub steps: Vec<String>,
    pub final_answer: String,
    #[serde(default)]
    pub profile_deltas: Vec<(String, String)>,
}

impl ReasoningTrace {
    /// Number of reasoning steps.
    pub fn k(&self) -> usize {
        self.steps.len()
    }

    /// Generation slots in order: the steps, then the answer. Always `k + 1` long.
    pub fn z_slots(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(String::as_str).chain(std::iter::once(self.final_answer.as_str()))
    }
}

/// Inputs the reasoning model is conditioned on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub system_preamble: String,
    pub profile_block: String,
    pub retrieved_block: Vec<String>,
    pub user_query: String,
}

impl PromptContext {
    /// Body sent as the user message: PROFILE, CONTEXT and QUERY sections.
    pub fn render_body(&self) -> String {
        let mut out = String::new();
        out.push_str("PROFILE:\n");
        out.push_str(&self.profile_block);
        if !self.profile_block.is_empty() && !self.profile_block.ends_with('\n') {
            out.push('\n');
        }
        out.push_str("\nCONTEXT:\n");
        for line in &self.retrieved_block {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str("\nQUERY:\n");
        out.push_str(&self.user_query);
        out.push('\n');
        out
    }

    /// Full prompt text: preamble followed by the body.
    pub fn render(&self) -> String {
        format!("{}\n\n{}", self.system_preamble.trim_end(), self.render_body())
    }
}
