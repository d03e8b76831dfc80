//! Knowledge-editing prompt rendering.
//!
//! The default template is
//!
//! ```text
//! [Updated Information] {statement}
//! [Query] {query}
//! ```
//!
//! Several statements share one `[Updated Information]` block, one per line,
//! in the order given. With no statements the query is returned unchanged.

use serde::{Deserialize, Serialize};

pub const DEFAULT_INFO_PREFIX: &str = "[Updated Information] ";
pub const DEFAULT_QUERY_PREFIX: &str = "[Query] ";

/// How multiple statements are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockLayout {
    /// One block, statements separated by newlines.
    #[default]
    Stacked,
    /// One `[Updated Information]` line per statement.
    Repeated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub info_prefix: String,
    pub query_prefix: String,
    pub layout: BlockLayout,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            info_prefix: DEFAULT_INFO_PREFIX.into(),
            query_prefix: DEFAULT_QUERY_PREFIX.into(),
            layout: BlockLayout::Stacked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub updated_information: Vec<String>,
    pub query: String,
    pub rendered: String,
}

impl PromptTemplate {
    /// Marker whose presence identifies a prompt carrying updated information.
    pub fn info_marker(&self) -> &str {
        self.info_prefix.trim_end()
    }

    pub fn render(&self, updated_information: &[String], query: &str) -> PromptBundle {
        let rendered = self.render_str(updated_information, query);
        PromptBundle {
            updated_information: updated_information.to_vec(),
            query: query.to_string(),
            rendered,
        }
    }

    pub fn render_str<S: AsRef<str>>(&self, updated_information: &[S], query: &str) -> String {
        if updated_information.is_empty() {
            return query.to_string();
        }
        let mut out = String::new();
        match self.layout {
            BlockLayout::Stacked => {
                out.push_str(&self.info_prefix);
                for (i, s) in updated_information.iter().enumerate() {
                    if i > 0 {
                        out.push('\n');
                    }
                    out.push_str(s.as_ref());
                }
                out.push('\n');
            }
            BlockLayout::Repeated => {
                for s in updated_information {
                    out.push_str(&self.info_prefix);
                    out.push_str(s.as_ref());
                    out.push('\n');
                }
            }
        }
        out.push_str(&self.query_prefix);
        out.push_str(query);
        out
    }

    /// Splits a rendered prompt back into (information block, query). Plain
    /// prompts yield `None` for the block and the whole text as the query.
    pub fn split<'a>(&self, rendered: &'a str) -> (Option<&'a str>, &'a str) {
        if !rendered.contains(self.info_marker()) {
            return (None, rendered);
        }
        let sep = format!("\n{}", self.query_prefix);
        match rendered.rfind(&sep) {
            Some(pos) => (Some(&rendered[..pos]), &rendered[pos + sep.len()..]),
            None => (Some(rendered), ""),
        }
    }
}

/// Renders with the default template.
pub fn render(updated_information: &[String], query: &str) -> PromptBundle {
    PromptTemplate::default().render(updated_information, query)
}
