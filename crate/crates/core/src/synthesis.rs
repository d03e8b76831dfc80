//! Template-driven synthesis of missing query cases through any generation
//! backend.
//!
//! Templates are supplied by the user. Placeholders `{statement}`,
//! `{subject}`, `{edit_input}`, `{edit_target}` and (in the answer and check
//! templates) `{question}` / `{answer}` are substituted before each call.
//! Nothing is generated without a backend and templates.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, GenerationRequest};
use crate::corpus::{BenchmarkRecord, CaseCategory, QueryCase, Scope};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisTemplates {
    pub question: String,
    pub answer: String,
    /// Verification prompt; the case is kept only when the reply contains
    /// `accept_token` (case-insensitive).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<String>,
    #[serde(default = "default_accept")]
    pub accept_token: String,
}

fn default_accept() -> String {
    "yes".into()
}

fn fill(template: &str, record: &BenchmarkRecord, question: &str, answer: &str) -> String {
    let d = &record.descriptor;
    template
        .replace("{statement}", &d.statement)
        .replace("{subject}", d.subject.as_deref().unwrap_or(""))
        .replace("{edit_input}", &d.edit_input)
        .replace("{edit_target}", &d.edit_target)
        .replace("{question}", question)
        .replace("{answer}", answer)
}

pub struct SynthesisClient<B> {
    backend: B,
    templates: SynthesisTemplates,
}

impl<B: Backend> SynthesisClient<B> {
    pub fn new(backend: B, templates: SynthesisTemplates) -> Self {
        Self { backend, templates }
    }

    fn ask(&self, prompt: String) -> Result<String, BackendError> {
        Ok(self
            .backend
            .generate(&GenerationRequest::new(prompt))?
            .text
            .trim()
            .to_string())
    }

    /// Generates one query case for `record`. Returns `None` when the
    /// backend produced an empty question/answer or the check rejected it.
    pub fn synthesize(
        &self,
        record: &BenchmarkRecord,
        scope: Scope,
        category: CaseCategory,
    ) -> Result<Option<QueryCase>, BackendError> {
        let question = self.ask(fill(&self.templates.question, record, "", ""))?;
        if question.is_empty() {
            return Ok(None);
        }
        let answer = self.ask(fill(&self.templates.answer, record, &question, ""))?;
        if answer.is_empty() {
            return Ok(None);
        }
        if let Some(check) = &self.templates.check {
            let verdict = self.ask(fill(check, record, &question, &answer))?;
            if !verdict
                .to_lowercase()
                .contains(&self.templates.accept_token.to_lowercase())
            {
                return Ok(None);
            }
        }
        let case = QueryCase {
            prompt: crate::corpus::fold_newlines(&question),
            gold_answer: Some(answer),
            scope,
            category,
        };
        Ok(Some(case))
    }

    /// Adds one synthesized out-of-scope case to every record lacking one.
    /// Returns how many records gained a case.
    pub fn fill_out_of_scope(
        &self,
        records: &mut [BenchmarkRecord],
    ) -> Result<usize, BackendError> {
        let mut added = 0;
        for record in records.iter_mut() {
            if record.out_of_scope_cases().next().is_some() {
                continue;
            }
            if let Some(case) =
                self.synthesize(record, Scope::OutOfScope, CaseCategory::FreeText)?
            {
                if record
                    .cases
                    .iter()
                    .any(|c| c.prompt == case.prompt && c.scope == case.scope)
                {
                    continue;
                }
                record.cases.push(case);
                added += 1;
            }
        }
        Ok(added)
    }
}
