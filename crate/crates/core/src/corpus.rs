//! Benchmark ingestion and normalization.
//!
//! Knowledge-editing test sets (ZsRE, WikiBio, WikiData-recent and
//! WikiData-counterfact in KnowEdit layout) are loaded into one internal
//! schema: a [`BenchmarkRecord`] per edit, holding the edit descriptor and
//! every query case attached to it.
//!
//! Two line formats are accepted:
//!
//! * `knowedit` - the KnowEdit JSON fields (`prompt`, `target_new`,
//!   `ground_truth`, `rephrase`/`rephrase_prompt`, `portability`,
//!   `locality`, optional `subject`).
//! * `native` - a superset of the above which may also carry `id`,
//!   `statement`, an explicit `cases` list and a `metadata` object. This is
//!   what [`export_native`] writes.
//!
//! Fields that neither format recognizes are kept verbatim in
//! [`BenchmarkRecord::metadata`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: invalid field `{field}`: {message}")]
    Field {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate record id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("unknown benchmark format `{0}` (expected `knowedit` or `native`)")]
    UnknownFormat(String),
}

/// Input line layout of a benchmark file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkFormat {
    KnowEditJsonl,
    NativeJsonl,
}

impl BenchmarkFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkFormat::KnowEditJsonl => "knowedit",
            BenchmarkFormat::NativeJsonl => "native",
        }
    }
}

impl FromStr for BenchmarkFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knowedit" | "knowedit_jsonl" => Ok(BenchmarkFormat::KnowEditJsonl),
            "native" | "native_jsonl" => Ok(BenchmarkFormat::NativeJsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for BenchmarkFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One unit of updated knowledge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditDescriptor {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    /// The input that triggers the edited knowledge, e.g. a cloze prompt.
    pub edit_input: String,
    /// The desired post-edit answer for `edit_input`.
    pub edit_target: String,
    /// Natural-language statement of the edit, used as Updated Information.
    pub statement: String,
}

impl EditDescriptor {
    /// Builds a descriptor, deriving the statement from the edit pair when
    /// none is given. Newlines inside the statement are folded to spaces.
    pub fn new(
        id: impl Into<String>,
        edit_input: impl Into<String>,
        edit_target: impl Into<String>,
        statement: Option<String>,
    ) -> Self {
        let edit_input = edit_input.into();
        let edit_target = edit_target.into();
        let statement = match statement {
            Some(s) if !s.trim().is_empty() => s,
            _ => format!("{edit_input} {edit_target}"),
        };
        Self {
            id: id.into(),
            subject: None,
            edit_input,
            edit_target,
            statement: fold_newlines(&statement),
        }
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self
    }

    /// Returns the name of the first field that violates the descriptor
    /// invariants, if any.
    pub fn invalid_field(&self) -> Option<&'static str> {
        if self.edit_input.trim().is_empty() {
            Some("edit_input")
        } else if self.edit_target.trim().is_empty() {
            Some("edit_target")
        } else if self.statement.trim().is_empty() {
            Some("statement")
        } else {
            None
        }
    }
}

/// Replaces every line break (and the CR of CRLF pairs) with a single space.
pub fn fold_newlines(s: &str) -> String {
    if !s.contains(['\n', '\r']) {
        return s.to_string();
    }
    s.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    InScope,
    OutOfScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseCategory {
    Reliability,
    Paraphrase,
    SubjectAlias,
    Compositional,
    OneToMany,
    UnrelatedAttribute,
    FreeText,
    Other,
}

impl CaseCategory {
    /// The scope this category is pinned to, or `None` when it may appear in
    /// either scope.
    pub fn required_scope(self) -> Option<Scope> {
        match self {
            CaseCategory::Reliability
            | CaseCategory::Paraphrase
            | CaseCategory::SubjectAlias
            | CaseCategory::Compositional => Some(Scope::InScope),
            CaseCategory::OneToMany | CaseCategory::UnrelatedAttribute => Some(Scope::OutOfScope),
            CaseCategory::FreeText | CaseCategory::Other => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCase {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    pub scope: Scope,
    pub category: CaseCategory,
}

impl QueryCase {
    pub fn in_scope(
        prompt: impl Into<String>,
        gold: impl Into<String>,
        category: CaseCategory,
    ) -> Self {
        Self {
            prompt: prompt.into(),
            gold_answer: Some(gold.into()),
            scope: Scope::InScope,
            category,
        }
    }

    pub fn out_of_scope(
        prompt: impl Into<String>,
        gold: Option<String>,
        category: CaseCategory,
    ) -> Self {
        Self {
            prompt: prompt.into(),
            gold_answer: gold,
            scope: Scope::OutOfScope,
            category,
        }
    }

    fn invalid(&self) -> Option<(&'static str, String)> {
        if self.prompt.trim().is_empty() {
            return Some(("prompt", "query prompt is empty".into()));
        }
        if self.scope == Scope::InScope
            && self
                .gold_answer
                .as_deref()
                .is_none_or(|g| g.trim().is_empty())
        {
            return Some(("gold_answer", "in-scope case requires a gold answer".into()));
        }
        if let Some(required) = self.category.required_scope() {
            if required != self.scope {
                return Some((
                    "scope",
                    format!("category {:?} requires scope {:?}", self.category, required),
                ));
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub descriptor: EditDescriptor,
    /// Pre-edit answer for `descriptor.edit_input`, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_answer: Option<String>,
    pub cases: Vec<QueryCase>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, Value>,
}

impl BenchmarkRecord {
    /// Creates a record holding only the reliability case.
    pub fn new(descriptor: EditDescriptor) -> Self {
        let reliability = QueryCase::in_scope(
            descriptor.edit_input.clone(),
            descriptor.edit_target.clone(),
            CaseCategory::Reliability,
        );
        Self {
            descriptor,
            original_answer: None,
            cases: vec![reliability],
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_original_answer(mut self, answer: impl Into<String>) -> Self {
        self.original_answer = Some(answer.into());
        self
    }

    pub fn with_case(mut self, case: QueryCase) -> Self {
        self.cases.push(case);
        self
    }

    pub fn in_scope_cases(&self) -> impl Iterator<Item = &QueryCase> {
        self.cases.iter().filter(|c| c.scope == Scope::InScope)
    }

    pub fn out_of_scope_cases(&self) -> impl Iterator<Item = &QueryCase> {
        self.cases.iter().filter(|c| c.scope == Scope::OutOfScope)
    }

    /// The reliability case (prompt = edit input, gold = edit target).
    pub fn reliability_case(&self) -> Option<&QueryCase> {
        self.cases
            .iter()
            .find(|c| c.category == CaseCategory::Reliability)
    }

    /// Checks every record invariant, returning the offending field and a
    /// message on the first violation.
    pub fn check(&self) -> Result<(), (String, String)> {
        if let Some(field) = self.descriptor.invalid_field() {
            return Err((field.to_string(), format!("{field} is empty")));
        }
        if self.descriptor.statement.contains(['\n', '\r']) {
            return Err(("statement".into(), "statement contains a line break".into()));
        }
        let mut seen = HashSet::new();
        let mut reliability = 0;
        for case in &self.cases {
            if let Some((field, message)) = case.invalid() {
                return Err((format!("cases.{field}"), message));
            }
            if !seen.insert((case.prompt.as_str(), case.scope)) {
                return Err((
                    "cases.prompt".into(),
                    format!("duplicate {:?} case prompt `{}`", case.scope, case.prompt),
                ));
            }
            if case.category == CaseCategory::Reliability {
                reliability += 1;
                if case.prompt != self.descriptor.edit_input
                    || case.gold_answer.as_deref() != Some(self.descriptor.edit_target.as_str())
                {
                    return Err((
                        "cases.reliability".into(),
                        "reliability case must equal (edit_input, edit_target)".into(),
                    ));
                }
            }
        }
        if reliability != 1 {
            return Err((
                "cases.reliability".into(),
                format!("expected exactly one reliability case, found {reliability}"),
            ));
        }
        Ok(())
    }
}

/// An ordered list of records loaded from one file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub records: Vec<BenchmarkRecord>,
}

impl Benchmark {
    pub fn new(name: impl Into<String>, records: Vec<BenchmarkRecord>) -> Self {
        Self {
            name: name.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The first `n` records as a new benchmark with the same name.
    pub fn truncated(&self, n: usize) -> Benchmark {
        Benchmark {
            name: self.name.clone(),
            records: self.records.iter().take(n).cloned().collect(),
        }
    }
}

/// Loads a benchmark file. The benchmark is named after the file stem.
pub fn load_benchmark(path: &Path, format: BenchmarkFormat) -> Result<Benchmark, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_benchmark(&name, &text, format)
}

/// Parses JSONL benchmark text. Blank lines are ignored; line numbers in
/// errors are 1-based.
pub fn parse_benchmark(
    name: &str,
    text: &str,
    format: BenchmarkFormat,
) -> Result<Benchmark, CorpusError> {
    let mut records = Vec::new();
    let mut id_lines: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| CorpusError::Json {
            line,
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(CorpusError::Json {
                line,
                message: "expected a JSON object".into(),
            });
        };
        let record = parse_record(obj, line, format)?;
        record
            .check()
            .map_err(|(field, message)| CorpusError::Field {
                line,
                field,
                message,
            })?;
        if let Some(&first_line) = id_lines.get(&record.descriptor.id) {
            return Err(CorpusError::DuplicateId {
                id: record.descriptor.id.clone(),
                first_line,
                second_line: line,
            });
        }
        id_lines.insert(record.descriptor.id.clone(), line);
        records.push(record);
    }
    Ok(Benchmark::new(name, records))
}

fn field_err(line: usize, field: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::Field {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn take_string(
    obj: &mut Map<String, Value>,
    key: &str,
    line: usize,
) -> Result<Option<String>, CorpusError> {
    match obj.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => first_string(&v)
            .map(Some)
            .ok_or_else(|| field_err(line, key, "expected a string or a list of strings")),
    }
}

/// KnowEdit stores answers as a string, a list of strings or a list of
/// alias lists; the first string found is taken.
fn first_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => items.iter().find_map(first_string),
        _ => None,
    }
}

fn all_strings(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::String(s) => Some(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::String(s) => Some(s.clone()),
                _ => None,
            })
            .collect(),
        _ => None,
    }
}

fn portability_category(key: &str) -> CaseCategory {
    let k = key.to_ascii_lowercase();
    if k.contains("alias") {
        CaseCategory::SubjectAlias
    } else if k.contains("reason")
        || k.contains("compos")
        || k.contains("logical")
        || k.contains("multi")
    {
        CaseCategory::Compositional
    } else {
        CaseCategory::Other
    }
}

fn locality_category(key: &str) -> CaseCategory {
    let k = key.to_ascii_lowercase();
    if k.contains("relation") || k.contains("specific") || k.contains("unrelated") {
        CaseCategory::UnrelatedAttribute
    } else if k.contains("forget") || k.contains("one_to_many") {
        CaseCategory::OneToMany
    } else {
        CaseCategory::Other
    }
}

/// Reads a KnowEdit `portability`/`locality` value: either a list of
/// `{prompt, ground_truth}` objects or a map from sub-category to such lists.
fn parse_case_group(
    value: Value,
    field: &str,
    line: usize,
    scope: Scope,
    categorize: fn(&str) -> CaseCategory,
    out: &mut Vec<QueryCase>,
) -> Result<(), CorpusError> {
    let groups: Vec<(CaseCategory, Value)> = match value {
        Value::Null => return Ok(()),
        Value::Array(_) => vec![(categorize(""), value)],
        Value::Object(map) => map.into_iter().map(|(k, v)| (categorize(&k), v)).collect(),
        _ => return Err(field_err(line, field, "expected a list or an object")),
    };
    for (category, group) in groups {
        let items = match group {
            Value::Array(items) => items,
            Value::Object(_) => vec![group],
            Value::Null => continue,
            _ => return Err(field_err(line, field, "expected a list of query objects")),
        };
        for item in items {
            let Value::Object(mut q) = item else {
                return Err(field_err(line, field, "expected a query object"));
            };
            let prompt = take_string(&mut q, "prompt", line)?
                .ok_or_else(|| field_err(line, &format!("{field}.prompt"), "missing prompt"))?;
            let gold = match q.remove("ground_truth").or_else(|| q.remove("answer")) {
                None | Some(Value::Null) => None,
                Some(v) => Some(first_string(&v).ok_or_else(|| {
                    field_err(
                        line,
                        &format!("{field}.ground_truth"),
                        "expected a string answer",
                    )
                })?),
            };
            if scope == Scope::InScope && gold.is_none() {
                return Err(field_err(
                    line,
                    &format!("{field}.ground_truth"),
                    "in-scope query requires a ground truth answer",
                ));
            }
            out.push(QueryCase {
                prompt: fold_newlines(&prompt),
                gold_answer: gold,
                scope,
                category,
            });
        }
    }
    Ok(())
}

fn parse_record(
    mut obj: Map<String, Value>,
    line: usize,
    format: BenchmarkFormat,
) -> Result<BenchmarkRecord, CorpusError> {
    let native = format == BenchmarkFormat::NativeJsonl;

    let edit_input = take_string(&mut obj, "prompt", line)?
        .ok_or_else(|| field_err(line, "prompt", "missing edit input"))?;
    let edit_target = take_string(&mut obj, "target_new", line)?
        .ok_or_else(|| field_err(line, "target_new", "missing edit target"))?;
    let id = match obj.remove("id").or_else(|| obj.remove("case_id")) {
        None | Some(Value::Null) => format!("line-{line}"),
        Some(Value::String(s)) => s,
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(field_err(line, "id", "expected a string or integer")),
    };
    let subject = take_string(&mut obj, "subject", line)?;
    let statement = if native {
        take_string(&mut obj, "statement", line)?
    } else {
        None
    };
    let original_answer = take_string(&mut obj, "ground_truth", line)?;

    let mut descriptor = EditDescriptor::new(id, edit_input, edit_target, statement);
    descriptor.subject = subject;

    let mut cases = Vec::new();
    if native {
        if let Some(v) = obj.remove("cases") {
            let parsed: Vec<QueryCase> =
                serde_json::from_value(v).map_err(|e| field_err(line, "cases", e.to_string()))?;
            cases.extend(parsed.into_iter().map(|mut c| {
                c.prompt = fold_newlines(&c.prompt);
                c
            }));
        }
    }
    if !cases
        .iter()
        .any(|c| c.category == CaseCategory::Reliability)
    {
        cases.insert(
            0,
            QueryCase::in_scope(
                descriptor.edit_input.clone(),
                descriptor.edit_target.clone(),
                CaseCategory::Reliability,
            ),
        );
    }

    for key in ["rephrase", "rephrase_prompt"] {
        if let Some(v) = obj.remove(key) {
            if v.is_null() {
                continue;
            }
            let prompts = all_strings(&v)
                .ok_or_else(|| field_err(line, key, "expected a string or a list of strings"))?;
            for p in prompts {
                cases.push(QueryCase::in_scope(
                    fold_newlines(&p),
                    descriptor.edit_target.clone(),
                    CaseCategory::Paraphrase,
                ));
            }
        }
    }
    if let Some(v) = obj.remove("portability") {
        parse_case_group(
            v,
            "portability",
            line,
            Scope::InScope,
            portability_category,
            &mut cases,
        )?;
    }
    if let Some(v) = obj.remove("locality") {
        parse_case_group(
            v,
            "locality",
            line,
            Scope::OutOfScope,
            locality_category,
            &mut cases,
        )?;
    }

    let mut metadata = BTreeMap::new();
    if native {
        if let Some(v) = obj.remove("metadata") {
            match v {
                Value::Object(m) => metadata.extend(m),
                Value::Null => {}
                _ => return Err(field_err(line, "metadata", "expected an object")),
            }
        }
    }
    metadata.extend(obj);

    Ok(BenchmarkRecord {
        descriptor,
        original_answer,
        cases,
        metadata,
    })
}

#[derive(Serialize)]
struct NativeLine<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    subject: Option<&'a str>,
    prompt: &'a str,
    target_new: &'a str,
    statement: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    ground_truth: Option<&'a str>,
    cases: &'a [QueryCase],
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    metadata: &'a BTreeMap<String, Value>,
}

/// Serializes one record as a native JSONL line (without the newline).
pub fn native_line(record: &BenchmarkRecord) -> String {
    let line = NativeLine {
        id: &record.descriptor.id,
        subject: record.descriptor.subject.as_deref(),
        prompt: &record.descriptor.edit_input,
        target_new: &record.descriptor.edit_target,
        statement: &record.descriptor.statement,
        ground_truth: record.original_answer.as_deref(),
        cases: &record.cases,
        metadata: &record.metadata,
    };
    serde_json::to_string(&line).expect("record serialization cannot fail")
}

/// Writes a benchmark in the native format.
pub fn export_native(benchmark: &Benchmark, path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for record in &benchmark.records {
        writeln!(w, "{}", native_line(record)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationWarning {
    pub record_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub total_cases: usize,
    pub in_scope: usize,
    pub out_of_scope: usize,
    pub per_category: BTreeMap<CaseCategory, usize>,
    pub records_with_original_answer: usize,
    pub warnings: Vec<ValidationWarning>,
}

/// Summarizes case counts and flags records that cannot be fully scored.
pub fn validate(benchmark: &Benchmark) -> ValidationReport {
    let mut report = ValidationReport {
        records: benchmark.records.len(),
        ..Default::default()
    };
    for record in &benchmark.records {
        let mut outs = 0;
        for case in &record.cases {
            report.total_cases += 1;
            match case.scope {
                Scope::InScope => report.in_scope += 1,
                Scope::OutOfScope => {
                    report.out_of_scope += 1;
                    outs += 1;
                }
            }
            *report.per_category.entry(case.category).or_default() += 1;
        }
        if record.original_answer.is_some() {
            report.records_with_original_answer += 1;
        }
        if outs == 0 {
            report.warnings.push(ValidationWarning {
                record_id: record.descriptor.id.clone(),
                message: "no out_of_scope cases".into(),
            });
        }
        if record.out_of_scope_cases().any(|c| c.gold_answer.is_none()) {
            report.warnings.push(ValidationWarning {
                record_id: record.descriptor.id.clone(),
                message: "out_of_scope case without gold answer (baseline locality only)".into(),
            });
        }
    }
    report
}
