//! Edit success, portability, locality, fluency and retrieval precision.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{CaseCategory, QueryCase, Scope};
use crate::memory::RetrievalResult;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("baseline_consistency locality requires a baseline generation for every case ({missing} missing)")]
    MissingBaseline { missing: usize },
    #[error("gold locality requires a gold answer for every case ({missing} missing)")]
    MissingGold { missing: usize },
    #[error("fluency weights must be non-negative and sum to 1, got ({0}, {1})")]
    BadWeights(f64, f64),
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Exact,
    #[default]
    Substring,
}

impl FromStr for MatchMode {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(MatchMode::Exact),
            "substring" => Ok(MatchMode::Substring),
            _ => Err(MetricsError::Unknown {
                kind: "match mode",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalityMode {
    #[default]
    Gold,
    BaselineConsistency,
}

impl FromStr for LocalityMode {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold" => Ok(LocalityMode::Gold),
            "baseline" | "baseline_consistency" => Ok(LocalityMode::BaselineConsistency),
            _ => Err(MetricsError::Unknown {
                kind: "locality mode",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    EditSuccess,
    Portability,
    Locality,
}

impl Dimension {
    /// Reliability and paraphrase count toward edit success, other in-scope
    /// cases toward portability, every out-of-scope case toward locality.
    pub fn of(case: &QueryCase) -> Dimension {
        match (case.scope, case.category) {
            (Scope::OutOfScope, _) => Dimension::Locality,
            (Scope::InScope, CaseCategory::Reliability | CaseCategory::Paraphrase) => {
                Dimension::EditSuccess
            }
            (Scope::InScope, _) => Dimension::Portability,
        }
    }
}

/// NFC, lowercase, whitespace collapsed, leading/trailing punctuation removed.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let lowered = nfc.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| !c.is_alphanumeric() && !c.is_whitespace())
        .trim()
        .to_string()
}

/// 1 when the normalized gold answer occurs in the normalized generation.
pub fn normalized_match(generated: &str, gold: &str) -> u8 {
    match_with(generated, gold, MatchMode::Substring)
}

pub fn match_with(generated: &str, gold: &str, mode: MatchMode) -> u8 {
    let g = normalize(gold);
    let out = normalize(generated);
    let hit = match mode {
        MatchMode::Exact => out == g,
        MatchMode::Substring => out.contains(&g),
    };
    u8::from(hit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub query_case: QueryCase,
    pub generated: String,
    pub matched: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_generated: Option<String>,
}

impl CaseResult {
    /// Scores `generated` against the case gold answer. Cases without gold
    /// score 0 here; locality in baseline mode re-scores them.
    pub fn score(
        query_case: QueryCase,
        generated: String,
        baseline: Option<String>,
        mode: MatchMode,
    ) -> Self {
        let matched = query_case
            .gold_answer
            .as_deref()
            .map_or(0, |gold| match_with(&generated, gold, mode));
        Self {
            query_case,
            generated,
            matched,
            baseline_generated: baseline,
        }
    }
}

/// Mean accuracy (percent) over `results`, or `None` for an empty list.
pub fn dimension_accuracy(
    results: &[CaseResult],
    dimension: Dimension,
    locality_mode: LocalityMode,
    match_mode: MatchMode,
) -> Result<Option<f64>, MetricsError> {
    if results.is_empty() {
        return Ok(None);
    }
    let hits: usize =
        if dimension == Dimension::Locality && locality_mode == LocalityMode::BaselineConsistency {
            let missing = results
                .iter()
                .filter(|r| r.baseline_generated.is_none())
                .count();
            if missing > 0 {
                return Err(MetricsError::MissingBaseline { missing });
            }
            results
                .iter()
                .map(|r| {
                    let base = r.baseline_generated.as_deref().unwrap_or_default();
                    if normalize(base).is_empty() {
                        usize::from(normalize(&r.generated).is_empty())
                    } else {
                        usize::from(match_with(&r.generated, base, match_mode))
                    }
                })
                .sum()
        } else {
            if dimension == Dimension::Locality {
                let missing = results
                    .iter()
                    .filter(|r| r.query_case.gold_answer.is_none())
                    .count();
                if missing > 0 {
                    return Err(MetricsError::MissingGold { missing });
                }
            }
            results.iter().map(|r| usize::from(r.matched)).sum()
        };
    Ok(Some(hits as f64 * 100.0 / results.len() as f64))
}

/// Shannon entropy (bits) of the whitespace-token n-gram distribution.
/// Texts with fewer than `n` tokens (and `n == 0`) give 0.
pub fn ngram_entropy(text: &str, n: usize) -> f64 {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let mut counts: BTreeMap<&[&str], u64> = BTreeMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_default() += 1;
    }
    let total = (tokens.len() - n + 1) as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    // A single n-gram type yields -1*log2(1) = -0.0.
    h.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluencyWeights {
    pub bigram: f64,
    pub trigram: f64,
}

impl Default for FluencyWeights {
    fn default() -> Self {
        Self {
            bigram: 0.5,
            trigram: 0.5,
        }
    }
}

impl FluencyWeights {
    pub fn new(bigram: f64, trigram: f64) -> Result<Self, MetricsError> {
        if bigram < 0.0 || trigram < 0.0 || ((bigram + trigram) - 1.0).abs() > 1e-12 {
            return Err(MetricsError::BadWeights(bigram, trigram));
        }
        Ok(Self { bigram, trigram })
    }
}

/// Weighted average of bigram and trigram entropies.
pub fn fluency(text: &str, weights: FluencyWeights) -> f64 {
    let e2 = ngram_entropy(text, 2);
    let e3 = ngram_entropy(text, 3);
    weights.bigram * e2 + weights.trigram * e3
}

/// Fraction of retrievals whose rank-1 entry is the gold entry. Empty
/// results count as misses. Returns `None` for an empty list.
pub fn p_at_1(retrievals: &[(u64, &RetrievalResult)]) -> Option<f64> {
    if retrievals.is_empty() {
        return None;
    }
    let hits = retrievals
        .iter()
        .filter(|(gold, r)| r.top().is_some_and(|t| t.entry_id == *gold))
        .count();
    Some(hits as f64 / retrievals.len() as f64)
}

/// Fraction of retrievals whose returned entries include the gold entry.
pub fn top_k_hit_rate(retrievals: &[(u64, &RetrievalResult)]) -> Option<f64> {
    if retrievals.is_empty() {
        return None;
    }
    let hits = retrievals
        .iter()
        .filter(|(gold, r)| r.contains(*gold))
        .count();
    Some(hits as f64 / retrievals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CaseCounts {
    pub edit_success: usize,
    pub portability: usize,
    pub locality: usize,
    pub fluency: usize,
}

/// One row block of the results table. Absent dimensions had no cases.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "Edit Succ.")]
    pub edit_success: Option<f64>,
    #[serde(rename = "Portability")]
    pub portability: Option<f64>,
    #[serde(rename = "Locality")]
    pub locality: Option<f64>,
    #[serde(rename = "Fluency")]
    pub fluency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k_hit_rate: Option<f64>,
    pub n_cases: CaseCounts,
}

impl MetricReport {
    pub fn get(&self, dim: Dimension) -> Option<f64> {
        match dim {
            Dimension::EditSuccess => self.edit_success,
            Dimension::Portability => self.portability,
            Dimension::Locality => self.locality,
        }
    }
}
