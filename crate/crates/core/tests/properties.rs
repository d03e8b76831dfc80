use std::collections::HashMap;
use std::sync::Arc;

use proptest::prelude::*;
use serde_json::Value;

use lte_core::corpus::{
    native_line, parse_benchmark, Benchmark, BenchmarkFormat, BenchmarkRecord, CaseCategory,
    EditDescriptor, QueryCase,
};
use lte_core::embed::{dot, reference_embed, ReferenceEmbedder, ReferenceEmbedderConfig};
use lte_core::memory::MemoryBank;
use lte_core::metrics::{fluency, ngram_entropy, FluencyWeights};
use lte_core::prompt::PromptTemplate;

fn phrase() -> impl Strategy<Value = String> {
    "[a-z]{1,6}( [a-z]{1,6}){0,4}"
}

fn record_strategy() -> impl Strategy<Value = BenchmarkRecord> {
    (
        phrase(),
        phrase(),
        proptest::option::of(phrase()),
        proptest::option::of(phrase()),
        proptest::collection::vec((phrase(), proptest::option::of(phrase()), 0usize..6), 0..5),
        proptest::option::of(phrase()),
    )
        .prop_map(|(input, target, statement, original, cases, meta)| {
            let mut r = BenchmarkRecord::new(EditDescriptor::new("id", input, target, statement));
            if let Some(o) = original {
                r = r.with_original_answer(o);
            }
            for (i, (prompt, gold, kind)) in cases.into_iter().enumerate() {
                // Suffix keeps prompts unique within a record.
                let prompt = format!("{prompt} {i}");
                let case = match kind {
                    0 => QueryCase::in_scope(
                        prompt,
                        gold.unwrap_or_else(|| "g".into()),
                        CaseCategory::Paraphrase,
                    ),
                    1 => QueryCase::in_scope(
                        prompt,
                        gold.unwrap_or_else(|| "g".into()),
                        CaseCategory::SubjectAlias,
                    ),
                    2 => QueryCase::in_scope(
                        prompt,
                        gold.unwrap_or_else(|| "g".into()),
                        CaseCategory::Compositional,
                    ),
                    3 => QueryCase::out_of_scope(prompt, gold, CaseCategory::UnrelatedAttribute),
                    4 => QueryCase::out_of_scope(prompt, gold, CaseCategory::OneToMany),
                    _ => QueryCase::out_of_scope(prompt, gold, CaseCategory::FreeText),
                };
                r = r.with_case(case);
            }
            if let Some(m) = meta {
                r.metadata.insert("source".into(), Value::String(m));
            }
            r
        })
}

/// Entropy recomputed from scratch: string-keyed counts, natural log
/// converted to bits at the end.
fn naive_entropy(text: &str, n: usize) -> f64 {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() < n {
        return 0.0;
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut total = 0usize;
    for i in 0..=tokens.len() - n {
        *counts.entry(tokens[i..i + n].join(" ")).or_insert(0) += 1;
        total += 1;
    }
    let mut h = 0.0;
    for c in counts.values() {
        let p = *c as f64 / total as f64;
        h -= p * p.ln();
    }
    h / std::f64::consts::LN_2
}

proptest! {
    #[test]
    fn native_round_trip(records in proptest::collection::vec(record_strategy(), 1..6)) {
        let records: Vec<BenchmarkRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.descriptor.id = format!("rec-{i}");
                r
            })
            .collect();
        let original = Benchmark::new("b", records);
        let text: String = original.records.iter().map(|r| native_line(r) + "\n").collect();
        let loaded = parse_benchmark("b", &text, BenchmarkFormat::NativeJsonl).unwrap();
        prop_assert_eq!(loaded, original);
    }

    #[test]
    fn render_is_invertible(stmts in proptest::collection::vec(phrase(), 0..5), query in "[a-z ?]{0,20}") {
        let t = PromptTemplate::default();
        let rendered = t.render_str(&stmts, &query);
        let (block, q) = t.split(&rendered);
        prop_assert_eq!(q, query.as_str());
        match block {
            None => prop_assert!(stmts.is_empty()),
            Some(block) => {
                let body = block.strip_prefix(t.info_prefix.as_str()).unwrap();
                let decoded: Vec<&str> = body.split('\n').collect();
                prop_assert_eq!(decoded, stmts.iter().map(String::as_str).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn entropy_matches_naive(tokens in proptest::collection::vec("[a-d]{1,2}", 0..60), n in 1usize..4) {
        let text = tokens.join(" ");
        prop_assert!((ngram_entropy(&text, n) - naive_entropy(&text, n)).abs() < 1e-9);
    }

    #[test]
    fn fluency_bounds(tokens in proptest::collection::vec("[a-e]", 0..80), w in 0.0f64..=1.0) {
        let text = tokens.join(" ");
        let weights = FluencyWeights::new(w, 1.0 - w).unwrap();
        let f = fluency(&text, weights);
        let e2 = ngram_entropy(&text, 2);
        let e3 = ngram_entropy(&text, 3);
        prop_assert!(f >= 0.0);
        prop_assert!(f <= e2.max(e3) + 1e-12);
        // An n-gram distribution over m windows has at most log2(m) bits.
        if tokens.len() >= 3 {
            prop_assert!(e2 <= ((tokens.len() - 1) as f64).log2() + 1e-12);
            prop_assert!(e3 <= ((tokens.len() - 2) as f64).log2() + 1e-12);
        }
    }

    #[test]
    fn embeddings_are_unit_or_zero(text in "[a-zA-Z ]{0,40}", dim in 8usize..64, seed in any::<u64>()) {
        let v = reference_embed(&text, &ReferenceEmbedderConfig { dim, seed });
        prop_assert_eq!(v.dim(), dim);
        let n = v.norm();
        prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6);
        if text.trim().is_empty() {
            prop_assert!(v.is_zero());
        }
    }

    #[test]
    fn retrieval_matches_full_sort(
        stmts in proptest::collection::vec("[a-c]{1,3}( [a-c]{1,3}){0,2}", 1..25),
        query in "[a-c]{1,3}( [a-c]{1,3}){0,2}",
        k in 1usize..30,
    ) {
        let embedder = Arc::new(ReferenceEmbedder::new(ReferenceEmbedderConfig { dim: 8, seed: 3 }).unwrap());
        let mut bank = MemoryBank::new(embedder);
        for (i, s) in stmts.iter().enumerate() {
            bank.add_edit(EditDescriptor::new(format!("s{i}"), "in", "out", Some(s.clone()))).unwrap();
        }
        let qv = reference_embed(&query, &ReferenceEmbedderConfig { dim: 8, seed: 3 });
        let mut oracle: Vec<(f64, u64)> = bank
            .entries()
            .iter()
            .map(|e| (dot(&qv, &e.vector).unwrap(), e.entry_id))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        oracle.truncate(k);
        let got: Vec<(f64, u64)> = bank
            .retrieve(&query, k)
            .unwrap()
            .entries
            .iter()
            .map(|e| (e.score, e.entry_id))
            .collect();
        prop_assert_eq!(got, oracle);
    }
}
