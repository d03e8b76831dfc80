//! Synthetic benchmarks with distinct, deterministic names.
#![allow(dead_code)]

use std::collections::HashSet;

use lte_core::corpus::{Benchmark, BenchmarkRecord, CaseCategory, EditDescriptor, QueryCase};

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Capitalized pseudo-word of `len` letters.
pub fn word(state: &mut u64, len: usize) -> String {
    let mut s: String = (0..len)
        .map(|_| (b'a' + (splitmix(state) % 26) as u8) as char)
        .collect();
    s[..1].make_ascii_uppercase();
    s
}

/// `n` records, each with reliability, paraphrase, compositional and
/// alias cases in scope plus one unrelated-attribute case out of scope.
pub fn synthetic(name: &str, n: usize, seed: u64) -> Benchmark {
    let mut state = seed;
    let mut used = HashSet::new();
    let mut fresh = |state: &mut u64| loop {
        let w = word(state, 8);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let records = (0..n)
        .map(|i| {
            let country = fresh(&mut state);
            let city = fresh(&mut state);
            let old_city = fresh(&mut state);
            let alias = fresh(&mut state);
            let mayor = fresh(&mut state);
            let language = fresh(&mut state);
            let d = EditDescriptor::new(
                format!("{name}-{i:05}"),
                format!("The capital of {country} is"),
                city.clone(),
                None,
            );
            BenchmarkRecord::new(d)
                .with_original_answer(old_city)
                .with_case(QueryCase::in_scope(
                    format!("Name the capital city of {country}"),
                    city.clone(),
                    CaseCategory::Paraphrase,
                ))
                .with_case(QueryCase::in_scope(
                    format!("Who is the mayor of the capital of {country}?"),
                    mayor,
                    CaseCategory::Compositional,
                ))
                .with_case(QueryCase::in_scope(
                    format!("The capital of {alias}, also called {country}, is"),
                    city,
                    CaseCategory::SubjectAlias,
                ))
                .with_case(QueryCase::out_of_scope(
                    format!("The official language of {country} is"),
                    Some(language),
                    CaseCategory::UnrelatedAttribute,
                ))
        })
        .collect();
    Benchmark::new(name, records)
}
