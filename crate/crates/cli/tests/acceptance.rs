//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line to stderr
//! (uncaptured) before asserting.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use lte_cli::config::{BackendConfig, ServeConfig};
use lte_cli::service;
use lte_core::alignbuild::{
    build_dataset, export_sft, record_rng, threefold_updated_information, BuildConfig,
    SimilarityPool, ThreefoldBranch, ThreefoldConfig, Variant,
};
use lte_core::backend::{EditRule, MockOracle, MockOracleConfig, NoiseScope};
use lte_core::corpus::{Benchmark, BenchmarkRecord, CaseCategory, EditDescriptor};
use lte_core::embed::{dot, reference_embed, Embedder, ReferenceEmbedder, ReferenceEmbedderConfig};
use lte_core::harness::{eval_mass, eval_single, time_per_edit, EvalMode, RunConfig};
use lte_core::memory::MemoryBank;
use lte_core::metrics::{fluency, p_at_1, FluencyWeights};
use lte_core::prompt::render;

use common::synthetic;

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} [{}] {name}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn embedder() -> Arc<dyn Embedder> {
    Arc::new(ReferenceEmbedder::default())
}

#[test]
fn c01_oracle_single_editing() {
    let benches = vec![synthetic("synthetic", 100, 11)];
    let oracle = MockOracle::new(MockOracleConfig::perfect_for(&benches)).unwrap();
    let start = Instant::now();
    let r = eval_single(&benches, &oracle, &RunConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let a = &r.average;
    let ok = a.edit_success == Some(100.0)
        && a.portability == Some(100.0)
        && a.locality == Some(100.0)
        && secs < 10.0;
    verdict(
        1,
        "oracle single editing",
        ok,
        &format!(
            "edit_success={:?} portability={:?} locality={:?} runtime={secs:.3}s",
            a.edit_success, a.portability, a.locality
        ),
    );
}

#[test]
fn c02_batch_and_sequential_stability() {
    let benches = vec![synthetic("stream", 1000, 22)];
    let oracle = MockOracle::new(MockOracleConfig::perfect_for(&benches)).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for mode in [EvalMode::Batch, EvalMode::Sequential] {
        let cfg = RunConfig {
            parallelism: 8,
            ..RunConfig::for_mode(mode)
        };
        let reports = eval_mass(&benches, &oracle, embedder(), &cfg).unwrap();
        let sizes: Vec<usize> = reports.iter().map(|r| r.size.unwrap()).collect();
        ok &= sizes == mode.default_sizes();
        ok &= reports
            .iter()
            .all(|r| r.average.edit_success == Some(100.0));
        let es: Vec<String> = reports
            .iter()
            .map(|r| format!("{}:{:?}", r.size.unwrap(), r.average.edit_success))
            .collect();
        lines.push(format!("{} [{}]", mode.as_str(), es.join(" ")));
    }

    // Exact-text queries over a 1000-entry bank.
    let mut bank = MemoryBank::new(embedder());
    let descriptors: Vec<EditDescriptor> = benches[0]
        .records
        .iter()
        .map(|r| r.descriptor.clone())
        .collect();
    for p in bank.prepare_batch(descriptors).unwrap() {
        bank.commit(p).unwrap();
    }
    let results: Vec<_> = bank
        .entries()
        .iter()
        .map(|e| {
            (
                e.entry_id,
                bank.retrieve(&e.descriptor.statement, 3).unwrap(),
            )
        })
        .collect();
    let pairs: Vec<(u64, &_)> = results.iter().map(|(id, r)| (*id, r)).collect();
    let p1 = p_at_1(&pairs);
    ok &= bank.len() == 1000 && p1 == Some(1.0);
    verdict(
        2,
        "batch/sequential stability",
        ok,
        &format!(
            "{}; exact-text p_at_1={p1:?} over {} entries",
            lines.join("; "),
            bank.len()
        ),
    );
}

/// Shannon entropy in bits from a separately built n-gram table.
fn brute_entropy(tokens: &[String], n: usize) -> f64 {
    if tokens.len() < n {
        return 0.0;
    }
    let mut table: Vec<(Vec<String>, usize)> = Vec::new();
    for w in tokens.windows(n) {
        match table.iter_mut().find(|(g, _)| g.as_slice() == w) {
            Some((_, c)) => *c += 1,
            None => table.push((w.to_vec(), 1)),
        }
    }
    let total = (tokens.len() + 1 - n) as f64;
    table
        .iter()
        .map(|(_, c)| {
            let p = *c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>()
        .abs()
}

#[test]
fn c03_fluency_formula() {
    let weights = FluencyWeights::default();
    let mut state = 0x5eed_u64;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = (common::word(&mut state, 1).as_bytes()[0] - b'A') as usize * 2;
        let tokens: Vec<String> = (0..len)
            .map(|_| {
                let w = common::word(&mut state, 1).to_lowercase();
                // Small vocabulary so n-grams repeat.
                ((w.as_bytes()[0] - b'a') % 5).to_string()
            })
            .collect();
        let text = tokens.join(" ");
        let oracle = 0.5 * brute_entropy(&tokens, 2) + 0.5 * brute_entropy(&tokens, 3);
        worst = worst.max((fluency(&text, weights) - oracle).abs());
    }
    let flat = fluency("a a a a a", weights);
    let alt = fluency("a b a b a b", weights);
    let ok = worst <= 1e-9 && flat == 0.0 && (alt - 0.985476).abs() <= 1e-6;
    verdict(
        3,
        "fluency formula",
        ok,
        &format!("max |diff| over 1000 strings={worst:.3e}; \"a a a a a\"={flat}; \"a b a b a b\"={alt:.6}"),
    );
}

#[test]
fn c04_threefold_sampler() {
    let bench = synthetic("pool", 200, 44);
    // A second id with an identical statement must never be offered as similar.
    let mut records = bench.records.clone();
    let mut twin = bench.records[0].clone();
    twin.descriptor.id = "twin".into();
    records.push(twin);
    let bench = Benchmark::new("pool", records);
    let pool = SimilarityPool::from_benchmarks([&bench], embedder()).unwrap();
    let cfg = ThreefoldConfig::with_probabilities(0.5, 0.25, 0.25).unwrap();
    let mut rng = record_rng(4, 0);
    let mut counts: BTreeMap<ThreefoldBranch, usize> = BTreeMap::new();
    let mut exact_once = true;
    let mut leaked = false;
    let draws = 10_000;
    for i in 0..draws {
        let d = &bench.records[i % bench.records.len()].descriptor;
        let draw = threefold_updated_information(d, &pool, &cfg, &mut rng).unwrap();
        *counts.entry(draw.used).or_default() += 1;
        exact_once &= draw
            .statements
            .iter()
            .filter(|s| **s == d.statement)
            .count()
            == 1;
        exact_once &= draw.statements[draw.exact_position] == d.statement;
        if draw.used != ThreefoldBranch::ExactOnly {
            leaked |= pool.similar(d, 2).unwrap().contains(&d.statement);
        }
    }
    let frac = |b| *counts.get(&b).unwrap_or(&0) as f64 / draws as f64;
    let (f1, f2, f3) = (
        frac(ThreefoldBranch::ExactOnly),
        frac(ThreefoldBranch::PlusTop1),
        frac(ThreefoldBranch::PlusTop2),
    );
    let within = (f1 - 0.5).abs() <= 0.02 && (f2 - 0.25).abs() <= 0.02 && (f3 - 0.25).abs() <= 0.02;
    verdict(
        4,
        "threefold sampler",
        within && exact_once && !leaked,
        &format!("branch fractions {f1:.4}/{f2:.4}/{f3:.4}; exact exactly once={exact_once}; exact via similarity={leaked}"),
    );
}

#[test]
fn c05_parallel_data_construction() {
    let bench = synthetic("align", 1000, 55);
    let dir = tempfile::tempdir().unwrap();
    let build = |file: &str| {
        let pool = SimilarityPool::from_benchmarks([&bench], embedder()).unwrap();
        let cfg = BuildConfig {
            threefold: ThreefoldConfig {
                rng_seed: 9,
                ..ThreefoldConfig::default()
            },
            ..BuildConfig::default()
        };
        let ds = build_dataset(std::slice::from_ref(&bench), &pool, &cfg).unwrap();
        let path = dir.path().join(file);
        export_sft(&ds, &cfg, &path).unwrap();
        (ds, std::fs::read(&path).unwrap())
    };
    let (ds, bytes_a) = build("a.jsonl");
    let (_, bytes_b) = build("b.jsonl");
    let mut hist: BTreeMap<Variant, usize> = BTreeMap::new();
    for s in &ds.samples {
        *hist.entry(s.variant).or_default() += 1;
    }
    let balanced = Variant::ALL.iter().all(|v| hist.get(v) == Some(&1000));
    let plain_clean = ds
        .samples
        .iter()
        .filter(|s| !s.variant.with_prompt())
        .all(|s| !s.input_text.contains("[Updated Information]"));
    let identical = bytes_a == bytes_b;
    verdict(
        5,
        "parallel data construction",
        ds.samples.len() == 4000 && balanced && identical && plain_clean,
        &format!(
            "samples={} histogram={hist:?} byte-identical rerun={identical} plain inputs free of block={plain_clean}",
            ds.samples.len()
        ),
    );
}

#[test]
fn c06_prompt_golden() {
    let got = render(
        &["The current British Prime Minister is Rishi Sunak".to_string()],
        "Who is married to the PM of the UK?",
    )
    .rendered;
    let want = "[Updated Information] The current British Prime Minister is Rishi Sunak\n[Query] Who is married to the PM of the UK?";
    let plain = render(&[], "Who is married to the PM of the UK?").rendered;
    verdict(
        6,
        "prompt golden",
        got == want && plain == "Who is married to the PM of the UK?",
        &format!("rendered={got:?}; empty-edit render={plain:?}"),
    );
}

#[test]
fn c07_retrieval_correctness() {
    let mut state = 77u64;
    let vocab: Vec<String> = (0..12)
        .map(|_| common::word(&mut state, 4).to_lowercase())
        .collect();
    let pick = |n: usize, state: &mut u64| -> String {
        (0..n)
            .map(|_| {
                vocab[(common::word(state, 1).as_bytes()[0] - b'A') as usize % vocab.len()].clone()
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut statements: Vec<String> = (0..45).map(|_| pick(4, &mut state)).collect();
    // Exact duplicates force score ties.
    for i in 0..5 {
        statements.push(statements[i * 3].clone());
    }
    let probes: Vec<String> = (0..20).map(|_| pick(3, &mut state)).collect();

    let ecfg = ReferenceEmbedderConfig::default();
    let mut bank = MemoryBank::new(embedder());
    for (i, s) in statements.iter().enumerate() {
        bank.add_edit(EditDescriptor::new(
            format!("s{i}"),
            "x",
            "y",
            Some(s.clone()),
        ))
        .unwrap();
    }
    let oracle = |q: &str, k: usize| -> Vec<u64> {
        let qv = reference_embed(q, &ecfg);
        let mut all: Vec<(f64, u64)> = statements
            .iter()
            .enumerate()
            .map(|(i, s)| (dot(&qv, &reference_embed(s, &ecfg)).unwrap(), i as u64))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    };
    let ranking = |b: &MemoryBank, q: &str, k: usize| -> Vec<u64> {
        b.retrieve(q, k)
            .unwrap()
            .entries
            .iter()
            .map(|e| e.entry_id)
            .collect()
    };
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("bank.jsonl");
    bank.snapshot(&snap).unwrap();
    let restored = MemoryBank::restore(&snap, embedder()).unwrap();

    let mut mismatches = 0;
    let mut restore_diffs = 0;
    let mut checked = 0;
    for q in &probes {
        for k in [1, 3, 10, 50] {
            let got = ranking(&bank, q, k);
            mismatches += usize::from(got != oracle(q, k));
            restore_diffs += usize::from(ranking(&restored, q, k) != got);
            checked += 1;
        }
    }
    verdict(
        7,
        "retrieval correctness",
        mismatches == 0 && restore_diffs == 0,
        &format!(
            "{checked} rankings over {} statements: {mismatches} differ from full sort, {restore_diffs} differ after restore",
            statements.len()
        ),
    );
}

#[test]
fn c08_timing_report_shape() {
    let bench = synthetic("timing", 10, 88);
    let fast = MockOracle::new(MockOracleConfig::perfect_for([&bench])).unwrap();
    let t = time_per_edit(&bench, &fast, embedder(), &RunConfig::default()).unwrap();
    let edit_shown = format!("{:.2}", t.edit_time_s);
    let sum_ok = (t.total_time_s - (t.edit_time_s + t.inference_time_s)).abs() <= 1e-9;

    let slow = MockOracle::new(MockOracleConfig {
        latency_ms: 50,
        ..MockOracleConfig::perfect_for([&bench])
    })
    .unwrap();
    let s = time_per_edit(&bench, &slow, embedder(), &RunConfig::default()).unwrap();
    let slow_ok = (0.05..=0.10).contains(&s.inference_time_s);
    let ok = t.edit_time_s < 0.01 && edit_shown == "0.00" && sum_ok && slow_ok;
    verdict(
        8,
        "timing report shape",
        ok,
        &format!(
            "edit/inference/total={} (edit {:.2e}s), 50ms stub inference={:.4}s",
            t.display(),
            t.edit_time_s,
            s.inference_time_s
        ),
    );
}

#[test]
fn c09_noise_calibration() {
    let mut bench = synthetic("noise", 1000, 99);
    for r in &mut bench.records {
        r.cases.retain(|c| {
            matches!(
                c.category,
                CaseCategory::Reliability | CaseCategory::UnrelatedAttribute
            )
        });
    }
    let benches = vec![bench];
    let oracle = MockOracle::new(MockOracleConfig {
        noise_rate: 0.2,
        noise_scope: NoiseScope::EditedOnly,
        rng_seed: 2024,
        ..MockOracleConfig::perfect_for(&benches)
    })
    .unwrap();
    let r = eval_single(&benches, &oracle, &RunConfig::default()).unwrap();
    let es = r.average.edit_success.unwrap();
    let loc = r.average.locality.unwrap();
    let n = r.average.n_cases.edit_success;
    verdict(
        9,
        "noise calibration",
        n == 1000 && (es - 80.0).abs() <= 4.0 && loc == 100.0,
        &format!("edit_success={es:.2} over {n} cases, locality={loc:.2}"),
    );
}

fn post(agent: &ureq::Agent, url: &str, body: Value) -> (u16, Value) {
    match agent.post(url).send_json(body) {
        Ok(r) => (r.status(), r.into_json().unwrap_or(Value::Null)),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap_or(Value::Null)),
        Err(e) => panic!("transport error: {e}"),
    }
}

#[test]
fn c10_service_contract() {
    let statement = "The current British Prime Minister is Rishi Sunak";
    let question = "Who is married to the PM of the UK?";
    let mut mock = MockOracleConfig::default();
    mock.edit_table.push(EditRule {
        statement: statement.into(),
        query_pattern: question.into(),
        answer: "Akshata Murty".into(),
    });
    let handle = service::spawn(ServeConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        backend: BackendConfig::Mock(mock),
        ..ServeConfig::default()
    })
    .unwrap();
    let base = handle.base_url();
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(30))
        .build();
    let mut failures: Vec<String> = Vec::new();
    let mut check = |cond: bool, what: &str| {
        if !cond {
            failures.push(what.to_string());
        }
    };

    let (code, empty) = post(
        &agent,
        &format!("{base}/query"),
        json!({"question": question}),
    );
    check(
        code == 200 && empty["rendered_prompt"] == question,
        "empty-bank query renders the bare question",
    );

    let (code, added) = post(
        &agent,
        &format!("{base}/edits"),
        json!({"statement": statement}),
    );
    check(code == 200, "POST /edits returns 200");
    let entry_id = added["entry_id"].as_u64();

    let (code, answered) = post(
        &agent,
        &format!("{base}/query"),
        json!({"question": question}),
    );
    check(code == 200, "POST /query returns 200");
    check(
        answered["answer"]
            .as_str()
            .unwrap_or("")
            .contains("Akshata Murty"),
        "answer carries the edit-table value",
    );
    check(
        answered["retrieved"][0]["entry_id"].as_u64() == entry_id,
        "retrieved[0] is the inserted entry",
    );
    check(
        answered["rendered_prompt"] == render(&[statement.to_string()], question).rendered,
        "rendered_prompt matches the template",
    );

    let (code, bad) = post(&agent, &format!("{base}/query"), json!({"k": 2}));
    check(
        code == 400 && bad["error"]["field"] == "question",
        "missing field is a 400 naming it",
    );
    let missing = match agent.delete(&format!("{base}/edits/999")).call() {
        Err(ureq::Error::Status(code, _)) => code,
        Ok(r) => r.status(),
        Err(e) => panic!("{e}"),
    };
    check(missing == 404, "DELETE of an unknown id is 404");

    // Load: 100 readers against one writer.
    let writes = 50;
    let reads_each = 5;
    let server_errors = Arc::new(AtomicUsize::new(0));
    let other_errors = Arc::new(AtomicUsize::new(0));
    thread::scope(|s| {
        let writer = {
            let (base, errs, other) = (base.clone(), server_errors.clone(), other_errors.clone());
            s.spawn(move || {
                let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build();
                for i in 0..writes {
                    let (code, _) = post(
                        &agent,
                        &format!("{base}/edits"),
                        json!({"statement": format!("Fact number {i} says the answer is value {i}")}),
                    );
                    if code >= 500 {
                        errs.fetch_add(1, Ordering::SeqCst);
                    } else if code != 200 {
                        other.fetch_add(1, Ordering::SeqCst);
                    }
                }
            })
        };
        for r in 0..100 {
            let (base, errs, other) = (base.clone(), server_errors.clone(), other_errors.clone());
            s.spawn(move || {
                let agent = ureq::AgentBuilder::new()
                    .timeout(Duration::from_secs(60))
                    .build();
                for j in 0..reads_each {
                    let (code, _) = post(
                        &agent,
                        &format!("{base}/query"),
                        json!({"question": format!("What does fact {} say?", (r + j) % writes)}),
                    );
                    if code >= 500 {
                        errs.fetch_add(1, Ordering::SeqCst);
                    } else if code != 200 {
                        other.fetch_add(1, Ordering::SeqCst);
                    }
                }
            });
        }
        writer.join().unwrap();
    });
    let health: Value = agent
        .get(&format!("{base}/healthz"))
        .call()
        .unwrap()
        .into_json()
        .unwrap();
    let bank_size = health["bank_size"].as_u64();
    let five_xx = server_errors.load(Ordering::SeqCst);
    let non_200 = other_errors.load(Ordering::SeqCst);
    check(
        five_xx == 0 && non_200 == 0,
        "load test has no error responses",
    );
    check(
        bank_size == Some(1 + writes as u64),
        "final bank_size counts every insert",
    );
    handle.stop();

    verdict(
        10,
        "service contract",
        failures.is_empty(),
        &format!(
            "flow and load (100 readers x {reads_each}, 1 writer x {writes}): 5xx={five_xx} other non-200={non_200} bank_size={bank_size:?}; failed checks={failures:?}"
        ),
    );
}

#[test]
fn records_are_complete_for_alignment() {
    // Guards the fixture that criterion 5 relies on.
    let bench = synthetic("align", 5, 55);
    assert!(bench
        .records
        .iter()
        .all(|r: &BenchmarkRecord| r.original_answer.is_some()
            && r.out_of_scope_cases().next().is_some()));
}
