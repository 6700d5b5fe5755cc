//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use arr_core::prompt::{DRAFT_HEADER, EVIDENCE_HEADER, INSTRUCTION_HEADER, QUERY_HEADER};
use arr_core::{
    assemble_revision_prompt, build_bank, estimate_tokens, hash_embed, mean_average_precision,
    micro_f1, precision_at_k, recall_at_k, retrieval_ablation, BankError, Embedder,
    EmbeddingVector, EvalExample, Gateway, Gateways, HashEmbedder, KnowledgeBank, MatchRule,
    ModelEndpointConfig, Paragraph, Pipeline, PipelineConfig, QueryItem, RankedRun, ScriptRule,
    ScriptedResponder,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn para(id: u32, title: String, body: String) -> Paragraph {
    Paragraph {
        id,
        title,
        body,
        source: String::new(),
    }
}

fn random_word(
    rng: &mut ChaCha8Rng,
    alphabet: &[u8],
    len: std::ops::RangeInclusive<usize>,
) -> String {
    let n = rng.random_range(len);
    (0..n)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())] as char)
        .collect()
}

fn scripted(rules: Vec<ScriptRule>, default: &str) -> Gateway {
    Gateway::scripted(
        ModelEndpointConfig::default(),
        Arc::new(ScriptedResponder::new(rules, default)),
    )
    .expect("scripted gateway")
}

fn bigrams(s: &str) -> HashSet<(char, char)> {
    let c: Vec<char> = s.chars().collect();
    c.windows(2).map(|w| (w[0], w[1])).collect()
}

fn knn_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let alphabet = b"abcdefghijklmnopqrstuvwxyz";
    let e = HashEmbedder::new(64).map_err(|e| e.to_string())?;
    let corpus: Vec<Paragraph> = (0..1000)
        .map(|i| {
            let words: Vec<String> = (0..rng.random_range(5..30))
                .map(|_| random_word(&mut rng, alphabet, 2..=8))
                .collect();
            para(i, format!("P{i}"), words.join(" "))
        })
        .collect();
    let bank = build_bank(corpus, &e).map_err(|e| e.to_string())?;
    let keys: Vec<Vec<f64>> = (0..bank.len())
        .map(|i| bank.key(i).iter().map(|&x| x as f64).collect())
        .collect();
    let ids: Vec<u32> = bank.paragraphs().iter().map(|p| p.id).collect();
    let mut compared = 0;
    for _ in 0..100 {
        let text: Vec<String> = (0..rng.random_range(3..12))
            .map(|_| random_word(&mut rng, alphabet, 2..=8))
            .collect();
        let q = e.embed(&text.join(" ")).map_err(|e| e.to_string())?;
        let qf: Vec<f64> = q.as_slice().iter().map(|&x| x as f64).collect();
        let mut full: Vec<(u32, f64)> = keys
            .iter()
            .zip(&ids)
            .map(|(k, &id)| {
                let d = k
                    .iter()
                    .zip(&qf)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (id, d)
            })
            .collect();
        full.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for k in [1usize, 5, 10] {
            let hits = bank.knn(&q, k).map_err(|e| e.to_string())?;
            ensure(hits.len() == k, || {
                format!("k={k}: got {} hits", hits.len())
            })?;
            for (h, (id, d)) in hits.iter().zip(&full) {
                ensure(h.paragraph_id == *id, || {
                    format!("k={k}: rank {} id {} vs scan {id}", h.rank, h.paragraph_id)
                })?;
                ensure((h.distance as f64 - d).abs() <= 1e-5, || {
                    format!("k={k}: distance {} vs scan {d}", h.distance)
                })?;
            }
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{compared} query/k pairs match full scan in {elapsed:.2?}"
    ))
}

fn bank_files(path: &Path) -> Result<Vec<Vec<u8>>, String> {
    [
        path.to_path_buf(),
        arr_core::bank::sidecar_path(path),
        arr_core::bank::meta_path(path),
    ]
    .iter()
    .map(|p| fs::read(p).map_err(|e| format!("{}: {e}", p.display())))
    .collect()
}

fn copy_bank(from: &Path, to: &Path) -> Result<(), String> {
    let pairs = [
        (from.to_path_buf(), to.to_path_buf()),
        (
            arr_core::bank::sidecar_path(from),
            arr_core::bank::sidecar_path(to),
        ),
        (
            arr_core::bank::meta_path(from),
            arr_core::bank::meta_path(to),
        ),
    ];
    for (a, b) in pairs {
        fs::copy(&a, &b).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn persistence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dim = 32;
    let entries = (0..10_000u32)
        .map(|i| {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let v = EmbeddingVector::new(v).map_err(|e| e.to_string())?;
            Ok((v, para(i * 3 + 1, format!("T{i}"), format!("body {i} 条"))))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let bank = KnowledgeBank::from_parts(entries, "random").map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = dir.path().join("a.bin");
    let second = dir.path().join("b.bin");
    bank.save(&first).map_err(|e| e.to_string())?;
    let loaded = KnowledgeBank::load(&first).map_err(|e| e.to_string())?;
    loaded.save(&second).map_err(|e| e.to_string())?;
    let (a, b) = (bank_files(&first)?, bank_files(&second)?);
    ensure(a == b, || "second save differs from first".into())?;

    let bad = dir.path().join("bad.bin");
    copy_bank(&first, &bad)?;
    let mut bytes = a[0].clone();
    bytes[0] = b'X';
    fs::write(&bad, &bytes).map_err(|e| e.to_string())?;
    ensure(
        matches!(KnowledgeBank::load(&bad), Err(BankError::BadMagic { .. })),
        || "corrupted magic not rejected as BadMagic".into(),
    )?;

    let short = dir.path().join("short.bin");
    copy_bank(&first, &short)?;
    fs::write(&short, &a[0][..a[0].len() - 7]).map_err(|e| e.to_string())?;
    ensure(
        matches!(
            KnowledgeBank::load(&short),
            Err(BankError::Truncated { .. })
        ),
        || "truncated file not rejected as Truncated".into(),
    )?;
    Ok(format!(
        "10000 entries, {} vector bytes byte-identical; BadMagic and Truncated rejected",
        a[0].len()
    ))
}

fn metric_fixtures() -> Check {
    let examples = [
        EvalExample {
            id: json!(1),
            query: String::new(),
            gold_titles: ["Article A".to_string()].into(),
        },
        EvalExample {
            id: json!(2),
            query: String::new(),
            gold_titles: ["Article B".to_string()].into(),
        },
    ];
    let catalog: BTreeSet<String> = ["Article A", "Article B", "Article C", "Article D"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let answers = ["See Article A and Article C.", "Article D applies."];
    let s = micro_f1(&examples, &answers, &catalog, MatchRule::Normalized)
        .map_err(|e| e.to_string())?;
    ensure(
        s.precision == 1.0 / 3.0 && s.recall == 0.5 && s.f1 == 0.4,
        || format!("micro P/R/F1 = {}/{}/{}", s.precision, s.recall, s.f1),
    )?;

    let run = RankedRun::new(json!(1), vec![10, 11, 12, 13, 14], [10, 12].into());
    let map = mean_average_precision(std::slice::from_ref(&run)).map_err(|e| e.to_string())?;
    ensure((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9, || {
        format!("MAP = {map}")
    })?;

    // Relevant ids sit at ranks 1, 4 and 12.
    let ranked: Vec<u32> = (1..=15).collect();
    let runs = [
        RankedRun::new(json!(1), ranked.clone(), [1].into()),
        RankedRun::new(json!(2), ranked.clone(), [4].into()),
        RankedRun::new(json!(3), ranked, [12].into()),
    ];
    let r5 = recall_at_k(&runs, 5).map_err(|e| e.to_string())?;
    ensure(r5 == 2.0 / 3.0, || format!("recall@5 = {r5}"))?;

    let run = RankedRun::new(json!(1), vec![5, 6, 7, 8, 9, 10], [6, 9, 10].into());
    let p5 = precision_at_k(&run, 5).map_err(|e| e.to_string())?;
    ensure(p5 == 0.4, || format!("P@5 = {p5}"))?;
    Ok(format!(
        "P={:.6} R={} F1={} MAP={map:.6} recall@5={r5:.6} P@5={p5}",
        s.precision, s.recall, s.f1
    ))
}

/// Encodes `i` in letters that never occur in evidence text.
fn tag(i: usize) -> String {
    let a = b"nopqrstuvwxyz";
    [i / 169, (i / 13) % 13, i % 13]
        .iter()
        .map(|&d| a[d] as char)
        .collect()
}

fn answer_retrieval_direction() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let evidence_alpha = b"abcdefghijklm";
    let query_alpha = b"nopqrstuvwxyz";
    let n = 200;
    let corpus: Vec<Paragraph> = (0..n)
        .map(|i| {
            let words: Vec<String> = (0..30)
                .map(|_| random_word(&mut rng, evidence_alpha, 3..=7))
                .collect();
            para(i as u32, format!("Provision {i}"), words.join(" "))
        })
        .collect();

    let mut queries = Vec::with_capacity(n);
    let mut rules = Vec::with_capacity(n);
    let mut min_overlap = f64::INFINITY;
    let mut max_query_overlap = 0.0f64;
    for p in &corpus {
        let words: Vec<&str> = p.body.split(' ').collect();
        // Paraphrase: unique tag, filler in a disjoint alphabet, one shared term.
        let mut q: Vec<String> = vec![tag(p.id as usize)];
        q.extend((0..4).map(|_| random_word(&mut rng, query_alpha, 3..=6)));
        q.push(words[rng.random_range(0..words.len())].to_string());
        let query = q.join(" ");
        // Draft: a contiguous quote of 60% of the body.
        let take = words.len() * 3 / 5;
        let from = rng.random_range(0..=words.len() - take);
        let draft = words[from..from + take].join(" ");

        let target = bigrams(&p.key_text());
        let quoted = bigrams(&draft).intersection(&target).count() as f64 / target.len() as f64;
        let paraphrased =
            bigrams(&query).intersection(&target).count() as f64 / target.len() as f64;
        min_overlap = min_overlap.min(quoted);
        max_query_overlap = max_query_overlap.max(paraphrased);
        rules.push(ScriptRule::new(query.clone(), draft));
        queries.push(QueryItem {
            id: json!(p.id),
            query,
        });
    }
    ensure(min_overlap >= 0.4, || {
        format!("a draft quotes only {min_overlap:.3} of its target bigrams")
    })?;
    ensure(max_query_overlap < min_overlap, || {
        format!("query overlap {max_query_overlap:.3} not below draft overlap {min_overlap:.3}")
    })?;
    for (i, a) in queries.iter().enumerate() {
        for (j, b) in queries.iter().enumerate() {
            ensure(i == j || !b.query.contains(&a.query), || {
                format!("query {i} is inside query {j}")
            })?;
        }
    }

    let e = HashEmbedder::new(64).map_err(|e| e.to_string())?;
    let bank = build_bank(corpus, &e).map_err(|e| e.to_string())?;
    let drafter = scripted(rules, "");
    let relevant: Vec<BTreeSet<u32>> = (0..n as u32).map(|i| [i].into()).collect();
    let report = retrieval_ablation(&bank, &e, &drafter, &queries, &relevant, 10, 4)?;
    ensure(report.failures.is_empty(), || {
        format!("{} queries failed", report.failures.len())
    })?;
    let r1 = &report.rows[0];
    ensure(r1.answer_based - r1.query_based >= 0.2, || {
        format!(
            "recall@1 answer {} vs query {}",
            r1.answer_based, r1.query_based
        )
    })?;
    for row in &report.rows {
        ensure(row.answer_based >= row.query_based, || {
            format!(
                "recall@{} answer {} < query {}",
                row.k, row.answer_based, row.query_based
            )
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    let r10 = &report.rows[9];
    Ok(format!(
        "recall@1 answer {:.3} vs query {:.3}, recall@10 {:.3} vs {:.3}; min draft overlap {min_overlap:.2}; {elapsed:.2?}",
        r1.answer_based, r1.query_based, r10.answer_based, r10.query_based
    ))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run_arr(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_arr"))
        .args(args)
        .env_remove("ARR_API_KEY")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("arr {}: {}", args[0], String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(out.stdout)
}

fn pipeline_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bank = dir.path().join("bank.bin");
    let config = fixtures().join("config.toml");
    let (config, bank) = (config.to_str().unwrap(), bank.to_str().unwrap());
    run_arr(&["build-bank", "--config", config, "--bank", bank])?;
    let mut outputs = Vec::new();
    for concurrency in ["4", "4", "4", "1"] {
        outputs.push(run_arr(&[
            "pipeline",
            "--config",
            config,
            "--bank",
            bank,
            "--concurrency",
            concurrency,
        ])?);
    }
    let lines = outputs[0].iter().filter(|&&b| b == b'\n').count();
    ensure(lines == 5, || format!("expected 5 records, got {lines}"))?;
    ensure(outputs.iter().all(|o| o == &outputs[0]), || {
        "pipeline output differs between runs".into()
    })?;
    Ok(format!(
        "5 records, {} bytes identical over 3 runs at concurrency 4 and 1 run at 1",
        outputs[0].len()
    ))
}

fn budget_safety() -> Check {
    let mut runner = TestRunner::new(PropConfig {
        cases: 512,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        "[a-z 刑法]{1,80}",
        "[a-z 条]{1,80}",
        "[a-z 罪]{0,200}",
        prop::collection::vec("[a-z 第]{1,300}", 0..8),
        1usize..600,
    );
    runner
        .run(&strategy, |(instruction, query, draft, bodies, budget)| {
            let evidence: Vec<Paragraph> = bodies
                .iter()
                .enumerate()
                .map(|(i, b)| para(i as u32, format!("Title {i}"), b.clone()))
                .collect();
            let core = format!(
                "{INSTRUCTION_HEADER}\n{instruction}\n\n{QUERY_HEADER}\n{query}\n\n{DRAFT_HEADER}\n{draft}\n\n{EVIDENCE_HEADER}\n"
            );
            match assemble_revision_prompt(&instruction, &query, &draft, &evidence, budget) {
                Ok(out) => {
                    prop_assert!(estimate_tokens(&out.text) <= budget);
                    prop_assert!(out.text.starts_with(&core));
                    let n = out.evidence_included;
                    for (i, body) in bodies.iter().enumerate() {
                        let kept = out.text.contains(&format!("[{}] Title {i}\n{body}\n", i + 1));
                        prop_assert_eq!(kept, i < n);
                    }
                    if n < evidence.len() {
                        // One more entry would not have fit.
                        let more = assemble_revision_prompt(&instruction, &query, &draft, &evidence[..n + 1], usize::MAX)
                            .unwrap();
                        prop_assert!(estimate_tokens(&more.text) > budget);
                    }
                }
                Err(_) => prop_assert!(estimate_tokens(&core) > budget),
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("512 random cases within budget, evidence kept as a rank prefix, core intact".into())
}

fn iteration_fixpoint() -> Check {
    let mut runner = TestRunner::new(PropConfig {
        cases: 128,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        prop::collection::vec("[a-f]{3,12}", 3..10),
        prop::collection::vec(("[a-f]{2}", "[a-f]{3,12}"), 1..6),
        1usize..4,
        1usize..7,
    );
    let fixpoints = std::cell::Cell::new(0usize);
    runner
        .run(&strategy, |(bodies, responses, k, iterations)| {
            let e = HashEmbedder::new(32).unwrap();
            let corpus: Vec<Paragraph> = bodies
                .iter()
                .enumerate()
                .map(|(i, b)| para(i as u32, format!("T{i}"), b.clone()))
                .collect();
            let bank = build_bank(corpus, &e).unwrap();
            let rules = responses
                .iter()
                .map(|(p, r)| ScriptRule::new(p.clone(), r.clone()))
                .collect();
            let gws = Gateways {
                drafter: scripted(vec![], "abcdef"),
                reviser: scripted(rules, "fedcba"),
            };
            let cfg = PipelineConfig {
                k,
                iterations,
                ..Default::default()
            };
            let rec = Pipeline::new(&bank, &e, &gws, cfg)
                .unwrap()
                .run_query("q")
                .unwrap();
            prop_assert_eq!(rec.iterations.len(), iterations);
            let t = &rec.iterations;
            for n in 1..t.len() {
                if t[n].evidence_ids() == t[n - 1].evidence_ids() {
                    for later in &t[n..] {
                        prop_assert_eq!(&later.revised, &t[n - 1].revised);
                    }
                    fixpoints.set(fixpoints.get() + 1);
                }
            }
            prop_assert_eq!(&rec.final_answer, &t[t.len() - 1].revised);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "128 random traces hold; {} repeated-evidence rounds checked",
        fixpoints.get()
    ))
}

/// Independent reference: bigram strings, FNV-1a over their UTF-8 bytes.
fn oracle(text: &str, dim: usize) -> Vec<f64> {
    let chars: Vec<char> = text.chars().collect();
    let mut v = vec![0.0f64; dim];
    for i in 1..chars.len() {
        let mut buf = String::new();
        buf.push(chars[i - 1]);
        buf.push(chars[i]);
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in buf.as_bytes() {
            h = (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3);
        }
        v[(h % dim as u64) as usize] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    v
}

fn random_scalar(rng: &mut ChaCha8Rng) -> char {
    loop {
        let c = match rng.random_range(0..4) {
            0 => rng.random_range(0x20u32..0x7f),
            1 => rng.random_range(0x4e00u32..0x9fff),
            2 => rng.random_range(0x80u32..0x1_0000),
            _ => rng.random_range(0x1_0000u32..0x11_0000),
        };
        if let Some(c) = char::from_u32(c) {
            return c;
        }
    }
}

fn embedder_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut degenerate = 0;
    for case in 0..1000 {
        let len = rng.random_range(0..40);
        let text: String = (0..len).map(|_| random_scalar(&mut rng)).collect();
        let dim = rng.random_range(1..=256);
        let raw = oracle(&text, dim);
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = hash_embed(&text, dim);
        ensure(got.dim() == dim, || {
            format!("case {case}: dim {}", got.dim())
        })?;
        for (i, (g, r)) in got.as_slice().iter().zip(&raw).enumerate() {
            let want = if norm > 0.0 { r / norm } else { 0.0 };
            ensure((*g as f64 - want).abs() <= 1e-6, || {
                format!("case {case} {text:?} dim {dim}: bucket {i} = {g}, oracle {want}")
            })?;
        }
        if norm > 0.0 {
            ensure((got.norm() - 1.0).abs() <= 1e-5, || {
                format!("case {case}: norm {}", got.norm())
            })?;
        } else {
            degenerate += 1;
            ensure(got.is_zero(), || {
                format!("case {case}: degenerate input not zero")
            })?;
        }
    }
    Ok(format!(
        "1000 random strings match; unit norm on all {} non-degenerate",
        1000 - degenerate
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("knn matches full scan", knn_oracle),
        ("bank persistence", persistence),
        ("metric fixtures", metric_fixtures),
        (
            "answer-based beats query-based retrieval",
            answer_retrieval_direction,
        ),
        ("pipeline determinism", pipeline_determinism),
        ("prompt budget safety", budget_safety),
        ("iteration fixpoint", iteration_fixpoint),
        ("hash embedder oracle", embedder_oracle),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", n + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
