//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore};
use valuesrag::backends::{
    CacheRecord, EchoGenerator, GenerationService, HashAnswerer, HashEmbedder, OverlapReranker, ResponseCache,
};
use valuesrag::corpus::{stratified_split, Corpus, CorpusRole, Fraction, ResponseScale, TopicSplit};
use valuesrag::eval::{
    ablate_k, binarize, bonferroni, holm_bonferroni, paired_t_test, run_evaluation, BinaryLabel, EvalContext,
    EvalDataset,
};
use valuesrag::index::{build_index, cosine_similarity, retrieve_top_n, EmbeddingIndex};
use valuesrag::prompt::{Method, MethodKind, PromptBuilder, TemplateSet};
use valuesrag::summarize::{run_summary_pipeline, scan_for_leakage, PipelineOptions, SummaryMode, SummaryStore};
use valuesrag::synth::{generate_corpus, wvs_topics, HiddenTruth, OracleAnswerer, SynthConfig, TopicSpec};
use valuesrag::util::substream;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// 1 ------------------------------------------------------------------------

fn retrieval_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(1, &["acceptance", "retrieval"]);
    let ids: Vec<String> = (0..1000).map(|i| format!("r{i:04}")).collect();
    let rows: Vec<Vec<f32>> = (0..1000).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let index = EmbeddingIndex::from_rows(ids.clone(), rows.clone(), "acceptance").map_err(|e| e.to_string())?;
    for q in 0..20 {
        let query: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = retrieve_top_n(&index, &query, 100, None).map_err(|e| e.to_string())?;
        let qf: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        let mut all: Vec<(f64, &str)> = rows
            .iter()
            .zip(&ids)
            .map(|(r, id)| {
                let rf: Vec<f64> = r.iter().map(|&x| x as f64).collect();
                (cosine_similarity(&rf, &qf).unwrap(), id.as_str())
            })
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let want: Vec<&str> = all[..100].iter().map(|(_, id)| *id).collect();
        let got: Vec<&str> = got.iter().map(|c| c.respondent_id.as_str()).collect();
        check(got == want, format!("query {q}: top-100 differs from exhaustive sort"))?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("20 queries over 1000x64 match, {elapsed:.2?}"))
}

// 2 ------------------------------------------------------------------------

fn cosine_properties() -> Outcome {
    let mut rng = substream(2, &["acceptance", "cosine"]);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let d = rng.random_range(1..=64);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let c: f64 = rng.random_range(1e-3..1e3);
        let ab = cosine_similarity(&a, &b).map_err(|e| e.to_string())?;
        let ba = cosine_similarity(&b, &a).map_err(|e| e.to_string())?;
        let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
        let cab = cosine_similarity(&scaled, &b).map_err(|e| e.to_string())?;
        let aa = cosine_similarity(&a, &a).map_err(|e| e.to_string())?;
        for (what, err) in [("symmetry", (ab - ba).abs()), ("scale", (cab - ab).abs()), ("self", (aa - 1.0).abs())] {
            check(err <= 1e-9, format!("pair {i}: {what} off by {err:e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("10000 pairs, max deviation {worst:.1e}"))
}

// 3 ------------------------------------------------------------------------

fn binarization() -> Outcome {
    let mut items = 0;
    for max in 2..=11i64 {
        let scale = ResponseScale::new(1, max);
        let mut prev = BinaryLabel::Disagree;
        for r in 1..=max {
            let got = binarize(r, &scale).map_err(|e| e.to_string())?;
            let want = if (r as f64) <= (1 + max) as f64 / 2.0 { BinaryLabel::Disagree } else { BinaryLabel::Agree };
            check(got == want, format!("scale 1-{max}, code {r}: {got:?}"))?;
            check(got >= prev, format!("scale 1-{max}: not monotone at {r}"))?;
            prev = got;
            items += 1;
        }
    }
    Ok(format!("{items} codes over scales 1-2..1-11"))
}

// 4 ------------------------------------------------------------------------

fn statistics() -> Outcome {
    let t = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let tv = t.t.ok_or("t undefined")?;
    check((tv - 2.0 * 3f64.sqrt()).abs() < 1e-3, format!("t = {tv}"))?;
    check((t.p - 0.0742).abs() < 1e-3, format!("p = {}", t.p))?;
    let holm = holm_bonferroni(&[0.01, 0.04, 0.03], 0.05).map_err(|e| e.to_string())?;
    check(holm == [true, false, false], format!("holm = {holm:?}"))?;
    let mut rng = substream(4, &["acceptance", "holm"]);
    for i in 0..1000 {
        let m = rng.random_range(1..=20);
        let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(3)).collect();
        let h = holm_bonferroni(&p, 0.05).map_err(|e| e.to_string())?.iter().filter(|&&x| x).count();
        let b = bonferroni(&p, 0.05).map_err(|e| e.to_string())?.iter().filter(|&&x| x).count();
        check(h >= b, format!("vector {i}: holm {h} < bonferroni {b}"))?;
    }
    Ok(format!("t={tv:.4} p={:.4}, holm rejects [0.01] only, 1000 vectors", t.p))
}

// 5 ------------------------------------------------------------------------

fn synth_config(name: &str, role: CorpusRole, prefix: &str, n: usize, topics: Vec<TopicSpec>, seed: u64) -> SynthConfig {
    SynthConfig {
        name: name.into(),
        role,
        id_prefix: prefix.into(),
        n_respondents: n,
        topics,
        coupling: 0.9,
        seed,
        ..SynthConfig::default()
    }
}

fn split_allocation() -> Outcome {
    let (corpus, _) = generate_corpus(&synth_config("wvs", CorpusRole::Retrieval, "r", 3, wvs_topics(), 0))
        .map_err(|e| e.to_string())?;
    let f = Fraction::new(1, 5).map_err(|e| e.to_string())?;
    // floor(0.2 n) per topic, plus one for the three largest remainders:
    // idx 4 (0.8), idx 10 (0.6) and one of the 0.4 tie between idx 2 and idx 9
    let floors = [9usize, 2, 9, 1, 1, 2, 4, 1, 1, 2, 4, 7, 5];
    let mut tie_winners = std::collections::BTreeSet::new();
    for seed in 0..32 {
        let s = stratified_split(&corpus, f, seed).map_err(|e| e.to_string())?;
        check(s.validation_qids.len() == 51, format!("seed {seed}: {} validation", s.validation_qids.len()))?;
        let alloc: Vec<usize> = s.allocation.iter().map(|(_, n)| *n).collect();
        let mut bumps: Vec<usize> = (0..13).filter(|&i| alloc[i] == floors[i] + 1).collect();
        check(alloc.iter().zip(&floors).all(|(a, f)| a == f || *a == f + 1), format!("allocation {alloc:?}"))?;
        bumps.retain(|&i| i != 4 && i != 10);
        check(alloc[4] == 2 && alloc[10] == 5 && bumps.len() == 1, format!("allocation {alloc:?}"))?;
        check(bumps[0] == 2 || bumps[0] == 9, format!("allocation {alloc:?}"))?;
        tie_winners.insert(bumps[0]);
        let again = stratified_split(&corpus, f, seed).map_err(|e| e.to_string())?;
        check(again == s, format!("seed {seed}: not deterministic"))?;
    }
    let mut rng = substream(5, &["acceptance", "split"]);
    for i in 0..100 {
        let topics: Vec<TopicSpec> = (0..rng.random_range(1..=8))
            .map(|t| TopicSpec { name: format!("t{t}"), questions: rng.random_range(1..=30) })
            .collect();
        let (c, _) = generate_corpus(&synth_config("rand", CorpusRole::Retrieval, "r", 2, topics, i))
            .map_err(|e| e.to_string())?;
        let f = Fraction::new(rng.random_range(1..10), 10).map_err(|e| e.to_string())?;
        let s = stratified_split(&c, f, rng.next_u64()).map_err(|e| e.to_string())?;
        let all: std::collections::BTreeSet<String> = c.values_questions().map(|q| q.id.clone()).collect();
        check(s.train_qids.is_disjoint(&s.validation_qids), format!("corpus {i}: overlap"))?;
        let union: std::collections::BTreeSet<String> = s.train_qids.union(&s.validation_qids).cloned().collect();
        check(union == all, format!("corpus {i}: coverage"))?;
        check(s.validation_qids.len() as u64 == f.round_mul(all.len() as u64), format!("corpus {i}: total"))?;
    }
    Ok(format!("total 51, tie resolved both ways ({tie_winners:?}), 100 random corpora"))
}

// 6, 7 ---------------------------------------------------------------------

struct Built {
    retrieval: Corpus,
    test: Corpus,
    split: TopicSplit,
    rstore: SummaryStore,
    tstore: SummaryStore,
    index: EmbeddingIndex,
    hidden: HiddenTruth,
}

fn small_topics() -> Vec<TopicSpec> {
    (0..13).map(|i| TopicSpec { name: format!("topic{i:02}"), questions: 4 }).collect()
}

/// synth, split, summarize and index with mock backends.
fn build(dir: &Path, n_retrieval: usize, n_test: usize) -> Result<Built, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let (retrieval, hidden) =
        generate_corpus(&synth_config("synth-wvs", CorpusRole::Retrieval, "r", n_retrieval, small_topics(), 11))
            .map_err(|e| err(&e))?;
    let (test, _) = generate_corpus(&synth_config("synth-test", CorpusRole::Test, "t", n_test, small_topics(), 11))
        .map_err(|e| err(&e))?;
    fs::write(dir.join("retrieval.jsonl"), retrieval.to_canonical_bytes()).map_err(|e| err(&e))?;
    let split = stratified_split(&retrieval, Fraction::new(1, 5).map_err(|e| err(&e))?, 3).map_err(|e| err(&e))?;
    let cache = ResponseCache::new(dir.join("cache")).map_err(|e| err(&e))?;
    let svc = GenerationService::new(Arc::new(EchoGenerator::new()), Some(cache));
    let templates = TemplateSet::builtin();
    let full = PipelineOptions { mode: SummaryMode::Full, fingerprint: "acceptance".into(), parallelism: 4 };
    let demo = PipelineOptions { mode: SummaryMode::DemographicsOnly, ..full.clone() };
    let (rstore, report) =
        run_summary_pipeline(&retrieval, Some(&split), &svc, &templates, &dir.join("r.jsonl"), &full).map_err(|e| err(&e))?;
    check(report.failures.is_empty(), "summary failures")?;
    let (tstore, _) = run_summary_pipeline(&test, None, &svc, &templates, &dir.join("t.jsonl"), &demo).map_err(|e| err(&e))?;
    let index = build_index(&rstore, &HashEmbedder::new(256), 64).map_err(|e| err(&e))?;
    index.write(&dir.join("index.bin")).map_err(|e| err(&e))?;
    Ok(Built { retrieval, test, split, rstore, tstore, index, hidden })
}

fn leakage() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = build(dir.path(), 60, 10)?;
    let records: Vec<CacheRecord> = ResponseCache::new(dir.path().join("cache"))
        .and_then(|c| c.records())
        .map_err(|e| e.to_string())?;
    let summaries = records.iter().filter(|r| r.tag.starts_with("summary/")).count();
    check(summaries > 0, "no summarization prompts recorded")?;
    let hits = scan_for_leakage(&records, &b.retrieval, &b.split);
    check(hits.is_empty(), format!("{} hits, first {:?}", hits.len(), hits.first()))?;
    Ok(format!("0 hits over {summaries} summarization prompts"))
}

fn determinism() -> Outcome {
    let run = |dir: &Path| -> Result<String, String> {
        let b = build(dir, 60, 20)?;
        let answer = GenerationService::new(Arc::new(HashAnswerer::new()), None);
        let (emb, rr, builder) = (HashEmbedder::new(256), OverlapReranker::new(), PromptBuilder::default());
        let ctx = EvalContext::new(&b.rstore, &b.index, &emb, &rr, &answer, &builder);
        let datasets = [
            EvalDataset { corpus: &b.test, store: &b.tstore, split: None },
            EvalDataset { corpus: &b.retrieval, store: &b.rstore, split: Some(&b.split) },
        ];
        let (report, _) = run_evaluation(&ctx, &datasets, &Method::all()).map_err(|e| e.to_string())?;
        Ok(report.to_json())
    };
    let (d1, d2) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (r1, r2) = (run(d1.path())?, run(d2.path())?);
    check(r1 == r2, "reports differ")?;
    for f in ["retrieval.jsonl", "r.jsonl", "t.jsonl", "index.bin"] {
        let (a, b) = (fs::read(d1.path().join(f)), fs::read(d2.path().join(f)));
        check(matches!((&a, &b), (Ok(a), Ok(b)) if a == b), format!("{f} differs"))?;
    }
    Ok("corpus, summary stores, index and report identical across two runs".into())
}

// 8 ------------------------------------------------------------------------

fn directional() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = build(dir.path(), 500, 100)?;
    let answer = GenerationService::new(Arc::new(OracleAnswerer::new(&b.retrieval, &b.hidden)), None);
    let (emb, rr, builder) = (HashEmbedder::new(256), OverlapReranker::new(), PromptBuilder::default());
    let ctx = EvalContext::new(&b.rstore, &b.index, &emb, &rr, &answer, &builder);
    let datasets = [EvalDataset { corpus: &b.test, store: &b.tstore, split: None }];
    let methods = [Method::new(MethodKind::ZeroShot), Method::values_rag(3)];
    let (report, _) = run_evaluation(&ctx, &datasets, &methods).map_err(|e| e.to_string())?;
    let acc = |m: &str| report.cell("synth-test", m).and_then(|c| c.accuracy).ok_or(format!("no accuracy for {m}"));
    let (zero, rag) = (acc("zero_shot")?, acc("values_rag(k=3)")?);
    let elapsed = start.elapsed();
    let msg = format!("zero_shot {zero:.4}, values_rag(k=3) {rag:.4}, {elapsed:.1?}");
    check(rag - zero >= 0.05, msg.clone())?;
    check(elapsed < Duration::from_secs(120), msg.clone())?;
    Ok(msg)
}

// 9 ------------------------------------------------------------------------

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = build(dir.path(), 40, 10)?;
    let answer = GenerationService::new(Arc::new(HashAnswerer::new()), None);
    let (emb, rr, builder) = (HashEmbedder::new(256), OverlapReranker::new(), PromptBuilder::default());
    let ctx = EvalContext::new(&b.rstore, &b.index, &emb, &rr, &answer, &builder);
    let datasets = [
        EvalDataset { corpus: &b.test, store: &b.tstore, split: None },
        EvalDataset { corpus: &b.retrieval, store: &b.rstore, split: Some(&b.split) },
    ];
    let (report, _) = ablate_k(&ctx, &datasets, &[1, 3, 5, 10], 0).map_err(|e| e.to_string())?;
    let want: Vec<String> = [1, 3, 5, 10].iter().map(|k| format!("values_rag(k={k})")).collect();
    check(report.methods == want, format!("rows {:?}", report.methods))?;
    for d in &report.datasets {
        let rows = report.cells.iter().filter(|c| &c.dataset == d).count();
        check(rows == 4, format!("{d}: {rows} rows"))?;
    }
    let hex = |s: &str| s.len() == 64 && s.bytes().all(|c| c.is_ascii_hexdigit());
    check(report.cells.iter().all(|c| hex(&c.provenance)), "cell without provenance fingerprint")?;
    Ok(format!("{} datasets x 4 k-rows with provenance", report.datasets.len()))
}

// 10 -----------------------------------------------------------------------

fn index_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = substream(10, &["acceptance", "index-format"]);
    for i in 0..50 {
        let dim = match i {
            0 => 1,
            1 => 768,
            _ => rng.random_range(1..=800),
        };
        let n = rng.random_range(1..=40);
        let ids: Vec<String> = (0..n).map(|j| format!("resp-{i}-{j}")).collect();
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                let mut r: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                r[0] += 2.0;
                r
            })
            .collect();
        let index = EmbeddingIndex::from_rows(ids, rows, format!("backend-{i}")).map_err(|e| e.to_string())?;
        let (p1, p2) = (dir.path().join(format!("{i}a.bin")), dir.path().join(format!("{i}b.bin")));
        index.write(&p1).map_err(|e| e.to_string())?;
        let back = EmbeddingIndex::read(&p1).map_err(|e| e.to_string())?;
        back.write(&p2).map_err(|e| e.to_string())?;
        let (a, b) = (fs::read(&p1).map_err(|e| e.to_string())?, fs::read(&p2).map_err(|e| e.to_string())?);
        check(a == b, format!("index {i} (d={dim}) not bit-identical"))?;
    }
    Ok("50 indices, d=1 and d=768 included".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("retrieval oracle equivalence", retrieval_oracle),
        ("cosine properties", cosine_properties),
        ("binarization", binarization),
        ("statistics oracle", statistics),
        ("split allocation", split_allocation),
        ("leakage freedom", leakage),
        ("end-to-end determinism", determinism),
        ("values_rag beats zero_shot", directional),
        ("ablation harness", ablation),
        ("index format round-trip", index_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
                failed += 1;
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
