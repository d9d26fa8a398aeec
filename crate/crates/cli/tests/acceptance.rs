//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnr_core::embed::{EmbedClient, EmbeddingVector};
use rnr_core::eval::{
    bleu, discrepancy, discrepancy_batch, discrepancy_from_cosine, mc_accuracy, rouge_l, run_eval, token_f1,
    DiscrepancyCase, EvalExample, EvalSettings, LabelExtractor, Metric,
};
use rnr_core::forge::{annotate_sft, export_training_files, gen_cpt, AnnotateOptions, QaPair, SftRecord};
use rnr_core::ingest::{build_title_tree_str, split_tree, split_tree_traced, Answer, ChunkOrigin, ExamItem};
use rnr_core::par::par_map;
use rnr_core::pipeline::{fuse, Mode, Pipeline, ScoredDoc};
use rnr_core::provider::{ChatMessage, FnChat, MockEmbedder, ProviderError};
use rnr_core::rewrite::{parse_rewrites, PromptTemplate};
use rnr_core::store::VectorIndex;
use rnr_core::tokenize::{Tokenizer, WordCjkTokenizer};
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- chunking

fn is_heading(line: &str) -> bool {
    let hashes = line.bytes().take_while(|&b| b == b'#').count();
    (1..=6).contains(&hashes) && line[hashes..].starts_with(' ')
}

fn body_paragraphs(md: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in md.lines() {
        if line.trim().is_empty() || is_heading(line) {
            if !cur.is_empty() {
                out.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line.trim_end());
        }
    }
    if !cur.is_empty() {
        out.push(cur.join("\n"));
    }
    out
}

fn generated_document(rng: &mut ChaCha8Rng) -> String {
    let mut blocks = Vec::new();
    let paragraph = |rng: &mut ChaCha8Rng| -> String {
        let n = if rng.gen_bool(0.1) { rng.gen_range(150..400) } else { rng.gen_range(1..60) };
        let cjk = rng.gen_bool(0.15);
        (0..n)
            .map(|i| if cjk { ["规", "则", "资", "产"][i % 4].to_string() } else { format!("w{}", rng.gen_range(0..500)) })
            .collect::<Vec<_>>()
            .join(if rng.gen_bool(0.7) { " " } else { ", " })
    };
    if rng.gen_bool(0.3) {
        blocks.push(paragraph(rng));
    }
    for s in 0..rng.gen_range(0..25) {
        blocks.push(format!("{} Section {s}", "#".repeat(rng.gen_range(1..=4))));
        for _ in 0..rng.gen_range(0..4) {
            blocks.push(paragraph(rng));
        }
    }
    blocks.join("\n\n") + "\n"
}

fn check_chunking(md: &str, budget: usize) -> Result<usize, String> {
    let tok = WordCjkTokenizer;
    let tree = build_title_tree_str(md, "gen", &tok);
    let traced = split_tree_traced(&tree, budget, &tok).map_err(|e| e.to_string())?;
    let rebuilt: Vec<String> = traced.iter().flat_map(|t| body_paragraphs(&t.chunk.text)).collect();
    ensure(rebuilt == body_paragraphs(md), || "body text not reconstructed".into())?;
    for t in &traced {
        let c = &t.chunk;
        let body: usize = body_paragraphs(&c.text).iter().map(|p| tok.count(p)).sum();
        ensure(body == c.token_count, || format!("{} token count {} != {body}", c.chunk_id, c.token_count))?;
        let (sum, next, single) = match &t.origin {
            ChunkOrigin::Whole => (c.token_count, None, false),
            ChunkOrigin::Siblings { unit_tokens, next_tokens } => (unit_tokens.iter().sum(), *next_tokens, false),
            ChunkOrigin::Paragraphs { paragraph_tokens, next_tokens } => {
                (paragraph_tokens.iter().sum(), *next_tokens, paragraph_tokens.len() == 1)
            }
        };
        ensure(sum <= budget || single, || format!("{} over budget: {sum} > {budget}", c.chunk_id))?;
        if let Some(n) = next {
            ensure(sum + n > budget, || format!("{} not greedy-maximal", c.chunk_id))?;
        }
    }
    Ok(traced.len())
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let docs: Vec<(String, usize)> = (0..120)
        .map(|_| {
            let d = generated_document(&mut rng);
            (d, rng.gen_range(32..300))
        })
        .collect();
    let mut chunks = 0;
    for (i, (md, budget)) in docs.iter().enumerate() {
        chunks += check_chunking(md, *budget).map_err(|e| format!("doc {i}: {e}"))?;
    }
    let tok = WordCjkTokenizer;
    let run = |par: usize| {
        par_map(&docs, par, |_, (md, b)| split_tree(&build_title_tree_str(md, "gen", &tok), *b, &tok).unwrap())
    };
    ensure(run(1) == run(4), || "parallel chunking differs from sequential".into())?;
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs_f64() < 10.0, || format!("took {elapsed:?}"))?;
    Ok(format!("{} documents, {chunks} chunks, {:.2}s", docs.len(), elapsed.as_secs_f64()))
}

fn ac2() -> Outcome {
    let md = std::fs::read_to_string(root().join("fixtures/doc_demo.md")).map_err(|e| e.to_string())?;
    let chunks = split_tree(&build_title_tree_str(&md, "demo", &WordCjkTokenizer), 128, &WordCjkTokenizer)
        .map_err(|e| e.to_string())?;
    ensure(chunks.len() == 2, || format!("{} chunks, expected 2", chunks.len()))?;
    for (i, c) in chunks.iter().enumerate() {
        let golden = std::fs::read_to_string(root().join(format!("fixtures/doc_demo_split{}.md", i + 1)))
            .map_err(|e| e.to_string())?;
        ensure(c.text == golden.trim_end(), || format!("split {} differs from golden", i + 1))?;
    }
    Ok("2 chunks equal to the golden split fixtures".into())
}

// --------------------------------------------------------------- retrieval

fn ac3() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut queries = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.gen_range(1..=500);
        let mut entries: Vec<(String, Vec<f32>)> = Vec::with_capacity(n);
        for i in 0..n {
            let v: Vec<f32> = if i > 0 && rng.gen_bool(0.05) {
                entries[rng.gen_range(0..i)].1.clone()
            } else {
                (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
            };
            entries.push((format!("doc{:05}", rng.gen_range(0..1000) * 1000 + i), v));
        }
        let mut index = VectorIndex::new(64, "oracle", 1_700_000_000 + seed as i64);
        for (id, v) in &entries {
            index.insert(id.clone(), EmbeddingVector::new(v.clone()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        }
        let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        for _ in 0..4 {
            let q: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let k = rng.gen_range(1..=n.min(50));
            let mut want: Vec<(f64, &str)> = entries
                .iter()
                .map(|(id, v)| {
                    let dot: f64 = v.iter().zip(&q).map(|(a, b)| *a as f64 * *b as f64).sum();
                    ((dot / (norm(v) * norm(&q))).clamp(-1.0, 1.0), id.as_str())
                })
                .collect();
            want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
            want.truncate(k);
            let got = index.search(&EmbeddingVector::new(q).unwrap(), k).map_err(|e| e.to_string())?;
            let got_ids: Vec<&str> = got.iter().map(|d| d.chunk_id.as_str()).collect();
            let want_ids: Vec<&str> = want.iter().map(|w| w.1).collect();
            ensure(got_ids == want_ids, || format!("index {seed}: ordering differs from oracle"))?;
            queries += 1;
        }
        let path = dir.path().join(format!("{seed}.idx"));
        index.persist(&path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let loaded = VectorIndex::load(&path).map_err(|e| e.to_string())?;
        ensure(loaded.to_bytes() == bytes, || format!("index {seed}: round trip changed bytes"))?;
        ensure(index.to_bytes() == bytes, || format!("index {seed}: file differs from memory"))?;
    }
    Ok(format!("50 indexes, {queries} queries match the brute-force oracle; byte-identical round trips"))
}

fn ranked_lists() -> impl Strategy<Value = Vec<Vec<ScoredDoc>>> {
    let doc = (0u8..16, -100i32..=100).prop_map(|(id, s)| (format!("c{id:02}"), s as f64 / 100.0));
    prop::collection::vec(prop::collection::vec(doc, 0..10), 1..6).prop_map(|ls| {
        ls.into_iter()
            .enumerate()
            .map(|(r, l)| {
                let mut seen = HashSet::new();
                let mut docs: Vec<ScoredDoc> = l
                    .into_iter()
                    .filter(|(id, _)| seen.insert(id.clone()))
                    .map(|(chunk_id, score)| ScoredDoc { chunk_id, score, source_rewrite: r })
                    .collect();
                docs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
                docs
            })
            .collect()
    })
}

fn ac4() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&(ranked_lists(), 1usize..16), |(lists, k)| {
        let fused = fuse(&lists, k);
        // Pooled oracle: best score per chunk, earliest rewrite among equals.
        let mut best: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for d in lists.iter().flatten() {
            let e = best.entry(d.chunk_id.clone()).or_insert((d.score, d.source_rewrite));
            if d.score > e.0 || (d.score == e.0 && d.source_rewrite < e.1) {
                *e = (d.score, d.source_rewrite);
            }
        }
        let mut want: Vec<ScoredDoc> = best
            .into_iter()
            .map(|(chunk_id, (score, source_rewrite))| ScoredDoc { chunk_id, score, source_rewrite })
            .collect();
        want.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then_with(|| a.chunk_id.cmp(&b.chunk_id)));
        want.truncate(k);
        prop_assert_eq!(&fused, &want, "max-dedup rule");
        prop_assert_eq!(&fuse(std::slice::from_ref(&fused), k), &fused, "idempotence");
        let next = fuse(&lists, k + 1);
        prop_assert_eq!(&next[..fused.len()], &fused[..], "k-prefix monotonicity");
        let ids: HashSet<&str> = fused.iter().map(|d| d.chunk_id.as_str()).collect();
        if ids.len() != fused.len() || fused.len() > k {
            return Err(TestCaseError::fail("duplicate ids or more than k results"));
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("1000 randomized cases: max-dedup oracle, idempotence, k-prefix monotonicity".into())
}

// ----------------------------------------------------------------- metrics

fn near(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{what}: got {got}, want {want}"))
}

fn mc_item(answer: &[&str]) -> ExamItem {
    ExamItem {
        stem: "Which apply?".into(),
        options: ["A", "B", "C", "D"].iter().map(|l| (l.to_string(), format!("option {l}"))).collect(),
        answer: Answer::Labels(answer.iter().map(|s| s.to_string()).collect()),
        explanation: String::new(),
    }
}

fn last_question(m: &[ChatMessage]) -> String {
    let prompt = &m.last().unwrap().content;
    prompt.rsplit("Question: ").next().unwrap().lines().next().unwrap().to_string()
}

fn text_example(id: String, q: String, a: String) -> EvalExample {
    EvalExample {
        example_id: id,
        question: q,
        options: BTreeMap::new(),
        answer: Answer::Text(a),
        gold_chunk: None,
    }
}

fn eval_settings(metrics: Vec<Metric>) -> EvalSettings {
    EvalSettings {
        mode: Mode::NoRetrieval,
        metrics,
        ks: vec![4],
        parallelism: 4,
        extractor: LabelExtractor::FirstRun,
        config_snapshot: serde_json::json!({}),
    }
}

fn ac5() -> Outcome {
    const EXACT: f64 = 1e-9;
    const FLOAT: f64 = 1e-6;
    let mut n = 0;
    let mut check = |r: Result<(), String>| -> Result<(), String> {
        n += 1;
        r
    };
    check(ensure(token_f1("a b c", "b c d") == (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0), || "token_f1 2/3 not exact".into()))?;
    check(ensure(token_f1("x y z", "x y z") == (1.0, 1.0, 1.0), || "f1 identical".into()))?;
    check(ensure(token_f1("x y", "p q") == (0.0, 0.0, 0.0), || "f1 disjoint".into()))?;
    check(near(rouge_l("the cat sat", "the cat sat"), 1.0, EXACT, "rouge identical"))?;
    let (p, r, b2) = (2.0 / 3.0, 1.0, 1.44);
    check(near(rouge_l("the cat sat", "the cat"), (1.0 + b2) * p * r / (r + b2 * p), FLOAT, "rouge LCS 2"))?;
    check(near(rouge_l("", "the cat"), 0.0, EXACT, "rouge empty"))?;
    check(near(bleu("a b c d e", &["a b c d e"]), 1.0, FLOAT, "bleu identical"))?;
    check(near(bleu("", &["a b c"]), 0.0, EXACT, "bleu empty"))?;
    let hand = (4.0f64 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0).powf(0.25);
    check(near(bleu("a b c d e", &["a b c d f"]), hand, FLOAT, "bleu hand tally"))?;
    check(near(mc_accuracy("The answer is B.", &mc_item(&["B"])), 1.0, EXACT, "mc single"))?;
    check(near(mc_accuracy("AB", &mc_item(&["A", "B"])), 1.0, EXACT, "mc set"))?;
    check(near(mc_accuracy("A", &mc_item(&["A", "B"])), 0.0, EXACT, "mc subset"))?;
    let client = EmbedClient::new(Arc::new(MockEmbedder::new(256, 0)));
    let d = "immediate family members of employees";
    check(near(discrepancy(d, d, &client).map_err(|e| e.to_string())?, 0.0, EXACT, "disc identical"))?;
    check(near(discrepancy_from_cosine(-0.25), 1.0, EXACT, "disc clamp"))?;
    let before = discrepancy("my wife and I", d, &client).map_err(|e| e.to_string())?;
    let after = discrepancy("family members of employees", d, &client).map_err(|e| e.to_string())?;
    check(ensure(after < before, || "disc overlap direction".into()))?;

    // Accounting: 622 of 1000 correct.
    let items: Vec<EvalExample> = (0..1000)
        .map(|i| EvalExample {
            example_id: format!("q{i:04}"),
            question: format!("item {i}"),
            options: [("A", "yes"), ("B", "no")].iter().map(|(l, t)| (l.to_string(), t.to_string())).collect(),
            answer: Answer::Labels(BTreeSet::from(["A".to_string()])),
            gold_chunk: None,
        })
        .collect();
    let reader = FnChat::new("stub", |m| {
        let i: usize = last_question(m).trim_start_matches("item ").parse().unwrap();
        Ok(if i < 622 { "A".into() } else { "B".into() })
    });
    let rep = &run_eval(&items, &Pipeline::new(Arc::new(reader)), &eval_settings(vec![Metric::Acc]))
        .map_err(|e| e.to_string())?[0];
    check(near(rep.aggregates["acc"], 0.622, EXACT, "622/1000 accounting"))?;

    // Gold stub: every aggregate is 1.
    let gold: HashMap<String, String> =
        HashMap::from([("two plus two".into(), "four".into()), ("capital of france".into(), "paris".into())]);
    let ds: Vec<EvalExample> = gold
        .iter()
        .enumerate()
        .map(|(i, (q, a))| text_example(format!("g{i}"), q.clone(), a.clone()))
        .collect();
    let g = gold.clone();
    let reader = FnChat::new("stub", move |m| Ok(g[&last_question(m)].clone()));
    let rep = &run_eval(&ds, &Pipeline::new(Arc::new(reader)), &eval_settings(vec![Metric::Acc, Metric::F1, Metric::RougeL, Metric::Bleu]))
        .map_err(|e| e.to_string())?[0];
    for (name, v) in &rep.aggregates {
        check(near(*v, 1.0, FLOAT, &format!("gold stub {name}")))?;
    }

    // One failure in ten.
    let ds: Vec<EvalExample> = (0..10).map(|i| text_example(format!("f{i}"), format!("question {i}"), format!("answer {i}"))).collect();
    let reader = FnChat::new("stub", |m| {
        let q = last_question(m);
        if q == "question 7" {
            Err(ProviderError::Rejected("refused".into()))
        } else {
            Ok(q.replace("question", "answer"))
        }
    });
    let rep = &run_eval(&ds, &Pipeline::new(Arc::new(reader)), &eval_settings(vec![Metric::Acc])).map_err(|e| e.to_string())?[0];
    check(ensure(rep.failure_count() == 1 && rep.per_example.len() == 9, || "failure accounting".into()))?;
    check(ensure(rep.check_means(EXACT), || "aggregate-mean identity".into()))?;
    Ok(format!("{n} metric vectors within 1e-9 / 1e-6; token_f1(\"a b c\",\"b c d\") = 2/3 exactly"))
}

fn trigrams(s: &str) -> HashSet<String> {
    let chars: Vec<char> = s.to_lowercase().chars().collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

fn ac6() -> Outcome {
    let client = EmbedClient::new(Arc::new(MockEmbedder::new(256, 42)));
    let vocab = [
        "immediate", "family", "members", "spouse", "enterprise", "state", "controlled", "mixed", "ownership",
        "lending", "employees", "guarantee", "disclosure", "liability", "contingent", "asset", "margin",
        "financing", "securities", "sponsor", "representative", "listing", "issuer", "prospectus",
    ];
    let casual = ["my", "wife", "and", "I", "can", "we", "get", "money", "from", "work", "buy", "a", "car", "house", "boss"];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = Vec::new();
    let mut wins = 0;
    for i in 0..20 {
        let doc_words: Vec<&str> = (0..rng.gen_range(12..30)).map(|_| *vocab.choose(&mut rng).unwrap()).collect();
        let doc = doc_words.join(" ");
        let mut query_words: Vec<&str> = (0..rng.gen_range(5..10)).map(|_| *casual.choose(&mut rng).unwrap()).collect();
        query_words.push(doc_words[0]);
        let query = query_words.join(" ");
        let take = rng.gen_range(4..doc_words.len().min(10));
        let rewrite = format!("{} {}", doc_words[..take].join(" "), query_words[0]);
        let (tq, tr, td) = (trigrams(&query), trigrams(&rewrite), trigrams(&doc));
        let shared = (tq.intersection(&td).count(), tr.intersection(&td).count());
        ensure(shared.1 > shared.0, || format!("triple {i} is not a valid construction"))?;
        let before = discrepancy(&query, &doc, &client).map_err(|e| e.to_string())?;
        let after = discrepancy(&rewrite, &doc, &client).map_err(|e| e.to_string())?;
        if after < before {
            wins += 1;
        }
        cases.push(DiscrepancyCase {
            query,
            rewrites: vec![rewrite],
            doc_text: doc,
        });
    }
    let summary = discrepancy_batch(&cases, &client).map_err(|e| e.to_string())?;
    ensure(wins == 20, || format!("rewrite lowered discrepancy in {wins}/20 triples"))?;
    Ok(format!(
        "20/20 triples; mean discrepancy {:.3} before, {:.3} after rewriting",
        summary.before_mean, summary.after_mean
    ))
}

// -------------------------------------------------------------- end to end

struct Cli {
    dir: PathBuf,
    config: PathBuf,
    env: HashMap<String, String>,
}

impl Cli {
    fn new(dir: &Path, reader_behavior: &str, extra: &str) -> Self {
        let t = root().join("templates/srcqa.toml");
        let text = format!(
            "k = 4\nbudget = 64\nparallelism = 2\nruns_dir = \"runs\"\n{extra}\n\n[templates]\nrewrite = \"{}\"\n\n[index]\npath = \"idx.rnr\"\nchunks = \"chunks.jsonl\"\n\n[embedder]\nkind = \"mock\"\ndim = 256\n\n[rewriter]\nkind = \"mock\"\nbehavior = \"last-block\"\n\n[reader]\nkind = \"mock\"\nbehavior = \"{reader_behavior}\"\n",
            t.display()
        );
        let config = dir.join("rnr.toml");
        std::fs::write(&config, text).unwrap();
        Self {
            dir: dir.to_path_buf(),
            config,
            env: HashMap::from([("SOURCE_DATE_EPOCH".into(), "1700000000".into())]),
        }
    }

    fn path(&self, p: &str) -> String {
        self.dir.join(p).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Result<String, String> {
        let mut argv = vec!["rnr".to_string(), "--config".into(), self.config.display().to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = rnr_cli::run(&argv, &self.env, &mut out, &mut err);
        if code == 0 {
            Ok(String::from_utf8_lossy(&out).into_owned())
        } else {
            Err(format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&err)))
        }
    }
}

const TOPICS: [(&str, &str); 5] = [
    ("margin financing", "collateral ratio"),
    ("related party transactions", "board approval"),
    ("contingent liabilities", "disclosure of guarantees"),
    ("initial public offering", "sponsor due diligence"),
    ("insider trading", "quiet period"),
];

fn write_e2e_corpus(dir: &Path) -> Result<(), String> {
    let mut manifest = serde_json::Map::new();
    for (i, (topic, detail)) in TOPICS.iter().enumerate() {
        let mut md = format!("# Rules on {topic}\n\n");
        for s in 0..4 {
            md.push_str(&format!(
                "## Article {s}\n\nArticle {s} on {topic} requires the {detail} to be reviewed by the compliance officer within {} days.\n\n",
                10 * (s + 1)
            ));
        }
        let name = format!("doc{i}.md");
        std::fs::write(dir.join(&name), md).map_err(|e| e.to_string())?;
        manifest.insert(format!("doc{i}"), Value::String(name));
    }
    std::fs::write(dir.join("corpus.json"), Value::Object(manifest).to_string()).map_err(|e| e.to_string())
}

fn e2e_once(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let cli = Cli::new(dir, "echo", "");
    cli.run(&["ingest", "--manifest", &cli.path("corpus.json"), "--out", &cli.path("chunks.jsonl")])?;
    cli.run(&["index", "build"])?;
    let mut artifacts = Vec::new();
    for mode in ["full", "no_rewrite", "no_retrieval"] {
        let out = cli.run(&["--json", "ask", "--mode", mode, "--query", "What must happen under the margin financing rules?"])?;
        artifacts.push((format!("ask-{mode}"), out.into_bytes()));
    }
    let mut ds = String::new();
    for i in 0..20 {
        let (topic, detail) = TOPICS[i % TOPICS.len()];
        let s = i / TOPICS.len();
        let ex = serde_json::json!({
            "example_id": format!("ex{i:02}"),
            "question": format!("Who reviews the {detail} under article {s} on {topic}?"),
            "answer": "the compliance officer",
        });
        ds.push_str(&ex.to_string());
        ds.push('\n');
    }
    std::fs::write(dir.join("dataset.jsonl"), ds).map_err(|e| e.to_string())?;
    cli.run(&["eval", "run", "--dataset", &cli.path("dataset.jsonl"), "--metrics", "acc,f1,rougeL,bleu,disc", "--out", &cli.path("eval")])?;
    artifacts.push(("report".into(), std::fs::read(dir.join("eval/report.json")).map_err(|e| e.to_string())?));
    for f in ["chunks.jsonl", "idx.rnr"] {
        artifacts.push((f.into(), std::fs::read(dir.join(f)).map_err(|e| e.to_string())?));
    }
    Ok(artifacts)
}

fn ac7() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_e2e_corpus(tmp.path())?;
    let first = e2e_once(tmp.path())?;
    let second = e2e_once(tmp.path())?;
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    let report: Value = serde_json::from_slice(&first.iter().find(|(n, _)| n == "report").unwrap().1).map_err(|e| e.to_string())?;
    let scored = report["per_example"].as_array().map(|a| a.len()).unwrap_or(0);
    ensure(scored == 20, || format!("{scored} of 20 examples scored"))?;
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs_f64() < 60.0, || format!("took {elapsed:?}"))?;
    Ok(format!("2 identical runs over 3 modes + 20-example eval, {:.2}s", elapsed.as_secs_f64()))
}

fn ac8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let cli = Cli::new(dir, "label-union", "");
    // Per question: six chunks restating it with evidence A-F, two weaker
    // matches carrying the distractor labels G and H.
    let subjects = ["pledged share ratio", "sponsor signature duty", "lockup period length"];
    let mut manifest = serde_json::Map::new();
    let mut ds = String::new();
    for (qi, subject) in subjects.iter().enumerate() {
        let question = format!("Which provisions govern the {subject} for listed issuers");
        let mut md = format!("# Provisions on the {subject}\n\n");
        for (j, label) in ["A", "B", "C", "D", "E", "F"].iter().enumerate() {
            md.push_str(&format!("## Item {j}\n\n{question}: clause {j} applies in full to every listed issuer.\nEVIDENCE: {label}\n\n"));
        }
        for (j, label) in ["G", "H"].iter().enumerate() {
            md.push_str(&format!("## Note {j}\n\nUnrelated remark {j} on the {subject}, kept for the historical record of the exchange.\nEVIDENCE: {label}\n\n"));
        }
        let name = format!("planted{qi}.md");
        std::fs::write(dir.join(&name), md).map_err(|e| e.to_string())?;
        manifest.insert(format!("planted{qi}"), Value::String(name));
        let options: BTreeMap<&str, &str> = ["A", "B", "C", "D", "E", "F", "G", "H"].iter().map(|l| (*l, "x")).collect();
        ds.push_str(
            &serde_json::json!({
                "example_id": format!("p{qi}"),
                "question": question,
                "options": options,
                "answer": "ABCDEF",
            })
            .to_string(),
        );
        ds.push('\n');
    }
    std::fs::write(dir.join("corpus.json"), Value::Object(manifest).to_string()).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("dataset.jsonl"), ds).map_err(|e| e.to_string())?;
    cli.run(&["ingest", "--manifest", &cli.path("corpus.json"), "--budget", "32", "--out", &cli.path("chunks.jsonl")])?;
    cli.run(&["index", "build"])?;
    cli.run(&["eval", "run", "--dataset", &cli.path("dataset.jsonl"), "--metrics", "acc", "--sweep-k", "1..8", "--out", &cli.path("sweep")])?;

    let mut reader = csv::Reader::from_path(dir.join("sweep/sweep.csv")).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or(format!("no {name} column"));
    let (kc, ac, rc) = (col("k")?, col("acc")?, col("mean_retrieved")?);
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        rows.push((rec[kc].parse().unwrap(), rec[ac].parse().unwrap(), rec[rc].parse().unwrap()));
    }
    ensure(rows.len() == 8, || format!("{} rows", rows.len()))?;
    ensure(rows.windows(2).all(|w| w[0].2 <= w[1].2), || "retrieved-set sizes not monotone".into())?;
    let best = rows.iter().map(|r| r.1).fold(f64::MIN, f64::max);
    let argmax: Vec<usize> = rows.iter().filter(|r| r.1 == best).map(|r| r.0).collect();
    ensure(argmax == vec![6], || format!("accuracy peaks at k={argmax:?}: {rows:?}"))?;
    let curve: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.1)).collect();
    Ok(format!("8 rows, accuracy by k = [{}], maximum at k=6", curve.join(", ")))
}

// ------------------------------------------------------------------- forge

fn ac9() -> Outcome {
    let tok = WordCjkTokenizer;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut md = String::from("# Compliance handbook\n\n");
    let mut s = 0;
    while tok.count(&md) < 10_000 {
        md.push_str(&format!("## Chapter {s}\n\n"));
        for _ in 0..rng.gen_range(1..5) {
            let n = if rng.gen_bool(0.08) { rng.gen_range(600..1500) } else { rng.gen_range(10..200) };
            let words: Vec<String> = (0..n).map(|i| format!("k{}", (i * 7 + s) % 301)).collect();
            md.push_str(&words.join(" "));
            md.push_str(".\n\n");
        }
        s += 1;
    }
    let total = tok.count(&md);
    let chunks = split_tree(&build_title_tree_str(&md, "hb", &tok), 4096, &tok).map_err(|e| e.to_string())?;
    let samples = gen_cpt(&chunks, 512, &tok).map_err(|e| e.to_string())?;
    let max = samples.iter().map(|s| tok.count(&s.text)).max().unwrap_or(0);
    ensure(max <= 512, || format!("sample of {max} tokens"))?;
    let words = |t: &str| -> Vec<String> {
        t.split(|c: char| !c.is_alphanumeric() && c != '_').filter(|w| !w.is_empty()).map(String::from).collect()
    };
    for c in &chunks {
        let mut cursor = 0;
        let mut joined = Vec::new();
        for p in samples.iter().filter(|p| p.source_chunk == c.chunk_id) {
            let at = c.text[cursor..].find(&p.text).ok_or("sample not found in order in its chunk")? + cursor;
            ensure(words(&c.text[cursor..at]).is_empty(), || "text skipped between samples".into())?;
            cursor = at + p.text.len();
            joined.extend(words(&p.text));
        }
        ensure(joined == words(&c.text), || format!("{} not reconstructed", c.chunk_id))?;
    }

    // SFT: random rewrite lists through an annotator, export and re-parse.
    let mut pairs = Vec::new();
    let mut expected: HashMap<String, Vec<String>> = HashMap::new();
    let vocab = ["loan", "spouse", "enterprise", "state-controlled", "disclosure", "关联交易", "rule", "(2023)", "guarantee"];
    for i in 0..100 {
        let n = rng.gen_range(1..=6);
        let mut rewrites: Vec<String> = Vec::new();
        while rewrites.len() < n {
            let len = rng.gen_range(1..7);
            let r = format!("{} q{i}-{}", (0..len).map(|_| *vocab.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" "), rewrites.len());
            rewrites.push(r);
        }
        let q = format!("random question {i}?");
        expected.insert(q.clone(), rewrites);
        pairs.push(QaPair { question: q, answer: format!("answer {i}") });
    }
    let table = expected.clone();
    let annotator = FnChat::new("scripted-annotator", move |m| {
        let prompt = &m.last().unwrap().content;
        let q = prompt.lines().rev().find_map(|l| l.strip_prefix("Question: ")).unwrap().to_string();
        let list: Vec<String> = table[&q].iter().enumerate().map(|(j, r)| format!("{}. {r}", j + 1)).collect();
        Ok(format!("ANALYSIS:\nStep 1: identify the rule.\nREWRITES:\n{}", list.join("\n")))
    });
    let template = PromptTemplate::load(&root().join("templates/annotate.toml")).map_err(|e| e.to_string())?;
    let outcome = annotate_sft(&pairs, &annotator, &template, &AnnotateOptions::default(), &tok).map_err(|e| e.to_string())?;
    ensure(outcome.skips.is_empty(), || format!("{} skips", outcome.skips.len()))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    export_training_files(Some(&samples), Some(&outcome.pairs), dir.path(), &tok).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.path().join("sft.jsonl")).map_err(|e| e.to_string())?;
    let mut round_trips = 0;
    for line in text.lines() {
        let rec: SftRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        ensure(parse_rewrites(&rec.output, 8) == expected[&rec.input], || format!("{:?} did not round-trip", rec.input))?;
        round_trips += 1;
    }
    ensure(round_trips == 100, || format!("{round_trips} SFT records"))?;
    Ok(format!(
        "{} CPT samples from {total} tokens, max {max} <= 512, text reconstructed; 100/100 SFT pairs round-trip",
        samples.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1", "chunker invariants on generated documents", ac1),
        ("AC2", "doc demo golden split", ac2),
        ("AC3", "retrieval oracle and persistence", ac3),
        ("AC4", "fusion properties", ac4),
        ("AC5", "metric unit vectors", ac5),
        ("AC6", "rewriting lowers discrepancy", ac6),
        ("AC7", "deterministic end-to-end mock run", ac7),
        ("AC8", "k-sweep peaks at planted k=6", ac8),
        ("AC9", "training data export", ac9),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id} {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
