//! The `rnr` command line: argument parsing, dispatch and exit codes.
//!
//! Exit codes: 0 success, 1 user or configuration error, 2 provider or
//! transport failure.

pub mod config;
pub mod manifest;
pub mod wiring;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rnr_core::embed::EmbedError;
use rnr_core::eval::{self, EvalExample, EvalSettings, LabelExtractor, Metric};
use rnr_core::forge::{self, AnnotateOptions, QaPair};
use rnr_core::ingest::{self, Chunk};
use rnr_core::pipeline::{Mode, PipelineError};
use rnr_core::provider::ProviderError;
use rnr_core::rewrite::RewriteError;
use rnr_core::store::VectorIndex;
use rnr_core::tokenize::WordCjkTokenizer;

use crate::config::{load_config, RunConfig};
use crate::manifest::Recorder;
use crate::wiring::{read_jsonl, write_jsonl, Wiring};

#[derive(Parser, Debug)]
#[command(name = "rnr", version, about = "Rewrite-retrieve-read question answering over structured documents")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print structured JSON instead of human-readable text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Where run manifests are written (default: `runs_dir` from the config).
    #[arg(long, global = true)]
    pub manifest_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Chunk markdown documents, or extract exam items from a question bank.
    Ingest(IngestArgs),
    /// Build or search a vector index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Rewrite a query with the configured rewriter.
    Rewrite(RewriteArgs),
    /// Answer a question: rewrite, retrieve, fuse, read.
    Ask(AskArgs),
    /// Produce pretraining and fine-tuning data.
    #[command(subcommand)]
    Forge(ForgeCommand),
    /// Evaluate the pipeline on a dataset.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// JSON object mapping doc_id to markdown path.
    #[arg(long, conflicts_with_all = ["doc", "exam"])]
    pub manifest: Option<PathBuf>,
    /// A single markdown document.
    #[arg(long, conflicts_with = "exam")]
    pub doc: Option<PathBuf>,
    /// Id for --doc (default: file stem).
    #[arg(long, requires = "doc")]
    pub doc_id: Option<String>,
    /// Question-bank text to extract exam items from.
    #[arg(long)]
    pub exam: Option<PathBuf>,
    /// Exam extraction profile.
    #[arg(long, default_value = "default", requires = "exam")]
    pub profile: String,
    /// Token budget per chunk (default: `budget` from the config).
    #[arg(long)]
    pub budget: Option<usize>,
    /// Output JSONL.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum IndexCommand {
    /// Embed chunks and write an index file.
    Build {
        #[arg(long)]
        chunks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k chunks for a query.
    Search {
        #[arg(long)]
        idx: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Args, Debug)]
pub struct RewriteArgs {
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub query: String,
}

#[derive(Args, Debug)]
pub struct AskArgs {
    #[arg(long)]
    pub query: String,
    /// full, no_rewrite or no_retrieval.
    #[arg(long, default_value = "full")]
    pub mode: Mode,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub idx: Option<PathBuf>,
    #[arg(long)]
    pub chunks: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum ForgeCommand {
    /// Pretraining samples from chunks.
    Cpt {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long, default_value_t = forge::DEFAULT_CPT_CUTOFF)]
        cutoff: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite supervision pairs from question/answer pairs.
    Sft {
        /// JSONL of {"question", "answer"}.
        #[arg(long)]
        qa: PathBuf,
        /// Annotation template (default: [templates] annotate).
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token-proportional sample of a chunk file.
    Sample {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        fraction: f64,
        /// Default: `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output JSONL (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Run the pipeline over a dataset and score it.
    Run(EvalRunArgs),
}

#[derive(Args, Debug)]
pub struct EvalRunArgs {
    /// JSONL with example_id, question, answer and optional options.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma separated: acc, f1, rougeL, bleu, disc.
    #[arg(long, default_value = "acc")]
    pub metrics: String,
    #[arg(long, default_value = "full")]
    pub mode: Mode,
    /// Evaluate at one k (default: `k` from the config).
    #[arg(long, conflicts_with = "sweep_k")]
    pub k: Option<usize>,
    /// k values to sweep, e.g. `1..8` or `2,4,6`.
    #[arg(long)]
    pub sweep_k: Option<String>,
    /// Regex whose first group holds the answer labels.
    #[arg(long)]
    pub label_regex: Option<String>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub idx: Option<PathBuf>,
    #[arg(long)]
    pub chunks: Option<PathBuf>,
    /// Directory for reports and the sweep CSV.
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Index(IndexCommand::Build { .. }) => "index build",
            Command::Index(IndexCommand::Search { .. }) => "index search",
            Command::Rewrite(_) => "rewrite",
            Command::Ask(_) => "ask",
            Command::Forge(ForgeCommand::Cpt { .. }) => "forge cpt",
            Command::Forge(ForgeCommand::Sft { .. }) => "forge sft",
            Command::Forge(ForgeCommand::Sample { .. }) => "forge sample",
            Command::Eval(EvalCommand::Run(_)) => "eval run",
        }
    }
}

/// Exit code for an error: 2 when a provider or transport failed, else 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return if e.transport { 2 } else { 1 };
        }
        if let Some(RewriteError::Transport { .. }) = cause.downcast_ref::<RewriteError>() {
            return 2;
        }
        if let Some(EmbedError::Provider { .. }) = cause.downcast_ref::<EmbedError>() {
            return 2;
        }
        if cause.downcast_ref::<ProviderError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<ProviderFailure>().is_some() {
            return 2;
        }
    }
    1
}

/// Marks a run that completed but whose every example hit a provider failure.
#[derive(Debug)]
struct ProviderFailure(String);

impl std::fmt::Display for ProviderFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ProviderFailure {}

struct Ctx<'a> {
    cfg: RunConfig,
    json: bool,
    env: &'a HashMap<String, String>,
    out: &'a mut dyn Write,
    rec: Recorder,
}

impl Ctx<'_> {
    fn emit_json(&mut self, v: &impl serde::Serialize) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string_pretty(v)?)?;
        Ok(())
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run(argv: &[String], env: &HashMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    let command = cli.command.name();
    let cfg = match load_config(cli.config.as_deref(), env) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            return 1;
        }
    };
    let manifest_dir = cli.manifest_dir.clone().unwrap_or_else(|| cfg.runs_dir.clone());
    let mut rec = Recorder::new(command, &argv[1..], cfg.redacted_snapshot());
    if let Some(p) = &cli.config {
        if let Err(e) = rec.input(p) {
            let _ = writeln!(err, "error: {e:#}");
            return 1;
        }
    }
    let mut ctx = Ctx {
        cfg,
        json: cli.json,
        env,
        out,
        rec,
    };
    let result = dispatch(&mut ctx, cli.command);
    let (code, message) = match &result {
        Ok(()) => (0, None),
        Err(e) => (exit_code(e), Some(format!("{e:#}"))),
    };
    if let Some(m) = &message {
        let _ = writeln!(err, "error: {m}");
    }
    match ctx.rec.finish(&manifest_dir, code, message) {
        Ok(_) => code,
        Err(e) => {
            let _ = writeln!(err, "error: writing run manifest: {e:#}");
            code.max(1)
        }
    }
}

fn dispatch(ctx: &mut Ctx, command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest_cmd(ctx, a),
        Command::Index(IndexCommand::Build { chunks, out }) => index_build(ctx, chunks, out),
        Command::Index(IndexCommand::Search { idx, query, k }) => index_search(ctx, idx, &query, k),
        Command::Rewrite(a) => rewrite_cmd(ctx, a),
        Command::Ask(a) => ask_cmd(ctx, a),
        Command::Forge(ForgeCommand::Cpt { chunks, cutoff, out }) => forge_cpt(ctx, &chunks, cutoff, &out),
        Command::Forge(ForgeCommand::Sft { qa, template, out }) => forge_sft(ctx, &qa, template, &out),
        Command::Forge(ForgeCommand::Sample {
            chunks,
            fraction,
            seed,
            out,
        }) => forge_sample(ctx, &chunks, fraction, seed, out),
        Command::Eval(EvalCommand::Run(a)) => eval_run(ctx, a),
    }
}

fn ingest_cmd(ctx: &mut Ctx, a: IngestArgs) -> Result<()> {
    if let Some(exam) = &a.exam {
        let raw = std::fs::read_to_string(exam).with_context(|| format!("reading {}", exam.display()))?;
        ctx.rec.input(exam)?;
        let parsed = ingest::parse_exam_items(&raw, &a.profile, &ctx.cfg.exam_registry()?)?;
        write_jsonl(&a.out, &parsed.items)?;
        ctx.rec.output(&a.out)?;
        ctx.rec.stage("extract");
        if ctx.json {
            ctx.emit_json(&serde_json::json!({
                "items": parsed.items.len(),
                "warnings": parsed.warnings,
                "out": a.out,
            }))?;
        } else {
            writeln!(ctx.out, "extracted {} items to {}", parsed.items.len(), a.out.display())?;
            for w in &parsed.warnings {
                writeln!(ctx.out, "skipped lines {}-{}: {}", w.line_start, w.line_end, w.reason)?;
            }
        }
        return Ok(());
    }

    let docs: Vec<(String, PathBuf)> = match (&a.manifest, &a.doc) {
        (Some(m), _) => {
            ctx.rec.input(m)?;
            ingest::read_manifest(m)?
        }
        (None, Some(d)) => {
            let id = match &a.doc_id {
                Some(id) => id.clone(),
                None => d
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| anyhow!("cannot derive a doc id from {}; pass --doc-id", d.display()))?
                    .to_string(),
            };
            vec![(id, d.clone())]
        }
        (None, None) => bail!("ingest needs --manifest, --doc or --exam"),
    };
    let budget = a.budget.unwrap_or(ctx.cfg.budget);
    for (_, p) in &docs {
        ctx.rec.input(p)?;
    }
    let results = rnr_core::par::par_map(&docs, ctx.cfg.parallelism, |_, (id, path)| {
        ingest::chunk_file(path, id, budget, &WordCjkTokenizer)
    });
    let mut chunks: Vec<Chunk> = Vec::new();
    for r in results {
        chunks.extend(r?);
    }
    write_jsonl(&a.out, &chunks)?;
    ctx.rec.output(&a.out)?;
    ctx.rec.stage("chunk");
    if ctx.json {
        ctx.emit_json(&serde_json::json!({
            "documents": docs.len(),
            "chunks": chunks.len(),
            "budget": budget,
            "out": a.out,
        }))?;
    } else {
        writeln!(
            ctx.out,
            "wrote {} chunks from {} documents to {} (budget {budget})",
            chunks.len(),
            docs.len(),
            a.out.display()
        )?;
    }
    Ok(())
}

fn created_at(env: &HashMap<String, String>) -> Result<i64> {
    match env.get("SOURCE_DATE_EPOCH") {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow!("SOURCE_DATE_EPOCH={v:?} is not an integer")),
        None => Ok(chrono::Utc::now().timestamp()),
    }
}

fn index_build(ctx: &mut Ctx, chunks: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let chunks_path = chunks
        .or_else(|| ctx.cfg.index.chunks.clone())
        .ok_or_else(|| anyhow!("`index build` needs --chunks or [index] chunks"))?;
    let out = out
        .or_else(|| ctx.cfg.index.path.clone())
        .ok_or_else(|| anyhow!("`index build` needs --out or [index] path"))?;
    let chunks: Vec<Chunk> = read_jsonl(&chunks_path)?;
    ctx.rec.input(&chunks_path)?;
    if chunks.is_empty() {
        bail!("{} has no chunks", chunks_path.display());
    }
    let wiring = Wiring::new(&ctx.cfg);
    let client = wiring.embedder("index build")?;
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let batch = client.embed_batch(&texts)?;
    ctx.rec.stage("embed");
    let dim = batch.vectors[0].dim();
    let mut index = VectorIndex::new(dim, client.tag(), created_at(ctx.env)?);
    for (c, v) in chunks.iter().zip(batch.vectors) {
        index.insert(c.chunk_id.clone(), v)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    index.persist(&out)?;
    ctx.rec.output(&out)?;
    ctx.rec.stage("persist");
    if ctx.json {
        ctx.emit_json(&serde_json::json!({
            "entries": index.len(),
            "dim": dim,
            "provider_tag": index.provider_tag(),
            "provider_requests": batch.attempts,
            "cache_hits": batch.cache_hits,
            "out": out,
        }))?;
    } else {
        writeln!(
            ctx.out,
            "indexed {} chunks (dim {dim}, {}) into {}",
            index.len(),
            index.provider_tag(),
            out.display()
        )?;
    }
    Ok(())
}

fn index_search(ctx: &mut Ctx, idx: Option<PathBuf>, query: &str, k: Option<usize>) -> Result<()> {
    let idx = idx
        .or_else(|| ctx.cfg.index.path.clone())
        .ok_or_else(|| anyhow!("`index search` needs --idx or [index] path"))?;
    if !idx.is_file() {
        bail!("no index at {}; build one with `rnr index build`", idx.display());
    }
    let index = VectorIndex::load(&idx)?;
    ctx.rec.input(&idx)?;
    let wiring = Wiring::new(&ctx.cfg);
    let client = wiring.embedder("index search")?;
    if client.tag() != index.provider_tag() {
        bail!(
            "index was built with embedder {} but the config uses {}",
            index.provider_tag(),
            client.tag()
        );
    }
    let k = k.unwrap_or(ctx.cfg.k);
    let v = client.embed_one(query)?;
    let hits = index.search(&v, k)?;
    ctx.rec.stage("search");
    if ctx.json {
        ctx.emit_json(&hits)?;
    } else {
        for (rank, h) in hits.iter().enumerate() {
            writeln!(ctx.out, "{}\t{:.6}\t{}", rank + 1, h.score, h.chunk_id)?;
        }
    }
    Ok(())
}

fn rewrite_cmd(ctx: &mut Ctx, a: RewriteArgs) -> Result<()> {
    let wiring = Wiring::new(&ctx.cfg);
    let template = wiring.rewrite_template(a.template.as_deref(), "rewrite")?;
    if let Some(p) = a.template.as_ref().or(ctx.cfg.templates.rewrite.as_ref()) {
        ctx.rec.input(p)?;
    }
    let set = wiring.rewriter(template, "rewrite")?.rewrite(&a.query)?;
    ctx.rec.stage("rewrite");
    if ctx.json {
        ctx.emit_json(&set)?;
    } else {
        for r in &set.rewrites {
            writeln!(ctx.out, "{r}")?;
        }
    }
    Ok(())
}

fn ask_cmd(ctx: &mut Ctx, a: AskArgs) -> Result<()> {
    let wiring = Wiring::new(&ctx.cfg);
    let (pipeline, inputs) = wiring.pipeline(a.mode, "ask", a.template.as_deref(), a.idx.as_deref(), a.chunks.as_deref())?;
    for p in &inputs {
        ctx.rec.input(p)?;
    }
    ctx.rec.stage("load");
    let k = a.k.unwrap_or(ctx.cfg.k);
    let answer = pipeline.answer_with_k(&a.query, k, a.mode)?;
    ctx.rec.stage("answer");
    if ctx.json {
        ctx.emit_json(&answer)?;
    } else {
        if a.mode == Mode::Full {
            writeln!(ctx.out, "rewrites:")?;
            for r in &answer.rewrites.rewrites {
                writeln!(ctx.out, "  - {r}")?;
            }
        }
        if !answer.retrieved.is_empty() {
            writeln!(ctx.out, "retrieved:")?;
            for d in &answer.retrieved {
                writeln!(ctx.out, "  {:.4}  {}  (rewrite {})", d.score, d.chunk_id, d.source_rewrite)?;
            }
        }
        writeln!(ctx.out, "answer:\n{}", answer.answer_text)?;
    }
    Ok(())
}

fn forge_cpt(ctx: &mut Ctx, chunks_path: &Path, cutoff: usize, out: &Path) -> Result<()> {
    let chunks: Vec<Chunk> = read_jsonl(chunks_path)?;
    ctx.rec.input(chunks_path)?;
    let samples = forge::gen_cpt(&chunks, cutoff, &WordCjkTokenizer)?;
    let manifest = forge::export_training_files(Some(&samples), None, out, &WordCjkTokenizer)?;
    ctx.rec.output(&out.join("cpt.jsonl"))?;
    ctx.rec.stage("cpt");
    if ctx.json {
        ctx.emit_json(&manifest)?;
    } else {
        let s = manifest.cpt.as_ref().expect("cpt written");
        writeln!(
            ctx.out,
            "wrote {} samples ({} tokens, cutoff {cutoff}) to {}",
            s.count,
            s.token_total,
            out.join(&s.file).display()
        )?;
    }
    Ok(())
}

fn forge_sft(ctx: &mut Ctx, qa_path: &Path, template: Option<PathBuf>, out: &Path) -> Result<()> {
    let template_path = template
        .or_else(|| ctx.cfg.templates.annotate.clone())
        .ok_or_else(|| anyhow!("`forge sft` needs --template or [templates] annotate"))?;
    let template = rnr_core::rewrite::PromptTemplate::load(&template_path)?;
    ctx.rec.input(&template_path)?;
    let pairs: Vec<QaPair> = read_jsonl(qa_path)?;
    ctx.rec.input(qa_path)?;
    let wiring = Wiring::new(&ctx.cfg);
    let annotator = wiring.chat("annotator", "forge sft")?;
    let opts = AnnotateOptions {
        temperature: ctx.cfg.temperature,
        retry: ctx.cfg.retry.clone(),
        parallelism: ctx.cfg.parallelism,
        cache_dir: ctx.cfg.cache_dir.as_ref().map(|d| d.join("annotations")),
        ..AnnotateOptions::default()
    };
    let outcome = forge::annotate_sft(&pairs, annotator.as_ref(), &template, &opts, &WordCjkTokenizer)?;
    ctx.rec.stage("annotate");
    let manifest = forge::export_training_files(None, Some(&outcome.pairs), out, &WordCjkTokenizer)?;
    let skips_path = out.join("sft_skips.jsonl");
    write_jsonl(&skips_path, &outcome.skips)?;
    for f in ["sft.jsonl", "sft_full.jsonl", "sft_skips.jsonl"] {
        ctx.rec.output(&out.join(f))?;
    }
    ctx.rec.stage("export");
    if ctx.json {
        ctx.emit_json(&serde_json::json!({"manifest": manifest, "skipped": outcome.skips}))?;
    } else {
        writeln!(
            ctx.out,
            "wrote {} pairs to {} ({} skipped, see {})",
            outcome.pairs.len(),
            out.join("sft.jsonl").display(),
            outcome.skips.len(),
            skips_path.display()
        )?;
    }
    if !pairs.is_empty() && outcome.pairs.is_empty() && outcome.skips.iter().all(|s| s.reason.starts_with("annotator failed")) {
        return Err(ProviderFailure("every annotation request failed".into()).into());
    }
    Ok(())
}

fn forge_sample(ctx: &mut Ctx, chunks_path: &Path, fraction: f64, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let chunks: Vec<Chunk> = read_jsonl(chunks_path)?;
    ctx.rec.input(chunks_path)?;
    let picked = forge::sample_corpus(&chunks, fraction, seed.unwrap_or(ctx.cfg.seed))?;
    ctx.rec.stage("sample");
    match out {
        Some(p) => {
            write_jsonl(&p, &picked)?;
            ctx.rec.output(&p)?;
            let tokens: usize = picked.iter().map(|c| c.token_count).sum();
            let total: usize = chunks.iter().map(|c| c.token_count).sum();
            if ctx.json {
                ctx.emit_json(&serde_json::json!({
                    "selected": picked.len(),
                    "of": chunks.len(),
                    "tokens": tokens,
                    "total_tokens": total,
                    "out": p,
                }))?;
            } else {
                writeln!(
                    ctx.out,
                    "selected {} of {} chunks ({tokens} of {total} tokens) into {}",
                    picked.len(),
                    chunks.len(),
                    p.display()
                )?;
            }
        }
        None => {
            for c in &picked {
                writeln!(ctx.out, "{}", serde_json::to_string(c)?)?;
            }
        }
    }
    Ok(())
}

fn eval_run(ctx: &mut Ctx, a: EvalRunArgs) -> Result<()> {
    let metrics = Metric::parse_list(&a.metrics)?;
    let ks = match (&a.sweep_k, a.k) {
        (Some(s), _) => eval::parse_k_list(s)?,
        (None, Some(k)) => vec![k],
        (None, None) => vec![ctx.cfg.k],
    };
    let raw: Vec<EvalExample> = read_jsonl(&a.dataset)?;
    ctx.rec.input(&a.dataset)?;
    let dataset = raw
        .into_iter()
        .map(EvalExample::normalized)
        .collect::<Result<Vec<_>, _>>()?;
    let extractor = match &a.label_regex {
        Some(re) => LabelExtractor::pattern(re).with_context(|| format!("--label-regex {re:?}"))?,
        None => LabelExtractor::FirstRun,
    };
    let wiring = Wiring::new(&ctx.cfg);
    let (pipeline, inputs) = wiring.pipeline(a.mode, "eval run", a.template.as_deref(), a.idx.as_deref(), a.chunks.as_deref())?;
    for p in &inputs {
        ctx.rec.input(p)?;
    }
    ctx.rec.stage("load");
    let settings = EvalSettings {
        mode: a.mode,
        metrics,
        ks: ks.clone(),
        parallelism: ctx.cfg.parallelism,
        extractor,
        config_snapshot: ctx.cfg.redacted_snapshot(),
    };
    let reports = eval::run_eval(&dataset, &pipeline, &settings)?;
    ctx.rec.stage("evaluate");

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let sweep = a.sweep_k.is_some();
    for r in &reports {
        let name = if sweep { format!("report-k{}.json", r.k) } else { "report.json".to_string() };
        let path = a.out.join(name);
        let mut text = serde_json::to_string_pretty(r)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        ctx.rec.output(&path)?;
    }
    let (header, rows) = eval::sweep_table(&reports);
    if sweep {
        let path = a.out.join("sweep.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(&header)?;
        for row in &rows {
            w.write_record(row)?;
        }
        w.flush()?;
        ctx.rec.output(&path)?;
    }
    ctx.rec.stage("write");

    if ctx.json {
        ctx.emit_json(&reports)?;
    } else {
        writeln!(ctx.out, "{}", header.join("\t"))?;
        for row in &rows {
            writeln!(ctx.out, "{}", row.join("\t"))?;
        }
        writeln!(ctx.out, "reports in {}", a.out.display())?;
    }
    let all_failed_transport = reports
        .iter()
        .all(|r| r.per_example.is_empty() && r.failed.iter().any(|f| f.transport));
    if all_failed_transport {
        return Err(ProviderFailure("every example failed with a provider error".into()).into());
    }
    Ok(())
}
