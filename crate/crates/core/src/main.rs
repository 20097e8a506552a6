//! `ratatool` — command-line driver for the tool-selection pipeline.
//!
//! Every subcommand reads a key=value config file (optional) with flag
//! overrides, performs exactly one pipeline operation, and writes its results
//! plus a run manifest (config snapshot, input checksums, artifact version)
//! under the output directory. Seeds are always explicit, so reruns with the
//! same manifest are byte-identical under the local provider.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data/schema error,
//! 4 remote-service error.

use clap::{Args, Parser, Subcommand};
use ratatool::align::{batch_dpo_report, DpoExampleRow};
use ratatool::corpus::{clean, split_tools, stats, QuerySet, SplitAssignment, ToolCorpus};
use ratatool::embed::{EmbeddingProvider, RemoteEmbedder};
use ratatool::eval::{aggregate, evaluate, EvalItem};
use ratatool::llmclient::{describe_tool, MockGenerator, RemoteChatClient, TaskGenerator};
use ratatool::prefgen::{build_dataset, CandidateSet};
use ratatool::retrieve::ToolIndex;
use ratatool::tooldesc::{DescFormat, Query, TaskDescription};
use ratatool::util::{read_jsonl, sha256_hex, write_jsonl};
use ratatool::{DpoConfig, LocalEmbedder, Scalar};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ratatool", version, about = "Retrieval-based tool selection pipeline")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shadowing config-file keys; a flag always wins over the file.
#[derive(Args)]
struct Overrides {
    /// Key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Tool corpus JSONL.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Query set JSONL.
    #[arg(long, global = true)]
    queries: Option<PathBuf>,
    /// Description format: json | nl.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Embedding provider: local | remote.
    #[arg(long, global = true)]
    provider: Option<String>,
    /// PRNG seed (split, prefgen, mock generation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Train fraction for `split`.
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// Ranking depth printed by `select`.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// DPO inverse temperature.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker bound for parallel stages.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate and clean a corpus + query set; write the cleaned copies.
    Ingest,
    /// Tool-level train/test split, stratified by modality.
    Split,
    /// Per-split query/tool counts (requires a prior `split`).
    Stats,
    /// Embed every tool description into a retrieval index.
    BuildIndex,
    /// Convert one model card (file) into a standardized description.
    Describe { card: PathBuf },
    /// Rank the index against one task description (file).
    Select { task: PathBuf },
    /// Generate, retrieve, and score every query with a ground truth.
    Evaluate,
    /// Build DPO preference pairs from candidate sets (JSONL file).
    Prefgen { sets: PathBuf },
    /// Summarize the DPO objective over a log-prob JSONL file.
    DpoReport { examples: PathBuf },
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Fully resolved run configuration: defaults, then config file, then flags.
#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    corpus: PathBuf,
    queries: PathBuf,
    index: PathBuf,
    cache: PathBuf,
    out: PathBuf,
    provider: String,
    format: String,
    ratio: f64,
    seed: u64,
    eval_fraction: f64,
    beta: f64,
    k: usize,
    parallelism: usize,
    /// Local embedder dimension.
    dim: usize,
    /// Mock-generator corruption level used by `evaluate`.
    noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: "corpus.jsonl".into(),
            queries: "queries.jsonl".into(),
            index: "index.jsonl".into(),
            cache: "cache.jsonl".into(),
            out: "out".into(),
            provider: "local".into(),
            format: "json".into(),
            ratio: 0.9,
            seed: 0,
            eval_fraction: 409.0 / 3390.0,
            beta: 0.1,
            k: 10,
            parallelism: 4,
            dim: 256,
            noise: 0.0,
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Exit 2: bad flags, unreadable/invalid config, out-of-range parameters.
    Usage(String),
    /// Exit 3: malformed or inconsistent data.
    Data(String),
    /// Exit 4: remote service unreachable or misbehaving.
    Remote(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Remote(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Remote(m) => m,
        }
    }
}

impl From<ratatool::corpus::CorpusError> for CliError {
    fn from(e: ratatool::corpus::CorpusError) -> Self {
        use ratatool::corpus::CorpusError::*;
        match e {
            BadRatio(_) => CliError::Usage(e.to_string()),
            NotFound(_) | Network(_) => CliError::Remote(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ratatool::embed::EmbedError> for CliError {
    fn from(e: ratatool::embed::EmbedError) -> Self {
        use ratatool::embed::EmbedError::*;
        match e {
            Api { .. } | Network(_) => CliError::Remote(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ratatool::retrieve::RetrieveError> for CliError {
    fn from(e: ratatool::retrieve::RetrieveError) -> Self {
        match e {
            ratatool::retrieve::RetrieveError::Embed(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ratatool::prefgen::PrefError> for CliError {
    fn from(e: ratatool::prefgen::PrefError) -> Self {
        match e {
            ratatool::prefgen::PrefError::BadEvalFraction(_) => CliError::Usage(e.to_string()),
            ratatool::prefgen::PrefError::Retrieve(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ratatool::eval::EvalError> for CliError {
    fn from(e: ratatool::eval::EvalError) -> Self {
        match e {
            ratatool::eval::EvalError::Retrieve(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ratatool::align::AlignError> for CliError {
    fn from(e: ratatool::align::AlignError) -> Self {
        match e {
            ratatool::align::AlignError::BadBeta => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "config {} line {}: expected key=value",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn resolve_config(flags: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &flags.config {
        let file = parse_config_file(path)?;
        for (key, value) in &file {
            let bad = |what: &str| CliError::Usage(format!("config key {key}: invalid {what} \"{value}\""));
            match key.as_str() {
                "corpus" => cfg.corpus = value.into(),
                "queries" => cfg.queries = value.into(),
                "index" => cfg.index = value.into(),
                "cache" => cfg.cache = value.into(),
                "out" => cfg.out = value.into(),
                "provider" => cfg.provider = value.clone(),
                "format" => cfg.format = value.clone(),
                "ratio" => cfg.ratio = value.parse().map_err(|_| bad("number"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "eval_fraction" => cfg.eval_fraction = value.parse().map_err(|_| bad("number"))?,
                "beta" => cfg.beta = value.parse().map_err(|_| bad("number"))?,
                "k" => cfg.k = value.parse().map_err(|_| bad("integer"))?,
                "parallelism" => cfg.parallelism = value.parse().map_err(|_| bad("integer"))?,
                "dim" => cfg.dim = value.parse().map_err(|_| bad("integer"))?,
                "noise" => cfg.noise = value.parse().map_err(|_| bad("number"))?,
                other => {
                    return Err(CliError::Usage(format!("unknown config key \"{other}\"")));
                }
            }
        }
    }
    if let Some(v) = &flags.corpus {
        cfg.corpus = v.clone();
    }
    if let Some(v) = &flags.queries {
        cfg.queries = v.clone();
    }
    if let Some(v) = &flags.format {
        cfg.format = v.clone();
    }
    if let Some(v) = &flags.provider {
        cfg.provider = v.clone();
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.ratio {
        cfg.ratio = v;
    }
    if let Some(v) = flags.k {
        cfg.k = v;
    }
    if let Some(v) = flags.beta {
        cfg.beta = v;
    }
    if let Some(v) = &flags.out {
        cfg.out = v.clone();
    }
    if let Some(v) = flags.parallelism {
        cfg.parallelism = v;
    }
    match cfg.provider.as_str() {
        "local" | "remote" => {}
        other => return Err(CliError::Usage(format!("provider must be local or remote, got \"{other}\""))),
    }
    cfg.desc_format()?;
    if cfg.dim < 8 {
        return Err(CliError::Usage(format!("dim must be >= 8, got {}", cfg.dim)));
    }
    Ok(cfg)
}

impl RunConfig {
    fn desc_format(&self) -> Result<DescFormat, CliError> {
        match self.format.as_str() {
            "json" => Ok(DescFormat::Json),
            "nl" => Ok(DescFormat::Nl),
            other => Err(CliError::Usage(format!("format must be json or nl, got \"{other}\""))),
        }
    }

    /// The embedding provider named by the config. Remote credentials come
    /// exclusively from RATATOOL_EMBED_* environment variables.
    fn provider(&self) -> Result<Box<dyn EmbeddingProvider<Scalar>>, CliError> {
        match self.provider.as_str() {
            "local" => Ok(Box::new(LocalEmbedder::new(self.dim))),
            _ => RemoteEmbedder::from_env()
                .map(|p| Box::new(p) as Box<dyn EmbeddingProvider<Scalar>>)
                .ok_or_else(|| {
                    CliError::Usage(
                        "remote provider requires RATATOOL_EMBED_URL and RATATOOL_EMBED_MODEL".into(),
                    )
                }),
        }
    }
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// Reproducibility record written next to every output. Deliberately free of
/// timestamps and secrets: config snapshot, input checksums, version.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    artifact_version: &'a str,
    config: &'a RunConfig,
    input_checksums: BTreeMap<String, String>,
}

fn write_manifest(
    cfg: &RunConfig,
    command: &str,
    inputs: &[&Path],
) -> Result<(), CliError> {
    let mut checksums = BTreeMap::new();
    for path in inputs {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Usage(format!("input {} unreadable: {e}", path.display())))?;
        checksums.insert(path.display().to_string(), sha256_hex(&bytes));
    }
    let manifest = RunManifest {
        command,
        artifact_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        input_checksums: checksums,
    };
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(format!("{command}.manifest.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap() + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn load_inputs(cfg: &RunConfig) -> Result<(ToolCorpus, QuerySet), CliError> {
    let corpus = ToolCorpus::load(&cfg.corpus, "corpus")?;
    let queries = QuerySet::load(&cfg.queries, "queries")?;
    Ok((corpus, queries))
}

fn load_split(cfg: &RunConfig) -> Result<SplitAssignment, CliError> {
    let path = cfg.out.join("split.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("missing split file {}: {e} (run `split` first)", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("split file malformed: {e}")))
}

fn cmd_ingest(cfg: &RunConfig) -> Result<(), CliError> {
    write_manifest(cfg, "ingest", &[&cfg.corpus, &cfg.queries])?;
    let (corpus, queries) = load_inputs(cfg)?;
    let (clean_corpus, clean_queries, report) = clean(&corpus, &queries);
    clean_corpus.save(&cfg.out.join("corpus.jsonl"))?;
    clean_queries.save(&cfg.out.join("queries.jsonl"))?;
    write_json(&cfg.out.join("clean_report.json"), &report)?;
    println!(
        "ingest: {} tools, {} queries kept; {} removals",
        clean_corpus.tools.len(),
        clean_queries.queries.len(),
        report.total_removals()
    );
    Ok(())
}

fn cmd_split(cfg: &RunConfig) -> Result<(), CliError> {
    write_manifest(cfg, "split", &[&cfg.corpus, &cfg.queries])?;
    let (corpus, queries) = load_inputs(cfg)?;
    let assignment = split_tools(&corpus, &queries, cfg.ratio, cfg.seed)?;
    write_json(&cfg.out.join("split.json"), &assignment)?;
    println!(
        "split: {} train / {} test tools (ratio {}, seed {})",
        assignment.train_tool_ids.len(),
        assignment.test_tool_ids.len(),
        cfg.ratio,
        cfg.seed
    );
    Ok(())
}

fn cmd_stats(cfg: &RunConfig) -> Result<(), CliError> {
    write_manifest(cfg, "stats", &[&cfg.corpus, &cfg.queries])?;
    let (corpus, queries) = load_inputs(cfg)?;
    let split = load_split(cfg)?;
    let table = stats(&corpus, &queries, &split);
    write_json(&cfg.out.join("stats.json"), &table)?;
    print!("{}", table.render_table());
    Ok(())
}

fn cmd_build_index(cfg: &RunConfig) -> Result<(), CliError> {
    write_manifest(cfg, "build-index", &[&cfg.corpus])?;
    let corpus = ToolCorpus::load(&cfg.corpus, "corpus")?;
    let provider = cfg.provider()?;
    let index = ToolIndex::build(&corpus, provider.as_ref(), cfg.desc_format()?)?;
    index.save(&cfg.index)?;
    println!("build-index: {} tools, dim {} -> {}", index.len(), index.dim(), cfg.index.display());
    Ok(())
}

fn cmd_describe(cfg: &RunConfig, card: &Path) -> Result<(), CliError> {
    write_manifest(cfg, "describe", &[card])?;
    let text = std::fs::read_to_string(card)
        .map_err(|e| CliError::Usage(format!("cannot read card {}: {e}", card.display())))?;
    let client = RemoteChatClient::from_env().ok_or_else(|| {
        CliError::Usage("describe requires RATATOOL_CHAT_URL and RATATOOL_CHAT_MODEL".into())
    })?;
    let draft = describe_tool(&text, cfg.desc_format()?, &client).map_err(|e| match e {
        ratatool::llmclient::GenError::Generation(m) => CliError::Remote(m),
        other => CliError::Data(other.to_string()),
    })?;
    let body = serde_json::json!({
        "input": draft.input,
        "process": draft.process,
        "output": draft.output,
    });
    write_json(&cfg.out.join("description.json"), &body)?;
    println!("{body}");
    Ok(())
}

fn cmd_select(cfg: &RunConfig, task_path: &Path) -> Result<(), CliError> {
    write_manifest(cfg, "select", &[task_path])?;
    let text = std::fs::read_to_string(task_path)
        .map_err(|e| CliError::Usage(format!("cannot read task {}: {e}", task_path.display())))?;
    let task: TaskDescription =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("task malformed: {e}")))?;
    task.validate().map_err(|e| CliError::Data(e.to_string()))?;
    let index = ToolIndex::load(&cfg.index, None)?;
    if index.is_empty() {
        return Err(CliError::Data("empty tool index".into()));
    }
    let provider = cfg.provider()?;
    let vector = provider.embed_one(&ratatool::tooldesc::canonical_text_task(&task))?;
    let result = index.rank_vector(&vector)?;
    let top: Vec<_> = result
        .ranking
        .iter()
        .take(cfg.k)
        .map(|(id, score)| serde_json::json!({"tool_id": id, "score": score}))
        .collect();
    let out = serde_json::json!({"selected": result.selected, "ranking": top});
    write_json(&cfg.out.join("selection.json"), &out)?;
    println!("{}", out["selected"].as_str().unwrap());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    write_manifest(cfg, "evaluate", &[&cfg.corpus, &cfg.queries])?;
    let (corpus, queries) = load_inputs(cfg)?;
    let pairs: Vec<(Query, String)> = queries
        .queries
        .iter()
        .filter_map(|q| q.gt_tool_id.clone().map(|gt| (q.clone(), gt)))
        .collect();
    if pairs.is_empty() {
        return Err(CliError::Data("no queries with a ground-truth tool".into()));
    }
    let provider = cfg.provider()?;
    let index = if cfg.index.exists() {
        ToolIndex::load(&cfg.index, None)?
    } else {
        ToolIndex::build(&corpus, provider.as_ref(), cfg.desc_format()?)?
    };
    let generator: Box<dyn TaskGenerator> = Box::new(MockGenerator {
        corpus: &corpus,
        noise: cfg.noise,
        seed: cfg.seed,
    });
    let (items, report) = evaluate(&pairs, generator.as_ref(), &index, provider.as_ref())?;
    write_jsonl(&cfg.out.join("eval_items.jsonl"), &items)?;
    write_json(&cfg.out.join("eval_report.json"), &report)?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_prefgen(cfg: &RunConfig, sets_path: &Path) -> Result<(), CliError> {
    write_manifest(cfg, "prefgen", &[sets_path, &cfg.corpus])?;
    let sets: Vec<CandidateSet> = read_jsonl(sets_path)?;
    for set in &sets {
        set.validate()?;
    }
    let corpus = ToolCorpus::load(&cfg.corpus, "corpus")?;
    let provider = cfg.provider()?;
    let index = if cfg.index.exists() {
        ToolIndex::load(&cfg.index, None)?
    } else {
        ToolIndex::build(&corpus, provider.as_ref(), cfg.desc_format()?)?
    };
    let (train, eval_pairs, report) =
        build_dataset(&sets, &index, provider.as_ref(), cfg.seed, cfg.eval_fraction)?;
    write_jsonl(&cfg.out.join("pref_train.jsonl"), &train)?;
    write_jsonl(&cfg.out.join("pref_eval.jsonl"), &eval_pairs)?;
    write_json(&cfg.out.join("pref_report.json"), &report)?;
    println!(
        "prefgen: {} train / {} eval pairs; {} discarded (all-equal), {} discarded (parse)",
        train.len(),
        eval_pairs.len(),
        report.sets_discarded_all_equal,
        report.sets_discarded_parse_failures
    );
    Ok(())
}

fn cmd_dpo_report(cfg: &RunConfig, examples_path: &Path) -> Result<(), CliError> {
    write_manifest(cfg, "dpo-report", &[examples_path])?;
    let rows: Vec<DpoExampleRow> = read_jsonl(examples_path)?;
    let examples: Vec<ratatool::DpoExample> = rows.iter().map(|r| r.example()).collect();
    let dpo_cfg = DpoConfig::new(cfg.beta)?;
    let report = batch_dpo_report(&examples, &dpo_cfg)?;
    write_json(&cfg.out.join("dpo_report.json"), &report)?;
    println!(
        "dpo-report: {} examples, mean loss {:.6}, mean margin {:.6}, implicit accuracy {:.4}",
        report.count, report.mean_loss, report.mean_margin, report.implicit_accuracy
    );
    Ok(())
}

/// Shared by tests: recompute a report from persisted eval items.
#[allow(dead_code)]
fn reaggregate(path: &Path) -> Result<ratatool::eval::EvalReport, CliError> {
    let items: Vec<EvalItem> = read_jsonl(path)?;
    Ok(aggregate(&items)?)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.overrides)?;
    std::fs::create_dir_all(&cfg.out)?;
    match &cli.cmd {
        Cmd::Ingest => cmd_ingest(&cfg),
        Cmd::Split => cmd_split(&cfg),
        Cmd::Stats => cmd_stats(&cfg),
        Cmd::BuildIndex => cmd_build_index(&cfg),
        Cmd::Describe { card } => cmd_describe(&cfg, card),
        Cmd::Select { task } => cmd_select(&cfg, task),
        Cmd::Evaluate => cmd_evaluate(&cfg),
        Cmd::Prefgen { sets } => cmd_prefgen(&cfg, sets),
        Cmd::DpoReport { examples } => cmd_dpo_report(&cfg, examples),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ratatool: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
