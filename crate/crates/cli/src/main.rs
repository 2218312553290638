use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use pathroute_core::cache::{HashingEmbedder, MetaCache};
use pathroute_core::evolution::{
    build_diagnostics, update_rules_agent, update_rules_heuristic, ExpertClient, HeuristicConfig, OutcomeRecord,
    UpdateMode,
};
use pathroute_core::harness::synthetic::Workload;
use pathroute_core::harness::{
    check_refs, emit_report, load_dataset, run_experiment, split_dataset, ExperimentConfig, ExperimentInputs, Strategy,
    DEFAULT_EVAL_N, DEFAULT_TRAIN_N,
};
use pathroute_core::qa::{AnswerClient, LiveClient, PromptTemplates, QaPipeline, ReplayClient};
use pathroute_core::retrieval::TextGenerator;
use pathroute_core::retrieval::{
    load_corpus, load_manifest, DocIndex, KnowledgeBase, RetrievalConfig, Table, TableIndex,
};
use pathroute_core::rules::{parse_rules, serialize_rules, Judge, RuleSet, SEED_RULES};

#[derive(Parser)]
#[command(
    name = "pathroute",
    version,
    about = "Rule-driven path routing for hybrid-source question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and inspect the passage and table-metadata indexes.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Evaluate one strategy over a dataset and write report files.
    Run(RunArgs),
    /// Apply one rule update to a batch of graded outcomes.
    Evolve(EvolveArgs),
    /// Inspect a meta-cache snapshot.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Write a seeded synthetic four-category workload.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum IndexAction {
    Build {
        /// Passage corpus, one {"doc_id", "text"} object per line.
        #[arg(long)]
        docs: PathBuf,
        /// Table manifest, one {"table_id", "path", "description"} object per line.
        #[arg(long)]
        tables: PathBuf,
        /// Where to write the serialized index; a summary is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    Stats {
        #[arg(long)]
        snapshot: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    strategy: Strategy,
    #[arg(long)]
    dataset: PathBuf,
    /// Rule file; the built-in seed rules when omitted.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    tables: PathBuf,
    /// Per-(query, path) answers. Without it the live client is used.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long, default_value_t = pathroute_core::cache::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = pathroute_core::cache::DEFAULT_CAPACITY)]
    cache_capacity: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value = "off")]
    update_mode: UpdateMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EVAL_N)]
    eval_n: usize,
    #[arg(long, default_value_t = DEFAULT_TRAIN_N)]
    train_n: usize,
    /// Skip answering every query under all four paths.
    #[arg(long)]
    no_forced_matrix: bool,
    /// Use the live client for the rule judge.
    #[arg(long)]
    live_judge: bool,
    /// Warm-start the route cache from this snapshot, if it exists.
    #[arg(long)]
    load_cache: Option<PathBuf>,
    /// Write the route cache here after the run.
    #[arg(long)]
    save_cache: Option<PathBuf>,
    /// Write graded outcomes of routed queries here, for `evolve`.
    #[arg(long)]
    outcomes_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvolveArgs {
    /// Graded outcomes, one JSON record per line.
    #[arg(long)]
    outcomes: PathBuf,
    #[arg(long)]
    rules: PathBuf,
    #[arg(long, default_value = "heuristic")]
    mode: UpdateMode,
    #[arg(long, default_value_t = 0)]
    batch_index: u64,
    /// Print the diagnostics report to stderr.
    #[arg(long)]
    show_report: bool,
    /// Write the updated rules here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    per_category: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn open(path: &FsPath) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn load_rules(path: Option<&FsPath>) -> Result<RuleSet> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => SEED_RULES.to_string(),
    };
    Ok(parse_rules(&text)?)
}

fn load_tables(manifest: &FsPath) -> Result<Vec<Table>> {
    let base = manifest.parent().unwrap_or(FsPath::new("."));
    Ok(load_manifest(open(manifest)?, base)?)
}

fn load_docs(path: &FsPath) -> Result<DocIndex> {
    let corpus = load_corpus(open(path)?)?;
    Ok(DocIndex::build(
        corpus.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())),
    )?)
}

fn index_build(docs: &FsPath, tables: &FsPath, out: Option<&FsPath>) -> Result<()> {
    let docs = load_docs(docs)?;
    let tables = load_tables(tables)?;
    let index = TableIndex::build(&tables, None)?;
    let summary = serde_json::json!({
        "documents": docs.len(),
        "terms": docs.bm25().documents_with_postings(),
        "tables": tables.len(),
        "table_ids": index.metas().iter().map(|m| m.table_id.as_str()).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(out) = out {
        let body = serde_json::json!({ "passages": docs.bm25(), "tables": index.metas() });
        fs::write(out, serde_json::to_string(&body)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let records = load_dataset(open(&args.dataset)?)?;
    let ruleset = load_rules(args.rules.as_deref())?;
    let docs = load_docs(&args.docs)?;
    let tables = load_tables(&args.tables)?;
    check_refs(
        &records,
        (0..docs.len()).map(|i| docs.bm25().doc_id(i)),
        tables.iter().map(|t| t.table_id.as_str()),
    )?;

    let live = match &args.replay {
        Some(_) => None,
        None => Some(Arc::new(
            LiveClient::from_env().context("no --replay given and no live client configured")?,
        )),
    };
    let mut kb = KnowledgeBase::new(docs, tables)?;
    if let Some(l) = &live {
        kb = kb.with_generator(Box::new(l.as_ref().clone()));
    }
    let pipeline = QaPipeline::new(Arc::new(kb), PromptTemplates::builtin(), RetrievalConfig::default());
    let client: Arc<dyn AnswerClient> = match (&args.replay, &live) {
        (Some(path), _) => Arc::new(ReplayClient::from_reader(open(path)?)?),
        (None, Some(l)) => l.clone(),
        (None, None) => unreachable!(),
    };

    if args.cache_capacity == 0 {
        bail!("cache capacity must be at least 1");
    }
    let cache = match &args.load_cache {
        Some(p) if p.exists() => {
            let mut r = open(p)?;
            Some(Arc::new(MetaCache::read_snapshot(
                &mut r,
                Some(HashingEmbedder::DEFAULT_DIM),
            )?))
        }
        _ => None,
    }
    .or_else(|| {
        args.save_cache.as_ref().map(|_| {
            Arc::new(MetaCache::new(HashingEmbedder::DEFAULT_DIM, args.cache_capacity).expect("capacity checked above"))
        })
    });

    let split = split_dataset(&records, args.seed, args.eval_n, args.train_n);
    info!("{} eval and {} train records", split.eval.len(), split.train.len());
    let inputs = ExperimentInputs {
        eval: split.eval,
        train: split.train,
        ruleset,
        pipeline,
        client,
        expert: live.clone().map(|l| l as Arc<dyn ExpertClient>),
        judge: live.clone().filter(|_| args.live_judge).map(|l| l as Arc<dyn Judge>),
        agent_model: live.clone().map(|l| l as Arc<dyn TextGenerator>),
        cache: cache.clone(),
    };
    let config = ExperimentConfig {
        strategy: args.strategy,
        tau: args.tau,
        cache_capacity: args.cache_capacity,
        batch_size: args.batch_size,
        update_mode: args.update_mode,
        heuristic: HeuristicConfig::default(),
        seed: args.seed,
        forced_matrix: !args.no_forced_matrix,
    };
    let report = run_experiment(&inputs, &config)?;
    let files = emit_report(&report, &args.out)?;
    if let (Some(path), Some(cache)) = (&args.save_cache, &cache) {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        cache.write_snapshot(&mut w)?;
        w.flush()?;
    }
    if let Some(path) = &args.outcomes_out {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for o in &report.outcomes {
            writeln!(w, "{}", serde_json::to_string(o)?)?;
        }
        w.flush()?;
    }
    let m = &report.metrics;
    println!(
        "{}: n={} accuracy={:.4} f1={:.4} mean_prompt_tokens={:.1}{}",
        report.strategy,
        m.n,
        m.accuracy,
        m.f1,
        m.mean_prompt_tokens,
        report
            .oracle_accuracy
            .map(|o| format!(" oracle={o:.4}"))
            .unwrap_or_default()
    );
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

fn evolve(args: &EvolveArgs) -> Result<()> {
    let ruleset = load_rules(Some(&args.rules))?;
    let mut outcomes = Vec::new();
    for (i, line) in std::io::BufRead::lines(open(&args.outcomes)?).enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OutcomeRecord = serde_json::from_str(&line).with_context(|| format!("outcome line {}", i + 1))?;
        outcomes.push(rec);
    }
    let report = build_diagnostics(&outcomes, &ruleset, args.batch_index)?;
    if args.show_report {
        eprintln!("{}", report.render());
    }
    let next = match args.mode {
        UpdateMode::Heuristic => update_rules_heuristic(&ruleset, &report, &HeuristicConfig::default())?,
        UpdateMode::Agent => update_rules_agent(&ruleset, &report, &LiveClient::from_env()?)?,
        UpdateMode::Off => ruleset.clone(),
    };
    eprintln!(
        "batch accuracy {:.4}; rules v{} ({}) -> v{} ({})",
        report.batch_accuracy(),
        ruleset.version,
        ruleset.rules.len(),
        next.version,
        next.rules.len()
    );
    let text = serialize_rules(&next);
    match &args.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cache_stats(snapshot: &FsPath) -> Result<()> {
    let cache = MetaCache::read_snapshot(&mut open(snapshot)?, None)?;
    let mut by_path = std::collections::BTreeMap::new();
    for e in cache.entries() {
        *by_path.entry(e.chosen_path).or_insert(0usize) += 1;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "dimension": cache.dim(),
            "stats": cache.stats(),
            "entries_by_path": by_path,
        }))?
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Index {
            action: IndexAction::Build { docs, tables, out },
        } => index_build(&docs, &tables, out.as_deref()),
        Command::Run(args) => run(&args),
        Command::Evolve(args) => evolve(&args),
        Command::Cache {
            action: CacheAction::Stats { snapshot },
        } => cache_stats(&snapshot),
        Command::Synth(args) => {
            let w = Workload::generate(args.seed, args.per_category)?;
            w.write_files(&args.out)?;
            println!("wrote {} questions to {}", w.records.len(), args.out.display());
            Ok(())
        }
    }
}
