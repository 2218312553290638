use std::fs::{self, File};
use std::io::BufReader;
use std::sync::Arc;

use pathroute_core::cache::{EmbeddingProvider, HashingEmbedder, MetaCache};
use pathroute_core::evolution::{UpdateLoop, UpdateMode};
use pathroute_core::harness::synthetic::Workload;
use pathroute_core::harness::{
    emit_report, load_dataset, run_experiment, split_dataset, ExperimentConfig, ExperimentInputs, Strategy,
};
use pathroute_core::qa::{PromptTemplates, QaPipeline, ReplayClient};
use pathroute_core::retrieval::{load_corpus, load_manifest, DocIndex, KnowledgeBase, RetrievalConfig};
use pathroute_core::router::{DecisionSource, Router, RouterConfig, RuleScorer};
use pathroute_core::rules::{parse_rules, serialize_rules, Path, SEED_RULES};

fn reader(p: &std::path::Path) -> BufReader<File> {
    BufReader::new(File::open(p).unwrap())
}

#[test]
fn workload_files_drive_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let w = Workload::generate(21, 40).unwrap();
    w.write_files(dir.path()).unwrap();

    let records = load_dataset(reader(&dir.path().join("dataset.jsonl"))).unwrap();
    let corpus = load_corpus(reader(&dir.path().join("corpus.jsonl"))).unwrap();
    let tables = load_manifest(
        reader(&dir.path().join("tables/manifest.jsonl")),
        &dir.path().join("tables"),
    )
    .unwrap();
    let docs = DocIndex::build(corpus.iter().map(|d| (d.doc_id.as_str(), d.text.as_str()))).unwrap();
    let kb = KnowledgeBase::new(docs, tables).unwrap();
    let pipeline = QaPipeline::new(Arc::new(kb), PromptTemplates::builtin(), RetrievalConfig::default());
    let client = ReplayClient::from_reader(reader(&dir.path().join("replay.jsonl"))).unwrap();

    let split = split_dataset(&records, 5, 120, 40);
    let inputs = ExperimentInputs {
        eval: split.eval,
        train: split.train,
        ruleset: parse_rules(SEED_RULES).unwrap(),
        pipeline,
        client: Arc::new(client),
        expert: None,
        judge: None,
        agent_model: None,
        cache: None,
    };
    let config = ExperimentConfig {
        strategy: Strategy::RouteCached,
        batch_size: 20,
        update_mode: UpdateMode::Heuristic,
        ..Default::default()
    };
    let report = run_experiment(&inputs, &config).unwrap();
    assert_eq!(report.metrics.n, 120);
    assert_eq!(report.update_events.len(), 2);
    assert!(report.metrics.accuracy <= report.oracle_accuracy.unwrap());
    assert_eq!(report.outcomes.len(), 120);

    let out = dir.path().join("report");
    emit_report(&report, &out).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["metrics"]["n"], 120);
    assert_eq!(metrics["rule_updates"], 2);
    let decisions = fs::read_to_string(out.join("decisions.jsonl")).unwrap();
    assert_eq!(decisions.lines().count(), 120);
    let final_rules = parse_rules(&fs::read_to_string(out.join("final_rules.jsonl")).unwrap()).unwrap();
    assert_eq!(final_rules.version, report.final_ruleset_version);
}

#[test]
fn rule_swap_through_update_loop_clears_the_cache() {
    let w = Workload::generate(22, 30).unwrap();
    let embedder: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::default());
    let cache = Arc::new(MetaCache::new(embedder.dimension(), 1000).unwrap());
    let router = Arc::new(
        Router::new(parse_rules(SEED_RULES).unwrap(), Arc::new(RuleScorer::new()))
            .with_cache(
                cache.clone(),
                embedder,
                RouterConfig {
                    tau: 0.99,
                    degrade_on_embed_error: false,
                },
            )
            .unwrap(),
    );
    let q = &w.records[0].question;
    assert_eq!(router.route(q).unwrap().source, DecisionSource::Scorer);
    assert_eq!(router.route(q).unwrap().source, DecisionSource::CacheHit);

    let pipeline = w.pipeline().unwrap();
    let client = ReplayClient::new(w.aligned_replay()).unwrap();
    let mut lp = UpdateLoop::new(router.clone(), 30, UpdateMode::Heuristic).unwrap();
    let mut events = Vec::new();
    for r in w.records.iter().skip(1).take(30) {
        let d = router.route(&r.question).unwrap();
        let out = pipeline.run(&r.query_id, &r.question, d.chosen_path, &client).unwrap();
        let o = pathroute_core::evolution::grade_outcome(
            &d,
            &out.answer.answer_text,
            &r.gold_answers,
            Default::default(),
            out.answer.generation_latency,
        );
        events.extend(lp.push(o));
    }
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].to_version, 1);
    assert!(cache.is_empty());
    assert_eq!(router.route(q).unwrap().ruleset_version, 1);
}

#[test]
fn serialized_rules_round_trip() {
    let rs = parse_rules(SEED_RULES).unwrap();
    let again = parse_rules(&serialize_rules(&rs)).unwrap();
    assert_eq!(rs, again);
    assert_eq!(again.priority_order, Path::DEFAULT_PRIORITY);
}
