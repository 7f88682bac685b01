use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use qkg_core::config::{ConfigOverrides, RunConfig, RunManifest};
use qkg_core::constraints::{
    annotate_relations, import_relation_facts, AnnotateOptions, ApplicabilityScale, ConstraintStore,
};
use qkg_core::dataset::{
    build_dataset as run_build, load_concept_map, read_vector_file, BuildOptions, BuildResources, CosineIndex,
    HashedNgramEmbedder, Hierarchy, PrecomputedEmbedder,
};
use qkg_core::kg::{load_graph, ColumnMap, EntityIndex, EntityType, GraphFormat, GraphStore, LoadOptions};
use qkg_core::llm::{Backend, Gateway, GatewayConfig, HttpBackend, MockBackend, MockScript, RoleConfig, RunLog};
use qkg_core::patient::{ApplicabilityEngine, LabSynonyms};
use qkg_core::pipeline::{
    load_dataset, read_per_sample_csv, read_records, run_evaluation, EvalMode, PipelineConfig, PipelineEnv, RunOutput,
    SampleRow, PER_SAMPLE_CSV, RECORDS_JSONL, SUMMARY_JSON, TIMING_JSONL,
};
use qkg_core::prompts::PromptSet;
use qkg_core::stats::{
    adjust_run, adjusted_accuracy, class_totals, classify_run, leakage_adjusted_paired_test, mcnemar_exact,
    read_classification_csv, relabel_unclassified, round4, write_classification_csv, SignalPatterns,
};
use qkg_core::subgraph::build_subgraph;
use qkg_core::validator::ValidatorOptions;

use crate::{parse_mode, LlmArgs};

pub const LLM_LOG: &str = "llm_calls.jsonl";
pub const CLASSIFICATION_CSV: &str = "classification.csv";

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_any_graph(path: &Path, format: Option<GraphFormat>, options: &LoadOptions) -> Result<GraphStore> {
    let format = format
        .or_else(|| GraphFormat::from_path(path))
        .ok_or_else(|| anyhow!("cannot tell the format of {}; pass --format", path.display()))?;
    let (graph, report) =
        load_graph(path, format, options).with_context(|| format!("loading graph {}", path.display()))?;
    log::info!(
        "loaded {} triplets, {} entities ({} duplicates)",
        report.triplets,
        report.entities,
        report.duplicates
    );
    Ok(graph)
}

pub fn load_prompts(dir: Option<&Path>) -> Result<PromptSet> {
    Ok(match dir {
        Some(d) => PromptSet::from_dir(d)?,
        None => PromptSet::default(),
    })
}

/// Resolves the run configuration for an LLM-backed command.
pub fn resolve_config(llm: &LlmArgs, overrides: ConfigOverrides) -> Result<RunConfig> {
    if let Some(p) = &llm.config {
        require_file(p, "config")?;
    }
    let overrides = ConfigOverrides {
        mock_script: llm.mock_script.clone().or(overrides.mock_script),
        ..overrides
    };
    let cfg = RunConfig::resolve(llm.config.as_deref(), &overrides)?;
    cfg.check_paths()?;
    Ok(cfg)
}

/// Gateway for `roles`. With a mock script any missing role gets default
/// settings; otherwise every role must be configured with an endpoint.
pub fn build_gateway(cfg: &RunConfig, roles: &[&str], log: Option<&Path>) -> Result<Gateway> {
    let mut gw_cfg: GatewayConfig = cfg.gateway_config()?;
    let backend: Arc<dyn Backend> = match &cfg.mock_script {
        Some(p) => {
            for r in roles {
                gw_cfg.roles.entry(r.to_string()).or_insert_with(|| {
                    let mut role = RoleConfig::new(r);
                    role.backoff_ms = 0;
                    role
                });
            }
            // A `.jsonl` path is a previous run's call log, replayed by fingerprint.
            let script = if p.extension().is_some_and(|e| e == "jsonl") {
                MockScript::from_run_log(&RunLog::read_jsonl(p)?)
            } else {
                MockScript::from_json_file(p)?
            };
            Arc::new(MockBackend::new(script))
        }
        None => {
            for r in roles {
                let role = gw_cfg
                    .role(r)
                    .map_err(|_| anyhow!("role `{r}` is not configured; add it under `roles:`"))?;
                if role.endpoint.is_empty() {
                    bail!("role `{r}` has no endpoint");
                }
            }
            Arc::new(HttpBackend::new())
        }
    };
    let gw = Gateway::new(gw_cfg, backend);
    Ok(match log {
        Some(p) => gw.with_log(RunLog::to_file(p)?),
        None => gw,
    })
}

fn parse_format(s: &str) -> Result<GraphFormat, String> {
    s.parse::<GraphFormat>().map_err(|e| e.to_string())
}

#[derive(Args)]
pub struct ImportKg {
    /// Source export (PrimeKG `kg.csv` layout or JSONL).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<GraphFormat>,
    /// CSV header overrides, e.g. `head_index=src_idx`.
    #[arg(long = "column", value_name = "FIELD=HEADER")]
    pub columns: Vec<String>,
    /// Comma-separated relation vocabulary; other relations are rejected.
    #[arg(long, value_delimiter = ',')]
    pub relations: Vec<String>,
    /// Store (t, r, h) and (h, r, t) as one triplet.
    #[arg(long)]
    pub collapse_reverse: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn import_kg(a: ImportKg) -> Result<()> {
    require_file(&a.input, "input")?;
    let columns = ColumnMap::default().with_overrides(a.columns.iter().map(String::as_str))?;
    let options = LoadOptions {
        columns,
        relation_vocab: (!a.relations.is_empty()).then(|| a.relations.iter().cloned().collect()),
        collapse_reverse: a.collapse_reverse,
    };
    let format = a
        .format
        .or_else(|| GraphFormat::from_path(&a.input))
        .ok_or_else(|| anyhow!("cannot tell the format of {}; pass --format", a.input.display()))?;
    let (graph, report) = load_graph(&a.input, format, &options)?;
    create_out_dir(&a.out_dir)?;
    graph.save_jsonl(&a.out_dir.join("graph.jsonl"))?;
    write_json(&a.out_dir.join("import_report.json"), &report)?;
    let mut m = RunManifest::new("import-kg", None);
    m.add_input("input", &a.input)?;
    m.add_output("graph.jsonl");
    m.add_output("import_report.json");
    m.write(&a.out_dir)?;
    println!(
        "imported {} triplets over {} entities ({} duplicate rows dropped)",
        report.triplets, report.entities, report.duplicates
    );
    Ok(())
}

#[derive(Args)]
pub struct ExtractSubgraph {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<GraphFormat>,
    /// Target entity: `VOCAB:ID` (e.g. `MONDO:5015`), a source id, or `#INDEX`.
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn resolve_target(graph: &GraphStore, target: &str) -> Result<EntityIndex> {
    if let Some(idx) = target.strip_prefix('#') {
        let i: EntityIndex = idx.parse().with_context(|| format!("bad entity index `{idx}`"))?;
        graph.entity(i)?;
        return Ok(i);
    }
    let (vocab, id) = match target.split_once(':') {
        Some((v, id)) if !graph.source_id_index().contains_key(target) => (Some(v), id),
        _ => (None, target),
    };
    let index = graph.source_id_index();
    let mut found: Vec<EntityIndex> = index
        .get(id)
        .into_iter()
        .flatten()
        .copied()
        .filter(|&i| vocab.is_none_or(|v| graph.entity(i).is_ok_and(|e| e.source_vocab.eq_ignore_ascii_case(v))))
        .collect();
    if found.len() > 1 {
        let diseases: Vec<EntityIndex> = found
            .iter()
            .copied()
            .filter(|&i| graph.entity(i).is_ok_and(|e| e.entity_type == EntityType::Disease))
            .collect();
        if diseases.len() == 1 {
            found = diseases;
        }
    }
    match found.as_slice() {
        [i] => Ok(*i),
        [] => bail!("no entity matches `{target}`"),
        many => bail!(
            "`{target}` is ambiguous ({} entities); use VOCAB:ID or #INDEX",
            many.len()
        ),
    }
}

pub fn extract_subgraph(a: ExtractSubgraph) -> Result<()> {
    require_file(&a.graph, "graph")?;
    let graph = load_any_graph(&a.graph, a.format, &LoadOptions::default())?;
    let target = resolve_target(&graph, &a.target)?;
    let sub = build_subgraph(&graph, target)?;
    let stats = sub.stats();
    create_out_dir(&a.out_dir)?;
    sub.merged.save_jsonl(&a.out_dir.join("subgraph.jsonl"))?;
    write_json(&a.out_dir.join("subgraph_stats.json"), &stats)?;
    let mut m = RunManifest::new("extract-subgraph", None);
    m.add_input("graph", &a.graph)?;
    m.add_output("subgraph.jsonl");
    m.add_output("subgraph_stats.json");
    m.write(&a.out_dir)?;
    println!("direct triplets:        {}", stats.direct_triplets);
    println!("intermediate entities:  {}", stats.intermediate_entities);
    println!("indirect added:         {}", stats.indirect_added_triplets);
    println!("merged triplets:        {}", stats.merged_triplets);
    println!("merged entities:        {}", stats.merged_entities);
    println!("entity types:           {}", stats.entity_types);
    println!("relation types:         {}", stats.relation_types);
    Ok(())
}

#[derive(Args)]
pub struct Annotate {
    /// Graph whose relations are annotated.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Import existing relation facts (JSONL) instead of calling a model.
    #[arg(long, conflicts_with = "graph")]
    pub import_facts: Option<PathBuf>,
    /// Comma-separated relation types to annotate.
    #[arg(long, value_delimiter = ',')]
    pub relations: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub max_attempts: u32,
    #[arg(long, default_value = qkg_core::llm::ROLE_ANNOTATOR)]
    pub role: String,
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub llm: LlmArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn annotate(a: Annotate) -> Result<()> {
    let scale = ApplicabilityScale::default();
    if let Some(facts) = &a.import_facts {
        require_file(facts, "facts file")?;
        let store = import_relation_facts(facts, scale)?;
        create_out_dir(&a.out_dir)?;
        store.save(&a.out_dir.join("constraints.jsonl"))?;
        let mut m = RunManifest::new("annotate", None);
        m.add_input("facts", facts)?;
        m.add_output("constraints.jsonl");
        m.write(&a.out_dir)?;
        let s = store.summary();
        println!(
            "imported {} annotated relations with {} constraint items",
            s.relations, s.facts
        );
        return Ok(());
    }
    let graph_path = a
        .graph
        .as_ref()
        .ok_or_else(|| anyhow!("pass --graph or --import-facts"))?;
    require_file(graph_path, "graph")?;
    let cfg = resolve_config(
        &a.llm,
        ConfigOverrides {
            workers: a.workers,
            output_dir: Some(a.out_dir.clone()),
            ..Default::default()
        },
    )?;
    let prompts = load_prompts(a.llm.prompts.as_deref())?;
    let graph = load_any_graph(graph_path, None, &LoadOptions::default())?;
    create_out_dir(&a.out_dir)?;
    let gateway = build_gateway(&cfg, &[&a.role], Some(&a.out_dir.join(LLM_LOG)))?;
    let mut options = AnnotateOptions {
        role: a.role.clone(),
        max_attempts: a.max_attempts,
        parallel: cfg.workers,
        ..Default::default()
    };
    if !a.relations.is_empty() {
        options.relation_filter = a.relations.iter().cloned().collect();
    }
    let outcome = annotate_relations(&graph, &gateway, &prompts, &scale, &options)?;
    outcome.store.save(&a.out_dir.join("constraints.jsonl"))?;
    outcome.write_failure_manifest(&a.out_dir.join("annotation_failures.jsonl"))?;
    let mut m = RunManifest::new("annotate", Some(&cfg));
    m.add_input("graph", graph_path)?;
    for f in ["constraints.jsonl", "annotation_failures.jsonl", LLM_LOG] {
        m.add_output(f);
    }
    m.write(&a.out_dir)?;
    let s = outcome.store.summary();
    println!(
        "annotated {} relations ({} constraint items); {} failed",
        s.relations,
        s.facts,
        outcome.failures.len()
    );
    Ok(())
}

#[derive(Args)]
pub struct BuildDataset {
    /// Candidate questions (JSONL, same fields as an evaluation dataset).
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// Concept names as `id<TAB>name`, embedded with hashed character n-grams.
    #[arg(long, required_unless_present = "concept_vectors")]
    pub concepts: Option<PathBuf>,
    /// Precomputed concept vectors as `id<TAB>v1 v2 ...`.
    #[arg(long, requires = "mention_vectors")]
    pub concept_vectors: Option<PathBuf>,
    /// Precomputed vectors for mention strings, same layout.
    #[arg(long)]
    pub mention_vectors: Option<PathBuf>,
    /// Concept hierarchy as `child,parent` lines.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    /// Entity-to-concept table with `node_index` and `cui` columns.
    #[arg(long)]
    pub concept_map: Option<PathBuf>,
    #[arg(long, default_value_t = 2788)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub min_score: f32,
    /// Last stage to run: 1 extract, 2 align, 3 rank, 4 patient context.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub stages: u8,
    #[arg(long, default_value = qkg_core::llm::ROLE_ANNOTATOR)]
    pub extraction_role: String,
    /// Model role for patient-context annotation; the rule parser is used otherwise.
    #[arg(long)]
    pub context_role: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub llm: LlmArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn read_name_table(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let (id, name) = l
                .split_once('\t')
                .ok_or_else(|| anyhow!("{}:{}: expected `id<TAB>name`", path.display(), i + 1))?;
            Ok((id.trim().to_string(), name.trim().to_string()))
        })
        .collect()
}

pub fn build_dataset(a: BuildDataset) -> Result<()> {
    require_file(&a.candidates, "candidates")?;
    require_file(&a.graph, "graph")?;
    for p in [
        &a.concepts,
        &a.concept_vectors,
        &a.mention_vectors,
        &a.hierarchy,
        &a.concept_map,
    ]
    .into_iter()
    .flatten()
    {
        require_file(p, "input")?;
    }
    let cfg = resolve_config(
        &a.llm,
        ConfigOverrides {
            workers: a.workers,
            output_dir: Some(a.out_dir.clone()),
            ..Default::default()
        },
    )?;
    let prompts = load_prompts(a.llm.prompts.as_deref())?;
    let samples = load_dataset(&a.candidates)?;
    let graph = load_any_graph(&a.graph, None, &LoadOptions::default())?;
    let index = match (&a.concepts, &a.concept_vectors, &a.mention_vectors) {
        (_, Some(cv), Some(mv)) => {
            let mentions: HashMap<String, Vec<f32>> = read_vector_file(mv)?.into_iter().collect();
            CosineIndex::new(
                read_vector_file(cv)?,
                Box::new(PrecomputedEmbedder { vectors: mentions }),
            )
        }
        (Some(names), _, _) => {
            CosineIndex::from_names(&read_name_table(names)?, Box::new(HashedNgramEmbedder::default()))?
        }
        _ => bail!("pass --concepts or --concept-vectors with --mention-vectors"),
    };
    let hierarchy = match &a.hierarchy {
        Some(p) => Hierarchy::from_file(p)?,
        None => Hierarchy::default(),
    };
    let concept_map = a.concept_map.as_deref().map(load_concept_map).transpose()?;
    let mut roles = vec![a.extraction_role.as_str()];
    roles.extend(a.context_role.as_deref());
    create_out_dir(&a.out_dir)?;
    let gateway = build_gateway(&cfg, &roles, Some(&a.out_dir.join(LLM_LOG)))?;
    let synonyms = LabSynonyms::default();
    let res = BuildResources {
        gateway: &gateway,
        prompts: &prompts,
        index: &index,
        graph: &graph,
        hierarchy: &hierarchy,
        concept_map: concept_map.as_ref(),
        synonyms: &synonyms,
    };
    let options = BuildOptions {
        last_stage: a.stages,
        top_k: a.top_k,
        min_score: a.min_score,
        extraction_role: a.extraction_role.clone(),
        context_role: a.context_role.clone(),
        parallel: cfg.workers,
    };
    let outcome = run_build(&samples, &res, &options)?;
    let (name, lines): (&str, Vec<String>) = if a.stages >= 3 {
        (
            "dataset.jsonl",
            outcome
                .samples()
                .iter()
                .map(serde_json::to_string)
                .collect::<Result<_, _>>()?,
        )
    } else {
        (
            "candidates.jsonl",
            outcome
                .candidates
                .iter()
                .map(serde_json::to_string)
                .collect::<Result<_, _>>()?,
        )
    };
    let mut out = BufWriter::new(File::create(a.out_dir.join(name))?);
    for l in lines {
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    write_json(&a.out_dir.join("build_report.json"), &outcome.report)?;
    let mut m = RunManifest::new("build-dataset", Some(&cfg));
    m.add_input("candidates", &a.candidates)?;
    m.add_input("graph", &a.graph)?;
    for (label, p) in [
        ("concepts", &a.concepts),
        ("concept_vectors", &a.concept_vectors),
        ("mention_vectors", &a.mention_vectors),
        ("hierarchy", &a.hierarchy),
        ("concept_map", &a.concept_map),
    ] {
        if let Some(p) = p {
            m.add_input(label, p)?;
        }
    }
    for f in [name, "build_report.json", LLM_LOG] {
        m.add_output(f);
    }
    m.write(&a.out_dir)?;
    let r = &outcome.report;
    println!(
        "{} candidates; {} mentions grounded, {} unresolved; {} direct and {} hierarchy alignments; {} without paths; {} selected",
        r.candidates, r.grounded_mentions, r.unresolved_mentions, r.direct_alignments, r.hierarchy_alignments, r.zero_path_candidates, r.selected
    );
    Ok(())
}

#[derive(Args)]
pub struct RunEval {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    /// none, kg or qkg.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<EvalMode>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub turn_budget: Option<u32>,
    /// Validate-then-reconsider rounds per sample.
    #[arg(long, default_value_t = 1)]
    pub iterations: u32,
    /// Only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Model role for patient-context extraction; the rule parser is used otherwise.
    #[arg(long)]
    pub context_role: Option<String>,
    /// Model role that judges constraints the rule matcher cannot decide.
    #[arg(long)]
    pub judge_role: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub llm: LlmArgs,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run_eval(a: RunEval) -> Result<()> {
    let cfg = resolve_config(
        &a.llm,
        ConfigOverrides {
            mode: a.mode,
            dataset: a.dataset.clone(),
            graph: a.graph.clone(),
            constraints: a.constraints.clone(),
            workers: a.workers,
            turn_budget: a.turn_budget,
            output_dir: a.out_dir.clone(),
            seed: a.seed,
            ..Default::default()
        },
    )?;
    let dataset_path = cfg
        .dataset
        .clone()
        .ok_or_else(|| anyhow!("no dataset given (--dataset or config)"))?;
    if cfg.mode != EvalMode::None && cfg.graph.is_none() {
        bail!("mode `{}` needs a graph (--graph or config)", cfg.mode.as_str());
    }
    let prompts = load_prompts(a.llm.prompts.as_deref())?;
    let mut samples = load_dataset(&dataset_path)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let graph = match (&cfg.graph, cfg.mode) {
        (Some(p), m) if m != EvalMode::None => Some(load_any_graph(p, None, &LoadOptions::default())?),
        _ => None,
    };
    let constraints = match &cfg.constraints {
        Some(p) if cfg.mode == EvalMode::Qkg => Some(ConstraintStore::load(p)?),
        _ => None,
    };
    let mut roles = vec![cfg.reasoner_role.as_str()];
    if cfg.mode != EvalMode::None {
        roles.push(cfg.validator_role.as_str());
    }
    let context_role = a.context_role.clone().or(cfg.context_role.clone());
    roles.extend(context_role.as_deref());
    roles.extend(a.judge_role.as_deref());
    create_out_dir(&cfg.output_dir)?;
    let gateway = build_gateway(&cfg, &roles, Some(&cfg.output_dir.join(LLM_LOG)))?;
    let engine = ApplicabilityEngine::default();
    let config = PipelineConfig {
        mode: cfg.mode,
        reasoner_role: cfg.reasoner_role.clone(),
        context_role,
        validator: ValidatorOptions {
            role: cfg.validator_role.clone(),
            turn_budget: cfg.turn_budget,
            judge_role: a.judge_role.clone(),
            ..Default::default()
        },
        iterations: a.iterations,
        workers: cfg.workers,
        ..Default::default()
    };
    let env = PipelineEnv {
        gateway: &gateway,
        prompts: &prompts,
        graph: graph.as_ref(),
        constraints: constraints.as_ref(),
        engine: &engine,
        config: &config,
    };
    let summary = run_evaluation(&samples, &env, &RunOutput::new(&cfg.output_dir))?;
    let mut m = RunManifest::new("run-eval", Some(&cfg));
    m.add_input("dataset", &dataset_path)?;
    if let Some(p) = cfg.graph.as_ref().filter(|_| graph.is_some()) {
        m.add_input("graph", p)?;
    }
    if let Some(p) = cfg.constraints.as_ref().filter(|_| constraints.is_some()) {
        m.add_input("constraints", p)?;
    }
    if let Some(p) = &cfg.mock_script {
        m.add_input("mock_script", p)?;
    }
    for f in [PER_SAMPLE_CSV, RECORDS_JSONL, TIMING_JSONL, SUMMARY_JSON, LLM_LOG] {
        m.add_output(f);
    }
    m.write(&cfg.output_dir)?;
    println!("samples:          {}", summary.n);
    println!("initial accuracy: {:.2}%", 100.0 * summary.initial_accuracy);
    println!("final accuracy:   {:.2}%", 100.0 * summary.final_accuracy);
    println!("W->C / C->W:      {} / {}", summary.w_to_c, summary.c_to_w);
    println!("revised:          {} ({:.2}%)", summary.revised, summary.revised_pct);
    Ok(())
}

/// Per-sample rows from a run directory or a per-sample CSV.
pub fn read_rows(path: &Path) -> Result<Vec<SampleRow>> {
    let csv = if path.is_dir() {
        path.join(PER_SAMPLE_CSV)
    } else {
        path.to_path_buf()
    };
    require_file(&csv, "per-sample CSV")?;
    Ok(read_per_sample_csv(&csv)?)
}

#[derive(Args)]
pub struct Compare {
    /// Run directory or per-sample CSV (reference run).
    #[arg(long)]
    pub a: PathBuf,
    /// Run directory or per-sample CSV.
    #[arg(long)]
    pub b: PathBuf,
    /// Classification CSV for run A; with --cases-b, flagged samples are removed first.
    #[arg(long, requires = "cases_b")]
    pub cases_a: Option<PathBuf>,
    #[arg(long, requires = "cases_a")]
    pub cases_b: Option<PathBuf>,
}

pub fn compare(a: Compare) -> Result<()> {
    let rows_a = read_rows(&a.a)?;
    let rows_b = read_rows(&a.b)?;
    let (cases_a, cases_b) = match (&a.cases_a, &a.cases_b) {
        (Some(x), Some(y)) => {
            require_file(x, "cases")?;
            require_file(y, "cases")?;
            (read_classification_csv(x)?, read_classification_csv(y)?)
        }
        _ => (Vec::new(), Vec::new()),
    };
    let t = leakage_adjusted_paired_test(&rows_a, &rows_b, &cases_a, &cases_b)?;
    if t.table.only_in_a + t.table.only_in_b > 0 {
        eprintln!(
            "warning: {} samples only in A and {} only in B were left out",
            t.table.only_in_a, t.table.only_in_b
        );
    }
    println!("paired samples: {}", t.table.n);
    if t.excluded > 0 {
        println!("excluded:       {}", t.excluded);
    }
    println!("both correct:   {}", t.table.both_correct);
    println!("both wrong:     {}", t.table.both_wrong);
    println!("b (A only):     {}", t.table.b);
    println!("c (B only):     {}", t.table.c);
    println!("p:              {}", format_p(t.p_value));
    Ok(())
}

#[derive(Args)]
pub struct Mcnemar {
    /// Pairs correct only under the first condition.
    #[arg(long)]
    pub b: u64,
    /// Pairs correct only under the second condition.
    #[arg(long)]
    pub c: u64,
    /// Print the full-precision value.
    #[arg(long)]
    pub exact: bool,
}

/// Two decimals for ordinary values, two significant digits below 0.01.
pub fn format_p(p: f64) -> String {
    if p >= 0.01 {
        format!("{:?}", (p * 100.0).round() / 100.0)
    } else if p == 0.0 {
        "0.0".into()
    } else {
        format!("{p:.1e}")
    }
}

pub fn mcnemar(a: Mcnemar) -> Result<()> {
    let p = mcnemar_exact(a.b, a.c);
    if a.exact {
        println!("{p:e}");
    } else {
        println!("{}", format_p(p));
    }
    Ok(())
}

#[derive(Args)]
pub struct ClassifyLeakage {
    /// Run directory holding `records.jsonl`.
    #[arg(long)]
    pub run: PathBuf,
    /// Signal pattern file replacing the built-in set.
    #[arg(long)]
    pub patterns: Option<PathBuf>,
    /// Send cases the rules leave unclassified to this model role.
    #[arg(long)]
    pub relabel_role: Option<String>,
    #[command(flatten)]
    pub llm: LlmArgs,
    /// Output CSV; defaults to `classification.csv` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn classify_leakage(a: ClassifyLeakage) -> Result<()> {
    let records_path = a.run.join(RECORDS_JSONL);
    require_file(&records_path, "records file")?;
    let patterns = match &a.patterns {
        Some(p) => {
            require_file(p, "patterns")?;
            SignalPatterns::from_file(p)?
        }
        None => SignalPatterns::builtin().clone(),
    };
    let gateway = match &a.relabel_role {
        Some(role) => {
            let cfg = resolve_config(&a.llm, ConfigOverrides::default())?;
            Some(build_gateway(&cfg, &[role], Some(&a.run.join("relabel_calls.jsonl")))?)
        }
        None => None,
    };
    let records = read_records(&records_path)?;
    let mut cases = classify_run(&records, &patterns);
    if let (Some(gw), Some(role)) = (&gateway, &a.relabel_role) {
        let prompts = load_prompts(a.llm.prompts.as_deref())?;
        let calls = relabel_unclassified(&mut cases, gw, role, &prompts);
        log::info!("relabelled with {calls} model calls");
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.join(CLASSIFICATION_CSV));
    write_classification_csv(&out, &cases)?;
    for (name, dir) in [
        ("W->C", qkg_core::pipeline::Revision::WrongToCorrect),
        ("C->W", qkg_core::pipeline::Revision::CorrectToWrong),
    ] {
        let t = class_totals(&cases, dir);
        println!(
            "{name}: kg-supported {} (ctx {}), mixed {}, leakage {}, unclassified {}",
            t.kg_supported, t.kg_supported_ctx, t.mixed, t.leakage, t.unclassified
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct Adjust {
    /// Run directory with `per_sample.csv` and a classification CSV.
    #[arg(long, conflicts_with_all = ["final_correct", "n"])]
    pub run: Option<PathBuf>,
    /// Classification CSV; defaults to the one in the run directory.
    #[arg(long, requires = "run")]
    pub cases: Option<PathBuf>,
    /// Raw counts instead of a run: final correct answers.
    #[arg(long, requires_all = ["n", "leak", "ctx"])]
    pub final_correct: Option<u64>,
    #[arg(long)]
    pub n: Option<u64>,
    /// Likely-leakage W->C revisions.
    #[arg(long)]
    pub leak: Option<u64>,
    /// Context-driven graph-supported C->W regressions.
    #[arg(long)]
    pub ctx: Option<u64>,
}

pub fn adjust(a: Adjust) -> Result<()> {
    match (&a.run, a.final_correct, a.n, a.leak, a.ctx) {
        (Some(run), ..) => {
            let cases_path = a.cases.clone().unwrap_or_else(|| run.join(CLASSIFICATION_CSV));
            require_file(&cases_path, "classification CSV")?;
            let rows = read_rows(run)?;
            let cases = read_classification_csv(&cases_path)?;
            let r = adjust_run(&rows, &cases)?;
            println!("samples:           {}", r.n);
            println!("final correct:     {}", r.final_correct);
            println!("leakage W->C:      {}", r.leak_w2c);
            println!("ctx-driven C->W:   {}", r.ctx_c2w);
            println!("adjusted accuracy: {:.4}", round4(r.adjusted_accuracy));
        }
        (None, Some(f), Some(n), Some(l), Some(c)) => {
            println!("{:.4}", round4(adjusted_accuracy(f, n, l, c)?));
        }
        _ => bail!("pass --run, or all of --final-correct --n --leak --ctx"),
    }
    Ok(())
}
