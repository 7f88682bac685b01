//! Construction of KG-grounded evaluation sets.
//!
//! Stage 1 extracts entity mentions from each question and grounds them to
//! concept ids through a [`ConceptIndex`]. Stage 2 aligns concepts to graph
//! entities, first directly and then through the concept hierarchy. Stage 3
//! counts single-edge paths between aligned entities and keeps the top-K
//! samples. Stage 4 attaches a patient context to each kept sample.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{QkgError, Result};
use crate::kg::{EntityIndex, GraphStore, TripletId};
use crate::llm::{extract_first_json_object, Gateway};
use crate::patient::{extract_patient_context, LabSynonyms};
use crate::pipeline::QASample;
use crate::prompts::PromptSet;

/// Text to concept candidates, best first.
pub trait ConceptIndex: Send + Sync {
    fn lookup(&self, text: &str, k: usize) -> Result<Vec<(String, f32)>>;
}

pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Character-trigram feature hashing into a fixed number of buckets.
#[derive(Debug, Clone, Copy)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        HashedNgramEmbedder { dim: 512 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

impl TextEmbedder for HashedNgramEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let norm = crate::kg::normalize_name(text);
        let padded: Vec<char> = format!(" {norm} ").chars().collect();
        let mut v = vec![0f32; self.dim.max(1)];
        for w in padded.windows(3) {
            let gram: String = w.iter().collect();
            let slot = (fnv1a(gram.as_bytes()) % v.len() as u64) as usize;
            v[slot] += 1.0;
        }
        Ok(v)
    }
}

/// Looks texts up in a table of precomputed vectors.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbedder {
    pub vectors: HashMap<String, Vec<f32>>,
}

impl TextEmbedder for PrecomputedEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        self.vectors
            .get(text)
            .or_else(|| self.vectors.get(&crate::kg::normalize_name(text)))
            .cloned()
            .ok_or_else(|| QkgError::Invalid(format!("no precomputed vector for `{text}`")))
    }
}

/// Reads `id<TAB>v1 v2 ...` lines. Blank lines and `#` comments are skipped.
pub fn read_vector_file(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let file = File::open(path).map_err(|e| QkgError::io(path, e))?;
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| QkgError::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| QkgError::MalformedRow { row: i + 1, message: m };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `id<TAB>vector`".into()))?;
        let v: Vec<f32> = rest
            .split_whitespace()
            .map(|x| x.parse::<f32>().map_err(|e| bad(format!("`{x}`: {e}"))))
            .collect::<Result<_>>()?;
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(bad("vector must be non-empty and finite".into()));
        }
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => return Err(bad(format!("dimension {} differs from {d}", v.len()))),
            _ => {}
        }
        out.push((id.trim().to_string(), v));
    }
    Ok(out)
}

fn unit(mut v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Exhaustive cosine-similarity index.
pub struct CosineIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    embedder: Box<dyn TextEmbedder>,
}

impl CosineIndex {
    pub fn new(entries: Vec<(String, Vec<f32>)>, embedder: Box<dyn TextEmbedder>) -> Self {
        let (ids, vectors) = entries.into_iter().map(|(id, v)| (id, unit(v))).unzip();
        CosineIndex { ids, vectors, embedder }
    }

    /// Index over concept names embedded with `embedder`.
    pub fn from_names(names: &[(String, String)], embedder: Box<dyn TextEmbedder>) -> Result<Self> {
        let entries = names
            .iter()
            .map(|(id, name)| Ok((id.clone(), embedder.embed(name)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(entries, embedder))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl ConceptIndex for CosineIndex {
    fn lookup(&self, text: &str, k: usize) -> Result<Vec<(String, f32)>> {
        if self.ids.is_empty() {
            return Err(QkgError::Invalid("concept index is empty".into()));
        }
        let q = unit(self.embedder.embed(text)?);
        let mut scored: Vec<(usize, f32)> = self
            .vectors
            .iter()
            .enumerate()
            .filter(|(_, v)| v.len() == q.len())
            .map(|(i, v)| (i, v.iter().zip(&q).map(|(a, b)| a * b).sum::<f32>()))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMethod {
    Direct,
    Hierarchy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedEntity {
    pub surface: String,
    /// `None` when the text could not be resolved.
    pub concept_id: Option<String>,
    pub score: f32,
    #[serde(default)]
    pub kg_index: Option<EntityIndex>,
    #[serde(default)]
    pub method: Option<AlignMethod>,
    /// Concept the alignment went through; differs from `concept_id` for hierarchy matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned_concept: Option<String>,
}

impl GroundedEntity {
    pub fn is_resolved(&self) -> bool {
        self.concept_id.is_some()
    }

    pub fn is_aligned(&self) -> bool {
        self.kg_index.is_some()
    }
}

/// Best candidate per text. Texts without a candidate at or above
/// `min_score` are returned unresolved.
pub fn ground_entities(texts: &[String], index: &dyn ConceptIndex, min_score: f32) -> Result<Vec<GroundedEntity>> {
    texts
        .iter()
        .map(|t| {
            let best = index.lookup(t, 1)?.into_iter().next().filter(|(_, s)| *s >= min_score);
            Ok(GroundedEntity {
                surface: t.clone(),
                score: best.as_ref().map(|b| b.1).unwrap_or(0.0),
                concept_id: best.map(|b| b.0),
                kg_index: None,
                method: None,
                aligned_concept: None,
            })
        })
        .collect()
}

/// Child to parent concept edges.
#[derive(Debug, Clone, Default)]
pub struct Hierarchy {
    parents: HashMap<String, Vec<String>>,
}

impl Hierarchy {
    pub fn from_edges<I, S>(edges: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut h = Hierarchy::default();
        for (child, parent) in edges {
            let (c, p) = (child.into(), parent.into());
            let list = h.parents.entry(c).or_default();
            if !list.contains(&p) {
                list.push(p);
            }
        }
        h
    }

    /// Reads `child,parent` or `child<TAB>parent` lines; a first line naming
    /// the columns is skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| QkgError::io(path, e))?;
        let mut edges = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| QkgError::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(['\t', ',']).map(str::trim);
            let (Some(c), Some(p)) = (parts.next(), parts.next()) else {
                return Err(QkgError::MalformedRow {
                    row: i + 1,
                    message: "expected `child,parent`".into(),
                });
            };
            if i == 0 && c.eq_ignore_ascii_case("child") {
                continue;
            }
            edges.push((c.to_string(), p.to_string()));
        }
        Ok(Self::from_edges(edges))
    }

    pub fn parents(&self, concept: &str) -> &[String] {
        self.parents.get(concept).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Fails if a cycle is reachable from `concept` through parent edges.
    pub fn check_acyclic_from(&self, concept: &str) -> Result<()> {
        // Iterative DFS with on-stack marking.
        let mut done: HashSet<&str> = HashSet::new();
        let mut on_stack: HashSet<&str> = HashSet::new();
        let mut stack: Vec<(&str, usize)> = vec![(concept, 0)];
        on_stack.insert(concept);
        while let Some((node, next)) = stack.pop() {
            let parents = self.parents(node);
            if next < parents.len() {
                stack.push((node, next + 1));
                let p = parents[next].as_str();
                if on_stack.contains(p) {
                    return Err(QkgError::HierarchyCycle(format!(
                        "cycle through `{p}` reached from concept `{concept}`"
                    )));
                }
                if !done.contains(p) {
                    on_stack.insert(p);
                    stack.push((p, 0));
                }
            } else {
                on_stack.remove(node);
                done.insert(node);
            }
        }
        Ok(())
    }
}

/// Maps concept ids to graph entities: by equal source id, then by an
/// optional explicit concept map.
pub struct KgConceptResolver<'a> {
    pub store: &'a GraphStore,
    pub concept_map: Option<&'a HashMap<String, EntityIndex>>,
}

impl KgConceptResolver<'_> {
    pub fn resolve(&self, concept: &str) -> Option<EntityIndex> {
        self.store
            .entity_by_source_id(concept)
            .map(|e| e.index)
            .or_else(|| self.concept_map.and_then(|m| m.get(concept).copied()))
            .filter(|i| self.store.contains(*i))
    }
}

/// Reads an entity-to-concept table (CSV or TSV) with a header naming an
/// index column (`node_index`, `index` or `entity_index`) and a `cui` column.
pub fn load_concept_map(path: &Path) -> Result<HashMap<String, EntityIndex>> {
    let text = std::fs::read_to_string(path).map_err(|e| QkgError::io(path, e))?;
    let delim = if text.lines().next().is_some_and(|l| l.contains('\t')) {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new().delimiter(delim).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
    };
    let idx = find(&["node_index", "index", "entity_index"]).ok_or_else(|| QkgError::Schema {
        line: 1,
        field: "node_index".into(),
        message: "missing column".into(),
    })?;
    let cui = find(&["cui", "umls_cui", "concept_id"]).ok_or_else(|| QkgError::Schema {
        line: 1,
        field: "cui".into(),
        message: "missing column".into(),
    })?;
    let mut out = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let c = rec.get(cui).unwrap_or("").trim();
        if c.is_empty() {
            continue;
        }
        let index: EntityIndex = rec
            .get(idx)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| QkgError::MalformedRow {
                row: i + 2,
                message: "entity index is not an integer".into(),
            })?;
        out.entry(c.to_string()).or_insert(index);
    }
    Ok(out)
}

/// Aligns grounded concepts to graph entities. Direct matches win; otherwise
/// ancestors are searched breadth-first and the first matching one is used.
pub fn align_to_kg(
    grounded: &[GroundedEntity],
    resolver: &KgConceptResolver<'_>,
    hierarchy: &Hierarchy,
) -> Result<Vec<GroundedEntity>> {
    grounded
        .iter()
        .map(|g| {
            let mut out = GroundedEntity {
                kg_index: None,
                method: None,
                aligned_concept: None,
                ..g.clone()
            };
            let Some(concept) = &g.concept_id else { return Ok(out) };
            if let Some(i) = resolver.resolve(concept) {
                out.kg_index = Some(i);
                out.method = Some(AlignMethod::Direct);
                out.aligned_concept = Some(concept.clone());
                return Ok(out);
            }
            hierarchy.check_acyclic_from(concept)?;
            let mut seen: HashSet<&str> = HashSet::from([concept.as_str()]);
            let mut queue: VecDeque<&str> = hierarchy.parents(concept).iter().map(String::as_str).collect();
            while let Some(c) = queue.pop_front() {
                if !seen.insert(c) {
                    continue;
                }
                if let Some(i) = resolver.resolve(c) {
                    out.kg_index = Some(i);
                    out.method = Some(AlignMethod::Hierarchy);
                    out.aligned_concept = Some(c.to_string());
                    break;
                }
                queue.extend(hierarchy.parents(c).iter().map(String::as_str));
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OneHopPaths {
    pub count: usize,
    pub triplets: Vec<TripletId>,
}

/// Triplets whose head and tail are both aligned entities. Fewer than two
/// distinct aligned entities yield no paths.
pub fn enumerate_onehop_paths(aligned: &[EntityIndex], graph: &GraphStore) -> OneHopPaths {
    let set: BTreeSet<EntityIndex> = aligned.iter().copied().filter(|i| graph.contains(*i)).collect();
    if set.len() < 2 {
        return OneHopPaths::default();
    }
    let mut ids = BTreeSet::new();
    for &e in &set {
        for &id in graph.incident_ids(e).unwrap_or(&[]) {
            let t = &graph.triplets()[id];
            if set.contains(&t.head) && set.contains(&t.tail) {
                ids.insert(id);
            }
        }
    }
    OneHopPaths {
        count: ids.len(),
        triplets: ids.into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSample {
    #[serde(flatten)]
    pub sample: QASample,
    #[serde(default)]
    pub grounded: Vec<GroundedEntity>,
    #[serde(default)]
    pub path_count: usize,
}

impl CandidateSample {
    pub fn aligned_indices(&self) -> Vec<EntityIndex> {
        self.grounded.iter().filter_map(|g| g.kg_index).collect()
    }
}

/// Drops zero-path candidates, sorts by path count descending with sample id
/// as tie-break, and keeps the first `k`.
pub fn rank_and_filter(candidates: Vec<CandidateSample>, k: usize) -> Vec<CandidateSample> {
    let mut kept: Vec<CandidateSample> = candidates.into_iter().filter(|c| c.path_count > 0).collect();
    kept.sort_by(|a, b| {
        b.path_count
            .cmp(&a.path_count)
            .then_with(|| a.sample.id.cmp(&b.sample.id))
    });
    kept.truncate(k);
    kept
}

/// Entity mentions named by the extraction role.
pub fn extract_entities(sample: &QASample, gateway: &Gateway, role: &str, prompts: &PromptSet) -> Result<Vec<String>> {
    let choices = sample.render_choices();
    let messages = prompts
        .entity_extraction
        .render(&[("question", &sample.question), ("choices", &choices)]);
    let raw = gateway.complete(role, &messages)?;
    let map = extract_first_json_object(&raw)?;
    let list = map
        .get("entities")
        .and_then(Value::as_array)
        .ok_or_else(|| QkgError::Validation {
            field: "entities".into(),
            message: "missing or not an array".into(),
        })?;
    let mut seen = BTreeSet::new();
    Ok(list
        .iter()
        .filter_map(Value::as_str)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    /// Last stage to run (1 to 4).
    pub last_stage: u8,
    pub top_k: usize,
    pub min_score: f32,
    pub extraction_role: String,
    /// Role for patient-context annotation; the regex parser is used when unset.
    pub context_role: Option<String>,
    pub parallel: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            last_stage: 4,
            top_k: 2788,
            min_score: 0.5,
            extraction_role: crate::llm::ROLE_ANNOTATOR.into(),
            context_role: None,
            parallel: 4,
        }
    }
}

pub struct BuildResources<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
    pub index: &'a dyn ConceptIndex,
    pub graph: &'a GraphStore,
    pub hierarchy: &'a Hierarchy,
    pub concept_map: Option<&'a HashMap<String, EntityIndex>>,
    pub synonyms: &'a LabSynonyms,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildReport {
    pub candidates: usize,
    pub extraction_failures: usize,
    pub grounded_mentions: usize,
    pub unresolved_mentions: usize,
    pub direct_alignments: usize,
    pub hierarchy_alignments: usize,
    pub zero_path_candidates: usize,
    pub selected: usize,
}

pub struct BuildOutcome {
    pub candidates: Vec<CandidateSample>,
    pub report: BuildReport,
}

impl BuildOutcome {
    /// Selected samples with grounding metadata attached, for the evaluator.
    pub fn samples(&self) -> Vec<QASample> {
        self.candidates
            .iter()
            .map(|c| {
                let mut s = c.sample.clone();
                s.kg_grounding = Some(json!({
                    "path_count": c.path_count,
                    "entities": c.grounded.iter().filter(|g| g.is_aligned()).collect::<Vec<_>>(),
                }));
                s
            })
            .collect()
    }
}

/// Runs stages 1 through `options.last_stage`. Stages 1 and 4 call the
/// gateway with bounded parallelism; 2 and 3 are pure.
pub fn build_dataset(samples: &[QASample], res: &BuildResources<'_>, options: &BuildOptions) -> Result<BuildOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallel.max(1))
        .build()
        .map_err(|e| QkgError::Invalid(e.to_string()))?;
    let mut report = BuildReport {
        candidates: samples.len(),
        ..Default::default()
    };

    let stage1: Vec<Result<(CandidateSample, bool)>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let (mentions, failed) = match extract_entities(s, res.gateway, &options.extraction_role, res.prompts) {
                    Ok(m) => (m, false),
                    Err(e) => {
                        log::warn!("entity extraction failed for {}: {e}", s.id);
                        (Vec::new(), true)
                    }
                };
                let grounded = ground_entities(&mentions, res.index, options.min_score)?;
                Ok((
                    CandidateSample {
                        sample: s.clone(),
                        grounded,
                        path_count: 0,
                    },
                    failed,
                ))
            })
            .collect()
    });
    let mut candidates = Vec::with_capacity(samples.len());
    for r in stage1 {
        let (c, failed) = r?;
        report.extraction_failures += failed as usize;
        candidates.push(c);
    }
    for c in &candidates {
        report.grounded_mentions += c.grounded.iter().filter(|g| g.is_resolved()).count();
        report.unresolved_mentions += c.grounded.iter().filter(|g| !g.is_resolved()).count();
    }
    if options.last_stage <= 1 {
        return Ok(BuildOutcome { candidates, report });
    }

    let resolver = KgConceptResolver {
        store: res.graph,
        concept_map: res.concept_map,
    };
    let aligned: Vec<Result<Vec<GroundedEntity>>> = candidates
        .par_iter()
        .map(|c| align_to_kg(&c.grounded, &resolver, res.hierarchy))
        .collect();
    for (c, a) in candidates.iter_mut().zip(aligned) {
        c.grounded = a?;
        for g in &c.grounded {
            match g.method {
                Some(AlignMethod::Direct) => report.direct_alignments += 1,
                Some(AlignMethod::Hierarchy) => report.hierarchy_alignments += 1,
                None => {}
            }
        }
    }
    if options.last_stage <= 2 {
        return Ok(BuildOutcome { candidates, report });
    }

    candidates
        .par_iter_mut()
        .for_each(|c| c.path_count = enumerate_onehop_paths(&c.aligned_indices(), res.graph).count);
    report.zero_path_candidates = candidates.iter().filter(|c| c.path_count == 0).count();
    let mut candidates = rank_and_filter(candidates, options.top_k);
    report.selected = candidates.len();
    if options.last_stage <= 3 {
        return Ok(BuildOutcome { candidates, report });
    }

    let role = options.context_role.as_deref().unwrap_or("");
    let gateway = options.context_role.as_ref().map(|_| res.gateway);
    pool.install(|| {
        candidates.par_iter_mut().for_each(|c| {
            c.sample.precomputed_context = Some(extract_patient_context(
                &c.sample.question,
                gateway,
                role,
                &res.prompts.patient_context,
                res.synonyms,
            ));
        })
    });
    Ok(BuildOutcome { candidates, report })
}
