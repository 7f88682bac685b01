//! Natural-language applicability conditions attached to triplets.
//!
//! Each annotated triplet carries an ordered list of [`ConstraintItem`]s: a
//! patient condition, a five-level applicability label and supporting
//! evidence. The store is persisted as JSONL, one [`AnnotatedRelation`] per
//! line, preceded by a header line naming the label vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{QkgError, Result};
use crate::kg::{GraphStore, TripletRecord};
use crate::llm::{extract_first_json_object, ChatMessage, Gateway};
use crate::prompts::PromptSet;

/// Relation types whose validity varies with patient context.
pub const FOCUSED_RELATIONS: [&str; 4] = ["indication", "contraindication", "off-label use", "drug_effect"];

pub const CONSTRAINTS_FORMAT_VERSION: u32 = 1;

/// Five-level ordinal applicability, ordered from least to most applicable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Applicability {
    DefinitelyNotApplicable,
    ProbablyNotApplicable,
    Uncertain,
    ProbablyApplicable,
    DefinitelyApplicable,
}

impl Applicability {
    /// Most applicable first.
    pub const LEVELS: [Applicability; 5] = [
        Applicability::DefinitelyApplicable,
        Applicability::ProbablyApplicable,
        Applicability::Uncertain,
        Applicability::ProbablyNotApplicable,
        Applicability::DefinitelyNotApplicable,
    ];

    /// 0 for "Definitely NOT Applicable" up to 4 for "Definitely Applicable".
    pub fn ordinal(self) -> u8 {
        self as u8
    }

    /// Position in [`Applicability::LEVELS`].
    fn rank(self) -> usize {
        4 - self.ordinal() as usize
    }
}

/// Display labels for the five levels, most applicable first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplicabilityScale {
    pub labels: [String; 5],
}

impl Default for ApplicabilityScale {
    fn default() -> Self {
        ApplicabilityScale {
            labels: [
                "Definitely Applicable".into(),
                "Probably Applicable".into(),
                "Uncertain".into(),
                "Probably NOT Applicable".into(),
                "Definitely NOT Applicable".into(),
            ],
        }
    }
}

fn label_key(s: &str) -> String {
    s.split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|t| !t.is_empty())
        .map(str::to_ascii_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl ApplicabilityScale {
    pub fn label(&self, level: Applicability) -> &str {
        &self.labels[level.rank()]
    }

    /// Case- and separator-insensitive label lookup.
    pub fn parse(&self, label: &str) -> Option<Applicability> {
        let key = label_key(label);
        self.labels
            .iter()
            .position(|l| label_key(l) == key)
            .map(|i| Applicability::LEVELS[i])
    }

    pub fn validate(&self) -> Result<()> {
        let keys: BTreeSet<String> = self.labels.iter().map(|l| label_key(l)).collect();
        if keys.len() != 5 || keys.contains("") {
            return Err(QkgError::Config(
                "applicability labels must be five distinct non-empty strings".into(),
            ));
        }
        Ok(())
    }

    pub fn joined(&self) -> String {
        self.labels
            .iter()
            .map(|l| format!("\"{l}\""))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstraintItem {
    pub patient_characteristics: String,
    pub applicability: Applicability,
    pub evidence: String,
}

impl ConstraintItem {
    pub fn new(characteristics: &str, applicability: Applicability, evidence: &str) -> Self {
        ConstraintItem {
            patient_characteristics: characteristics.to_string(),
            applicability,
            evidence: evidence.to_string(),
        }
    }
}

/// Triplet identity that survives re-indexing: endpoint source ids plus relation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletKey {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl TripletKey {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        TripletKey {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }

    pub fn of(store: &GraphStore, triplet: &TripletRecord) -> Result<Self> {
        Ok(TripletKey {
            head: store.entity(triplet.head)?.source_id.clone(),
            relation: triplet.relation.to_string(),
            tail: store.entity(triplet.tail)?.source_id.clone(),
        })
    }
}

impl fmt::Display for TripletKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedRelation {
    pub triplet_key: TripletKey,
    pub constraints: Vec<ConstraintItem>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConstraintSummary {
    pub relations: usize,
    pub facts: usize,
    pub unique_entities: usize,
    pub relation_types: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintStore {
    scale: ApplicabilityScale,
    allowed: BTreeSet<String>,
    relations: Vec<AnnotatedRelation>,
    positions: HashMap<TripletKey, usize>,
}

impl Default for ConstraintStore {
    fn default() -> Self {
        Self::new(ApplicabilityScale::default())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    qkg_constraints_version: u32,
    applicability_labels: [String; 5],
}

#[derive(Serialize)]
struct ItemOut<'a> {
    patient_characteristics: &'a str,
    applicability: &'a str,
    evidence: &'a str,
}

#[derive(Serialize)]
struct LineOut<'a> {
    triplet_key: &'a TripletKey,
    constraints: Vec<ItemOut<'a>>,
}

impl ConstraintStore {
    pub fn new(scale: ApplicabilityScale) -> Self {
        ConstraintStore {
            scale,
            allowed: FOCUSED_RELATIONS.iter().map(|s| s.to_string()).collect(),
            relations: Vec::new(),
            positions: HashMap::new(),
        }
    }

    /// Replaces the set of relation types that may be annotated.
    pub fn with_allowed_relations<I: IntoIterator<Item = S>, S: Into<String>>(mut self, relations: I) -> Self {
        self.allowed = relations.into_iter().map(Into::into).collect();
        self
    }

    pub fn scale(&self) -> &ApplicabilityScale {
        &self.scale
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    /// Annotated relations in insertion order.
    pub fn relations(&self) -> &[AnnotatedRelation] {
        &self.relations
    }

    /// Appends items to the relation for `key`, creating it if needed.
    pub fn insert(&mut self, key: TripletKey, items: Vec<ConstraintItem>) -> Result<()> {
        if !self.allowed.contains(&key.relation) {
            return Err(QkgError::Invalid(format!(
                "relation `{}` is not an annotatable relation type",
                key.relation
            )));
        }
        if let Some(bad) = items.iter().find(|i| i.patient_characteristics.trim().is_empty()) {
            return Err(QkgError::Invalid(format!(
                "empty patient_characteristics in {key}: {bad:?}"
            )));
        }
        match self.positions.get(&key) {
            Some(&pos) => self.relations[pos].constraints.extend(items),
            None => {
                self.positions.insert(key.clone(), self.relations.len());
                self.relations.push(AnnotatedRelation {
                    triplet_key: key,
                    constraints: items,
                });
            }
        }
        Ok(())
    }

    /// Stored items for `key`, or an empty slice when unannotated.
    pub fn get_constraints(&self, key: &TripletKey) -> &[ConstraintItem] {
        self.positions
            .get(key)
            .map(|&p| self.relations[p].constraints.as_slice())
            .unwrap_or(&[])
    }

    pub fn summary(&self) -> ConstraintSummary {
        let mut entities = BTreeSet::new();
        let mut relation_types = BTreeSet::new();
        for r in &self.relations {
            entities.insert(r.triplet_key.head.as_str());
            entities.insert(r.triplet_key.tail.as_str());
            relation_types.insert(r.triplet_key.relation.as_str());
        }
        ConstraintSummary {
            relations: self.relations.len(),
            facts: self.relations.iter().map(|r| r.constraints.len()).sum(),
            unique_entities: entities.len(),
            relation_types: relation_types.len(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| QkgError::io("<constraint writer>", e);
        let header = Header {
            qkg_constraints_version: CONSTRAINTS_FORMAT_VERSION,
            applicability_labels: self.scale.labels.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(io)?;
        for r in &self.relations {
            let line = LineOut {
                triplet_key: &r.triplet_key,
                constraints: r
                    .constraints
                    .iter()
                    .map(|c| ItemOut {
                        patient_characteristics: &c.patient_characteristics,
                        applicability: self.scale.label(c.applicability),
                        evidence: &c.evidence,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| QkgError::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush().map_err(|e| QkgError::io(path, e))
    }

    /// Reads the JSONL format written by [`ConstraintStore::save`]. The header
    /// line is optional; without it the default labels apply.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut store: Option<ConstraintStore> = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| QkgError::io("<constraint reader>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let schema = |field: &str, message: String| QkgError::Schema {
                line: line_no,
                field: field.into(),
                message,
            };
            let value: Value = serde_json::from_str(&line).map_err(|e| schema("<line>", e.to_string()))?;
            if value.get("applicability_labels").is_some() {
                if store.is_some() {
                    return Err(schema("applicability_labels", "header must be the first line".into()));
                }
                let header: Header =
                    serde_json::from_value(value).map_err(|e| schema("applicability_labels", e.to_string()))?;
                if header.qkg_constraints_version != CONSTRAINTS_FORMAT_VERSION {
                    return Err(schema(
                        "qkg_constraints_version",
                        format!("unsupported version {}", header.qkg_constraints_version),
                    ));
                }
                let scale = ApplicabilityScale {
                    labels: header.applicability_labels,
                };
                scale
                    .validate()
                    .map_err(|e| schema("applicability_labels", e.to_string()))?;
                store = Some(ConstraintStore::new(scale));
                continue;
            }
            let store = store.get_or_insert_with(ConstraintStore::default);
            let key: TripletKey = value
                .get("triplet_key")
                .cloned()
                .ok_or_else(|| schema("triplet_key", "missing".into()))
                .and_then(|v| serde_json::from_value(v).map_err(|e| schema("triplet_key", e.to_string())))?;
            let raw_items = value
                .get("constraints")
                .and_then(Value::as_array)
                .ok_or_else(|| schema("constraints", "missing or not an array".into()))?;
            let mut items = Vec::with_capacity(raw_items.len());
            for (j, raw) in raw_items.iter().enumerate() {
                items.push(
                    parse_item(raw, &store.scale)
                        .map_err(|(field, msg)| schema(&format!("constraints[{j}].{field}"), msg))?,
                );
            }
            store
                .insert(key, items)
                .map_err(|e| schema("triplet_key", e.to_string()))?;
        }
        Ok(store.unwrap_or_default())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| QkgError::io(path, e))?;
        Self::read_jsonl(BufReader::new(file))
    }
}

fn parse_item(raw: &Value, scale: &ApplicabilityScale) -> std::result::Result<ConstraintItem, (&'static str, String)> {
    let text = |field: &'static str| -> std::result::Result<String, (&'static str, String)> {
        match raw.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err((field, "expected a string".into())),
            None => Err((field, "missing".into())),
        }
    };
    let patient_characteristics = text("patient_characteristics")?;
    if patient_characteristics.trim().is_empty() {
        return Err(("patient_characteristics", "empty".into()));
    }
    let label = text("applicability")?;
    let applicability = scale
        .parse(&label)
        .ok_or(("applicability", format!("unknown applicability label `{label}`")))?;
    Ok(ConstraintItem {
        patient_characteristics,
        applicability,
        evidence: text("evidence")?,
    })
}

fn first_str<'a>(value: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| value.get(*k).and_then(Value::as_str))
}

/// Imports the flat relation-facts release layout: one JSON object per line
/// carrying head/relation/tail identifiers and either a `constraints` array or
/// a single inline fact (`patient_characteristics`, `applicability`, `evidence`).
/// Lines for the same triplet are merged in file order.
pub fn import_relation_facts(path: &Path, scale: ApplicabilityScale) -> Result<ConstraintStore> {
    const HEAD: [&str; 5] = ["x_id", "head_id", "head", "h_id", "source_id"];
    const REL: [&str; 3] = ["relation", "relation_type", "r"];
    const TAIL: [&str; 5] = ["y_id", "tail_id", "tail", "t_id", "target_id"];

    let file = File::open(path).map_err(|e| QkgError::io(path, e))?;
    let mut store = ConstraintStore::new(scale);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| QkgError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |field: &str, message: String| QkgError::Schema {
            line: line_no,
            field: field.into(),
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| schema("<line>", e.to_string()))?;
        let key_src = value.get("triplet_key").unwrap_or(&value);
        let key = TripletKey {
            head: first_str(key_src, &HEAD)
                .ok_or_else(|| schema("head", "missing".into()))?
                .into(),
            relation: first_str(key_src, &REL)
                .ok_or_else(|| schema("relation", "missing".into()))?
                .into(),
            tail: first_str(key_src, &TAIL)
                .ok_or_else(|| schema("tail", "missing".into()))?
                .into(),
        };
        let items = match value.get("constraints").and_then(Value::as_array) {
            Some(list) => list
                .iter()
                .enumerate()
                .map(|(j, raw)| {
                    parse_item(raw, store.scale()).map_err(|(f, m)| schema(&format!("constraints[{j}].{f}"), m))
                })
                .collect::<Result<Vec<_>>>()?,
            None => vec![parse_item(&value, store.scale()).map_err(|(f, m)| schema(f, m))?],
        };
        store
            .insert(key, items)
            .map_err(|e| schema("relation", e.to_string()))?;
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    pub role: String,
    pub relation_filter: BTreeSet<String>,
    /// Total attempts per triplet when the output fails schema validation.
    pub max_attempts: u32,
    pub parallel: usize,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            role: crate::llm::ROLE_ANNOTATOR.into(),
            relation_filter: FOCUSED_RELATIONS.iter().map(|s| s.to_string()).collect(),
            max_attempts: 3,
            parallel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnnotationFailure {
    pub triplet_key: TripletKey,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct AnnotationOutcome {
    pub store: ConstraintStore,
    pub failures: Vec<AnnotationFailure>,
}

impl AnnotationOutcome {
    pub fn write_failure_manifest(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| QkgError::io(path, e))?;
        let mut out = BufWriter::new(file);
        for f in &self.failures {
            serde_json::to_writer(&mut out, f)?;
            out.write_all(b"\n").map_err(|e| QkgError::io(path, e))?;
        }
        out.flush().map_err(|e| QkgError::io(path, e))
    }
}

/// Parses an annotator reply into constraint items.
pub fn parse_annotation(raw: &str, scale: &ApplicabilityScale) -> Result<Vec<ConstraintItem>> {
    let map = extract_first_json_object(raw)?;
    let list = map
        .get("constraints")
        .and_then(Value::as_array)
        .ok_or_else(|| QkgError::Validation {
            field: "constraints".into(),
            message: "missing or not an array".into(),
        })?;
    if list.is_empty() {
        return Err(QkgError::Validation {
            field: "constraints".into(),
            message: "at least one item is required".into(),
        });
    }
    list.iter()
        .enumerate()
        .map(|(j, raw)| {
            parse_item(raw, scale).map_err(|(field, message)| QkgError::Validation {
                field: format!("constraints[{j}].{field}"),
                message,
            })
        })
        .collect()
}

/// Generates constraint items for every unique triplet of `graph` whose
/// relation is in the filter. Schema-invalid replies are retried; triplets
/// that still fail are reported in the failure manifest.
pub fn annotate_relations(
    graph: &GraphStore,
    gateway: &Gateway,
    prompts: &PromptSet,
    scale: &ApplicabilityScale,
    options: &AnnotateOptions,
) -> Result<AnnotationOutcome> {
    let mut seen = BTreeSet::new();
    let mut selected = Vec::new();
    for t in graph.triplets() {
        if !options.relation_filter.contains(t.relation.as_ref()) {
            continue;
        }
        let key = TripletKey::of(graph, t)?;
        if seen.insert(key.clone()) {
            selected.push((t, key));
        }
    }

    let annotate_one =
        |(t, key): &(&TripletRecord, TripletKey)| -> std::result::Result<Vec<ConstraintItem>, AnnotationFailure> {
            let fail = |attempts, error: String| AnnotationFailure {
                triplet_key: key.clone(),
                attempts,
                error,
            };
            let head = graph.entity(t.head).map_err(|e| fail(0, e.to_string()))?;
            let tail = graph.entity(t.tail).map_err(|e| fail(0, e.to_string()))?;
            let labels = scale.joined();
            let mut messages = prompts.annotate.render(&[
                ("head_name", &head.name),
                ("head_id", &head.source_id),
                ("head_type", head.entity_type.as_str()),
                ("relation", &t.relation),
                ("tail_name", &tail.name),
                ("tail_id", &tail.source_id),
                ("tail_type", tail.entity_type.as_str()),
                ("applicability_labels", &labels),
            ]);
            let mut last_error = String::new();
            for attempt in 1..=options.max_attempts.max(1) {
                let raw = gateway
                    .complete(&options.role, &messages)
                    .map_err(|e| fail(attempt, e.to_string()))?;
                match parse_annotation(&raw, scale) {
                    Ok(items) => return Ok(items),
                    Err(e) => {
                        last_error = e.to_string();
                        messages.push(ChatMessage::assistant(raw));
                        messages.push(ChatMessage::user(format!(
                        "Your reply did not match the required schema ({last_error}). Reply again with only the JSON object."
                    )));
                    }
                }
            }
            Err(fail(options.max_attempts.max(1), last_error))
        };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallel.max(1))
        .build()
        .map_err(|e| QkgError::Invalid(e.to_string()))?;
    let results: Vec<_> = pool.install(|| selected.par_iter().map(annotate_one).collect());

    let mut store = ConstraintStore::new(scale.clone()).with_allowed_relations(options.relation_filter.iter().cloned());
    let mut failures = Vec::new();
    for ((_, key), result) in selected.into_iter().zip(results) {
        match result {
            Ok(items) => store.insert(key, items)?,
            Err(f) => failures.push(f),
        }
    }
    if !failures.is_empty() {
        log::warn!("{} triplet(s) failed annotation", failures.len());
    }
    Ok(AnnotationOutcome { store, failures })
}

/// JSON view of one item using the scale's labels, for prompts and reports.
pub fn item_json(item: &ConstraintItem, scale: &ApplicabilityScale) -> Value {
    json!({
        "patient_characteristics": item.patient_characteristics,
        "applicability": scale.label(item.applicability),
        "evidence": item.evidence,
    })
}
