//! Reasoner, validator and reconsideration over a QA dataset.
//!
//! [`answer_question`] runs one sample: the reasoner answers and emits
//! claims, the validator checks them (unless validation is off), and the
//! reasoner reconsiders only when some claim is CONTRADICTED.
//! [`run_evaluation`] evaluates a dataset with a bounded worker pool, writes
//! results in dataset order and can resume an interrupted run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::constraints::ConstraintStore;
use crate::error::{QkgError, Result};
use crate::kg::GraphStore;
use crate::llm::{
    extract_first_json_object, normalize_answer_letter, parse_qa_response, ChatMessage, Gateway, QAResponse,
    ROLE_REASONER,
};
use crate::patient::{extract_patient_context, ApplicabilityEngine, PatientContext};
use crate::prompts::PromptSet;
use crate::validator::{validate_claims, Claim, ValidationEnv, ValidationMode, ValidationReport, ValidatorOptions};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const PER_SAMPLE_CSV_VERSION: u32 = 1;
pub const PER_SAMPLE_COLUMNS: [&str; 8] = [
    "sample_id",
    "initial_answer",
    "initial_correct",
    "final_answer",
    "final_correct",
    "revision",
    "mode",
    "validator_model",
];

pub const PER_SAMPLE_CSV: &str = "per_sample.csv";
pub const RECORDS_JSONL: &str = "records.jsonl";
pub const TIMING_JSONL: &str = "timing.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub question: String,
    pub choices: BTreeMap<char, String>,
    pub gold: char,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precomputed_context: Option<PatientContext>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg_grounding: Option<Value>,
}

impl QASample {
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| QkgError::Validation {
            field: format!("sample {}", self.id),
            message: m,
        };
        if self.choices.len() < 2 {
            return Err(invalid("needs at least two choices".into()));
        }
        if let Some(bad) = self.choices.keys().find(|c| !('A'..='J').contains(*c)) {
            return Err(invalid(format!("choice label `{bad}` is not A-J")));
        }
        if !self.choices.contains_key(&self.gold) {
            return Err(invalid(format!("gold `{}` is not among the choices", self.gold)));
        }
        Ok(())
    }

    pub fn render_choices(&self) -> String {
        self.choices
            .iter()
            .map(|(k, v)| format!("{k}. {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn str_field<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| v.get(*k).and_then(Value::as_str))
}

fn parse_choices(v: &Value) -> Option<BTreeMap<char, String>> {
    let mut out = BTreeMap::new();
    match v {
        Value::Object(map) => {
            for (k, text) in map {
                let letter = normalize_answer_letter(k).ok()?;
                out.insert(letter, text.as_str()?.trim().to_string());
            }
        }
        Value::Array(list) => {
            for (i, text) in list.iter().enumerate() {
                let letter = *crate::llm::ANSWER_LETTERS.get(i)?;
                out.insert(letter, text.as_str()?.trim().to_string());
            }
        }
        Value::String(s) => {
            for line in s.lines() {
                let line = line.trim();
                let mut chars = line.chars();
                let (Some(l), Some(sep)) = (chars.next(), chars.next()) else {
                    continue;
                };
                if matches!(sep, '.' | ')' | ':') {
                    if let Ok(letter) = normalize_answer_letter(&l.to_string()) {
                        out.insert(letter, chars.as_str().trim().to_string());
                    }
                }
            }
        }
        _ => return None,
    }
    (!out.is_empty()).then_some(out)
}

/// Reads QA samples from JSONL. Native records are accepted as-is; other
/// layouts are mapped through common field aliases (`options`, `answer`,
/// `answer_idx`, ...). A gold answer given as option text is resolved to its
/// letter.
pub fn load_dataset(path: &Path) -> Result<Vec<QASample>> {
    let file = File::open(path).map_err(|e| QkgError::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
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
        let v: Value = serde_json::from_str(&line).map_err(|e| schema("<line>", e.to_string()))?;
        let id = match v.get("id").or_else(|| v.get("qa_id")).or_else(|| v.get("sample_id")) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("sample_{line_no}"),
        };
        let question = str_field(&v, &["question", "query", "stem"])
            .ok_or_else(|| schema("question", "missing".into()))?
            .to_string();
        let choices = ["choices", "options", "answer_choices"]
            .iter()
            .find_map(|k| v.get(*k))
            .and_then(parse_choices)
            .ok_or_else(|| schema("choices", "missing or unreadable".into()))?;
        let gold_raw = ["gold", "answer_idx", "answer_letter", "answer", "gold_answer"]
            .iter()
            .find_map(|k| v.get(*k).and_then(Value::as_str))
            .ok_or_else(|| schema("gold", "missing".into()))?;
        let gold = normalize_answer_letter(gold_raw)
            .ok()
            .filter(|g| choices.contains_key(g))
            .or_else(|| {
                let want = gold_raw.trim().to_lowercase();
                choices.iter().find(|(_, t)| t.to_lowercase() == want).map(|(k, _)| *k)
            })
            .ok_or_else(|| schema("gold", format!("`{gold_raw}` matches no choice")))?;
        let precomputed_context = match v.get("precomputed_context").or_else(|| v.get("patient_context")) {
            Some(Value::Null) | None => None,
            Some(c) => {
                Some(serde_json::from_value(c.clone()).map_err(|e| schema("precomputed_context", e.to_string()))?)
            }
        };
        let sample = QASample {
            id,
            question,
            choices,
            gold,
            precomputed_context,
            kg_grounding: v.get("kg_grounding").filter(|g| !g.is_null()).cloned(),
        };
        sample.validate().map_err(|e| schema("choices", e.to_string()))?;
        if !ids.insert(sample.id.clone()) {
            return Err(schema("id", format!("duplicate sample id `{}`", sample.id)));
        }
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Reasoner only.
    None,
    /// Validation against the graph without patient context.
    Kg,
    /// Validation with constraint applicability against patient context.
    Qkg,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::None => "none",
            EvalMode::Kg => "kg",
            EvalMode::Qkg => "qkg",
        }
    }

    pub fn validation_mode(self) -> Option<ValidationMode> {
        match self {
            EvalMode::None => None,
            EvalMode::Kg => Some(ValidationMode::KgOnly),
            EvalMode::Qkg => Some(ValidationMode::QkgWithContext),
        }
    }
}

impl FromStr for EvalMode {
    type Err = QkgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(EvalMode::None),
            "kg" | "kg_only" => Ok(EvalMode::Kg),
            "qkg" | "qkg_with_context" => Ok(EvalMode::Qkg),
            other => Err(QkgError::Config(format!(
                "unknown mode `{other}` (expected none, kg or qkg)"
            ))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Revision {
    Unchanged,
    WrongToCorrect,
    CorrectToWrong,
    WrongToWrongChanged,
}

impl Revision {
    pub fn as_str(self) -> &'static str {
        match self {
            Revision::Unchanged => "unchanged",
            Revision::WrongToCorrect => "W->C",
            Revision::CorrectToWrong => "C->W",
            Revision::WrongToWrongChanged => "W->W-changed",
        }
    }

    pub fn classify(initial: Option<char>, final_: Option<char>, gold: char) -> Self {
        if initial == final_ {
            return Revision::Unchanged;
        }
        match (initial == Some(gold), final_ == Some(gold)) {
            (false, true) => Revision::WrongToCorrect,
            (true, false) => Revision::CorrectToWrong,
            (false, false) => Revision::WrongToWrongChanged,
            (true, true) => Revision::Unchanged,
        }
    }

    pub fn is_change(self) -> bool {
        self != Revision::Unchanged
    }
}

impl FromStr for Revision {
    type Err = QkgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('→', "->").as_str() {
            "unchanged" => Ok(Revision::Unchanged),
            "W->C" => Ok(Revision::WrongToCorrect),
            "C->W" => Ok(Revision::CorrectToWrong),
            "W->W-changed" => Ok(Revision::WrongToWrongChanged),
            other => Err(QkgError::Invalid(format!("unknown revision `{other}`"))),
        }
    }
}

impl fmt::Display for Revision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Revision {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Revision {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub reasoner_ms: u64,
    pub context_ms: u64,
    pub validator_ms: u64,
    pub reconsider_ms: u64,
    pub total_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub sample_id: String,
    pub gold: char,
    pub mode: EvalMode,
    pub validator_model: String,
    pub initial_answer: Option<char>,
    pub initial_correct: bool,
    pub final_answer: Option<char>,
    pub final_correct: bool,
    pub revision: Revision,
    pub claims: Vec<Claim>,
    pub validation_report: Option<ValidationReport>,
    /// Reports of further validation rounds when more than one is configured.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub later_reports: Vec<ValidationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_context: Option<PatientContext>,
    pub initial_reasoning: String,
    pub final_reasoning: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    #[serde(skip)]
    pub timing: Timing,
}

impl EvalRecord {
    pub fn row(&self) -> SampleRow {
        SampleRow {
            sample_id: self.sample_id.clone(),
            initial_answer: self.initial_answer.map(String::from).unwrap_or_default(),
            initial_correct: self.initial_correct,
            final_answer: self.final_answer.map(String::from).unwrap_or_default(),
            final_correct: self.final_correct,
            revision: self.revision,
            mode: self.mode,
            validator_model: self.validator_model.clone(),
        }
    }
}

/// One line of the per-sample CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    pub initial_answer: String,
    pub initial_correct: bool,
    pub final_answer: String,
    pub final_correct: bool,
    pub revision: Revision,
    pub mode: EvalMode,
    pub validator_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: EvalMode,
    pub reasoner_role: String,
    /// Role for LLM patient-context extraction; the regex parser is used when unset.
    pub context_role: Option<String>,
    pub validator: ValidatorOptions,
    /// Number of validate-then-reconsider rounds.
    pub iterations: u32,
    /// Attempts per reasoner call when the reply does not parse.
    pub reasoner_attempts: u32,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: EvalMode::Qkg,
            reasoner_role: ROLE_REASONER.into(),
            context_role: None,
            validator: ValidatorOptions::default(),
            iterations: 1,
            reasoner_attempts: 2,
            workers: 4,
        }
    }
}

/// Everything a run reads but never mutates.
pub struct PipelineEnv<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
    pub graph: Option<&'a GraphStore>,
    pub constraints: Option<&'a ConstraintStore>,
    pub engine: &'a ApplicabilityEngine,
    pub config: &'a PipelineConfig,
}

impl PipelineEnv<'_> {
    pub fn validator_model(&self) -> String {
        match self.config.mode {
            EvalMode::None => String::new(),
            _ => self
                .gateway
                .config()
                .role(&self.config.validator.role)
                .map(|r| r.model.clone())
                .unwrap_or_default(),
        }
    }
}

/// Claims from a reasoner reply; entries that are malformed or refer to
/// unknown options are skipped.
pub fn parse_claims(raw: &str, choices: &BTreeMap<char, String>) -> Vec<Claim> {
    let Ok(map) = extract_first_json_object(raw) else {
        return Vec::new();
    };
    let Some(list) = map.get("claims").and_then(Value::as_array) else {
        return Vec::new();
    };
    list.iter()
        .filter_map(|c| {
            let label = normalize_answer_letter(c.get("option_label")?.as_str()?).ok()?;
            if !choices.contains_key(&label) {
                return None;
            }
            let statement = c.get("statement")?.as_str()?.trim().to_string();
            if statement.is_empty() {
                return None;
            }
            let supports = match c.get("supports") {
                Some(Value::Bool(b)) => *b,
                Some(Value::String(s)) => s.eq_ignore_ascii_case("true"),
                _ => true,
            };
            Some(Claim {
                option_label: label,
                statement,
                supports,
            })
        })
        .collect()
}

fn ask_reasoner(
    env: &PipelineEnv<'_>,
    sample: &QASample,
    mut messages: Vec<ChatMessage>,
) -> std::result::Result<(QAResponse, String), String> {
    let attempts = env.config.reasoner_attempts.max(1);
    let mut last = String::new();
    for _ in 0..attempts {
        let raw = env
            .gateway
            .complete(&env.config.reasoner_role, &messages)
            .map_err(|e| format!("reasoner call failed: {e}"))?;
        let parsed = parse_qa_response(&raw).and_then(|r| {
            if sample.choices.contains_key(&r.llm_answer_choice) {
                Ok(r)
            } else {
                Err(QkgError::Validation {
                    field: "llm_answer_choice".into(),
                    message: format!("`{}` is not one of the options", r.llm_answer_choice),
                })
            }
        });
        match parsed {
            Ok(r) => return Ok((r, raw)),
            Err(e) => {
                last = e.to_string();
                messages.push(ChatMessage::assistant(raw));
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be parsed ({last}). Reply again with only the JSON object."
                )));
            }
        }
    }
    Err(format!(
        "unparseable reasoner output after {attempts} attempt(s): {last}"
    ))
}

fn ms(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

/// Runs the full reasoner/validator/reconsider procedure for one sample.
/// Failures are recorded on the result, never returned.
pub fn answer_question(sample: &QASample, env: &PipelineEnv<'_>) -> EvalRecord {
    let start = Instant::now();
    let mut timing = Timing::default();
    let mut errors = Vec::new();
    let choices = sample.render_choices();
    let first = env
        .prompts
        .reasoner_answer
        .render(&[("question", &sample.question), ("choices", &choices)]);
    let t = Instant::now();
    let initial = ask_reasoner(env, sample, first);
    timing.reasoner_ms = ms(t);

    let (initial_answer, initial_reasoning, claims) = match &initial {
        Ok((r, raw)) => (
            Some(r.llm_answer_choice),
            r.reasoning.clone(),
            parse_claims(raw, &sample.choices),
        ),
        Err(e) => {
            errors.push(e.clone());
            (None, String::new(), Vec::new())
        }
    };

    let mut final_answer = initial_answer;
    let mut final_reasoning = initial_reasoning.clone();
    let mut reports = Vec::new();
    let mut patient_context = None;

    let validation = env.config.mode.validation_mode().filter(|_| initial_answer.is_some());
    if let (Some(mode), Some(graph)) = (validation, env.graph) {
        let ctx = match mode {
            ValidationMode::KgOnly => PatientContext::default(),
            ValidationMode::QkgWithContext => {
                let t = Instant::now();
                let ctx = sample.precomputed_context.clone().unwrap_or_else(|| {
                    let role = env.config.context_role.as_deref().unwrap_or("");
                    let gateway = env.config.context_role.as_ref().map(|_| env.gateway);
                    extract_patient_context(
                        &sample.question,
                        gateway,
                        role,
                        &env.prompts.patient_context,
                        &env.engine.synonyms,
                    )
                });
                timing.context_ms = ms(t);
                patient_context = Some(ctx.clone());
                ctx
            }
        };
        let empty = ConstraintStore::default();
        let venv = ValidationEnv {
            graph,
            constraints: env.constraints.unwrap_or(&empty),
            engine: env.engine,
            gateway: env.gateway,
            prompts: env.prompts,
        };
        let options = ValidatorOptions {
            mode,
            ..env.config.validator.clone()
        };
        let mut round_claims = claims.clone();
        let mut current = initial_answer.expect("validation requires an initial answer");
        for _ in 0..env.config.iterations.max(1) {
            let t = Instant::now();
            let report = validate_claims(&round_claims, &ctx, &venv, &options);
            timing.validator_ms += ms(t);
            let contradicted = report.has_contradiction();
            let summary = report.describe();
            reports.push(report);
            if !contradicted {
                break;
            }
            let current_str = current.to_string();
            let messages = env.prompts.reasoner_reconsider.render(&[
                ("question", &sample.question),
                ("choices", &choices),
                ("initial_answer", &current_str),
                ("report", &summary),
            ]);
            let t = Instant::now();
            let revised = ask_reasoner(env, sample, messages);
            timing.reconsider_ms += ms(t);
            match revised {
                Ok((r, raw)) => {
                    current = r.llm_answer_choice;
                    final_answer = Some(current);
                    final_reasoning = r.reasoning;
                    round_claims = parse_claims(&raw, &sample.choices);
                    if round_claims.is_empty() {
                        break;
                    }
                }
                Err(e) => {
                    errors.push(e);
                    final_answer = None;
                    final_reasoning.clear();
                    break;
                }
            }
        }
    } else if validation.is_some() {
        errors.push("validation requested but no graph is loaded".into());
    }

    timing.total_ms = ms(start);
    let mut reports = reports.into_iter();
    EvalRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        sample_id: sample.id.clone(),
        gold: sample.gold,
        mode: env.config.mode,
        validator_model: env.validator_model(),
        initial_answer,
        initial_correct: initial_answer == Some(sample.gold),
        final_answer,
        final_correct: final_answer == Some(sample.gold),
        revision: Revision::classify(initial_answer, final_answer, sample.gold),
        claims,
        validation_report: reports.next(),
        later_reports: reports.collect(),
        patient_context,
        initial_reasoning,
        final_reasoning,
        errors,
        timing,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n: usize,
    pub initial_correct: usize,
    pub final_correct: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub revised: usize,
    pub revised_pct: f64,
    pub w_to_c: usize,
    pub c_to_w: usize,
    pub w_to_w_changed: usize,
    pub invalid_initial: usize,
    pub invalid_final: usize,
    pub mode: Option<EvalMode>,
    /// Role name to model identifier.
    pub roles: BTreeMap<String, String>,
}

/// Percentage of changed answers.
pub fn revision_rate_pct(changed: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * changed as f64 / n as f64
    }
}

impl RunSummary {
    pub fn from_rows(rows: &[SampleRow]) -> Self {
        let n = rows.len();
        let count = |f: &dyn Fn(&SampleRow) -> bool| rows.iter().filter(|r| f(r)).count();
        let initial_correct = count(&|r| r.initial_correct);
        let final_correct = count(&|r| r.final_correct);
        let revised = count(&|r| r.revision.is_change());
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let modes: BTreeSet<_> = rows.iter().map(|r| r.mode).collect();
        RunSummary {
            n,
            initial_correct,
            final_correct,
            initial_accuracy: frac(initial_correct),
            final_accuracy: frac(final_correct),
            revised,
            revised_pct: revision_rate_pct(revised, n),
            w_to_c: count(&|r| r.revision == Revision::WrongToCorrect),
            c_to_w: count(&|r| r.revision == Revision::CorrectToWrong),
            w_to_w_changed: count(&|r| r.revision == Revision::WrongToWrongChanged),
            invalid_initial: count(&|r| r.initial_answer.is_empty()),
            invalid_final: count(&|r| r.final_answer.is_empty()),
            mode: (modes.len() == 1).then(|| *modes.iter().next().unwrap()),
            roles: BTreeMap::new(),
        }
    }

    /// `final_correct = initial_correct + W->C - C->W`.
    pub fn accounting_holds(&self) -> bool {
        self.final_correct + self.c_to_w == self.initial_correct + self.w_to_c
    }
}

/// Rows that violate the revision/correctness/answer consistency rules.
pub fn inconsistent_rows(rows: &[SampleRow]) -> Vec<&SampleRow> {
    rows.iter()
        .filter(|r| {
            let same = r.initial_answer == r.final_answer;
            let expected = match (same, r.initial_correct, r.final_correct) {
                (true, a, b) if a == b => Some(Revision::Unchanged),
                (true, _, _) => None,
                (false, false, true) => Some(Revision::WrongToCorrect),
                (false, true, false) => Some(Revision::CorrectToWrong),
                (false, false, false) => Some(Revision::WrongToWrongChanged),
                (false, true, true) => None,
            };
            expected != Some(r.revision)
        })
        .collect()
}

pub fn read_per_sample_csv(path: &Path) -> Result<Vec<SampleRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| QkgError::Config(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != PER_SAMPLE_COLUMNS {
        return Err(QkgError::Schema {
            line: 1,
            field: "header".into(),
            message: format!("expected columns {PER_SAMPLE_COLUMNS:?}, found {got:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        rows.push(row.map_err(|e: csv::Error| QkgError::MalformedRow {
            row: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

pub fn write_per_sample_csv(path: &Path, rows: &[SampleRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| QkgError::io(path, e))
}

/// Reads `records.jsonl`; a later line for the same sample replaces an earlier one.
pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = File::open(path).map_err(|e| QkgError::io(path, e))?;
    let mut order = Vec::new();
    let mut by_id: HashMap<String, EvalRecord> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| QkgError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line).map_err(|e| QkgError::Schema {
            line: i + 1,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        if !by_id.contains_key(&rec.sample_id) {
            order.push(rec.sample_id.clone());
        }
        by_id.insert(rec.sample_id.clone(), rec);
    }
    Ok(order.into_iter().filter_map(|id| by_id.remove(&id)).collect())
}

pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunOutput { dir: dir.into() }
    }

    pub fn per_sample(&self) -> PathBuf {
        self.dir.join(PER_SAMPLE_CSV)
    }

    pub fn records(&self) -> PathBuf {
        self.dir.join(RECORDS_JSONL)
    }

    pub fn timing(&self) -> PathBuf {
        self.dir.join(TIMING_JSONL)
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join(SUMMARY_JSON)
    }
}

struct Sinks {
    csv: csv::Writer<File>,
    records: BufWriter<File>,
    timing: BufWriter<File>,
    paths: [PathBuf; 3],
}

impl Sinks {
    fn open(out: &RunOutput, resuming: bool) -> Result<Self> {
        let append = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(resuming)
                .write(true)
                .truncate(!resuming)
                .open(p)
                .map_err(|e| QkgError::io(p, e))
        };
        let csv_path = out.per_sample();
        let csv = csv::WriterBuilder::new()
            .has_headers(!resuming)
            .from_writer(append(&csv_path)?);
        Ok(Sinks {
            csv,
            records: BufWriter::new(append(&out.records())?),
            timing: BufWriter::new(append(&out.timing())?),
            paths: [csv_path, out.records(), out.timing()],
        })
    }

    fn write(&mut self, rec: &EvalRecord) -> Result<()> {
        serde_json::to_writer(&mut self.records, rec)?;
        self.records
            .write_all(b"\n")
            .map_err(|e| QkgError::io(&self.paths[1], e))?;
        self.records.flush().map_err(|e| QkgError::io(&self.paths[1], e))?;
        serde_json::to_writer(
            &mut self.timing,
            &serde_json::json!({"sample_id": rec.sample_id, "timing": rec.timing}),
        )?;
        self.timing
            .write_all(b"\n")
            .map_err(|e| QkgError::io(&self.paths[2], e))?;
        self.timing.flush().map_err(|e| QkgError::io(&self.paths[2], e))?;
        self.csv.serialize(rec.row())?;
        self.csv.flush().map_err(|e| QkgError::io(&self.paths[0], e))
    }
}

/// Evaluates `samples`, skipping any already present in an existing
/// per-sample CSV. Rows are written in dataset order as soon as every
/// earlier sample is done. The summary covers all rows in the CSV.
pub fn run_evaluation(samples: &[QASample], env: &PipelineEnv<'_>, out: &RunOutput) -> Result<RunSummary> {
    std::fs::create_dir_all(&out.dir).map_err(|e| QkgError::io(&out.dir, e))?;
    let csv_path = out.per_sample();
    let resuming = csv_path.exists() && std::fs::metadata(&csv_path).map(|m| m.len() > 0).unwrap_or(false);
    let done: BTreeSet<String> = if resuming {
        read_per_sample_csv(&csv_path)?
            .into_iter()
            .map(|r| r.sample_id)
            .collect()
    } else {
        BTreeSet::new()
    };
    let todo: Vec<&QASample> = samples.iter().filter(|s| !done.contains(&s.id)).collect();
    if !done.is_empty() {
        log::info!(
            "resuming: {} sample(s) already complete, {} to run",
            done.len(),
            todo.len()
        );
    }

    let mut sinks = Sinks::open(out, resuming)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(env.config.workers.max(1))
        .build()
        .map_err(|e| QkgError::Invalid(e.to_string()))?;
    let (tx, rx) = mpsc::channel::<(usize, EvalRecord)>();
    let write_result = std::thread::scope(|scope| {
        scope.spawn(|| {
            pool.install(|| {
                todo.par_iter().enumerate().for_each_with(tx, |tx, (i, s)| {
                    let _ = tx.send((i, answer_question(s, env)));
                })
            })
        });
        let mut pending = BTreeMap::new();
        let mut next = 0usize;
        for (i, rec) in rx {
            pending.insert(i, rec);
            while let Some(rec) = pending.remove(&next) {
                sinks.write(&rec)?;
                next += 1;
            }
        }
        Ok::<_, QkgError>(())
    });
    write_result?;
    drop(sinks);

    let rows = read_per_sample_csv(&csv_path)?;
    let mut summary = RunSummary::from_rows(&rows);
    for role in env.gateway.config().roles.values() {
        summary.roles.insert(role.name.clone(), role.model.clone());
    }
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out.summary(), text).map_err(|e| QkgError::io(out.summary(), e))?;
    Ok(summary)
}

/// Paired correctness over the common samples of two runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PairedTable {
    pub n: usize,
    /// Correct in A, wrong in B.
    pub b: usize,
    /// Wrong in A, correct in B.
    pub c: usize,
    pub both_correct: usize,
    pub both_wrong: usize,
    pub only_in_a: usize,
    pub only_in_b: usize,
    pub pairs: Vec<(String, bool, bool)>,
}

fn tabulate(pairs: Vec<(String, bool, bool)>, only_in_a: usize, only_in_b: usize) -> PairedTable {
    let mut t = PairedTable {
        n: pairs.len(),
        only_in_a,
        only_in_b,
        ..Default::default()
    };
    for (_, a, b) in &pairs {
        match (a, b) {
            (true, true) => t.both_correct += 1,
            (true, false) => t.b += 1,
            (false, true) => t.c += 1,
            (false, false) => t.both_wrong += 1,
        }
    }
    t.pairs = pairs;
    t
}

/// Compares final correctness of two runs on the intersection of their sample ids.
pub fn compare_runs(a: &[SampleRow], b: &[SampleRow]) -> Result<PairedTable> {
    let b_map: HashMap<&str, bool> = b.iter().map(|r| (r.sample_id.as_str(), r.final_correct)).collect();
    let a_ids: BTreeSet<&str> = a.iter().map(|r| r.sample_id.as_str()).collect();
    let pairs: Vec<(String, bool, bool)> = a
        .iter()
        .filter_map(|r| {
            b_map
                .get(r.sample_id.as_str())
                .map(|&bc| (r.sample_id.clone(), r.final_correct, bc))
        })
        .collect();
    if pairs.is_empty() {
        return Err(QkgError::Invalid("the two runs share no sample ids".into()));
    }
    let only_a = a_ids.len() - pairs.len();
    let only_b = b_map.len() - pairs.len();
    if only_a > 0 || only_b > 0 {
        log::warn!(
            "runs differ in sample ids ({only_a} only in A, {only_b} only in B); comparing {} common samples",
            pairs.len()
        );
    }
    Ok(tabulate(pairs, only_a, only_b))
}

/// Initial versus final correctness within one run; `b` counts C->W and `c` counts W->C.
pub fn within_run_pairs(rows: &[SampleRow]) -> PairedTable {
    tabulate(
        rows.iter()
            .map(|r| (r.sample_id.clone(), r.initial_correct, r.final_correct))
            .collect(),
        0,
        0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, ic: bool, fc: bool) -> SampleRow {
        let (ia, fa) = match (ic, fc) {
            (true, true) => ("A", "A"),
            (false, false) => ("B", "B"),
            (false, true) => ("B", "A"),
            (true, false) => ("A", "B"),
        };
        SampleRow {
            sample_id: id.into(),
            initial_answer: ia.into(),
            initial_correct: ic,
            final_answer: fa.into(),
            final_correct: fc,
            revision: Revision::classify(ia.chars().next(), fa.chars().next(), 'A'),
            mode: EvalMode::Kg,
            validator_model: "m".into(),
        }
    }

    #[test]
    fn revision_classification() {
        assert_eq!(Revision::classify(Some('B'), Some('D'), 'D'), Revision::WrongToCorrect);
        assert_eq!(Revision::classify(Some('D'), Some('B'), 'D'), Revision::CorrectToWrong);
        assert_eq!(
            Revision::classify(Some('A'), Some('B'), 'D'),
            Revision::WrongToWrongChanged
        );
        assert_eq!(Revision::classify(Some('A'), Some('A'), 'D'), Revision::Unchanged);
        assert_eq!(Revision::classify(None, Some('D'), 'D'), Revision::WrongToCorrect);
        assert_eq!(Revision::classify(Some('D'), None, 'D'), Revision::CorrectToWrong);
    }

    #[test]
    fn revision_rates() {
        assert_eq!(format!("{:.2}", revision_rate_pct(61, 2788)), "2.19");
        assert_eq!(format!("{:.2}", revision_rate_pct(71, 2788)), "2.55");
    }

    #[test]
    fn compare_identical_and_discordant() {
        let a = vec![row("1", true, true), row("2", false, false), row("3", true, true)];
        let t = compare_runs(&a, &a).unwrap();
        assert_eq!((t.b, t.c, t.n), (0, 0, 3));
        let x = vec![row("1", true, true), row("2", false, false), row("3", true, true)];
        let y = vec![row("1", false, false), row("2", true, true), row("3", true, true)];
        let t = compare_runs(&x, &y).unwrap();
        assert_eq!((t.b, t.c), (1, 1));
    }

    #[test]
    fn compare_uses_intersection() {
        let x = vec![row("1", true, true), row("2", false, false)];
        let y = vec![row("2", true, true), row("9", true, true)];
        let t = compare_runs(&x, &y).unwrap();
        assert_eq!((t.n, t.c, t.only_in_a, t.only_in_b), (1, 1, 1, 1));
        assert!(compare_runs(&x, &[row("7", true, true)]).is_err());
    }

    #[test]
    fn summary_accounting() {
        let rows = vec![
            row("1", false, true),
            row("2", true, false),
            row("3", false, true),
            row("4", true, true),
        ];
        let s = RunSummary::from_rows(&rows);
        assert_eq!((s.w_to_c, s.c_to_w, s.initial_correct, s.final_correct), (2, 1, 2, 3));
        assert!(s.accounting_holds());
        assert!(inconsistent_rows(&rows).is_empty());
        let w = within_run_pairs(&rows);
        assert_eq!((w.b, w.c), (1, 2));
    }

    #[test]
    fn dataset_aliases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            "{\"qa_id\":\"qa_1\",\"question\":\"q?\",\"options\":{\"A\":\"x\",\"B\":\"y\"},\"answer\":\"y\"}\n\
             {\"id\":\"qa_2\",\"question\":\"q2\",\"options\":\"A. one\\nB. two\\nC. three\",\"answer_idx\":\"c\"}\n",
        )
        .unwrap();
        let d = load_dataset(&p).unwrap();
        assert_eq!(d[0].gold, 'B');
        assert_eq!(d[1].gold, 'C');
        assert_eq!(d[1].choices.len(), 3);
    }

    #[test]
    fn csv_header_is_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_per_sample_csv(&p, &[row("1", false, true)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), PER_SAMPLE_COLUMNS.join(","));
        assert_eq!(read_per_sample_csv(&p).unwrap()[0].revision, Revision::WrongToCorrect);
    }
}
