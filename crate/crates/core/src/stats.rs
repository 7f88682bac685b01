//! Paired significance testing, leakage classification of revisions and
//! leakage-adjusted accuracy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{QkgError, Result};
use crate::llm::{extract_first_json_object, Gateway};
use crate::pipeline::{compare_runs, EvalRecord, PairedTable, Revision, SampleRow};
use crate::prompts::PromptSet;
use crate::validator::{ClaimStatus, ClaimVerdict, ValidationReport};

/// Exact two-sided McNemar p-value for discordant counts `b` and `c`:
/// `min(1, 2 * sum_{k=max(b,c)}^{n} C(n,k) / 2^n)` with `n = b + c`.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let lo = b.max(c);
    let mut term = BigUint::one();
    let mut tail = BigUint::zero();
    for k in 0..=n {
        if k >= lo {
            tail += &term;
        }
        if k < n {
            term = term * BigUint::from(n - k) / BigUint::from(k + 1);
        }
    }
    // 2 * tail / 2^n without overflowing f64 for large n.
    let shift = tail.bits().saturating_sub(64);
    let mantissa = (tail >> shift).to_f64().unwrap_or(f64::MAX);
    let exponent = shift as i64 + 1 - n as i64;
    let p = if exponent < -1074 {
        0.0
    } else {
        mantissa * 2f64.powi(exponent.clamp(i32::MIN as i64, i32::MAX as i64) as i32)
    };
    p.min(1.0)
}

/// Leakage-adjusted accuracy: likely-leakage W->C revisions and ctx-driven
/// C->W regressions are removed from both numerator and denominator.
pub fn adjusted_accuracy(final_correct: u64, n: u64, leak_w2c: u64, ctx_c2w: u64) -> Result<f64> {
    if leak_w2c > final_correct {
        return Err(QkgError::Invalid(format!(
            "leakage count {leak_w2c} exceeds final correct count {final_correct}"
        )));
    }
    if final_correct > n || ctx_c2w > n - final_correct {
        return Err(QkgError::Invalid(format!(
            "ctx-driven regressions {ctx_c2w} exceed the {} incorrect final answers",
            n.saturating_sub(final_correct)
        )));
    }
    let denom = n as i128 - leak_w2c as i128 - ctx_c2w as i128;
    if denom <= 0 {
        return Err(QkgError::Invalid(format!("non-positive denominator {denom}")));
    }
    Ok((final_correct - leak_w2c) as f64 / denom as f64)
}

/// Integer count behind a reported accuracy, `round(accuracy * n)`.
pub fn reconstruct_count(accuracy: f64, n: u64) -> u64 {
    (accuracy * n as f64).round() as u64
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignalSet {
    pub kg_support: bool,
    pub kg_gap: bool,
    pub parametric: bool,
    pub context: bool,
}

#[derive(Debug, Deserialize)]
struct PatternFile {
    version: u32,
    families: BTreeMap<String, Vec<String>>,
}

/// Compiled signal families.
#[derive(Debug, Clone)]
pub struct SignalPatterns {
    pub version: u32,
    kg_support: Vec<Regex>,
    kg_gap: Vec<Regex>,
    parametric: Vec<Regex>,
    context: Vec<Regex>,
}

pub const BUILTIN_PATTERNS: &str = include_str!("../patterns/leakage_signals_v1.json");

impl SignalPatterns {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: PatternFile = serde_json::from_str(text)?;
        let family = |name: &str| -> Result<Vec<Regex>> {
            file.families
                .get(name)
                .ok_or_else(|| QkgError::Config(format!("pattern file lacks family `{name}`")))?
                .iter()
                .map(|p| Regex::new(p).map_err(|e| QkgError::Config(format!("bad pattern `{p}`: {e}"))))
                .collect()
        };
        Ok(SignalPatterns {
            version: file.version,
            kg_support: family("kg_support")?,
            kg_gap: family("kg_gap")?,
            parametric: family("parametric")?,
            context: family("context")?,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QkgError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn builtin() -> &'static SignalPatterns {
        static P: OnceLock<SignalPatterns> = OnceLock::new();
        P.get_or_init(|| SignalPatterns::from_json(BUILTIN_PATTERNS).expect("built-in patterns compile"))
    }

    pub fn detect(&self, evidence: &str) -> SignalSet {
        let any = |family: &[Regex]| family.iter().any(|r| r.is_match(evidence));
        SignalSet {
            kg_support: any(&self.kg_support),
            kg_gap: any(&self.kg_gap),
            parametric: any(&self.parametric),
            context: any(&self.context),
        }
    }
}

pub fn detect_signals(evidence: &str) -> SignalSet {
    SignalPatterns::builtin().detect(evidence)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvidenceLabel {
    EvContext,
    EvLeakage,
    EvKgGrounded,
    EvUnclassified,
}

impl EvidenceLabel {
    /// First matching branch wins: context, gap with parametric, parametric
    /// alone, graph support, otherwise unclassified.
    #[allow(clippy::if_same_then_else)]
    pub fn from_signals(s: SignalSet) -> Self {
        if s.context {
            EvidenceLabel::EvContext
        } else if s.kg_gap && s.parametric {
            EvidenceLabel::EvLeakage
        } else if s.parametric && !s.kg_support && !s.kg_gap {
            EvidenceLabel::EvLeakage
        } else if s.kg_support {
            EvidenceLabel::EvKgGrounded
        } else {
            EvidenceLabel::EvUnclassified
        }
    }
}

pub fn label_evidence(evidence: &str) -> EvidenceLabel {
    EvidenceLabel::from_signals(detect_signals(evidence))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CaseClass {
    LikelyKgSupported,
    Mixed,
    LikelyLeakage,
    Unclassified,
}

impl CaseClass {
    pub const ALL: [CaseClass; 4] = [
        CaseClass::LikelyKgSupported,
        CaseClass::Mixed,
        CaseClass::LikelyLeakage,
        CaseClass::Unclassified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseClass::LikelyKgSupported => "LIKELY_KG_SUPPORTED",
            CaseClass::Mixed => "MIXED",
            CaseClass::LikelyLeakage => "LIKELY_LEAKAGE",
            CaseClass::Unclassified => "UNCLASSIFIED",
        }
    }
}

impl fmt::Display for CaseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaseClass {
    type Err = QkgError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        match key.as_str() {
            "LIKELYKGSUPPORTED" | "KGSUPPORTED" => Ok(CaseClass::LikelyKgSupported),
            "MIXED" => Ok(CaseClass::Mixed),
            "LIKELYLEAKAGE" | "LEAKAGE" => Ok(CaseClass::LikelyLeakage),
            "UNCLASSIFIED" => Ok(CaseClass::Unclassified),
            _ => Err(QkgError::Invalid(format!("unknown case label `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Rules,
    Llm,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Rules => "rules",
            LabelSource::Llm => "llm",
        }
    }
}

/// CONTRADICTED verdicts the reasoner reconsidered against: those that
/// attack `initial` (supports = true) or un-eliminate `reference`
/// (supports = false). Falls back to every CONTRADICTED verdict.
pub fn decisive_items(report: &ValidationReport, initial: Option<char>, reference: Option<char>) -> Vec<&ClaimVerdict> {
    let contradicted: Vec<&ClaimVerdict> = report.contradicted().collect();
    let decisive: Vec<&ClaimVerdict> = contradicted
        .iter()
        .copied()
        .filter(|v| {
            let opt = Some(v.claim.option_label);
            (v.claim.supports && opt == initial) || (!v.claim.supports && opt == reference)
        })
        .collect();
    if decisive.is_empty() {
        contradicted
    } else {
        decisive
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleClassification {
    pub class: CaseClass,
    pub ctx_driven: bool,
    pub labels: Vec<EvidenceLabel>,
    pub evidence: Vec<String>,
}

/// Case label from the evidence labels of the decisive items.
pub fn classify_labels(labels: &[EvidenceLabel]) -> (CaseClass, bool) {
    let has = |l| labels.contains(&l);
    let supp = has(EvidenceLabel::EvContext) || has(EvidenceLabel::EvKgGrounded);
    let leak = has(EvidenceLabel::EvLeakage);
    let class = match (supp, leak) {
        (true, true) => CaseClass::Mixed,
        (true, false) => CaseClass::LikelyKgSupported,
        (false, true) => CaseClass::LikelyLeakage,
        (false, false) => CaseClass::Unclassified,
    };
    (class, has(EvidenceLabel::EvContext))
}

/// Rule-based classification of one report. `reference` is the gold answer
/// for W->C cases and the final answer for C->W cases.
pub fn classify_report(
    report: &ValidationReport,
    initial: Option<char>,
    reference: Option<char>,
    patterns: &SignalPatterns,
) -> RuleClassification {
    let items = decisive_items(report, initial, reference);
    let evidence: Vec<String> = items.iter().map(|v| v.evidence.clone()).collect();
    let labels: Vec<EvidenceLabel> = evidence
        .iter()
        .map(|e| EvidenceLabel::from_signals(patterns.detect(e)))
        .collect();
    let (class, ctx_driven) = classify_labels(&labels);
    RuleClassification {
        class,
        ctx_driven,
        labels,
        evidence,
    }
}

/// Per-case result; serialized to the classification CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseResult {
    pub sample_id: String,
    pub direction: Revision,
    pub regex_label: CaseClass,
    pub llm_label: Option<CaseClass>,
    pub label_source: LabelSource,
    pub ctx_driven: bool,
    pub justification: String,
    pub decisive_evidence: Vec<String>,
}

impl CaseResult {
    pub fn final_label(&self) -> CaseClass {
        match (self.label_source, self.llm_label) {
            (LabelSource::Llm, Some(l)) => l,
            _ => self.regex_label,
        }
    }
}

/// Classifies a revised record. Returns `None` for unchanged records or
/// records without a validation report.
pub fn classify_case(record: &EvalRecord, patterns: &SignalPatterns) -> Option<CaseResult> {
    let report = record.validation_report.as_ref()?;
    let reference = match record.revision {
        Revision::Unchanged => return None,
        Revision::CorrectToWrong => record.final_answer,
        Revision::WrongToCorrect | Revision::WrongToWrongChanged => Some(record.gold),
    };
    let rc = classify_report(report, record.initial_answer, reference, patterns);
    Some(CaseResult {
        sample_id: record.sample_id.clone(),
        direction: record.revision,
        regex_label: rc.class,
        llm_label: None,
        label_source: LabelSource::Rules,
        ctx_driven: rc.ctx_driven,
        justification: String::new(),
        decisive_evidence: rc.evidence,
    })
}

pub fn classify_run(records: &[EvalRecord], patterns: &SignalPatterns) -> Vec<CaseResult> {
    records.iter().filter_map(|r| classify_case(r, patterns)).collect()
}

fn direction_preamble(direction: Revision) -> &'static str {
    match direction {
        Revision::CorrectToWrong => {
            "After validation the Reasoner moved from the correct answer to a wrong one (a correct-to-wrong regression)."
        }
        _ => "After validation the Reasoner moved from a wrong answer to the correct one (a wrong-to-correct revision).",
    }
}

/// Asks the LLM to label every rule-unclassified case. Cases whose call
/// fails stay unclassified with the failure noted in the justification.
/// Returns the number of gateway calls made.
pub fn relabel_unclassified(cases: &mut [CaseResult], gateway: &Gateway, role: &str, prompts: &PromptSet) -> usize {
    let targets: Vec<usize> = cases
        .iter()
        .enumerate()
        .filter(|(_, c)| c.regex_label == CaseClass::Unclassified)
        .map(|(i, _)| i)
        .collect();
    let replies: Vec<Result<(CaseClass, String)>> = targets
        .par_iter()
        .map(|&i| {
            let case = &cases[i];
            let evidence = case
                .decisive_evidence
                .iter()
                .map(|e| format!("- {e}"))
                .collect::<Vec<_>>()
                .join("\n");
            let messages = prompts.relabel.render(&[
                ("direction_preamble", direction_preamble(case.direction)),
                ("evidence", &evidence),
            ]);
            let raw = gateway.complete(role, &messages)?;
            let map = extract_first_json_object(&raw)?;
            let label = map
                .get("label")
                .and_then(Value::as_str)
                .ok_or_else(|| QkgError::Validation {
                    field: "label".into(),
                    message: "missing".into(),
                })?
                .parse()?;
            let why = map
                .get("justification")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            Ok((label, why))
        })
        .collect();
    for (&i, reply) in targets.iter().zip(replies) {
        let case = &mut cases[i];
        match reply {
            Ok((label, why)) => {
                case.llm_label = Some(label);
                case.label_source = LabelSource::Llm;
                case.justification = why;
            }
            Err(e) => {
                case.justification = format!("relabel failed: {e}");
            }
        }
    }
    targets.len()
}

pub const CLASSIFICATION_COLUMNS: [&str; 7] = [
    "sample_id",
    "direction",
    "regex_label",
    "llm_label",
    "label_source",
    "ctx_driven",
    "justification",
];

pub fn write_classification_csv(path: &Path, cases: &[CaseResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CLASSIFICATION_COLUMNS)?;
    for c in cases {
        w.write_record([
            c.sample_id.as_str(),
            c.direction.as_str(),
            c.regex_label.as_str(),
            c.llm_label.map(CaseClass::as_str).unwrap_or(""),
            c.label_source.as_str(),
            if c.ctx_driven { "true" } else { "false" },
            c.justification.as_str(),
        ])?;
    }
    w.flush().map_err(|e| QkgError::io(path, e))
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "y" => Some(true),
        "false" | "0" | "no" | "n" | "" => Some(false),
        _ => None,
    }
}

fn parse_direction(s: &str) -> Option<Revision> {
    let key: String = s
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_uppercase();
    match key.as_str() {
        "WC" | "W2C" | "WTOC" => Some(Revision::WrongToCorrect),
        "CW" | "C2W" | "CTOW" => Some(Revision::CorrectToWrong),
        "WWCHANGED" | "W2W" | "WW" => Some(Revision::WrongToWrongChanged),
        _ => s.parse().ok(),
    }
}

/// Reads a classification CSV by column name; extra columns are ignored.
pub fn read_classification_csv(path: &Path) -> Result<Vec<CaseResult>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| QkgError::Schema {
                line: 1,
                field: name.into(),
                message: "missing column".into(),
            })
    };
    let idx: Vec<usize> = CLASSIFICATION_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("").trim();
        let bad = |field: &str, v: &str| QkgError::Schema {
            line,
            field: field.into(),
            message: format!("unreadable value `{v}`"),
        };
        let direction = parse_direction(get(1)).ok_or_else(|| bad("direction", get(1)))?;
        let regex_label: CaseClass = get(2).parse().map_err(|_| bad("regex_label", get(2)))?;
        let llm_label = match get(3) {
            "" => None,
            v => Some(v.parse().map_err(|_| bad("llm_label", v))?),
        };
        let label_source = match get(4).to_ascii_lowercase().as_str() {
            "llm" => LabelSource::Llm,
            "rules" | "regex" | "rule" | "" => LabelSource::Rules,
            v => return Err(bad("label_source", v)),
        };
        out.push(CaseResult {
            sample_id: get(0).to_string(),
            direction,
            regex_label,
            llm_label,
            label_source,
            ctx_driven: parse_bool(get(5)).ok_or_else(|| bad("ctx_driven", get(5)))?,
            justification: get(6).to_string(),
            decisive_evidence: Vec::new(),
        });
    }
    Ok(out)
}

/// Final-label counts for one direction, with the ctx-driven subset of
/// the graph-supported class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ClassTotals {
    pub kg_supported: usize,
    pub kg_supported_ctx: usize,
    pub mixed: usize,
    pub leakage: usize,
    pub unclassified: usize,
}

pub fn class_totals(cases: &[CaseResult], direction: Revision) -> ClassTotals {
    let mut t = ClassTotals::default();
    for c in cases.iter().filter(|c| c.direction == direction) {
        match c.final_label() {
            CaseClass::LikelyKgSupported => {
                t.kg_supported += 1;
                if c.ctx_driven {
                    t.kg_supported_ctx += 1;
                }
            }
            CaseClass::Mixed => t.mixed += 1,
            CaseClass::LikelyLeakage => t.leakage += 1,
            CaseClass::Unclassified => t.unclassified += 1,
        }
    }
    t
}

/// Sample ids removed before the adjusted paired test and from the adjusted
/// accuracy: likely-leakage W->C and ctx-driven graph-supported C->W.
pub fn excluded_ids(cases: &[CaseResult]) -> BTreeSet<String> {
    cases
        .iter()
        .filter(|c| match c.direction {
            Revision::WrongToCorrect => c.final_label() == CaseClass::LikelyLeakage,
            Revision::CorrectToWrong => c.final_label() == CaseClass::LikelyKgSupported && c.ctx_driven,
            _ => false,
        })
        .map(|c| c.sample_id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjustmentReport {
    pub n: usize,
    pub final_correct: usize,
    pub leak_w2c: usize,
    pub ctx_c2w: usize,
    pub adjusted_accuracy: f64,
}

/// Adjusted accuracy of one run from its per-sample rows and case labels.
pub fn adjust_run(rows: &[SampleRow], cases: &[CaseResult]) -> Result<AdjustmentReport> {
    let totals_w2c = class_totals(cases, Revision::WrongToCorrect);
    let totals_c2w = class_totals(cases, Revision::CorrectToWrong);
    let final_correct = rows.iter().filter(|r| r.final_correct).count();
    let acc = adjusted_accuracy(
        final_correct as u64,
        rows.len() as u64,
        totals_w2c.leakage as u64,
        totals_c2w.kg_supported_ctx as u64,
    )?;
    Ok(AdjustmentReport {
        n: rows.len(),
        final_correct,
        leak_w2c: totals_w2c.leakage,
        ctx_c2w: totals_c2w.kg_supported_ctx,
        adjusted_accuracy: acc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedTest {
    pub table: PairedTable,
    pub p_value: f64,
    pub excluded: usize,
}

/// McNemar test on the paired samples of two runs after removing every
/// sample flagged by the exclusion rule in either run.
pub fn leakage_adjusted_paired_test(
    run_a: &[SampleRow],
    run_b: &[SampleRow],
    cases_a: &[CaseResult],
    cases_b: &[CaseResult],
) -> Result<PairedTest> {
    let mut excluded = excluded_ids(cases_a);
    excluded.extend(excluded_ids(cases_b));
    let keep = |rows: &[SampleRow]| -> Vec<SampleRow> {
        rows.iter()
            .filter(|r| !excluded.contains(&r.sample_id))
            .cloned()
            .collect()
    };
    let table = compare_runs(&keep(run_a), &keep(run_b))?;
    Ok(PairedTest {
        p_value: mcnemar_exact(table.b as u64, table.c as u64),
        excluded: excluded.len(),
        table,
    })
}

/// Plain paired test with no exclusions.
pub fn paired_test(run_a: &[SampleRow], run_b: &[SampleRow]) -> Result<PairedTest> {
    leakage_adjusted_paired_test(run_a, run_b, &[], &[])
}

/// Evidence strings of CONTRADICTED verdicts keyed by sample, for audits.
pub fn contradicted_evidence(records: &[EvalRecord]) -> HashMap<String, Vec<String>> {
    records
        .iter()
        .filter_map(|r| {
            let rep = r.validation_report.as_ref()?;
            Some((
                r.sample_id.clone(),
                rep.verdicts
                    .iter()
                    .filter(|v| v.status == ClaimStatus::Contradicted)
                    .map(|v| v.evidence.clone())
                    .collect(),
            ))
        })
        .collect()
}
