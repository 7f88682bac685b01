//! Patient context extraction and constraint applicability.
//!
//! [`extract_patient_context`] asks an LLM for a structured record and falls
//! back to a regex parser on any failure. [`ApplicabilityEngine`] decides, per
//! annotated relation, which constraint (if any) describes the patient: simple
//! `NAME OP NUMBER [UNIT]` conditions are checked mechanically, anything else
//! is optionally handed to an LLM judge.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::constraints::{item_json, Applicability, ApplicabilityScale, ConstraintItem, TripletKey};
use crate::error::{QkgError, Result};
use crate::llm::{extract_first_json_object, Gateway};
use crate::prompts::{PromptSet, Template};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

impl FromStr for Sex {
    type Err = QkgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" | "woman" | "girl" => Ok(Sex::Female),
            "male" | "m" | "man" | "boy" => Ok(Sex::Male),
            other => Err(QkgError::Invalid(format!("unknown sex `{other}`"))),
        }
    }
}

impl Serialize for Sex {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Sex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparator {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

impl Comparator {
    pub fn as_str(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Eq => "=",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
        }
    }

    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Eq => lhs == rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Gt => lhs > rhs,
        }
    }
}

impl FromStr for Comparator {
    type Err = QkgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "<" => Ok(Comparator::Lt),
            "<=" | "≤" | "=<" => Ok(Comparator::Le),
            "=" | "==" => Ok(Comparator::Eq),
            ">=" | "≥" | "=>" => Ok(Comparator::Ge),
            ">" => Ok(Comparator::Gt),
            other => Err(QkgError::Invalid(format!("unknown comparator `{other}`"))),
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Comparator {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Comparator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabValue {
    pub name: String,
    pub value: f64,
    #[serde(default)]
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparator_hint: Option<Comparator>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientContext {
    #[serde(default)]
    pub age: Option<f64>,
    #[serde(default, deserialize_with = "lenient_sex")]
    pub sex: Option<Sex>,
    #[serde(default, deserialize_with = "null_as_default")]
    pub diagnoses: Vec<String>,
    #[serde(default, deserialize_with = "null_as_default")]
    pub labs: Vec<LabValue>,
    #[serde(default, deserialize_with = "null_as_default")]
    pub medications: Vec<String>,
    #[serde(default, deserialize_with = "null_as_default")]
    pub other_factors: Vec<String>,
}

fn lenient_sex<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Sex>, D::Error> {
    let v: Option<String> = Option::deserialize(d)?;
    Ok(v.and_then(|s| s.parse().ok()))
}

fn null_as_default<'de, D, T>(d: D) -> std::result::Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: Default + Deserialize<'de>,
{
    Ok(Option::<T>::deserialize(d)?.unwrap_or_default())
}

impl PatientContext {
    pub fn is_empty(&self) -> bool {
        self.age.is_none()
            && self.sex.is_none()
            && self.diagnoses.is_empty()
            && self.labs.is_empty()
            && self.medications.is_empty()
            && self.other_factors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(age) = self.age {
            if !age.is_finite() || age < 0.0 {
                return Err(QkgError::Validation {
                    field: "age".into(),
                    message: format!("must be a non-negative number, got {age}"),
                });
            }
        }
        if let Some(lab) = self.labs.iter().find(|l| !l.value.is_finite()) {
            return Err(QkgError::Validation {
                field: "labs".into(),
                message: format!("non-finite value for {}", lab.name),
            });
        }
        Ok(())
    }

    /// Multi-line human-readable rendering used in prompts.
    pub fn describe(&self) -> String {
        let mut lines = Vec::new();
        if let Some(age) = self.age {
            lines.push(format!("Age: {age}"));
        }
        if let Some(sex) = self.sex {
            lines.push(format!("Sex: {}", sex.as_str()));
        }
        if !self.diagnoses.is_empty() {
            lines.push(format!("Diagnoses: {}", self.diagnoses.join("; ")));
        }
        for lab in &self.labs {
            let op = lab.comparator_hint.map(|c| format!("{c} ")).unwrap_or_default();
            lines.push(
                format!("Lab: {} {op}{} {}", lab.name, lab.value, lab.unit)
                    .trim_end()
                    .to_string(),
            );
        }
        if !self.medications.is_empty() {
            lines.push(format!("Medications: {}", self.medications.join("; ")));
        }
        if !self.other_factors.is_empty() {
            lines.push(format!("Other factors: {}", self.other_factors.join("; ")));
        }
        if lines.is_empty() {
            "(no patient characteristics available)".into()
        } else {
            lines.join("\n")
        }
    }
}

/// Lab-name synonyms keyed by normalized alias, valued by canonical name.
#[derive(Debug, Clone)]
pub struct LabSynonyms {
    alias_to_canonical: HashMap<String, String>,
}

const BUILTIN_LAB_SYNONYMS: &[(&str, &[&str])] = &[
    ("platelet count", &["platelets", "platelet", "plt", "thrombocyte count"]),
    ("hemoglobin", &["haemoglobin", "hgb", "hb"]),
    (
        "hba1c",
        &[
            "hemoglobin a1c",
            "a1c",
            "glycated hemoglobin",
            "glycosylated hemoglobin",
        ],
    ),
    (
        "egfr",
        &[
            "estimated glomerular filtration rate",
            "gfr",
            "glomerular filtration rate",
        ],
    ),
    ("creatinine", &["serum creatinine", "creatinine concentration"]),
    ("creatinine clearance", &["crcl"]),
    (
        "glucose",
        &["blood glucose", "plasma glucose", "fasting glucose", "serum glucose"],
    ),
    ("potassium", &["serum potassium", "k+"]),
    ("sodium", &["serum sodium", "na+"]),
    ("inr", &["international normalized ratio"]),
    (
        "leukocyte count",
        &["wbc", "white blood cell count", "leukocytes", "wbc count"],
    ),
    ("alt", &["alanine aminotransferase"]),
    ("ast", &["aspartate aminotransferase"]),
    ("bilirubin", &["total bilirubin", "serum bilirubin"]),
    ("ldl cholesterol", &["ldl", "ldl-c"]),
    ("tsh", &["thyroid-stimulating hormone", "thyroid stimulating hormone"]),
    ("bmi", &["body mass index"]),
    ("heart rate", &["pulse", "pulse rate"]),
    ("ejection fraction", &["lvef", "left ventricular ejection fraction"]),
    ("qtc", &["qtc interval", "corrected qt interval"]),
];

fn normalize_lab(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '+' {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl Default for LabSynonyms {
    fn default() -> Self {
        let mut s = LabSynonyms {
            alias_to_canonical: HashMap::new(),
        };
        for (canonical, aliases) in BUILTIN_LAB_SYNONYMS {
            s.add(canonical, aliases.iter().copied());
        }
        s
    }
}

impl LabSynonyms {
    pub fn empty() -> Self {
        LabSynonyms {
            alias_to_canonical: HashMap::new(),
        }
    }

    pub fn add<'a>(&mut self, canonical: &str, aliases: impl IntoIterator<Item = &'a str>) {
        let canon = normalize_lab(canonical);
        self.alias_to_canonical.insert(canon.clone(), canon.clone());
        for a in aliases {
            self.alias_to_canonical.insert(normalize_lab(a), canon.clone());
        }
    }

    pub fn canonical(&self, name: &str) -> String {
        let n = normalize_lab(name);
        self.alias_to_canonical.get(&n).cloned().unwrap_or(n)
    }

    pub fn same(&self, a: &str, b: &str) -> bool {
        self.canonical(a) == self.canonical(b)
    }

    /// All known names, longest first, for building alternation patterns.
    fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.alias_to_canonical.keys().map(String::as_str).collect();
        v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        v
    }
}

fn age_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(\d{1,3}(?:\.\d+)?)[\s-]*(year|yr|month|week|day)s?[\s-]*old\b|\b(\d{1,3})\s*(?:yo|y/o|y\.o\.)(?:\W|$)|\baged\s+(\d{1,3})\b").unwrap()
    })
}

fn sex_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(woman|female|girl|lady|mother|pregnant|primigravida|man|male|boy|gentleman)\b").unwrap()
    })
}

const UNIT_PATTERN: &str = r"%|mm\s?Hg|(?:[a-zA-Zμµ×^0-9.]+)?/[a-zA-Zμµ0-9^.³²]+(?:/[a-zA-Zμµ0-9^.³²]+)?|[a-zA-Zμµ]+";

fn number_pattern() -> &'static str {
    r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?"
}

fn parse_number(s: &str) -> Option<f64> {
    s.replace(',', "").parse().ok().filter(|v: &f64| v.is_finite())
}

/// Deterministic regex extraction of age, sex and lab values.
pub fn fallback_patient_context(text: &str, synonyms: &LabSynonyms) -> PatientContext {
    let mut ctx = PatientContext::default();
    if let Some(c) = age_re().captures(text) {
        ctx.age = if let Some(n) = c.get(1) {
            let v = parse_number(n.as_str());
            let unit = c.get(2).map(|m| m.as_str().to_ascii_lowercase()).unwrap_or_default();
            v.map(|v| match unit.as_str() {
                "month" => v / 12.0,
                "week" => v / 52.0,
                "day" => v / 365.0,
                _ => v,
            })
        } else {
            c.get(3).or(c.get(4)).and_then(|m| parse_number(m.as_str()))
        };
    }
    if let Some(m) = sex_re().find(text) {
        ctx.sex = Some(match m.as_str().to_ascii_lowercase().as_str() {
            "man" | "male" | "boy" | "gentleman" => Sex::Male,
            _ => Sex::Female,
        });
    }
    let names = synonyms
        .names()
        .iter()
        .map(|n| regex::escape(n).replace(r"\ ", r"[\s-]+"))
        .collect::<Vec<_>>()
        .join("|");
    if names.is_empty() {
        return ctx;
    }
    let lab_re = Regex::new(&format!(
        r"(?i)\b({names})(?:\s+(?:level|concentration|count|value))?\s*(?:of|is|was|were|at|measured at|:|=)?\s*(<=|>=|≤|≥|<|>)?\s*({num})\s*({unit})?",
        num = number_pattern(),
        unit = UNIT_PATTERN
    ))
    .expect("lab pattern");
    for c in lab_re.captures_iter(text) {
        let Some(value) = parse_number(&c[3]) else { continue };
        let canonical = synonyms.canonical(&c[1]);
        if ctx.labs.iter().any(|l| synonyms.same(&l.name, &canonical)) {
            continue;
        }
        ctx.labs.push(LabValue {
            name: canonical,
            value,
            unit: c.get(4).map(|m| m.as_str().trim().to_string()).unwrap_or_default(),
            comparator_hint: c.get(2).and_then(|m| m.as_str().parse().ok()),
        });
    }
    ctx
}

/// Extracts a structured context with the LLM role, degrading to
/// [`fallback_patient_context`] on gateway, parse or validation failure.
pub fn extract_patient_context(
    question: &str,
    gateway: Option<&Gateway>,
    role: &str,
    template: &Template,
    synonyms: &LabSynonyms,
) -> PatientContext {
    if question.trim().is_empty() {
        return PatientContext::default();
    }
    let Some(gateway) = gateway.filter(|g| g.has_role(role)) else {
        return fallback_patient_context(question, synonyms);
    };
    let messages = template.render(&[("question", question)]);
    let parsed = gateway.complete(role, &messages).and_then(|raw| {
        let map = extract_first_json_object(&raw)?;
        let ctx: PatientContext = serde_json::from_value(Value::Object(map))?;
        ctx.validate()?;
        Ok(ctx)
    });
    match parsed {
        Ok(ctx) => ctx,
        Err(e) => {
            log::debug!("patient context extraction fell back to rules: {e}");
            fallback_patient_context(question, synonyms)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Applicable,
    NotApplicable,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicabilityDecision {
    pub triplet_key: TripletKey,
    pub verdict: Verdict,
    pub matched_constraint: Option<ConstraintItem>,
    pub rationale: String,
    pub weight: f64,
}

impl ApplicabilityDecision {
    /// Uppercase tag shown to the validator alongside the relation.
    pub fn guidance(&self) -> Option<&'static str> {
        match self.verdict {
            Verdict::NotApplicable => Some("AVOID"),
            Verdict::Applicable if self.weight >= 0.75 => Some("RECOMMENDED"),
            Verdict::Applicable => Some("CAUTION"),
            Verdict::Unknown => None,
        }
    }
}

/// Weight assigned to each applicability level, most applicable first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub weights: [f64; 5],
    pub unannotated: f64,
}

impl Default for WeightMap {
    fn default() -> Self {
        WeightMap {
            weights: [1.0, 0.75, 0.5, 0.25, 0.0],
            unannotated: 0.5,
        }
    }
}

impl WeightMap {
    pub fn weight(&self, level: Applicability) -> f64 {
        self.weights[4 - level.ordinal() as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |w: f64| (0.0..=1.0).contains(&w);
        if !self.weights.iter().all(|&w| in_range(w)) || !in_range(self.unannotated) {
            return Err(QkgError::Config("weights must lie in [0, 1]".into()));
        }
        if self.weights.windows(2).any(|w| w[0] < w[1]) {
            return Err(QkgError::Config(
                "weights must not increase as applicability decreases".into(),
            ));
        }
        Ok(())
    }
}

/// A parsed single-comparator condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub name: String,
    pub op: Comparator,
    pub threshold: f64,
    pub unit: String,
}

fn condition_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"^\s*([A-Za-z][A-Za-z0-9 +'/()-]*?)\s*(<=|>=|≤|≥|=<|=>|==|<|>|=)\s*({})\s*([^\s,;]+(?:\s?[a-zA-Z0-9²]+)?)?\s*$",
            number_pattern()
        ))
        .unwrap()
    })
}

/// Parses `NAME OP NUMBER [UNIT]`; anything richer returns `None`.
pub fn parse_condition(text: &str) -> Option<Condition> {
    let c = condition_re().captures(text)?;
    Some(Condition {
        name: c[1].trim().to_string(),
        op: c[2].parse().ok()?,
        threshold: parse_number(&c[3])?,
        unit: c.get(4).map(|m| m.as_str().to_string()).unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleOutcome {
    Match,
    NoMatch,
    Undecidable,
}

/// Bundles what an LLM judge needs.
pub struct Judge<'a> {
    pub gateway: &'a Gateway,
    pub role: &'a str,
    pub template: &'a Template,
}

impl<'a> Judge<'a> {
    pub fn new(gateway: &'a Gateway, role: &'a str, prompts: &'a PromptSet) -> Self {
        Judge {
            gateway,
            role,
            template: &prompts.applicability_judge,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ApplicabilityEngine {
    pub weights: WeightMap,
    pub synonyms: LabSynonyms,
    pub scale: ApplicabilityScale,
}

impl ApplicabilityEngine {
    /// Checks one condition text against the context.
    pub fn evaluate_rule(&self, characteristics: &str, ctx: &PatientContext) -> RuleOutcome {
        let Some(cond) = parse_condition(characteristics) else {
            return RuleOutcome::Undecidable;
        };
        let observed = if matches!(normalize_lab(&cond.name).as_str(), "age" | "patient age") {
            ctx.age
        } else {
            ctx.labs
                .iter()
                .find(|l| self.synonyms.same(&l.name, &cond.name))
                .map(|l| l.value)
        };
        match observed {
            Some(v) if cond.op.holds(v, cond.threshold) => RuleOutcome::Match,
            Some(_) => RuleOutcome::NoMatch,
            None => RuleOutcome::Undecidable,
        }
    }

    fn decided(&self, key: &TripletKey, item: &ConstraintItem, rationale: String) -> ApplicabilityDecision {
        let weight = self.weights.weight(item.applicability);
        ApplicabilityDecision {
            triplet_key: key.clone(),
            verdict: if weight > 0.0 {
                Verdict::Applicable
            } else {
                Verdict::NotApplicable
            },
            matched_constraint: Some(item.clone()),
            rationale,
            weight,
        }
    }

    fn unknown(&self, key: &TripletKey, rationale: impl Into<String>) -> ApplicabilityDecision {
        ApplicabilityDecision {
            triplet_key: key.clone(),
            verdict: Verdict::Unknown,
            matched_constraint: None,
            rationale: rationale.into(),
            weight: self.weights.unannotated,
        }
    }

    /// Decision for one relation. Matching conditions are resolved in favour of
    /// the lowest weight, earliest first.
    pub fn decide(
        &self,
        key: &TripletKey,
        constraints: &[ConstraintItem],
        ctx: &PatientContext,
        judge: Option<&Judge<'_>>,
    ) -> ApplicabilityDecision {
        if constraints.is_empty() {
            return self.unknown(key, "relation has no annotated conditions");
        }
        let outcomes: Vec<RuleOutcome> = constraints
            .iter()
            .map(|c| self.evaluate_rule(&c.patient_characteristics, ctx))
            .collect();
        let best = constraints
            .iter()
            .zip(&outcomes)
            .filter(|(_, o)| **o == RuleOutcome::Match)
            .map(|(c, _)| c)
            .fold(None::<&ConstraintItem>, |acc, c| match acc {
                Some(a) if self.weights.weight(a.applicability) <= self.weights.weight(c.applicability) => Some(a),
                _ => Some(c),
            });
        if let Some(item) = best {
            return self.decided(
                key,
                item,
                format!("patient satisfies `{}`", item.patient_characteristics),
            );
        }
        let open: Vec<&ConstraintItem> = constraints
            .iter()
            .zip(&outcomes)
            .filter(|(_, o)| **o == RuleOutcome::Undecidable)
            .map(|(c, _)| c)
            .collect();
        if open.is_empty() {
            return self.unknown(key, "no annotated condition matches the patient");
        }
        match judge {
            Some(judge) => self.judge(key, &open, ctx, judge),
            None => self.unknown(key, "conditions not decidable by rules"),
        }
    }

    fn judge(
        &self,
        key: &TripletKey,
        open: &[&ConstraintItem],
        ctx: &PatientContext,
        judge: &Judge<'_>,
    ) -> ApplicabilityDecision {
        let listing = open
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{i}. {}", item_json(c, &self.scale)))
            .collect::<Vec<_>>()
            .join("\n");
        let relation = key.to_string();
        let context = ctx.describe();
        let messages = judge.template.render(&[
            ("relation", &relation),
            ("context", &context),
            ("constraints", &listing),
        ]);
        let reply = judge.gateway.complete(judge.role, &messages).and_then(|raw| {
            let map = extract_first_json_object(&raw)?;
            let index = match map.get("constraint_index") {
                None | Some(Value::Null) => None,
                Some(v) => Some(v.as_u64().ok_or_else(|| QkgError::Validation {
                    field: "constraint_index".into(),
                    message: format!("expected an integer or null, got {v}"),
                })? as usize),
            };
            let why = map
                .get("rationale")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            Ok((index, why))
        });
        match reply {
            Ok((Some(i), why)) if i < open.len() => self.decided(key, open[i], format!("judged: {why}")),
            Ok((Some(i), _)) => self.unknown(key, format!("judge returned out-of-range index {i}")),
            Ok((None, why)) => self.unknown(
                key,
                format!("judged: no condition applies. {why}").trim_end().to_string(),
            ),
            Err(e) => self.unknown(key, format!("applicability judge failed: {e}")),
        }
    }

    /// One decision per relation, in input order.
    pub fn apply_constraint_items(
        &self,
        relations: &[(TripletKey, &[ConstraintItem])],
        ctx: &PatientContext,
        judge: Option<&Judge<'_>>,
    ) -> Vec<ApplicabilityDecision> {
        relations
            .par_iter()
            .map(|(key, items)| self.decide(key, items, ctx, judge))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> TripletKey {
        TripletKey::new("DB00009", "contraindication", "thrombocytopenia")
    }

    #[test]
    fn empty_question_is_empty_context() {
        let ctx = extract_patient_context(
            "",
            None,
            "x",
            &PromptSet::default().patient_context,
            &LabSynonyms::default(),
        );
        assert!(ctx.is_empty());
    }

    #[test]
    fn vignette_age_and_sex() {
        let ctx = fallback_patient_context(
            "A 62-year-old woman is seen in June for a routine visit.",
            &LabSynonyms::default(),
        );
        assert_eq!(ctx.age, Some(62.0));
        assert_eq!(ctx.sex, Some(Sex::Female));
        let ctx = fallback_patient_context(
            "A 72-year-old man presents for medical clearance",
            &LabSynonyms::default(),
        );
        assert_eq!((ctx.age, ctx.sex), (Some(72.0), Some(Sex::Male)));
    }

    #[test]
    fn platelet_lab() {
        let ctx = fallback_patient_context(
            "Laboratory studies show a platelet count of 95,000/mm3 and an INR of 1.1.",
            &LabSynonyms::default(),
        );
        let plt = ctx.labs.iter().find(|l| l.name == "platelet count").unwrap();
        assert_eq!(plt.value, 95000.0);
        assert_eq!(plt.unit, "/mm3");
        assert!(ctx.labs.iter().any(|l| l.name == "inr" && l.value == 1.1));
    }

    #[test]
    fn condition_grammar() {
        let c = parse_condition("platelet count < 100,000/mm3").unwrap();
        assert_eq!(
            (c.name.as_str(), c.op, c.threshold),
            ("platelet count", Comparator::Lt, 100000.0)
        );
        assert_eq!(parse_condition("HbA1c > 9%").unwrap().threshold, 9.0);
        assert_eq!(parse_condition("age >= 65 years").unwrap().op, Comparator::Ge);
        assert!(parse_condition("elderly smokers with recent fluoroquinolone exposure").is_none());
    }

    #[test]
    fn egfr_applicable() {
        let engine = ApplicabilityEngine::default();
        let ctx = PatientContext {
            labs: vec![LabValue {
                name: "eGFR".into(),
                value: 25.0,
                unit: String::new(),
                comparator_hint: None,
            }],
            ..Default::default()
        };
        let items = [ConstraintItem::new(
            "eGFR < 30",
            Applicability::DefinitelyApplicable,
            "",
        )];
        let d = engine.decide(&key(), &items, &ctx, None);
        assert_eq!((d.verdict, d.weight), (Verdict::Applicable, 1.0));
    }

    #[test]
    fn not_applicable_weight_zero() {
        let engine = ApplicabilityEngine::default();
        let ctx = fallback_patient_context("platelets 95,000/mm3", &engine.synonyms);
        let items = [ConstraintItem::new(
            "platelet count < 100,000/mm3",
            Applicability::DefinitelyNotApplicable,
            "AVOID in thrombocytopenia",
        )];
        let d = engine.decide(&key(), &items, &ctx, None);
        assert_eq!(d.verdict, Verdict::NotApplicable);
        assert_eq!(d.weight, 0.0);
        assert_eq!(d.guidance(), Some("AVOID"));
    }

    #[test]
    fn unannotated_defaults() {
        let d = ApplicabilityEngine::default().decide(&key(), &[], &PatientContext::default(), None);
        assert_eq!((d.verdict, d.weight), (Verdict::Unknown, 0.5));
        assert!(d.matched_constraint.is_none());
    }

    #[test]
    fn lowest_weight_wins_among_matches() {
        let engine = ApplicabilityEngine::default();
        let ctx = PatientContext {
            age: Some(80.0),
            ..Default::default()
        };
        let items = [
            ConstraintItem::new("age > 65", Applicability::ProbablyApplicable, "a"),
            ConstraintItem::new("age > 75", Applicability::ProbablyNotApplicable, "b"),
        ];
        let d = engine.decide(&key(), &items, &ctx, None);
        assert_eq!(d.matched_constraint.unwrap().evidence, "b");
        assert_eq!(d.weight, 0.25);
    }

    #[test]
    fn weight_map_validation() {
        assert!(WeightMap::default().validate().is_ok());
        let bad = WeightMap {
            weights: [0.5, 0.75, 0.5, 0.25, 0.0],
            unannotated: 0.5,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn context_json_shape() {
        let ctx: PatientContext = serde_json::from_str(
            r#"{"age":62,"sex":"Female","diagnoses":null,"labs":[{"name":"eGFR","value":25,"unit":"mL/min"}]}"#,
        )
        .unwrap();
        assert_eq!(ctx.sex, Some(Sex::Female));
        assert!(ctx.diagnoses.is_empty());
        let back: PatientContext = serde_json::from_str(&serde_json::to_string(&ctx).unwrap()).unwrap();
        assert_eq!(back, ctx);
    }
}
