//! Tool-using claim validator.
//!
//! The validator LLM is driven through a plain-text protocol: every turn it
//! replies with one JSON object, either a tool call
//! `{"tool": "...", "args": {...}, "claim": n}` or a final verdict list
//! `{"final": [{"claim": n, "status": "...", "evidence": "..."}]}`. Claim
//! numbers are 1-based in the conversation. Malformed replies consume a turn
//! and are answered with a reformat instruction. The turn budget applies to
//! the whole round.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::constraints::{ConstraintStore, TripletKey};
use crate::error::{QkgError, Result};
use crate::kg::{EntityIndex, EntityRecord, GraphStore};
use crate::llm::{extract_first_json_object, ChatMessage, Gateway, ROLE_VALIDATOR};
use crate::patient::{ApplicabilityDecision, ApplicabilityEngine, Judge, PatientContext};
use crate::prompts::PromptSet;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TURN_BUDGET: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub option_label: char,
    pub statement: String,
    pub supports: bool,
}

impl Claim {
    pub fn new(option_label: char, statement: &str, supports: bool) -> Self {
        Claim {
            option_label,
            statement: statement.into(),
            supports,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !('A'..='J').contains(&self.option_label) {
            return Err(QkgError::Validation {
                field: "option_label".into(),
                message: format!("`{}` is not a letter A-J", self.option_label),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClaimStatus {
    Supported,
    Contradicted,
    NoCoverage,
}

impl ClaimStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ClaimStatus::Supported => "SUPPORTED",
            ClaimStatus::Contradicted => "CONTRADICTED",
            ClaimStatus::NoCoverage => "NO_COVERAGE",
        }
    }
}

impl fmt::Display for ClaimStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClaimStatus {
    type Err = QkgError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphabetic())
            .map(|c| c.to_ascii_uppercase())
            .collect();
        match key.as_str() {
            "SUPPORTED" => Ok(ClaimStatus::Supported),
            "CONTRADICTED" => Ok(ClaimStatus::Contradicted),
            "NOCOVERAGE" => Ok(ClaimStatus::NoCoverage),
            _ => Err(QkgError::Invalid(format!("unknown claim status `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    KgOnly,
    QkgWithContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub turn: u32,
    pub tool: String,
    pub args: Value,
    /// 0-based claim index the call was made for, when stated.
    pub claim: Option<usize>,
    pub result: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimVerdict {
    pub claim: Claim,
    pub status: ClaimStatus,
    pub evidence: String,
    pub tool_trace: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub schema_version: u32,
    pub mode: ValidationMode,
    pub turns: u32,
    pub turn_budget: u32,
    pub verdicts: Vec<ClaimVerdict>,
    pub tool_trace: Vec<ToolCall>,
}

impl ValidationReport {
    pub fn empty(mode: ValidationMode, turn_budget: u32) -> Self {
        ValidationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            mode,
            turns: 0,
            turn_budget,
            verdicts: Vec::new(),
            tool_trace: Vec::new(),
        }
    }

    pub fn has_contradiction(&self) -> bool {
        self.verdicts.iter().any(|v| v.status == ClaimStatus::Contradicted)
    }

    pub fn contradicted(&self) -> impl Iterator<Item = &ClaimVerdict> {
        self.verdicts.iter().filter(|v| v.status == ClaimStatus::Contradicted)
    }

    /// Compact text rendering handed back to the reasoner.
    pub fn describe(&self) -> String {
        self.verdicts
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let stance = if v.claim.supports { "for" } else { "against" };
                format!(
                    "{}. [{}, {stance}] {}\n   {}: {}",
                    i + 1,
                    v.claim.option_label,
                    v.claim.statement,
                    v.status,
                    if v.evidence.is_empty() {
                        v.note.as_deref().unwrap_or("")
                    } else {
                        &v.evidence
                    }
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityBrief {
    pub index: EntityIndex,
    pub source_id: String,
    pub name: String,
    #[serde(rename = "type")]
    pub entity_type: String,
}

impl From<&EntityRecord> for EntityBrief {
    fn from(e: &EntityRecord) -> Self {
        EntityBrief {
            index: e.index,
            source_id: e.source_id.clone(),
            name: e.name.clone(),
            entity_type: e.entity_type.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationEvidence {
    pub head: EntityBrief,
    pub relation: String,
    pub tail: EntityBrief,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<ApplicabilityDecision>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvidenceBundle {
    pub relations: Vec<RelationEvidence>,
    pub unknown_entities: Vec<EntityIndex>,
    pub truncated: bool,
}

impl EvidenceBundle {
    /// JSON shown to the validator. Decisions are flattened into a short
    /// context block with an uppercase guidance tag.
    pub fn tool_json(&self, store: &ConstraintStore) -> Value {
        let relations: Vec<Value> = self
            .relations
            .iter()
            .map(|r| {
                let mut v = json!({
                    "head": {"index": r.head.index, "name": r.head.name, "id": r.head.source_id},
                    "relation": r.relation,
                    "tail": {"index": r.tail.index, "name": r.tail.name, "id": r.tail.source_id},
                });
                if let Some(d) = &r.decision {
                    let mut ctx = json!({
                        "verdict": d.verdict,
                        "weight": d.weight,
                        "rationale": d.rationale,
                    });
                    if let Some(tag) = d.guidance() {
                        ctx["guidance"] = json!(tag);
                    }
                    if let Some(c) = &d.matched_constraint {
                        ctx["constraint"] = crate::constraints::item_json(c, store.scale());
                    }
                    v["patient_context"] = ctx;
                }
                v
            })
            .collect();
        let mut out = json!({ "relations": relations });
        if !self.unknown_entities.is_empty() {
            out["unknown_entities"] = json!(self.unknown_entities);
        }
        if self.truncated {
            out["truncated"] = json!(true);
        }
        out
    }
}

/// Shared, read-only inputs of a validation round.
pub struct ValidationEnv<'a> {
    pub graph: &'a GraphStore,
    pub constraints: &'a ConstraintStore,
    pub engine: &'a ApplicabilityEngine,
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidatorOptions {
    pub role: String,
    pub mode: ValidationMode,
    pub turn_budget: u32,
    /// Cap on relations returned by one tool call.
    pub max_relations: usize,
    pub search_limit: usize,
    /// Role used to judge conditions the rule matcher cannot decide.
    pub judge_role: Option<String>,
}

impl Default for ValidatorOptions {
    fn default() -> Self {
        ValidatorOptions {
            role: ROLE_VALIDATOR.into(),
            mode: ValidationMode::QkgWithContext,
            turn_budget: DEFAULT_TURN_BUDGET,
            max_relations: 200,
            search_limit: 50,
            judge_role: None,
        }
    }
}

/// Incident relations of `entities`, each annotated with its applicability
/// decision in context mode. Relations touching several requested entities
/// are listed once, in triplet order.
pub fn get_relations_with_context(
    entities: &[EntityIndex],
    env: &ValidationEnv<'_>,
    ctx: &PatientContext,
    mode: ValidationMode,
    judge: Option<&Judge<'_>>,
    max_relations: usize,
) -> EvidenceBundle {
    let mut bundle = EvidenceBundle::default();
    let mut ids = BTreeSet::new();
    for &e in entities {
        match env.graph.incident_ids(e) {
            Ok(incident) => ids.extend(incident.iter().copied()),
            Err(_) => bundle.unknown_entities.push(e),
        }
    }
    if ids.len() > max_relations {
        bundle.truncated = true;
    }
    let triplets: Vec<_> = ids
        .into_iter()
        .take(max_relations)
        .filter_map(|id| env.graph.triplet(id))
        .collect();
    let keys: Vec<TripletKey> = triplets
        .iter()
        .map(|t| TripletKey::of(env.graph, t).expect("triplet endpoints exist"))
        .collect();
    let decisions: Vec<Option<ApplicabilityDecision>> = match mode {
        ValidationMode::KgOnly => vec![None; triplets.len()],
        ValidationMode::QkgWithContext => {
            let items: Vec<_> = keys
                .iter()
                .map(|k| (k.clone(), env.constraints.get_constraints(k)))
                .collect();
            env.engine
                .apply_constraint_items(&items, ctx, judge)
                .into_iter()
                .map(Some)
                .collect()
        }
    };
    for (t, decision) in triplets.into_iter().zip(decisions) {
        let head = env.graph.entity(t.head).expect("head exists");
        let tail = env.graph.entity(t.tail).expect("tail exists");
        bundle.relations.push(RelationEvidence {
            head: head.into(),
            relation: t.relation.to_string(),
            tail: tail.into(),
            decision,
        });
    }
    bundle
}

enum Action {
    Tool {
        name: String,
        args: Value,
        claim: Option<usize>,
    },
    Final(Vec<(usize, ClaimStatus, String)>),
}

fn parse_action(raw: &str, n_claims: usize) -> Result<Action> {
    let map = extract_first_json_object(raw)?;
    let claim_index = |v: Option<&Value>| -> Option<usize> {
        let n = match v? {
            Value::Number(n) => n.as_u64()?,
            Value::String(s) => s.trim().parse().ok()?,
            _ => return None,
        } as usize;
        (1..=n_claims).contains(&n).then(|| n - 1)
    };
    if let Some(list) = map.get("final") {
        let list = list.as_array().ok_or_else(|| QkgError::Validation {
            field: "final".into(),
            message: "expected an array of verdicts".into(),
        })?;
        let mut out = Vec::new();
        for item in list {
            let Some(i) = claim_index(item.get("claim")) else {
                continue;
            };
            let Some(status) = item.get("status").and_then(Value::as_str).and_then(|s| s.parse().ok()) else {
                continue;
            };
            let evidence = item
                .get("evidence")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            out.push((i, status, evidence));
        }
        return Ok(Action::Final(out));
    }
    if let Some(name) = map.get("tool").and_then(Value::as_str) {
        return Ok(Action::Tool {
            name: name.to_string(),
            args: map.get("args").cloned().unwrap_or_else(|| Value::Object(Map::new())),
            claim: claim_index(map.get("claim")),
        });
    }
    Err(QkgError::Validation {
        field: "tool".into(),
        message: "reply has neither `tool` nor `final`".into(),
    })
}

fn entity_list(args: &Value, graph: &GraphStore) -> Vec<EntityIndex> {
    let raw: Vec<&Value> = match args.get("entities").or_else(|| args.get("entity")) {
        Some(Value::Array(a)) => a.iter().collect(),
        Some(v) => vec![v],
        None => Vec::new(),
    };
    let mut out = Vec::new();
    for v in raw {
        match v {
            Value::Number(n) => out.extend(n.as_u64()),
            Value::String(s) => match s.trim().parse::<u64>() {
                Ok(i) => out.push(i),
                Err(_) => out.extend(graph.entity_by_source_id(s.trim()).map(|e| e.index)),
            },
            Value::Object(o) => out.extend(o.get("index").and_then(Value::as_u64)),
            _ => {}
        }
    }
    out
}

fn run_tool(
    name: &str,
    args: &Value,
    env: &ValidationEnv<'_>,
    ctx: &PatientContext,
    options: &ValidatorOptions,
    judge: Option<&Judge<'_>>,
) -> Value {
    match name {
        "search_entities" => {
            let query = args.get("query").and_then(Value::as_str).unwrap_or_default();
            let limit = args
                .get("limit")
                .and_then(Value::as_u64)
                .map(|l| l as usize)
                .unwrap_or(10)
                .clamp(1, options.search_limit.max(1));
            match env.graph.search_entities(query, limit) {
                Ok(hits) => json!({
                    "entities": hits.into_iter().map(EntityBrief::from).collect::<Vec<_>>()
                }),
                Err(e) => json!({ "error": e.to_string() }),
            }
        }
        "get_relations_with_context" | "get_relations" => {
            let entities = entity_list(args, env.graph);
            if entities.is_empty() {
                return json!({ "error": "args.entities must list entity indices" });
            }
            get_relations_with_context(&entities, env, ctx, options.mode, judge, options.max_relations)
                .tool_json(env.constraints)
        }
        other => json!({ "error": format!("unknown tool `{other}`") }),
    }
}

fn render_claims(claims: &[Claim]) -> String {
    claims
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let stance = if c.supports {
                "argues for choosing"
            } else {
                "argues for eliminating"
            };
            format!(
                "Claim {} (option {}, {stance} it): {}",
                i + 1,
                c.option_label,
                c.statement
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn initial_messages(
    claims: &[Claim],
    ctx: &PatientContext,
    env: &ValidationEnv<'_>,
    options: &ValidatorOptions,
) -> Vec<ChatMessage> {
    let (note, patient) = match options.mode {
        ValidationMode::KgOnly => (String::new(), String::new()),
        ValidationMode::QkgWithContext => (
            "\n  In this setting each relation also carries a patient_context block: whether the relation's \
             annotated conditions apply to this patient, a weight, and a guidance tag (AVOID, CAUTION or RECOMMENDED). \
             Relations marked not_applicable should not be used as support."
                .to_string(),
            format!("Patient context:\n{}\n\n", ctx.describe()),
        ),
    };
    let budget = options.turn_budget.to_string();
    let claims = render_claims(claims);
    env.prompts.validator.render(&[
        ("context_tool_note", &note),
        ("turn_budget", &budget),
        ("patient_section", &patient),
        ("claims", &claims),
    ])
}

/// Runs one validation round. Never fails: gateway errors and budget
/// exhaustion turn unresolved claims into NO_COVERAGE with a note.
pub fn validate_claims(
    claims: &[Claim],
    ctx: &PatientContext,
    env: &ValidationEnv<'_>,
    options: &ValidatorOptions,
) -> ValidationReport {
    let mut report = ValidationReport::empty(options.mode, options.turn_budget);
    if claims.is_empty() {
        return report;
    }
    let judge = match (options.mode, options.judge_role.as_deref()) {
        (ValidationMode::QkgWithContext, Some(role)) => Some(Judge::new(env.gateway, role, env.prompts)),
        _ => None,
    };
    let mut messages = initial_messages(claims, ctx, env, options);
    let mut outcome: Option<Vec<(usize, ClaimStatus, String)>> = None;
    let mut failure_note: Option<String> = None;

    while report.turns < options.turn_budget {
        report.turns += 1;
        let raw = match env.gateway.complete(&options.role, &messages) {
            Ok(raw) => raw,
            Err(e) => {
                failure_note = Some(format!("validator gateway failure: {e}"));
                break;
            }
        };
        messages.push(ChatMessage::assistant(raw.clone()));
        match parse_action(&raw, claims.len()) {
            Ok(Action::Final(list)) => {
                outcome = Some(list);
                break;
            }
            Ok(Action::Tool { name, args, claim }) => {
                let result = run_tool(&name, &args, env, ctx, options, judge.as_ref());
                messages.push(ChatMessage::user(format!(
                    "Tool result ({name}):\n{}",
                    serde_json::to_string(&result).unwrap_or_default()
                )));
                report.tool_trace.push(ToolCall {
                    turn: report.turns,
                    tool: name,
                    args,
                    claim,
                    result,
                });
            }
            Err(e) => {
                messages.push(ChatMessage::user(format!(
                    "Your reply was not a valid action ({e}). Reply with exactly one JSON object: \
                     a tool call {{\"tool\": ..., \"args\": {{...}}, \"claim\": n}} or {{\"final\": [...]}}."
                )));
            }
        }
    }

    let unresolved_note = failure_note.unwrap_or_else(|| match outcome {
        Some(_) => "validator returned no verdict for this claim".into(),
        None => format!(
            "turn budget of {} exhausted before a final verdict",
            options.turn_budget
        ),
    });
    let finals = outcome.unwrap_or_default();
    for (i, claim) in claims.iter().enumerate() {
        let tool_trace: Vec<ToolCall> = report
            .tool_trace
            .iter()
            .filter(|c| c.claim == Some(i))
            .cloned()
            .collect();
        let verdict = match finals.iter().find(|(c, _, _)| *c == i) {
            Some((_, status, evidence)) if *status != ClaimStatus::NoCoverage && evidence.trim().is_empty() => {
                ClaimVerdict {
                    claim: claim.clone(),
                    status: ClaimStatus::NoCoverage,
                    evidence: String::new(),
                    tool_trace,
                    note: Some(format!("{status} without evidence downgraded")),
                }
            }
            Some((_, status, evidence)) => ClaimVerdict {
                claim: claim.clone(),
                status: *status,
                evidence: evidence.clone(),
                tool_trace,
                note: None,
            },
            None => ClaimVerdict {
                claim: claim.clone(),
                status: ClaimStatus::NoCoverage,
                evidence: String::new(),
                tool_trace,
                note: Some(unresolved_note.clone()),
            },
        };
        report.verdicts.push(verdict);
    }
    report
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::constraints::{Applicability, ConstraintItem};
    use crate::kg::{EntityType, GraphBuilder};
    use crate::llm::{GatewayConfig, MockBackend, MockScript};
    use crate::patient::{LabSynonyms, Verdict};

    fn entity(index: u64, id: &str, ty: EntityType, name: &str) -> EntityRecord {
        EntityRecord {
            index,
            source_id: id.into(),
            source_vocab: String::new(),
            entity_type: ty,
            name: name.into(),
        }
    }

    fn fixture() -> (GraphStore, ConstraintStore) {
        let mut b = GraphBuilder::new();
        b.add_entity(entity(0, "DB00009", EntityType::Drug, "Alteplase"))
            .unwrap();
        b.add_entity(entity(1, "5555", EntityType::Disease, "ischemic stroke"))
            .unwrap();
        b.add_entity(entity(2, "6666", EntityType::Disease, "thrombocytopenia"))
            .unwrap();
        b.add_triplet(0, "indication", 1);
        b.add_triplet(0, "contraindication", 2);
        let graph = b.build().unwrap();
        let mut store = ConstraintStore::default();
        store
            .insert(
                TripletKey::new("DB00009", "indication", "5555"),
                vec![ConstraintItem::new(
                    "platelet count < 100,000/mm3",
                    Applicability::DefinitelyNotApplicable,
                    "AVOID in thrombocytopenia: IV tPA eligibility requires platelets >= 100,000/mm3",
                )],
            )
            .unwrap();
        (graph, store)
    }

    fn gateway(responses: &[&str]) -> Gateway {
        let backend = MockBackend::new(MockScript::default()).with_queue(ROLE_VALIDATOR, responses.iter().copied());
        Gateway::new(GatewayConfig::mock_roles(&[ROLE_VALIDATOR]), Arc::new(backend))
    }

    fn ctx() -> PatientContext {
        crate::patient::fallback_patient_context(
            "A 70-year-old man with a platelet count of 95,000/mm3.",
            &LabSynonyms::default(),
        )
    }

    #[test]
    fn zero_claims_zero_turns() {
        let (graph, store) = fixture();
        let gw = gateway(&[]);
        let engine = ApplicabilityEngine::default();
        let prompts = PromptSet::default();
        let env = ValidationEnv {
            graph: &graph,
            constraints: &store,
            engine: &engine,
            gateway: &gw,
            prompts: &prompts,
        };
        let r = validate_claims(&[], &ctx(), &env, &ValidatorOptions::default());
        assert_eq!(r.turns, 0);
        assert!(r.verdicts.is_empty());
    }

    #[test]
    fn context_mode_flags_relation() {
        let (graph, store) = fixture();
        let gw = gateway(&[]);
        let engine = ApplicabilityEngine::default();
        let prompts = PromptSet::default();
        let env = ValidationEnv {
            graph: &graph,
            constraints: &store,
            engine: &engine,
            gateway: &gw,
            prompts: &prompts,
        };
        let b = get_relations_with_context(&[0], &env, &ctx(), ValidationMode::QkgWithContext, None, 100);
        assert_eq!(b.relations.len(), 2);
        let ind = &b.relations[0];
        assert_eq!(ind.relation, "indication");
        let d = ind.decision.as_ref().unwrap();
        assert_eq!(d.verdict, Verdict::NotApplicable);
        assert_eq!(d.guidance(), Some("AVOID"));
        let kg = get_relations_with_context(&[0], &env, &ctx(), ValidationMode::KgOnly, None, 100);
        assert!(kg.relations.iter().all(|r| r.decision.is_none()));
        assert!(
            get_relations_with_context(&[], &env, &ctx(), ValidationMode::KgOnly, None, 100)
                .relations
                .is_empty()
        );
    }

    #[test]
    fn tool_loop_and_final() {
        let (graph, store) = fixture();
        let gw = gateway(&[
            r#"{"tool": "search_entities", "args": {"query": "alteplase"}, "claim": 1}"#,
            "not json at all",
            r#"{"tool": "get_relations_with_context", "args": {"entities": [0]}, "claim": 1}"#,
            r#"{"final": [{"claim": 1, "status": "CONTRADICTED", "evidence": "AVOID: platelet count below threshold"}, {"claim": 2, "status": "SUPPORTED", "evidence": ""}]}"#,
        ]);
        let engine = ApplicabilityEngine::default();
        let prompts = PromptSet::default();
        let env = ValidationEnv {
            graph: &graph,
            constraints: &store,
            engine: &engine,
            gateway: &gw,
            prompts: &prompts,
        };
        let claims = [
            Claim::new('A', "Alteplase is indicated", true),
            Claim::new('B', "Something else", true),
        ];
        let r = validate_claims(&claims, &ctx(), &env, &ValidatorOptions::default());
        assert_eq!(r.turns, 4);
        assert_eq!(r.tool_trace.len(), 2);
        assert_eq!(r.verdicts[0].status, ClaimStatus::Contradicted);
        assert_eq!(r.verdicts[0].tool_trace.len(), 2);
        assert_eq!(r.verdicts[1].status, ClaimStatus::NoCoverage);
        assert!(r.verdicts[1].note.is_some());
    }

    #[test]
    fn budget_exhaustion() {
        let (graph, store) = fixture();
        let gw = gateway(&[r#"{"tool": "search_entities", "args": {"query": "x"}}"#; 5]);
        let engine = ApplicabilityEngine::default();
        let prompts = PromptSet::default();
        let env = ValidationEnv {
            graph: &graph,
            constraints: &store,
            engine: &engine,
            gateway: &gw,
            prompts: &prompts,
        };
        let opts = ValidatorOptions {
            turn_budget: 3,
            ..Default::default()
        };
        let r = validate_claims(&[Claim::new('C', "x", false)], &ctx(), &env, &opts);
        assert_eq!(r.turns, 3);
        assert_eq!(r.verdicts[0].status, ClaimStatus::NoCoverage);
        assert!(r.verdicts[0].note.as_ref().unwrap().contains("budget"));
    }

    #[test]
    fn gateway_failure_is_no_coverage() {
        let (graph, store) = fixture();
        let gw = gateway(&[]);
        let engine = ApplicabilityEngine::default();
        let prompts = PromptSet::default();
        let env = ValidationEnv {
            graph: &graph,
            constraints: &store,
            engine: &engine,
            gateway: &gw,
            prompts: &prompts,
        };
        let r = validate_claims(
            &[Claim::new('C', "x", false)],
            &ctx(),
            &env,
            &ValidatorOptions::default(),
        );
        assert_eq!(r.verdicts[0].status, ClaimStatus::NoCoverage);
        assert!(r.verdicts[0].note.as_ref().unwrap().contains("gateway"));
    }

    #[test]
    fn status_parsing() {
        assert_eq!("no_coverage".parse::<ClaimStatus>().unwrap(), ClaimStatus::NoCoverage);
        assert_eq!("NO COVERAGE".parse::<ClaimStatus>().unwrap(), ClaimStatus::NoCoverage);
        assert!("maybe".parse::<ClaimStatus>().is_err());
        assert_eq!(
            serde_json::to_string(&ClaimStatus::NoCoverage).unwrap(),
            "\"NO_COVERAGE\""
        );
    }
}
