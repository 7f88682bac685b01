//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use qkg_core::constraints::{Applicability, ConstraintItem, ConstraintStore, TripletKey, FOCUSED_RELATIONS};
use qkg_core::kg::{EntityIndex, EntityRecord, EntityType, GraphBuilder, GraphStore};
use qkg_core::llm::{ChatMessage, Gateway, GatewayConfig, MockBackend, MockScript, Speaker};
use qkg_core::patient::{LabValue, PatientContext, Sex};
use qkg_core::pipeline::QASample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RELATIONS: [&str; 4] = ["indication", "contraindication", "ppi", "associated_with"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn entity(i: EntityIndex) -> EntityRecord {
    EntityRecord {
        index: i,
        source_id: format!("S{i}"),
        source_vocab: "TEST".into(),
        entity_type: EntityType::ALL[i as usize % EntityType::ALL.len()],
        name: format!("entity {i}"),
    }
}

/// `nodes` entities, `edges` attempted random triplets (duplicates dropped,
/// self-loops allowed).
pub fn random_graph(rng: &mut impl Rng, nodes: u64, edges: usize) -> GraphStore {
    let mut b = GraphBuilder::new();
    for i in 0..nodes {
        b.add_entity(entity(i)).unwrap();
    }
    for _ in 0..edges {
        let h = rng.random_range(0..nodes);
        let t = rng.random_range(0..nodes);
        let r = RELATIONS[rng.random_range(0..RELATIONS.len())];
        b.add_triplet(h, r, t);
    }
    b.build().unwrap()
}

/// Constraints on a random subset of the graph's triplets.
pub fn random_constraints(rng: &mut impl Rng, graph: &GraphStore) -> ConstraintStore {
    let mut store = ConstraintStore::default();
    let conditions = [
        "platelet count < 100000",
        "age >= 65",
        "egfr < 30",
        "pregnancy",
        "hba1c > 7",
    ];
    for t in graph.triplets() {
        if !FOCUSED_RELATIONS.contains(&&*t.relation) || !rng.random_bool(0.6) {
            continue;
        }
        let key = TripletKey::of(graph, t).unwrap();
        if !store.get_constraints(&key).is_empty() {
            continue;
        }
        let n = rng.random_range(1..=2);
        let items = (0..n)
            .map(|_| {
                ConstraintItem::new(
                    conditions[rng.random_range(0..conditions.len())],
                    Applicability::LEVELS[rng.random_range(0..5)],
                    "AVOID when the condition holds",
                )
            })
            .collect();
        store.insert(key, items).unwrap();
    }
    store
}

pub fn random_context(rng: &mut impl Rng) -> PatientContext {
    let labs = ["platelet count", "egfr", "hba1c", "creatinine"];
    PatientContext {
        age: rng.random_bool(0.8).then(|| rng.random_range(1..95) as f64),
        sex: match rng.random_range(0..3) {
            0 => Some(Sex::Female),
            1 => Some(Sex::Male),
            _ => None,
        },
        diagnoses: (0..rng.random_range(0..3)).map(|i| format!("diagnosis {i}")).collect(),
        labs: (0..rng.random_range(0..4))
            .map(|i| LabValue {
                name: labs[i % labs.len()].into(),
                value: rng.random_range(1.0..200000.0),
                unit: String::new(),
                comparator_hint: None,
            })
            .collect(),
        medications: (0..rng.random_range(0..3)).map(|i| format!("drug {i}")).collect(),
        other_factors: Vec::new(),
    }
}

/// A different context built from the same kinds of fields, shuffled and re-drawn.
pub fn permuted_context(rng: &mut impl Rng, ctx: &PatientContext) -> PatientContext {
    let mut out = random_context(rng);
    out.labs.extend(ctx.labs.iter().cloned());
    out.labs.shuffle(rng);
    out.diagnoses.extend(ctx.diagnoses.iter().rev().cloned());
    out.medications.shuffle(rng);
    out.age = ctx.age.map(|a| a + 7.0).or(Some(40.0));
    out
}

pub fn sample(id: &str, gold: char, n_choices: u8) -> QASample {
    let choices: BTreeMap<char, String> = (0..n_choices)
        .map(|i| ((b'A' + i) as char, format!("option {}", (b'A' + i) as char)))
        .collect();
    QASample {
        id: id.into(),
        question: format!("Question {id}: which option is best?"),
        choices,
        gold,
        precomputed_context: None,
        kg_grounding: None,
    }
}

pub fn gateway(backend: MockBackend, roles: &[&str]) -> Gateway {
    Gateway::new(GatewayConfig::mock_roles(roles), Arc::new(backend))
}

pub fn empty_backend() -> MockBackend {
    MockBackend::new(MockScript::default())
}

pub fn hash(parts: &[&str]) -> u64 {
    parts.iter().fold(0xcbf29ce484222325u64, |h, p| {
        p.bytes()
            .chain(std::iter::once(0xff))
            .fold(h, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
    })
}

pub fn assistant_turns(messages: &[ChatMessage]) -> usize {
    messages.iter().filter(|m| m.speaker == Speaker::Assistant).count()
}

pub fn all_text(messages: &[ChatMessage]) -> String {
    messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n")
}

/// Brute-force two-layer subgraph: (direct ids, intermediates, indirect ids, merged ids).
pub fn subgraph_oracle(
    graph: &GraphStore,
    target: EntityIndex,
) -> (BTreeSet<usize>, BTreeSet<EntityIndex>, BTreeSet<usize>, BTreeSet<usize>) {
    let ts = graph.triplets();
    let direct: BTreeSet<usize> = (0..ts.len())
        .filter(|&i| ts[i].head == target || ts[i].tail == target)
        .collect();
    let inter: BTreeSet<EntityIndex> = direct
        .iter()
        .flat_map(|&i| [ts[i].head, ts[i].tail])
        .filter(|&e| e != target)
        .collect();
    let indirect: BTreeSet<usize> = (0..ts.len())
        .filter(|&i| inter.contains(&ts[i].head) || inter.contains(&ts[i].tail))
        .collect();
    let merged = direct.union(&indirect).copied().collect();
    (direct, inter, indirect, merged)
}
