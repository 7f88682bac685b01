mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use qkg_core::constraints::{Applicability, ConstraintItem, ConstraintStore, TripletKey, FOCUSED_RELATIONS};
use qkg_core::dataset::{enumerate_onehop_paths, rank_and_filter, CandidateSample};
use qkg_core::kg::{load_graph, GraphBuilder, GraphFormat, GraphStore, LoadOptions};
use qkg_core::llm::parse_qa_response;
use qkg_core::patient::{fallback_patient_context, LabSynonyms};
use qkg_core::pipeline::{EvalMode, Revision, RunSummary, SampleRow};
use qkg_core::stats::{adjusted_accuracy, detect_signals, label_evidence, mcnemar_exact, EvidenceLabel};
use qkg_core::subgraph::build_subgraph;

fn graph_from(nodes: u64, edges: &[(u64, usize, u64)]) -> GraphStore {
    let mut b = GraphBuilder::new();
    for i in 0..nodes {
        b.add_entity(common::entity(i)).unwrap();
    }
    for &(h, r, t) in edges {
        b.add_triplet(h % nodes, common::RELATIONS[r % common::RELATIONS.len()], t % nodes);
    }
    b.build().unwrap()
}

fn edges() -> impl Strategy<Value = (u64, Vec<(u64, usize, u64)>)> {
    (2u64..25).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0usize..4, 0..n), 0..60)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighbors_match_full_scan((n, es) in edges(), probe in 0u64..25) {
        let g = graph_from(n, &es);
        let probe = probe % n;
        let got: Vec<_> = g.neighbors(probe).unwrap().into_iter().cloned().collect();
        let want: Vec<_> = g.triplets().iter().filter(|t| t.head == probe || t.tail == probe).cloned().collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn duplicate_triplets_are_stored_once((n, es) in edges()) {
        let g = graph_from(n, &es);
        let distinct: BTreeSet<(u64, String, u64)> =
            g.triplets().iter().map(|t| (t.head, t.relation.to_string(), t.tail)).collect();
        prop_assert_eq!(distinct.len(), g.num_triplets());
    }

    #[test]
    fn graph_jsonl_round_trip((n, es) in edges()) {
        let g = graph_from(n, &es);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        g.save_jsonl(&p).unwrap();
        let (back, _) = load_graph(&p, GraphFormat::Jsonl, &LoadOptions::default()).unwrap();
        prop_assert_eq!(back.triplets(), g.triplets());
        prop_assert_eq!(back.entities(), g.entities());
    }

    #[test]
    fn subgraph_layers_match_oracle((n, es) in edges(), target in 0u64..25) {
        let g = graph_from(n, &es);
        let target = target % n;
        let sub = build_subgraph(&g, target).unwrap();
        let (direct, inter, indirect, merged) = common::subgraph_oracle(&g, target);
        prop_assert_eq!(&sub.direct_triplets, &direct);
        prop_assert_eq!(&sub.intermediate_entities, &inter);
        prop_assert_eq!(&sub.indirect_triplets, &indirect);
        prop_assert_eq!(sub.merged.num_triplets(), merged.len());
        prop_assert!(sub.merged.num_triplets() <= direct.len() + indirect.len());
    }

    #[test]
    fn onehop_is_edge_filter((n, es) in edges(), aligned in prop::collection::vec(0u64..25, 0..8)) {
        let g = graph_from(n, &es);
        let aligned: Vec<u64> = aligned.into_iter().map(|a| a % n).collect();
        let set: BTreeSet<u64> = aligned.iter().copied().collect();
        let want = if set.len() < 2 {
            0
        } else {
            g.triplets().iter().filter(|t| set.contains(&t.head) && set.contains(&t.tail)).count()
        };
        prop_assert_eq!(enumerate_onehop_paths(&aligned, &g).count, want);
    }

    #[test]
    fn constraint_store_round_trip(items in prop::collection::vec(("[a-z ]{1,20}", 0usize..5, "[ -~]{0,30}", 0usize..4, 0u64..50), 0..20)) {
        let mut store = ConstraintStore::default();
        for (chars, level, evidence, rel, tail) in items {
            let key = TripletKey::new("H", FOCUSED_RELATIONS[rel], &format!("T{tail}"));
            if chars.trim().is_empty() {
                continue;
            }
            let item = ConstraintItem::new(chars.trim(), Applicability::LEVELS[level], &evidence);
            let mut existing = store.get_constraints(&key).to_vec();
            existing.push(item);
            store.insert(key, existing).unwrap();
        }
        let mut first = Vec::new();
        store.write_jsonl(&mut first).unwrap();
        let back = ConstraintStore::read_jsonl(first.as_slice()).unwrap();
        let mut second = Vec::new();
        back.write_jsonl(&mut second).unwrap();
        prop_assert_eq!(first, second);
        prop_assert_eq!(back.len(), store.len());
    }

    #[test]
    fn mcnemar_is_symmetric_and_bounded(b in 0u64..400, c in 0u64..400) {
        let p = mcnemar_exact(b, c);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(p, mcnemar_exact(c, b));
        // Moving one discordant pair toward balance never lowers p.
        if b > c + 1 {
            prop_assert!(mcnemar_exact(b - 1, c + 1) >= p);
        }
    }

    #[test]
    fn adjusted_accuracy_is_a_proportion(n in 1u64..5000, f in 0u64..5000, leak in 0u64..200, ctx in 0u64..200) {
        let f = f % (n + 1);
        match adjusted_accuracy(f, n, leak, ctx) {
            Ok(a) => {
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!(leak <= f && ctx <= n - f && leak + ctx < n);
            }
            Err(_) => prop_assert!(leak > f || ctx > n - f || leak + ctx >= n),
        }
    }

    #[test]
    fn context_token_always_wins(prefix in "[a-z ,.]{0,40}", suffix in "[a-z ,.]{0,40}", token in prop::sample::select(vec!["AVOID", "RECOMMENDED", "CAUTION"])) {
        let text = format!("{prefix} KG lacks this edge. {token} here. Medically, {suffix}");
        prop_assert_eq!(label_evidence(&text), EvidenceLabel::EvContext);
        prop_assert!(!detect_signals(&text.to_lowercase()).context);
    }

    #[test]
    fn ranking_is_stable_top_k(counts in prop::collection::vec(0usize..5, 0..30), k in 0usize..12) {
        let candidates: Vec<CandidateSample> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| CandidateSample { sample: common::sample(&format!("q{i:03}"), 'A', 2), grounded: Vec::new(), path_count: c })
            .collect();
        let kept = rank_and_filter(candidates, k);
        let nonzero = counts.iter().filter(|&&c| c > 0).count();
        prop_assert_eq!(kept.len(), k.min(nonzero));
        prop_assert!(kept.iter().all(|c| c.path_count > 0));
        for w in kept.windows(2) {
            let ordered = w[0].path_count > w[1].path_count
                || (w[0].path_count == w[1].path_count && w[0].sample.id < w[1].sample.id);
            prop_assert!(ordered);
        }
    }

    #[test]
    fn accounting_identity_over_rows(rows in prop::collection::vec((prop::option::of(0u8..4), prop::option::of(0u8..4), 0u8..4), 0..60)) {
        let rows: Vec<SampleRow> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (a, b, g))| {
                let letter = |x: Option<u8>| x.map(|x| (b'A' + x) as char);
                let gold = (b'A' + g) as char;
                let (ia, fa) = (letter(a), letter(b));
                SampleRow {
                    sample_id: i.to_string(),
                    initial_answer: ia.map(String::from).unwrap_or_default(),
                    initial_correct: ia == Some(gold),
                    final_answer: fa.map(String::from).unwrap_or_default(),
                    final_correct: fa == Some(gold),
                    revision: Revision::classify(ia, fa, gold),
                    mode: EvalMode::Kg,
                    validator_model: String::new(),
                }
            })
            .collect();
        prop_assert!(RunSummary::from_rows(&rows).accounting_holds());
    }

    #[test]
    fn parsers_never_panic(text in "\\PC{0,200}") {
        let _ = parse_qa_response(&text);
        let ctx = fallback_patient_context(&text, &LabSynonyms::default());
        prop_assert!(ctx.validate().is_ok());
    }
}
