//! Two-layer disease-centric subgraph extraction.
//!
//! The direct layer is every triplet incident to the target. Its other
//! endpoints form the intermediate set. The indirect layer is every triplet
//! (over the full store) with at least one endpoint in the intermediate set.
//! The merged subgraph is the deduplicated union of both layers.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::kg::{EntityIndex, GraphStore, TripletId};

#[derive(Debug, Clone)]
pub struct Subgraph {
    pub target: EntityIndex,
    /// Triplet ids in the source store.
    pub direct_triplets: BTreeSet<TripletId>,
    pub intermediate_entities: BTreeSet<EntityIndex>,
    /// Triplet ids in the source store.
    pub indirect_triplets: BTreeSet<TripletId>,
    pub merged: GraphStore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubgraphStats {
    pub target: EntityIndex,
    pub target_source_id: String,
    pub direct_triplets: usize,
    pub intermediate_entities: usize,
    /// Indirect-layer triplets not already in the direct layer.
    pub indirect_added_triplets: usize,
    /// Every triplet touching an intermediate entity.
    pub indirect_triplets: usize,
    pub merged_triplets: usize,
    pub merged_entities: usize,
    pub merged_entities_without_target: usize,
    pub entity_types: usize,
    pub relation_types: usize,
    pub entity_type_histogram: BTreeMap<String, usize>,
    pub relation_histogram: BTreeMap<String, usize>,
}

/// Triplets incident to `target` and the set of their other endpoints.
/// Self-loops on the target contribute nothing to the intermediate set.
pub fn extract_direct_layer(
    store: &GraphStore,
    target: EntityIndex,
) -> Result<(BTreeSet<TripletId>, BTreeSet<EntityIndex>)> {
    let ids = store.incident_ids(target)?;
    let mut intermediates = BTreeSet::new();
    for &id in ids {
        let t = &store.triplets()[id];
        if let Some(other) = t.other_end(target) {
            if other != target {
                intermediates.insert(other);
            }
        }
    }
    Ok((ids.iter().copied().collect(), intermediates))
}

/// All triplets with head or tail in `intermediates`, each once.
pub fn extract_indirect_layer(
    store: &GraphStore,
    intermediates: &BTreeSet<EntityIndex>,
) -> Result<BTreeSet<TripletId>> {
    let members: Vec<EntityIndex> = intermediates.iter().copied().collect();
    let per_entity: Vec<&[TripletId]> = members
        .par_iter()
        .map(|&e| store.incident_ids(e))
        .collect::<Result<_>>()?;
    Ok(per_entity.into_iter().flatten().copied().collect())
}

pub fn build_subgraph(store: &GraphStore, target: EntityIndex) -> Result<Subgraph> {
    let (direct, intermediates) = extract_direct_layer(store, target)?;
    let indirect = extract_indirect_layer(store, &intermediates)?;
    let merged_ids: BTreeSet<TripletId> = direct.union(&indirect).copied().collect();
    let merged = store.restrict(&merged_ids, &[target])?;
    Ok(Subgraph {
        target,
        direct_triplets: direct,
        intermediate_entities: intermediates,
        indirect_triplets: indirect,
        merged,
    })
}

impl Subgraph {
    pub fn stats(&self) -> SubgraphStats {
        let types = self.merged.entity_type_histogram();
        let relations = self.merged.relation_histogram();
        let n = self.merged.num_entities();
        SubgraphStats {
            target: self.target,
            target_source_id: self
                .merged
                .entity(self.target)
                .map(|e| e.source_id.clone())
                .unwrap_or_default(),
            direct_triplets: self.direct_triplets.len(),
            intermediate_entities: self.intermediate_entities.len(),
            indirect_added_triplets: self.indirect_triplets.difference(&self.direct_triplets).count(),
            indirect_triplets: self.indirect_triplets.len(),
            merged_triplets: self.merged.num_triplets(),
            merged_entities: n,
            merged_entities_without_target: n.saturating_sub(usize::from(self.merged.contains(self.target))),
            entity_types: types.len(),
            relation_types: relations.len(),
            entity_type_histogram: types.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            relation_histogram: relations,
        }
    }
}
