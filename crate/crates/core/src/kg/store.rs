use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use super::search::normalize_name;
use super::types::{EntityIndex, EntityRecord, EntityType, TripletId, TripletRecord};
use crate::error::{QkgError, Result};

/// Immutable, indexed triplet store.
#[derive(Debug, Clone, Default)]
pub struct GraphStore {
    entities: Vec<EntityRecord>,
    slots: HashMap<EntityIndex, usize>,
    triplets: Vec<TripletRecord>,
    adjacency: Vec<Vec<TripletId>>,
    normalized_names: Vec<String>,
    name_index: HashMap<String, Vec<EntityIndex>>,
    relations: Vec<Arc<str>>,
}

/// Accumulates entities and triplets; [`GraphBuilder::build`] freezes them into a [`GraphStore`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: BTreeMap<EntityIndex, EntityRecord>,
    relation_ids: HashMap<Arc<str>, u32>,
    relations: Vec<Arc<str>>,
    seen: HashSet<(EntityIndex, u32, EntityIndex)>,
    triplets: Vec<TripletRecord>,
    collapse_reverse: bool,
    duplicates: usize,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Treat `(t, r, h)` as a duplicate of an already present `(h, r, t)`.
    pub fn collapse_reverse(mut self, yes: bool) -> Self {
        self.collapse_reverse = yes;
        self
    }

    /// Adds an entity; re-adding an identical record is a no-op.
    pub fn add_entity(&mut self, record: EntityRecord) -> Result<()> {
        match self.entities.get(&record.index) {
            Some(existing) if *existing == record => Ok(()),
            Some(_) => Err(QkgError::ConflictingEntity { index: record.index }),
            None => {
                self.entities.insert(record.index, record);
                Ok(())
            }
        }
    }

    pub fn has_entity(&self, index: EntityIndex) -> bool {
        self.entities.contains_key(&index)
    }

    /// Adds a triplet, returning `false` when it duplicates one already present.
    pub fn add_triplet(&mut self, head: EntityIndex, relation: &str, tail: EntityIndex) -> bool {
        let rel_id = match self.relation_ids.get(relation) {
            Some(&id) => id,
            None => {
                let id = self.relations.len() as u32;
                let rel: Arc<str> = Arc::from(relation);
                self.relations.push(rel.clone());
                self.relation_ids.insert(rel, id);
                id
            }
        };
        if self.collapse_reverse && self.seen.contains(&(tail, rel_id, head)) {
            self.duplicates += 1;
            return false;
        }
        if !self.seen.insert((head, rel_id, tail)) {
            self.duplicates += 1;
            return false;
        }
        self.triplets.push(TripletRecord {
            head,
            relation: self.relations[rel_id as usize].clone(),
            tail,
        });
        true
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    /// Freezes the builder. Fails if any triplet endpoint has no entity record.
    pub fn build(self) -> Result<GraphStore> {
        let entities: Vec<EntityRecord> = self.entities.into_values().collect();
        let slots: HashMap<EntityIndex, usize> = entities.iter().enumerate().map(|(slot, e)| (e.index, slot)).collect();

        let mut adjacency = vec![Vec::new(); entities.len()];
        for (id, t) in self.triplets.iter().enumerate() {
            let head = *slots.get(&t.head).ok_or(QkgError::DanglingEntity(t.head))?;
            let tail = *slots.get(&t.tail).ok_or(QkgError::DanglingEntity(t.tail))?;
            adjacency[head].push(id);
            if tail != head {
                adjacency[tail].push(id);
            }
        }

        let normalized_names: Vec<String> = entities.iter().map(|e| normalize_name(&e.name)).collect();
        let mut name_index: HashMap<String, Vec<EntityIndex>> = HashMap::new();
        for (e, norm) in entities.iter().zip(&normalized_names) {
            name_index.entry(norm.clone()).or_default().push(e.index);
        }

        let mut relations = self.relations;
        relations.sort();

        Ok(GraphStore {
            entities,
            slots,
            triplets: self.triplets,
            adjacency,
            normalized_names,
            name_index,
            relations,
        })
    }
}

#[derive(Serialize)]
struct EntityLine<'a> {
    entity: &'a EntityRecord,
}

#[derive(Serialize)]
struct TripletLine<'a> {
    head: &'a EntityRecord,
    relation: &'a str,
    tail: &'a EntityRecord,
}

impl GraphStore {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_triplets(&self) -> usize {
        self.triplets.len()
    }

    /// Entities in ascending index order.
    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn triplets(&self) -> &[TripletRecord] {
        &self.triplets
    }

    pub fn triplet(&self, id: TripletId) -> Option<&TripletRecord> {
        self.triplets.get(id)
    }

    /// Distinct relation types, sorted.
    pub fn relation_types(&self) -> &[Arc<str>] {
        &self.relations
    }

    pub fn contains(&self, index: EntityIndex) -> bool {
        self.slots.contains_key(&index)
    }

    pub fn entity(&self, index: EntityIndex) -> Result<&EntityRecord> {
        self.slots
            .get(&index)
            .map(|&slot| &self.entities[slot])
            .ok_or(QkgError::UnknownEntity(index))
    }

    /// First entity (lowest index) whose `source_id` equals `source_id`.
    pub fn entity_by_source_id(&self, source_id: &str) -> Option<&EntityRecord> {
        self.entities.iter().find(|e| e.source_id == source_id)
    }

    /// Map from `source_id` to entity indices, ascending.
    pub fn source_id_index(&self) -> HashMap<&str, Vec<EntityIndex>> {
        let mut map: HashMap<&str, Vec<EntityIndex>> = HashMap::new();
        for e in &self.entities {
            map.entry(e.source_id.as_str()).or_default().push(e.index);
        }
        map
    }

    /// Ids of the triplets incident to `index`, ascending.
    pub fn incident_ids(&self, index: EntityIndex) -> Result<&[TripletId]> {
        self.slots
            .get(&index)
            .map(|&slot| self.adjacency[slot].as_slice())
            .ok_or(QkgError::UnknownEntity(index))
    }

    /// Every triplet with `index` as head or tail, each once, ordered by triplet id.
    pub fn neighbors(&self, index: EntityIndex) -> Result<Vec<&TripletRecord>> {
        Ok(self.incident_ids(index)?.iter().map(|&id| &self.triplets[id]).collect())
    }

    pub(crate) fn normalized_names(&self) -> &[String] {
        &self.normalized_names
    }

    pub(crate) fn exact_name_matches(&self, normalized: &str) -> &[EntityIndex] {
        self.name_index.get(normalized).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn entity_type_histogram(&self) -> BTreeMap<EntityType, usize> {
        let mut hist = BTreeMap::new();
        for e in &self.entities {
            *hist.entry(e.entity_type).or_insert(0) += 1;
        }
        hist
    }

    pub fn relation_histogram(&self) -> BTreeMap<String, usize> {
        let mut hist = BTreeMap::new();
        for t in &self.triplets {
            *hist.entry(t.relation.to_string()).or_insert(0) += 1;
        }
        hist
    }

    /// New store holding the given triplets, their endpoints, and any `extra_entities`.
    pub fn restrict<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a TripletId>,
        extra_entities: &[EntityIndex],
    ) -> Result<GraphStore> {
        let mut builder = GraphBuilder::new();
        for &e in extra_entities {
            builder.add_entity(self.entity(e)?.clone())?;
        }
        for &id in ids {
            let t = self
                .triplets
                .get(id)
                .ok_or_else(|| QkgError::Invalid(format!("unknown triplet id {id}")))?;
            builder.add_entity(self.entity(t.head)?.clone())?;
            builder.add_entity(self.entity(t.tail)?.clone())?;
            builder.add_triplet(t.head, &t.relation, t.tail);
        }
        builder.build()
    }

    /// Writes the JSONL graph format: one line per triplet with embedded
    /// endpoint records, then one `{"entity": ...}` line per isolated entity.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.triplets {
            let line = TripletLine {
                head: self.entity(t.head)?,
                relation: &t.relation,
                tail: self.entity(t.tail)?,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(|e| QkgError::io("<graph writer>", e))?;
        }
        for (slot, e) in self.entities.iter().enumerate() {
            if self.adjacency[slot].is_empty() {
                serde_json::to_writer(&mut out, &EntityLine { entity: e })?;
                out.write_all(b"\n").map_err(|e| QkgError::io("<graph writer>", e))?;
            }
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| QkgError::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush().map_err(|e| QkgError::io(path, e))
    }
}
