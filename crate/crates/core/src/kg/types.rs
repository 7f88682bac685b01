use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::QkgError;

/// Entity id as it appears in the source export (PrimeKG `x_index`).
pub type EntityIndex = u64;

/// Position of a triplet inside one [`GraphStore`](super::GraphStore).
pub type TripletId = usize;

/// The ten biomedical node types of a PrimeKG-style graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityType {
    GeneProtein,
    Drug,
    Disease,
    BiologicalProcess,
    Phenotype,
    Pathway,
    Exposure,
    MolecularFunction,
    CellularComponent,
    Anatomy,
}

impl EntityType {
    pub const ALL: [EntityType; 10] = [
        EntityType::GeneProtein,
        EntityType::Drug,
        EntityType::Disease,
        EntityType::BiologicalProcess,
        EntityType::Phenotype,
        EntityType::Pathway,
        EntityType::Exposure,
        EntityType::MolecularFunction,
        EntityType::CellularComponent,
        EntityType::Anatomy,
    ];

    /// Label used in PrimeKG exports.
    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::GeneProtein => "gene/protein",
            EntityType::Drug => "drug",
            EntityType::Disease => "disease",
            EntityType::BiologicalProcess => "biological_process",
            EntityType::Phenotype => "effect/phenotype",
            EntityType::Pathway => "pathway",
            EntityType::Exposure => "exposure",
            EntityType::MolecularFunction => "molecular_function",
            EntityType::CellularComponent => "cellular_component",
            EntityType::Anatomy => "anatomy",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = QkgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        let ty = match key.as_str() {
            "gene/protein" | "gene_protein" | "gene" | "protein" => EntityType::GeneProtein,
            "drug" => EntityType::Drug,
            "disease" => EntityType::Disease,
            "biological_process" => EntityType::BiologicalProcess,
            "effect/phenotype" | "phenotype" | "effect_phenotype" => EntityType::Phenotype,
            "pathway" => EntityType::Pathway,
            "exposure" => EntityType::Exposure,
            "molecular_function" => EntityType::MolecularFunction,
            "cellular_component" => EntityType::CellularComponent,
            "anatomy" => EntityType::Anatomy,
            _ => return Err(QkgError::Invalid(format!("unknown entity type `{s}`"))),
        };
        Ok(ty)
    }
}

impl Serialize for EntityType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EntityType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityRecord {
    pub index: EntityIndex,
    pub source_id: String,
    #[serde(default)]
    pub source_vocab: String,
    pub entity_type: EntityType,
    pub name: String,
}

/// A directed `(head, relation, tail)` edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletRecord {
    pub head: EntityIndex,
    pub relation: Arc<str>,
    pub tail: EntityIndex,
}

impl TripletRecord {
    pub fn new(head: EntityIndex, relation: &str, tail: EntityIndex) -> Self {
        TripletRecord {
            head,
            relation: Arc::from(relation),
            tail,
        }
    }

    pub fn touches(&self, entity: EntityIndex) -> bool {
        self.head == entity || self.tail == entity
    }

    /// The endpoint opposite to `entity`, or `None` when `entity` is not an endpoint.
    pub fn other_end(&self, entity: EntityIndex) -> Option<EntityIndex> {
        if self.head == entity {
            Some(self.tail)
        } else if self.tail == entity {
            Some(self.head)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entity_type_accepts_primekg_and_plain_spellings() {
        assert_eq!("effect/phenotype".parse::<EntityType>().unwrap(), EntityType::Phenotype);
        assert_eq!(
            "biological process".parse::<EntityType>().unwrap(),
            EntityType::BiologicalProcess
        );
        assert_eq!("Gene/Protein".parse::<EntityType>().unwrap(), EntityType::GeneProtein);
        assert!("protein complex".parse::<EntityType>().is_err());
        for ty in EntityType::ALL {
            assert_eq!(ty.as_str().parse::<EntityType>().unwrap(), ty);
        }
    }
}
