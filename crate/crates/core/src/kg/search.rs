use super::store::GraphStore;
use super::types::{EntityIndex, EntityRecord};
use crate::error::{QkgError, Result};

/// Lowercases, drops apostrophes, turns other punctuation into spaces and
/// collapses whitespace.
pub fn normalize_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_space = false;
    for c in name.chars() {
        if c == '\'' || c == '\u{2019}' {
            continue;
        }
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Tier {
    Exact,
    Prefix,
    TokenSubset,
}

impl GraphStore {
    /// Ranked entity lookup: exact normalized-name (or source id) matches,
    /// then prefix matches, then entities whose name tokens contain every
    /// query token. Ties break by entity index.
    pub fn search_entities(&self, query: &str, limit: usize) -> Result<Vec<&EntityRecord>> {
        let q = normalize_name(query);
        if q.is_empty() {
            return Err(QkgError::EmptyQuery);
        }
        let q_tokens: Vec<&str> = q.split(' ').collect();
        let raw = query.trim();

        let mut hits: Vec<(Tier, EntityIndex)> = Vec::new();
        for (e, name) in self.entities().iter().zip(self.normalized_names()) {
            let tier = if *name == q || e.source_id.eq_ignore_ascii_case(raw) {
                Some(Tier::Exact)
            } else if name.starts_with(&q) {
                Some(Tier::Prefix)
            } else if q_tokens.iter().all(|t| name.split(' ').any(|n| n == *t)) {
                Some(Tier::TokenSubset)
            } else {
                None
            };
            if let Some(tier) = tier {
                hits.push((tier, e.index));
            }
        }
        debug_assert!(self
            .exact_name_matches(&q)
            .iter()
            .all(|i| hits.contains(&(Tier::Exact, *i))));
        hits.sort_unstable();
        hits.truncate(limit);
        hits.into_iter().map(|(_, i)| self.entity(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityType, GraphBuilder};

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_name("  Nitrous   Oxide "), "nitrous oxide");
        assert_eq!(normalize_name("Alzheimer's disease"), "alzheimers disease");
        assert_eq!(normalize_name("Varicella-Zoster Vaccine"), "varicella zoster vaccine");
        assert_eq!(normalize_name("!!"), "");
    }

    fn store(names: &[(u64, &str, &str)]) -> GraphStore {
        let mut b = GraphBuilder::new();
        for (i, sid, name) in names {
            b.add_entity(crate::kg::EntityRecord {
                index: *i,
                source_id: sid.to_string(),
                source_vocab: "DrugBank".into(),
                entity_type: EntityType::Drug,
                name: name.to_string(),
            })
            .unwrap();
        }
        b.build().unwrap()
    }

    #[test]
    fn tiers_rank_exact_prefix_subset() {
        let s = store(&[
            (1, "X1", "oxide nitrous compound"),
            (2, "X2", "Nitrous oxide"),
            (3, "X3", "nitrous oxide inhalation"),
        ]);
        let r: Vec<u64> = s
            .search_entities("Nitrous oxide", 10)
            .unwrap()
            .iter()
            .map(|e| e.index)
            .collect();
        assert_eq!(r, vec![2, 3, 1]);
        let r: Vec<u64> = s
            .search_entities("nitrous", 10)
            .unwrap()
            .iter()
            .map(|e| e.index)
            .collect();
        assert_eq!(r, vec![2, 3, 1]);
        assert_eq!(s.search_entities("nitrous", 1).unwrap()[0].index, 2);
    }

    #[test]
    fn source_id_counts_as_exact() {
        let s = store(&[(5, "DB06690", "Nitrous oxide"), (1, "DB1", "Nitrous oxide gas")]);
        assert_eq!(s.search_entities("DB06690", 3).unwrap()[0].index, 5);
    }

    #[test]
    fn empty_query_rejected() {
        let s = store(&[(1, "a", "a")]);
        assert!(matches!(s.search_entities(" - ", 3), Err(QkgError::EmptyQuery)));
    }
}
