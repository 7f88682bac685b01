use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::store::{GraphBuilder, GraphStore};
use super::types::{EntityRecord, EntityType};
use crate::error::{QkgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Csv,
    Jsonl,
}

impl GraphFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(GraphFormat::Csv),
            "jsonl" | "ndjson" => Some(GraphFormat::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for GraphFormat {
    type Err = QkgError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(GraphFormat::Csv),
            "jsonl" => Ok(GraphFormat::Jsonl),
            other => Err(QkgError::Invalid(format!("unknown graph format `{other}`"))),
        }
    }
}

/// Header names for CSV import. Defaults follow the PrimeKG `kg.csv` export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub relation: String,
    pub head_index: String,
    pub head_id: String,
    pub head_type: String,
    pub head_name: String,
    pub head_source: String,
    pub tail_index: String,
    pub tail_id: String,
    pub tail_type: String,
    pub tail_name: String,
    pub tail_source: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            relation: "relation".into(),
            head_index: "x_index".into(),
            head_id: "x_id".into(),
            head_type: "x_type".into(),
            head_name: "x_name".into(),
            head_source: "x_source".into(),
            tail_index: "y_index".into(),
            tail_id: "y_id".into(),
            tail_type: "y_type".into(),
            tail_name: "y_name".into(),
            tail_source: "y_source".into(),
        }
    }
}

impl ColumnMap {
    /// Applies `key=column` overrides, e.g. `relation=display_relation`.
    pub fn with_overrides<'a>(mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        for pair in pairs {
            let (key, col) = pair
                .split_once('=')
                .ok_or_else(|| QkgError::Invalid(format!("column override `{pair}` is not key=column")))?;
            let slot = match key.trim() {
                "relation" => &mut self.relation,
                "head_index" | "x_index" => &mut self.head_index,
                "head_id" | "x_id" => &mut self.head_id,
                "head_type" | "x_type" => &mut self.head_type,
                "head_name" | "x_name" => &mut self.head_name,
                "head_source" | "x_source" => &mut self.head_source,
                "tail_index" | "y_index" => &mut self.tail_index,
                "tail_id" | "y_id" => &mut self.tail_id,
                "tail_type" | "y_type" => &mut self.tail_type,
                "tail_name" | "y_name" => &mut self.tail_name,
                "tail_source" | "y_source" => &mut self.tail_source,
                other => return Err(QkgError::Invalid(format!("unknown column key `{other}`"))),
            };
            *slot = col.trim().to_string();
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub columns: ColumnMap,
    /// When set, relations outside this set are rejected.
    pub relation_vocab: Option<BTreeSet<String>>,
    /// Collapse `(t, r, h)` onto an existing `(h, r, t)`.
    pub collapse_reverse: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub triplets: usize,
    pub duplicates: usize,
    pub entities: usize,
}

pub fn load_graph(path: &Path, format: GraphFormat, options: &LoadOptions) -> Result<(GraphStore, LoadReport)> {
    let file = File::open(path).map_err(|e| QkgError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut builder = GraphBuilder::new().collapse_reverse(options.collapse_reverse);
    let rows = match format {
        GraphFormat::Csv => read_csv(reader, options, &mut builder)?,
        GraphFormat::Jsonl => read_jsonl(reader, options, &mut builder)?,
    };
    let duplicates = builder.duplicates();
    let store = builder.build()?;
    let report = LoadReport {
        rows,
        triplets: store.num_triplets(),
        duplicates,
        entities: store.num_entities(),
    };
    log::info!(
        "loaded {} rows from {}: {} triplets ({} duplicates collapsed), {} entities",
        report.rows,
        path.display(),
        report.triplets,
        report.duplicates,
        report.entities
    );
    Ok((store, report))
}

fn check_relation(options: &LoadOptions, relation: &str, row: usize) -> Result<()> {
    if relation.is_empty() {
        return Err(QkgError::MalformedRow {
            row,
            message: "empty relation".into(),
        });
    }
    match &options.relation_vocab {
        Some(vocab) if !vocab.contains(relation) => Err(QkgError::UnknownRelation(relation.to_string())),
        _ => Ok(()),
    }
}

fn read_csv<R: std::io::Read>(reader: R, options: &LoadOptions, builder: &mut GraphBuilder) -> Result<usize> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        find(name).ok_or_else(|| QkgError::MalformedRow {
            row: 1,
            message: format!("missing required column `{name}`"),
        })
    };
    let c = &options.columns;
    let rel = need(&c.relation)?;
    let head = [
        need(&c.head_index)?,
        need(&c.head_id)?,
        need(&c.head_type)?,
        need(&c.head_name)?,
    ];
    let tail = [
        need(&c.tail_index)?,
        need(&c.tail_id)?,
        need(&c.tail_type)?,
        need(&c.tail_name)?,
    ];
    let head_src = find(&c.head_source);
    let tail_src = find(&c.tail_source);

    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            QkgError::MalformedRow {
                row,
                message: e.to_string(),
            }
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(rows + 2);
        rows += 1;
        let entity = |cols: &[usize; 4], src: Option<usize>| -> Result<EntityRecord> {
            let index = record[cols[0]]
                .trim()
                .parse::<u64>()
                .map_err(|_| QkgError::MalformedRow {
                    row,
                    message: format!("entity index `{}` is not an integer", &record[cols[0]]),
                })?;
            let entity_type = record[cols[2]]
                .parse::<EntityType>()
                .map_err(|e| QkgError::MalformedRow {
                    row,
                    message: e.to_string(),
                })?;
            Ok(EntityRecord {
                index,
                source_id: record[cols[1]].to_string(),
                source_vocab: src.map(|i| record[i].to_string()).unwrap_or_default(),
                entity_type,
                name: record[cols[3]].to_string(),
            })
        };
        let h = entity(&head, head_src)?;
        let t = entity(&tail, tail_src)?;
        let relation = &record[rel];
        check_relation(options, relation, row)?;
        let (hi, ti) = (h.index, t.index);
        builder.add_entity(h).map_err(|e| with_row(e, row))?;
        builder.add_entity(t).map_err(|e| with_row(e, row))?;
        builder.add_triplet(hi, relation, ti);
    }
    Ok(rows)
}

fn with_row(err: QkgError, row: usize) -> QkgError {
    match err {
        QkgError::ConflictingEntity { index } => QkgError::MalformedRow {
            row,
            message: format!("entity index {index} redefined with different fields"),
        },
        other => other,
    }
}

fn read_jsonl<R: BufRead>(reader: R, options: &LoadOptions, builder: &mut GraphBuilder) -> Result<usize> {
    let mut rows = 0;
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| QkgError::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let value: Value = serde_json::from_str(&line).map_err(|e| QkgError::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let malformed = |message: &str| QkgError::MalformedRow {
            row,
            message: message.to_string(),
        };
        if let Some(entity) = value.get("entity") {
            let record: EntityRecord = serde_json::from_value(entity.clone()).map_err(|e| malformed(&e.to_string()))?;
            builder.add_entity(record).map_err(|e| with_row(e, row))?;
            continue;
        }
        let relation = value
            .get("relation")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("missing string field `relation`"))?;
        check_relation(options, relation, row)?;
        let mut endpoint = |key: &str| -> Result<u64> {
            match value.get(key) {
                Some(Value::Number(n)) => n
                    .as_u64()
                    .ok_or_else(|| malformed(&format!("`{key}` is not a non-negative integer"))),
                Some(obj @ Value::Object(_)) => {
                    let record: EntityRecord =
                        serde_json::from_value(obj.clone()).map_err(|e| malformed(&format!("`{key}`: {e}")))?;
                    let index = record.index;
                    builder.add_entity(record).map_err(|e| with_row(e, row))?;
                    Ok(index)
                }
                _ => Err(malformed(&format!("missing field `{key}`"))),
            }
        };
        let h = endpoint("head")?;
        let t = endpoint("tail")?;
        builder.add_triplet(h, relation, t);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const HEADER: &str =
        "relation,display_relation,x_index,x_id,x_type,x_name,x_source,y_index,y_id,y_type,y_name,y_source";

    fn write(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_duplicate_row_collapses() {
        let f = write(
            &format!(
                "{HEADER}\n\
                 indication,indication,1,DB1,drug,Metformin,DrugBank,2,5015,disease,diabetes mellitus,MONDO\n\
                 indication,indication,1,DB1,drug,Metformin,DrugBank,2,5015,disease,diabetes mellitus,MONDO\n\
                 contraindication,contraindication,3,DB2,drug,Alteplase,DrugBank,2,5015,disease,diabetes mellitus,MONDO\n"
            ),
            ".csv",
        );
        let (store, report) = load_graph(f.path(), GraphFormat::Csv, &LoadOptions::default()).unwrap();
        assert_eq!(store.num_triplets(), 2);
        assert_eq!(report.rows, 3);
        assert_eq!(report.duplicates, 1);
        assert_eq!(store.entity(1).unwrap().source_vocab, "DrugBank");
    }

    #[test]
    fn csv_bad_index_reports_row() {
        let f = write(
            &format!(
                "{HEADER}\n\
                 indication,indication,1,DB1,drug,Metformin,DrugBank,2,5015,disease,dm,MONDO\n\
                 indication,indication,x,DB1,drug,Metformin,DrugBank,2,5015,disease,dm,MONDO\n"
            ),
            ".csv",
        );
        match load_graph(f.path(), GraphFormat::Csv, &LoadOptions::default()) {
            Err(QkgError::MalformedRow { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_missing_column() {
        let f = write("relation,x_index\nfoo,1\n", ".csv");
        assert!(matches!(
            load_graph(f.path(), GraphFormat::Csv, &LoadOptions::default()),
            Err(QkgError::MalformedRow { row: 1, .. })
        ));
    }

    #[test]
    fn csv_custom_columns() {
        let f = write(
            "rel,hi,hid,ht,hn,ti,tid,tt,tn\nindication,1,DB1,drug,Metformin,2,5015,disease,dm\n",
            ".csv",
        );
        let columns = ColumnMap::default()
            .with_overrides([
                "relation=rel",
                "head_index=hi",
                "head_id=hid",
                "head_type=ht",
                "head_name=hn",
                "tail_index=ti",
                "tail_id=tid",
                "tail_type=tt",
                "tail_name=tn",
            ])
            .unwrap();
        let opts = LoadOptions {
            columns,
            ..Default::default()
        };
        let (store, _) = load_graph(f.path(), GraphFormat::Csv, &opts).unwrap();
        assert_eq!(store.num_triplets(), 1);
    }

    #[test]
    fn relation_vocab_enforced() {
        let f = write(
            &format!("{HEADER}\nfoo,foo,1,DB1,drug,M,DrugBank,2,5015,disease,dm,MONDO\n"),
            ".csv",
        );
        let opts = LoadOptions {
            relation_vocab: Some(["indication".to_string()].into_iter().collect()),
            ..Default::default()
        };
        assert!(matches!(
            load_graph(f.path(), GraphFormat::Csv, &opts),
            Err(QkgError::UnknownRelation(_))
        ));
    }

    #[test]
    fn jsonl_dangling_index_named() {
        let f = write(
            "{\"entity\":{\"index\":1,\"source_id\":\"A\",\"entity_type\":\"drug\",\"name\":\"a\"}}\n\
             {\"head\":1,\"relation\":\"r\",\"tail\":99}\n",
            ".jsonl",
        );
        assert!(matches!(
            load_graph(f.path(), GraphFormat::Jsonl, &LoadOptions::default()),
            Err(QkgError::DanglingEntity(99))
        ));
    }

    #[test]
    fn jsonl_bad_line_reports_row() {
        let f = write(
            "{\"entity\":{\"index\":1,\"source_id\":\"A\",\"entity_type\":\"drug\",\"name\":\"a\"}}\nnot json\n",
            ".jsonl",
        );
        assert!(matches!(
            load_graph(f.path(), GraphFormat::Jsonl, &LoadOptions::default()),
            Err(QkgError::MalformedRow { row: 2, .. })
        ));
    }
}
