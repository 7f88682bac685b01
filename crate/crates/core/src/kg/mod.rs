//! In-memory triplet store.
//!
//! A [`GraphStore`] is built once by an importer and is read-only afterwards,
//! so it can be shared across threads behind a plain reference or `Arc`.

mod import;
mod search;
mod store;
mod types;

pub use import::{load_graph, ColumnMap, GraphFormat, LoadOptions, LoadReport};
pub use search::normalize_name;
pub use store::{GraphBuilder, GraphStore};
pub use types::{EntityIndex, EntityRecord, EntityType, TripletId, TripletRecord};
