//! Interaction logs: schema, ingestion, splits, negatives, synthetic data and
//! search-history filtering.

mod filter;
mod io;
mod negatives;
mod schema;
mod split;
mod synth;

pub use filter::{cosine_filter_analysis, filter_instances, filter_search_events, keeps, EventEmbedding, FilterStats};
pub use io::{
    ingest_text_log, load_log, meta_path, read_catalog, render_log, write_catalog, write_log, Dataset, Vocabulary,
    LOG_FORMAT,
};
pub use negatives::sample_negatives;
pub use schema::{Catalog, Instance, ItemId, RecEvent, SearchEvent, UserHistory, UserId, Window, WordId, UNKNOWN_WORD};
pub use split::{chronological_split, instance_for, leave_one_out_split, SplitOptions, Splits};
pub use synth::{generate_synthetic, SynthConfig, SyntheticData};
