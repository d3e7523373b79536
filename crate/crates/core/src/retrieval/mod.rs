//! Schema insight: BM25 value matching plus schema ranking and pruning.

mod bm25;
mod ranking;
mod tokenize;

pub use bm25::{
    bm25_score, match_values, score_column, CorpusStats, DEFAULT_B, DEFAULT_K1, DEFAULT_TOP_K,
};
pub use ranking::{
    filter_schema, rank_elements, LexicalRanker, PrecomputedRanker, RankerBudget, SchemaRanker,
    SchemaScores,
};
pub use tokenize::tokenize;
