//! Sandboxed SQL execution, result comparison and lexical trait recognition.

mod compare;
mod run;
mod traits;

pub use compare::{
    gold_order_sensitive, matches_gold, responses_match, scalars_match, REAL_TOLERANCE,
};
pub(crate) use run::normalize;
pub use run::{execute_sql, open_read_only, time_execution, ExecError, DEFAULT_TIMEOUT_SECS};
pub use traits::{classify_sql, SqlTraits};
