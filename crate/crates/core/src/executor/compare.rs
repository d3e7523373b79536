use std::cmp::Ordering;

use crate::model::{ExecutionResponse, Row, Scalar};

use super::traits::classify_sql;

/// Relative tolerance used when comparing reals.
pub const REAL_TOLERANCE: f64 = 1e-6;

fn numeric(s: &Scalar) -> Option<f64> {
    match s {
        Scalar::Integer(i) => Some(*i as f64),
        Scalar::Real(r) => Some(*r),
        _ => None,
    }
}

/// Scalar equality: exact for everything except pairs involving a real,
/// which compare with `|x-y| <= 1e-6 * max(1, |x|, |y|)`.
pub fn scalars_match(a: &Scalar, b: &Scalar) -> bool {
    match (a, b) {
        (Scalar::Integer(x), Scalar::Integer(y)) => x == y,
        (Scalar::Real(_), _) | (_, Scalar::Real(_)) => match (numeric(a), numeric(b)) {
            (Some(x), Some(y)) => (x - y).abs() <= REAL_TOLERANCE * 1f64.max(x.abs()).max(y.abs()),
            _ => false,
        },
        _ => a == b,
    }
}

fn rows_match(a: &Row, b: &Row) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| scalars_match(x, y))
}

fn rank(s: &Scalar) -> u8 {
    match s {
        Scalar::Null => 0,
        Scalar::Integer(_) | Scalar::Real(_) => 1,
        Scalar::Text(_) => 2,
        Scalar::Blob(_) => 3,
    }
}

fn cmp_scalar(a: &Scalar, b: &Scalar) -> Ordering {
    rank(a).cmp(&rank(b)).then_with(|| match (a, b) {
        (Scalar::Text(x), Scalar::Text(y)) | (Scalar::Blob(x), Scalar::Blob(y)) => x.cmp(y),
        _ => match (numeric(a), numeric(b)) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            _ => Ordering::Equal,
        },
    })
}

fn cmp_row(a: &Row, b: &Row) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = cmp_scalar(x, y);
        if o != Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Kuhn's augmenting-path matching; true when every row of `a` can be paired
/// with a distinct matching row of `b`.
fn perfect_matching(a: &[Row], b: &[Row]) -> bool {
    fn augment(
        u: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let adj: Vec<Vec<usize>> = a
        .iter()
        .map(|ra| (0..b.len()).filter(|&j| rows_match(ra, &b[j])).collect())
        .collect();
    let mut owner = vec![None; b.len()];
    (0..a.len()).all(|u| {
        let mut seen = vec![false; b.len()];
        augment(u, &adj, &mut seen, &mut owner)
    })
}

const MATCHING_LIMIT: usize = 4096;

fn multiset_match(a: &[Row], b: &[Row]) -> bool {
    let mut sa: Vec<&Row> = a.iter().collect();
    let mut sb: Vec<&Row> = b.iter().collect();
    sa.sort_by(|x, y| cmp_row(x, y));
    sb.sort_by(|x, y| cmp_row(x, y));
    if sa.iter().zip(&sb).all(|(x, y)| rows_match(x, y)) {
        return true;
    }
    let has_real = a
        .iter()
        .chain(b)
        .flatten()
        .any(|s| matches!(s, Scalar::Real(_)));
    // Tolerance can reorder near-equal reals relative to sorting; fall back
    // to an exact bipartite check for those.
    has_real && a.len() <= MATCHING_LIMIT && perfect_matching(a, b)
}

/// Execution-equivalence of two responses. Both must be `ok`, have the same
/// row count and column arity, and equal rows either as sequences or as
/// multisets.
pub fn responses_match(
    a: &ExecutionResponse,
    b: &ExecutionResponse,
    order_sensitive: bool,
) -> bool {
    let (Some(ta), Some(tb)) = (a.rows(), b.rows()) else {
        return false;
    };
    if ta.rows.len() != tb.rows.len() {
        return false;
    }
    if ta.rows.is_empty() {
        return true;
    }
    let arity = ta.rows[0].len();
    if ta.rows.iter().chain(&tb.rows).any(|r| r.len() != arity) {
        return false;
    }
    if order_sensitive {
        ta.rows.iter().zip(&tb.rows).all(|(x, y)| rows_match(x, y))
    } else {
        multiset_match(&ta.rows, &tb.rows)
    }
}

/// Order sensitivity is taken from the gold query: sequences are compared
/// only when it has an outer `ORDER BY`.
pub fn gold_order_sensitive(gold_sql: &str) -> bool {
    classify_sql(gold_sql).has_order_by_outer
}

/// [`responses_match`] under the gold-driven order rule.
pub fn matches_gold(gold_sql: &str, gold: &ExecutionResponse, pred: &ExecutionResponse) -> bool {
    responses_match(gold, pred, gold_order_sensitive(gold_sql))
}
