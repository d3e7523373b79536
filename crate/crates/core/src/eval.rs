//! Execution accuracy (EX), test-suite accuracy (TS), valid efficiency score
//! (VES) and per-trait breakdowns.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset;
use crate::executor::{self, classify_sql, SqlTraits};
use crate::model::{ExecutionResponse, QuestionSample};
use crate::pipeline::PipelineResult;

/// Smallest duration used as a VES divisor.
pub const TIMER_TICK_SECS: f64 = 1e-9;
pub const DEFAULT_VES_REPEATS: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("results and dataset disagree; results without samples: {unknown:?}; samples without results: {missing:?}")]
    Orphans {
        unknown: Vec<String>,
        missing: Vec<String>,
    },
    #[error("reading variants in {path}: {source}")]
    Variants {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub db_id: String,
    pub gold_sql: String,
    pub pred_sql: Option<String>,
    pub gold_response: ExecutionResponse,
    pub pred_response: ExecutionResponse,
    /// Median seconds, present only when the gold query executed ok and
    /// timing was requested.
    pub gold_duration: Option<f64>,
    pub pred_duration: Option<f64>,
    /// Traits of the gold query.
    pub traits: SqlTraits,
    pub difficulty: Option<String>,
}

impl EvalRecord {
    pub fn ex_match(&self) -> bool {
        executor::matches_gold(&self.gold_sql, &self.gold_response, &self.pred_response)
    }
}

/// Joins results with the dataset and executes gold and predicted SQL.
/// Samples without gold SQL are skipped.
pub fn build_records(
    samples: &[QuestionSample],
    results: &[PipelineResult],
    db_root: &Path,
    timeout_secs: f64,
) -> Result<Vec<EvalRecord>, EvalError> {
    let by_id: HashMap<&str, &PipelineResult> =
        results.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let sample_ids: HashMap<&str, ()> = samples.iter().map(|s| (s.id.as_str(), ())).collect();
    let unknown: Vec<String> = results
        .iter()
        .filter(|r| !sample_ids.contains_key(r.sample_id.as_str()))
        .map(|r| r.sample_id.clone())
        .collect();
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| !by_id.contains_key(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    if !unknown.is_empty() || !missing.is_empty() {
        return Err(EvalError::Orphans { unknown, missing });
    }

    let run = |db: &Path, sql: &str| {
        executor::execute_sql(db, sql, timeout_secs)
            .unwrap_or_else(|e| ExecutionResponse::syntax_error(e.to_string(), 0.0))
    };
    Ok(samples
        .iter()
        .filter_map(|s| {
            let gold_sql = s.gold_sql.clone()?;
            let res = by_id[s.id.as_str()];
            let db = dataset::database_path(db_root, &s.db_id);
            let gold_response = run(&db, &gold_sql);
            let pred_response = match &res.final_sql {
                Some(sql) => run(&db, sql),
                None => ExecutionResponse::syntax_error("no prediction", 0.0),
            };
            Some(EvalRecord {
                sample_id: s.id.clone(),
                db_id: s.db_id.clone(),
                traits: classify_sql(&gold_sql),
                gold_sql,
                pred_sql: res.final_sql.clone(),
                gold_response,
                pred_response,
                gold_duration: None,
                pred_duration: None,
                difficulty: s.difficulty.clone(),
            })
        })
        .collect())
}

fn percent(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

/// EX in percent; `None` for an empty input.
pub fn execution_accuracy(records: &[EvalRecord]) -> Option<f64> {
    percent(
        records.iter().filter(|r| r.ex_match()).count(),
        records.len(),
    )
}

/// Variant databases for one database id: every `.sqlite` file under
/// `<dir>/<db_id>/`, sorted by name.
pub fn discover_variants(dir: &Path, db_id: &str) -> Result<Vec<PathBuf>, EvalError> {
    let sub = dir.join(db_id);
    let entries = match std::fs::read_dir(&sub) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(EvalError::Variants { path: sub, source }),
    };
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|source| EvalError::Variants {
            path: sub.clone(),
            source,
        })?;
        let path = path.path();
        if path.extension().is_some_and(|e| e == "sqlite") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TsReport {
    pub ts: Option<f64>,
    pub passed: usize,
    pub total: usize,
    /// Samples whose gold query fails on some variant.
    pub excluded: Vec<String>,
    /// Samples failed because a listed variant is missing or none was given.
    pub missing_variants: Vec<String>,
}

/// TS in percent. A sample passes when its prediction matches gold on every
/// variant. Samples whose gold fails on a variant are left out of the
/// denominator; samples with no variant or a missing variant file fail.
pub fn test_suite_accuracy(
    records: &[EvalRecord],
    variants: &BTreeMap<String, Vec<PathBuf>>,
    timeout_secs: f64,
) -> TsReport {
    let mut report = TsReport::default();
    for r in records {
        let paths = variants
            .get(&r.sample_id)
            .map(Vec::as_slice)
            .unwrap_or_default();
        if paths.is_empty() || paths.iter().any(|p| !p.is_file()) {
            log::warn!("sample {}: variant database missing", r.sample_id);
            report.missing_variants.push(r.sample_id.clone());
            report.total += 1;
            continue;
        }
        let mut pass = true;
        let mut excluded = false;
        for path in paths {
            let gold = executor::execute_sql(path, &r.gold_sql, timeout_secs)
                .unwrap_or_else(|e| ExecutionResponse::syntax_error(e.to_string(), 0.0));
            if !gold.is_ok() {
                log::warn!(
                    "sample {}: gold fails on {}; excluded",
                    r.sample_id,
                    path.display()
                );
                excluded = true;
                break;
            }
            let pred = match &r.pred_sql {
                Some(sql) => executor::execute_sql(path, sql, timeout_secs)
                    .unwrap_or_else(|e| ExecutionResponse::syntax_error(e.to_string(), 0.0)),
                None => ExecutionResponse::syntax_error("no prediction", 0.0),
            };
            if !executor::matches_gold(&r.gold_sql, &gold, &pred) {
                pass = false;
            }
        }
        if excluded {
            report.excluded.push(r.sample_id.clone());
            continue;
        }
        report.total += 1;
        report.passed += usize::from(pass);
    }
    report.ts = percent(report.passed, report.total);
    report
}

/// Times every query that executed ok with the median of `repeats` runs.
/// Runs are sequential.
pub fn measure_durations(
    records: &mut [EvalRecord],
    db_root: &Path,
    repeats: usize,
    timeout_secs: f64,
) {
    for r in records.iter_mut() {
        let db = dataset::database_path(db_root, &r.db_id);
        r.gold_duration = if r.gold_response.is_ok() {
            executor::time_execution(&db, &r.gold_sql, repeats, timeout_secs).ok()
        } else {
            None
        };
        r.pred_duration = match (&r.pred_sql, r.pred_response.is_ok()) {
            (Some(sql), true) => executor::time_execution(&db, sql, repeats, timeout_secs).ok(),
            _ => None,
        };
    }
}

/// Per-sample VES term: `t_gold / t_pred` for EX matches, 0 otherwise.
pub fn ves_ratio(r: &EvalRecord) -> f64 {
    if !r.ex_match() {
        return 0.0;
    }
    match (r.gold_duration, r.pred_duration) {
        (Some(g), Some(p)) => g.max(TIMER_TICK_SECS) / p.max(TIMER_TICK_SECS),
        _ => 0.0,
    }
}

/// VES in percent over records with measured durations.
pub fn valid_efficiency_score(records: &[EvalRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    Some(100.0 * records.iter().map(ves_ratio).sum::<f64>() / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub axis: String,
    pub bucket: String,
    pub total: usize,
    pub matched: usize,
    pub ex: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport {
    pub overall: Option<f64>,
    pub rows: Vec<BucketRow>,
}

impl BreakdownReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("axis\tbucket\ttotal\tmatched\tex\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.2}",
                r.axis, r.bucket, r.total, r.matched, r.ex
            );
        }
        out
    }
}

fn connector_bucket(n: u32) -> &'static str {
    match n {
        0 => "0",
        1 => "1",
        2 => "2",
        _ => "3+",
    }
}

/// EX per bucket along the join, subquery, order-by, connector and
/// difficulty axes. Records without a difficulty label are left out of that
/// axis only.
pub fn breakdown_report(records: &[EvalRecord]) -> BreakdownReport {
    type Key = (&'static str, String);
    let mut buckets: BTreeMap<(usize, Key), (usize, usize)> = BTreeMap::new();
    let yes_no = |flag: bool, yes: &str, no: &str| {
        if flag {
            yes.to_string()
        } else {
            no.to_string()
        }
    };
    for r in records {
        let t = &r.traits;
        let mut keys: Vec<Key> = vec![
            ("join", yes_no(t.has_join, "join", "no_join")),
            (
                "subquery",
                yes_no(t.has_subquery, "subquery", "no_subquery"),
            ),
            (
                "order_by",
                yes_no(t.has_order_by_outer, "order_by", "no_order_by"),
            ),
            (
                "connectors",
                connector_bucket(t.logical_connectors).to_string(),
            ),
        ];
        if let Some(d) = &r.difficulty {
            keys.push(("difficulty", d.clone()));
        }
        let hit = usize::from(r.ex_match());
        for (rank, key) in keys.into_iter().enumerate() {
            let e = buckets.entry((rank, key)).or_default();
            e.0 += 1;
            e.1 += hit;
        }
    }
    BreakdownReport {
        overall: execution_accuracy(records),
        rows: buckets
            .into_iter()
            .map(|((_, (axis, bucket)), (total, matched))| BucketRow {
                axis: axis.to_string(),
                bucket,
                total,
                matched,
                ex: 100.0 * matched as f64 / total as f64,
            })
            .collect(),
    }
}
