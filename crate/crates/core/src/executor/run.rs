use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode, OpenFlags};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ExecOutcome, ExecutionResponse, Row, Scalar};

/// Default per-query wall-clock limit in seconds.
pub const DEFAULT_TIMEOUT_SECS: f64 = 30.0;

/// VM instructions between deadline checks.
const PROGRESS_OPS: i32 = 1000;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("database file not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot open database {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
    #[error("timeout must be positive, got {0}")]
    BadTimeout(f64),
    #[error("timing run {run} did not succeed: {outcome}")]
    TimingFailed { run: usize, outcome: String },
    #[error("repeats must be at least 1")]
    NoRepeats,
}

/// Opens `path` read-only. A missing file is reported as [`ExecError::NotFound`].
pub fn open_read_only(path: &Path) -> Result<Connection, ExecError> {
    if !path.is_file() {
        return Err(ExecError::NotFound(path.to_path_buf()));
    }
    Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY
            | OpenFlags::SQLITE_OPEN_NO_MUTEX
            | OpenFlags::SQLITE_OPEN_URI,
    )
    .map_err(|source| ExecError::Open {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn normalize(v: ValueRef<'_>) -> Scalar {
    match v {
        ValueRef::Null => Scalar::Null,
        ValueRef::Integer(i) => Scalar::Integer(i),
        ValueRef::Real(r) if r.is_nan() => Scalar::Null,
        ValueRef::Real(r) if r.is_infinite() => {
            Scalar::Text(if r > 0.0 { "Inf" } else { "-Inf" }.into())
        }
        ValueRef::Real(r) => Scalar::Real(r),
        ValueRef::Text(t) => Scalar::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Scalar::Blob(hex::encode(Sha256::digest(b))),
    }
}

fn is_interrupt(e: &rusqlite::Error) -> bool {
    matches!(e, rusqlite::Error::SqliteFailure(f, _) if f.code == ErrorCode::OperationInterrupted)
}

fn run_query(conn: &Connection, sql: &str) -> Result<Vec<Row>, rusqlite::Error> {
    let mut stmt = conn.prepare(sql)?;
    if !stmt.readonly() {
        return Err(rusqlite::Error::InvalidQuery);
    }
    let width = stmt.column_count();
    let mut rows = stmt.query([])?;
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        let mut r = Vec::with_capacity(width);
        for i in 0..width {
            r.push(normalize(row.get_ref(i)?));
        }
        out.push(r);
    }
    Ok(out)
}

/// Runs one statement on a fresh read-only connection.
///
/// Engine errors become `syntax_error` responses and an exceeded deadline
/// interrupts the engine and yields `timeout`. Only setup problems (missing
/// or unopenable file, bad timeout) are returned as `Err`.
pub fn execute_sql(
    db_path: &Path,
    sql: &str,
    timeout_secs: f64,
) -> Result<ExecutionResponse, ExecError> {
    if !(timeout_secs > 0.0 && timeout_secs.is_finite()) {
        return Err(ExecError::BadTimeout(timeout_secs));
    }
    let conn = open_read_only(db_path)?;
    let start = Instant::now();
    let deadline = start + Duration::from_secs_f64(timeout_secs);
    conn.progress_handler(PROGRESS_OPS, Some(move || Instant::now() >= deadline));

    let result = run_query(&conn, sql);
    let duration = start.elapsed().as_secs_f64();
    Ok(match result {
        Ok(rows) => ExecutionResponse::ok(rows, duration),
        Err(e) if is_interrupt(&e) => ExecutionResponse::timeout(duration),
        Err(rusqlite::Error::InvalidQuery) => {
            ExecutionResponse::syntax_error("read-only", duration)
        }
        Err(e) => ExecutionResponse::syntax_error(e.to_string(), duration),
    })
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median wall-clock seconds over `repeats` sequential runs. Every run must
/// succeed.
pub fn time_execution(
    db_path: &Path,
    sql: &str,
    repeats: usize,
    timeout_secs: f64,
) -> Result<f64, ExecError> {
    if repeats == 0 {
        return Err(ExecError::NoRepeats);
    }
    let mut durations = Vec::with_capacity(repeats);
    for run in 0..repeats {
        let resp = execute_sql(db_path, sql, timeout_secs)?;
        if let ExecOutcome::Ok { .. } = resp.outcome {
            durations.push(resp.duration);
        } else {
            return Err(ExecError::TimingFailed {
                run,
                outcome: match resp.outcome {
                    ExecOutcome::SyntaxError { error_text } => error_text,
                    _ => "timeout".into(),
                },
            });
        }
    }
    Ok(median(&mut durations))
}
