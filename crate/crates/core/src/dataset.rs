//! Benchmark sample loading, database introspection and per-column value
//! catalogs.
//!
//! Sample files are JSON arrays in the BIRD/Spider shape. Field mapping:
//!
//! | record field                  | sample field  |
//! |-------------------------------|---------------|
//! | `question` (required)         | `question`    |
//! | `db_id` (required)            | `db_id`       |
//! | `evidence`                    | `evidence`    |
//! | `SQL`, else `query`           | `gold_sql`    |
//! | `difficulty`                  | `difficulty`  |
//! | `question_id`, else `id`      | `id` (defaults to the record index) |
//!
//! Empty `evidence` strings are treated as absent.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::executor::{normalize, open_read_only, ExecError};
use crate::model::{
    ColumnDef, ColumnRef, ForeignKey, QuestionSample, Scalar, SchemaSnapshot, TableDef,
};

/// Default cap on distinct values collected per column.
pub const DEFAULT_CATALOG_CAP: usize = 2000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sample file is not a JSON array: {0}")]
    NotAnArray(String),
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("record {index}: missing required field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("introspection of {path} failed: {source}")]
    Introspect {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
}

/// `<root>/<db_id>/<db_id>.sqlite`
pub fn database_path(root: &Path, db_id: &str) -> PathBuf {
    root.join(db_id).join(format!("{db_id}.sqlite"))
}

fn opt_str(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    index: usize,
) -> Result<Option<String>, DatasetError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(DatasetError::Record {
            index,
            message: format!("field `{key}` must be a string, got {other}"),
        }),
    }
}

fn parse_record(index: usize, value: &Value) -> Result<QuestionSample, DatasetError> {
    let obj = value.as_object().ok_or_else(|| DatasetError::Record {
        index,
        message: "not a JSON object".into(),
    })?;
    let question = opt_str(obj, "question", index)?
        .filter(|q| !q.trim().is_empty())
        .ok_or(DatasetError::MissingField {
            index,
            field: "question",
        })?;
    let db_id = opt_str(obj, "db_id", index)?
        .filter(|d| !d.is_empty())
        .ok_or(DatasetError::MissingField {
            index,
            field: "db_id",
        })?;
    let gold_sql = match opt_str(obj, "SQL", index)? {
        Some(s) => Some(s),
        None => opt_str(obj, "query", index)?,
    };
    let id = match opt_str(obj, "question_id", index)? {
        Some(id) => id,
        None => opt_str(obj, "id", index)?.unwrap_or_else(|| index.to_string()),
    };
    Ok(QuestionSample {
        id,
        question,
        db_id,
        evidence: opt_str(obj, "evidence", index)?.filter(|e| !e.trim().is_empty()),
        gold_sql,
        difficulty: opt_str(obj, "difficulty", index)?,
    })
}

pub fn parse_samples(text: &str) -> Result<Vec<QuestionSample>, DatasetError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| DatasetError::NotAnArray(e.to_string()))?;
    let Value::Array(records) = value else {
        return Err(DatasetError::NotAnArray(
            "top-level value is not an array".into(),
        ));
    };
    records
        .iter()
        .enumerate()
        .map(|(i, r)| parse_record(i, r))
        .collect()
}

pub fn load_samples(path: &Path) -> Result<Vec<QuestionSample>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_samples(&text)
}

fn introspect_conn(conn: &Connection) -> rusqlite::Result<SchemaSnapshot> {
    let mut stmt = conn.prepare(
        "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid",
    )?;
    let names: Vec<String> = stmt
        .query_map([], |r| r.get(0))?
        .collect::<Result<_, _>>()?;

    let mut tables = Vec::with_capacity(names.len());
    for name in &names {
        let mut info =
            conn.prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")?;
        let columns: Vec<ColumnDef> = info
            .query_map([name], |r| {
                Ok(ColumnDef {
                    name: r.get(0)?,
                    declared_type: r.get::<_, Option<String>>(1)?.unwrap_or_default(),
                    is_primary_key: r.get::<_, i64>(2)? > 0,
                })
            })?
            .collect::<Result<_, _>>()?;
        if columns.is_empty() {
            continue;
        }
        tables.push(TableDef {
            name: name.clone(),
            columns,
        });
    }

    let mut snapshot = SchemaSnapshot {
        tables,
        foreign_keys: Vec::new(),
    };
    let mut fks = Vec::new();
    for table in &snapshot.tables {
        let mut stmt = conn.prepare(
            r#"SELECT "table", "from", "to" FROM pragma_foreign_key_list(?1) ORDER BY id, seq"#,
        )?;
        let rows: Vec<(String, String, Option<String>)> = stmt
            .query_map([&table.name], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?
            .collect::<Result<_, _>>()?;
        for (parent, from, to) in rows {
            let Some(parent_def) = snapshot.table(&parent) else {
                log::warn!(
                    "skipping foreign key {}.{from} -> missing table {parent}",
                    table.name
                );
                continue;
            };
            // A missing target column refers to the parent's primary key.
            let to_col = match to {
                Some(c) => parent_def.column(&c).map(|c| c.name.clone()),
                None => parent_def
                    .columns
                    .iter()
                    .find(|c| c.is_primary_key)
                    .map(|c| c.name.clone()),
            };
            let (Some(from_col), Some(to_col)) =
                (table.column(&from).map(|c| c.name.clone()), to_col)
            else {
                log::warn!(
                    "skipping foreign key {}.{from} -> {parent}: unknown column",
                    table.name
                );
                continue;
            };
            let fk = ForeignKey {
                from: ColumnRef::new(table.name.clone(), from_col),
                to: ColumnRef::new(parent_def.name.clone(), to_col),
            };
            if !fks.contains(&fk) {
                fks.push(fk);
            }
        }
    }
    snapshot.foreign_keys = fks;
    Ok(snapshot)
}

/// Reads tables (storage order), columns and foreign keys from the database's
/// own metadata. Foreign keys whose endpoints cannot be resolved are skipped.
pub fn introspect_schema(db_path: &Path) -> Result<SchemaSnapshot, DatasetError> {
    let conn = open_read_only(db_path)?;
    introspect_conn(&conn).map_err(|source| DatasetError::Introspect {
        path: db_path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Integer,
    Real,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CatalogValue {
    pub text: String,
    pub kind: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnCatalog {
    pub column: ColumnRef,
    pub values: Vec<CatalogValue>,
    /// False when the cap was reached before the column was exhausted.
    pub sampled_complete: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueCatalog {
    pub columns: Vec<ColumnCatalog>,
}

impl ValueCatalog {
    pub fn column(&self, col: &ColumnRef) -> Option<&ColumnCatalog> {
        self.columns.iter().find(|c| &c.column == col)
    }

    pub fn sampled_complete(&self) -> bool {
        self.columns.iter().all(|c| c.sampled_complete)
    }
}

fn catalog_value(s: Scalar) -> Option<CatalogValue> {
    match s {
        Scalar::Integer(i) => Some(CatalogValue {
            text: i.to_string(),
            kind: ValueKind::Integer,
        }),
        // Display for f64 is the shortest representation that round-trips.
        Scalar::Real(r) => Some(CatalogValue {
            text: r.to_string(),
            kind: ValueKind::Real,
        }),
        Scalar::Text(t) => Some(CatalogValue {
            text: t,
            kind: ValueKind::Text,
        }),
        Scalar::Null | Scalar::Blob(_) => None,
    }
}

fn column_values(
    conn: &Connection,
    col: &ColumnRef,
    cap: usize,
) -> rusqlite::Result<(Vec<CatalogValue>, bool)> {
    let sql = format!(
        "SELECT src.{c} FROM {t} AS src WHERE src.{c} IS NOT NULL",
        c = sql_ident(&col.column),
        t = sql_ident(&col.table)
    );
    let mut stmt = conn.prepare(&sql)?;
    let mut rows = stmt.query([])?;
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    while let Some(row) = rows.next()? {
        let Some(v) = catalog_value(normalize(row.get_ref(0)?)) else {
            continue;
        };
        if seen.contains(&v) {
            continue;
        }
        if values.len() == cap {
            return Ok((values, false));
        }
        seen.insert(v.clone());
        values.push(v);
    }
    Ok((values, true))
}

/// Double-quoted SQL identifier.
pub fn sql_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Collects up to `cap` distinct non-null values per column in first-seen row
/// order. A column whose query fails gets an empty list and a warning.
pub fn build_value_catalog(
    db_path: &Path,
    snapshot: &SchemaSnapshot,
    cap: usize,
) -> Result<ValueCatalog, DatasetError> {
    let conn = open_read_only(db_path)?;
    let cap = cap.max(1);
    let mut columns = Vec::new();
    for table in &snapshot.tables {
        for col in &table.columns {
            let column = ColumnRef::new(table.name.clone(), col.name.clone());
            let (values, sampled_complete) = match column_values(&conn, &column, cap) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("value catalog for {column} failed: {e}");
                    (Vec::new(), true)
                }
            };
            columns.push(ColumnCatalog {
                column,
                values,
                sampled_complete,
            });
        }
    }
    Ok(ValueCatalog { columns })
}
