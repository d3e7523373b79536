//! End-to-end orchestration: schema insight, planning, validation, fixing
//! and selection for one sample, and benchmark runs over many.
//!
//! Results are written as JSONL, one [`PipelineResult`] per line in dataset
//! order. Wall-clock data never enters that file; it goes to a separate
//! timings file so reruns with deterministic backends are byte-identical.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{self, AgentContext, DEFAULT_SUBSET_SIZE};
use crate::backend::BackendHandle;
use crate::dataset::{self, DatasetError, ValueCatalog, DEFAULT_CATALOG_CAP};
use crate::executor::{self, DEFAULT_TIMEOUT_SECS};
use crate::model::{
    render_schema_prompt, ExecutionResponse, Feedback, FeedbackKind, Origin, QuestionSample,
    SchemaSnapshot, SqlCandidate,
};
use crate::retrieval::{self, LexicalRanker, RankerBudget, SchemaRanker, DEFAULT_TOP_K};

/// Version tag written into every results line.
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Candidates per question (one greedy, the rest sampled).
    pub candidates: usize,
    pub temperature: f64,
    /// Example values kept per column by value matching.
    pub top_k_values: usize,
    /// Tournament chunk size.
    pub subset_size: usize,
    pub budget: RankerBudget,
    pub timeout_secs: f64,
    pub catalog_cap: usize,
    /// Samples processed concurrently.
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            candidates: 10,
            temperature: 1.0,
            top_k_values: DEFAULT_TOP_K,
            subset_size: DEFAULT_SUBSET_SIZE,
            budget: RankerBudget::default(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            catalog_cap: DEFAULT_CATALOG_CAP,
            parallelism: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field: &str, why: &str| Err(PipelineError::Config(format!("{field} {why}")));
        if self.candidates == 0 {
            return bad("candidates", "must be at least 1");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be a finite non-negative number");
        }
        if self.top_k_values == 0 {
            return bad("top_k_values", "must be at least 1");
        }
        if self.subset_size < 2 {
            return bad("subset_size", "must be at least 2");
        }
        if self.budget.max_tables == 0 || self.budget.max_columns_per_table == 0 {
            return bad("budget", "entries must be at least 1");
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad("timeout_secs", "must be positive");
        }
        if self.parallelism == 0 {
            return bad("parallelism", "must be at least 1");
        }
        Ok(())
    }
}

/// One backend handle per agent role.
#[derive(Clone)]
pub struct Backends {
    pub planner: BackendHandle,
    pub validator: BackendHandle,
    pub fix: BackendHandle,
    pub selection: BackendHandle,
    /// Stronger assistant model used when building preference data.
    pub advanced: Option<BackendHandle>,
}

impl Backends {
    /// Every role served by the same handle.
    pub fn uniform(handle: BackendHandle) -> Self {
        Self {
            planner: handle.clone(),
            validator: handle.clone(),
            fix: handle.clone(),
            selection: handle,
            advanced: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaStats {
    pub tables_before: usize,
    pub columns_before: usize,
    pub tables_after: usize,
    pub columns_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedVersion {
    pub candidate: SqlCandidate,
    pub response: ExecutionResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate: SqlCandidate,
    pub response: ExecutionResponse,
    pub feedbacks: Vec<Feedback>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<FixedVersion>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

impl CandidateRecord {
    /// The fixed version when there is one, else the original.
    pub fn latest(&self) -> (&SqlCandidate, &ExecutionResponse) {
        match &self.fixed {
            Some(f) => (&f.candidate, &f.response),
            None => (&self.candidate, &self.response),
        }
    }

    pub fn needs_fix(&self) -> bool {
        self.feedbacks.iter().any(Feedback::indicates_error)
    }
}

/// Start and end offsets in seconds from the start of the sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSpan {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub schema_insight: StageSpan,
    pub planner: StageSpan,
    pub validator: StageSpan,
    pub fix: StageSpan,
    pub selection: StageSpan,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub version: u32,
    pub sample_id: String,
    pub db_id: String,
    pub schema: SchemaStats,
    pub candidates: Vec<CandidateRecord>,
    /// Candidate indices shown to selection after deduplication.
    pub selection_pool: Vec<usize>,
    pub selection_calls: usize,
    /// Index into `candidates`.
    pub selected: Option<usize>,
    /// Set when selection returned none (or failed) and the greedy candidate
    /// was used.
    pub fallback: bool,
    pub final_sql: Option<String>,
    pub final_response: Option<ExecutionResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ex_match: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl PipelineResult {
    fn empty(sample: &QuestionSample) -> Self {
        Self {
            version: RESULTS_SCHEMA_VERSION,
            sample_id: sample.id.clone(),
            db_id: sample.db_id.clone(),
            schema: SchemaStats::default(),
            candidates: Vec::new(),
            selection_pool: Vec::new(),
            selection_calls: 0,
            selected: None,
            fallback: false,
            final_sql: None,
            final_response: None,
            ex_match: sample.gold_sql.as_ref().map(|_| false),
            error: None,
            timings: StageTimings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub samples: usize,
    pub with_gold: usize,
    pub matched: usize,
    /// Percentage, absent when no sample has gold SQL.
    pub ex: Option<f64>,
    pub failures: usize,
}

impl BenchmarkSummary {
    pub fn from_results(results: &[PipelineResult]) -> Self {
        let with_gold = results.iter().filter(|r| r.ex_match.is_some()).count();
        let matched = results.iter().filter(|r| r.ex_match == Some(true)).count();
        Self {
            samples: results.len(),
            with_gold,
            matched,
            ex: (with_gold > 0).then(|| 100.0 * matched as f64 / with_gold as f64),
            failures: results.iter().filter(|r| r.error.is_some()).count(),
        }
    }

    pub fn ex_display(&self) -> String {
        match self.ex {
            Some(v) => format!("{v:.2}%"),
            None => "n/a".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub results: Vec<PipelineResult>,
    pub summary: BenchmarkSummary,
}

#[derive(Serialize)]
struct TimingLine<'a> {
    sample_id: &'a str,
    #[serde(flatten)]
    timings: &'a StageTimings,
}

type SchemaEntry = Arc<(SchemaSnapshot, ValueCatalog)>;

pub struct Pipeline {
    pub config: PipelineConfig,
    pub backends: Backends,
    pub db_root: PathBuf,
    ranker: Arc<dyn SchemaRanker>,
    schemas: Mutex<HashMap<String, SchemaEntry>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, backends: Backends, db_root: impl Into<PathBuf>) -> Self {
        Self {
            config,
            backends,
            db_root: db_root.into(),
            ranker: Arc::new(LexicalRanker),
            schemas: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_ranker(mut self, ranker: Arc<dyn SchemaRanker>) -> Self {
        self.ranker = ranker;
        self
    }

    pub fn db_path(&self, db_id: &str) -> PathBuf {
        dataset::database_path(&self.db_root, db_id)
    }

    /// Snapshot and value catalog for a database, built once per pipeline.
    pub fn schema_for(&self, db_id: &str) -> Result<SchemaEntry, DatasetError> {
        if let Some(hit) = self.schemas.lock().expect("schema cache").get(db_id) {
            return Ok(hit.clone());
        }
        let path = self.db_path(db_id);
        let snapshot = dataset::introspect_schema(&path)?;
        let catalog = dataset::build_value_catalog(&path, &snapshot, self.config.catalog_cap)?;
        let entry = Arc::new((snapshot, catalog));
        self.schemas
            .lock()
            .expect("schema cache")
            .insert(db_id.to_string(), entry.clone());
        Ok(entry)
    }

    /// Schema insight: value matching, ranking, filtering and prompt
    /// rendering. Returns the agent context and the before/after sizes.
    pub fn build_context(
        &self,
        sample: &QuestionSample,
    ) -> Result<(AgentContext, SchemaStats), PipelineError> {
        let entry = self.schema_for(&sample.db_id)?;
        let (snapshot, catalog) = (&entry.0, &entry.1);
        let matched = retrieval::match_values(&sample.question, catalog, self.config.top_k_values);
        let scores = self.ranker.rank(&sample.question, snapshot, &matched);
        let pruned = retrieval::filter_schema(snapshot, &scores, self.config.budget);
        let schema_prompt = render_schema_prompt(
            &pruned,
            &matched.restrict_to(&pruned),
            sample.evidence.as_deref(),
        )
        .map_err(|e| PipelineError::Config(e.to_string()))?;
        let stats = SchemaStats {
            tables_before: snapshot.tables.len(),
            columns_before: snapshot.column_count(),
            tables_after: pruned.tables.len(),
            columns_after: pruned.column_count(),
        };
        let ctx = AgentContext {
            sample: sample.clone(),
            schema_prompt,
            db_path: self.db_path(&sample.db_id),
        };
        Ok((ctx, stats))
    }

    fn execute(&self, db_path: &Path, sql: &str) -> ExecutionResponse {
        executor::execute_sql(db_path, sql, self.config.timeout_secs)
            .unwrap_or_else(|e| ExecutionResponse::syntax_error(e.to_string(), 0.0))
    }

    /// Runs one sample. Failures are recorded in the result, never raised.
    pub fn run_sample(&self, sample: &QuestionSample) -> PipelineResult {
        let clock = Instant::now();
        let at = || clock.elapsed().as_secs_f64();
        let mut result = PipelineResult::empty(sample);

        let t0 = at();
        let built = self.build_context(sample);
        result.timings.schema_insight = StageSpan {
            start: t0,
            end: at(),
        };
        let (ctx, stats) = match built {
            Ok(v) => v,
            Err(e) => {
                result.error = Some(e.to_string());
                result.timings.total = at();
                return result;
            }
        };
        result.schema = stats;

        let t0 = at();
        let planned = agents::plan_candidates(
            self.backends.planner.as_ref(),
            &ctx,
            self.config.candidates,
            self.config.temperature,
        );
        result.timings.planner = StageSpan {
            start: t0,
            end: at(),
        };
        let candidates = match planned {
            Ok(c) => c,
            Err(e) => {
                result.error = Some(format!("planner: {e}"));
                result.timings.total = at();
                return result;
            }
        };

        let t0 = at();
        let mut records: Vec<CandidateRecord> = candidates
            .into_par_iter()
            .map(|candidate| {
                let response = self.execute(&ctx.db_path, &candidate.sql);
                let mut feedbacks = Vec::with_capacity(2);
                let mut errors = Vec::new();
                for kind in [FeedbackKind::Selection, FeedbackKind::Condition] {
                    match agents::validate(
                        self.backends.validator.as_ref(),
                        kind,
                        &ctx,
                        &candidate,
                        &response,
                    ) {
                        Ok(fb) => feedbacks.push(fb),
                        Err(e) => errors.push(format!("{kind:?} validator: {e}")),
                    }
                }
                CandidateRecord {
                    candidate,
                    response,
                    feedbacks,
                    fixed: None,
                    errors,
                }
            })
            .collect();
        result.timings.validator = StageSpan {
            start: t0,
            end: at(),
        };

        let t0 = at();
        records
            .par_iter_mut()
            .filter(|r| r.needs_fix())
            .for_each(|rec| {
                match agents::fix(
                    self.backends.fix.as_ref(),
                    &ctx,
                    &rec.candidate,
                    &rec.response,
                    &rec.feedbacks,
                ) {
                    Ok(candidate) => {
                        let response = self.execute(&ctx.db_path, &candidate.sql);
                        rec.fixed = Some(FixedVersion {
                            candidate,
                            response,
                        });
                    }
                    Err(e) => rec.errors.push(format!("fix: {e}")),
                }
            });
        result.timings.fix = StageSpan {
            start: t0,
            end: at(),
        };

        let t0 = at();
        let pool = dedup_pool(&records);
        let pool_cands: Vec<SqlCandidate> = pool
            .iter()
            .map(|&i| records[i].latest().0.clone())
            .collect();
        let pool_resps: Vec<ExecutionResponse> = pool
            .iter()
            .map(|&i| records[i].latest().1.clone())
            .collect();
        let selected = match agents::select_best(
            self.backends.selection.as_ref(),
            &ctx,
            &pool_cands,
            &pool_resps,
            self.config.subset_size,
        ) {
            Ok(sel) => {
                result.selection_calls = sel.calls;
                sel.index.map(|j| pool[j])
            }
            Err(e) => {
                result.error = Some(format!("selection: {e}"));
                None
            }
        };
        result.timings.selection = StageSpan {
            start: t0,
            end: at(),
        };

        let chosen = selected.unwrap_or_else(|| greedy_index(&records));
        result.fallback = selected.is_none();
        result.selected = Some(chosen);
        let (sql, response) = records[chosen].latest();
        result.final_sql = Some(sql.sql.clone());
        result.final_response = Some(response.clone());
        if let Some(gold_sql) = &sample.gold_sql {
            let gold = self.execute(&ctx.db_path, gold_sql);
            if !gold.is_ok() {
                log::warn!("gold SQL for sample {} did not execute cleanly", sample.id);
            }
            result.ex_match = Some(executor::matches_gold(gold_sql, &gold, response));
        }
        result.selection_pool = pool;
        result.candidates = records;
        result.timings.total = at();
        result
    }

    /// Runs every sample, writing results, timings and the summary into
    /// `out_dir` when given. Results are appended in dataset order as soon
    /// as each prefix is complete.
    pub fn run_benchmark(
        &self,
        samples: &[QuestionSample],
        out_dir: Option<&Path>,
    ) -> Result<BenchmarkReport, PipelineError> {
        self.config.validate()?;
        let writer = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                Some(Mutex::new(OrderedWriter::create(dir)?))
            }
            None => None,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;

        let results: Vec<PipelineResult> = pool.install(|| {
            samples
                .par_iter()
                .enumerate()
                .map(|(i, sample)| {
                    let res = self.run_sample(sample);
                    log::info!(
                        "sample {} done in {:.2}s (ex_match={:?})",
                        sample.id,
                        res.timings.total,
                        res.ex_match
                    );
                    if let Some(w) = &writer {
                        if let Err(e) = w.lock().expect("results writer").submit(i, &res) {
                            log::error!("could not persist result for {}: {e}", sample.id);
                        }
                    }
                    res
                })
                .collect()
        });

        let summary = BenchmarkSummary::from_results(&results);
        if let (Some(dir), Some(w)) = (out_dir, writer) {
            w.into_inner().expect("results writer").finish()?;
            let path = dir.join(SUMMARY_FILE);
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        }
        Ok(BenchmarkReport { results, summary })
    }
}

/// Candidate indices left after removing duplicates of the latest SQL. The
/// first occurrence wins, and the greedy candidate is always kept.
pub fn dedup_pool(records: &[CandidateRecord]) -> Vec<usize> {
    let greedy = greedy_index(records);
    let mut seen = HashSet::new();
    let mut pool = Vec::new();
    if !records.is_empty() {
        seen.insert(agents::normalize_sql(&records[greedy].latest().0.sql));
    }
    for (i, rec) in records.iter().enumerate() {
        if i == greedy || seen.insert(agents::normalize_sql(&rec.latest().0.sql)) {
            pool.push(i);
        }
    }
    pool
}

/// Index of the candidate produced by greedy decoding, or 0 when the greedy
/// completion yielded no SQL.
pub fn greedy_index(records: &[CandidateRecord]) -> usize {
    records
        .iter()
        .position(|r| r.candidate.origin == Origin::Greedy)
        .unwrap_or(0)
}

/// Writes results in index order even when they arrive out of order.
struct OrderedWriter {
    results: BufWriter<File>,
    timings: BufWriter<File>,
    results_path: PathBuf,
    next: usize,
    pending: BTreeMap<usize, (String, String)>,
}

impl OrderedWriter {
    fn create(dir: &Path) -> Result<Self, PipelineError> {
        let results_path = dir.join(RESULTS_FILE);
        let timings_path = dir.join(TIMINGS_FILE);
        Ok(Self {
            results: BufWriter::new(File::create(&results_path).map_err(io_err(&results_path))?),
            timings: BufWriter::new(File::create(&timings_path).map_err(io_err(&timings_path))?),
            results_path,
            next: 0,
            pending: BTreeMap::new(),
        })
    }

    fn submit(&mut self, index: usize, res: &PipelineResult) -> Result<(), PipelineError> {
        let line = serde_json::to_string(res).expect("result serializes");
        let timing = serde_json::to_string(&TimingLine {
            sample_id: &res.sample_id,
            timings: &res.timings,
        })
        .expect("timings serialize");
        self.pending.insert(index, (line, timing));
        while let Some((line, timing)) = self.pending.remove(&self.next) {
            writeln!(self.results, "{line}").map_err(io_err(&self.results_path))?;
            writeln!(self.timings, "{timing}").map_err(io_err(&self.results_path))?;
            self.next += 1;
        }
        self.results.flush().map_err(io_err(&self.results_path))?;
        self.timings.flush().map_err(io_err(&self.results_path))
    }

    fn finish(mut self) -> Result<(), PipelineError> {
        self.results.flush().map_err(io_err(&self.results_path))?;
        self.timings.flush().map_err(io_err(&self.results_path))
    }
}

/// Reads a results JSONL file.
pub fn load_results(path: &Path) -> Result<Vec<PipelineResult>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: {e}", i + 1),
                ),
            })
        })
        .collect()
}
