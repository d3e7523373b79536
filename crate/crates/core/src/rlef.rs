//! Preference pairs from execution feedback.
//!
//! Planner and fix actions are labeled by executing them against the gold
//! query. Validator actions are labeled by what they do for the fix agent:
//! feedback that lets the fix agent reach the gold result is chosen.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{self, AgentContext, AgentError};
use crate::backend::{Backend, BackendError, GenerationRequest};
use crate::executor::{self, DEFAULT_TIMEOUT_SECS};
use crate::model::{ExecutionResponse, FeedbackKind, QuestionSample, Verdict};
use crate::pipeline::{Backends, Pipeline, PipelineError};

/// Relative change in pair count below which iteration stops.
pub const STOP_THRESHOLD: f64 = 0.05;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RlefError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("sample {0} has no gold SQL")]
    MissingGold(String),
    #[error("gold SQL for sample {sample} does not execute: {detail}")]
    GoldFailed { sample: String, detail: String },
    #[error("only {got} actions after backend failures")]
    TooFewActions { got: usize },
    #[error("invalid rlef config: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Planner,
    ValidatorSelection,
    ValidatorCondition,
    Fix,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [
        AgentKind::Planner,
        AgentKind::ValidatorSelection,
        AgentKind::ValidatorCondition,
        AgentKind::Fix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Planner => "planner",
            AgentKind::ValidatorSelection => "validator_selection",
            AgentKind::ValidatorCondition => "validator_condition",
            AgentKind::Fix => "fix",
        }
    }

    /// Pair file name for this agent, e.g. `pairs_planner.jsonl`.
    pub fn file_name(self) -> String {
        format!("pairs_{}.jsonl", self.as_str())
    }

    fn allows_empty_rejected(self) -> bool {
        matches!(self, AgentKind::Planner | AgentKind::Fix)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: AgentKind,
    /// Exactly the prompt the policy saw.
    pub prompt: String,
    pub sample_id: String,
    pub iteration: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Policy,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub text: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSet {
    pub actions: Vec<Action>,
}

impl ActionSet {
    pub fn from_texts(texts: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            actions: texts
                .into_iter()
                .map(|t| Action {
                    text: t.into(),
                    provenance: Provenance::Policy,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().map(|a| a.text.as_str())
    }
}

/// One training pair. Field order is the JSONL field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub agent: AgentKind,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub sample_id: String,
    pub iteration: u32,
}

/// Draws `k - 1` policy samples at temperature `t` plus one greedy assistant
/// action, or `k` policy samples without an assistant. Policy samples come
/// first.
///
/// A failing backend leaves its share out; if that leaves fewer than two
/// actions the sample is unusable and `TooFewActions` is returned.
pub fn sample_actions(
    policy: &dyn Backend,
    assistant: Option<&dyn Backend>,
    observation: &Observation,
    k: usize,
    t: f64,
) -> Result<ActionSet, RlefError> {
    let policy_n = if assistant.is_some() {
        k.saturating_sub(1)
    } else {
        k
    };
    if k == 0 || (assistant.is_some() && k < 2) {
        return Err(RlefError::Config(format!("k = {k} is too small")));
    }
    let mut set = ActionSet::default();
    let mut failed = false;
    if policy_n > 0 {
        let req = GenerationRequest::new(observation.prompt.clone(), policy_n, t)?;
        match policy.complete(&req) {
            Ok(res) => set
                .actions
                .extend(res.completions.into_iter().map(|text| Action {
                    text,
                    provenance: Provenance::Policy,
                })),
            Err(e) => {
                log::warn!("policy sampling failed for {}: {e}", observation.sample_id);
                failed = true;
            }
        }
    }
    if let Some(a) = assistant {
        match a.complete(&GenerationRequest::greedy(observation.prompt.clone())) {
            Ok(res) => set
                .actions
                .extend(res.completions.into_iter().take(1).map(|text| Action {
                    text,
                    provenance: Provenance::Assistant,
                })),
            Err(e) => {
                log::warn!(
                    "assistant sampling failed for {}: {e}",
                    observation.sample_id
                );
                failed = true;
            }
        }
    }
    if failed && set.len() < 2 {
        return Err(RlefError::TooFewActions { got: set.len() });
    }
    Ok(set)
}

/// Gold-side facts needed to label actions for one sample.
#[derive(Debug, Clone)]
pub struct GoldLabel<'a> {
    pub db_path: &'a Path,
    pub gold_sql: &'a str,
    pub gold: &'a ExecutionResponse,
    pub timeout_secs: f64,
}

impl GoldLabel<'_> {
    /// Whether `sql` executes to the gold result.
    pub fn sql_matches(&self, sql: &str) -> bool {
        match executor::execute_sql(self.db_path, sql, self.timeout_secs) {
            Ok(resp) => executor::matches_gold(self.gold_sql, self.gold, &resp),
            Err(_) => false,
        }
    }

    /// Whether the SQL extracted from `completion` matches gold.
    pub fn completion_matches(&self, completion: &str) -> bool {
        agents::extract_sql(completion).is_some_and(|(_, sql)| self.sql_matches(&sql))
    }
}

/// Gold executions shared by every builder within one iteration.
#[derive(Default)]
pub struct GoldCache {
    entries: Mutex<HashMap<String, ExecutionResponse>>,
}

impl GoldCache {
    pub fn get_or_execute(
        &self,
        sample: &QuestionSample,
        db_path: &Path,
        timeout_secs: f64,
    ) -> Result<ExecutionResponse, RlefError> {
        if let Some(hit) = self.entries.lock().expect("gold cache").get(&sample.id) {
            return Ok(hit.clone());
        }
        let gold_sql = sample
            .gold_sql
            .as_deref()
            .ok_or_else(|| RlefError::MissingGold(sample.id.clone()))?;
        let failed = |detail: String| RlefError::GoldFailed {
            sample: sample.id.clone(),
            detail,
        };
        let resp = executor::execute_sql(db_path, gold_sql, timeout_secs)
            .map_err(|e| failed(e.to_string()))?;
        if !resp.is_ok() {
            return Err(failed(resp.error_text().unwrap_or("timeout").to_string()));
        }
        self.entries
            .lock()
            .expect("gold cache")
            .insert(sample.id.clone(), resp.clone());
        Ok(resp)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("gold cache").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn distinct<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    texts.into_iter().filter(|t| seen.insert(*t)).collect()
}

/// Cross product of chosen and rejected texts. For planner and fix pairs an
/// empty rejected set becomes `{""}`; otherwise a one-sided partition gives
/// no pairs.
pub fn pairs_from_partition(
    observation: &Observation,
    chosen: &[&str],
    rejected: &[&str],
) -> Vec<PreferencePair> {
    let empty = [""];
    let rejected: &[&str] = if rejected.is_empty() && observation.agent.allows_empty_rejected() {
        &empty
    } else {
        rejected
    };
    let mut out = Vec::with_capacity(chosen.len() * rejected.len());
    for c in chosen {
        for r in rejected {
            if c != r {
                out.push(PreferencePair {
                    agent: observation.agent,
                    prompt: observation.prompt.clone(),
                    chosen: c.to_string(),
                    rejected: r.to_string(),
                    sample_id: observation.sample_id.clone(),
                    iteration: observation.iteration,
                });
            }
        }
    }
    out
}

/// Splits distinct action texts into (gold-matching, other).
pub fn partition_by_gold<'a>(
    actions: &'a ActionSet,
    label: &GoldLabel,
) -> (Vec<&'a str>, Vec<&'a str>) {
    let texts = distinct(actions.texts());
    let verdicts: Vec<bool> = texts
        .par_iter()
        .map(|t| label.completion_matches(t))
        .collect();
    let mut chosen = Vec::new();
    let mut rejected = Vec::new();
    for (t, ok) in texts.into_iter().zip(verdicts) {
        if ok {
            chosen.push(t);
        } else {
            rejected.push(t);
        }
    }
    (chosen, rejected)
}

/// Planner pairs: SQL matching gold is chosen, anything else (wrong result,
/// error, no SQL) rejected.
pub fn build_planner_pairs(
    observation: &Observation,
    actions: &ActionSet,
    label: &GoldLabel,
) -> Vec<PreferencePair> {
    let (c, r) = partition_by_gold(actions, label);
    pairs_from_partition(observation, &c, &r)
}

/// Fix pairs, labeled exactly like planner pairs. The observation carries
/// the planner SQL and the error feedback.
pub fn build_fix_pairs(
    observation: &Observation,
    actions: &ActionSet,
    label: &GoldLabel,
) -> Vec<PreferencePair> {
    let (c, r) = partition_by_gold(actions, label);
    pairs_from_partition(observation, &c, &r)
}

/// Chosen and rejected validator actions per kind, in action order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidatorLabels {
    pub chosen_s: Vec<String>,
    pub chosen_c: Vec<String>,
    pub rejected_s: Vec<String>,
    pub rejected_c: Vec<String>,
}

/// Inputs shared by the validator labeling branches.
pub struct ValidatorInputs<'a> {
    pub ctx: &'a AgentContext,
    pub planner_sql: &'a str,
    pub planner_response: &'a ExecutionResponse,
    pub label: &'a GoldLabel<'a>,
}

/// Whether the fix reached gold, plus any editor rewrites of the pair.
type FixOutcome = (bool, Option<(Option<String>, Option<String>)>);

/// Labels validator actions.
///
/// When the planner SQL already matches gold, an action saying "correct" is
/// chosen and any other is rejected. Then, for every aligned pair
/// `(a_s, a_c)`, the fix agent gets the error-indicating members (the
/// planner SQL stands when neither flags an error) and both actions are
/// chosen when the result matches gold, rejected otherwise. The second
/// labeling overrides the first on conflict. A fix that yields no SQL
/// counts as a mismatch.
///
/// With an `editor`, a mismatching pair gets one more try: each
/// error-indicating action is rewritten by the editor, and if the fix agent
/// then reaches gold the edited texts join the chosen sets.
pub fn build_validator_labels(
    actions_s: &ActionSet,
    actions_c: &ActionSet,
    fix_backend: &dyn Backend,
    editor: Option<&dyn Backend>,
    inputs: &ValidatorInputs,
) -> Result<ValidatorLabels, RlefError> {
    let ns = actions_s.len();
    let mut label_s: Vec<Option<bool>> = vec![None; ns];
    let mut label_c: Vec<Option<bool>> = vec![None; actions_c.len()];
    let mut extra_s = Vec::new();
    let mut extra_c = Vec::new();

    let planner_ok = executor::matches_gold(
        inputs.label.gold_sql,
        inputs.label.gold,
        inputs.planner_response,
    );
    if planner_ok {
        for (labels, set) in [(&mut label_s, actions_s), (&mut label_c, actions_c)] {
            for (slot, text) in labels.iter_mut().zip(set.texts()) {
                *slot = Some(agents::parse_verdict(text) == Verdict::Correct);
            }
        }
    }

    let pairs: Vec<(usize, &str, &str)> = actions_s
        .texts()
        .zip(actions_c.texts())
        .enumerate()
        .map(|(i, (s, c))| (i, s, c))
        .collect();
    let outcomes: Vec<Result<FixOutcome, RlefError>> = pairs
        .par_iter()
        .map(|&(_, a_s, a_c)| {
            let ok = fix_reaches_gold(fix_backend, inputs, &[a_s, a_c])?;
            if ok {
                return Ok((true, None));
            }
            let Some(editor) = editor else {
                return Ok((false, None));
            };
            let edit = |a: &str| -> Result<Option<String>, RlefError> {
                if agents::parse_verdict(a) != Verdict::Incorrect {
                    return Ok(None);
                }
                let prompt = agents::feedback_editor_prompt(
                    inputs.ctx,
                    inputs.planner_sql,
                    inputs.planner_response,
                    a,
                );
                let text = editor
                    .complete(&GenerationRequest::greedy(prompt))?
                    .completions
                    .into_iter()
                    .next()
                    .unwrap_or_default();
                Ok(
                    (agents::parse_verdict(&text) == Verdict::Incorrect && text != a)
                        .then_some(text),
                )
            };
            let (es, ec) = (edit(a_s)?, edit(a_c)?);
            if es.is_none() && ec.is_none() {
                return Ok((false, None));
            }
            let texts = [es.as_deref().unwrap_or(a_s), ec.as_deref().unwrap_or(a_c)];
            if fix_reaches_gold(fix_backend, inputs, &texts)? {
                Ok((false, Some((es, ec))))
            } else {
                Ok((false, None))
            }
        })
        .collect();

    for ((i, _, _), outcome) in pairs.iter().zip(outcomes) {
        let (matched, edited) = outcome?;
        for (labels, kind) in [(&mut label_s, "selection"), (&mut label_c, "condition")] {
            if labels[*i].is_some_and(|prev| prev != matched) {
                log::info!(
                    "sample {}: {kind} action {i} relabeled by fix outcome ({matched})",
                    inputs.ctx.sample.id
                );
            }
            labels[*i] = Some(matched);
        }
        if let Some((es, ec)) = edited {
            extra_s.extend(es);
            extra_c.extend(ec);
        }
    }

    let mut out = ValidatorLabels::default();
    for (set, labels, chosen, rejected) in [
        (actions_s, &label_s, &mut out.chosen_s, &mut out.rejected_s),
        (actions_c, &label_c, &mut out.chosen_c, &mut out.rejected_c),
    ] {
        for (text, l) in set.texts().zip(labels) {
            match l {
                Some(true) => chosen.push(text.to_string()),
                Some(false) => rejected.push(text.to_string()),
                None => {}
            }
        }
    }
    out.chosen_s.extend(extra_s);
    out.chosen_c.extend(extra_c);
    Ok(out)
}

fn fix_reaches_gold(
    fix_backend: &dyn Backend,
    inputs: &ValidatorInputs,
    feedback: &[&str],
) -> Result<bool, RlefError> {
    let errors: Vec<&str> = feedback
        .iter()
        .copied()
        .filter(|t| agents::parse_verdict(t) == Verdict::Incorrect)
        .collect();
    if errors.is_empty() {
        return Ok(inputs.label.sql_matches(inputs.planner_sql));
    }
    match agents::fix_with_texts(
        fix_backend,
        inputs.ctx,
        inputs.planner_sql,
        inputs.planner_response,
        &errors,
    ) {
        Ok(fixed) => Ok(inputs.label.sql_matches(&fixed.sql)),
        Err(AgentError::FixFailed) => Ok(false),
        Err(e) => Err(e.into()),
    }
}

/// Pairs for both validator kinds from their labels.
pub fn validator_pairs(
    labels: &ValidatorLabels,
    obs_s: &Observation,
    obs_c: &Observation,
) -> Vec<PreferencePair> {
    fn strs(v: &[String]) -> Vec<&str> {
        distinct(v.iter().map(String::as_str))
    }
    let mut out = pairs_from_partition(obs_s, &strs(&labels.chosen_s), &strs(&labels.rejected_s));
    out.extend(pairs_from_partition(
        obs_c,
        &strs(&labels.chosen_c),
        &strs(&labels.rejected_c),
    ));
    out
}

/// Drops planner or fix pairs whose chosen text no longer executes to gold.
pub fn recheck_pairs(pairs: Vec<PreferencePair>, label: &GoldLabel) -> Vec<PreferencePair> {
    let mut verdicts: HashMap<&str, bool> = HashMap::new();
    for p in &pairs {
        if !verdicts.contains_key(p.chosen.as_str()) {
            verdicts.insert(p.chosen.as_str(), label.completion_matches(&p.chosen));
        }
    }
    let keep: Vec<bool> = pairs.iter().map(|p| verdicts[p.chosen.as_str()]).collect();
    let dropped = keep.iter().filter(|k| !**k).count();
    if dropped > 0 {
        log::warn!("recheck dropped {dropped} pairs whose chosen text no longer matches gold");
    }
    pairs
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlefConfig {
    /// Action set size per observation.
    pub actions: usize,
    pub temperature: f64,
    pub iteration: u32,
    pub timeout_secs: f64,
}

impl Default for RlefConfig {
    fn default() -> Self {
        Self {
            actions: 10,
            temperature: 1.0,
            iteration: 1,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }
}

impl RlefConfig {
    pub fn validate(&self) -> Result<(), RlefError> {
        if self.actions < 2 {
            return Err(RlefError::Config("actions must be at least 2".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(RlefError::Config("temperature must be positive".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(RlefError::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }
}

/// Every pair built for one sample, in agent order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SamplePairs {
    pub sample_id: String,
    pub pairs: Vec<PreferencePair>,
}

/// Builds planner, validator and fix pairs for one sample.
///
/// The planner's greedy SQL plays the role of `s` for the validator and
/// fix observations; fix pairs are built only when a validator flags that
/// SQL. `backends.advanced`, when present, supplies the assistant action
/// for every agent and edits validator feedback.
pub fn build_sample_pairs(
    ctx: &AgentContext,
    backends: &Backends,
    config: &RlefConfig,
    gold_cache: &GoldCache,
) -> Result<SamplePairs, RlefError> {
    let sample = &ctx.sample;
    let gold_sql = sample
        .gold_sql
        .as_deref()
        .ok_or_else(|| RlefError::MissingGold(sample.id.clone()))?;
    let gold = gold_cache.get_or_execute(sample, &ctx.db_path, config.timeout_secs)?;
    let label = GoldLabel {
        db_path: &ctx.db_path,
        gold_sql,
        gold: &gold,
        timeout_secs: config.timeout_secs,
    };
    let assistant = backends.advanced.as_deref();
    let observe = |agent, prompt: String| Observation {
        agent,
        prompt,
        sample_id: sample.id.clone(),
        iteration: config.iteration,
    };
    let mut pairs = Vec::new();

    let obs_p = observe(AgentKind::Planner, agents::planner_prompt(ctx));
    let actions_p = sample_actions(
        backends.planner.as_ref(),
        assistant,
        &obs_p,
        config.actions,
        config.temperature,
    )?;
    pairs.extend(recheck_pairs(
        build_planner_pairs(&obs_p, &actions_p, &label),
        &label,
    ));

    let greedy = agents::plan_candidates(backends.planner.as_ref(), ctx, 1, config.temperature)?;
    let s = &greedy[0];
    let s_resp = executor::execute_sql(&ctx.db_path, &s.sql, config.timeout_secs)
        .unwrap_or_else(|e| ExecutionResponse::syntax_error(e.to_string(), 0.0));

    let obs_s = observe(
        AgentKind::ValidatorSelection,
        agents::validator_prompt(FeedbackKind::Selection, ctx, &s.sql, &s_resp),
    );
    let obs_c = observe(
        AgentKind::ValidatorCondition,
        agents::validator_prompt(FeedbackKind::Condition, ctx, &s.sql, &s_resp),
    );
    let k = config.actions;
    let actions_s = sample_actions(
        backends.validator.as_ref(),
        assistant,
        &obs_s,
        k,
        config.temperature,
    )?;
    let actions_c = sample_actions(
        backends.validator.as_ref(),
        assistant,
        &obs_c,
        k,
        config.temperature,
    )?;
    let inputs = ValidatorInputs {
        ctx,
        planner_sql: &s.sql,
        planner_response: &s_resp,
        label: &label,
    };
    let labels = build_validator_labels(
        &actions_s,
        &actions_c,
        backends.fix.as_ref(),
        assistant,
        &inputs,
    )?;
    pairs.extend(validator_pairs(&labels, &obs_s, &obs_c));

    let mut feedback = Vec::new();
    for kind in [FeedbackKind::Selection, FeedbackKind::Condition] {
        let fb = agents::validate(backends.validator.as_ref(), kind, ctx, s, &s_resp)?;
        if fb.indicates_error() {
            feedback.push(fb.raw_text);
        }
    }
    if !feedback.is_empty() {
        let texts: Vec<&str> = feedback.iter().map(String::as_str).collect();
        let obs_f = observe(
            AgentKind::Fix,
            agents::fix_prompt(ctx, &s.sql, &s_resp, &texts),
        );
        let actions_f = sample_actions(
            backends.fix.as_ref(),
            assistant,
            &obs_f,
            k,
            config.temperature,
        )?;
        pairs.extend(recheck_pairs(
            build_fix_pairs(&obs_f, &actions_f, &label),
            &label,
        ));
    }

    Ok(SamplePairs {
        sample_id: sample.id.clone(),
        pairs,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RlefOutput {
    pub pairs: BTreeMap<AgentKind, Vec<PreferencePair>>,
    /// `(sample id, reason)` for samples that produced nothing.
    pub skipped: Vec<(String, String)>,
}

impl RlefOutput {
    pub fn counts(&self) -> BTreeMap<AgentKind, usize> {
        AgentKind::ALL
            .iter()
            .map(|k| (*k, self.pairs.get(k).map_or(0, Vec::len)))
            .collect()
    }
}

/// Builds pairs for every sample. Samples run concurrently; output is in
/// dataset order.
pub fn build_dataset(
    pipeline: &Pipeline,
    samples: &[QuestionSample],
    config: &RlefConfig,
) -> Result<RlefOutput, RlefError> {
    config.validate()?;
    if let Some(s) = samples.iter().find(|s| s.gold_sql.is_none()) {
        return Err(RlefError::MissingGold(s.id.clone()));
    }
    let cache = GoldCache::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(pipeline.config.parallelism.max(1))
        .build()
        .map_err(|e| RlefError::Config(e.to_string()))?;
    let per_sample: Vec<Result<SamplePairs, RlefError>> = pool.install(|| {
        samples
            .par_iter()
            .map(|sample| {
                let (ctx, _) = pipeline.build_context(sample)?;
                build_sample_pairs(&ctx, &pipeline.backends, config, &cache)
            })
            .collect()
    });
    let mut out = RlefOutput::default();
    for (sample, res) in samples.iter().zip(per_sample) {
        match res {
            Ok(sp) => {
                for p in sp.pairs {
                    out.pairs.entry(p.agent).or_default().push(p);
                }
            }
            Err(e) => {
                log::warn!("sample {} skipped: {e}", sample.id);
                out.skipped.push((sample.id.clone(), e.to_string()));
            }
        }
    }
    Ok(out)
}

/// Writes pairs as JSONL and returns the count written.
pub fn emit_pairs(pairs: &[PreferencePair], path: &Path) -> Result<usize, RlefError> {
    let io = |source| RlefError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for p in pairs {
        let line = serde_json::to_string(p).expect("pair serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(pairs.len())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, RlefError> {
    let text = std::fs::read_to_string(path).map_err(|source| RlefError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RlefError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: {e}", i + 1),
                ),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub pairs: BTreeMap<AgentKind, usize>,
    pub total: usize,
    /// `|n_t - n_{t-1}| / n_{t-1}`; absent for the first iteration and when
    /// the previous count was zero but this one is not.
    pub relative_change: Option<f64>,
    pub stop: bool,
}

/// Per-iteration pair counts and the stop recommendation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationManifest {
    pub threshold: f64,
    pub iterations: Vec<IterationRecord>,
}

impl Default for IterationManifest {
    fn default() -> Self {
        Self {
            threshold: STOP_THRESHOLD,
            iterations: Vec::new(),
        }
    }
}

impl IterationManifest {
    /// Records an iteration, replacing an earlier record with the same number.
    pub fn record(
        &mut self,
        iteration: u32,
        pairs: BTreeMap<AgentKind, usize>,
    ) -> &IterationRecord {
        self.iterations.retain(|r| r.iteration != iteration);
        let total = pairs.values().sum();
        let prev = self
            .iterations
            .iter()
            .filter(|r| r.iteration < iteration)
            .max_by_key(|r| r.iteration)
            .map(|r| r.total);
        let relative_change = match prev {
            None => None,
            Some(0) if total == 0 => Some(0.0),
            Some(0) => None,
            Some(p) => Some((total as f64 - p as f64).abs() / p as f64),
        };
        let stop = relative_change.is_some_and(|c| c < self.threshold);
        self.iterations.push(IterationRecord {
            iteration,
            pairs,
            total,
            relative_change,
            stop,
        });
        self.iterations.sort_by_key(|r| r.iteration);
        self.iterations
            .iter()
            .find(|r| r.iteration == iteration)
            .expect("just inserted")
    }

    pub fn should_stop(&self) -> bool {
        self.iterations.last().is_some_and(|r| r.stop)
    }

    pub fn load_or_default(path: &Path) -> Result<Self, RlefError> {
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| RlefError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(source) => Err(RlefError::Io {
                path: path.to_path_buf(),
                source,
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), RlefError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|source| RlefError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::tests::ctx as agent_ctx;
    use crate::backend::{constant_backend, CountingBackend, FnBackend, GenerationResult};
    use rusqlite::Connection;
    use std::sync::Arc;

    fn db(dir: &Path) -> PathBuf {
        let path = dir.join("t.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE singer (id INTEGER PRIMARY KEY, name TEXT, age INTEGER);
             INSERT INTO singer VALUES (1, 'Ann', 30), (2, 'Bob', 41);",
        )
        .unwrap();
        path
    }

    fn obs(agent: AgentKind) -> Observation {
        Observation {
            agent,
            prompt: "o".into(),
            sample_id: "s1".into(),
            iteration: 1,
        }
    }

    fn fenced(sql: &str) -> String {
        format!("```sql\n{sql}\n```")
    }

    const GOLD: &str = "SELECT name FROM singer WHERE age > 40";

    fn with_label<R>(f: impl FnOnce(&GoldLabel) -> R) -> R {
        let dir = tempfile::tempdir().unwrap();
        let path = db(dir.path());
        let gold = executor::execute_sql(&path, GOLD, 5.0).unwrap();
        f(&GoldLabel {
            db_path: &path,
            gold_sql: GOLD,
            gold: &gold,
            timeout_secs: 5.0,
        })
    }

    #[test]
    fn sample_actions_split() {
        let policy = CountingBackend::new(constant_backend("p"));
        let assistant = constant_backend("a");
        let set = sample_actions(
            policy.as_ref(),
            Some(assistant.as_ref()),
            &obs(AgentKind::Planner),
            10,
            1.0,
        )
        .unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(
            set.actions
                .iter()
                .filter(|a| a.provenance == Provenance::Assistant)
                .count(),
            1
        );
        assert_eq!(set.actions[9].text, "a");
        assert_eq!(policy.calls(), 1);

        let set = sample_actions(policy.as_ref(), None, &obs(AgentKind::Planner), 3, 1.0).unwrap();
        assert_eq!(set.len(), 3);
        assert!(set
            .actions
            .iter()
            .all(|a| a.provenance == Provenance::Policy));
    }

    #[test]
    fn failed_policy_leaves_too_few() {
        let failing = FnBackend(
            |_: &GenerationRequest| -> Result<GenerationResult, BackendError> {
                Err(BackendError::Transport("down".into()))
            },
        );
        let assistant = constant_backend("a");
        let err = sample_actions(
            &failing,
            Some(assistant.as_ref()),
            &obs(AgentKind::Planner),
            4,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, RlefError::TooFewActions { got: 1 }));
    }

    #[test]
    fn planner_pairs_cross_product() {
        with_label(|label| {
            let good = fenced(GOLD);
            let actions = ActionSet::from_texts([
                good.clone(),
                fenced("SELECT name FROM singer"),
                fenced("SELECT x"),
            ]);
            let pairs = build_planner_pairs(&obs(AgentKind::Planner), &actions, label);
            assert_eq!(pairs.len(), 2);
            assert!(pairs.iter().all(|p| p.chosen == good));
        });
    }

    #[test]
    fn all_correct_pairs_with_empty_string() {
        with_label(|label| {
            let a1 = fenced(GOLD);
            let a2 = format!(
                "plan\n{}",
                fenced("SELECT name FROM singer WHERE age >= 41")
            );
            let pairs = build_planner_pairs(
                &obs(AgentKind::Planner),
                &ActionSet::from_texts([a1, a2]),
                label,
            );
            assert_eq!(pairs.len(), 2);
            assert!(pairs.iter().all(|p| p.rejected.is_empty()));
        });
    }

    #[test]
    fn all_wrong_gives_nothing_and_duplicates_collapse() {
        with_label(|label| {
            let bad = ActionSet::from_texts([fenced("SELECT 1"), "no sql".to_string()]);
            assert!(build_planner_pairs(&obs(AgentKind::Planner), &bad, label).is_empty());

            let good = fenced(GOLD);
            let wrong = fenced("SELECT 1");
            let dup = ActionSet::from_texts([good.clone(), wrong.clone(), wrong.clone(), wrong]);
            assert_eq!(build_fix_pairs(&obs(AgentKind::Fix), &dup, label).len(), 1);
        });
    }

    #[test]
    fn validator_partitions_never_use_empty_string() {
        let o = obs(AgentKind::ValidatorSelection);
        assert!(pairs_from_partition(&o, &["x"], &[]).is_empty());
        assert_eq!(pairs_from_partition(&o, &["x"], &["y"]).len(), 1);
        assert!(pairs_from_partition(&o, &["x"], &["x"]).is_empty());
    }

    /// Fix backend that repairs only when the feedback mentions `age`.
    fn age_fixer() -> FnBackend<
        impl Fn(&GenerationRequest) -> Result<GenerationResult, BackendError> + Send + Sync,
    > {
        FnBackend(|req: &GenerationRequest| {
            let text = if req.prompt.contains("mentions age") {
                fenced(GOLD)
            } else {
                fenced("SELECT name FROM singer")
            };
            Ok(GenerationResult {
                completions: vec![text],
                token_logprobs: None,
            })
        })
    }

    #[test]
    fn validator_fix_branch() {
        with_label(|label| {
            let ctx = agent_ctx();
            let planner_sql = "SELECT name FROM singer";
            let resp = executor::execute_sql(label.db_path, planner_sql, 5.0).unwrap();
            let inputs = ValidatorInputs {
                ctx: &ctx,
                planner_sql,
                planner_response: &resp,
                label,
            };
            let s_ok = "Columns fine. The SQL is correct.";
            let c_good = "Filter mentions age. The SQL is incorrect.";
            let c_bad = "Something is off. The SQL is incorrect.";
            let a_s = ActionSet::from_texts([s_ok, s_ok]);
            let a_c = ActionSet::from_texts([c_good, c_bad]);
            let fixer = CountingBackend::new(Arc::new(age_fixer()));
            let labels = build_validator_labels(&a_s, &a_c, fixer.as_ref(), None, &inputs).unwrap();
            assert_eq!(labels.chosen_c, [c_good]);
            assert_eq!(labels.rejected_c, [c_bad]);
            assert_eq!(labels.chosen_s, [s_ok]);
            assert_eq!(labels.rejected_s, [s_ok]);
            assert_eq!(fixer.calls(), 2);
            // The selection texts are identical, so no selection pair survives.
            let pairs = validator_pairs(
                &labels,
                &obs(AgentKind::ValidatorSelection),
                &obs(AgentKind::ValidatorCondition),
            );
            assert_eq!(pairs.len(), 1);
            assert_eq!(pairs[0].agent, AgentKind::ValidatorCondition);
        });
    }

    #[test]
    fn validator_correct_planner_branch() {
        with_label(|label| {
            let ctx = agent_ctx();
            let resp = executor::execute_sql(label.db_path, GOLD, 5.0).unwrap();
            let inputs = ValidatorInputs {
                ctx: &ctx,
                planner_sql: GOLD,
                planner_response: &resp,
                label,
            };
            let yes = "Looks right. The SQL is correct.";
            let no = "Wrong table. The SQL is incorrect.";
            let a_s = ActionSet::from_texts([yes, no, yes]);
            let a_c = ActionSet::from_texts([yes, yes]);
            // The fix agent breaks the query whenever asked.
            let fixer = CountingBackend::new(constant_backend(fenced("SELECT 1")));
            let labels = build_validator_labels(&a_s, &a_c, fixer.as_ref(), None, &inputs).unwrap();
            assert_eq!(labels.chosen_s, [yes, yes]);
            assert_eq!(labels.rejected_s, [no]);
            // The aligned partner of the misleading selection action is
            // rejected along with it.
            assert_eq!(labels.chosen_c, [yes]);
            assert_eq!(labels.rejected_c, [yes]);
            assert_eq!(fixer.calls(), 1);
        });
    }

    #[test]
    fn editor_rescues_feedback() {
        with_label(|label| {
            let ctx = agent_ctx();
            let planner_sql = "SELECT name FROM singer";
            let resp = executor::execute_sql(label.db_path, planner_sql, 5.0).unwrap();
            let inputs = ValidatorInputs {
                ctx: &ctx,
                planner_sql,
                planner_response: &resp,
                label,
            };
            let vague = "Something is off. The SQL is incorrect.";
            let edited = "Filter mentions age over 40. The SQL is incorrect.";
            let editor = constant_backend(edited);
            let a = ActionSet::from_texts([vague]);
            let labels =
                build_validator_labels(&a, &a, &age_fixer(), Some(editor.as_ref()), &inputs)
                    .unwrap();
            assert_eq!(labels.rejected_s, [vague]);
            assert_eq!(labels.chosen_s, [edited]);
            assert_eq!(labels.chosen_c, [edited]);
        });
    }

    #[test]
    fn recheck_drops_stale_chosen() {
        with_label(|label| {
            let mut good = pairs_from_partition(&obs(AgentKind::Planner), &[&fenced(GOLD)], &[""]);
            good.extend(pairs_from_partition(
                &obs(AgentKind::Planner),
                &["SELECT 1"],
                &[""],
            ));
            assert_eq!(recheck_pairs(good, label).len(), 1);
        });
    }

    #[test]
    fn emit_round_trip_and_field_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        assert_eq!(emit_pairs(&[], &path).unwrap(), 0);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        let pairs = pairs_from_partition(&obs(AgentKind::Fix), &["a", "b"], &["c"]);
        assert_eq!(emit_pairs(&pairs, &path).unwrap(), 2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"agent":"fix","prompt":"o","chosen":"a","rejected":"c","sample_id":"s1","iteration":1}"#));
        assert_eq!(load_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn manifest_stop_rule() {
        let counts = |n| BTreeMap::from([(AgentKind::Planner, n)]);
        let mut m = IterationManifest::default();
        assert!(!m.record(1, counts(100)).stop);
        assert!(!m.record(2, counts(80)).stop);
        let r = m.record(3, counts(78));
        assert!((r.relative_change.unwrap() - 0.025).abs() < 1e-12);
        assert!(r.stop);
        assert!(m.should_stop());
        assert!(!m.record(3, counts(60)).stop);
        assert_eq!(m.iterations.len(), 3);
    }
}
