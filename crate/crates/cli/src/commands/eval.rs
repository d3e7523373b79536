use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use sqlagents_core::dataset;
use sqlagents_core::eval::{self, TsReport, DEFAULT_VES_REPEATS};
use sqlagents_core::executor::DEFAULT_TIMEOUT_SECS;
use sqlagents_core::pipeline;

use crate::config::RunConfig;
use crate::UsageError;

pub const EVAL_FILE: &str = "eval.json";
pub const BREAKDOWN_TSV: &str = "breakdown.tsv";
pub const BREAKDOWN_JSON: &str = "breakdown.json";

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// results.jsonl written by `run`.
    #[arg(long)]
    pub results: PathBuf,
    /// Run configuration supplying dataset and db_root when not given here.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub db_root: Option<PathBuf>,
    /// Directory of test-suite variants, `<dir>/<db_id>/*.sqlite`.
    #[arg(long)]
    pub variants: Option<PathBuf>,
    /// Compute TS; requires --variants.
    #[arg(long)]
    pub ts: bool,
    /// Time gold and predicted queries and compute VES.
    #[arg(long)]
    pub ves: bool,
    #[arg(long, default_value_t = DEFAULT_VES_REPEATS)]
    pub ves_repeats: usize,
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_SECS)]
    pub timeout: f64,
    /// Output directory; defaults to the directory of the results file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    results: &'a Path,
    dataset: &'a Path,
    db_root: &'a Path,
    variants: Option<&'a Path>,
    ves: bool,
    ves_repeats: usize,
    timeout_secs: f64,
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    settings: EvalSettings<'a>,
    records: usize,
    ex: Option<f64>,
    ts: Option<TsReport>,
    ves: Option<f64>,
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}%"))
}

pub fn run(args: &EvalArgs) -> anyhow::Result<()> {
    let usage = |m: &str| anyhow::Error::from(UsageError(m.to_string()));
    if args.ts && args.variants.is_none() {
        return Err(usage("--ts requires --variants"));
    }
    if args.ves && args.ves_repeats == 0 {
        return Err(usage("ves_repeats: must be at least 1"));
    }
    if !(args.timeout > 0.0 && args.timeout.is_finite()) {
        return Err(usage("timeout: must be positive"));
    }
    let file = args
        .config
        .as_deref()
        .map(RunConfig::load)
        .transpose()?
        .unwrap_or_default();
    let dataset_path = args
        .dataset
        .clone()
        .or(file.dataset)
        .ok_or_else(|| usage("dataset: required"))?;
    let db_root = args
        .db_root
        .clone()
        .or(file.db_root)
        .ok_or_else(|| usage("db_root: required"))?;
    if !db_root.is_dir() {
        return Err(usage(&format!(
            "db_root: {} is not a directory",
            db_root.display()
        )));
    }
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args
            .results
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };

    let results = pipeline::load_results(&args.results)?;
    let samples = dataset::load_samples(&dataset_path)
        .with_context(|| format!("loading dataset {}", dataset_path.display()))?;
    let mut records = eval::build_records(&samples, &results, &db_root, args.timeout)?;

    let ex = eval::execution_accuracy(&records);
    let ts = match &args.variants {
        Some(dir) => {
            let mut map = BTreeMap::new();
            for r in &records {
                map.insert(r.sample_id.clone(), eval::discover_variants(dir, &r.db_id)?);
            }
            Some(eval::test_suite_accuracy(&records, &map, args.timeout))
        }
        None => None,
    };
    let ves = if args.ves {
        eval::measure_durations(&mut records, &db_root, args.ves_repeats, args.timeout);
        eval::valid_efficiency_score(&records)
    } else {
        None
    };

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let breakdown = eval::breakdown_report(&records);
    let tsv = out.join(BREAKDOWN_TSV);
    std::fs::write(&tsv, breakdown.to_tsv())
        .with_context(|| format!("writing {}", tsv.display()))?;
    super::write_json(&out.join(BREAKDOWN_JSON), &breakdown)?;
    let summary = EvalSummary {
        settings: EvalSettings {
            results: &args.results,
            dataset: &dataset_path,
            db_root: &db_root,
            variants: args.variants.as_deref(),
            ves: args.ves,
            ves_repeats: args.ves_repeats,
            timeout_secs: args.timeout,
        },
        records: records.len(),
        ex,
        ts: ts.clone(),
        ves,
    };
    super::write_json(&out.join(EVAL_FILE), &summary)?;

    println!("EX: {} over {} samples", fmt_pct(ex), records.len());
    if let Some(t) = &ts {
        println!(
            "TS: {} ({}/{}, {} excluded, {} missing variants)",
            fmt_pct(t.ts),
            t.passed,
            t.total,
            t.excluded.len(),
            t.missing_variants.len()
        );
    }
    if args.ves {
        println!("VES: {}", fmt_pct(ves));
    }
    print!("{}", breakdown.to_tsv());
    Ok(())
}
