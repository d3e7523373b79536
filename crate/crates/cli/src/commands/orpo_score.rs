use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sqlagents_core::orpo::{self, OrpoLoss, DEFAULT_LAMBDA};

#[derive(Serialize)]
struct ScoreConfig<'a> {
    pairs: &'a Path,
    lambda: Option<f64>,
    default_lambda: f64,
    normalized: bool,
}

#[derive(Serialize)]
struct ScoredLine {
    line: usize,
    #[serde(flatten)]
    loss: OrpoLoss,
}

pub fn run(
    pairs: &Path,
    lambda: Option<f64>,
    normalized: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let parsed = orpo::load_scored_pairs(pairs)?;
    let scores = orpo::score_pairs(&parsed, lambda, DEFAULT_LAMBDA, normalized)?;

    let mut table = String::from("line\ttotal\tnll\tor\n");
    for (line, l) in &scores {
        let _ = writeln!(table, "{line}\t{:.9}\t{:.9}\t{:.9}", l.total, l.nll, l.or);
    }
    if !scores.is_empty() {
        let n = scores.len() as f64;
        let mean = |f: fn(&OrpoLoss) -> f64| scores.iter().map(|(_, l)| f(l)).sum::<f64>() / n;
        let _ = writeln!(
            table,
            "mean\t{:.9}\t{:.9}\t{:.9}",
            mean(|l| l.total),
            mean(|l| l.nll),
            mean(|l| l.or)
        );
    }
    print!("{table}");

    if let Some(out) = out {
        let mut jsonl = String::new();
        for (line, loss) in &scores {
            jsonl.push_str(&serde_json::to_string(&ScoredLine {
                line: *line,
                loss: *loss,
            })?);
            jsonl.push('\n');
        }
        std::fs::write(out, jsonl).with_context(|| format!("writing {}", out.display()))?;
        let snapshot = out.with_extension("config.json");
        super::write_json(
            &snapshot,
            &ScoreConfig {
                pairs,
                lambda,
                default_lambda: DEFAULT_LAMBDA,
                normalized,
            },
        )?;
    }
    Ok(())
}
