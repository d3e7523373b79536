use anyhow::Context;
use sqlagents_core::rlef::{self, AgentKind, IterationManifest, MANIFEST_FILE};

use crate::config::{CommonArgs, RunConfig};
use crate::UsageError;

pub fn run(
    args: &CommonArgs,
    iteration: Option<u32>,
    actions: Option<usize>,
) -> anyhow::Result<()> {
    let mut config = RunConfig::resolve(args)?;
    if let Some(i) = iteration {
        config.rlef.iteration = i;
    }
    if let Some(k) = actions {
        config.rlef.actions = k;
    }
    let samples = super::prepare(&config)?;
    if let Some(s) = samples.iter().find(|s| s.gold_sql.is_none()) {
        return Err(UsageError(format!("dataset: sample {} has no gold SQL", s.id)).into());
    }
    if config.backends.advanced.is_none() {
        log::warn!("no advanced backend configured; sampling policy actions only");
    }

    let pipeline = config.pipeline()?;
    let root = config.output_path().to_path_buf();
    let iter_dir = root.join(format!("iter_{}", config.rlef.iteration));
    config.snapshot(&iter_dir)?;

    let output = rlef::build_dataset(&pipeline, &samples, &config.rlef)?;
    for kind in AgentKind::ALL {
        let pairs = output
            .pairs
            .get(&kind)
            .map(Vec::as_slice)
            .unwrap_or_default();
        let path = iter_dir.join(kind.file_name());
        let n = rlef::emit_pairs(pairs, &path)?;
        println!("{:<20} {n:>6} pairs -> {}", kind.as_str(), path.display());
    }
    for (id, why) in &output.skipped {
        println!("skipped {id}: {why}");
    }

    let manifest_path = root.join(MANIFEST_FILE);
    let mut manifest = IterationManifest::load_or_default(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let record = manifest
        .record(config.rlef.iteration, output.counts())
        .clone();
    manifest.save(&manifest_path)?;
    match record.relative_change {
        Some(c) => println!(
            "total {} pairs, relative change {:.2}%",
            record.total,
            100.0 * c
        ),
        None => println!("total {} pairs", record.total),
    }
    println!(
        "{}",
        if record.stop {
            "recommendation: stop iterating"
        } else {
            "recommendation: continue"
        }
    );
    Ok(())
}
