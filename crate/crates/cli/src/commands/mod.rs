pub mod build_rlef;
pub mod eval;
pub mod orpo_score;
pub mod run;

use std::path::Path;

use anyhow::Context;
use sqlagents_core::dataset;
use sqlagents_core::QuestionSample;

use crate::config::RunConfig;

/// Validates the configuration, logs it and loads the dataset.
pub fn prepare(config: &RunConfig) -> anyhow::Result<Vec<QuestionSample>> {
    config.validate()?;
    log::info!(
        "effective configuration: {}",
        serde_json::to_string(config)?
    );
    let path = config.dataset_path();
    dataset::load_samples(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
