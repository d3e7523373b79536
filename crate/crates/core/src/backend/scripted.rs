//! Fixture-driven backend for deterministic runs.
//!
//! A fixture maps request keys to queues of responses. A key is
//! `"<sha256 of prompt>/n=<n>/t=<temperature rounded to 0.1>"`; each queued
//! entry is either one completion string (for `n = 1`) or an array of exactly
//! `n` strings. Calls consume entries in order. `prompts` holds the
//! pretty-printed prompt per key for fixture authors and is ignored on
//! lookup.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, GenerationRequest, GenerationResult};

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub fn fixture_key(prompt: &str, n: usize, temperature: f64) -> String {
    let bucket = (temperature * 10.0).round() / 10.0;
    format!("{}/n={n}/t={bucket:.1}", prompt_digest(prompt))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureEntry {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default)]
    pub responses: BTreeMap<String, Vec<FixtureEntry>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompts: BTreeMap<String, String>,
}

impl Fixture {
    /// Queues a response for `prompt` and records the prompt in the manifest.
    pub fn push(
        &mut self,
        prompt: &str,
        n: usize,
        temperature: f64,
        completions: Vec<String>,
    ) -> &mut Self {
        let key = fixture_key(prompt, n, temperature);
        let entry = if completions.len() == 1 {
            FixtureEntry::One(completions.into_iter().next().unwrap_or_default())
        } else {
            FixtureEntry::Many(completions)
        };
        self.responses.entry(key.clone()).or_default().push(entry);
        self.prompts.insert(key, prompt.to_string());
        self
    }

    pub fn push_one(
        &mut self,
        prompt: &str,
        n: usize,
        temperature: f64,
        completion: impl Into<String>,
    ) -> &mut Self {
        self.push(prompt, n, temperature, vec![completion.into()])
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }

    pub fn merge(&mut self, other: Fixture) {
        for (k, v) in other.responses {
            self.responses.entry(k).or_default().extend(v);
        }
        self.prompts.extend(other.prompts);
    }
}

pub struct ScriptedBackend {
    queues: Mutex<HashMap<String, VecDeque<FixtureEntry>>>,
}

impl ScriptedBackend {
    pub fn new(fixture: Fixture) -> Self {
        Self {
            queues: Mutex::new(
                fixture
                    .responses
                    .into_iter()
                    .map(|(k, v)| (k, v.into()))
                    .collect(),
            ),
        }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::new(Fixture::load(path)?))
    }

    /// Entries not yet consumed.
    pub fn remaining(&self) -> usize {
        self.queues
            .lock()
            .expect("fixture lock")
            .values()
            .map(VecDeque::len)
            .sum()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let key = fixture_key(&request.prompt, request.n, request.temperature);
        let entry = {
            let mut queues = self.queues.lock().expect("fixture lock");
            queues.get_mut(&key).and_then(VecDeque::pop_front)
        };
        let entry = entry.ok_or_else(|| BackendError::FixtureMiss {
            digest: prompt_digest(&request.prompt),
            key: key.clone(),
        })?;
        let completions = match entry {
            FixtureEntry::One(s) => vec![s],
            FixtureEntry::Many(v) => v,
        };
        let result = GenerationResult {
            completions,
            token_logprobs: None,
        };
        super::check_count(request, &result)?;
        Ok(result)
    }
}
