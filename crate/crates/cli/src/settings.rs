//! Effective settings of each subcommand. Defaults come first, then the
//! `--config` file, then explicit flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clicktrack_core::evaluation::EvalConfig;
use clicktrack_core::refiners::RefinerKind;
use clicktrack_core::tracker::TrackerConfig;
use clicktrack_core::training::corpus::CorpusConfig;
use clicktrack_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Recursive merge: objects merge key by key, anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_config(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !v.is_object() {
        bail!("{} must hold a JSON object", path.display());
    }
    Ok(v)
}

/// Builds `S` from `base`, overlaid with the file and then the flags.
pub fn resolve<S: Serialize + DeserializeOwned>(base: &S, file: &Value, flags: Value) -> Result<S> {
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, file.clone());
    merge(&mut v, flags);
    serde_json::from_value(v).context("invalid settings")
}

/// Nested object holding `value` at `path`, or nothing when `value` is
/// absent.
pub fn at<T: Serialize>(path: &[&str], value: Option<T>) -> Result<Value> {
    let Some(value) = value else {
        return Ok(Value::Object(Map::new()));
    };
    let mut v = serde_json::to_value(value)?;
    for key in path.iter().rev() {
        let mut m = Map::new();
        m.insert((*key).to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

/// Merges several `at` fragments.
pub fn flags(parts: Vec<Result<Value>>) -> Result<Value> {
    let mut out = Value::Object(Map::new());
    for p in parts {
        merge(&mut out, p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataSettings {
    pub out: PathBuf,
    pub corpus: CorpusConfig,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        Self {
            out: PathBuf::from("data"),
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub refiner: RefinerKind,
    pub out: PathBuf,
    /// Corpus directory; the training split is generated from `corpus`
    /// when absent.
    pub data: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
}

impl TrainSettings {
    pub fn new(refiner: RefinerKind) -> Self {
        Self {
            refiner,
            out: PathBuf::from("models").join(refiner.name()),
            data: None,
            corpus: CorpusConfig::default(),
            train: TrainConfig::new(refiner),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Compare,
    Deviation,
    Robustness,
    Attempts,
    Heldout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub experiment: ExperimentName,
    /// Directory with one checkpoint per refiner.
    pub models: PathBuf,
    pub out: PathBuf,
    /// Corpus directory; sequences and held-out scenes are generated from
    /// `corpus` when absent.
    pub data: Option<PathBuf>,
    pub corpus: CorpusConfig,
    /// Sequences used by the tracking experiments.
    pub sequences: usize,
    /// Scenes used by the held-out refinement experiment.
    pub heldout_scenes: usize,
    /// Click robustness with category guidance instead of the learnable
    /// vector.
    pub guided: bool,
    pub eval: EvalConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            experiment: ExperimentName::Compare,
            models: PathBuf::from("models"),
            out: PathBuf::from("report"),
            data: None,
            corpus: CorpusConfig::default(),
            sequences: 100,
            heldout_scenes: 300,
            guided: false,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSettings {
    /// Checkpoint directory, or a directory holding one per refiner.
    pub model: PathBuf,
    /// Required when `model` holds several checkpoints; defaults to gcr.
    pub refiner: Option<RefinerKind>,
    pub image: PathBuf,
    pub point: [f64; 2],
    pub category: Option<String>,
    pub stages: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSettings {
    /// Frame files in order, or directories whose PNG files are taken in
    /// name order.
    pub frames: Vec<PathBuf>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub tracker: TrackerConfig,
}
