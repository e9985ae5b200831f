//! Run configuration: one JSON document with a section per stage.
//!
//! A file only needs the keys it changes; everything else keeps its default.
//! Unknown keys at any depth are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::benchmark::Benchmark1d;
use crate::error::{Error, Result};
use crate::merging::{self, CostWeights};
use crate::pac::TrainConfig;
use crate::pipeline::{ExtractionRules, SmootherParams, Units, DEFAULT_FRAME_DT};
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed shared by every stage; `--seed` overrides it.
    pub seed: u64,
    /// Learner settings for the merge value function.
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub weights: CostWeights,
    pub oracle: OracleConfig,
    pub ingest: IngestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: merging::train_config(0),
            sim: SimConfig::default(),
            weights: CostWeights::default(),
            oracle: OracleConfig::default(),
            ingest: IngestConfig::default(),
        }
    }
}

/// Oracle comparison on the 1-D benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub benchmark: Benchmark1d,
    /// Passive samples for the learner.
    pub samples: usize,
    /// Paired evaluation episodes and their length in steps.
    pub episodes: usize,
    pub steps: usize,
    /// Fraction of the grid (centered) over which the value RMSE is taken.
    pub central_fraction: f64,
    /// Learner settings for the benchmark run.
    pub train: TrainConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let benchmark = Benchmark1d::default();
        let train = benchmark.train_config(0);
        Self { benchmark, samples: 100_000, episodes: 100, steps: 500, central_fraction: 0.8, train }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub units: Units,
    /// Frame spacing of the raw data (s).
    pub frame_dt: f64,
    pub smoother: SmootherParams,
    pub extraction: ExtractionRules,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            units: Units::Feet,
            frame_dt: DEFAULT_FRAME_DT,
            smoother: SmootherParams::default(),
            extraction: ExtractionRules::default(),
        }
    }
}

/// Overlays `patch` onto `base`: objects merge key by key, anything else replaces.
fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a partial document over the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !patch.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut full = serde_json::to_value(Self::default())?;
        overlay(&mut full, patch);
        let cfg: Self = serde_json::from_value(full).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies one seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.sim.seed = seed;
        self.oracle.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.oracle.train.validate()?;
        self.sim.validate()?;
        self.weights.validate()?;
        let o = &self.oracle;
        if o.samples == 0 || o.episodes == 0 || o.steps == 0 || !(o.central_fraction > 0.0 && o.central_fraction <= 1.0)
        {
            return Err(Error::Config(
                "oracle needs positive samples, episodes and steps and a fraction in (0, 1]".into(),
            ));
        }
        if !(self.ingest.frame_dt > 0.0) {
            return Err(Error::Config("ingest.frame_dt must be positive".into()));
        }
        let s = &self.ingest.smoother;
        if !(s.jerk_noise > 0.0 && s.measurement_std > 0.0) {
            return Err(Error::Config("smoother noise levels must be positive".into()));
        }
        Ok(())
    }

    /// The full effective document, pretty-printed.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First 16 hex digits of SHA-256 over the compact effective document.
    pub fn hash(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }
}
