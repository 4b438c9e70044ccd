//! Run configuration: a TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LoadSpec, SynthSpec};
use crate::episodes::{GridMode, OmniConfig, Options, TechniqueOptions};
use crate::error::{FwsError, Result};
use crate::learners::{Learner, TrainConfig};
use crate::net::NetConfig;
use crate::sparsify::{SizeParams, Technique};

/// Environment variable that overrides the root of relative paths.
pub const OUTPUT_ROOT_ENV: &str = "FWS_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDataConfig {
    pub train: usize,
    pub train_support: usize,
    pub val: usize,
    pub val_support: usize,
    pub test: usize,
    pub test_support: usize,
    pub spec: SynthSpec,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        Self { train: 200, train_support: 150, val: 0, val_support: 10, test: 50, test_support: 20, spec: SynthSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root; relative paths resolve against the output directory.
    pub root: PathBuf,
    pub train_split: String,
    /// Validation split; empty disables validation.
    pub val_split: String,
    pub test_split: String,
    pub load: LoadSpec,
    pub synth: SynthDataConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: String::new(),
            test_split: "test".into(),
            load: LoadSpec::default(),
            synth: SynthDataConfig::default(),
        }
    }
}

/// An evaluation grid: every (shots, technique, density) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub mode: GridMode,
    pub shots: Vec<usize>,
    pub techniques: Vec<TechniqueOptions>,
    pub query_batch: usize,
}

fn lists(fractions: &[f64], points: &[f64]) -> Vec<TechniqueOptions> {
    Technique::ALL
        .into_iter()
        .map(|t| {
            let v = if t.density_is_count() { points } else { fractions };
            TechniqueOptions::new(t, Options::List(v.to_vec()))
        })
        .collect()
}

impl GridConfig {
    /// Test grid: shots 1..20, five densities per technique, all queries.
    pub fn test_default() -> Self {
        Self {
            mode: GridMode::FullCombine,
            shots: vec![1, 5, 10, 15, 20],
            techniques: lists(&[0.1, 0.25, 0.5, 0.75, 1.0], &[1.0, 13.0, 25.0, 37.0, 50.0]),
            query_batch: 5,
        }
    }

    /// Validation grid: shots 5..15, three densities, one query batch per cell.
    pub fn val_default() -> Self {
        Self {
            mode: GridMode::Combine,
            shots: vec![5, 10, 15],
            techniques: lists(&[0.1, 0.5, 1.0], &[5.0, 25.0, 50.0]),
            query_batch: 5,
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::test_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub shots: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    /// Timed repetitions per cell; one extra warm-up run is discarded.
    pub reps: usize,
    /// Query images per timed episode.
    pub queries: usize,
    /// Inference procedures to time; empty means the trained learner.
    pub learners: Vec<Learner>,
    pub technique: Technique,
    pub density: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 5, 10, 20],
            batch_sizes: vec![1, 5],
            reps: 5,
            queries: 10,
            learners: Vec::new(),
            technique: Technique::Regions,
            density: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory, relative to the output root.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub net: NetConfig,
    pub sparsify: SizeParams,
    pub omni: OmniConfig,
    pub train: TrainConfig,
    pub validation: GridConfig,
    pub eval: GridConfig,
    pub profile: ProfileConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            net: NetConfig::default(),
            sparsify: SizeParams::default(),
            omni: OmniConfig::default(),
            train: TrainConfig::default(),
            validation: GridConfig::val_default(),
            eval: GridConfig::test_default(),
            profile: ProfileConfig::default(),
        }
    }
}

fn field<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| FwsError::Config(format!("{name}: {e}")))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FwsError::Config(e.to_string()))
    }

    /// Reads `path` (or the defaults when `None`) and applies `key=value`
    /// overrides, where values are TOML literals or bare strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| FwsError::io(p, e))?;
                toml::from_str(&text).map_err(|e| FwsError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| FwsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-level checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        field("net", self.net.validate())?;
        field("sparsify", self.sparsify.validate())?;
        field("omni", self.omni.validate())?;
        field("train", self.train.validate())?;
        field("data.synth.spec", self.data.synth.spec.validate())?;
        let s = &self.data.synth;
        if s.train_support >= s.train || s.test_support >= s.test || (s.val > 0 && s.val_support >= s.val) {
            return Err(FwsError::Config("data.synth: every split needs more images than its support".into()));
        }
        if s.train_support == 0 || s.test_support == 0 {
            return Err(FwsError::Config("data.synth: support sizes must be >= 1".into()));
        }
        for (name, g) in [("eval", &self.eval), ("validation", &self.validation)] {
            if g.shots.is_empty() || g.techniques.is_empty() || g.query_batch == 0 {
                return Err(FwsError::Config(format!("{name}: shots, techniques and query_batch must be non-empty")));
            }
            if g.mode == GridMode::Mix {
                return Err(FwsError::Config(format!("{name}.mode must be combine or full_combine")));
            }
            for t in &g.techniques {
                field(name, t.validate())?;
                if t.density.values().is_none() {
                    return Err(FwsError::Config(format!("{name}: {} densities must be a list", t.technique)));
                }
            }
        }
        let p = &self.profile;
        if p.reps < 3 {
            return Err(FwsError::Config("profile.reps must be >= 3".into()));
        }
        if p.shots.is_empty() || p.batch_sizes.is_empty() || p.batch_sizes.contains(&0) || p.shots.contains(&0) || p.queries == 0 {
            return Err(FwsError::Config("profile.shots, profile.batch_sizes and profile.queries must be non-empty and >= 1".into()));
        }
        field("profile.density", p.technique.validate_density(p.density))?;
        Ok(())
    }

    /// Digest of the whole configuration.
    pub fn fingerprint(&self) -> String {
        digest(self)
    }

    /// Digest of everything that determines trained parameters.
    pub fn train_fingerprint(&self) -> String {
        digest(&(self.seed, &self.data, &self.net, &self.sparsify, &self.omni, &self.train, &self.validation))
    }

    /// Digest of the trained parameters plus the evaluation grid.
    pub fn eval_fingerprint(&self) -> String {
        digest(&(self.train_fingerprint(), &self.eval))
    }

    /// Digest of the trained parameters plus the profiling settings.
    pub fn profile_fingerprint(&self) -> String {
        digest(&(self.train_fingerprint(), &self.profile))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| FwsError::Config(e.to_string()))
    }
}

fn digest<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("config serializes")))
}

/// Sets a dotted key in a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| FwsError::Config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| FwsError::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Root for relative paths: `$FWS_OUTPUT_ROOT` or the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}
