//! Run configuration: one JSON document with a section per command.

use std::path::Path;

use lcmem_core::atlas::ScoreOptions;
use lcmem_core::augment::AugmentationKind;
use lcmem_core::metrics::baselines::BaselineKind;
use lcmem_core::metrics::{validate_sweep, CalibrationTarget, SweepEntry};
use lcmem_core::training::TrainConfig;
use lcmem_core::world::{CorpusSpec, Split, ToyAutoencoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, SCHEMA_VERSION};

pub const DEFAULT_SEED: u64 = 42;
pub const THREADS_ENV: &str = "LCMEM_THREADS";

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_mixing_seed() -> u64 {
    ToyAutoencoder::DEFAULT_MIXING_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Copied into every seeded section when the config is resolved.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 picks the machine's parallelism.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_mixing_seed")]
    pub mixing_seed: u64,
    #[serde(default = "default_corpus")]
    pub corpus: CorpusSpec,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub atlas: AtlasConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn default_corpus() -> CorpusSpec {
    CorpusSpec::desk_default(DEFAULT_SEED)
}

fn default_train() -> TrainConfig {
    TrainConfig::new(DEFAULT_SEED)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: DEFAULT_SEED,
            threads: 0,
            mixing_seed: default_mixing_seed(),
            corpus: default_corpus(),
            train: default_train(),
            eval: EvalConfig::default(),
            atlas: AtlasConfig::default(),
            audit: AuditConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Operating point fixed on the validation split for copy detection.
    pub calibration: CalibrationTarget,
    pub baselines: Vec<BaselineKind>,
    pub sweep: Vec<SweepEntry>,
}

/// Five strengths from 0 to 1 for every kind with a strength knob.
pub fn default_sweep() -> Vec<SweepEntry> {
    AugmentationKind::ALL
        .into_iter()
        .filter(|k| !matches!(k, AugmentationKind::FlipHorizontal | AugmentationKind::SampleWiseNormalization))
        .map(|kind| SweepEntry { kind, strengths: vec![0.0, 0.25, 0.5, 0.75, 1.0] })
        .collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            calibration: CalibrationTarget::Recall(0.95),
            baselines: BaselineKind::ALL.to_vec(),
            sweep: default_sweep(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtlasConfig {
    pub split: Split,
    /// Images held out as queries, one per identity; 0 keeps every image in the atlas.
    pub holdout_queries: usize,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig { split: Split::Test, holdout_queries: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub score: ScoreOptions,
    /// Replaces `score.threshold` with one calibrated on validation pairs.
    pub calibration: Option<CalibrationTarget>,
    pub memrate: MemRateConfig,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig { score: ScoreOptions::default(), calibration: None, memrate: MemRateConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemRateConfig {
    pub split: Split,
    pub p_mem: f64,
    pub trials: usize,
    /// Generator draws allowed per filtered sample.
    pub max_attempts: usize,
    /// Upper bound of the augmentation strength of memorized copies.
    pub copy_strength: f64,
}

impl Default for MemRateConfig {
    fn default() -> Self {
        MemRateConfig { split: Split::Test, p_mem: 0.1, trials: 1000, max_attempts: 16, copy_strength: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub atlas_rows: usize,
    pub queries: usize,
    pub thread_counts: Vec<usize>,
    pub block_rows: usize,
    /// Timed repetitions per thread count; the fastest is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { atlas_rows: 20_000, queries: 64, thread_counts: vec![1, 2, 4], block_rows: 1024, repeats: 3 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = io::read_json(path)?;
        io::check_schema(path, cfg.schema_version)?;
        Ok(cfg)
    }

    /// Applies a seed override, propagates the seed into every section and
    /// validates the result.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.corpus.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.train.model.input != self.corpus.shape.latent().len() {
            return Err(Error::Config(format!(
                "train.model.input {} does not match the corpus latent width {}",
                self.train.model.input,
                self.corpus.shape.latent().len()
            )));
        }
        validate_sweep(&self.eval.sweep)?;
        self.audit.score.validate()?;
        let m = &self.audit.memrate;
        if !(0.0..=1.0).contains(&m.p_mem) || m.trials == 0 || m.max_attempts == 0 {
            return Err(Error::Config("audit.memrate needs p_mem in [0, 1] and positive trials and max_attempts".into()));
        }
        if !(0.0..=1.0).contains(&m.copy_strength) {
            return Err(Error::Config("audit.memrate.copy_strength must be in [0, 1]".into()));
        }
        let b = &self.bench;
        if b.atlas_rows == 0 || b.queries == 0 || b.block_rows == 0 || b.repeats == 0 || b.thread_counts.is_empty() {
            return Err(Error::Config("bench sizes, repeats and thread_counts must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Thread count from the flag, then `LCMEM_THREADS`, then the config; 0 means
/// one per available core.
pub fn resolve_threads(flag: Option<usize>, configured: usize) -> Result<usize> {
    let requested = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            Err(_) => configured,
        },
    };
    Ok(if requested == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { requested })
}
