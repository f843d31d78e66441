//! TOML run configuration and its hash.
//!
//! A config file has one table per concern:
//!
//! ```toml
//! seed = 0
//!
//! [world]
//! classes = 5
//! dim = 16
//!
//! [adaptation]
//! method = "full"
//! lambda_crp = 200.0
//!
//! [[stream.domains]]
//! kind = "rotation"
//! severity = 5
//! batches = 50
//! ```
//!
//! Missing keys take their defaults. The hash covers everything that can
//! change a result (seed, world, source, adaptation, stream) and nothing
//! that only says where files go.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ctta_core::adapter::{AdaptationConfig, Method};
use ctta_core::nn::Activation;
use ctta_core::optim::AdamConfig;
use ctta_core::relation::IntrinsicGraphSource;
use ctta_core::rng::SeedKey;
use ctta_core::source::PretrainConfig;
use ctta_core::stream::{DomainSpec, ScheduleMode, StreamSchedule, TransformKind, WorldConfig, DESK_KINDS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable that overrides the output root for relative output
/// directories.
pub const OUTPUT_ROOT_ENV: &str = "CTTA_OUTPUT_ROOT";

/// Key purposes for the per-run seed split.
const PRETRAIN_KEY: u64 = 101;
const STREAM_KEY: u64 = 102;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSection,
    pub source: SourceSection,
    pub adaptation: AdaptationSection,
    pub stream: StreamSection,
    pub run: RunSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub classes: usize,
    pub dim: usize,
    pub mean_scale: f64,
    pub cluster_std: f64,
    pub min_separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub per_class: usize,
    pub heldout: usize,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_epochs: usize,
    pub accuracy_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSection {
    pub method: String,
    pub alpha: f64,
    pub lambda_crp: f64,
    pub capacity: usize,
    pub lr: f64,
    pub ema_momentum: f64,
    pub strict_eviction: bool,
    pub intrinsic: String,
    pub whole_buffer_graph: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub mode: String,
    pub cycles: usize,
    pub batch_size: usize,
    pub domains: Vec<DomainEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub kind: String,
    pub severity: u8,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: PathBuf,
    /// Steps between adaptation checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Also write intrinsic and final target edge matrices.
    pub dump_edges: bool,
}

/// Grids for `ablate` and `sweep`; not part of a single run's identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub lambda_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub capacity_grid: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldSection::default(),
            source: SourceSection::default(),
            adaptation: AdaptationSection::default(),
            stream: StreamSection::default(),
            run: RunSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            classes: w.classes,
            dim: w.dim,
            mean_scale: w.mean_scale,
            cluster_std: w.cluster_std,
            min_separation: w.min_separation,
        }
    }
}

impl Default for SourceSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            per_class: 400,
            heldout: 2000,
            hidden: p.hidden,
            activation: p.activation.name().into(),
            lr: p.adam.lr,
            batch_size: p.batch_size,
            epochs: p.epochs,
            max_epochs: p.max_epochs,
            accuracy_floor: p.accuracy_floor,
        }
    }
}

impl Default for AdaptationSection {
    fn default() -> Self {
        let a = AdaptationConfig::default();
        Self {
            method: a.method.name().into(),
            alpha: a.alpha,
            lambda_crp: a.lambda_crp,
            capacity: a.capacity,
            lr: a.lr,
            ema_momentum: a.ema_momentum,
            strict_eviction: a.strict_eviction,
            intrinsic: a.intrinsic_source.name().into(),
            whole_buffer_graph: a.whole_buffer_graph,
        }
    }
}

impl Default for StreamSection {
    fn default() -> Self {
        let s = StreamSchedule::desk_default();
        Self {
            mode: s.mode.name().into(),
            cycles: s.cycles,
            batch_size: s.batch_size,
            domains: DESK_KINDS
                .iter()
                .map(|k| DomainEntry {
                    kind: k.name().into(),
                    severity: 5,
                    batches: 50,
                })
                .collect(),
        }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            dump_edges: false,
        }
    }
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            methods: ["st_only", "st_pce", "st_crp", "full", "source_only"]
                .map(String::from)
                .to_vec(),
            lambda_grid: vec![0.0, 50.0, 150.0, 200.0, 250.0, 300.0],
            alpha_grid: vec![0.05, 0.1, 0.2, 0.3, 0.4],
            capacity_grid: vec![50, 100, 200, 300, 400],
        }
    }
}

/// The parts of a config that determine results.
#[derive(Serialize)]
struct Identity<'a> {
    seed: u64,
    world: &'a WorldSection,
    source: &'a SourceSection,
    adaptation: &'a AdaptationSection,
    stream: &'a StreamSection,
}

/// The parts that determine the source model.
#[derive(Serialize)]
struct SourceIdentity<'a> {
    seed: u64,
    world: &'a WorldSection,
    source: &'a SourceSection,
}

fn sha256_toml<T: Serialize>(value: &T) -> Result<String> {
    let text = toml::to_string(value).context("serialising config for hashing")?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks every name and value by building the core configs once.
    pub fn validate(&self) -> Result<()> {
        WorldConfig::try_from(&self.world)?;
        self.pretrain_config()?;
        self.adaptation_config()?.validate()?;
        self.schedule()?.validate()?;
        for m in &self.experiment.methods {
            parse_method(m)?;
        }
        Ok(())
    }

    /// Hash of everything that changes a run's results.
    pub fn hash(&self) -> Result<String> {
        sha256_toml(&Identity {
            seed: self.seed,
            world: &self.world,
            source: &self.source,
            adaptation: &self.adaptation,
            stream: &self.stream,
        })
    }

    /// Hash of everything that changes the source model.
    pub fn source_hash(&self) -> Result<String> {
        sha256_toml(&SourceIdentity {
            seed: self.seed,
            world: &self.world,
            source: &self.source,
        })
    }

    pub fn world_key(&self) -> SeedKey {
        SeedKey(self.seed)
    }

    pub fn pretrain_key(&self) -> SeedKey {
        SeedKey(self.seed).child(PRETRAIN_KEY, 0)
    }

    pub fn stream_key(&self) -> SeedKey {
        SeedKey(self.seed).child(STREAM_KEY, 0)
    }

    pub fn world_config(&self) -> Result<WorldConfig> {
        WorldConfig::try_from(&self.world)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let s = &self.source;
        let activation = Activation::from_name(&s.activation)
            .ok_or_else(|| anyhow!("unknown activation {:?} (tanh, relu)", s.activation))?;
        if s.per_class == 0 || s.heldout == 0 {
            bail!("source.per_class and source.heldout must be positive");
        }
        Ok(PretrainConfig {
            hidden: s.hidden.clone(),
            activation,
            adam: AdamConfig::with_lr(s.lr),
            batch_size: s.batch_size,
            epochs: s.epochs,
            max_epochs: s.max_epochs,
            accuracy_floor: s.accuracy_floor,
        })
    }

    pub fn method(&self) -> Result<Method> {
        parse_method(&self.adaptation.method)
    }

    pub fn adaptation_config(&self) -> Result<AdaptationConfig> {
        let a = &self.adaptation;
        let intrinsic_source = IntrinsicGraphSource::from_name(&a.intrinsic).ok_or_else(|| {
            anyhow!(
                "unknown intrinsic graph source {:?} (prototypes, classifier_weights)",
                a.intrinsic
            )
        })?;
        Ok(AdaptationConfig {
            method: self.method()?,
            alpha: a.alpha,
            lambda_crp: a.lambda_crp,
            capacity: a.capacity,
            batch_size: self.stream.batch_size,
            lr: a.lr,
            ema_momentum: a.ema_momentum,
            strict_eviction: a.strict_eviction,
            intrinsic_source,
            whole_buffer_graph: a.whole_buffer_graph,
            seed: self.seed,
        })
    }

    /// Domain ids are positions in `stream.domains`.
    pub fn schedule(&self) -> Result<StreamSchedule> {
        let s = &self.stream;
        let mode = ScheduleMode::from_name(&s.mode)
            .ok_or_else(|| anyhow!("unknown stream mode {:?} (abrupt, gradual, cyclic)", s.mode))?;
        let segments = s
            .domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let kind =
                    TransformKind::from_name(&d.kind).ok_or_else(|| anyhow!("unknown transform kind {:?}", d.kind))?;
                Ok((DomainSpec::new(i as u32, kind, d.severity)?, d.batches))
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule = StreamSchedule {
            segments,
            mode,
            cycles: s.cycles,
            batch_size: s.batch_size,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// The output directory, placed under the override root when it is
    /// relative and the root is set.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.run.output_dir)
    }
}

impl TryFrom<&WorldSection> for WorldConfig {
    type Error = anyhow::Error;

    fn try_from(w: &WorldSection) -> Result<Self> {
        if w.classes < 2 || w.dim < 2 {
            bail!("world needs at least 2 classes and 2 dimensions");
        }
        Ok(WorldConfig {
            classes: w.classes,
            dim: w.dim,
            mean_scale: w.mean_scale,
            cluster_std: w.cluster_std,
            min_separation: w.min_separation,
        })
    }
}

pub fn parse_method(name: &str) -> Result<Method> {
    Method::from_name(name).ok_or_else(|| {
        anyhow!("unknown method {name:?} (full, st_only, st_pce, st_crp, source_only, entropy_min, reservoir_pce, fifo_pce)")
    })
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
