//! Synthetic drifting stream.
//!
//! The source domain is a mixture of isotropic Gaussian class clusters. Each
//! target domain applies a parametric transform (rotation, translation,
//! additive noise, per-dimension scaling or feature dropout) to freshly drawn
//! source points, with a strength that grows monotonically with the severity
//! level 1..=5. Severity 0 is the identity for every kind.
//!
//! Every batch is a pure function of `(seed, position)`, so streams replay
//! byte-for-byte and can be generated ahead of time.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::math::{norm, Matrix};
use crate::rng::{purpose, standard_normal, SeedKey};
use crate::{Error, Result};

/// Geometry of the source domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub classes: usize,
    pub dim: usize,
    /// Standard deviation of the class means around the origin.
    pub mean_scale: f64,
    /// Standard deviation of each cluster.
    pub cluster_std: f64,
    /// Minimum distance between any two class means, in cluster stds.
    pub min_separation: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            dim: 16,
            mean_scale: 1.0,
            cluster_std: 1.0,
            min_separation: 4.0,
        }
    }
}

/// The labeled source distribution and the key all domain parameters are
/// derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    config: WorldConfig,
    key: SeedKey,
    means: Vec<Vec<f64>>,
}

impl World {
    pub fn new(key: SeedKey, config: WorldConfig) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Config(format!(
                "class count must be >= 2, got {}",
                config.classes
            )));
        }
        if config.dim < 2 {
            return Err(Error::Config(format!("dimension must be >= 2, got {}", config.dim)));
        }
        if !(config.mean_scale > 0.0 && config.cluster_std > 0.0) {
            return Err(Error::Config("mean_scale and cluster_std must be positive".into()));
        }
        if !(config.min_separation >= 0.0) {
            return Err(Error::Config("min_separation must be >= 0".into()));
        }
        // Rejection sampling: a candidate mean too close to an accepted one is
        // redrawn.
        let mut rng = key.derive(purpose::SOURCE_WORLD, 0);
        let min_dist = config.min_separation * config.cluster_std;
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(config.classes);
        let mut draws = 0;
        while means.len() < config.classes {
            if draws == MAX_MEAN_DRAWS {
                return Err(Error::Config(format!(
                    "could not place {} class means {min_dist} apart; lower min_separation or raise mean_scale",
                    config.classes
                )));
            }
            draws += 1;
            let m = normal_vec(&mut rng, config.dim, config.mean_scale);
            if means.iter().all(|o| distance(o, &m) >= min_dist) {
                means.push(m);
            }
        }
        Ok(Self { config, key, means })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn key(&self) -> SeedKey {
        self.key
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `n` source points with uniformly drawn labels.
    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> LabeledData {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.config.classes)).collect();
        self.sample_labels(rng, labels)
    }

    fn sample_labels(&self, rng: &mut ChaCha8Rng, labels: Vec<usize>) -> LabeledData {
        let d = self.config.dim;
        let mut features = Matrix::zeros(labels.len(), d);
        for (i, &y) in labels.iter().enumerate() {
            for (x, &m) in features.row_mut(i).iter_mut().zip(&self.means[y]) {
                let z = standard_normal(rng);
                *x = m + self.config.cluster_std * z;
            }
        }
        LabeledData { features, labels }
    }

    /// The materialised transform of a domain.
    pub fn transform(&self, domain: &DomainSpec) -> DomainTransform {
        DomainTransform::new(self, domain.id, domain.kind)
    }
}

/// Features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Balanced labeled source dataset, `per_class` rows per class, class-major.
pub fn make_source_dataset(world: &World, per_class: usize) -> Result<LabeledData> {
    if per_class == 0 {
        return Err(Error::Config(
            "source dataset needs at least one sample per class".into(),
        ));
    }
    let mut rng = world.key.derive(purpose::SOURCE_DATA, 0);
    let labels = (0..world.config.classes)
        .flat_map(|c| core::iter::repeat_n(c, per_class))
        .collect();
    Ok(world.sample_labels(&mut rng, labels))
}

/// Held-out source data from a stream disjoint from the training set.
pub fn source_heldout(world: &World, n: usize) -> LabeledData {
    let mut rng = world.key.derive(purpose::SOURCE_HELDOUT, 0);
    world.sample(&mut rng, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Identity,
    Rotation,
    Translation,
    Noise,
    Scaling,
    Dropout,
}

impl TransformKind {
    pub const ALL: [TransformKind; 6] = [
        TransformKind::Identity,
        TransformKind::Rotation,
        TransformKind::Translation,
        TransformKind::Noise,
        TransformKind::Scaling,
        TransformKind::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Rotation => "rotation",
            TransformKind::Translation => "translation",
            TransformKind::Noise => "noise",
            TransformKind::Scaling => "scaling",
            TransformKind::Dropout => "dropout",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Strength of each transform at severity 1; severity `s` uses `s` times it.
pub mod strength {
    /// Rotation angle per severity level, radians.
    pub const ROTATION: f64 = 0.25;
    /// Translation length per severity level, in units of the cluster std.
    pub const TRANSLATION: f64 = 0.8;
    /// Added noise standard deviation per severity level.
    pub const NOISE: f64 = 0.3;
    /// Log-scale standard deviation per severity level.
    pub const SCALING: f64 = 0.25;
    /// Fraction of dimensions zeroed per severity level.
    pub const DROPOUT: f64 = 0.1;
}

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DomainSpec {
    pub id: u32,
    pub kind: TransformKind,
    pub severity: u8,
}

impl DomainSpec {
    pub fn new(id: u32, kind: TransformKind, severity: u8) -> Result<Self> {
        let spec = Self { id, kind, severity };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity(id: u32) -> Self {
        Self {
            id,
            kind: TransformKind::Identity,
            severity: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_SEVERITY).contains(&self.severity) {
            return Err(Error::Config(format!(
                "severity must be within 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }
}

/// Concrete transform parameters for one domain id.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    kind: TransformKind,
    /// Rotation planes (pairs of dimensions).
    planes: Vec<(usize, usize)>,
    /// Translation direction (unit) or log-scale pattern.
    direction: Vec<f64>,
    /// Dimension order in which features are dropped.
    drop_order: Vec<usize>,
    cluster_std: f64,
}

impl DomainTransform {
    fn new(world: &World, id: u32, kind: TransformKind) -> Self {
        let d = world.config.dim;
        let mut rng = world
            .key
            .child(purpose::DOMAIN_PARAMS, id as u64)
            .derive(purpose::DOMAIN_PARAMS, 0);
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut rng);
        let planes = order.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let mut direction = normal_vec(&mut rng, d, 1.0);
        if kind == TransformKind::Translation {
            let n = norm(&direction);
            direction.iter_mut().for_each(|x| *x /= n);
        }
        let mut drop_order: Vec<usize> = (0..d).collect();
        drop_order.shuffle(&mut rng);
        Self {
            kind,
            planes,
            direction,
            drop_order,
            cluster_std: world.config.cluster_std,
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    /// Applies the transform at `severity` in place. Only the noise kind
    /// draws from `rng`.
    pub fn apply(&self, severity: u8, features: &mut Matrix, rng: &mut ChaCha8Rng) {
        let s = severity as f64;
        if severity == 0 {
            return;
        }
        match self.kind {
            TransformKind::Identity => {}
            TransformKind::Rotation => {
                let (sin, cos) = libm::sincos(s * strength::ROTATION);
                for i in 0..features.rows() {
                    let row = features.row_mut(i);
                    for &(a, b) in &self.planes {
                        let (x, y) = (row[a], row[b]);
                        row[a] = cos * x - sin * y;
                        row[b] = sin * x + cos * y;
                    }
                }
            }
            TransformKind::Translation => {
                let len = s * strength::TRANSLATION * self.cluster_std;
                for i in 0..features.rows() {
                    for (x, &u) in features.row_mut(i).iter_mut().zip(&self.direction) {
                        *x += len * u;
                    }
                }
            }
            TransformKind::Noise => {
                let sd = s * strength::NOISE * self.cluster_std;
                for x in features.as_mut_slice() {
                    let z = standard_normal(rng);
                    *x += sd * z;
                }
            }
            TransformKind::Scaling => {
                let factors: Vec<f64> = self
                    .direction
                    .iter()
                    .map(|&z| libm::exp(s * strength::SCALING * z))
                    .collect();
                for i in 0..features.rows() {
                    for (x, &f) in features.row_mut(i).iter_mut().zip(&factors) {
                        *x *= f;
                    }
                }
            }
            TransformKind::Dropout => {
                let d = features.cols();
                let k = libm::round(s * strength::DROPOUT * d as f64) as usize;
                let dropped = &self.drop_order[..k.min(d)];
                for i in 0..features.rows() {
                    let row = features.row_mut(i);
                    for &j in dropped {
                        row[j] = 0.0;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Each domain at its own severity, in order.
    Abrupt,
    /// Each domain sweeps severity 1,2,3,4,5,4,3,2,1, splitting its batches
    /// across the nine levels.
    Gradual,
    /// The abrupt sequence repeated `cycles` times.
    Cyclic,
}

impl ScheduleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleMode::Abrupt => "abrupt",
            ScheduleMode::Gradual => "gradual",
            ScheduleMode::Cyclic => "cyclic",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "abrupt" => Some(ScheduleMode::Abrupt),
            "gradual" => Some(ScheduleMode::Gradual),
            "cyclic" => Some(ScheduleMode::Cyclic),
            _ => None,
        }
    }
}

pub const DESK_KINDS: [TransformKind; 8] = [
    TransformKind::Rotation,
    TransformKind::Translation,
    TransformKind::Noise,
    TransformKind::Scaling,
    TransformKind::Dropout,
    TransformKind::Rotation,
    TransformKind::Translation,
    TransformKind::Scaling,
];

pub const GRADUAL_RAMP: [u8; 9] = [1, 2, 3, 4, 5, 4, 3, 2, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSchedule {
    pub segments: Vec<(DomainSpec, usize)>,
    pub mode: ScheduleMode,
    /// Repetitions; only meaningful in cyclic mode.
    pub cycles: usize,
    pub batch_size: usize,
}

/// Where one batch sits in the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedBatch {
    pub step: u64,
    pub domain: DomainSpec,
    pub severity: u8,
    pub cycle: usize,
}

impl StreamSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("schedule has no domains".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.mode == ScheduleMode::Cyclic && self.cycles == 0 {
            return Err(Error::Config("cyclic schedule needs at least one cycle".into()));
        }
        for (d, _) in &self.segments {
            d.validate()?;
        }
        Ok(())
    }

    pub fn cycle_count(&self) -> usize {
        match self.mode {
            ScheduleMode::Cyclic => self.cycles,
            _ => 1,
        }
    }

    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|(_, n)| n).sum::<usize>() * self.cycle_count()
    }

    /// Every batch of the stream in order.
    pub fn plan(&self) -> Vec<PlannedBatch> {
        let mut out = Vec::with_capacity(self.total_batches());
        for cycle in 0..self.cycle_count() {
            for &(domain, count) in &self.segments {
                match self.mode {
                    ScheduleMode::Gradual => {
                        let levels = GRADUAL_RAMP.len();
                        for (k, &severity) in GRADUAL_RAMP.iter().enumerate() {
                            let n = count / levels + usize::from(k < count % levels);
                            for _ in 0..n {
                                out.push(PlannedBatch {
                                    step: out.len() as u64,
                                    domain,
                                    severity,
                                    cycle,
                                });
                            }
                        }
                    }
                    _ => {
                        for _ in 0..count {
                            out.push(PlannedBatch {
                                step: out.len() as u64,
                                domain,
                                severity: domain.severity,
                                cycle,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// The default desk stream: eight domains of 50 batches of 64, all at
    /// severity 5, two kinds repeated with fresh parameters.
    pub fn desk_default() -> Self {
        Self::abrupt(&DESK_KINDS, 5, 50, 64)
    }

    /// One domain per kind, ids in order, every domain at `severity`.
    pub fn abrupt(kinds: &[TransformKind], severity: u8, batches: usize, batch_size: usize) -> Self {
        Self {
            segments: kinds
                .iter()
                .enumerate()
                .map(|(i, &kind)| {
                    (
                        DomainSpec {
                            id: i as u32,
                            kind,
                            severity,
                        },
                        batches,
                    )
                })
                .collect(),
            mode: ScheduleMode::Abrupt,
            cycles: 1,
            batch_size,
        }
    }

    /// Distinct domains in order of first appearance.
    pub fn domains(&self) -> Vec<DomainSpec> {
        let mut seen: Vec<DomainSpec> = Vec::new();
        for (d, _) in &self.segments {
            if !seen.iter().any(|s| s.id == d.id) {
                seen.push(*d);
            }
        }
        seen
    }
}

/// One stream batch. The labels are for evaluation only; the adapter sees
/// [`UnlabeledBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    features: Matrix,
    labels: Vec<usize>,
    pub domain: DomainSpec,
    pub severity: u8,
    pub cycle: usize,
    pub step: u64,
}

/// The adapter-facing view of a batch: features only.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledBatch<'a> {
    features: &'a Matrix,
}

impl<'a> UnlabeledBatch<'a> {
    pub fn new(features: &'a Matrix) -> Self {
        Self { features }
    }

    pub fn features(&self) -> &'a Matrix {
        self.features
    }
}

impl LabeledBatch {
    pub fn unlabeled(&self) -> UnlabeledBatch<'_> {
        UnlabeledBatch {
            features: &self.features,
        }
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn hidden_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sequential cursor over a schedule.
#[derive(Debug, Clone)]
pub struct StreamCursor {
    world: World,
    key: SeedKey,
    batch_size: usize,
    plan: Vec<PlannedBatch>,
    transforms: Vec<(u32, DomainTransform)>,
    position: usize,
}

impl StreamCursor {
    pub fn new(world: World, schedule: &StreamSchedule, key: SeedKey) -> Result<Self> {
        schedule.validate()?;
        let transforms = schedule.domains().iter().map(|d| (d.id, world.transform(d))).collect();
        Ok(Self {
            world,
            key,
            batch_size: schedule.batch_size,
            plan: schedule.plan(),
            transforms,
            position: 0,
        })
    }

    /// Index of the next batch.
    pub fn offset(&self) -> usize {
        self.position
    }

    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    pub fn plan(&self) -> &[PlannedBatch] {
        &self.plan
    }

    /// Jumps to `position` (used on resume).
    pub fn seek(&mut self, position: usize) {
        self.position = position.min(self.plan.len());
    }

    /// The batch at `position`, independent of the cursor.
    pub fn batch_at(&self, position: usize) -> Option<LabeledBatch> {
        let planned = *self.plan.get(position)?;
        let mut rng = self.key.derive(purpose::STREAM_BATCH, planned.step);
        let LabeledData { mut features, labels } = self.world.sample(&mut rng, self.batch_size);
        let transform = &self
            .transforms
            .iter()
            .find(|(id, _)| *id == planned.domain.id)
            .expect("transform materialised for every domain")
            .1;
        transform.apply(planned.severity, &mut features, &mut rng);
        Some(LabeledBatch {
            features,
            labels,
            domain: planned.domain,
            severity: planned.severity,
            cycle: planned.cycle,
            step: planned.step,
        })
    }

    /// Next batch, or `None` at end of stream.
    pub fn next_batch(&mut self) -> Option<LabeledBatch> {
        let b = self.batch_at(self.position)?;
        self.position += 1;
        Some(b)
    }
}

impl Iterator for StreamCursor {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        self.next_batch()
    }
}

/// Held-out evaluation data for one domain at a given severity, drawn from a
/// stream disjoint from every adaptation batch.
pub fn eval_split(world: &World, domain: &DomainSpec, severity: u8, key: SeedKey, n: usize) -> LabeledData {
    let mut rng = key
        .child(purpose::EVAL_SPLIT, domain.id as u64)
        .derive(purpose::EVAL_SPLIT, severity as u64);
    let mut data = world.sample(&mut rng, n);
    world.transform(domain).apply(severity, &mut data.features, &mut rng);
    data
}

const MAX_MEAN_DRAWS: usize = 10_000;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for x in v.iter_mut() {
        let z = standard_normal(rng);
        *x = scale * z;
    }
    v
}
