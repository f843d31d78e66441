//! The online teacher-student adaptation loop.
//!
//! Per batch:
//!
//! 1. student forward; its argmax is the online prediction for the batch,
//!    produced before any update,
//! 2. teacher forward for pseudo-labels,
//! 3. replay draw from the buffer as it stood before this batch,
//! 4. entropy-gated admission of the batch into the buffer,
//! 5. target relation graph from the student's features of the replay draw,
//! 6. `L_T = L_ST + L_PCE + lambda * L_CRP`,
//! 7. one Adam step on the student,
//! 8. teacher EMA towards the updated student.

use alloc::format;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use crate::buffer::{Admission, BufferPolicy, UncertaintyBuffer, UncertaintyThreshold};
use crate::losses::{entropy_min_loss, replay_loss, self_training_loss, total_loss, LossBreakdown};
use crate::math::Matrix;
use crate::nn::{ForwardTrace, NetworkArch, ParamSet, Upstream};
use crate::optim::{check_momentum, ema_update_in_place, AdamConfig, OptimizerState};
use crate::relation::{crp_loss, estimate_target_graph, ClassRelationGraph, IntrinsicGraphSource};
use crate::rng::{purpose, SeedKey};
use crate::stream::{StreamCursor, TransformKind, UnlabeledBatch};
use crate::{Error, Result};

/// Which components a run wires together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Uncertainty buffer, replay loss and relation loss.
    Full,
    /// Self-training only; no buffer.
    StOnly,
    /// Self-training plus replay from the uncertainty buffer.
    StPce,
    /// Self-training plus the relation loss; the buffer only feeds the graph.
    StCrp,
    /// Frozen source model.
    SourceOnly,
    /// Student-only entropy minimisation on the live batch.
    EntropyMin,
    /// Replay from a reservoir buffer.
    ReservoirPce,
    /// Replay from a FIFO buffer.
    FifoPce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    None,
    SelfTraining,
    EntropyMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    pub objective: Objective,
    /// `None` disables buffering entirely.
    pub buffer: Option<BufferKind>,
    pub replay: bool,
    pub relation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferKind {
    Uncertainty,
    Reservoir,
    Fifo,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Full,
        Method::StOnly,
        Method::StPce,
        Method::StCrp,
        Method::SourceOnly,
        Method::EntropyMin,
        Method::ReservoirPce,
        Method::FifoPce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::StOnly => "st_only",
            Method::StPce => "st_pce",
            Method::StCrp => "st_crp",
            Method::SourceOnly => "source_only",
            Method::EntropyMin => "entropy_min",
            Method::ReservoirPce => "reservoir_pce",
            Method::FifoPce => "fifo_pce",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn wiring(self) -> Wiring {
        let st = Objective::SelfTraining;
        match self {
            Method::Full => Wiring {
                objective: st,
                buffer: Some(BufferKind::Uncertainty),
                replay: true,
                relation: true,
            },
            Method::StOnly => Wiring {
                objective: st,
                buffer: None,
                replay: false,
                relation: false,
            },
            Method::StPce => Wiring {
                objective: st,
                buffer: Some(BufferKind::Uncertainty),
                replay: true,
                relation: false,
            },
            Method::StCrp => Wiring {
                objective: st,
                buffer: Some(BufferKind::Uncertainty),
                replay: false,
                relation: true,
            },
            Method::SourceOnly => Wiring {
                objective: Objective::None,
                buffer: None,
                replay: false,
                relation: false,
            },
            Method::EntropyMin => Wiring {
                objective: Objective::EntropyMin,
                buffer: None,
                replay: false,
                relation: false,
            },
            Method::ReservoirPce => Wiring {
                objective: st,
                buffer: Some(BufferKind::Reservoir),
                replay: true,
                relation: false,
            },
            Method::FifoPce => Wiring {
                objective: st,
                buffer: Some(BufferKind::Fifo),
                replay: true,
                relation: false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub method: Method,
    /// Entropy gate coefficient; `H0 = alpha ln C`.
    pub alpha: f64,
    pub lambda_crp: f64,
    pub capacity: usize,
    /// Replay draw size; the stream batch size in practice.
    pub batch_size: usize,
    pub lr: f64,
    pub ema_momentum: f64,
    pub strict_eviction: bool,
    pub intrinsic_source: IntrinsicGraphSource,
    /// Estimate the target graph from every buffered entry instead of the
    /// replay draw.
    pub whole_buffer_graph: bool,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            method: Method::Full,
            alpha: 0.1,
            lambda_crp: 200.0,
            capacity: 200,
            batch_size: 64,
            lr: 1e-3,
            ema_momentum: 0.999,
            strict_eviction: true,
            intrinsic_source: IntrinsicGraphSource::ClassPrototypes,
            whole_buffer_graph: false,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda_crp >= 0.0 && self.lambda_crp.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_crp must be >= 0, got {}",
                self.lambda_crp
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        check_momentum(self.ema_momentum)
    }

    pub fn buffer_policy(&self) -> Option<BufferPolicy> {
        self.method.wiring().buffer.map(|k| match k {
            BufferKind::Uncertainty => BufferPolicy::Uncertainty {
                strict: self.strict_eviction,
            },
            BufferKind::Reservoir => BufferPolicy::Reservoir,
            BufferKind::Fifo => BufferPolicy::Fifo,
        })
    }

    /// Whether the relation loss participates at all.
    pub fn relation_active(&self) -> bool {
        self.method.wiring().relation && self.lambda_crp > 0.0
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// Student, teacher, optimizer, buffer and intrinsic graph.
#[derive(Debug, Clone)]
pub struct TeacherStudentState {
    arch: NetworkArch,
    config: AdaptationConfig,
    student: ParamSet,
    teacher: ParamSet,
    optimizer: OptimizerState,
    buffer: UncertaintyBuffer,
    intrinsic: ClassRelationGraph,
    step: u64,
}

/// What one adaptation step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Student argmax before the update.
    pub predictions: Vec<usize>,
    pub losses: LossBreakdown,
    pub admitted: usize,
    pub replay_len: usize,
}

impl TeacherStudentState {
    /// Teacher and student both start as the source parameters; the buffer
    /// starts empty.
    pub fn new(
        arch: NetworkArch,
        source: ParamSet,
        intrinsic: ClassRelationGraph,
        config: AdaptationConfig,
    ) -> Result<Self> {
        config.validate()?;
        arch.check_params(&source)
            .map_err(|e| Error::Checkpoint(format!("source parameters do not fit the architecture: {e}")))?;
        if intrinsic.classes() != arch.classes() {
            return Err(Error::Checkpoint(format!(
                "intrinsic graph has {} classes, model has {}",
                intrinsic.classes(),
                arch.classes()
            )));
        }
        if config.relation_active() && intrinsic.present_count() != arch.classes() {
            return Err(Error::Config("intrinsic graph must cover every class".into()));
        }
        let threshold = UncertaintyThreshold::new(config.alpha, arch.classes())?;
        let capacity = if config.buffer_policy().is_some() {
            config.capacity
        } else {
            0
        };
        let policy = config.buffer_policy().unwrap_or(BufferPolicy::Uncertainty {
            strict: config.strict_eviction,
        });
        let buffer = UncertaintyBuffer::new(
            capacity,
            arch.input_dim(),
            threshold,
            policy,
            SeedKey(config.seed).child(purpose::RESERVOIR, 0),
        );
        Ok(Self {
            optimizer: OptimizerState::new(config.adam(), &source),
            teacher: source.clone(),
            student: source,
            arch,
            config,
            buffer,
            intrinsic,
            step: 0,
        })
    }

    /// Reassembles a state from checkpointed parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        arch: NetworkArch,
        config: AdaptationConfig,
        student: ParamSet,
        teacher: ParamSet,
        optimizer: OptimizerState,
        buffer: UncertaintyBuffer,
        intrinsic: ClassRelationGraph,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        arch.check_params(&student)?;
        arch.check_params(&teacher)?;
        arch.check_params(optimizer.first_moment())?;
        if buffer.feature_dim() != arch.input_dim() || intrinsic.classes() != arch.classes() {
            return Err(Error::Checkpoint(
                "buffer or graph does not fit the architecture".into(),
            ));
        }
        Ok(Self {
            arch,
            config,
            student,
            teacher,
            optimizer,
            buffer,
            intrinsic,
            step,
        })
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.config
    }

    pub fn student(&self) -> &ParamSet {
        &self.student
    }

    pub fn teacher(&self) -> &ParamSet {
        &self.teacher
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn buffer(&self) -> &UncertaintyBuffer {
        &self.buffer
    }

    pub fn intrinsic_graph(&self) -> &ClassRelationGraph {
        &self.intrinsic
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn key(&self) -> SeedKey {
        SeedKey(self.config.seed)
    }

    /// Predict on `batch`, then adapt to it.
    pub fn adapt_step(&mut self, batch: UnlabeledBatch<'_>) -> Result<StepOutput> {
        let x = batch.features();
        let wiring = self.config.method.wiring();
        let student_trace = self.arch.forward(&self.student, x)?;
        let predictions = student_trace.predictions();

        let out = match wiring.objective {
            Objective::None => StepOutput {
                predictions,
                losses: LossBreakdown::default(),
                admitted: 0,
                replay_len: 0,
            },
            Objective::EntropyMin => {
                let loss = entropy_min_loss(student_trace.probs())?;
                let losses = total_loss(loss.value, 0.0, 0.0, 0.0);
                self.check_finite(&losses)?;
                let grads = self
                    .arch
                    .backward(&self.student, &student_trace, &Upstream::logits_only(loss.logits))?;
                self.optimizer.adam_step(&mut self.student, &grads)?;
                StepOutput {
                    predictions,
                    losses,
                    admitted: 0,
                    replay_len: 0,
                }
            }
            Objective::SelfTraining => self.self_training_step(x, student_trace, predictions)?,
        };
        self.step += 1;
        Ok(out)
    }

    fn self_training_step(
        &mut self,
        x: &Matrix,
        student_trace: ForwardTrace,
        predictions: Vec<usize>,
    ) -> Result<StepOutput> {
        let wiring = self.config.method.wiring();
        let classes = self.arch.classes();
        let teacher_trace = self.arch.forward(&self.teacher, x)?;

        let uses_buffer = wiring.buffer.is_some() && (wiring.replay || self.config.relation_active());
        let replay = if uses_buffer {
            Some(self.buffer.sample_replay(self.config.batch_size, self.key(), self.step))
        } else {
            None
        };
        let graph_batch = if uses_buffer && self.config.relation_active() && self.config.whole_buffer_graph {
            Some(self.buffer.all())
        } else {
            None
        };

        let mut admitted = 0;
        if wiring.buffer.is_some() {
            for i in 0..x.rows() {
                let outcome = self.buffer.admit(
                    x.row(i),
                    teacher_trace.probs().row(i),
                    student_trace.probs().row(i),
                    self.step,
                )?;
                if outcome != Admission::Rejected {
                    admitted += 1;
                }
            }
        }

        let st = self_training_loss(teacher_trace.probs(), student_trace.probs())?;
        let mut grads = self
            .arch
            .backward(&self.student, &student_trace, &Upstream::logits_only(st.logits))?;

        let mut pce_value = 0.0;
        let mut crp_value = 0.0;
        let replay_len = replay.as_ref().map_or(0, |r| r.len());
        if let Some(replay) = replay.filter(|r| !r.is_empty()) {
            let trace = self.arch.forward(&self.student, &replay.features)?;
            let mut logit_grad = Matrix::zeros(replay.len(), classes);
            if wiring.replay {
                let pce = replay_loss(&replay.labels, trace.probs())?;
                pce_value = pce.value;
                logit_grad = pce.logits;
            }
            let mut feature_grad = None;
            if self.config.relation_active() && graph_batch.is_none() {
                let (value, g) = self.relation_grad(trace.features(), &replay.labels)?;
                crp_value = value;
                feature_grad = g;
            }
            if wiring.replay || feature_grad.is_some() {
                let g = self.arch.backward(
                    &self.student,
                    &trace,
                    &Upstream {
                        logits: logit_grad,
                        features: feature_grad,
                    },
                )?;
                grads.add_scaled(&g, 1.0)?;
            }
        }
        if let Some(all) = graph_batch.filter(|b| !b.is_empty()) {
            let trace = self.arch.forward(&self.student, &all.features)?;
            let (value, g) = self.relation_grad(trace.features(), &all.labels)?;
            crp_value = value;
            if let Some(fg) = g {
                let up = Upstream {
                    logits: Matrix::zeros(all.len(), classes),
                    features: Some(fg),
                };
                grads.add_scaled(&self.arch.backward(&self.student, &trace, &up)?, 1.0)?;
            }
        }

        let losses = total_loss(st.value, pce_value, crp_value, self.relation_lambda());
        self.check_finite(&losses)?;
        self.optimizer.adam_step(&mut self.student, &grads)?;
        ema_update_in_place(&mut self.teacher, &self.student, self.config.ema_momentum)?;
        Ok(StepOutput {
            predictions,
            losses,
            admitted,
            replay_len,
        })
    }

    fn relation_lambda(&self) -> f64 {
        if self.config.relation_active() {
            self.config.lambda_crp
        } else {
            0.0
        }
    }

    /// `lambda * L_CRP` pushed back to per-sample feature gradients.
    fn relation_grad(&self, features: &Matrix, labels: &[usize]) -> Result<(f64, Option<Matrix>)> {
        let Some(target) = estimate_target_graph(features, labels, self.arch.classes())? else {
            return Ok((0.0, None));
        };
        let loss = crp_loss(&self.intrinsic, target.graph())?;
        if loss.value == 0.0 {
            return Ok((0.0, None));
        }
        let mut g = target.feature_grad(&loss.edge_grad);
        let lambda = self.config.lambda_crp;
        g.as_mut_slice().iter_mut().for_each(|v| *v *= lambda);
        Ok((loss.value, Some(g)))
    }

    fn check_finite(&self, losses: &LossBreakdown) -> Result<()> {
        if losses.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{losses:?}"),
            })
        }
    }
}

/// Per-domain running error tallies, keyed by domain id in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainTally {
    entries: Vec<(u32, u64, u64)>,
}

impl DomainTally {
    pub fn from_entries(entries: Vec<(u32, u64, u64)>) -> Self {
        Self { entries }
    }

    /// `(domain id, wrong, total)`.
    pub fn entries(&self) -> &[(u32, u64, u64)] {
        &self.entries
    }

    /// Records a batch and returns the domain's running error.
    pub fn record(&mut self, domain: u32, wrong: u64, total: u64) -> f64 {
        let slot = match self.entries.iter().position(|e| e.0 == domain) {
            Some(i) => i,
            None => {
                self.entries.push((domain, 0, 0));
                self.entries.len() - 1
            }
        };
        let e = &mut self.entries[slot];
        e.1 += wrong;
        e.2 += total;
        e.1 as f64 / e.2.max(1) as f64
    }
}

/// One row of per-step metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub domain: u32,
    pub kind: TransformKind,
    pub severity: u8,
    pub cycle: usize,
    pub batch_size: usize,
    pub batch_errors: usize,
    pub cumulative_domain_error: f64,
    pub losses: LossBreakdown,
    pub buffer_len: usize,
    pub label_histogram: Vec<usize>,
}

impl MetricsRecord {
    pub fn batch_error(&self) -> f64 {
        self.batch_errors as f64 / self.batch_size.max(1) as f64
    }
}

/// Runs the stream from the cursor's position to its end (or until `on_step`
/// breaks). `on_step` sees the state after each update together with the
/// record of that step.
pub fn run_stream<F>(
    state: &mut TeacherStudentState,
    cursor: &mut StreamCursor,
    tally: &mut DomainTally,
    mut on_step: F,
) -> Result<Vec<MetricsRecord>>
where
    F: FnMut(&TeacherStudentState, &MetricsRecord) -> ControlFlow<()>,
{
    let mut records = Vec::with_capacity(cursor.len() - cursor.offset());
    while let Some(batch) = cursor.next_batch() {
        let out = state.adapt_step(batch.unlabeled())?;
        let wrong = out
            .predictions
            .iter()
            .zip(batch.hidden_labels())
            .filter(|(p, y)| p != y)
            .count();
        let cumulative = tally.record(batch.domain.id, wrong as u64, batch.len() as u64);
        let record = MetricsRecord {
            step: batch.step,
            domain: batch.domain.id,
            kind: batch.domain.kind,
            severity: batch.severity,
            cycle: batch.cycle,
            batch_size: batch.len(),
            batch_errors: wrong,
            cumulative_domain_error: cumulative,
            losses: out.losses,
            buffer_len: state.buffer().len(),
            label_histogram: state.buffer().label_histogram(),
        };
        let flow = on_step(state, &record);
        records.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(records)
}

/// Error rate of `params` on labeled data, for forgetting probes.
pub fn error_rate(arch: &NetworkArch, params: &ParamSet, features: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = arch.forward(params, features)?.predictions();
    let wrong = pred.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use alloc::vec;

    fn setup(method: Method) -> TeacherStudentState {
        let arch = NetworkArch::new(3, vec![4], 3, Activation::Tanh).unwrap();
        let params = arch.init_params(SeedKey(1));
        let graph = crate::relation::graph_from_classifier(&arch, &params).unwrap();
        let config = AdaptationConfig {
            method,
            alpha: 1.0,
            capacity: 8,
            batch_size: 4,
            lr: 1e-2,
            ..Default::default()
        };
        TeacherStudentState::new(arch, params, graph, config).unwrap()
    }

    fn batch() -> Matrix {
        Matrix::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn init_copies_source_into_both_models() {
        let s = setup(Method::Full);
        assert_eq!(s.student(), s.teacher());
        assert_eq!(s.buffer().len(), 0);
        assert_eq!(s.intrinsic_graph().present_count(), 3);
    }

    #[test]
    fn first_step_has_no_replay_terms() {
        let mut s = setup(Method::Full);
        let x = batch();
        let out = s.adapt_step(UnlabeledBatch::new(&x)).unwrap();
        assert_eq!(out.losses.replay, 0.0);
        assert_eq!(out.losses.relation, 0.0);
        assert_eq!(out.losses.total, out.losses.self_training);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn source_only_never_moves() {
        let mut s = setup(Method::SourceOnly);
        let before = s.student().clone();
        let x = batch();
        for _ in 0..3 {
            s.adapt_step(UnlabeledBatch::new(&x)).unwrap();
        }
        assert_eq!(s.student(), &before);
    }

    #[test]
    fn wiring_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::from_name(m.name()), Some(m));
        }
    }

    #[test]
    fn config_validation() {
        let bad = AdaptationConfig {
            ema_momentum: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AdaptationConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn arch_mismatch_is_a_checkpoint_error() {
        let arch = NetworkArch::new(3, vec![4], 3, Activation::Tanh).unwrap();
        let other = NetworkArch::new(3, vec![5], 3, Activation::Tanh).unwrap();
        let params = other.init_params(SeedKey(1));
        let graph = crate::relation::graph_from_classifier(&other, &params).unwrap();
        let err = TeacherStudentState::new(arch, params, graph, AdaptationConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn tally_tracks_running_error() {
        let mut t = DomainTally::default();
        assert_eq!(t.record(3, 1, 4), 0.25);
        assert_eq!(t.record(5, 0, 4), 0.0);
        assert_eq!(t.record(3, 3, 4), 0.5);
    }
}
