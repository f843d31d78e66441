//! Entropy-gated sample buffer.
//!
//! A candidate is admitted only when the student's prediction entropy is
//! below `H0 = alpha * ln C`. While there is room it is simply stored; once
//! the buffer is full it displaces the stored entry with the highest
//! admission entropy (oldest first on ties). In strict mode the displacement
//! additionally requires the candidate to be more certain than that entry.
//!
//! Entries keep the teacher's pseudo-label and the entropy measured at
//! admission; neither is refreshed later.
//!
//! Reservoir and FIFO policies exist for ablation baselines only. They do not
//! apply the entropy gate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use rand::Rng;

use crate::math::{argmax, Matrix};
use crate::rng::{purpose, SeedKey};
use crate::{safe_ln, Error, Result};

const SUM_TOLERANCE: f64 = 1e-6;

/// Shannon entropy in nats, `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Input("probabilities must be finite and non-negative".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Input(format!("probabilities sum to {sum}")));
    }
    Ok(entropy_unchecked(probs))
}

pub(crate) fn entropy_unchecked(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| if p > 0.0 { p * safe_ln(p) } else { 0.0 })
        .sum::<f64>()
}

/// `H0 = alpha * ln C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyThreshold {
    alpha: f64,
    classes: usize,
}

impl UncertaintyThreshold {
    pub fn new(alpha: f64, classes: usize) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if classes < 2 {
            return Err(Error::Config(format!("class count must be >= 2, got {classes}")));
        }
        Ok(Self { alpha, classes })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn h0(&self) -> f64 {
        self.alpha * libm::log(self.classes as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferPolicy {
    /// Entropy gate plus highest-entropy eviction. `strict` requires the
    /// candidate to be strictly more certain than the entry it evicts.
    Uncertainty { strict: bool },
    /// Classic reservoir sampling over every sample seen.
    Reservoir,
    /// First in, first out.
    Fifo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub features: Vec<f64>,
    pub pseudo_label: usize,
    /// Student entropy at admission, nats.
    pub entropy: f64,
    /// Adaptation step at which the entry was admitted.
    pub step: u64,
    /// Global admission counter, unique per entry.
    pub seq: u64,
}

impl BufferEntry {
    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; classes];
        v[self.pseudo_label] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Admission {
    Rejected,
    Inserted,
    Replaced(BufferEntry),
}

impl Admission {
    pub fn is_stored(&self) -> bool {
        !matches!(self, Admission::Rejected)
    }
}

/// Total order on entropies for the eviction index.
#[derive(Debug, Clone, Copy)]
struct EntropyKey(f64);

impl PartialEq for EntropyKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for EntropyKey {}
impl PartialOrd for EntropyKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for EntropyKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Largest key = highest entropy, then oldest step, then oldest admission.
type EvictionKey = (EntropyKey, Reverse<u64>, Reverse<u64>);

fn eviction_key(e: &BufferEntry) -> EvictionKey {
    (EntropyKey(e.entropy), Reverse(e.step), Reverse(e.seq))
}

/// A replay draw: features, their stored pseudo-labels, and the slots drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub slots: Vec<usize>,
}

impl ReplayBatch {
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }
}

/// Read-only summary for audit output.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferSnapshot {
    pub capacity: usize,
    pub entropies: Vec<f64>,
    pub label_histogram: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct UncertaintyBuffer {
    capacity: usize,
    feature_dim: usize,
    threshold: UncertaintyThreshold,
    policy: BufferPolicy,
    key: SeedKey,
    slots: Vec<BufferEntry>,
    by_entropy: BTreeMap<EvictionKey, usize>,
    by_age: BTreeMap<u64, usize>,
    next_seq: u64,
    seen: u64,
}

impl UncertaintyBuffer {
    /// An empty buffer. `key` only feeds the reservoir policy's coin flips.
    pub fn new(
        capacity: usize,
        feature_dim: usize,
        threshold: UncertaintyThreshold,
        policy: BufferPolicy,
        key: SeedKey,
    ) -> Self {
        Self {
            capacity,
            feature_dim,
            threshold,
            policy,
            key,
            slots: Vec::new(),
            by_entropy: BTreeMap::new(),
            by_age: BTreeMap::new(),
            next_seq: 0,
            seen: 0,
        }
    }

    /// Restores a buffer from persisted entries (in slot order) and counters.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        capacity: usize,
        feature_dim: usize,
        threshold: UncertaintyThreshold,
        policy: BufferPolicy,
        key: SeedKey,
        entries: Vec<BufferEntry>,
        next_seq: u64,
        seen: u64,
    ) -> Result<Self> {
        if entries.len() > capacity {
            return Err(Error::Checkpoint(format!(
                "{} buffered entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        let mut buf = Self::new(capacity, feature_dim, threshold, policy, key);
        for e in entries {
            if e.features.len() != feature_dim {
                return Err(Error::dim("buffer entry", feature_dim, e.features.len()));
            }
            if e.pseudo_label >= threshold.classes() {
                return Err(Error::Checkpoint(format!(
                    "pseudo-label {} out of range",
                    e.pseudo_label
                )));
            }
            let slot = buf.slots.len();
            buf.by_entropy.insert(eviction_key(&e), slot);
            buf.by_age.insert(e.seq, slot);
            buf.slots.push(e);
        }
        buf.next_seq = next_seq;
        buf.seen = seen;
        Ok(buf)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn threshold(&self) -> UncertaintyThreshold {
        self.threshold
    }

    pub fn policy(&self) -> BufferPolicy {
        self.policy
    }

    pub fn key(&self) -> SeedKey {
        self.key
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Entries in slot order.
    pub fn entries(&self) -> &[BufferEntry] {
        &self.slots
    }

    /// Entry with the highest admission entropy; oldest step on ties.
    pub fn max_entropy_entry(&self) -> Result<&BufferEntry> {
        self.by_entropy
            .last_key_value()
            .map(|(_, &slot)| &self.slots[slot])
            .ok_or(Error::EmptyBuffer)
    }

    /// Admission from model outputs: the gate reads the student's entropy,
    /// the stored pseudo-label is the teacher's argmax.
    pub fn admit(
        &mut self,
        features: &[f64],
        teacher_probs: &[f64],
        student_probs: &[f64],
        step: u64,
    ) -> Result<Admission> {
        let classes = self.threshold.classes();
        if teacher_probs.len() != classes || student_probs.len() != classes {
            return Err(Error::dim("admit probabilities", classes, student_probs.len()));
        }
        let h = entropy(student_probs)?;
        self.admit_scored(features, argmax(teacher_probs), h, step)
    }

    /// Admission with a precomputed entropy and pseudo-label.
    pub fn admit_scored(
        &mut self,
        features: &[f64],
        pseudo_label: usize,
        entropy: f64,
        step: u64,
    ) -> Result<Admission> {
        if features.len() != self.feature_dim {
            return Err(Error::dim("admit features", self.feature_dim, features.len()));
        }
        if pseudo_label >= self.threshold.classes() {
            return Err(Error::Input(format!("pseudo-label {pseudo_label} out of range")));
        }
        if !entropy.is_finite() {
            return Err(Error::NonFinite("admission entropy"));
        }
        self.seen += 1;
        if self.capacity == 0 {
            return Ok(Admission::Rejected);
        }
        let victim = match self.policy {
            BufferPolicy::Uncertainty { strict } => {
                if entropy >= self.threshold.h0() {
                    return Ok(Admission::Rejected);
                }
                if self.slots.len() < self.capacity {
                    None
                } else {
                    let (key, &slot) = self.by_entropy.last_key_value().expect("full buffer");
                    if strict && entropy >= key.0 .0 {
                        return Ok(Admission::Rejected);
                    }
                    Some(slot)
                }
            }
            BufferPolicy::Fifo => {
                if self.slots.len() < self.capacity {
                    None
                } else {
                    Some(*self.by_age.first_key_value().expect("full buffer").1)
                }
            }
            BufferPolicy::Reservoir => {
                if self.slots.len() < self.capacity {
                    None
                } else {
                    let j = self
                        .key
                        .derive(purpose::RESERVOIR, self.seen)
                        .random_range(0..self.seen);
                    if j >= self.capacity as u64 {
                        return Ok(Admission::Rejected);
                    }
                    Some(j as usize)
                }
            }
        };
        let entry = BufferEntry {
            features: features.to_vec(),
            pseudo_label,
            entropy,
            step,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        Ok(match victim {
            None => {
                let slot = self.slots.len();
                self.index(&entry, slot);
                self.slots.push(entry);
                Admission::Inserted
            }
            Some(slot) => {
                let old = core::mem::replace(&mut self.slots[slot], entry);
                self.by_entropy.remove(&eviction_key(&old));
                self.by_age.remove(&old.seq);
                let new = self.slots[slot].clone();
                self.index(&new, slot);
                Admission::Replaced(old)
            }
        })
    }

    fn index(&mut self, e: &BufferEntry, slot: usize) {
        self.by_entropy.insert(eviction_key(e), slot);
        self.by_age.insert(e.seq, slot);
    }

    /// Uniform draw of `batch_size` entries for replay at `step`.
    ///
    /// Without replacement when the buffer holds at least `batch_size`
    /// entries, with replacement otherwise; empty when the buffer is empty.
    pub fn sample_replay(&self, batch_size: usize, key: SeedKey, step: u64) -> ReplayBatch {
        let n = self.slots.len();
        if n == 0 || batch_size == 0 {
            return ReplayBatch {
                features: Matrix::zeros(0, self.feature_dim),
                labels: Vec::new(),
                slots: Vec::new(),
            };
        }
        let mut rng = key.derive(purpose::REPLAY, step);
        let slots: Vec<usize> = if n >= batch_size {
            rand::seq::index::sample(&mut rng, n, batch_size).into_vec()
        } else {
            (0..batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        self.gather(slots)
    }

    /// Every entry, in slot order.
    pub fn all(&self) -> ReplayBatch {
        self.gather((0..self.slots.len()).collect())
    }

    fn gather(&self, slots: Vec<usize>) -> ReplayBatch {
        let features = Matrix::from_rows(
            self.feature_dim,
            slots.iter().map(|&s| self.slots[s].features.as_slice()),
        )
        .expect("entries share the feature width");
        let labels = slots.iter().map(|&s| self.slots[s].pseudo_label).collect();
        ReplayBatch {
            features,
            labels,
            slots,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.threshold.classes()];
        for e in &self.slots {
            h[e.pseudo_label] += 1;
        }
        h
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            capacity: self.capacity,
            entropies: self.slots.iter().map(|e| e.entropy).collect(),
            label_histogram: self.label_histogram(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buffer(capacity: usize, strict: bool) -> UncertaintyBuffer {
        UncertaintyBuffer::new(
            capacity,
            1,
            UncertaintyThreshold::new(0.5, 4).unwrap(),
            BufferPolicy::Uncertainty { strict },
            SeedKey(0),
        )
    }

    #[test]
    fn entropy_worked_values() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - libm::log(4.0)).abs() < 1e-12);
        assert!((entropy(&[0.7, 0.2, 0.1]).unwrap() - 0.801_818_552_543_337_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_invalid() {
        assert!(entropy(&[-0.1, 1.1]).is_err());
        assert!(entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn threshold_value() {
        let t = UncertaintyThreshold::new(0.1, 5).unwrap();
        assert!((t.h0() - 0.1 * libm::log(5.0)).abs() < 1e-15);
        assert!(UncertaintyThreshold::new(0.0, 5).is_err());
    }

    #[test]
    fn insert_into_empty() {
        let mut b = buffer(3, true);
        assert_eq!(b.admit_scored(&[1.0], 0, 0.2, 0).unwrap(), Admission::Inserted);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn full_buffer_evicts_highest_entropy() {
        let mut b = buffer(3, true);
        for (i, h) in [0.05, 0.10, 0.20].into_iter().enumerate() {
            b.admit_scored(&[i as f64], 0, h, 0).unwrap();
        }
        match b.admit_scored(&[9.0], 1, 0.15, 1).unwrap() {
            Admission::Replaced(old) => assert_eq!(old.entropy, 0.20),
            other => panic!("unexpected {other:?}"),
        }
        let mut stored: Vec<f64> = b.entries().iter().map(|e| e.entropy).collect();
        stored.sort_by(f64::total_cmp);
        assert_eq!(stored, vec![0.05, 0.10, 0.15]);
    }

    #[test]
    fn gate_rejects_uncertain_candidate() {
        let mut b = buffer(3, true);
        let h0 = b.threshold().h0();
        assert_eq!(b.admit_scored(&[1.0], 0, h0, 0).unwrap(), Admission::Rejected);
        assert!(b.is_empty());
    }

    #[test]
    fn strict_mode_keeps_more_certain_entries() {
        let mut strict = buffer(1, true);
        let mut loose = buffer(1, false);
        for b in [&mut strict, &mut loose] {
            b.admit_scored(&[0.0], 0, 0.1, 0).unwrap();
        }
        assert_eq!(strict.admit_scored(&[1.0], 0, 0.3, 1).unwrap(), Admission::Rejected);
        assert!(matches!(
            loose.admit_scored(&[1.0], 0, 0.3, 1).unwrap(),
            Admission::Replaced(_)
        ));
    }

    #[test]
    fn max_entry_and_tie_break() {
        let mut b = buffer(4, true);
        assert_eq!(b.max_entropy_entry().unwrap_err(), Error::EmptyBuffer);
        b.admit_scored(&[0.0], 0, 0.1, 0).unwrap();
        b.admit_scored(&[1.0], 0, 0.3, 7).unwrap();
        b.admit_scored(&[2.0], 0, 0.3, 2).unwrap();
        let m = b.max_entropy_entry().unwrap();
        assert_eq!((m.entropy, m.step), (0.3, 2));
    }

    #[test]
    fn zero_capacity_rejects_everything() {
        let mut b = buffer(0, true);
        assert_eq!(b.admit_scored(&[0.0], 0, 0.0, 0).unwrap(), Admission::Rejected);
    }

    #[test]
    fn replay_from_empty_and_single() {
        let mut b = buffer(3, true);
        assert!(b.sample_replay(4, SeedKey(1), 0).is_empty());
        b.admit_scored(&[5.0], 2, 0.1, 0).unwrap();
        let r = b.sample_replay(4, SeedKey(1), 0);
        assert_eq!(r.labels, vec![2, 2, 2, 2]);
        assert_eq!(r.features.as_slice(), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn replay_without_replacement_when_full_enough() {
        let mut b = buffer(8, true);
        for i in 0..8 {
            b.admit_scored(&[i as f64], 0, 0.01 * i as f64, 0).unwrap();
        }
        let mut r = b.sample_replay(8, SeedKey(3), 5).slots;
        r.sort_unstable();
        assert_eq!(r, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn replay_draws_are_uniform() {
        let mut b = buffer(5, true);
        for i in 0..5 {
            b.admit_scored(&[i as f64], 0, 0.01, 0).unwrap();
        }
        let draws = 10_000u64;
        let mut counts = [0u64; 5];
        for t in 0..draws {
            counts[b.sample_replay(1, SeedKey(9), t).slots[0]] += 1;
        }
        let p = 0.2;
        let mean = draws as f64 * p;
        let sigma = libm::sqrt(draws as f64 * p * (1.0 - p));
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut b = UncertaintyBuffer::new(
            2,
            1,
            UncertaintyThreshold::new(0.1, 4).unwrap(),
            BufferPolicy::Fifo,
            SeedKey(0),
        );
        b.admit_scored(&[0.0], 0, 1.0, 0).unwrap();
        b.admit_scored(&[1.0], 0, 0.0, 1).unwrap();
        match b.admit_scored(&[2.0], 0, 0.5, 2).unwrap() {
            Admission::Replaced(old) => assert_eq!(old.features, vec![0.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reservoir_keeps_capacity_and_accepts_early_samples() {
        let mut b = UncertaintyBuffer::new(
            4,
            1,
            UncertaintyThreshold::new(0.1, 4).unwrap(),
            BufferPolicy::Reservoir,
            SeedKey(2),
        );
        for i in 0..4 {
            assert_eq!(b.admit_scored(&[i as f64], 0, 2.0, 0).unwrap(), Admission::Inserted);
        }
        let mut replaced = 0;
        for i in 4..1000 {
            if b.admit_scored(&[i as f64], 0, 2.0, 0).unwrap().is_stored() {
                replaced += 1;
            }
            assert_eq!(b.len(), 4);
        }
        // Expected number of replacements: sum_{n=5}^{1000} 4/n, about 21.
        assert!((10..40).contains(&replaced), "{replaced}");
    }
}
