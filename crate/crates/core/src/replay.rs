//! Experience storage: the flat transition ring for SAC, labeled sequence
//! buffers for the risk predictor, per-vehicle trajectory windows, and the
//! balanced sampler that draws half of each batch from each outcome.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Cause;
use crate::risk::StateActionSequence;
use crate::sim::VehicleId;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("both sequence buffers need data before balanced sampling")]
    NotReady,
    #[error("batch size must be even and positive, got {0}")]
    OddBatch(usize),
    #[error("label {got:?} does not belong in a buffer for label {want}")]
    Label { want: u8, got: Option<u8> },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Raw action in `[-1, 1]`.
    pub action: f64,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True only for genuine terminals; truncation still bootstraps.
    pub done: bool,
}

/// Fixed-capacity ring with uniform sampling. Storage grows lazily.
#[derive(Clone, Debug)]
pub struct Ring<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

impl<T> Ring<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring capacity must be positive");
        Self { capacity, items: Vec::new(), next: 0 }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Items oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `k` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&T>, ReplayError> {
        if self.items.is_empty() {
            return Err(ReplayError::Empty);
        }
        Ok((0..k).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

pub type TransitionBuffer = Ring<Transition>;

/// Ring of sequences that all carry the same label.
#[derive(Clone, Debug)]
pub struct SequenceBuffer {
    label: u8,
    ring: Ring<StateActionSequence>,
}

impl SequenceBuffer {
    pub fn new(label: u8, capacity: usize) -> Self {
        Self { label, ring: Ring::new(capacity) }
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn push(&mut self, seq: StateActionSequence) -> Result<(), ReplayError> {
        if seq.label != Some(self.label) {
            return Err(ReplayError::Label { want: self.label, got: seq.label });
        }
        self.ring.push(seq);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StateActionSequence> {
        self.ring.iter()
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&StateActionSequence>, ReplayError> {
        self.ring.sample(k, rng)
    }
}

/// Collision-labeled and safely-completed sequence buffers.
#[derive(Clone, Debug)]
pub struct OutcomeBuffers {
    pub risk: SequenceBuffer,
    pub safe: SequenceBuffer,
}

impl OutcomeBuffers {
    pub fn new(capacity: usize) -> Self {
        Self { risk: SequenceBuffer::new(1, capacity), safe: SequenceBuffer::new(0, capacity) }
    }

    /// Routes a labeled sequence to its buffer.
    pub fn push(&mut self, seq: StateActionSequence) -> Result<(), ReplayError> {
        match seq.label {
            Some(1) => self.risk.push(seq),
            Some(0) => self.safe.push(seq),
            got => Err(ReplayError::Label { want: 0, got }),
        }
    }

    pub fn ready(&self) -> bool {
        !self.risk.is_empty() && !self.safe.is_empty()
    }

    /// `batch / 2` draws from each buffer, shuffled together.
    pub fn balanced_sample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Result<Vec<&StateActionSequence>, ReplayError> {
        if batch == 0 || !batch.is_multiple_of(2) {
            return Err(ReplayError::OddBatch(batch));
        }
        if !self.ready() {
            return Err(ReplayError::NotReady);
        }
        let mut out = self.risk.sample(batch / 2, rng)?;
        out.extend(self.safe.sample(batch / 2, rng)?);
        out.shuffle(rng);
        Ok(out)
    }

    /// Writes both buffers as JSON lines, risk first.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), ReplayError> {
        let mut out = BufWriter::new(File::create(path)?);
        for s in self.risk.iter().chain(self.safe.iter()) {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<StateActionSequence>, ReplayError> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

/// Per-vehicle sliding windows of the latest `(state, raw action)` pairs.
#[derive(Clone, Debug)]
pub struct TrajectoryWindows {
    seq_len: usize,
    state_dim: usize,
    windows: BTreeMap<VehicleId, VecDeque<(Vec<f64>, f64)>>,
}

impl TrajectoryWindows {
    pub fn new(seq_len: usize, state_dim: usize) -> Self {
        Self { seq_len, state_dim, windows: BTreeMap::new() }
    }

    pub fn push(&mut self, id: VehicleId, state: &[f64], action: f64) {
        let w = self.windows.entry(id).or_default();
        if w.len() == self.seq_len {
            w.pop_front();
        }
        w.push_back((state.to_vec(), action));
    }

    pub fn len_of(&self, id: VehicleId) -> usize {
        self.windows.get(&id).map_or(0, VecDeque::len)
    }

    pub fn num_open(&self) -> usize {
        self.windows.len()
    }

    /// Unlabeled padded snapshot of a vehicle's window.
    pub fn snapshot(&self, id: VehicleId) -> StateActionSequence {
        let empty = VecDeque::new();
        let w = self.windows.get(&id).unwrap_or(&empty);
        StateActionSequence::from_pairs(w.iter().map(|(s, a)| (s.as_slice(), *a)), self.seq_len, self.state_dim)
            .expect("window rows have the configured width")
    }

    /// Closes a vehicle's window: collision gives label 1, arrival label 0,
    /// anything else is dropped.
    pub fn finalize(&mut self, id: VehicleId, cause: Cause) -> Option<StateActionSequence> {
        let seq = self.windows.contains_key(&id).then(|| self.snapshot(id));
        self.windows.remove(&id);
        let label = match cause {
            Cause::Collision => 1,
            Cause::Arrived => 0,
            Cause::Truncated | Cause::None => return None,
        };
        seq.map(|s| s.with_label(label))
    }

    pub fn discard(&mut self, id: VehicleId) {
        self.windows.remove(&id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(label: u8, tag: f64) -> StateActionSequence {
        let s = [tag];
        StateActionSequence::from_pairs([(&s[..], 0.0)], 3, 1).unwrap().with_label(label)
    }

    #[test]
    fn ring_keeps_latest() {
        let mut r = Ring::new(2);
        for i in 0..3 {
            r.push(i);
        }
        assert_eq!(r.iter().copied().collect::<Vec<_>>(), vec![1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(r.sample(5, &mut rng).unwrap().len(), 5);
        assert!(matches!(Ring::<i32>::new(3).sample(1, &mut rng), Err(ReplayError::Empty)));
    }

    #[test]
    fn uniform_sampling_over_ten_items() {
        let mut r = Ring::new(10);
        for i in 0..10usize {
            r.push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 10];
        for x in r.sample(100_000, &mut rng).unwrap() {
            counts[*x] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0).abs() < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn label_purity_is_enforced() {
        let mut b = OutcomeBuffers::new(4);
        assert!(b.risk.push(seq(0, 1.0)).is_err());
        assert!(b.safe.push(seq(1, 1.0)).is_err());
        b.push(seq(1, 1.0)).unwrap();
        b.push(seq(0, 2.0)).unwrap();
        assert!(b.push(StateActionSequence::from_pairs([(&[0.0][..], 0.0)], 3, 1).unwrap()).is_err());
        assert!(b.risk.iter().all(|s| s.label == Some(1)));
        assert!(b.safe.iter().all(|s| s.label == Some(0)));
    }

    #[test]
    fn balanced_batches_are_exactly_half_and_half() {
        let mut b = OutcomeBuffers::new(100);
        for i in 0..7 {
            b.push(seq(1, i as f64)).unwrap();
        }
        for i in 0..50 {
            b.push(seq(0, i as f64)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let batch = b.balanced_sample(128, &mut rng).unwrap();
            assert_eq!(batch.len(), 128);
            assert_eq!(batch.iter().filter(|s| s.label == Some(1)).count(), 64);
        }
    }

    #[test]
    fn not_ready_until_both_buffers_have_data() {
        let mut b = OutcomeBuffers::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.push(seq(0, 0.0)).unwrap();
        assert!(matches!(b.balanced_sample(4, &mut rng), Err(ReplayError::NotReady)));
        b.push(seq(1, 0.0)).unwrap();
        assert!(matches!(b.balanced_sample(3, &mut rng), Err(ReplayError::OddBatch(3))));
        assert!(b.balanced_sample(4, &mut rng).is_ok());
    }

    #[test]
    fn finalize_labels_and_pads() {
        let mut w = TrajectoryWindows::new(10, 2);
        let id = VehicleId(4);
        for i in 0..4 {
            w.push(id, &[i as f64, 1.0], 0.5);
        }
        let s = w.finalize(id, Cause::Collision).unwrap();
        assert_eq!(s.label, Some(1));
        assert_eq!(s.valid_length, 4);
        assert_eq!(s.padding(), 6);
        assert!(s.rows[..6 * 3].iter().all(|&x| x == 0.0));
        assert_eq!(w.len_of(id), 0);

        w.push(id, &[0.0, 0.0], 0.0);
        assert_eq!(w.finalize(id, Cause::Arrived).unwrap().label, Some(0));
        w.push(id, &[0.0, 0.0], 0.0);
        assert!(w.finalize(id, Cause::Truncated).is_none());
        assert_eq!(w.num_open(), 0);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut b = OutcomeBuffers::new(10);
        b.push(seq(1, 3.0)).unwrap();
        b.push(seq(0, 4.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seqs.jsonl");
        b.write_jsonl(&p).unwrap();
        let back = OutcomeBuffers::read_jsonl(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].label, Some(1));
        assert_eq!(back[1].row(2), &[4.0, 0.0]);
    }

    proptest! {
        #[test]
        fn window_never_exceeds_length(pushes in 0usize..40, n in 1usize..12) {
            let mut w = TrajectoryWindows::new(n, 1);
            for i in 0..pushes {
                w.push(VehicleId(0), &[i as f64], 0.0);
                prop_assert!(w.len_of(VehicleId(0)) <= n);
            }
            let s = w.snapshot(VehicleId(0));
            prop_assert_eq!(s.valid_length + s.padding(), n);
            prop_assert_eq!(s.valid_length, pushes.min(n));
        }

        #[test]
        fn ring_never_exceeds_capacity(cap in 1usize..20, pushes in 0usize..100) {
            let mut r = Ring::new(cap);
            for i in 0..pushes {
                r.push(i);
                prop_assert!(r.len() <= cap);
            }
            let kept: Vec<usize> = r.iter().copied().collect();
            let expect: Vec<usize> = (pushes.saturating_sub(cap)..pushes).collect();
            prop_assert_eq!(kept, expect);
        }
    }
}
