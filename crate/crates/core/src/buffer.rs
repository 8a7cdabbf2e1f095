//! Replay memories: the dual-stage class-balanced buffer plus the plain
//! reservoir (ER) and class-balancing reservoir (CBRS) baselines.
//!
//! Every buffer owns its RNG, so identical streams under identical seeds
//! leave identical contents.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{IMAGE_PIXELS, NUM_CLASSES};

/// One remembered example, already in its domain's transformed form.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    pub image: Arc<[f32]>,
    pub label: u8,
    pub domain_id: u8,
    /// Position of the sample in the stream it arrived from.
    pub stream_index: u64,
}

impl StoredSample {
    pub fn new(image: Arc<[f32]>, label: u8, domain_id: u8, stream_index: u64) -> Self {
        debug_assert!((label as usize) < NUM_CLASSES);
        StoredSample {
            image,
            label,
            domain_id,
            stream_index,
        }
    }
}

/// Samples returned by a replay draw.
pub type ReplayBatch = Vec<StoredSample>;

/// Common surface of the replay memories used by the training loop.
pub trait ReplayMemory {
    /// Offers every sample of `samples`, in order.
    fn add_batch(&mut self, samples: &[StoredSample]);

    /// Draws up to `m` distinct stored samples. `None` means the memory is empty.
    fn get_sample(&mut self, m: usize) -> Option<ReplayBatch>;

    /// Every stored sample, in storage order.
    fn stored(&self) -> Vec<&StoredSample>;

    fn len(&self) -> usize {
        self.stored().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in self.stored() {
            counts[s.label as usize] += 1;
        }
        counts
    }

    /// Bytes held by stored images (f32 pixels).
    fn memory_bytes(&self) -> u64 {
        (self.len() * IMAGE_PIXELS * 4) as u64
    }
}

/// What the dual-stage buffer does with an arrival once its class list is full.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementPolicy {
    /// Per-class reservoir: replace a random slot with probability `K / seen`.
    #[default]
    Reservoir,
    /// Always replace a random slot.
    AlwaysReplace,
}

/// Per-class reservoirs of capacity `K` with a class-quota replay draw.
#[derive(Clone, Debug)]
pub struct DualStageBuffer {
    per_class_capacity: usize,
    classes: Vec<Vec<StoredSample>>,
    seen: Vec<u64>,
    policy: ReplacementPolicy,
    rng: ChaCha8Rng,
}

impl DualStageBuffer {
    pub fn new(per_class_capacity: usize, num_classes: usize, seed: u64) -> Self {
        Self::with_policy(per_class_capacity, num_classes, seed, ReplacementPolicy::Reservoir)
    }

    pub fn with_policy(
        per_class_capacity: usize,
        num_classes: usize,
        seed: u64,
        policy: ReplacementPolicy,
    ) -> Self {
        DualStageBuffer {
            per_class_capacity,
            classes: vec![Vec::new(); num_classes],
            seen: vec![0; num_classes],
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn per_class_capacity(&self) -> usize {
        self.per_class_capacity
    }

    pub fn class(&self, cls: usize) -> &[StoredSample] {
        &self.classes[cls]
    }

    pub fn seen(&self, cls: usize) -> u64 {
        self.seen[cls]
    }

    fn add_one(&mut self, sample: &StoredSample) {
        let cls = sample.label as usize;
        self.seen[cls] += 1;
        let list = &mut self.classes[cls];
        if list.len() < self.per_class_capacity {
            list.push(sample.clone());
            return;
        }
        if self.per_class_capacity == 0 {
            return;
        }
        let slot = match self.policy {
            ReplacementPolicy::Reservoir => {
                let j = self.rng.gen_range(0..self.seen[cls]);
                (j < self.per_class_capacity as u64).then_some(j as usize)
            }
            ReplacementPolicy::AlwaysReplace => Some(self.rng.gen_range(0..list.len())),
        };
        if let Some(slot) = slot {
            list[slot] = sample.clone();
        }
    }
}

impl ReplayMemory for DualStageBuffer {
    fn add_batch(&mut self, samples: &[StoredSample]) {
        for s in samples {
            self.add_one(s);
        }
    }

    fn get_sample(&mut self, m: usize) -> Option<ReplayBatch> {
        if self.classes.iter().all(Vec::is_empty) {
            return None;
        }
        let quota = m / self.classes.len();
        let mut picked: Vec<Vec<bool>> = self.classes.iter().map(|c| vec![false; c.len()]).collect();
        let mut out = Vec::with_capacity(m);
        for (cls, list) in self.classes.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let amount = quota.min(list.len());
            for i in index::sample(&mut self.rng, list.len(), amount) {
                picked[cls][i] = true;
                out.push(list[i].clone());
            }
        }
        if out.len() < m {
            let remaining: Vec<(usize, usize)> = picked
                .iter()
                .enumerate()
                .flat_map(|(cls, flags)| {
                    flags
                        .iter()
                        .enumerate()
                        .filter(|(_, taken)| !**taken)
                        .map(move |(i, _)| (cls, i))
                })
                .collect();
            let amount = (m - out.len()).min(remaining.len());
            for j in index::sample(&mut self.rng, remaining.len(), amount) {
                let (cls, i) = remaining[j];
                out.push(self.classes[cls][i].clone());
            }
        }
        Some(out)
    }

    fn stored(&self) -> Vec<&StoredSample> {
        self.classes.iter().flatten().collect()
    }

    fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }
}

fn uniform_draw(rng: &mut ChaCha8Rng, items: &[StoredSample], m: usize) -> Option<ReplayBatch> {
    if items.is_empty() {
        return None;
    }
    let amount = m.min(items.len());
    Some(
        index::sample(rng, items.len(), amount)
            .into_iter()
            .map(|i| items[i].clone())
            .collect(),
    )
}

/// Classic reservoir over the whole stream (experience replay baseline).
#[derive(Clone, Debug)]
pub struct ReservoirBuffer {
    capacity: usize,
    items: Vec<StoredSample>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReservoirBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn add(&mut self, sample: &StoredSample) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(sample.clone());
            return;
        }
        let j = self.rng.gen_range(0..self.seen);
        if j < self.capacity as u64 {
            self.items[j as usize] = sample.clone();
        }
    }
}

impl ReplayMemory for ReservoirBuffer {
    fn add_batch(&mut self, samples: &[StoredSample]) {
        for s in samples {
            self.add(s);
        }
    }

    fn get_sample(&mut self, m: usize) -> Option<ReplayBatch> {
        uniform_draw(&mut self.rng, &self.items, m)
    }

    fn stored(&self) -> Vec<&StoredSample> {
        self.items.iter().collect()
    }

    fn len(&self) -> usize {
        self.items.len()
    }
}

/// Class-balancing reservoir sampling: evicts from the largest class until
/// each class holds its share, then behaves as a per-class reservoir.
#[derive(Clone, Debug)]
pub struct CbrsBuffer {
    capacity: usize,
    items: Vec<StoredSample>,
    counts: Vec<usize>,
    seen: Vec<u64>,
    full: Vec<bool>,
    rng: ChaCha8Rng,
}

impl CbrsBuffer {
    pub fn new(capacity: usize, num_classes: usize, seed: u64) -> Self {
        CbrsBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            counts: vec![0; num_classes],
            seen: vec![0; num_classes],
            full: vec![false; num_classes],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_full_class(&self, cls: usize) -> bool {
        self.full[cls]
    }

    fn largest_classes(&self) -> Vec<usize> {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        (0..self.counts.len()).filter(|&c| self.counts[c] == max).collect()
    }

    fn mark_full(&mut self) {
        for c in self.largest_classes() {
            self.full[c] = true;
        }
    }

    fn random_slot_of(&mut self, cls: usize) -> usize {
        let nth = self.rng.gen_range(0..self.counts[cls]);
        self.items
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label as usize == cls)
            .nth(nth)
            .map(|(i, _)| i)
            .expect("class count matches stored items")
    }

    pub fn add(&mut self, sample: &StoredSample) {
        let cls = sample.label as usize;
        self.seen[cls] += 1;
        if self.capacity == 0 {
            return;
        }
        if self.items.len() < self.capacity {
            self.items.push(sample.clone());
            self.counts[cls] += 1;
            if self.items.len() == self.capacity {
                self.mark_full();
            }
            return;
        }
        if !self.full[cls] {
            let largest = self.largest_classes();
            let victim_class = largest[self.rng.gen_range(0..largest.len())];
            let slot = self.random_slot_of(victim_class);
            self.items[slot] = sample.clone();
            self.counts[victim_class] -= 1;
            self.counts[cls] += 1;
            self.mark_full();
        } else {
            let stored = self.counts[cls] as u64;
            let u = self.rng.gen_range(0..self.seen[cls]);
            if u < stored {
                let slot = self.random_slot_of(cls);
                self.items[slot] = sample.clone();
            }
        }
    }
}

impl ReplayMemory for CbrsBuffer {
    fn add_batch(&mut self, samples: &[StoredSample]) {
        for s in samples {
            self.add(s);
        }
    }

    fn get_sample(&mut self, m: usize) -> Option<ReplayBatch> {
        uniform_draw(&mut self.rng, &self.items, m)
    }

    fn stored(&self) -> Vec<&StoredSample> {
        self.items.iter().collect()
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut out = [0; NUM_CLASSES];
        out.copy_from_slice(&self.counts[..NUM_CLASSES]);
        out
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::collections::HashSet;

    pub(crate) fn sample(label: u8, idx: u64) -> StoredSample {
        StoredSample::new(Arc::from(vec![idx as f32; 4]), label, 0, idx)
    }

    fn stream(label: u8, n: u64) -> Vec<StoredSample> {
        (0..n).map(|i| sample(label, i)).collect()
    }

    fn ids(batch: &[StoredSample]) -> Vec<(u8, u64)> {
        batch.iter().map(|s| (s.label, s.stream_index)).collect()
    }

    #[test]
    fn dual_below_capacity_keeps_everything() {
        let mut buf = DualStageBuffer::new(5, 2, 0);
        buf.add_batch(&stream(0, 3));
        assert_eq!(ids(buf.class(0)), vec![(0, 0), (0, 1), (0, 2)]);
        assert!(buf.class(1).is_empty());
    }

    #[test]
    fn dual_full_class_stays_at_capacity() {
        for policy in [ReplacementPolicy::Reservoir, ReplacementPolicy::AlwaysReplace] {
            let mut buf = DualStageBuffer::with_policy(5, 2, 1, policy);
            buf.add_batch(&stream(0, 5));
            buf.add_batch(&[sample(0, 99)]);
            assert_eq!(buf.class(0).len(), 5);
            buf.add_batch(&stream(0, 500));
            assert_eq!(buf.class(0).len(), 5);
            assert_eq!(buf.seen(0), 506);
        }
    }

    #[test]
    fn always_replace_installs_arrival() {
        let mut buf = DualStageBuffer::with_policy(3, 2, 4, ReplacementPolicy::AlwaysReplace);
        buf.add_batch(&stream(0, 3));
        buf.add_batch(&[sample(0, 42)]);
        assert!(buf.class(0).iter().any(|s| s.stream_index == 42));
    }

    #[test]
    fn dual_quota_is_half_per_class() {
        let mut buf = DualStageBuffer::new(50, 2, 2);
        buf.add_batch(&stream(0, 20));
        buf.add_batch(&stream(1, 20));
        let draw = buf.get_sample(10).unwrap();
        let zeros = draw.iter().filter(|s| s.label == 0).count();
        assert_eq!((zeros, draw.len() - zeros), (5, 5));
    }

    #[test]
    fn dual_fill_tops_up_from_other_class() {
        let mut buf = DualStageBuffer::new(100, 2, 3);
        buf.add_batch(&stream(0, 50));
        buf.add_batch(&stream(1, 3));
        let draw = buf.get_sample(10).unwrap();
        let ones = draw.iter().filter(|s| s.label == 1).count();
        assert_eq!((draw.len() - ones, ones), (7, 3));
        let unique: HashSet<_> = ids(&draw).into_iter().collect();
        assert_eq!(unique.len(), 10);
    }

    #[test]
    fn dual_small_store_returns_everything() {
        let mut buf = DualStageBuffer::new(10, 2, 3);
        buf.add_batch(&stream(0, 2));
        buf.add_batch(&stream(1, 1));
        let draw = buf.get_sample(10).unwrap();
        assert_eq!(draw.len(), 3);
    }

    #[test]
    fn empty_buffers_signal_empty() {
        assert!(DualStageBuffer::new(5, 2, 0).get_sample(10).is_none());
        assert!(ReservoirBuffer::new(5, 0).get_sample(10).is_none());
        assert!(CbrsBuffer::new(5, 2, 0).get_sample(10).is_none());
    }

    #[test]
    fn reservoir_keeps_first_capacity_items() {
        let mut buf = ReservoirBuffer::new(3, 0);
        buf.add_batch(&stream(0, 3));
        assert_eq!(buf.len(), 3);
        let draw = buf.get_sample(10).unwrap();
        assert_eq!(draw.len(), 3);
    }

    #[test]
    fn reservoir_second_arrival_half_the_time() {
        let trials = 10_000;
        let kept = (0..trials)
            .filter(|&seed| {
                let mut buf = ReservoirBuffer::new(1, seed);
                buf.add_batch(&stream(0, 2));
                buf.stored()[0].stream_index == 1
            })
            .count();
        let freq = kept as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 0.02, "freq = {freq}");
    }

    #[test]
    fn reservoir_draw_is_distinct() {
        let mut buf = ReservoirBuffer::new(500, 9);
        buf.add_batch(&stream(1, 2000));
        let draw = buf.get_sample(32).unwrap();
        let unique: HashSet<_> = ids(&draw).into_iter().collect();
        assert_eq!(unique.len(), 32);
    }

    #[test]
    fn cbrs_balances_hand_trace() {
        let mut buf = CbrsBuffer::new(4, 2, 7);
        buf.add_batch(&stream(0, 3));
        buf.add_batch(&stream(1, 3));
        assert_eq!(buf.class_counts(), [2, 2]);
        assert!(buf.is_full_class(0) && buf.is_full_class(1));
    }

    #[test]
    fn cbrs_single_class_is_bounded() {
        let mut buf = CbrsBuffer::new(10, 2, 1);
        buf.add_batch(&stream(0, 100));
        assert_eq!(buf.len(), 10);
    }

    #[test]
    fn cbrs_minority_reaches_half() {
        use rand::seq::SliceRandom;
        for seed in 0..200u64 {
            let mut items: Vec<StoredSample> = stream(0, 900);
            items.extend((0..100).map(|i| sample(1, 1000 + i)));
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10_000);
            items.shuffle(&mut rng);
            let mut buf = CbrsBuffer::new(100, 2, seed);
            buf.add_batch(&items);
            assert!(buf.class_counts()[1] >= 50, "seed {seed}: {:?}", buf.class_counts());
            assert_eq!(buf.len(), 100);
        }
    }

    #[test]
    fn cbrs_evicts_only_from_largest() {
        let mut buf = CbrsBuffer::new(10, 2, 5);
        buf.add_batch(&stream(0, 8));
        buf.add_batch(&stream(1, 2));
        // class 1 is not full: the next arrival must evict from class 0
        let before = buf.class_counts();
        buf.add(&sample(1, 77));
        let after = buf.class_counts();
        assert_eq!((before[0] - 1, before[1] + 1), (after[0], after[1]));
    }

    #[test]
    fn buffers_are_seed_deterministic() {
        let mut items = stream(0, 300);
        items.extend(stream(1, 120));
        let run = |seed| {
            let mut d = DualStageBuffer::new(20, 2, seed);
            let mut r = ReservoirBuffer::new(40, seed);
            let mut c = CbrsBuffer::new(40, 2, seed);
            d.add_batch(&items);
            r.add_batch(&items);
            c.add_batch(&items);
            (ids(&d.get_sample(16).unwrap()), ids(&r.get_sample(16).unwrap()), ids(&c.get_sample(16).unwrap()))
        };
        assert_eq!(run(3), run(3));
    }
}
