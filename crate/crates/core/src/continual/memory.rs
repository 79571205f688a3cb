use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::data::Sample;

/// Per-class quotas for `classes` (sorted ascending): `floor(capacity / k)`
/// each, with the remainder going one apiece to the lowest ids.
pub fn quotas(capacity: usize, classes: &[usize]) -> BTreeMap<usize, usize> {
    let k = classes.len();
    if k == 0 {
        return BTreeMap::new();
    }
    let (q, r) = (capacity / k, capacity % k);
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.into_iter().enumerate().map(|(i, c)| (c, q + usize::from(i < r))).collect()
}

/// Capacity-bounded exemplar store, grouped by the (internal) old class each
/// entry was stored for. Entries keep the original image and full dataset
/// label map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    classes: BTreeMap<usize, Vec<Sample>>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            classes: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(class, stored entries)` for every old class, including classes whose
    /// quota could not be filled.
    pub fn counts(&self) -> BTreeMap<usize, usize> {
        self.classes.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &Sample)> {
        self.classes.iter().flat_map(|(&c, v)| v.iter().map(move |s| (c, s)))
    }

    /// Per-class counts differ by at most one.
    pub fn is_balanced(&self) -> bool {
        let counts: Vec<usize> = self.classes.values().map(Vec::len).collect();
        match (counts.iter().min(), counts.iter().max()) {
            (Some(lo), Some(hi)) => hi - lo <= 1,
            _ => true,
        }
    }

    /// Rebalances after a stage. Existing classes are cut to their new quota
    /// by uniform random eviction; each class in `finished` is filled with a
    /// random draw (without replacement) from `candidates(class)`. Returns a
    /// warning for every class that could not reach its quota.
    pub fn update<'a, R: Rng>(
        &mut self,
        finished: &[usize],
        mut candidates: impl FnMut(usize) -> Vec<&'a Sample>,
        rng: &mut R,
    ) -> Vec<String> {
        let mut all: Vec<usize> = self.classes.keys().copied().collect();
        all.extend(finished.iter().filter(|c| !self.classes.contains_key(c)));
        let quota = quotas(self.capacity, &all);
        let mut warnings = Vec::new();
        for (&c, entries) in self.classes.iter_mut() {
            let q = quota[&c];
            if entries.len() > q {
                let mut keep = index::sample(rng, entries.len(), q).into_vec();
                keep.sort_unstable();
                let old = std::mem::take(entries);
                *entries = keep.into_iter().map(|i| old[i].clone()).collect();
            }
        }
        let mut finished = finished.to_vec();
        finished.sort_unstable();
        finished.dedup();
        for c in finished {
            if self.classes.contains_key(&c) {
                continue;
            }
            let q = quota[&c];
            let pool = candidates(c);
            let take = q.min(pool.len());
            let mut picked = index::sample(rng, pool.len(), take).into_vec();
            picked.sort_unstable();
            if take < q {
                let w = format!("class {c}: {} images available for a quota of {q}", pool.len());
                log::warn!("memory: {w}");
                warnings.push(w);
            }
            self.classes.insert(c, picked.into_iter().map(|i| pool[i].clone()).collect());
        }
        warnings
    }
}
