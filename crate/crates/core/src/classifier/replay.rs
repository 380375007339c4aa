//! FIFO replay buffers with optional stratified sampling.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    entries: VecDeque<T>,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry; returns the evicted oldest entry once full.
    pub fn push(&mut self, item: T) -> Option<T> {
        if self.capacity == 0 {
            return Some(item);
        }
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(item);
        evicted
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter()
    }

    /// Up to `n` distinct entries drawn uniformly.
    pub fn sample_uniform<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        let n = n.min(self.entries.len());
        let mut picks = index::sample(rng, self.entries.len(), n).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| &self.entries[i]).collect()
    }

    /// Up to `n` distinct entries; each draw first picks a non-exhausted
    /// stratum uniformly, then an entry within it uniformly.
    pub fn sample_stratified<R: Rng, K: Ord, F: Fn(&T) -> K>(
        &self,
        n: usize,
        key: F,
        rng: &mut R,
    ) -> Vec<&T> {
        let mut strata: BTreeMap<K, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            strata.entry(key(e)).or_default().push(i);
        }
        let mut pools: Vec<Vec<usize>> = strata.into_values().collect();
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !pools.is_empty() {
            let s = rng.random_range(0..pools.len());
            let pool = &mut pools[s];
            let j = rng.random_range(0..pool.len());
            out.push(&self.entries[pool.swap_remove(j)]);
            if pool.is_empty() {
                pools.swap_remove(s);
            }
        }
        out
    }
}
