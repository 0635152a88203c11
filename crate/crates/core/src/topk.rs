//! Exact top-K tracker for the largest absolute activations of a cell.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const DEFAULT_K: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKEntry {
    pub abs_value: f64,
    pub signed_value: f64,
    pub token_index: u32,
    pub dim: u32,
    pub sample_id: String,
}

impl TopKEntry {
    /// Total order: larger magnitude first, then (sample_id, token, dim)
    /// ascending, which is observation order for streams fed in sample order.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .abs_value
            .total_cmp(&self.abs_value)
            .then_with(|| self.sample_id.cmp(&other.sample_id))
            .then_with(|| self.token_index.cmp(&other.token_index))
            .then_with(|| self.dim.cmp(&other.dim))
    }
}

/// Heap wrapper: the worst-ranked entry sits at the top.
#[derive(Debug, Clone, PartialEq)]
struct Ranked(TopKEntry);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl Default for TopK {
    fn default() -> Self {
        TopK::new(DEFAULT_K)
    }
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    #[inline]
    fn admits(&self, abs_value: f64, sample_id: &str, token_index: u32, dim: u32) -> bool {
        if self.heap.len() < self.k {
            return self.k > 0;
        }
        let worst = &self.heap.peek().expect("k > 0 and heap full").0;
        match abs_value.total_cmp(&worst.abs_value) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => (sample_id, token_index, dim) < (worst.sample_id.as_str(), worst.token_index, worst.dim),
        }
    }

    #[inline]
    pub fn offer(&mut self, signed_value: f64, sample_id: &str, token_index: u32, dim: u32) {
        let abs_value = signed_value.abs();
        if !self.admits(abs_value, sample_id, token_index, dim) {
            return;
        }
        self.push(TopKEntry {
            abs_value,
            signed_value,
            token_index,
            dim,
            sample_id: sample_id.to_owned(),
        });
    }

    fn push(&mut self, entry: TopKEntry) {
        self.heap.push(Ranked(entry));
        if self.heap.len() > self.k {
            self.heap.pop();
        }
    }

    pub fn merge(&mut self, other: &TopK) {
        for Ranked(e) in other.heap.iter() {
            if self.admits(e.abs_value, &e.sample_id, e.token_index, e.dim) {
                self.push(e.clone());
            }
        }
    }

    /// Entries sorted best-first.
    pub fn entries(&self) -> Vec<TopKEntry> {
        let mut v: Vec<TopKEntry> = self.heap.iter().map(|r| r.0.clone()).collect();
        v.sort_by(TopKEntry::rank_cmp);
        v
    }

    /// Magnitude of the `n`-th largest entry (1-based), if that many exist.
    pub fn nth_abs(&self, n: usize) -> Option<f64> {
        if n == 0 || n > self.heap.len() {
            return None;
        }
        self.entries().get(n - 1).map(|e| e.abs_value)
    }
}

impl PartialEq for TopK {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k && self.entries() == other.entries()
    }
}

#[derive(Serialize, Deserialize)]
struct TopKRepr {
    k: usize,
    entries: Vec<TopKEntry>,
}

impl Serialize for TopK {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TopKRepr {
            k: self.k,
            entries: self.entries(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TopK {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = TopKRepr::deserialize(d)?;
        let mut t = TopK::new(repr.k);
        for e in repr.entries {
            t.push(e);
        }
        Ok(t)
    }
}
