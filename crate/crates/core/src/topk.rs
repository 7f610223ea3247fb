//! Bounded top-k selection.
//!
//! A min-heap of size `k` keeps the best hits seen so far; the root is the
//! current worst of them, so each new hit costs one comparison unless it
//! displaces the root. Hits are totally ordered: larger `key` first, then
//! smaller ordinal, which makes the selected set unique and lets shard-local
//! heaps merge into exactly the single-pass result.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub ordinal: usize,
    /// Larger is better.
    pub key: f32,
}

impl Eq for Hit {}

impl Ord for Hit {
    /// `Greater` means ranked ahead.
    fn cmp(&self, other: &Self) -> Ordering {
        self.key
            .total_cmp(&other.key)
            .then_with(|| other.ordinal.cmp(&self.ordinal))
    }
}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Hit>>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k.saturating_add(1).min(1 << 20)),
        }
    }

    #[inline]
    pub fn push(&mut self, hit: Hit) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Reverse(hit));
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if hit > worst.0 {
                *worst = Reverse(hit);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn merge(&mut self, other: TopK) {
        for Reverse(h) in other.heap {
            self.push(h);
        }
    }

    /// Best first.
    pub fn into_sorted_vec(self) -> Vec<Hit> {
        // Ascending order of Reverse(hit) is descending order of hit.
        self.heap.into_sorted_vec().into_iter().map(|r| r.0).collect()
    }
}
