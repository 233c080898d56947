//! Feature queue of past novel points, bucketed by predicted class.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct QueueConfig {
    /// Capacity `K` of each class bucket.
    pub capacity: usize,
    pub insert_fraction: f64,
    pub sample_per_class: usize,
    /// `false` keeps one FIFO of capacity `K·classes` sampled uniformly.
    pub balanced: bool,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            capacity: 1024,
            insert_fraction: 0.1,
            sample_per_class: 64,
            balanced: true,
        }
    }
}

impl QueueConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 || !(self.insert_fraction > 0.0 && self.insert_fraction <= 1.0) {
            return Err(invalid(
                "queue capacity must be positive and insert fraction in (0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FeatureQueue {
    dim: usize,
    classes: usize,
    capacity: usize,
    balanced: bool,
    buckets: Vec<VecDeque<Vec<f64>>>,
}

impl FeatureQueue {
    pub fn new(dim: usize, classes: usize, capacity: usize, balanced: bool) -> Self {
        let n_buckets = if balanced { classes } else { 1 };
        let capacity = if balanced {
            capacity
        } else {
            capacity * classes
        };
        Self {
            dim,
            classes,
            capacity,
            balanced,
            buckets: vec![VecDeque::new(); n_buckets],
        }
    }

    pub fn bucket_sizes(&self) -> Vec<usize> {
        self.buckets.iter().map(VecDeque::len).collect()
    }

    pub fn bucket_capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&mut self, bucket: usize, feature: &[f64]) {
        let b = &mut self.buckets[bucket];
        if b.len() == self.capacity {
            b.pop_front();
        }
        b.push_back(feature.to_vec());
    }
}

fn fraction_count(fraction: f64, n: usize) -> usize {
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Inserts `ceil(fraction·n)` randomly chosen candidates of each predicted
/// class (of all candidates when unbalanced), evicting oldest entries first.
pub fn queue_insert<R: Rng>(
    queue: &mut FeatureQueue,
    features: &[&[f64]],
    classes: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<()> {
    if features.len() != classes.len() {
        return Err(invalid("one predicted class per feature required"));
    }
    if let Some(f) = features.iter().find(|f| f.len() != queue.dim) {
        return Err(invalid(format!(
            "feature of length {} in a queue of dim {}",
            f.len(),
            queue.dim
        )));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= queue.classes) {
        return Err(invalid(format!(
            "class {c} outside queue with {} classes",
            queue.classes
        )));
    }
    let groups: Vec<Vec<usize>> = if queue.balanced {
        (0..queue.classes)
            .map(|c| (0..classes.len()).filter(|&i| classes[i] == c).collect())
            .collect()
    } else {
        vec![(0..classes.len()).collect()]
    };
    for (bucket, members) in groups.iter().enumerate() {
        let count = fraction_count(fraction, members.len());
        if count == 0 {
            continue;
        }
        let mut picked: Vec<usize> = index::sample(rng, members.len(), count).into_vec();
        picked.sort_unstable();
        for k in picked {
            queue.push(bucket, features[members[k]]);
        }
    }
    Ok(())
}

/// Up to `per_class` uniformly drawn entries from every bucket
/// (`per_class · classes` from the single FIFO when unbalanced).
pub fn queue_sample<R: Rng>(queue: &FeatureQueue, per_class: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let want = if queue.balanced {
        per_class
    } else {
        per_class * queue.classes
    };
    let mut out = Vec::new();
    for b in &queue.buckets {
        let n = want.min(b.len());
        for i in index::sample(rng, b.len(), n) {
            out.push(b[i].clone());
        }
    }
    out
}
