use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AdamConfig;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Full-batch training up to this many rows; minibatches above it.
    pub full_batch_max: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            full_batch_max: 2000,
            batch_size: 256,
            val_fraction: 0.2,
            patience: 30,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return invalid("validation fraction must lie in [0, 1)");
        }
        if !(self.adam.lr >= 0.0) {
            return invalid("learning rate must be non-negative");
        }
        Ok(())
    }

    pub fn batch_for(&self, n: usize) -> usize {
        if n <= self.full_batch_max {
            n.max(1)
        } else {
            self.batch_size
        }
    }
}

/// Shuffled index batches covering `rows` once.
pub fn minibatches(rows: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if rows.is_empty() {
        return Vec::new();
    }
    let mut order = rows.to_vec();
    if batch < rows.len() {
        order.shuffle(rng);
    }
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Keeps the best snapshot by validation loss and signals when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping<P> {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    best: Option<P>,
    wait: usize,
}

impl<P: Clone> EarlyStopping<P> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            best: None,
            wait: 0,
        }
    }

    /// Record the loss after `epoch`; returns `true` when training should stop.
    pub fn update(&mut self, epoch: usize, loss: f64, params: &P) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.best = Some(params.clone());
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        self.wait >= self.patience
    }

    pub fn into_best(self) -> Option<P> {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn batches_partition_rows() {
        let rows: Vec<usize> = (10..40).collect();
        let b = minibatches(&rows, 7, &mut derive_rng(0, 1, 2));
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, rows);
        let full = minibatches(&rows, 100, &mut derive_rng(0, 1, 2));
        assert_eq!(full, vec![rows]);
    }

    #[test]
    fn stops_after_patience_and_keeps_best() {
        let mut es = EarlyStopping::new(2);
        assert!(!es.update(0, 3.0, &"a"));
        assert!(!es.update(1, 1.0, &"b"));
        assert!(!es.update(2, 2.0, &"c"));
        assert!(es.update(3, 1.5, &"d"));
        assert_eq!(es.best_epoch, 1);
        assert_eq!(es.into_best(), Some("b"));
    }

    #[test]
    fn full_batch_threshold() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_for(2000), 2000);
        assert_eq!(c.batch_for(2001), 256);
        assert!(TrainConfig { val_fraction: 1.0, ..c }.validate().is_err());
    }
}
