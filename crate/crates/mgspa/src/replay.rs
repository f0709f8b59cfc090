//! Fixed-capacity experience buffer with without-replacement minibatches.

use crate::error::{Error, Result};
use rand::Rng;

/// One stored interaction: global state, per-agent raw and perturbed
/// (frame-stacked) observations, joint actions on both sides, shared
/// reward, and the successor state with its raw observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Unperturbed stacked observation per agent.
    pub observations: Vec<Vec<f64>>,
    /// What each actor actually saw (perturbation applied to the newest frame).
    pub perturbed: Vec<Vec<f64>>,
    pub agent_actions: Vec<Vec<f64>>,
    pub adversary_actions: Vec<Vec<f64>>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Unperturbed stacked observation per agent at the successor.
    pub next_observations: Vec<Vec<f64>>,
}

/// Ring buffer: once full, new records overwrite the oldest.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    records: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, records: Vec::new(), next: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.records.len() < self.capacity {
            self.records.push(t);
        } else {
            self.records[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `k` distinct indices by partial Fisher-Yates over the filled prefix.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if k > self.records.len() {
            return Err(Error::Config(format!(
                "minibatch {k} exceeds buffer size {}",
                self.records.len()
            )));
        }
        let mut pool: Vec<usize> = (0..self.records.len()).collect();
        for i in 0..k {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(k, rng)?
            .into_iter()
            .map(|i| &self.records[i])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(tag: f64) -> Transition {
        Transition {
            state: vec![tag],
            observations: vec![vec![tag]],
            perturbed: vec![vec![tag]],
            agent_actions: vec![vec![0.0]],
            adversary_actions: vec![vec![0.0]],
            reward: tag,
            next_state: vec![tag],
            next_observations: vec![vec![tag]],
        }
    }

    #[test]
    fn rejects_zero_capacity() {
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            buf.push(tr(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let held: Vec<f64> = buf.records.iter().map(|t| t.reward).collect();
        // slots 0 and 1 were overwritten by records 3 and 4
        assert_eq!(held, vec![3.0, 4.0, 2.0]);
    }

    #[test]
    fn minibatch_indices_are_distinct() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        for i in 0..50 {
            buf.push(tr(i as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut idx = buf.sample_indices(32, &mut rng).unwrap();
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 32);
            assert!(idx.iter().all(|&i| i < 50));
        }
    }

    #[test]
    fn oversized_minibatch_is_an_error() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        buf.push(tr(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(buf.sample(2, &mut rng).is_err());
    }
}
