//! Bounded replay pool of images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// What a full pool does with a new candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolDecision {
    /// Hand the candidate straight back.
    Keep,
    /// Return the stored image at this slot and store the candidate there.
    Swap(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePool {
    capacity: usize,
    #[serde(skip)]
    images: Vec<Tensor<f32>>,
    rng: ChaCha8Rng,
}

impl ImagePool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            images: Vec::with_capacity(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub(crate) fn restore_images(&mut self, images: Vec<Tensor<f32>>) {
        self.images = images;
    }

    /// Fill while not full; afterwards return the candidate or, with
    /// probability ½, swap it for a uniformly chosen stored image.
    pub fn query(&mut self, candidate: Tensor<f32>) -> Tensor<f32> {
        if self.capacity == 0 {
            return candidate;
        }
        if self.images.len() < self.capacity {
            self.images.push(candidate.clone());
            return candidate;
        }
        let decision = if self.rng.random_bool(0.5) {
            PoolDecision::Keep
        } else {
            PoolDecision::Swap(self.rng.random_range(0..self.images.len()))
        };
        self.apply(candidate, decision)
    }

    /// The full-pool branch of [`query`](Self::query) with the random draw supplied.
    pub fn apply(&mut self, candidate: Tensor<f32>, decision: PoolDecision) -> Tensor<f32> {
        match decision {
            PoolDecision::Swap(i) if i < self.images.len() => {
                std::mem::replace(&mut self.images[i], candidate)
            }
            _ => candidate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f32) -> Tensor<f32> {
        Tensor::full(&[1, 2, 2], v)
    }

    #[test]
    fn capacity_zero_passes_through() {
        let mut p = ImagePool::new(0, 1);
        for i in 0..5 {
            assert_eq!(p.query(t(i as f32)), t(i as f32));
        }
        assert!(p.is_empty());
    }

    #[test]
    fn capacity_one_swap_trace() {
        let mut p = ImagePool::new(1, 1);
        assert_eq!(p.query(t(1.0)), t(1.0));
        assert_eq!(p.images(), &[t(1.0)]);
        assert_eq!(p.apply(t(2.0), PoolDecision::Swap(0)), t(1.0));
        assert_eq!(p.images(), &[t(2.0)]);
        assert_eq!(p.apply(t(3.0), PoolDecision::Keep), t(3.0));
        assert_eq!(p.images(), &[t(2.0)]);
    }

    #[test]
    fn seeded_sequences_repeat() {
        let run = || {
            let mut p = ImagePool::new(3, 42);
            (0..40).map(|i| p.query(t(i as f32)).data()[0]).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        // both outcomes occur once full
        assert!(a[3..].iter().zip(3..).any(|(&v, i)| v == i as f32));
        assert!(a[3..].iter().zip(3..).any(|(&v, i)| v != i as f32));
    }

    #[test]
    fn never_exceeds_capacity() {
        let mut p = ImagePool::new(4, 0);
        for i in 0..100 {
            p.query(t(i as f32));
            assert!(p.len() <= 4);
        }
    }
}
