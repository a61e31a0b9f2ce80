//! Fixed-capacity FIFO experience memory with uniform sampling.

use std::collections::VecDeque;

use rand::Rng;

#[derive(Debug, Clone)]
pub struct ReplayMemory<T> {
    capacity: usize,
    items: VecDeque<T>,
    inserted: u64,
}

impl<T> ReplayMemory<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "replay capacity must be at least 1");
        ReplayMemory {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 20)),
            inserted: 0,
        }
    }

    /// Appends a transition, evicting the oldest when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of pushes, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Oldest first.
    pub fn get(&self, index: usize) -> &T {
        &self.items[index]
    }

    /// Uniform sample over current contents, with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
        assert!(!self.items.is_empty());
        (0..batch)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eviction_is_strictly_fifo() {
        let mut mem = ReplayMemory::new(5);
        for v in 0..9u32 {
            mem.push(v);
        }
        assert_eq!(mem.len(), 5);
        assert_eq!(mem.inserted(), 9);
        // After capacity + 4 pushes the oldest 4 are gone, order kept.
        let got: Vec<u32> = mem.iter().copied().collect();
        assert_eq!(got, vec![4, 5, 6, 7, 8]);
    }

    #[test]
    fn sampling_is_uniform_by_chi_squared() {
        let mut mem = ReplayMemory::new(1000);
        for v in 0..1000u32 {
            mem.push(v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let draws = 100_000usize;
        let mut counts = vec![0u64; 1000];
        for idx in mem.sample_indices(draws, &mut rng) {
            counts[idx] += 1;
        }
        let expected = draws as f64 / 1000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99th percentile of chi-squared with 999 degrees of freedom.
        assert!(chi2 < 1105.92, "chi^2 = {chi2}");
    }
}
