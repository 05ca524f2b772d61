use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Each example joins each batch independently with probability `b̄/N`.
    #[default]
    Poisson,
    /// Fixed-size batches from a per-epoch shuffle.
    Shuffled,
}

#[derive(Debug, Clone)]
pub struct BatchSampler {
    kind: Sampling,
    n: usize,
    batch: usize,
    rng: ChaCha20Rng,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(kind: Sampling, n: usize, batch: usize, rng: ChaCha20Rng) -> Self {
        Self {
            kind,
            n,
            batch: batch.min(n).max(1),
            rng,
            perm: (0..n).collect(),
            cursor: n,
        }
    }

    pub fn population(&self) -> usize {
        self.n
    }

    /// Indices of the next batch, ascending for Poisson, shuffle order otherwise.
    pub fn next_batch(&mut self) -> Vec<usize> {
        match self.kind {
            Sampling::Poisson => {
                let q = self.batch as f64 / self.n as f64;
                (0..self.n).filter(|_| self.rng.random::<f64>() < q).collect()
            }
            Sampling::Shuffled => {
                if self.cursor + self.batch > self.n {
                    self.perm.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let out = self.perm[self.cursor..self.cursor + self.batch].to_vec();
                self.cursor += self.batch;
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::seeded_stream;

    #[test]
    fn poisson_mean_size() {
        let mut s = BatchSampler::new(Sampling::Poisson, 1000, 50, seeded_stream(4, 0));
        let total: usize = (0..200).map(|_| s.next_batch().len()).sum();
        let mean = total as f64 / 200.0;
        // sd of the mean ≈ sqrt(50·0.95/200) ≈ 0.49
        assert!((mean - 50.0).abs() < 2.5, "{mean}");
    }

    #[test]
    fn shuffled_covers_epoch() {
        let mut s = BatchSampler::new(Sampling::Shuffled, 10, 5, seeded_stream(4, 0));
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
