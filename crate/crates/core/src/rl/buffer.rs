use std::collections::VecDeque;

use rand::Rng;

use super::RlError;

/// One closed-loop step. `reward` is the negated total stage cost and
/// `bus_rewards` its per-bus split, used by decentralized agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub reward: f64,
    pub bus_rewards: Vec<f64>,
    pub v_next: Vec<f64>,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self
                .v
                .iter()
                .chain(&self.u)
                .chain(&self.bus_rewards)
                .chain(&self.v_next)
                .all(|x| x.is_finite())
    }
}

/// FIFO ring of transitions with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) -> Result<(), RlError> {
        if !t.is_finite() {
            return Err(RlError::NonFinite("transition".into()));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Draws `batch` indices uniformly. Refuses until the buffer holds at
    /// least `batch` transitions.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>, RlError> {
        if self.items.len() < batch || batch == 0 {
            return Err(RlError::BufferTooSmall {
                len: self.items.len(),
                batch,
            });
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>, RlError> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(k: f64) -> Transition {
        Transition {
            v: vec![k],
            u: vec![0.0],
            reward: -k,
            bus_rewards: vec![-k],
            v_next: vec![k],
        }
    }

    #[test]
    fn evicts_fifo() {
        let mut b = ReplayBuffer::new(5);
        for k in 0..8 {
            b.push(tr(k as f64)).unwrap();
        }
        assert_eq!(b.len(), 5);
        let kept: Vec<f64> = b.iter().map(|t| t.v[0]).collect();
        assert_eq!(kept, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn refuses_small_buffer_and_non_finite() {
        let mut b = ReplayBuffer::new(10);
        b.push(tr(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(2, &mut rng), Err(RlError::BufferTooSmall { .. })));
        assert!(b.push(tr(f64::NAN)).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(8);
        for k in 0..8 {
            b.push(tr(k as f64)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..draws / 8 {
            for i in b.sample_indices(8, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let p = 1.0 / 8.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sigma, "{counts:?}");
        }
    }
}
