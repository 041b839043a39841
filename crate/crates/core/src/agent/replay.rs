use alloc::collections::VecDeque;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::sim::N_ACTIONS;

/// One joint step: both agents' actions share the reward and the next state.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Arc<TokenSequence>,
    /// Action index per CAV agent.
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_state: Arc<TokenSequence>,
    pub done: bool,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        if let Some(&a) = self.actions.iter().find(|&&a| a >= N_ACTIONS) {
            return Err(Error::Index { index: a, len: N_ACTIONS });
        }
        if !self.reward.is_finite() {
            return Err(Error::NonFinite { op: "reward" });
        }
        Ok(())
    }
}

/// FIFO ring of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate()?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` distinct transitions chosen uniformly at random.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if n == 0 || n > self.items.len() {
            return Err(Error::contract(alloc::format!(
                "cannot sample {n} transitions from {}",
                self.items.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(reward: f64) -> Transition {
        let seq = Arc::new(TokenSequence {
            tokens: Tensor::zeros(&[1, 4]),
            positions: alloc::vec![0],
            cav_index_map: alloc::vec![0],
        });
        Transition {
            state: seq.clone(),
            actions: alloc::vec![4, 0],
            reward,
            next_state: seq,
            done: false,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for r in 0..5 {
            b.push(t(r as f64)).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0).unwrap().reward, 2.0);
        assert_eq!(b.get(2).unwrap().reward, 4.0);
    }

    #[test]
    fn size_tracks_pushes_below_capacity() {
        let mut b = ReplayBuffer::new(4000).unwrap();
        for _ in 0..100 {
            b.push(t(0.0)).unwrap();
        }
        assert_eq!(b.len(), 100);
    }

    #[test]
    fn rejects_bad_transitions() {
        let mut b = ReplayBuffer::new(2).unwrap();
        let mut bad = t(0.0);
        bad.actions[1] = 9;
        assert!(b.push(bad).is_err());
        assert!(b.push(t(f64::NAN)).is_err());
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn samples_are_distinct() {
        let mut b = ReplayBuffer::new(20).unwrap();
        for r in 0..20 {
            b.push(t(r as f64)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rewards: Vec<f64> = b.sample(16, &mut rng).unwrap().iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        rewards.dedup();
        assert_eq!(rewards.len(), 16);
        assert!(b.sample(21, &mut rng).is_err());
    }
}
