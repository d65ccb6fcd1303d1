//! Dual buffer experience replay.
//!
//! Transitions of the running episode sit in an episode buffer and are
//! invisible to sampling. [`DualReplayBuffer::end_episode`] copies them into a
//! bounded FIFO back buffer, which is the only source of training batches.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    /// Index of the episode that produced this transition.
    pub episode: u64,
}

impl Transition {
    pub fn new(
        state: Vec<f64>,
        action: Vec<f64>,
        reward: f64,
        next_state: Vec<f64>,
        terminal: bool,
    ) -> Self {
        Transition {
            state,
            action,
            reward,
            next_state,
            terminal,
            episode: 0,
        }
    }

    pub fn with_episode(mut self, episode: u64) -> Self {
        self.episode = episode;
        self
    }
}

#[derive(Debug, Clone)]
pub struct DualReplayBuffer {
    episode: Vec<Transition>,
    back: VecDeque<Transition>,
    capacity: usize,
}

impl DualReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay_capacity", "replay capacity must be positive"));
        }
        Ok(DualReplayBuffer {
            episode: Vec::new(),
            back: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends to the episode buffer only.
    pub fn record(&mut self, t: Transition) {
        self.episode.push(t);
    }

    /// Moves the episode buffer into the back buffer in order, evicting the
    /// oldest back-buffer entries beyond capacity.
    pub fn end_episode(&mut self) {
        for t in self.episode.drain(..) {
            if self.back.len() == self.capacity {
                self.back.pop_front();
            }
            self.back.push_back(t);
        }
    }

    /// `k` uniform draws with replacement from the back buffer.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if k == 0 || self.back.len() < k {
            return Err(Error::NotReady {
                available: self.back.len(),
                requested: k,
            });
        }
        Ok((0..k)
            .map(|_| &self.back[rng.random_range(0..self.back.len())])
            .collect())
    }

    pub fn episode_len(&self) -> usize {
        self.episode.len()
    }

    pub fn back_len(&self) -> usize {
        self.back.len()
    }

    pub fn episode_transitions(&self) -> &[Transition] {
        &self.episode
    }

    pub fn back_transitions(&self) -> impl Iterator<Item = &Transition> {
        self.back.iter()
    }
}
