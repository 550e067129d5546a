//! Synthetic corpora drawn from a first-order Markov chain over items.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};

const CHAIN: u64 = 0x6368_6169;
const WALKS: u64 = 0x7761_6c6b;

/// Row-stochastic transition matrix; state `s` is item `s + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    pub transition: Vec<Vec<f64>>,
}

impl MarkovChain {
    /// Each state gets three preferred successors carrying most of the mass
    /// (0.55, 0.25, 0.1); the remaining 0.1 is spread over all states.
    pub fn random(states: usize, seed: u64) -> Result<Self> {
        if states < 4 {
            return Err(Error::Config(format!("need at least 4 states, got {states}")));
        }
        let mut rng = rng_for(seed, &[CHAIN]);
        let floor = 0.1 / states as f64;
        let transition = (0..states)
            .map(|_| {
                let mut row = vec![floor; states];
                let mut all: Vec<usize> = (0..states).collect();
                all.shuffle(&mut rng);
                for (&s, w) in all.iter().zip([0.55, 0.25, 0.1]) {
                    row[s] += w;
                }
                row
            })
            .collect();
        Ok(MarkovChain { transition })
    }

    pub fn states(&self) -> usize {
        self.transition.len()
    }

    pub fn step(&self, state: usize, rng: &mut Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (s, &p) in self.transition[state].iter().enumerate() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        self.states() - 1
    }

    /// `users` walks with uniform start states and lengths in
    /// `min_len..=max_len`, geometric above `min_len` (mean excess ≈ 5).
    pub fn sample_corpus(&self, users: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = rng_for(seed, &[WALKS]);
        (0..users)
            .map(|_| {
                let mut len = min_len;
                while len < max_len && rng.gen_bool(0.8) {
                    len += 1;
                }
                let mut s = rng.gen_range(0..self.states());
                let mut seq = Vec::with_capacity(len);
                for _ in 0..len {
                    seq.push(s + 1);
                    s = self.step(s, &mut rng);
                }
                seq
            })
            .collect()
    }
}
