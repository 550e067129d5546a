//! Pieces shared by the pre-training and fine-tuning loops.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::PAD;
use crate::encoder::{Encoded, Encoder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Gradients, ParamStore, Var};
use crate::rng::{self, Rng};

/// Batches are split into this many contiguous chunks for parallel gradient
/// accumulation. Fixing the count (rather than using the thread count) keeps
/// the floating-point summation order, and so the results, reproducible.
const GRAD_CHUNKS: usize = 8;

/// A next-item view of one sequence: `targets[k]` is supervised at input
/// position `k` with weight `weights[k]` (0 disables it).
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    pub negatives: Vec<usize>,
    pub weights: Vec<f64>,
}

impl View {
    /// Shifted view of `items`: input `items[..m-1]`, targets `items[1..]`,
    /// truncated to the last `max_len` positions. Padding targets are never
    /// supervised.
    pub fn shifted(items: &[usize], max_len: usize) -> Self {
        let m = items.len();
        if m < 2 {
            return Self::from_pairs(Vec::new(), Vec::new());
        }
        let keep = (m - 1).min(max_len);
        let input = items[m - 1 - keep..m - 1].to_vec();
        let targets = items[m - keep..].to_vec();
        Self::from_pairs(input, targets)
    }

    pub fn from_pairs(input: Vec<usize>, targets: Vec<usize>) -> Self {
        let weights = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
        View {
            negatives: vec![PAD; targets.len()],
            input,
            targets,
            weights,
        }
    }

    pub fn supervised(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn supervised_mask(&self) -> Vec<bool> {
        self.weights.iter().map(|&w| w > 0.0).collect()
    }

    pub fn apply_mask(&mut self, mask: &[bool]) {
        for (w, &m) in self.weights.iter_mut().zip(mask) {
            if !m {
                *w = 0.0;
            }
        }
    }

    /// Draws one negative per supervised position from items outside
    /// `exclude`.
    pub fn sample_negatives(
        &mut self,
        exclude: &std::collections::HashSet<usize>,
        num_items: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let targets: Vec<usize> = self
            .targets
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| if w > 0.0 { t } else { PAD })
            .collect();
        self.negatives = crate::corpus::sample_train_negatives(&targets, exclude, num_items, rng)?;
        Ok(())
    }
}

/// Encodes a view. `input` is left-padded to `n`; the returned hidden rows
/// line up with the non-padding suffix of the padded input.
pub fn encode_view(
    enc: &Encoder,
    g: &mut Graph,
    view: &View,
    dropout: Option<&mut Rng>,
) -> Result<Option<Encoded>> {
    let padded = crate::corpus::pad_truncate(&view.input, enc.config().max_len);
    enc.forward(g, &padded, dropout)
}

/// Scalar `scale · Σ_k w_k · BCE(h_k·e_{target_k}, h_k·e_{neg_k})` over the
/// positions of an encoded view.
pub fn view_bce(enc: &Encoder, g: &mut Graph, encoded: &Encoded, view: &View, scale: f64) -> Result<Var> {
    let skip = view.input.len() - encoded.len;
    let targets = &view.targets[skip..];
    let negatives = &view.negatives[skip..];
    let weights: Vec<f64> = view.weights[skip..].iter().map(|w| w * scale).collect();
    let table = g.param(enc.item_table());
    let pos = g.gather(table, targets)?;
    let neg = g.gather(table, negatives)?;
    let sp = g.row_dot(encoded.hidden, pos)?;
    let sn = g.row_dot(encoded.hidden, neg)?;
    g.bce(sp, sn, &weights)
}

/// Per-example output of a loss builder: the scalar to differentiate and
/// named component values for reporting.
pub struct Built<const N: usize> {
    pub root: Option<Var>,
    pub parts: [f64; N],
}

/// Accumulates the gradient of `Σ_example root` over a batch. Examples are
/// independent, so each one gets its own graph.
pub fn accumulate<T, F, const N: usize>(params: &ParamStore, batch: &[T], build: F) -> Result<(Gradients, [f64; N])>
where
    T: Sync,
    F: Fn(&mut Graph, &T) -> Result<Built<N>> + Sync,
{
    if batch.is_empty() {
        return Ok((params.zero_grads(), [0.0; N]));
    }
    let chunk = batch.len().div_ceil(GRAD_CHUNKS);
    let partial: Vec<Result<(Gradients, [f64; N])>> = batch
        .par_chunks(chunk)
        .map(|examples| {
            let mut grads = params.zero_grads();
            let mut parts = [0.0; N];
            for ex in examples {
                let mut g = Graph::new(params);
                let built = build(&mut g, ex)?;
                if let Some(root) = built.root {
                    g.backward(root, &mut grads)?;
                }
                for (p, b) in parts.iter_mut().zip(built.parts) {
                    *p += b;
                }
            }
            Ok((grads, parts))
        })
        .collect();
    let mut iter = partial.into_iter();
    let (mut grads, mut parts) = iter.next().expect("non-empty batch")?;
    for r in iter {
        let (g, p) = r?;
        for ((_, acc), (_, x)) in grads.iter_mut().zip(g.iter()) {
            acc.add_assign(x);
        }
        for (a, b) in parts.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok((grads, parts))
}

/// Indices `0..n` in the seeded order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_for(seed, &[rng::stream::SHUFFLE, epoch as u64]));
    order
}

pub fn check_finite(step: u64, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

pub fn dropout_rng(seed: u64, step: u64, user: usize, view: u64) -> Rng {
    rng::rng_for(seed, &[rng::stream::DROPOUT, step, user as u64, view])
}

pub fn validate_schedule(epochs: usize, batch_size: usize, lr: f64) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be finite and ≥ 0")));
    }
    let _ = epochs;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_view() {
        let v = View::shifted(&[1, 2, 3, 4], 10);
        assert_eq!(v.input, vec![1, 2, 3]);
        assert_eq!(v.targets, vec![2, 3, 4]);
        let v = View::shifted(&[1, 2, 3, 4], 2);
        assert_eq!(v.input, vec![2, 3]);
        assert_eq!(v.targets, vec![3, 4]);
        assert_eq!(View::shifted(&[5], 3).supervised(), 0);
        let v = View::shifted(&[1, PAD, 3], 5);
        assert_eq!(v.weights, vec![0.0, 1.0]);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(1, 0, 50);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 50));
        assert_ne!(a, epoch_order(1, 1, 50));
    }
}
