//! Bidirectional chronological pre-training.
//!
//! One encoder is trained on two views of every training sequence:
//!
//! * the reverse view `[v_m, …, v_1]`, learning to predict each item's
//!   predecessor, which is what later generates pseudo-prior items;
//! * the forward view `[v_0, v_1, …, v_{m−1}]` with targets `[v_1, …, v_m]`,
//!   where `v_0` is the current model's greedy reverse guess for the item
//!   before `v_1`. This constrains generated items to also explain what
//!   follows them.
//!
//! `L = L_reverse + λ · L_forward`, each direction averaged over its own
//! supervised positions in the batch.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::finetune::informative_clip;
use crate::numerics::graph::neg_log_sigmoid;
use crate::numerics::{Adam, AdamConfig};
use crate::rng;
use crate::train::{self, Built, View};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    /// Weight of the forward constraint.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Supervise only the final position of the forward view.
    pub forward_last_only: bool,
    /// Informative clipping of early positions; 0 leaves it off.
    pub clip_k: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lambda: 0.4,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            forward_last_only: false,
            clip_k: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be finite and ≥ 0", self.lambda)));
        }
        train::validate_schedule(self.epochs, self.batch_size, self.lr)
    }
}

pub fn reverse_sequence(items: &[usize]) -> Vec<usize> {
    items.iter().rev().copied().collect()
}

/// Mean over unmasked positions of `−ln σ(pos) − ln(1 − σ(neg))`, with the
/// probabilities clamped away from 0 and 1 by `1e-12`. `mask[k] == true`
/// marks a supervised position.
pub fn bce_position_loss(pos: &[f64], neg: &[f64], mask: &[bool]) -> Result<f64> {
    if pos.len() != neg.len() || pos.len() != mask.len() {
        return Err(Error::Dimension {
            op: "bce_position_loss",
            left: vec![pos.len(), neg.len()],
            right: vec![mask.len()],
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..pos.len() {
        if mask[k] {
            total += neg_log_sigmoid(pos[k]).0 + neg_log_sigmoid(-neg[k]).0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Loss("no supervised positions".into()));
    }
    Ok(total / count as f64)
}

/// Both directional views of one user's training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalExample {
    pub user: usize,
    pub reverse: View,
    pub forward: View,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DirectionalBatch {
    pub examples: Vec<DirectionalExample>,
}

impl DirectionalBatch {
    fn counts(&self) -> (usize, usize) {
        self.examples
            .iter()
            .fold((0, 0), |(r, f), e| (r + e.reverse.supervised(), f + e.forward.supervised()))
    }
}

/// Builds the two views for `train` given the pseudo-prior slot `v0`.
/// Sequences shorter than 2 carry no reverse supervision and yield `None`.
pub fn directional_example(
    user: usize,
    train: &[usize],
    v0: usize,
    max_len: usize,
    config: &PretrainConfig,
) -> Option<DirectionalExample> {
    if train.len() < 2 {
        return None;
    }
    let mut reverse = View::shifted(&reverse_sequence(train), max_len);
    let mut with_prior = Vec::with_capacity(train.len() + 1);
    with_prior.push(v0);
    with_prior.extend_from_slice(train);
    let mut forward = View::shifted(&with_prior, max_len);
    if config.forward_last_only {
        let last = forward.weights.len() - 1;
        forward.weights[..last].iter_mut().for_each(|w| *w = 0.0);
    }
    if config.clip_k > 0 {
        for view in [&mut reverse, &mut forward] {
            let mask = informative_clip(&view.supervised_mask(), config.clip_k);
            view.apply_mask(&mask);
        }
    }
    Some(DirectionalExample { user, reverse, forward })
}

/// Assembles a batch for `users` (indices into `sequences`), generating each
/// `v0` with the current model and drawing fresh negatives.
pub fn build_batch(
    model: &Model,
    sequences: &[Vec<usize>],
    users: &[usize],
    config: &PretrainConfig,
    step: u64,
) -> Result<DirectionalBatch> {
    let n = model.config().max_len;
    let examples: Vec<Option<DirectionalExample>> = users
        .par_iter()
        .map(|&u| {
            let train = &sequences[u];
            if train.len() < 2 {
                return Ok(None);
            }
            let v0 = crate::augment::greedy_next(model, &reverse_sequence(train))?;
            Ok(directional_example(u, train, v0, n, config))
        })
        .collect::<Result<_>>()?;
    let mut rng = rng::rng_for(config.seed, &[rng::stream::NEGATIVES, step]);
    let mut batch = DirectionalBatch::default();
    for mut ex in examples.into_iter().flatten() {
        let exclude: HashSet<usize> = sequences[ex.user].iter().copied().collect();
        ex.reverse.sample_negatives(&exclude, model.num_items(), &mut rng)?;
        ex.forward.sample_negatives(&exclude, model.num_items(), &mut rng)?;
        batch.examples.push(ex);
    }
    Ok(batch)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainLoss {
    pub reverse: f64,
    pub forward: f64,
    pub total: f64,
}

/// Loss and gradient of `L_reverse + λ · L_forward` on a batch. The forward
/// term is always evaluated for reporting but only enters the gradient when
/// `λ > 0`.
pub fn pretrain_loss(
    model: &Model,
    batch: &DirectionalBatch,
    lambda: f64,
    step: u64,
    dropout_seed: Option<u64>,
) -> Result<(PretrainLoss, crate::numerics::Gradients)> {
    let (nr, nf) = batch.counts();
    if nr == 0 {
        return Err(Error::Loss("pre-training batch has no supervised positions".into()));
    }
    let enc = &model.encoder;
    let (grads, [lr, lf]) = train::accumulate(&model.params, &batch.examples, |g, ex| {
        let mut r_rng = dropout_seed.map(|s| train::dropout_rng(s, step, ex.user, 0));
        let mut f_rng = dropout_seed.map(|s| train::dropout_rng(s, step, ex.user, 1));
        let Some(er) = train::encode_view(enc, g, &ex.reverse, r_rng.as_mut())? else {
            return Ok(Built { root: None, parts: [0.0; 2] });
        };
        let rev = train::view_bce(enc, g, &er, &ex.reverse, 1.0 / nr as f64)?;
        let mut parts = [g.value(rev).item(), 0.0];
        let mut terms = vec![(rev, 1.0)];
        if nf > 0 {
            if let Some(ef) = train::encode_view(enc, g, &ex.forward, f_rng.as_mut())? {
                let fwd = train::view_bce(enc, g, &ef, &ex.forward, 1.0 / nf as f64)?;
                parts[1] = g.value(fwd).item();
                if lambda > 0.0 {
                    terms.push((fwd, lambda));
                }
            }
        }
        let root = if terms.len() == 1 { rev } else { g.lin_comb(&terms)? };
        Ok(Built { root: Some(root), parts })
    })?;
    let loss = PretrainLoss {
        reverse: lr,
        forward: lf,
        total: lr + lambda * lf,
    };
    Ok((loss, grads))
}

/// One optimizer step on a batch.
pub fn pretrain_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &DirectionalBatch,
    config: &PretrainConfig,
) -> Result<PretrainLoss> {
    let step = adam.steps();
    let (loss, grads) = pretrain_loss(model, batch, config.lambda, step, Some(config.seed))?;
    train::check_finite(step, loss.total)?;
    if !grads.is_finite() {
        return Err(Error::Divergence { step, loss: f64::NAN });
    }
    adam.step(&mut model.params, &grads);
    model.zero_padding_row();
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss_reverse: f64,
    pub loss_forward: f64,
    pub loss_total: f64,
}

/// Trains `model` on the training sequences; returns per-epoch mean losses.
pub fn run_pretrain(sequences: &[Vec<usize>], model: &mut Model, config: &PretrainConfig) -> Result<Vec<PretrainEpoch>> {
    run_pretrain_with(sequences, model, config, |_, _| Ok(()))
}

/// [`run_pretrain`] with a hook called after every epoch.
pub fn run_pretrain_with<F>(
    sequences: &[Vec<usize>],
    model: &mut Model,
    config: &PretrainConfig,
    mut on_epoch: F,
) -> Result<Vec<PretrainEpoch>>
where
    F: FnMut(&PretrainEpoch, &Model) -> Result<()>,
{
    config.validate()?;
    let eligible: Vec<usize> = (0..sequences.len()).filter(|&u| sequences[u].len() >= 2).collect();
    if eligible.is_empty() && config.epochs > 0 {
        return Err(Error::EmptyCorpus("no training sequence has two or more items".into()));
    }
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order: Vec<usize> = train::epoch_order(config.seed, epoch, eligible.len())
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        let mut sums = [0.0; 3];
        let mut steps = 0;
        for users in order.chunks(config.batch_size) {
            let batch = build_batch(model, sequences, users, config, adam.steps())?;
            let loss = pretrain_step(model, &mut adam, &batch, config)?;
            sums[0] += loss.reverse;
            sums[1] += loss.forward;
            sums[2] += loss.total;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        let record = PretrainEpoch {
            epoch,
            loss_reverse: sums[0] / s,
            loss_forward: sums[1] / s,
            loss_total: sums[2] / s,
        };
        on_epoch(&record, model)?;
        trace.push(record);
    }
    Ok(trace)
}

pub fn write_trace<W: Write>(mut w: W, trace: &[PretrainEpoch]) -> std::io::Result<()> {
    writeln!(w, "epoch,loss_reverse,loss_forward,loss_total")?;
    for t in trace {
        writeln!(w, "{},{},{},{}", t.epoch, t.loss_reverse, t.loss_forward, t.loss_total)?;
    }
    Ok(())
}

pub fn save_trace(path: &Path, trace: &[PretrainEpoch]) -> Result<()> {
    crate::io::write_atomic(path, |w| write_trace(w, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn toy_model(seed: u64, dropout: f64) -> Model {
        let cfg = EncoderConfig {
            max_len: 8,
            dim: 8,
            heads: 2,
            layers: 1,
            dropout,
            scale_full_dim: false,
        };
        Model::init(cfg, 6, seed).unwrap()
    }

    fn toy_sequences() -> Vec<Vec<usize>> {
        vec![vec![1, 2, 3, 4], vec![2, 5, 6], vec![6, 1], vec![3]]
    }

    #[test]
    fn reverse_cases() {
        assert_eq!(reverse_sequence(&[1, 2, 3]), vec![3, 2, 1]);
        assert!(reverse_sequence(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn reverse_is_an_involution(v in proptest::collection::vec(0usize..100, 0..40)) {
            prop_assert_eq!(reverse_sequence(&reverse_sequence(&v)), v);
        }
    }

    #[test]
    fn bce_position_cases() {
        let l = bce_position_loss(&[50.0], &[-50.0], &[true]).unwrap();
        assert!(l < 1e-11);
        let l = bce_position_loss(&[0.0, 7.0], &[0.0, 1.0], &[true, false]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(matches!(bce_position_loss(&[1.0], &[1.0], &[false]), Err(Error::Loss(_))));
    }

    #[test]
    fn bce_matches_softplus_formula() {
        // −ln σ(x) = ln(1 + e^{−x}), −ln(1 − σ(y)) = ln(1 + e^{y}), evaluated
        // in the numerically stable log1p form.
        let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let mut rng = rng::Rng::seed_from_u64(11);
        let pos: Vec<f64> = (0..200).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let neg: Vec<f64> = (0..200).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let mask: Vec<bool> = (0..200).map(|k| k % 3 != 0).collect();
        let got = bce_position_loss(&pos, &neg, &mask).unwrap();
        let mut want = 0.0;
        let mut c = 0.0;
        for k in 0..200 {
            if mask[k] {
                want += softplus(-pos[k]) + softplus(neg[k]);
                c += 1.0;
            }
        }
        assert!((got - want / c).abs() < 1e-10);
    }

    #[test]
    fn views_are_built_as_specified() {
        let cfg = PretrainConfig::default();
        let ex = directional_example(0, &[1, 2, 3], 5, 8, &cfg).unwrap();
        assert_eq!(ex.reverse.input, vec![3, 2]);
        assert_eq!(ex.reverse.targets, vec![2, 1]);
        assert_eq!(ex.forward.input, vec![5, 1, 2]);
        assert_eq!(ex.forward.targets, vec![1, 2, 3]);
        assert_eq!(ex.forward.supervised(), 3);
        let last = PretrainConfig {
            forward_last_only: true,
            ..cfg.clone()
        };
        let ex = directional_example(0, &[1, 2, 3], 5, 8, &last).unwrap();
        assert_eq!(ex.forward.weights, vec![0.0, 0.0, 1.0]);
        assert!(directional_example(0, &[4], 5, 8, &cfg).is_none());
    }

    #[test]
    fn reverse_supervision_stays_inside_the_mirror() {
        let cfg = PretrainConfig::default();
        for train in [vec![1, 2], vec![4, 3, 2, 1, 6], vec![2, 2, 5]] {
            let ex = directional_example(0, &train, 1, 8, &cfg).unwrap();
            let mirror = reverse_sequence(&train);
            assert_eq!(ex.reverse.targets, mirror[1..].to_vec());
            assert!(ex.reverse.input.iter().all(|i| train.contains(i)));
        }
    }

    fn batch_for(model: &Model, cfg: &PretrainConfig) -> DirectionalBatch {
        let seqs = toy_sequences();
        build_batch(model, &seqs, &[0, 1, 2, 3], cfg, 0).unwrap()
    }

    #[test]
    fn loss_is_linear_in_lambda() {
        let model = toy_model(3, 0.0);
        let cfg = PretrainConfig::default();
        let batch = batch_for(&model, &cfg);
        let at = |l: f64| pretrain_loss(&model, &batch, l, 0, None).unwrap().0;
        let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
        assert_eq!(l0.total, l0.reverse);
        assert!((l1.total - l0.total - l1.forward).abs() < 1e-12);
        assert!((l2.total - l0.total - 2.0 * l1.forward).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_gradient_is_reverse_only() {
        let model = toy_model(5, 0.0);
        let cfg = PretrainConfig::default();
        let mut batch = batch_for(&model, &cfg);
        let (_, g0) = pretrain_loss(&model, &batch, 0.0, 0, None).unwrap();
        for ex in &mut batch.examples {
            ex.forward.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let (_, g_rev) = pretrain_loss(&model, &batch, 0.0, 0, None).unwrap();
        assert_eq!(g0.max_abs_diff(&g_rev), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for lambda in [0.0, 0.4] {
            let model = toy_model(7, 0.0);
            let cfg = PretrainConfig::default();
            let batch = batch_for(&model, &cfg);
            let enc = model.encoder.clone();
            let report = grad_check(&model.params, 1e-5, |p| {
                let m = Model {
                    encoder: enc.clone(),
                    params: p.clone(),
                };
                let (loss, grads) = pretrain_loss(&m, &batch, lambda, 0, None)?;
                Ok((loss.total, grads))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "λ={lambda}: {report:?}");
        }
    }

    #[test]
    fn zero_lr_keeps_params_and_loss() {
        let mut model = toy_model(1, 0.0);
        let before = model.params.clone();
        let cfg = PretrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let trace = run_pretrain(&toy_sequences(), &mut model, &cfg).unwrap();
        assert_eq!(model.params, before);
        assert_eq!(trace.len(), 3);
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = PretrainConfig {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let run = || {
            let mut m = toy_model(2, 0.3);
            let t = run_pretrain(&toy_sequences(), &mut m, &cfg).unwrap();
            (t, m.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn overfits_a_single_sequence() {
        let mut model = toy_model(4, 0.0);
        let cfg = PretrainConfig {
            lambda: 0.0,
            epochs: 400,
            batch_size: 1,
            lr: 1e-2,
            ..Default::default()
        };
        let trace = run_pretrain(&[vec![1, 2, 3, 4, 5]], &mut model, &cfg).unwrap();
        assert!(trace.last().unwrap().loss_reverse < 0.1, "{:?}", trace.last());
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace(
            &mut buf,
            &[PretrainEpoch {
                epoch: 0,
                loss_reverse: 1.0,
                loss_forward: 2.0,
                loss_total: 1.8,
            }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,loss_reverse,loss_forward,loss_total\n0,1,2,1.8\n");
    }
}
