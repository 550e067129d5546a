//! Fine-tuning on augmented sequences with self-distillation between the
//! augmented and original views.
//!
//! `L = BCE_aug + α · KL_sym`. The BCE term is the next-item loss on the
//! augmented view with the earliest `clip_k` positions of each sequence left
//! out. The KL term compares the full-vocabulary prediction distributions of
//! both views on the positions they share; since augmentation only prepends,
//! those are matched from the end of the sequence backwards.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;

use crate::augment::{AugmentedCorpus, AugmentedSequence};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Gradients, Graph};
use crate::rng;
use crate::train::{self, Built, View};

/// Clamp used when comparing probabilities directly.
pub const KL_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Weight of the distillation term.
    pub alpha: f64,
    /// Number of early supervised positions left out of the BCE term.
    pub clip_k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Start from freshly initialized weights instead of the given model.
    pub rt: bool,
    /// Approximate the KL term over this many sampled items per step.
    pub kl_sample: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            alpha: 1.0,
            clip_k: 8,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            rt: false,
            kl_sample: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be finite and ≥ 0", self.alpha)));
        }
        if self.kl_sample == Some(0) {
            return Err(Error::Config("KL sample size must be ≥ 1".into()));
        }
        train::validate_schedule(self.epochs, self.batch_size, self.lr)
    }
}

/// Disables the first `clip_k` supervised positions of a sequence. When that
/// would leave nothing, the final supervised position stays enabled.
pub fn informative_clip(supervised: &[bool], clip_k: usize) -> Vec<bool> {
    let mut out = supervised.to_vec();
    let positions: Vec<usize> = (0..supervised.len()).filter(|&k| supervised[k]).collect();
    let cut = clip_k.min(positions.len().saturating_sub(1));
    for &p in &positions[..cut] {
        out[p] = false;
    }
    out
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Softmax over all real items at each position of `items` (evaluation mode).
/// Row `k` is the prediction after `items[..=k]`; entry `j` belongs to item
/// `j + 1`. Only the last `max_len` positions are encoded.
pub fn prediction_distribution(model: &Model, items: &[usize]) -> Result<Vec<Vec<f64>>> {
    let padded = crate::corpus::pad_truncate(items, model.config().max_len);
    let mut g = Graph::new(&model.params);
    let Some(enc) = model.encoder.forward(&mut g, &padded, None)? else {
        return Ok(Vec::new());
    };
    let h = g.value(enc.hidden);
    Ok((0..enc.len).map(|k| softmax(&model.relevance(h.row(k)))).collect())
}

/// `½[KL(P1‖P2) + KL(P2‖P1)]` averaged over positions, with probabilities
/// clamped to at least [`KL_EPS`].
pub fn bidirectional_kl(p1: &[Vec<f64>], p2: &[Vec<f64>]) -> Result<f64> {
    if p1.len() != p2.len() {
        return Err(Error::Alignment {
            left: p1.len(),
            right: p2.len(),
        });
    }
    if p1.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (a, b) in p1.iter().zip(p2) {
        if a.len() != b.len() {
            return Err(Error::Alignment {
                left: a.len(),
                right: b.len(),
            });
        }
        let mut kl = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x.max(KL_EPS), y.max(KL_EPS));
            kl += (x - y) * (x.ln() - y.ln());
        }
        total += 0.5 * kl;
    }
    Ok(total / p1.len() as f64)
}

/// Both views of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct DualExample {
    pub user: usize,
    pub aug: View,
    pub org: View,
    /// Trailing positions shared by both views; 0 when nothing was
    /// generated, since the views then coincide.
    pub aligned: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DualBatch {
    pub examples: Vec<DualExample>,
    /// Columns of the item table entering the KL term.
    pub kl_items: Vec<usize>,
}

pub fn dual_example(seq: &AugmentedSequence, max_len: usize, clip_k: usize) -> DualExample {
    let mut aug = View::shifted(&seq.items, max_len);
    let mask = informative_clip(&aug.supervised_mask(), clip_k);
    aug.apply_mask(&mask);
    let org = View::shifted(seq.original(), max_len);
    let aligned = if seq.generated > 0 { org.input.len() } else { 0 };
    DualExample {
        user: seq.user,
        aug,
        org,
        aligned,
    }
}

pub fn build_batch(
    model: &Model,
    seqs: &[&AugmentedSequence],
    config: &FinetuneConfig,
    step: u64,
) -> Result<DualBatch> {
    let n = model.config().max_len;
    let v = model.num_items();
    let mut rng = rng::rng_for(config.seed, &[rng::stream::NEGATIVES, step]);
    let mut examples = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut ex = dual_example(s, n, config.clip_k);
        let exclude: HashSet<usize> = s.items.iter().copied().collect();
        ex.aug.sample_negatives(&exclude, v, &mut rng)?;
        examples.push(ex);
    }
    let kl_items = match config.kl_sample {
        Some(k) if k < v => {
            let mut items: Vec<usize> = sample(&mut rng, v, k).into_iter().map(|i| i + 1).collect();
            items.sort_unstable();
            items
        }
        _ => (1..=v).collect(),
    };
    Ok(DualBatch { examples, kl_items })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneLoss {
    pub bce: f64,
    pub kl: f64,
    pub total: f64,
}

/// Loss and gradient of `BCE_aug + α · KL` on a batch. With `α = 0` the
/// distillation term is not part of the differentiated graph at all.
pub fn finetune_loss(
    model: &Model,
    batch: &DualBatch,
    alpha: f64,
    step: u64,
    dropout_seed: Option<u64>,
) -> Result<(FinetuneLoss, Gradients)> {
    let nb: usize = batch.examples.iter().map(|e| e.aug.supervised()).sum();
    let nk: usize = batch.examples.iter().map(|e| e.aligned).sum();
    if nb == 0 {
        return Err(Error::Loss("fine-tuning batch has no supervised positions".into()));
    }
    let enc = &model.encoder;
    let (grads, [lb, lk]) = train::accumulate(&model.params, &batch.examples, |g, ex| {
        let mut a_rng = dropout_seed.map(|s| train::dropout_rng(s, step, ex.user, 0));
        let mut o_rng = dropout_seed.map(|s| train::dropout_rng(s, step, ex.user, 1));
        let Some(ea) = train::encode_view(enc, g, &ex.aug, a_rng.as_mut())? else {
            return Ok(Built { root: None, parts: [0.0; 2] });
        };
        let bce = train::view_bce(enc, g, &ea, &ex.aug, 1.0 / nb as f64)?;
        let mut parts = [g.value(bce).item(), 0.0];
        if ex.aligned == 0 {
            return Ok(Built { root: Some(bce), parts });
        }
        let Some(eo) = train::encode_view(enc, g, &ex.org, o_rng.as_mut())? else {
            return Ok(Built { root: Some(bce), parts });
        };
        let c = ex.aligned.min(ea.len).min(eo.len);
        let rows_a: Vec<usize> = (ea.len - c..ea.len).collect();
        let rows_o: Vec<usize> = (eo.len - c..eo.len).collect();
        let ha = g.select_rows(ea.hidden, &rows_a)?;
        let ho = g.select_rows(eo.hidden, &rows_o)?;
        let table = g.param(enc.item_table());
        let items = g.gather(table, &batch.kl_items)?;
        let la = g.matmul_bt(ha, items)?;
        let lo = g.matmul_bt(ho, items)?;
        let cols: Vec<usize> = (0..batch.kl_items.len()).collect();
        let kl = g.sym_kl(la, lo, &cols, 1.0 / nk as f64)?;
        parts[1] = g.value(kl).item();
        let root = if alpha > 0.0 { g.lin_comb(&[(bce, 1.0), (kl, alpha)])? } else { bce };
        Ok(Built { root: Some(root), parts })
    })?;
    Ok((
        FinetuneLoss {
            bce: lb,
            kl: lk,
            total: lb + alpha * lk,
        },
        grads,
    ))
}

pub fn finetune_step(model: &mut Model, adam: &mut Adam, batch: &DualBatch, config: &FinetuneConfig) -> Result<FinetuneLoss> {
    let step = adam.steps();
    let (loss, grads) = finetune_loss(model, batch, config.alpha, step, Some(config.seed))?;
    train::check_finite(step, loss.total)?;
    if !grads.is_finite() {
        return Err(Error::Divergence { step, loss: f64::NAN });
    }
    adam.step(&mut model.params, &grads);
    model.zero_padding_row();
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss_bce: f64,
    pub loss_kl: f64,
    pub loss_total: f64,
}

pub fn run_finetune(corpus: &AugmentedCorpus, model: &mut Model, config: &FinetuneConfig) -> Result<Vec<FinetuneEpoch>> {
    run_finetune_with(corpus, model, config, |_, _| Ok(()))
}

/// [`run_finetune`] with a hook called after every epoch.
pub fn run_finetune_with<F>(
    corpus: &AugmentedCorpus,
    model: &mut Model,
    config: &FinetuneConfig,
    mut on_epoch: F,
) -> Result<Vec<FinetuneEpoch>>
where
    F: FnMut(&FinetuneEpoch, &Model) -> Result<()>,
{
    config.validate()?;
    if config.rt {
        *model = Model::init(
            model.config().clone(),
            model.num_items(),
            rng::sub_seed(config.seed, &[rng::stream::FINETUNE]),
        )?;
    }
    let eligible: Vec<&AugmentedSequence> = corpus.sequences.iter().filter(|s| s.items.len() >= 2).collect();
    if eligible.is_empty() && config.epochs > 0 {
        return Err(Error::EmptyCorpus("no sequence has a next-item target".into()));
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
        let order = train::epoch_order(config.seed, epoch, eligible.len());
        let mut sums = [0.0; 3];
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<&AugmentedSequence> = chunk.iter().map(|&i| eligible[i]).collect();
            let batch = build_batch(model, &seqs, config, adam.steps())?;
            if batch.examples.iter().all(|e| e.aug.supervised() == 0) {
                continue;
            }
            let loss = finetune_step(model, &mut adam, &batch, config)?;
            sums[0] += loss.bce;
            sums[1] += loss.kl;
            sums[2] += loss.total;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        let record = FinetuneEpoch {
            epoch,
            loss_bce: sums[0] / s,
            loss_kl: sums[1] / s,
            loss_total: sums[2] / s,
        };
        on_epoch(&record, model)?;
        trace.push(record);
    }
    Ok(trace)
}

pub fn write_trace<W: Write>(mut w: W, trace: &[FinetuneEpoch]) -> std::io::Result<()> {
    writeln!(w, "epoch,loss_bce,loss_kl,loss_total")?;
    for t in trace {
        writeln!(w, "{},{},{},{}", t.epoch, t.loss_bce, t.loss_kl, t.loss_total)?;
    }
    Ok(())
}

pub fn save_trace(path: &Path, trace: &[FinetuneEpoch]) -> Result<()> {
    crate::io::write_atomic(path, |w| write_trace(w, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn toy_model(seed: u64) -> Model {
        let cfg = EncoderConfig {
            max_len: 8,
            dim: 8,
            heads: 2,
            layers: 1,
            dropout: 0.0,
            scale_full_dim: false,
        };
        Model::init(cfg, 6, seed).unwrap()
    }

    fn toy_corpus() -> AugmentedCorpus {
        let s = |user, generated, items: Vec<usize>| AugmentedSequence { user, generated, items };
        AugmentedCorpus {
            sequences: vec![
                s(0, 2, vec![5, 6, 1, 2, 3]),
                s(1, 0, vec![2, 4, 6, 1]),
                s(2, 3, vec![3, 4, 1, 6]),
                s(3, 1, vec![4, 2, 5, 1, 3, 5, 2, 1, 4, 5]),
            ],
        }
    }

    fn batch(model: &Model, clip_k: usize) -> DualBatch {
        let c = toy_corpus();
        let seqs: Vec<&AugmentedSequence> = c.sequences.iter().collect();
        let cfg = FinetuneConfig {
            clip_k,
            ..Default::default()
        };
        build_batch(model, &seqs, &cfg, 0).unwrap()
    }

    #[test]
    fn clip_cases() {
        let all = vec![true; 5];
        assert_eq!(informative_clip(&all, 0), all);
        assert_eq!(informative_clip(&[true], 8), vec![true]);
        assert_eq!(informative_clip(&[false, true, true, true], 2), vec![false, false, false, true]);
        assert_eq!(informative_clip(&[true, true], 8), vec![false, true]);
    }

    proptest! {
        #[test]
        fn clipping_is_monotone(mask in proptest::collection::vec(any::<bool>(), 0..30), k in 0usize..12) {
            let a = informative_clip(&mask, k);
            let b = informative_clip(&mask, k + 1);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!*y || *x);
            }
            if mask.iter().any(|&m| m) {
                prop_assert!(a.iter().any(|&m| m));
            }
        }

        #[test]
        fn kl_is_symmetric_and_nonnegative(
            a in proptest::collection::vec(-5.0f64..5.0, 1..8),
            shift in proptest::collection::vec(-5.0f64..5.0, 8),
        ) {
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            let (p, q) = (vec![softmax(&a)], vec![softmax(&b)]);
            let pq = bidirectional_kl(&p, &q).unwrap();
            let qp = bidirectional_kl(&q, &p).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert!((pq - qp).abs() < 1e-12);
            prop_assert_eq!(bidirectional_kl(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_hand_formula() {
        let p1 = vec![vec![1.0, 0.0]];
        let p2 = vec![vec![0.5, 0.5]];
        let got = bidirectional_kl(&p1, &p2).unwrap();
        let e = KL_EPS;
        let kl12 = 1.0 * (1.0f64 / 0.5).ln() + e * (e / 0.5).ln();
        let kl21 = 0.5 * (0.5f64 / 1.0).ln() + 0.5 * (0.5 / e).ln();
        assert!(got.is_finite() && got > 0.0);
        assert!((got - 0.5 * (kl12 + kl21)).abs() < 1e-9);
        assert!(matches!(bidirectional_kl(&p1, &[]), Err(Error::Alignment { .. })));
    }

    #[test]
    fn distribution_properties() {
        assert_eq!(softmax(&[0.3, 0.3]), vec![0.5, 0.5]);
        let s = [1.0, -2.0, 0.5, 3.0];
        let shifted: Vec<f64> = s.iter().map(|x| x + 100.0).collect();
        for (a, b) in softmax(&s).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-15);
        }
        let model = toy_model(3);
        let dist = prediction_distribution(&model, &[1, 2, 3]).unwrap();
        assert_eq!(dist.len(), 3);
        for row in &dist {
            assert_eq!(row.len(), 6);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn distribution_matches_reference_softmax() {
        // Reference: exp(s_j) / Σ exp(s_i) summed with pairwise compensation,
        // scores shifted so the exponentials cannot overflow.
        let mut rng = rng::Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..50).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let m = s.iter().copied().fold(f64::MIN, f64::max);
        let mut sum = 0.0;
        let mut comp = 0.0;
        for x in &s {
            let y = (x - m).exp() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        for (p, x) in softmax(&s).iter().zip(&s) {
            assert!((p - (x - m).exp() / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_views_align_from_the_end() {
        let c = toy_corpus();
        let ex = dual_example(&c.sequences[0], 8, 0);
        assert_eq!(ex.aug.targets, vec![6, 1, 2, 3]);
        assert_eq!(ex.org.targets, vec![2, 3]);
        assert_eq!(ex.aligned, 2);
        let tail = &ex.aug.targets[ex.aug.targets.len() - ex.aligned..];
        assert_eq!(tail, &ex.org.targets[..]);
        assert_eq!(dual_example(&c.sequences[1], 8, 0).aligned, 0);
        let clipped = dual_example(&c.sequences[3], 8, 3);
        assert_eq!(clipped.aug.supervised(), 5);
    }

    #[test]
    fn kl_is_zero_without_augmentation() {
        let model = toy_model(5);
        let corpus = AugmentedCorpus::identity(&[vec![1, 2, 3], vec![4, 5, 6, 2]]);
        let seqs: Vec<&AugmentedSequence> = corpus.sequences.iter().collect();
        let b = build_batch(&model, &seqs, &FinetuneConfig::default(), 0).unwrap();
        let (loss, _) = finetune_loss(&model, &b, 1.0, 0, None).unwrap();
        assert_eq!(loss.kl, 0.0);
    }

    #[test]
    fn graph_kl_matches_distribution_kl() {
        let model = toy_model(8);
        let c = toy_corpus();
        let s = &c.sequences[2];
        let b = DualBatch {
            examples: vec![dual_example(s, 8, 0)],
            kl_items: (1..=6).collect(),
        };
        let (loss, _) = finetune_loss(&model, &b, 1.0, 0, None).unwrap();
        let p_aug = prediction_distribution(&model, &s.items[..s.items.len() - 1]).unwrap();
        let p_org = prediction_distribution(&model, &s.original()[..s.original().len() - 1]).unwrap();
        let c = p_org.len();
        let want = bidirectional_kl(&p_aug[p_aug.len() - c..], &p_org).unwrap();
        assert!((loss.kl - want).abs() < 1e-10, "{} vs {want}", loss.kl);
    }

    #[test]
    fn loss_is_linear_in_alpha() {
        let model = toy_model(6);
        let b = batch(&model, 1);
        let (l0, _) = finetune_loss(&model, &b, 0.0, 0, None).unwrap();
        let (l1, _) = finetune_loss(&model, &b, 1.0, 0, None).unwrap();
        assert_eq!(l0.total, l0.bce);
        assert!((l1.total - l0.total - l1.kl).abs() < 1e-12);
        assert!(l1.kl > 0.0);
    }

    #[test]
    fn alpha_zero_gradient_is_pure_bce() {
        let model = toy_model(9);
        let b = batch(&model, 1);
        let (_, g0) = finetune_loss(&model, &b, 0.0, 0, None).unwrap();
        let no_kl = DualBatch {
            examples: b
                .examples
                .iter()
                .map(|e| DualExample {
                    aligned: 0,
                    ..e.clone()
                })
                .collect(),
            kl_items: b.kl_items.clone(),
        };
        let (_, g_bce) = finetune_loss(&model, &no_kl, 0.0, 0, None).unwrap();
        assert_eq!(g0.max_abs_diff(&g_bce), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for alpha in [0.0, 1.0] {
            let model = toy_model(10);
            let b = batch(&model, 1);
            let enc = model.encoder.clone();
            let report = grad_check(&model.params, 1e-5, |p| {
                let m = Model {
                    encoder: enc.clone(),
                    params: p.clone(),
                };
                let (loss, grads) = finetune_loss(&m, &b, alpha, 0, None)?;
                Ok((loss.total, grads))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "α={alpha}: {report:?}");
        }
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let mut model = toy_model(1);
        let before = model.params.clone();
        let cfg = FinetuneConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(run_finetune(&toy_corpus(), &mut model, &cfg).unwrap().is_empty());
        assert_eq!(model.params, before);

        let cfg = FinetuneConfig {
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        let run = || {
            let mut m = toy_model(1);
            (run_finetune(&toy_corpus(), &mut m, &cfg).unwrap(), m.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rt_starts_from_fresh_weights() {
        let cfg = FinetuneConfig {
            epochs: 0,
            rt: true,
            ..Default::default()
        };
        let mut model = toy_model(1);
        let before = model.params.clone();
        run_finetune(&toy_corpus(), &mut model, &cfg).unwrap();
        assert_ne!(model.params, before);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace(&mut buf, &[]).unwrap();
        assert_eq!(buf, b"epoch,loss_bce,loss_kl,loss_total\n");
    }
}
