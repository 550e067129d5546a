//! Pseudo-prior generation for short sequences, and the random-perturbation
//! baselines it is compared against.

use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;

use crate::corpus::{self, PAD};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::pretrain::reverse_sequence;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Strategy {
    #[default]
    Bicat,
    ReverseOnly,
    Mask,
    Crop,
    Replace,
    Add,
    None,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Bicat,
        Strategy::ReverseOnly,
        Strategy::Mask,
        Strategy::Crop,
        Strategy::Replace,
        Strategy::Add,
        Strategy::None,
    ];

    pub fn is_generative(self) -> bool {
        matches!(self, Strategy::Bicat | Strategy::ReverseOnly)
    }

    pub fn perturbation(self) -> Option<Perturbation> {
        match self {
            Strategy::Mask => Some(Perturbation::Mask),
            Strategy::Crop => Some(Perturbation::Crop),
            Strategy::Replace => Some(Perturbation::Replace),
            Strategy::Add => Some(Perturbation::Add),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Bicat => "bicat",
            Strategy::ReverseOnly => "reverse_only",
            Strategy::Mask => "mask",
            Strategy::Crop => "crop",
            Strategy::Replace => "replace",
            Strategy::Add => "add",
            Strategy::None => "none",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the next generated item is picked from the relevance scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Decoding {
    #[default]
    Greedy,
    /// Uniform choice among the `k` best items.
    TopK(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Maximum number of pseudo-prior items per sequence.
    pub k: usize,
    /// Sequences shorter than this are augmented.
    pub m: usize,
    pub strategy: Strategy,
    pub decoding: Decoding,
    /// Perturbation ratio for the random baselines.
    pub ratio: f64,
    /// Also prepend pseudo-prior items to evaluation inputs.
    pub augment_eval: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            k: 15,
            m: 18,
            strategy: Strategy::Bicat,
            decoding: Decoding::Greedy,
            ratio: 0.2,
            augment_eval: false,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("perturbation ratio {} outside (0, 1)", self.ratio)));
        }
        if self.decoding == Decoding::TopK(0) {
            return Err(Error::Config("top-k decoding needs k ≥ 1".into()));
        }
        Ok(())
    }
}

fn best_index(scores: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::Generation(format!("non-finite score for item {}", k + 1)));
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best.map(|(k, _)| k + 1)
        .ok_or_else(|| Error::Generation("empty vocabulary".into()))
}

/// Highest-relevance item (lowest index on ties) after `items`, scored in
/// evaluation mode. Padding is never a candidate.
pub fn greedy_next(model: &Model, items: &[usize]) -> Result<usize> {
    let h = model.last_hidden(items)?;
    best_index(&model.relevance(&h))
}

fn decode(model: &Model, items: &[usize], decoding: Decoding, rng: &mut Rng) -> Result<usize> {
    match decoding {
        Decoding::Greedy => greedy_next(model, items),
        Decoding::TopK(k) => {
            let h = model.last_hidden(items)?;
            let scores = model.relevance(&h);
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::Generation("non-finite relevance score".into()));
            }
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let pick = order[rng.gen_range(0..k.min(order.len()))];
            Ok(pick + 1)
        }
    }
}

/// Pseudo-prior items for `seq`, oldest first. Nothing is generated when
/// `|seq| ≥ M`; otherwise up to `K` items are produced, stopping as soon as
/// the working sequence reaches length `M`. Each generated item becomes
/// context for the next.
pub fn recursive_generate(model: &Model, seq: &[usize], k: usize, m: usize) -> Result<Vec<usize>> {
    let mut rng = rng::rng_for(0, &[]);
    generate_with(model, seq, k, m, Decoding::Greedy, &mut rng)
}

pub fn generate_with(
    model: &Model,
    seq: &[usize],
    k: usize,
    m: usize,
    decoding: Decoding,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if seq.is_empty() {
        return Err(Error::Generation("cannot extend an empty sequence".into()));
    }
    let mut work = reverse_sequence(seq);
    let start = work.len();
    for _ in 0..k {
        if work.len() >= m {
            break;
        }
        let next = decode(model, &work, decoding, rng)?;
        if next == PAD {
            return Err(Error::Generation("padding selected as a pseudo-prior item".into()));
        }
        work.push(next);
    }
    Ok(work[start..].iter().rev().copied().collect())
}

/// One user's sequence after augmentation: the first `generated` items are
/// pseudo-prior, the rest is the original sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedSequence {
    pub user: usize,
    pub generated: usize,
    pub items: Vec<usize>,
}

impl AugmentedSequence {
    pub fn original(&self) -> &[usize] {
        &self.items[self.generated..]
    }

    pub fn prior(&self) -> &[usize] {
        &self.items[..self.generated]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AugmentedCorpus {
    pub sequences: Vec<AugmentedSequence>,
}

impl AugmentedCorpus {
    /// Every sequence unchanged.
    pub fn identity(sequences: &[Vec<usize>]) -> Self {
        AugmentedCorpus {
            sequences: sequences
                .iter()
                .enumerate()
                .map(|(user, s)| AugmentedSequence {
                    user,
                    generated: 0,
                    items: s.clone(),
                })
                .collect(),
        }
    }

    pub fn total_generated(&self) -> usize {
        self.sequences.iter().map(|s| s.generated).sum()
    }

    /// `user<TAB>g_u<TAB>item item …`, one line per user.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.sequences {
            write!(w, "{}\t{}\t", s.user, s.generated)?;
            corpus::write_items(&mut w, &s.items)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut out = AugmentedCorpus::default();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(format!("augmented corpus line {}: {e}", i + 1)))?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("augmented corpus line {}: expected user, count, items", i + 1));
            let mut f = line.splitn(3, '\t');
            let user = f.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let generated = f.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let items = corpus::parse_items(f.next().unwrap_or("")).ok_or_else(bad)?;
            if generated > items.len() {
                return Err(bad());
            }
            out.sequences.push(AugmentedSequence { user, generated, items });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(crate::io::open_required(path)?)
    }
}

/// Applies the configured strategy to every training sequence.
///
/// Generative strategies prepend pseudo-prior items to sequences shorter
/// than `M`; the random baselines replace each sequence by a perturbed copy;
/// `none` passes the corpus through. `model` is only read by generative
/// strategies.
pub fn augment_corpus(sequences: &[Vec<usize>], model: Option<&Model>, config: &AugmentConfig) -> Result<AugmentedCorpus> {
    config.validate()?;
    if config.strategy.is_generative() {
        let model = model.ok_or_else(|| Error::Generation("generative augmentation needs a model".into()))?;
        let seqs = sequences
            .par_iter()
            .enumerate()
            .map(|(user, s)| {
                let mut rng = rng::rng_for(config.seed, &[rng::stream::AUGMENT, user as u64]);
                let prior = if s.is_empty() {
                    Vec::new()
                } else {
                    generate_with(model, s, config.k, config.m, config.decoding, &mut rng)?
                };
                let mut items = prior.clone();
                items.extend_from_slice(s);
                Ok(AugmentedSequence {
                    user,
                    generated: prior.len(),
                    items,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(AugmentedCorpus { sequences: seqs });
    }
    let Some(kind) = config.strategy.perturbation() else {
        return Ok(AugmentedCorpus::identity(sequences));
    };
    let num_items = model.map(Model::num_items).or_else(|| sequences.iter().flatten().max().copied()).unwrap_or(0);
    let seqs = sequences
        .iter()
        .enumerate()
        .map(|(user, s)| {
            let mut rng = rng::rng_for(config.seed, &[rng::stream::AUGMENT, user as u64]);
            let out = baseline_augment(s, kind, &mut rng, config.ratio, num_items)?;
            Ok(AugmentedSequence {
                user,
                generated: 0,
                items: out.items,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentedCorpus { sequences: seqs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    Mask,
    Crop,
    Replace,
    Add,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Perturbed {
    pub items: Vec<usize>,
    /// Set when the input was too short to perturb and came back unchanged.
    pub skipped: bool,
}

/// Random perturbation of `seq` over the item range `1..=num_items`.
///
/// `⌊ratio·|seq|⌋` positions are affected by mask, replace and add; crop
/// keeps a random contiguous window of `⌈(1 − ratio)·|seq|⌉` items.
pub fn baseline_augment(seq: &[usize], kind: Perturbation, rng: &mut Rng, ratio: f64, num_items: usize) -> Result<Perturbed> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("perturbation ratio {ratio} outside (0, 1)")));
    }
    if seq.len() < 2 {
        return Ok(Perturbed {
            items: seq.to_vec(),
            skipped: true,
        });
    }
    let len = seq.len();
    let count = (ratio * len as f64).floor() as usize;
    let mut items = seq.to_vec();
    match kind {
        Perturbation::Mask => {
            for p in sample(rng, len, count) {
                items[p] = PAD;
            }
        }
        Perturbation::Crop => {
            let keep = ((1.0 - ratio) * len as f64).ceil() as usize;
            let start = rng.gen_range(0..=len - keep);
            items = items[start..start + keep].to_vec();
        }
        Perturbation::Replace => {
            if num_items < 2 {
                return Err(Error::Sampling("replace needs at least two items".into()));
            }
            for p in sample(rng, len, count) {
                let old = items[p];
                items[p] = loop {
                    let c = rng.gen_range(1..=num_items);
                    if c != old {
                        break c;
                    }
                };
            }
        }
        Perturbation::Add => {
            if num_items == 0 {
                return Err(Error::Sampling("add needs a non-empty vocabulary".into()));
            }
            for _ in 0..count {
                let at = rng.gen_range(0..=items.len());
                items.insert(at, rng.gen_range(1..=num_items));
            }
        }
    }
    Ok(Perturbed { items, skipped: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;

    fn model(items: usize) -> Model {
        let cfg = EncoderConfig {
            max_len: 10,
            dim: 8,
            heads: 2,
            layers: 1,
            dropout: 0.0,
            scale_full_dim: false,
        };
        Model::init(cfg, items, 9).unwrap()
    }

    #[test]
    fn guard_and_counts() {
        let m = model(5);
        assert!(recursive_generate(&m, &[1, 2, 3], 4, 3).unwrap().is_empty());
        let g = recursive_generate(&m, &[2], 2, 10).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|&i| (1..=5).contains(&i)));
        assert_eq!(recursive_generate(&m, &[2], 9, 4).unwrap().len(), 3);
        assert!(recursive_generate(&m, &[], 2, 10).is_err());
    }

    #[test]
    fn generation_is_oldest_first() {
        // The first generated item is the nearest predecessor, so it must be
        // the last element of G, i.e. directly before the original sequence.
        let m = model(6);
        let seq = [3, 1];
        let g = recursive_generate(&m, &seq, 3, 10).unwrap();
        let first = greedy_next(&m, &reverse_sequence(&seq)).unwrap();
        assert_eq!(*g.last().unwrap(), first);
        let mut ctx = reverse_sequence(&seq);
        ctx.push(first);
        assert_eq!(g[1], greedy_next(&m, &ctx).unwrap());
    }

    #[test]
    fn corpus_level_counts() {
        let m = model(6);
        let seqs = vec![vec![1], vec![2, 3], vec![1, 2, 3, 4, 5, 6], vec![4, 4, 4]];
        let cfg = AugmentConfig {
            k: 3,
            m: 4,
            ..Default::default()
        };
        let aug = augment_corpus(&seqs, Some(&m), &cfg).unwrap();
        let want: usize = seqs.iter().map(|s| cfg.k.min(cfg.m.saturating_sub(s.len()))).sum();
        assert_eq!(aug.total_generated(), want);
        for (a, s) in aug.sequences.iter().zip(&seqs) {
            assert_eq!(a.original(), &s[..]);
        }
        let again = augment_corpus(&aug.sequences.iter().map(|a| a.items.clone()).collect::<Vec<_>>(), Some(&m), &cfg)
            .unwrap();
        assert_eq!(again.total_generated(), 0);
        assert_eq!(aug, augment_corpus(&seqs, Some(&m), &cfg).unwrap());
    }

    #[test]
    fn long_corpus_is_untouched() {
        let m = model(6);
        let seqs = vec![vec![1, 2, 3], vec![4, 5, 6, 1]];
        let cfg = AugmentConfig {
            k: 5,
            m: 3,
            ..Default::default()
        };
        let aug = augment_corpus(&seqs, Some(&m), &cfg).unwrap();
        assert_eq!(aug, AugmentedCorpus::identity(&seqs));
    }

    #[test]
    fn augmented_file_round_trip() {
        let aug = AugmentedCorpus {
            sequences: vec![
                AugmentedSequence {
                    user: 0,
                    generated: 2,
                    items: vec![5, 6, 1],
                },
                AugmentedSequence {
                    user: 1,
                    generated: 0,
                    items: vec![2, 3],
                },
            ],
        };
        let mut buf = Vec::new();
        aug.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "0\t2\t5 6 1\n1\t0\t2 3\n");
        assert_eq!(AugmentedCorpus::read(&buf[..]).unwrap(), aug);
        assert!(AugmentedCorpus::read(&b"0\t4\t1 2\n"[..]).is_err());
    }

    #[test]
    fn top_k_one_equals_greedy() {
        let m = model(6);
        let mut rng = Rng::seed_from_u64(1);
        let a = generate_with(&m, &[2, 5], 4, 9, Decoding::TopK(1), &mut rng).unwrap();
        assert_eq!(a, recursive_generate(&m, &[2, 5], 4, 9).unwrap());
    }

    #[test]
    fn baselines() {
        let mut rng = Rng::seed_from_u64(4);
        let seq = [1, 2, 3, 4];
        for kind in [Perturbation::Mask, Perturbation::Crop, Perturbation::Replace, Perturbation::Add] {
            let out = baseline_augment(&seq, kind, &mut rng, 1e-9, 10).unwrap();
            if kind == Perturbation::Crop {
                assert_eq!(out.items, seq);
            } else {
                assert_eq!(out.items, seq, "{kind:?}");
            }
            let short = baseline_augment(&[7], kind, &mut rng, 0.5, 10).unwrap();
            assert!(short.skipped);
        }
        let masked = baseline_augment(&seq, Perturbation::Mask, &mut rng, 0.5, 10).unwrap();
        assert_eq!(masked.items.iter().filter(|&&i| i == PAD).count(), 2);

        let replaced = baseline_augment(&seq, Perturbation::Replace, &mut rng, 0.5, 10).unwrap();
        assert_eq!(replaced.items.iter().zip(&seq).filter(|(a, b)| a != b).count(), 2);

        let added = baseline_augment(&seq, Perturbation::Add, &mut rng, 0.5, 10).unwrap();
        assert_eq!(added.items.len(), 6);
    }

    #[test]
    fn crop_yields_a_window() {
        let seq = [1, 2, 3, 4];
        for ratio in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let keep = ((1.0 - ratio) * 4.0_f64).ceil() as usize;
            let windows: Vec<Vec<usize>> = (0..=4 - keep).map(|s| seq[s..s + keep].to_vec()).collect();
            let mut rng = Rng::seed_from_u64(17);
            for _ in 0..50 {
                let out = baseline_augment(&seq, Perturbation::Crop, &mut rng, ratio, 4).unwrap();
                assert!(windows.contains(&out.items), "{ratio}: {:?}", out.items);
            }
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("shuffle".parse::<Strategy>().is_err());
    }
}
