//! Leave-one-out ranking evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, EvalNegatives, NegativeSampling, SplitSequence};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::rng;

/// Anything that can score candidate next items after an input sequence.
pub trait Scorer: Sync {
    fn score(&self, input: &[usize], candidates: &[usize]) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn score(&self, input: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        let h = self.last_hidden(input)?;
        Ok(self.relevance_of(&h, candidates))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult {
    pub user: usize,
    /// 1-based rank of the ground truth.
    pub rank: usize,
    pub candidates: usize,
    /// Candidates scored exactly like the ground truth.
    pub ties: usize,
}

/// `1 + #(strictly higher) + #(equal and listed earlier)`.
pub fn rank_of(scores: &[f64], truth_pos: usize) -> (usize, usize) {
    let t = scores[truth_pos];
    let mut rank = 1;
    let mut ties = 0;
    for (j, &s) in scores.iter().enumerate() {
        if j == truth_pos {
            continue;
        }
        if s > t {
            rank += 1;
        } else if s == t {
            ties += 1;
            if j < truth_pos {
                rank += 1;
            }
        }
    }
    (rank, ties)
}

pub fn rank_candidates<S: Scorer + ?Sized>(
    scorer: &S,
    user: usize,
    input: &[usize],
    candidates: &[usize],
    truth: usize,
) -> Result<RankedResult> {
    let mut at = candidates.iter().enumerate().filter(|(_, &c)| c == truth).map(|(i, _)| i);
    let (Some(pos), None) = (at.next(), at.next()) else {
        return Err(Error::Protocol(format!("ground truth {truth} must appear exactly once among candidates")));
    };
    let scores = scorer.score(input, candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Protocol("scorer returned the wrong number of scores".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN relevance score".into()));
    }
    let (rank, ties) = rank_of(&scores, pos);
    Ok(RankedResult {
        user,
        rank,
        candidates: candidates.len(),
        ties,
    })
}

fn mean_of(results: &[RankedResult], f: impl Fn(usize) -> f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Metric("no ranked results".into()));
    }
    Ok(results.iter().map(|r| f(r.rank)).sum::<f64>() / results.len() as f64)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Metric("cutoff k must be ≥ 1".into()));
    }
    Ok(())
}

pub fn recall_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    check_k(k)?;
    mean_of(results, |r| if r <= k { 1.0 } else { 0.0 })
}

pub fn ndcg_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    check_k(k)?;
    mean_of(results, |r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
}

pub fn mrr(results: &[RankedResult]) -> Result<f64> {
    mean_of(results, |r| 1.0 / r as f64)
}

/// Partition of users by original sequence length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bucket {
    Short,
    Medium,
    Long,
    VeryLong,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::Short, Bucket::Medium, Bucket::Long, Bucket::VeryLong];

    pub fn of(len: usize) -> Bucket {
        match len {
            0..=3 => Bucket::Short,
            4..=20 => Bucket::Medium,
            21..=50 => Bucket::Long,
            _ => Bucket::VeryLong,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Short => "L<=3",
            Bucket::Medium => "3<L<=20",
            Bucket::Long => "20<L<=50",
            Bucket::VeryLong => "L>50",
        }
    }
}

/// One user's evaluation instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    pub input: Vec<usize>,
    pub truth: usize,
    /// Items never offered as negatives.
    pub seen: Vec<usize>,
    /// Original (pre-augmentation) length, which picks the bucket.
    pub full_len: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Target {
    #[default]
    Test,
    Valid,
}

impl std::str::FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(Target::Test),
            "valid" => Ok(Target::Valid),
            _ => Err(Error::Config(format!("unknown evaluation target `{s}`"))),
        }
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Target::Test => "test",
            Target::Valid => "valid",
        })
    }
}

/// Builds evaluation cases from leave-one-out splits. The test target is
/// scored after `train ++ [valid]`, the validation target after `train`.
pub fn cases(splits: &[(usize, SplitSequence)], target: Target) -> Vec<EvalCase> {
    splits
        .iter()
        .map(|(user, s)| {
            let mut seen = s.test_input();
            seen.push(s.test);
            let (input, truth) = match target {
                Target::Test => (s.test_input(), s.test),
                Target::Valid => (s.valid_input().to_vec(), s.valid),
            };
            EvalCase {
                user: *user,
                input,
                truth,
                seen,
                full_len: s.full_len(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub negatives: EvalNegatives,
    pub sampling: NegativeSampling,
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            negatives: EvalNegatives::Sampled(100),
            sampling: NegativeSampling::Uniform,
            ks: vec![1, 5, 10],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub count: usize,
    pub values: BTreeMap<String, f64>,
}

impl MetricSet {
    fn compute(results: &[RankedResult], ks: &[usize]) -> Result<Self> {
        let mut values = BTreeMap::new();
        if !results.is_empty() {
            for &k in ks {
                values.insert(format!("recall@{k}"), recall_at_k(results, k)?);
                values.insert(format!("ndcg@{k}"), ndcg_at_k(results, k)?);
            }
            values.insert("mrr".to_string(), mrr(results)?);
        }
        Ok(MetricSet {
            count: results.len(),
            values,
        })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub target: String,
    pub users: usize,
    /// Users whose ground truth tied with at least one other candidate.
    pub tied_users: usize,
    pub overall: MetricSet,
    /// Keyed by bucket label, in bucket order.
    pub buckets: Vec<(String, MetricSet)>,
}

impl MetricsReport {
    pub fn bucket(&self, b: Bucket) -> &MetricSet {
        &self.buckets.iter().find(|(l, _)| l == b.label()).expect("all buckets present").1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    fn metric_names(&self) -> Vec<String> {
        self.overall.values.keys().cloned().collect()
    }

    /// `bucket,metric,value,count`, one row per (bucket, metric) including
    /// the `all` pseudo-bucket. Empty buckets report `NaN`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bucket,metric,value,count")?;
        let names = self.metric_names();
        let rows = std::iter::once(("all", &self.overall)).chain(self.buckets.iter().map(|(l, m)| (l.as_str(), m)));
        for (label, set) in rows {
            for name in &names {
                let v = set.get(name).unwrap_or(f64::NAN);
                writeln!(w, "{label},{name},{v},{}", set.count)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, json: &Path, csv: &Path) -> Result<()> {
        crate::io::write_bytes_atomic(json, self.to_json().as_bytes())?;
        crate::io::write_atomic(csv, |w| self.write_csv(w))
    }
}

/// Element-wise mean of several reports (e.g. one per seed). Buckets empty
/// in every report stay empty.
pub fn average_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::Metric("nothing to average".into()))?;
    let avg = |sets: Vec<&MetricSet>| {
        let mut values = BTreeMap::new();
        let filled: Vec<&&MetricSet> = sets.iter().filter(|s| !s.values.is_empty()).collect();
        if let Some(f) = filled.first() {
            for key in f.values.keys() {
                let sum: f64 = filled.iter().map(|s| s.values[key]).sum();
                values.insert(key.clone(), sum / filled.len() as f64);
            }
        }
        MetricSet {
            count: sets[0].count,
            values,
        }
    };
    Ok(MetricsReport {
        fingerprint: first.fingerprint.clone(),
        seeds: reports.iter().flat_map(|r| r.seeds.clone()).collect(),
        target: first.target.clone(),
        users: first.users,
        tied_users: reports.iter().map(|r| r.tied_users).sum::<usize>() / reports.len(),
        overall: avg(reports.iter().map(|r| &r.overall).collect()),
        buckets: first
            .buckets
            .iter()
            .enumerate()
            .map(|(i, (label, _))| (label.clone(), avg(reports.iter().map(|r| &r.buckets[i].1).collect())))
            .collect(),
    })
}

/// Ranks every case against its sampled candidates and aggregates overall
/// and per length bucket. Each user's candidates come from a stream keyed by
/// `(seed, user)`, so the result does not depend on thread scheduling.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    cases: &[EvalCase],
    num_items: usize,
    popularity: Option<&[f64]>,
    config: &EvalConfig,
    fingerprint: &str,
    target: Target,
) -> Result<MetricsReport> {
    let results: Vec<(RankedResult, usize)> = cases
        .par_iter()
        .map(|c| {
            let mut rng = rng::rng_for(config.seed, &[rng::stream::EVAL, c.user as u64]);
            let candidates = corpus::sample_eval_candidates(
                c.truth,
                &c.seen,
                num_items,
                config.negatives,
                config.sampling,
                popularity,
                &mut rng,
            )?;
            let r = rank_candidates(scorer, c.user, &c.input, &candidates, c.truth)?;
            Ok((r, c.full_len))
        })
        .collect::<Result<_>>()?;
    let all: Vec<RankedResult> = results.iter().map(|r| r.0).collect();
    let buckets = Bucket::ALL
        .iter()
        .map(|&b| {
            let sub: Vec<RankedResult> = results.iter().filter(|r| Bucket::of(r.1) == b).map(|r| r.0).collect();
            Ok((b.label().to_string(), MetricSet::compute(&sub, &config.ks)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        fingerprint: fingerprint.to_string(),
        seeds: vec![config.seed],
        target: target.to_string(),
        users: all.len(),
        tied_users: all.iter().filter(|r| r.ties > 0).count(),
        overall: MetricSet::compute(&all, &config.ks)?,
        buckets,
    })
}

/// Item counts over the training data, indexed by item (index 0 unused).
pub fn popularity(sequences: &[Vec<usize>], num_items: usize) -> Vec<f64> {
    let mut p = vec![0.0; num_items + 1];
    for &i in sequences.iter().flatten() {
        if i <= num_items {
            p[i] += 1.0;
        }
    }
    p
}

/// Writes `sample_size` item embeddings chosen without replacement, as
/// `item<TAB>x1<TAB>…<TAB>xd` rows in item order.
pub fn export_embeddings<W: Write>(model: &Model, sample_size: usize, seed: u64, mut w: W) -> Result<()> {
    let v = model.num_items();
    if sample_size > v {
        return Err(Error::Sampling(format!("cannot sample {sample_size} of {v} items")));
    }
    let mut rng = rng::rng_for(seed, &[rng::stream::EXPORT]);
    let mut items: Vec<usize> = sample(&mut rng, v, sample_size).into_iter().map(|i| i + 1).collect();
    items.sort_unstable();
    let io = |e| Error::io("<embeddings>", e);
    for i in items {
        write!(w, "{i}").map_err(io)?;
        for x in model.item_embedding(i) {
            write!(w, "\t{x}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    Ok(())
}
