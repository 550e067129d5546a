//! Stage orchestration. Each `cmd_*` reads the previous stage's files from
//! the output directory, writes its own artifacts atomically, and records a
//! manifest of input and output digests.
//!
//! The in-memory stage functions are what the commands call after loading
//! their inputs, so a whole experiment can also run without touching disk
//! ([`run_in_memory`]).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentedCorpus, Strategy};
use crate::config::ExperimentConfig;
use crate::corpus::{self, Corpus, NegativeSampling, SplitSequence};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::eval::{self, EvalCase, MetricsReport};
use crate::finetune::{self, FinetuneConfig, FinetuneEpoch};
use crate::io::{file_digest, write_atomic, write_bytes_atomic};
use crate::pretrain::{self, PretrainConfig, PretrainEpoch};
use crate::rng::{stream, sub_seed};
use crate::synth::MarkovChain;

pub const CORPUS_DIR: &str = "corpus";
pub const HISTOGRAM_FILE: &str = "length_histogram.csv";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PRETRAIN_TRACE: &str = "pretrain_loss.csv";
pub const AUGMENTED_FILE: &str = "augmented.tsv";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const FINETUNE_TRACE: &str = "finetune_loss.csv";
pub const METRICS_DIR: &str = "metrics";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

/// What a stage consumed and produced, keyed by path relative to the output
/// directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn file_name(stage: &str) -> String {
        format!("{stage}.manifest.json")
    }

    pub fn load(out: &Path, stage: &str) -> Result<Self> {
        let path = out.join(Self::file_name(stage));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn digests(out: &Path, names: &[String]) -> Result<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| Ok((n.clone(), file_digest(&out.join(n))?)))
        .collect()
}

fn write_manifest(out: &Path, stage: &str, cfg: &ExperimentConfig, inputs: &[String], outputs: &[String]) -> Result<Manifest> {
    let m = Manifest {
        stage: stage.to_string(),
        config_hash: cfg.fingerprint(),
        seed: cfg.seed,
        strategy: cfg.augment.strategy.to_string(),
        inputs: digests(out, inputs)?,
        outputs: digests(out, outputs)?,
    };
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write_bytes_atomic(&out.join(Manifest::file_name(stage)), json.as_bytes())?;
    Ok(m)
}

/// Fails with a stage-order error unless `name` exists under `out`.
fn require(out: &Path, name: &str) -> Result<PathBuf> {
    let p = out.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::StageOrder(p))
    }
}

fn corpus_files() -> Vec<String> {
    [corpus::SEQUENCES_FILE, corpus::VOCAB_FILE, corpus::USERS_FILE]
        .iter()
        .map(|f| format!("{CORPUS_DIR}/{f}"))
        .collect()
}

// ---------------------------------------------------------------------------
// In-memory stages

/// Reads the raw log named by the config, or draws the synthetic corpus.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<(Corpus, usize)> {
    let d = &cfg.data;
    let (corpus, malformed) = if d.synthetic_users > 0 {
        let chain = MarkovChain::random(d.synthetic_states, d.synthetic_seed)?;
        let seqs = chain.sample_corpus(d.synthetic_users, d.synthetic_min_len, d.synthetic_max_len, d.synthetic_seed);
        let seqs = seqs.into_iter().filter(|s| s.len() >= d.min_len).collect();
        (Corpus::from_index_sequences(d.synthetic_states, seqs)?, 0)
    } else {
        let raw = d
            .raw
            .as_ref()
            .ok_or_else(|| Error::Config("data.raw is not set".into()))?;
        let file = File::open(raw).map_err(|e| Error::io(raw, e))?;
        let parsed = corpus::parse_interactions(file, &d.csv)?;
        (corpus::build_sequences(&parsed.interactions, d.min_len), parsed.malformed)
    };
    if corpus.sequences.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no user has at least {} interactions",
            d.min_len
        )));
    }
    Ok((corpus, malformed))
}

/// Training sequences (indexed like `corpus.sequences`) and the
/// leave-one-out splits of every user long enough to evaluate. Shorter
/// users train on their whole sequence.
pub fn split_corpus(corpus: &Corpus) -> (Vec<Vec<usize>>, Vec<(usize, SplitSequence)>) {
    let mut train = Vec::with_capacity(corpus.sequences.len());
    let mut splits = Vec::new();
    for (i, s) in corpus.sequences.iter().enumerate() {
        match corpus::leave_one_out(&s.items) {
            Ok(split) => {
                train.push(split.train.clone());
                splits.push((i, split));
            }
            Err(_) => train.push(s.items.clone()),
        }
    }
    (train, splits)
}

/// Pre-training settings after applying the strategy: `reverse_only` drops
/// the forward term, and baselines skip pre-training entirely (their epochs
/// move to fine-tuning).
pub fn effective_pretrain(cfg: &ExperimentConfig) -> PretrainConfig {
    let mut p = cfg.pretrain.clone();
    match cfg.augment.strategy {
        Strategy::Bicat => {}
        Strategy::ReverseOnly => p.lambda = 0.0,
        _ => p.epochs = 0,
    }
    p
}

/// Fine-tuning settings after applying the strategy. Only `bicat` keeps the
/// distillation term; baselines train a plain model from scratch for the
/// combined epoch budget.
pub fn effective_finetune(cfg: &ExperimentConfig) -> FinetuneConfig {
    let mut f = cfg.finetune.clone();
    match cfg.augment.strategy {
        Strategy::Bicat => {}
        Strategy::ReverseOnly => f.alpha = 0.0,
        _ => {
            f.alpha = 0.0;
            f.clip_k = 0;
            f.epochs += cfg.pretrain.epochs;
        }
    }
    f
}

fn check_compatible(model: &Model, num_items: usize, cfg: &ExperimentConfig) -> Result<()> {
    if model.num_items() != num_items {
        return Err(Error::Compatibility(format!(
            "checkpoint has {} items, corpus has {num_items}",
            model.num_items()
        )));
    }
    let (m, c) = (model.config(), &cfg.encoder);
    if m.dim != c.dim || m.max_len != c.max_len || m.heads != c.heads || m.layers != c.layers {
        return Err(Error::Compatibility(format!(
            "checkpoint encoder (n={}, d={}, h={}, L={}) differs from config (n={}, d={}, h={}, L={})",
            m.max_len, m.dim, m.heads, m.layers, c.max_len, c.dim, c.heads, c.layers
        )));
    }
    Ok(())
}

pub fn pretrain_stage(
    train: &[Vec<usize>],
    num_items: usize,
    cfg: &ExperimentConfig,
    mut on_epoch: impl FnMut(&PretrainEpoch, &Model) -> Result<()>,
) -> Result<(Model, Vec<PretrainEpoch>)> {
    let mut model = Model::init(cfg.encoder.clone(), num_items, cfg.init_seed())?;
    let trace = pretrain::run_pretrain_with(train, &mut model, &effective_pretrain(cfg), &mut on_epoch)?;
    Ok((model, trace))
}

pub fn augment_stage(train: &[Vec<usize>], model: &Model, cfg: &ExperimentConfig) -> Result<AugmentedCorpus> {
    let mut a = cfg.augment.clone();
    a.augment_eval = false;
    augment::augment_corpus(train, Some(model), &a)
}

pub fn finetune_stage(aug: &AugmentedCorpus, pretrained: &Model, cfg: &ExperimentConfig) -> Result<(Model, Vec<FinetuneEpoch>)> {
    check_compatible(pretrained, pretrained.num_items(), cfg)?;
    let mut model = pretrained.clone();
    let trace = finetune::run_finetune(aug, &mut model, &effective_finetune(cfg))?;
    Ok((model, trace))
}

/// Evaluation cases for the configured target. With `augment.augment_eval`
/// and a generative strategy, short inputs get pseudo-prior items from the
/// pre-trained model; buckets still follow the original length.
pub fn evaluation_cases(
    splits: &[(usize, SplitSequence)],
    pretrained: Option<&Model>,
    cfg: &ExperimentConfig,
) -> Result<Vec<EvalCase>> {
    let mut cases = eval::cases(splits, cfg.eval.target);
    if cfg.augment.augment_eval && cfg.augment.strategy.is_generative() {
        let model = pretrained.ok_or_else(|| Error::Generation("augmenting inputs needs the pre-trained model".into()))?;
        for c in &mut cases {
            let mut prior = augment::recursive_generate(model, &c.input, cfg.augment.k, cfg.augment.m)?;
            prior.extend_from_slice(&c.input);
            c.input = prior;
        }
    }
    Ok(cases)
}

/// One report per evaluation seed plus their mean.
pub fn evaluate_stage(
    model: &Model,
    cases: &[EvalCase],
    train: &[Vec<usize>],
    cfg: &ExperimentConfig,
) -> Result<(Vec<MetricsReport>, MetricsReport)> {
    let n = model.num_items();
    let pop = (cfg.eval.sampling == NegativeSampling::Popularity).then(|| eval::popularity(train, n));
    let fp = cfg.fingerprint();
    let reports = cfg
        .eval
        .seeds
        .iter()
        .map(|&s| eval::evaluate(model, cases, n, pop.as_deref(), &cfg.eval_config(s), &fp, cfg.eval.target))
        .collect::<Result<Vec<_>>>()?;
    let mean = eval::average_reports(&reports)?;
    Ok((reports, mean))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub pretrain_trace: Vec<PretrainEpoch>,
    pub finetune_trace: Vec<FinetuneEpoch>,
    pub generated: usize,
    pub reports: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

/// All stages back to back without writing files.
pub fn run_in_memory(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, splits) = split_corpus(corpus);
    let n = corpus.vocab.len();
    let (pre, pretrain_trace) = pretrain_stage(&train, n, cfg, |_, _| Ok(()))?;
    let aug = augment_stage(&train, &pre, cfg)?;
    let (model, finetune_trace) = finetune_stage(&aug, &pre, cfg)?;
    let cases = evaluation_cases(&splits, Some(&pre), cfg)?;
    let (reports, mean) = evaluate_stage(&model, &cases, &train, cfg)?;
    Ok(RunOutcome {
        pretrain_trace,
        finetune_trace,
        generated: aug.total_generated(),
        reports,
        mean,
    })
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepareSummary {
    pub users: usize,
    pub items: usize,
    pub malformed: usize,
    pub histogram: BTreeMap<usize, usize>,
}

impl std::fmt::Display for PrepareSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "users: {}", self.users)?;
        writeln!(f, "items: {}", self.items)?;
        if self.malformed > 0 {
            writeln!(f, "malformed records skipped: {}", self.malformed)?;
        }
        writeln!(f, "length  users")?;
        for (len, n) in &self.histogram {
            writeln!(f, "{len:>6}  {n}")?;
        }
        Ok(())
    }
}

pub fn write_histogram<W: Write>(mut w: W, histogram: &BTreeMap<usize, usize>) -> std::io::Result<()> {
    writeln!(w, "length,users")?;
    for (len, n) in histogram {
        writeln!(w, "{len},{n}")?;
    }
    Ok(())
}

fn load_prepared(out: &Path) -> Result<Corpus> {
    for f in corpus_files() {
        require(out, &f)?;
    }
    Corpus::load(&out.join(CORPUS_DIR))
}

pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepareSummary> {
    let out = &cfg.out_dir;
    let (corpus, malformed) = load_corpus(cfg)?;
    corpus.save(&out.join(CORPUS_DIR))?;
    let histogram = corpus.length_histogram();
    write_atomic(&out.join(HISTOGRAM_FILE), |w| write_histogram(w, &histogram))?;
    let mut outputs = corpus_files();
    outputs.push(HISTOGRAM_FILE.to_string());
    write_manifest(out, "prepare", cfg, &[], &outputs)?;
    Ok(PrepareSummary {
        users: corpus.sequences.len(),
        items: corpus.vocab.len(),
        malformed,
        histogram,
    })
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PretrainEpoch>> {
    let out = &cfg.out_dir;
    let corpus = load_prepared(out)?;
    let (train, _) = split_corpus(&corpus);
    let mut saved = Vec::new();
    let every = cfg.checkpoint_every;
    let (model, trace) = pretrain_stage(&train, corpus.vocab.len(), cfg, |rec, m| {
        if every > 0 && (rec.epoch + 1) % every == 0 {
            let name = format!("pretrain_epoch{}.ckpt", rec.epoch + 1);
            m.save(&out.join(&name))?;
            saved.push(name);
        }
        Ok(())
    })?;
    model.save(&out.join(PRETRAIN_CKPT))?;
    pretrain::save_trace(&out.join(PRETRAIN_TRACE), &trace)?;
    let mut outputs = vec![PRETRAIN_CKPT.to_string(), PRETRAIN_TRACE.to_string()];
    outputs.extend(saved);
    write_manifest(out, "pretrain", cfg, &corpus_files(), &outputs)?;
    Ok(trace)
}

pub fn cmd_augment(cfg: &ExperimentConfig) -> Result<AugmentedCorpus> {
    let out = &cfg.out_dir;
    let corpus = load_prepared(out)?;
    let (train, _) = split_corpus(&corpus);
    let mut inputs = corpus_files();
    let aug = if cfg.augment.strategy.is_generative() {
        let model = Model::load(&require(out, PRETRAIN_CKPT)?)?;
        check_compatible(&model, corpus.vocab.len(), cfg)?;
        inputs.push(PRETRAIN_CKPT.to_string());
        augment_stage(&train, &model, cfg)?
    } else {
        let mut a = cfg.augment.clone();
        a.augment_eval = false;
        augment::augment_corpus(&train, None, &a)?
    };
    aug.save(&out.join(AUGMENTED_FILE))?;
    write_manifest(out, "augment", cfg, &inputs, &[AUGMENTED_FILE.to_string()])?;
    Ok(aug)
}

pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<Vec<FinetuneEpoch>> {
    let out = &cfg.out_dir;
    let aug = AugmentedCorpus::load(&require(out, AUGMENTED_FILE)?)?;
    let corpus = load_prepared(out)?;
    let pre = Model::load(&require(out, PRETRAIN_CKPT)?)?;
    check_compatible(&pre, corpus.vocab.len(), cfg)?;
    let (model, trace) = finetune_stage(&aug, &pre, cfg)?;
    model.save(&out.join(MODEL_CKPT))?;
    finetune::save_trace(&out.join(FINETUNE_TRACE), &trace)?;
    write_manifest(
        out,
        "finetune",
        cfg,
        &[AUGMENTED_FILE.to_string(), PRETRAIN_CKPT.to_string()],
        &[MODEL_CKPT.to_string(), FINETUNE_TRACE.to_string()],
    )?;
    Ok(trace)
}

/// Evaluates `checkpoint` (default: the fine-tuned model in the output
/// directory) and writes `metrics/seed_<s>.{json,csv}` plus
/// `metrics/mean.{json,csv}`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let out = &cfg.out_dir;
    let corpus = load_prepared(out)?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => require(out, MODEL_CKPT)?,
    };
    let model = Model::load(&ckpt)?;
    check_compatible(&model, corpus.vocab.len(), cfg)?;
    let (train, splits) = split_corpus(&corpus);
    let mut inputs = corpus_files();
    let pre = if cfg.augment.augment_eval && cfg.augment.strategy.is_generative() {
        inputs.push(PRETRAIN_CKPT.to_string());
        Some(Model::load(&require(out, PRETRAIN_CKPT)?)?)
    } else {
        None
    };
    let cases = evaluation_cases(&splits, pre.as_ref(), cfg)?;
    let (reports, mean) = evaluate_stage(&model, &cases, &train, cfg)?;
    let dir = out.join(METRICS_DIR);
    let mut outputs = Vec::new();
    for (seed, r) in cfg.eval.seeds.iter().zip(&reports) {
        let stem = format!("{METRICS_DIR}/seed_{seed}");
        r.save(&out.join(format!("{stem}.json")), &out.join(format!("{stem}.csv")))?;
        outputs.push(format!("{stem}.json"));
        outputs.push(format!("{stem}.csv"));
    }
    mean.save(&dir.join("mean.json"), &dir.join("mean.csv"))?;
    outputs.push(format!("{METRICS_DIR}/mean.json"));
    outputs.push(format!("{METRICS_DIR}/mean.csv"));
    if cfg.eval.export_sample > 0 {
        let seed = sub_seed(cfg.seed, &[stream::EXPORT]);
        write_atomic(&out.join(EMBEDDINGS_FILE), |w| {
            eval::export_embeddings(&model, cfg.eval.export_sample, seed, w)
                .map_err(|e| std::io::Error::other(e.to_string()))
        })?;
        outputs.push(EMBEDDINGS_FILE.to_string());
    }
    if checkpoint.is_none() {
        inputs.push(MODEL_CKPT.to_string());
    }
    write_manifest(out, "evaluate", cfg, &inputs, &outputs)?;
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::parse(
            "data.synthetic.users = 60\n\
             data.synthetic.states = 8\n\
             data.synthetic.max_len = 10\n\
             data.min_len = 1\n\
             encoder.n = 10\nencoder.d = 8\nencoder.h = 2\nencoder.layers = 1\n\
             pretrain.epochs = 1\nfinetune.epochs = 1\n\
             augment.k = 2\naugment.m = 4\n\
             eval.negatives = all\neval.seeds = 0,1",
        )
        .unwrap();
        c.out_dir = out.to_path_buf();
        c
    }

    #[test]
    fn short_users_train_only() {
        let c = Corpus::from_index_sequences(5, vec![vec![1, 2], vec![1, 2, 3, 4]]).unwrap();
        let (train, splits) = split_corpus(&c);
        assert_eq!(train, vec![vec![1, 2], vec![1, 2]]);
        assert_eq!(splits.len(), 1);
        assert_eq!(splits[0].0, 1);
    }

    #[test]
    fn strategy_adjusts_stage_settings() {
        let mut c = ExperimentConfig::default();
        c.augment.strategy = Strategy::ReverseOnly;
        assert_eq!(effective_pretrain(&c).lambda, 0.0);
        assert_eq!(effective_finetune(&c).alpha, 0.0);
        c.augment.strategy = Strategy::Crop;
        assert_eq!(effective_pretrain(&c).epochs, 0);
        let f = effective_finetune(&c);
        assert_eq!(f.epochs, c.pretrain.epochs + c.finetune.epochs);
        assert_eq!((f.alpha, f.clip_k), (0.0, 0));
    }

    #[test]
    fn commands_chain_and_enforce_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        assert!(matches!(cmd_pretrain(&cfg), Err(Error::StageOrder(_))));
        let s = cmd_prepare(&cfg).unwrap();
        assert_eq!(s.histogram.values().sum::<usize>(), s.users);
        assert!(matches!(cmd_finetune(&cfg), Err(Error::StageOrder(p)) if p.ends_with(AUGMENTED_FILE)));
        cmd_pretrain(&cfg).unwrap();
        cmd_augment(&cfg).unwrap();
        cmd_finetune(&cfg).unwrap();
        cmd_evaluate(&cfg, None).unwrap();
        for s in ["seed_0.json", "seed_1.csv", "mean.json", "mean.csv"] {
            assert!(dir.path().join(METRICS_DIR).join(s).exists(), "{s}");
        }
        let m = Manifest::load(dir.path(), "finetune").unwrap();
        assert_eq!(m.outputs.len(), 2);
    }

    #[test]
    fn evaluate_rejects_mismatched_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_prepare(&cfg).unwrap();
        let mut other = cfg.encoder.clone();
        other.dim = 4;
        let m = Model::init(other, 8, 0).unwrap();
        let p = dir.path().join("other.ckpt");
        m.save(&p).unwrap();
        assert!(matches!(cmd_evaluate(&cfg, Some(&p)), Err(Error::Compatibility(_))));
        let m = Model::init(cfg.encoder.clone(), 9, 0).unwrap();
        m.save(&p).unwrap();
        assert!(matches!(cmd_evaluate(&cfg, Some(&p)), Err(Error::Compatibility(_))));
    }

    #[test]
    fn in_memory_matches_commands() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_prepare(&cfg).unwrap();
        cmd_pretrain(&cfg).unwrap();
        cmd_augment(&cfg).unwrap();
        cmd_finetune(&cfg).unwrap();
        let from_files = cmd_evaluate(&cfg, None).unwrap();
        let (corpus, _) = load_corpus(&cfg).unwrap();
        let run = run_in_memory(&corpus, &cfg).unwrap();
        assert_eq!(run.mean, from_files);
    }
}
