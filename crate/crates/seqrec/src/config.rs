//! Experiment configuration as flat `section.key = value` text.
//!
//! Every stage seed is derived from the single top-level `seed` (see
//! [`crate::rng::sub_seed`]), so sub-configs never carry their own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{AugmentConfig, Decoding};
use crate::corpus::{CsvSpec, EvalNegatives, NegativeSampling};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Target};
use crate::finetune::FinetuneConfig;
use crate::pretrain::PretrainConfig;
use crate::rng::{stream, sub_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Raw interaction log; unused when `synthetic_users > 0`.
    pub raw: Option<PathBuf>,
    pub csv: CsvSpec,
    /// Users with fewer interactions are dropped.
    pub min_len: usize,
    /// Generate a Markov-chain corpus with this many users instead of
    /// reading `raw`.
    pub synthetic_users: usize,
    pub synthetic_states: usize,
    pub synthetic_min_len: usize,
    pub synthetic_max_len: usize,
    /// Fixes the chain and the walks independently of the run seed.
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            raw: None,
            csv: CsvSpec::default(),
            min_len: 5,
            synthetic_users: 0,
            synthetic_states: 20,
            synthetic_min_len: 2,
            synthetic_max_len: 30,
            synthetic_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub negatives: EvalNegatives,
    pub sampling: NegativeSampling,
    pub ks: Vec<usize>,
    /// One report per seed, plus their mean.
    pub seeds: Vec<u64>,
    pub target: Target,
    /// Items exported by `evaluate`; 0 disables the export.
    pub export_sample: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            negatives: EvalNegatives::Sampled(100),
            sampling: NegativeSampling::Uniform,
            ks: vec![1, 5, 10],
            seeds: vec![0],
            target: Target::Test,
            export_sample: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub augment: AugmentConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalSettings,
    /// Save a pre-training checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = ExperimentConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            augment: AugmentConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalSettings::default(),
            checkpoint_every: 0,
        };
        c.derive_seeds();
        c
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Recomputes every stage seed from `seed`.
    pub fn derive_seeds(&mut self) {
        self.pretrain.seed = sub_seed(self.seed, &[stream::PRETRAIN]);
        self.augment.seed = sub_seed(self.seed, &[stream::AUGMENT]);
        self.finetune.seed = sub_seed(self.seed, &[stream::FINETUNE]);
    }

    pub fn init_seed(&self) -> u64 {
        sub_seed(self.seed, &[stream::INIT])
    }

    pub fn eval_config(&self, eval_seed: u64) -> EvalConfig {
        EvalConfig {
            negatives: self.eval.negatives,
            sampling: self.eval.sampling,
            ks: self.eval.ks.clone(),
            seed: sub_seed(self.seed, &[stream::EVAL, eval_seed]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.augment.validate()?;
        self.finetune.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must list cutoffs ≥ 1".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        if self.data.synthetic_users > 0
            && (self.data.synthetic_min_len < 1 || self.data.synthetic_min_len > self.data.synthetic_max_len)
        {
            return Err(Error::Config("synthetic length range is empty".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,

            "data.raw" => self.data.raw = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.delimiter" => {
                let d = match v {
                    "tab" => b'\t',
                    "comma" => b',',
                    "space" => b' ',
                    s if s.len() == 1 => s.as_bytes()[0],
                    _ => return Err(Error::Config(format!("invalid delimiter `{v}`"))),
                };
                self.data.csv.delimiter = d;
            }
            "data.user_col" => self.data.csv.user_col = parse(key, v)?,
            "data.item_col" => self.data.csv.item_col = parse(key, v)?,
            "data.time_col" => self.data.csv.timestamp_col = parse(key, v)?,
            "data.header" => self.data.csv.has_header = parse(key, v)?,
            "data.min_len" => self.data.min_len = parse(key, v)?,
            "data.synthetic.users" => self.data.synthetic_users = parse(key, v)?,
            "data.synthetic.states" => self.data.synthetic_states = parse(key, v)?,
            "data.synthetic.min_len" => self.data.synthetic_min_len = parse(key, v)?,
            "data.synthetic.max_len" => self.data.synthetic_max_len = parse(key, v)?,
            "data.synthetic.seed" => self.data.synthetic_seed = parse(key, v)?,

            "encoder.n" => self.encoder.max_len = parse(key, v)?,
            "encoder.d" => self.encoder.dim = parse(key, v)?,
            "encoder.h" => self.encoder.heads = parse(key, v)?,
            "encoder.layers" => self.encoder.layers = parse(key, v)?,
            "encoder.dropout" => self.encoder.dropout = parse(key, v)?,
            "encoder.scale_full_d" => self.encoder.scale_full_dim = parse(key, v)?,

            "pretrain.lambda" => self.pretrain.lambda = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.forward_last_only" => self.pretrain.forward_last_only = parse(key, v)?,
            "pretrain.clip_k" => self.pretrain.clip_k = parse(key, v)?,

            "augment.strategy" => self.augment.strategy = v.parse()?,
            "augment.k" => self.augment.k = parse(key, v)?,
            "augment.m" => self.augment.m = parse(key, v)?,
            "augment.decoding" => {
                self.augment.decoding = match v {
                    "greedy" => Decoding::Greedy,
                    s => match s.strip_prefix("topk:") {
                        Some(k) => Decoding::TopK(parse(key, k)?),
                        None => return Err(Error::Config(format!("invalid decoding `{v}`"))),
                    },
                }
            }
            "augment.ratio" => self.augment.ratio = parse(key, v)?,
            "augment.augment_eval" => self.augment.augment_eval = parse(key, v)?,

            "finetune.alpha" => self.finetune.alpha = parse(key, v)?,
            "finetune.clip_k" => self.finetune.clip_k = parse(key, v)?,
            "finetune.epochs" => self.finetune.epochs = parse(key, v)?,
            "finetune.batch_size" => self.finetune.batch_size = parse(key, v)?,
            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.rt" => self.finetune.rt = parse(key, v)?,
            "finetune.kl_sample" => {
                let k: usize = parse(key, v)?;
                self.finetune.kl_sample = (k > 0).then_some(k);
            }

            "eval.negatives" => {
                self.eval.negatives = match v {
                    "all" => EvalNegatives::AllUnseen,
                    n => EvalNegatives::Sampled(parse(key, n)?),
                }
            }
            "eval.sampling" => self.eval.sampling = v.parse()?,
            "eval.ks" => self.eval.ks = parse_list(key, v)?,
            "eval.seeds" => self.eval.seeds = parse_list(key, v)?,
            "eval.target" => self.eval.target = v.parse()?,
            "eval.export_sample" => self.eval.export_sample = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not present
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        c.derive_seeds();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in a fixed order.
    pub fn serialize(&self) -> String {
        let d = &self.data;
        let delim = match d.csv.delimiter {
            b'\t' => "tab".to_string(),
            b',' => "comma".to_string(),
            b' ' => "space".to_string(),
            c => (c as char).to_string(),
        };
        let decoding = match self.augment.decoding {
            Decoding::Greedy => "greedy".to_string(),
            Decoding::TopK(k) => format!("topk:{k}"),
        };
        let negatives = match self.eval.negatives {
            EvalNegatives::AllUnseen => "all".to_string(),
            EvalNegatives::Sampled(n) => n.to_string(),
        };
        let raw = d.raw.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("output.dir", self.out_dir.display().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("data.raw", raw),
            ("data.delimiter", delim),
            ("data.user_col", d.csv.user_col.to_string()),
            ("data.item_col", d.csv.item_col.to_string()),
            ("data.time_col", d.csv.timestamp_col.to_string()),
            ("data.header", d.csv.has_header.to_string()),
            ("data.min_len", d.min_len.to_string()),
            ("data.synthetic.users", d.synthetic_users.to_string()),
            ("data.synthetic.states", d.synthetic_states.to_string()),
            ("data.synthetic.min_len", d.synthetic_min_len.to_string()),
            ("data.synthetic.max_len", d.synthetic_max_len.to_string()),
            ("data.synthetic.seed", d.synthetic_seed.to_string()),
            ("encoder.n", self.encoder.max_len.to_string()),
            ("encoder.d", self.encoder.dim.to_string()),
            ("encoder.h", self.encoder.heads.to_string()),
            ("encoder.layers", self.encoder.layers.to_string()),
            ("encoder.dropout", self.encoder.dropout.to_string()),
            ("encoder.scale_full_d", self.encoder.scale_full_dim.to_string()),
            ("pretrain.lambda", self.pretrain.lambda.to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.forward_last_only", self.pretrain.forward_last_only.to_string()),
            ("pretrain.clip_k", self.pretrain.clip_k.to_string()),
            ("augment.strategy", self.augment.strategy.to_string()),
            ("augment.k", self.augment.k.to_string()),
            ("augment.m", self.augment.m.to_string()),
            ("augment.decoding", decoding),
            ("augment.ratio", self.augment.ratio.to_string()),
            ("augment.augment_eval", self.augment.augment_eval.to_string()),
            ("finetune.alpha", self.finetune.alpha.to_string()),
            ("finetune.clip_k", self.finetune.clip_k.to_string()),
            ("finetune.epochs", self.finetune.epochs.to_string()),
            ("finetune.batch_size", self.finetune.batch_size.to_string()),
            ("finetune.lr", self.finetune.lr.to_string()),
            ("finetune.rt", self.finetune.rt.to_string()),
            ("finetune.kl_sample", self.finetune.kl_sample.unwrap_or(0).to_string()),
            ("eval.negatives", negatives),
            ("eval.sampling", self.eval.sampling.to_string()),
            ("eval.ks", join(&self.eval.ks)),
            ("eval.seeds", join(&self.eval.seeds)),
            ("eval.target", self.eval.target.to_string()),
            ("eval.export_sample", self.eval.export_sample.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Digest of the serialized configuration. The output directory and
    /// raw data path are left out so relocated reruns hash the same; the
    /// data itself is covered by the manifests' input digests.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.data.raw = None;
        crate::io::sha256_hex(c.serialize().as_bytes())
    }
}
