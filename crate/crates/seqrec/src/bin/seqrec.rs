use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

use seqrec::augment::Strategy;
use seqrec::config::ExperimentConfig;
use seqrec::markov::{self, NgramCounts};
use seqrec::{pipeline, Error};

const SHIPPED_FIXTURE: &str = include_str!("../../fixtures/counterexample.txt");

#[derive(Parser)]
#[command(name = "seqrec", version, about = "Sequential recommendation with bidirectional augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`section.key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the augmentation strategy
    #[arg(long, value_parser = PossibleValuesParser::new(Strategy::ALL.map(|s| s.as_str()))
        .map(|s| s.parse::<Strategy>().expect("listed strategy parses")))]
    strategy: Option<Strategy>,
    /// Re-initialize the model before fine-tuning
    #[arg(long)]
    rt: bool,
}

impl Common {
    fn load(&self) -> seqrec::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
            c.derive_seeds();
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(s) = self.strategy {
            c.augment.strategy = s;
        }
        if self.rt {
            c.finetune.rt = true;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build user sequences and the vocabulary from a raw interaction log
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Raw log; overrides `data.raw`
        raw: Option<PathBuf>,
    },
    /// Bidirectional pre-training
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Generate augmented training sequences
    Augment {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune on augmented and original sequences
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Write per-seed and averaged metric reports
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score instead of the fine-tuned model
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Exact n-gram check that reverse augmentation can hurt forward prediction
    Oracle {
        /// Symbol corpus, one sequence per line (default: the shipped fixture)
        corpus: Option<PathBuf>,
        /// Also write counterexample.json here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> seqrec::Result<()> {
    match cmd {
        Command::Prepare { common, raw } => {
            let mut cfg = common.load()?;
            if raw.is_some() {
                cfg.data.raw = raw;
            }
            print!("{}", pipeline::cmd_prepare(&cfg)?);
        }
        Command::Pretrain { common } => {
            let trace = pipeline::cmd_pretrain(&common.load()?)?;
            if let Some(t) = trace.last() {
                println!("pretrain: {} epochs, final loss {:.6}", trace.len(), t.loss_total);
            }
        }
        Command::Augment { common } => {
            let aug = pipeline::cmd_augment(&common.load()?)?;
            println!(
                "augment: {} sequences, {} generated items",
                aug.sequences.len(),
                aug.total_generated()
            );
        }
        Command::Finetune { common } => {
            let trace = pipeline::cmd_finetune(&common.load()?)?;
            if let Some(t) = trace.last() {
                println!("finetune: {} epochs, final loss {:.6}", trace.len(), t.loss_total);
            }
        }
        Command::Evaluate { common, checkpoint } => {
            let mean = pipeline::cmd_evaluate(&common.load()?, checkpoint.as_deref())?;
            println!("users: {}", mean.users);
            for (k, v) in &mean.overall.values {
                println!("{k:>10}  {v:.4}");
            }
        }
        Command::Oracle { corpus, out } => {
            let text = match &corpus {
                Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                None => SHIPPED_FIXTURE.to_string(),
            };
            let seqs = markov::parse_symbol_corpus(&text);
            let counts = NgramCounts::new(&seqs, markov::DEFAULT_ORDER)?;
            let report = markov::counterexample_report(&counts)?;
            print!("{}", report.table());
            println!("{}", report.to_json());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                seqrec::io::write_bytes_atomic(&dir.join("counterexample.json"), report.to_json().as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
