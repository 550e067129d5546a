use std::path::Path;

use seqrec::augment::Strategy;
use seqrec::config::ExperimentConfig;
use seqrec::pipeline;

fn config(strategy: Strategy) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.conf");
    let mut c = ExperimentConfig::load(&path).unwrap();
    c.data.synthetic_users = 600;
    c.pretrain.epochs = 6;
    c.finetune.epochs = 6;
    c.augment.strategy = strategy;
    c
}

#[test]
fn pretrain_loss_decreases_on_synthetic_corpus() {
    let c = config(Strategy::Bicat);
    let (corpus, _) = pipeline::load_corpus(&c).unwrap();
    let (train, _) = pipeline::split_corpus(&corpus);
    let (_, trace) = pipeline::pretrain_stage(&train, corpus.vocab.len(), &c, |_, _| Ok(())).unwrap();
    for w in trace.windows(2) {
        assert!(w[1].loss_total <= w[0].loss_total * 1.02, "{trace:?}");
    }
    assert!(trace.last().unwrap().loss_total < 0.8 * trace[0].loss_total);
}

#[test]
fn augmented_finetune_ends_below_plain_training() {
    let (corpus, _) = pipeline::load_corpus(&config(Strategy::None)).unwrap();
    let plain = pipeline::run_in_memory(&corpus, &config(Strategy::None)).unwrap();
    let bicat = pipeline::run_in_memory(&corpus, &config(Strategy::Bicat)).unwrap();
    // Same number of optimizer steps: baselines fold the pre-training epochs
    // into fine-tuning.
    assert_eq!(plain.finetune_trace.len(), bicat.pretrain_trace.len() + bicat.finetune_trace.len());
    let last = |t: &[seqrec::finetune::FinetuneEpoch]| t.last().unwrap().loss_bce;
    assert!(last(&bicat.finetune_trace) < last(&plain.finetune_trace));
}
