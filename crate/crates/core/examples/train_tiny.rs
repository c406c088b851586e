//! A short pre-training run on synthetic audio, interrupted and resumed,
//! then the checkpoint it left behind.

use switched_contrastive::checkpoint::Checkpoint;
use switched_contrastive::synth::{write_corpus, SynthSpec};
use switched_contrastive::train::{read_log, run_pretraining, MetricsRecord, RunOptions, TrainConfig, LAST_CHECKPOINT, METRICS_LOG};

fn main() -> switched_contrastive::Result<()> {
    let root = std::path::PathBuf::from("target/example-train");
    let spec = SynthSpec {
        train_secs: 20.0,
        valid_utterances: 2,
        ..SynthSpec::default()
    };
    let corpus = write_corpus(root.join("data"), &spec, 1)?;
    let mut cfg = TrainConfig::from_file(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.cfg"))?;
    cfg.train_manifest = Some(corpus.train_manifest);
    cfg.valid_manifest = corpus.valid_manifest;
    cfg.noise_manifest = Some(corpus.noise_manifest);
    cfg.out_dir = root.join("run");
    cfg.batch_pairs = 2;
    cfg.crop_samples = 4000;
    cfg.steps = 40;
    cfg.warmup_steps = 5;
    cfg.valid_interval = 10;

    let report = |rec: &switched_contrastive::train::EvalRecord, best: bool| {
        println!("step {:>3}: valid loss {:.4} accuracy {:.3}{}", rec.step, rec.loss, rec.accuracy, if best { " *" } else { "" });
    };
    run_pretraining(&cfg, &RunOptions { stop_at: Some(20), ..RunOptions::default() }, report)?;
    println!("-- interrupted, resuming --");
    let resume = RunOptions {
        resume: Some(cfg.out_dir.join(LAST_CHECKPOINT)),
        ..RunOptions::default()
    };
    run_pretraining(&cfg, &resume, report)?;

    let log: Vec<MetricsRecord> = read_log(cfg.out_dir.join(METRICS_LOG))?;
    let mean = |r: &[MetricsRecord]| r.iter().map(|m| m.total).sum::<f64>() / r.len() as f64;
    println!("train loss: first 10 steps {:.4}, last 10 steps {:.4}", mean(&log[..10]), mean(&log[30..]));
    let ck = Checkpoint::<f32>::load(cfg.out_dir.join(LAST_CHECKPOINT))?;
    println!("checkpoint at step {} with {} parameters", ck.step, ck.params.num_elements());
    Ok(())
}
