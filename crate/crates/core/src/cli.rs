//! The `swc` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::audio::{mix_at_snr, read_wav, signal_power, snr_db, write_wav};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};
use crate::synth::{write_corpus, SynthSpec};
use crate::train::{
    evaluate, grad_check, run_pretraining, validation_batches, Corpus, RunOptions, TrainConfig, TrainState,
};

#[derive(Parser, Debug)]
#[command(name = "swc", version, about = "Switched contrastive speech pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch or resume from a checkpoint.
    Pretrain(PretrainArgs),
    /// Mix a noise clip into a waveform at an exact SNR.
    MixNoise(MixArgs),
    /// Check analytic gradients of the full loss against central differences.
    GradCheck(GradCheckArgs),
    /// Validation loss of a checkpoint.
    EvalLoss(EvalArgs),
    /// Print the contents of a checkpoint.
    InspectCheckpoint(InspectArgs),
    /// Write a synthetic tone-plus-babble corpus with manifests.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn as_str(self) -> &'static str {
        match self {
            Switch::On => "on",
            Switch::Off => "off",
        }
    }
}

/// Configuration file plus flag overrides, applied in that order.
#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "snr-min")]
    snr_min: Option<f64>,
    #[arg(long = "snr-max")]
    snr_max: Option<f64>,
    #[arg(long = "pair-dropout", value_enum)]
    pair_dropout: Option<Switch>,
    #[arg(long = "pair-mask", value_enum)]
    pair_mask: Option<Switch>,
    #[arg(long = "pair-gumbel", value_enum)]
    pair_gumbel: Option<Switch>,
    /// Any config key, as key=value; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        let here = Path::new(".");
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("--set expects key=value, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim(), here)?;
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("snr_min", self.snr_min.map(|v| v.to_string())),
            ("snr_max", self.snr_max.map(|v| v.to_string())),
            ("pair_dropout", self.pair_dropout.map(|v| v.as_str().to_string())),
            ("pair_mask", self.pair_mask.map(|v| v.as_str().to_string())),
            ("pair_gumbel", self.pair_gumbel.map(|v| v.as_str().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v, here)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Multiply the learning-rate schedule.
    #[arg(long = "lr-scale", default_value_t = 1.0)]
    lr_scale: f64,
    /// Stop after this many completed steps.
    #[arg(long = "stop-at")]
    stop_at: Option<u64>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Log the decisions each half drew to transcripts.log.
    #[arg(long)]
    transcripts: bool,
}

#[derive(Args, Debug)]
struct MixArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    #[arg(long)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// Also list every tensor.
    #[arg(long)]
    tensors: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total length of the training set in seconds.
    #[arg(long, default_value_t = 150.0)]
    seconds: f64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Pretrain(a) => pretrain(a),
        Command::MixNoise(a) => mix_noise(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::EvalLoss(a) => eval_loss(a),
        Command::InspectCheckpoint(a) => inspect(a),
        Command::Synth(a) => synth(a),
    }
}

fn pretrain(a: PretrainArgs) -> Result<i32> {
    let mut cfg = a.config.resolve()?;
    if let Some(dir) = a.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
        cfg.warmup_steps = cfg.warmup_steps.min(steps);
    }
    cfg.transcripts |= a.transcripts;
    let opts = RunOptions {
        resume: a.resume,
        lr_scale: a.lr_scale,
        stop_at: a.stop_at,
    };
    let summary = run_pretraining(&cfg, &opts, |rec, improved| {
        println!(
            "step {:>6}  valid loss {:.5}  accuracy {:.3}{}",
            rec.step,
            rec.loss,
            rec.accuracy,
            if improved { "  (best)" } else { "" }
        );
    })?;
    println!(
        "trained steps {}..{}; last checkpoint {}",
        summary.first_step,
        summary.last_step,
        summary.last_checkpoint.display()
    );
    if let (Some(best), Some(path)) = (summary.best, summary.best_checkpoint) {
        println!("best valid loss {:.5} at step {} in {}", best.loss, best.step, path.display());
    }
    Ok(0)
}

fn mix_noise(a: MixArgs) -> Result<i32> {
    let clean = read_wav(&a.input)?;
    let noise = read_wav(&a.noise)?;
    let mut rng = RngStream::new(a.seed, streams::data(0, 0));
    let mixed = mix_at_snr(&clean, &noise, a.snr, &mut rng)?;
    let clipped = write_wav(&a.out, &mixed)?;
    let written = read_wav(&a.out)?;
    let residual: Vec<f32> = written
        .samples()
        .iter()
        .zip(clean.samples())
        .map(|(m, c)| m - c)
        .collect();
    let realized = snr_db(signal_power(clean.samples())?, signal_power(&residual)?);
    println!("wrote {} ({} samples), measured SNR {realized:.4} dB", a.out.display(), written.len());
    if clipped > 0 {
        eprintln!("warning: {clipped} samples clipped to the 16-bit range");
    }
    Ok(0)
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<i32> {
    let cfg = a.config.resolve()?;
    let out = grad_check(&cfg, a.eps)?;
    let r = &out.report;
    println!(
        "max relative error {:.3e} over {} entries of {} tensors (worst: {}[{}], analytic {:.6e}, numeric {:.6e})",
        r.max_relative_error,
        r.entries,
        out.parameters,
        out.worst_param,
        r.worst.1,
        r.analytic,
        r.numeric
    );
    if r.max_relative_error < a.tolerance {
        println!("PASS (tolerance {:e})", a.tolerance);
        Ok(0)
    } else {
        println!("FAIL (tolerance {:e})", a.tolerance);
        Ok(2)
    }
}

fn eval_loss(a: EvalArgs) -> Result<i32> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let state = TrainState::from_checkpoint(ck, &cfg)?;
    let corpus = Corpus::load(&cfg)?;
    let batches = validation_batches(&cfg, &corpus)?;
    let record = evaluate(&cfg, &state.params, &batches, state.step)?;
    println!("{}", serde_json::to_string(&record).map_err(|e| Error::format(e.to_string()))?);
    Ok(0)
}

fn inspect(a: InspectArgs) -> Result<i32> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    println!("checkpoint {}", a.checkpoint.display());
    println!("step        {}", ck.step);
    println!("parameters  {} tensors, {} values", ck.params.len(), ck.params.num_elements());
    match ck.best {
        Some(b) => println!("best        loss {:.6} at step {}", b.loss, b.step),
        None => println!("best        none"),
    }
    for (name, s) in &ck.rng {
        println!("rng {name:<12} seed {} stream {:#x} counter {}", s.seed, s.stream_id, s.counter);
    }
    if a.tensors {
        for (name, t) in ck.params.iter() {
            let norm = t.data().iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            println!("{name:<40} {:<16} norm {norm:.5}", format!("{:?}", t.shape()));
        }
    }
    Ok(0)
}

fn synth(a: SynthArgs) -> Result<i32> {
    let spec = SynthSpec {
        train_secs: a.seconds,
        ..SynthSpec::default()
    };
    let corpus = write_corpus(&a.out, &spec, a.seed)?;
    println!("train  {} ({:.1} s)", corpus.train_manifest.display(), corpus.train_secs);
    if let Some(v) = &corpus.valid_manifest {
        println!("valid  {}", v.display());
    }
    println!("noise  {}", corpus.noise_manifest.display());
    Ok(0)
}
