//! Pre-training runs: configuration, data order, Adam, validation, logs and
//! checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{load_entries, make_paired_example, read_manifest, NoiseBank, PairedBatch, Waveform};
use crate::checkpoint::{BestRecord, Checkpoint};
use crate::encoder::ConvLayer;
use crate::error::{Error, Result};
use crate::model::{forward_pair, plan_pair, ModelConfig, Objective, PairPlan};
use crate::pairing::{Family, FamilyStreams, PairingMode, Transcript};
use crate::params::{Bound, ParamSet};
use crate::quantizer::{anneal_tau, QuantizerConfig};
use crate::rng::{streams, RandomSource, RngStream};
use crate::tensor::{finite_difference_check, gradcheck::GradCheckReport, Tape, Tensor};

/// Seed of every validation draw, independent of the run seed so that
/// validation losses compare across runs and checkpoints.
pub const VALID_SEED: u64 = 0x7661_6c69_6461_7465;

/// Utterances borrowed from the training set when no validation manifest is given.
pub const FALLBACK_VALID_UTTERANCES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

/// Everything a run depends on. Parsed from `key = value` files.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    /// Pairs per step; the network sees twice as many waveforms.
    pub batch_pairs: usize,
    pub crop_samples: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub lambda: f64,
    pub alpha: f64,
    /// Own-target terms only; the switched terms are never computed.
    pub baseline: bool,
    pub snr_range: (f64, f64),
    /// Noisy half is an exact copy of the original.
    pub zero_noise: bool,
    pub pairing: PairingMode,
    pub model: ModelConfig,
    pub quantizer: QuantizerConfig,
    /// Validate every this many steps; 0 validates only after the last step.
    pub valid_interval: u64,
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    pub noise_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Write per-step decision transcripts to `transcripts.log`.
    pub transcripts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            steps: 1000,
            batch_pairs: 4,
            crop_samples: 16_000,
            lr: 1e-3,
            warmup_steps: 100,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            lambda: 0.3,
            alpha: 0.1,
            baseline: false,
            snr_range: (5.0, 10.0),
            zero_noise: false,
            pairing: PairingMode::all_on(),
            model: ModelConfig::default(),
            quantizer: QuantizerConfig::default(),
            valid_interval: 100,
            train_manifest: None,
            valid_manifest: None,
            noise_manifest: None,
            out_dir: PathBuf::from("run"),
            transcripts: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("bad value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::usage(format!("'{key}' expects on/off, got '{value}'"))),
    }
}

/// `channels:kernel:stride` triples separated by commas.
fn parse_layers(value: &str) -> Result<Vec<ConvLayer>> {
    value
        .split(',')
        .map(|part| {
            let nums: Vec<usize> = part
                .trim()
                .split(':')
                .map(|n| parse("encoder_layers", n.trim()))
                .collect::<Result<_>>()?;
            match nums[..] {
                [c, k, s] => Ok(ConvLayer::new(c, k, s)),
                _ => Err(Error::usage(format!("encoder layer '{part}' is not channels:kernel:stride"))),
            }
        })
        .collect()
}

impl TrainConfig {
    /// Reads a config file; relative paths inside resolve against its directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text, base)
            .map_err(|e| match e {
                Error::Usage(msg) => Error::Usage(format!("{}: {msg}", path.display())),
                other => other,
            })?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim(), base)
                .map_err(|e| match e {
                    Error::Usage(msg) => Error::Usage(format!("line {}: {msg}", i + 1)),
                    other => other,
                })?;
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are usage errors.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = |v: &str| Some(base.join(v));
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_pairs" => self.batch_pairs = parse(key, value)?,
            "crop_samples" => self.crop_samples = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "objective" => {
                self.baseline = match value {
                    "switched" => false,
                    "baseline" => true,
                    _ => return Err(Error::usage(format!("objective must be switched or baseline, got '{value}'"))),
                }
            }
            "snr_min" => self.snr_range.0 = parse(key, value)?,
            "snr_max" => self.snr_range.1 = parse(key, value)?,
            "zero_noise" => self.zero_noise = parse_bool(key, value)?,
            "pair_mask" => self.pairing.mask_positions = parse_bool(key, value)?,
            "pair_dropout" => self.pairing.dropout_masks = parse_bool(key, value)?,
            "pair_gumbel" => self.pairing.gumbel_noise = parse_bool(key, value)?,
            "pair_distractors" => self.pairing.distractors = parse_bool(key, value)?,
            "encoder_layers" => m.encoder.layers = parse_layers(value)?,
            "encoder_norm_groups" => {
                m.encoder.group_norm_groups = match parse::<usize>(key, value)? {
                    0 => None,
                    g => Some(g),
                }
            }
            "encoder_layer_norm" => m.encoder.feature_layer_norm = parse_bool(key, value)?,
            "blocks" => m.context.blocks = parse(key, value)?,
            "model_dim" => {
                m.context.model_dim = parse(key, value)?;
                m.codebook.out_dim = m.context.model_dim;
            }
            "heads" => m.context.heads = parse(key, value)?,
            "ffn_dim" => m.context.ffn_dim = parse(key, value)?,
            "dropout" => m.context.dropout = parse(key, value)?,
            "pos_conv_kernel" => m.context.pos_conv_kernel = parse(key, value)?,
            "pos_conv_groups" => m.context.pos_conv_groups = parse(key, value)?,
            "codebook_groups" => m.codebook.groups = parse(key, value)?,
            "codebook_entries" => m.codebook.entries = parse(key, value)?,
            "codeword_dim" => m.codebook.codeword_dim = parse(key, value)?,
            "hard_gumbel" => m.hard_gumbel = parse_bool(key, value)?,
            "mask_p_start" => m.mask.p_start = parse(key, value)?,
            "mask_span" => m.mask.span = parse(key, value)?,
            "distractors" => m.contrastive.k = parse(key, value)?,
            "kappa" => m.contrastive.kappa = parse(key, value)?,
            "include_positive" => m.contrastive.include_positive = parse_bool(key, value)?,
            "tau0" => self.quantizer.tau0 = parse(key, value)?,
            "tau_min" => self.quantizer.tau_min = parse(key, value)?,
            "tau_decay" => self.quantizer.decay = parse(key, value)?,
            "valid_interval" => self.valid_interval = parse(key, value)?,
            "train_manifest" => self.train_manifest = path(value),
            "valid_manifest" => self.valid_manifest = path(value),
            "noise_manifest" => self.noise_manifest = path(value),
            "out_dir" => self.out_dir = base.join(value),
            "transcripts" => self.transcripts = parse_bool(key, value)?,
            _ => return Err(Error::usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.quantizer.validate()?;
        let fail = |msg: String| Err(Error::usage(msg));
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.warmup_steps > self.steps {
            return fail(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps));
        }
        if self.batch_pairs == 0 {
            return fail("batch_pairs must be positive".into());
        }
        if !(self.lambda >= 0.0) || !(self.alpha >= 0.0) {
            return fail(format!("lambda and alpha must be >= 0, got {} and {}", self.lambda, self.alpha));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return fail("lr and grad_clip must be positive".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.snr_range.0 <= self.snr_range.1) {
            return fail(format!("SNR range [{}, {}] is empty", self.snr_range.0, self.snr_range.1));
        }
        if !(0.0..1.0).contains(&self.model.context.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.model.context.dropout));
        }
        self.model.frames(self.crop_samples)?;
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        if self.baseline {
            Objective::Baseline
        } else {
            Objective::Switched { lambda: self.lambda }
        }
    }

    /// Learning rate of the 0-based `step`: linear warmup, then linear decay to 0.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else if self.steps > self.warmup_steps {
            self.lr * self.steps.saturating_sub(step) as f64 / (self.steps - self.warmup_steps) as f64
        } else {
            0.0
        }
    }
}

/// Training, validation and noise audio held in memory.
pub struct Corpus {
    pub train: Vec<Waveform>,
    pub valid: Vec<Waveform>,
    pub noise: NoiseBank,
}

fn load_manifest(path: &Path, what: &str) -> Result<Vec<Waveform>> {
    let entries = read_manifest(path)?;
    if entries.is_empty() {
        return Err(Error::usage(format!("{what} manifest {} is empty", path.display())));
    }
    load_entries(&entries)
}

impl Corpus {
    /// Without a validation set, the first few training utterances are used.
    pub fn new(train: Vec<Waveform>, valid: Vec<Waveform>, noise: NoiseBank) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::usage("no training utterances"));
        }
        let rate = noise.sample_rate();
        if let Some(w) = train.iter().chain(&valid).find(|w| w.sample_rate() != rate) {
            return Err(Error::usage(format!(
                "utterance at {} Hz does not match noise at {rate} Hz",
                w.sample_rate()
            )));
        }
        let valid = if valid.is_empty() {
            train.iter().take(FALLBACK_VALID_UTTERANCES).cloned().collect()
        } else {
            valid
        };
        Ok(Corpus { train, valid, noise })
    }

    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let train = cfg
            .train_manifest
            .as_deref()
            .ok_or_else(|| Error::usage("train_manifest is not set"))?;
        let noise = cfg
            .noise_manifest
            .as_deref()
            .ok_or_else(|| Error::usage("noise_manifest is not set"))?;
        let valid = match &cfg.valid_manifest {
            Some(p) => load_manifest(p, "validation")?,
            None => Vec::new(),
        };
        let noise = NoiseBank::from_manifest(noise)?;
        Corpus::new(load_manifest(train, "training")?, valid, noise)
    }
}

/// Training utterance visited at flat position `pos` of the data order,
/// with the epoch it belongs to.
pub fn utterance_at(seed: u64, pos: u64, n: usize) -> (usize, u64) {
    let epoch = pos / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, streams::shuffle(epoch)).shuffle(&mut order);
    (order[(pos % n as u64) as usize], epoch)
}

/// The pairs of 0-based `step`. Crops and noise are drawn from a stream keyed
/// by utterance and epoch, so any step can be rebuilt without replaying others.
pub fn training_batch(cfg: &TrainConfig, corpus: &Corpus, step: u64) -> Result<PairedBatch> {
    let b = cfg.batch_pairs as u64;
    let examples = (0..b)
        .map(|i| {
            let (utt, epoch) = utterance_at(cfg.seed, step * b + i, corpus.train.len());
            let mut rng = RngStream::new(cfg.seed, streams::data(utt as u64, epoch));
            make_paired_example(&corpus.train[utt], &corpus.noise, cfg.snr_range, cfg.crop_samples, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = PairedBatch {
        examples,
        crop_len: cfg.crop_samples,
        sample_rate: corpus.noise.sample_rate(),
    };
    Ok(if cfg.zero_noise { batch.without_noise() } else { batch })
}

/// Fixed validation pairs, at most `batch_pairs` per batch.
pub fn validation_batches(cfg: &TrainConfig, corpus: &Corpus) -> Result<Vec<PairedBatch>> {
    let examples = corpus
        .valid
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = RngStream::new(VALID_SEED, streams::data(i as u64, 0));
            make_paired_example(w, &corpus.noise, cfg.snr_range, cfg.crop_samples, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(examples
        .chunks(cfg.batch_pairs)
        .map(|chunk| {
            let batch = PairedBatch {
                examples: chunk.to_vec(),
                crop_len: cfg.crop_samples,
                sample_rate: corpus.noise.sample_rate(),
            };
            if cfg.zero_noise {
                batch.without_noise()
            } else {
                batch
            }
        })
        .collect())
}

/// Parameters, optimizer moments and generator positions of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub params: ParamSet<f32>,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub streams: FamilyStreams,
    pub best: Option<BestRecord>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let params = cfg.model.init_params::<f32>(cfg.seed)?;
        Ok(TrainState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            streams: FamilyStreams::new(cfg.seed),
            best: None,
        })
    }

    /// Checks every tensor against the shapes `cfg` expects.
    pub fn from_checkpoint(ck: Checkpoint<f32>, cfg: &TrainConfig) -> Result<Self> {
        let expected = cfg.model.param_shapes();
        if expected.len() != ck.params.len() {
            return Err(Error::usage(format!(
                "checkpoint has {} tensors, the configuration expects {}",
                ck.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            for (what, set) in [("parameter", &ck.params), ("first moment", &ck.m), ("second moment", &ck.v)] {
                let t = set
                    .get(name)
                    .map_err(|_| Error::usage(format!("checkpoint lacks {what} '{name}'")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::usage(format!(
                        "{what} '{name}' is {:?} in the checkpoint, {shape:?} in the configuration",
                        t.shape()
                    )));
                }
            }
        }
        let mut streams = FamilyStreams::new(cfg.seed);
        let states = ck
            .rng
            .iter()
            .map(|(name, s)| {
                Family::ALL
                    .into_iter()
                    .find(|f| f.name() == name)
                    .map(|f| (f, *s))
                    .ok_or_else(|| Error::format(format!("unknown generator '{name}' in checkpoint")))
            })
            .collect::<Result<Vec<_>>>()?;
        streams.restore_states(&states)?;
        Ok(TrainState {
            step: ck.step,
            params: ck.params,
            m: ck.m,
            v: ck.v,
            streams,
            best: ck.best,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            step: self.step,
            params: self.params.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            rng: self
                .streams
                .states()
                .into_iter()
                .map(|(f, s)| (f.name().to_string(), s))
                .collect(),
            best: self.best,
        }
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ParamSet<f32>, max_norm: f64) -> Result<f64> {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        let names: Vec<String> = grads.names().map(String::from).collect();
        for name in names {
            let g = grads.get(&name)?.map(|x| x * scale);
            grads.insert(name, g);
        }
    }
    Ok(norm)
}

/// One bias-corrected Adam update; `t` is the 1-based update count.
pub fn adam_update(
    state: &mut TrainState,
    grads: &ParamSet<f32>,
    lr: f64,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(exp);
    let c2 = 1.0 - cfg.beta2.powi(exp);
    let names: Vec<String> = state.params.names().map(String::from).collect();
    for name in names {
        let (p, g) = (state.params.get(&name)?, grads.get(&name)?);
        let (m, v) = (state.m.get(&name)?, state.v.get(&name)?);
        let n = p.len();
        let (mut np, mut nm, mut nv) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = f64::from(g.data()[i]);
            let mi = cfg.beta1 * f64::from(m.data()[i]) + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * f64::from(v.data()[i]) + (1.0 - cfg.beta2) * gi * gi;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            np.push((f64::from(p.data()[i]) - update) as f32);
            nm.push(mi as f32);
            nv.push(vi as f32);
        }
        let shape = p.shape().to_vec();
        state.params.insert(name.clone(), Tensor::new(shape.clone(), np)?);
        state.m.insert(name.clone(), Tensor::new(shape.clone(), nm)?);
        state.v.insert(name, Tensor::new(shape, nv)?);
    }
    Ok(())
}

/// One line of `metrics.log`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub l_oo: f64,
    pub l_nn: f64,
    pub l_on: Option<f64>,
    pub l_no: Option<f64>,
    pub l_div: f64,
    pub total: f64,
    /// Codebook perplexity per group, averaged over the two halves.
    pub perplexity: Vec<f64>,
    /// Top-1 accuracy of the original half against its own targets.
    pub accuracy: f64,
    pub accuracy_noisy: f64,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
}

/// Draw count and digest of one family in a transcript line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyEntry {
    pub draws: u64,
    pub digest: String,
}

/// Decisions of one half, keyed by family name.
pub type HalfTranscript = std::collections::BTreeMap<String, FamilyEntry>;

/// One line of `transcripts.log`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub step: u64,
    pub original: HalfTranscript,
    pub noisy: HalfTranscript,
    pub mask_counts_original: Vec<usize>,
    pub mask_counts_noisy: Vec<usize>,
    pub masks_equal: bool,
}

fn half_transcript(t: &Transcript) -> HalfTranscript {
    Family::ALL
        .into_iter()
        .map(|f| {
            let log = t.log(f);
            let entry = FamilyEntry {
                draws: log.draws,
                digest: format!("{:016x}", log.digest),
            };
            (f.name().to_string(), entry)
        })
        .collect()
}

impl TranscriptRecord {
    pub fn from_plan(step: u64, plan: &PairPlan) -> Self {
        TranscriptRecord {
            step,
            original: half_transcript(&plan.original_transcript),
            noisy: half_transcript(&plan.noisy_transcript),
            mask_counts_original: plan.original.masks.counts(),
            mask_counts_noisy: plan.noisy.masks.counts(),
            masks_equal: plan.original.masks == plan.noisy.masks,
        }
    }
}

/// Result of one optimization step.
pub struct StepReport {
    pub metrics: MetricsRecord,
    pub transcript: TranscriptRecord,
}

fn mean_pair(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x + y) * 0.5).collect()
}

/// Paired forward, backward, clipping and one Adam update.
pub fn train_step(state: &mut TrainState, batch: &PairedBatch, cfg: &TrainConfig, lr_scale: f64) -> Result<StepReport> {
    let s = state.step;
    let tau = anneal_tau(s, &cfg.quantizer);
    let lr = cfg.lr_at(s) * lr_scale;
    let b = batch.batch_size();
    let frames = cfg.model.frames(batch.crop_len)?;
    let plan = plan_pair(&cfg.model, b, frames, true, &mut state.streams, cfg.pairing)?;

    let tape = Tape::new();
    let bound = state.params.bind(&tape, true);
    let waves = tape.constant(Tensor::new(vec![2 * b, batch.crop_len], batch.stacked())?);
    let out = forward_pair(&cfg.model, &bound, waves, &plan, tau, cfg.objective(), cfg.alpha, cfg.pairing)?;
    if !out.breakdown.total.is_finite() {
        let origin = tape
            .first_non_finite()
            .map(|(id, op)| format!("node {id} ({op})"))
            .unwrap_or_else(|| "the loss".into());
        return Err(Error::NonFinite(format!("{origin} at step {}", s + 1)));
    }
    let mut grads = bound.gradients(&tape.backward(out.loss)?);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name} at step {}", s + 1)));
    }
    let grad_norm = clip_gradients(&mut grads, cfg.grad_clip)?;
    adam_update(state, &grads, lr, s + 1, &cfg.adam)?;
    state.step += 1;

    let bd = out.breakdown;
    Ok(StepReport {
        metrics: MetricsRecord {
            step: state.step,
            l_oo: bd.l_oo,
            l_nn: bd.l_nn,
            l_on: bd.l_on,
            l_no: bd.l_no,
            l_div: bd.l_div,
            total: bd.total,
            perplexity: mean_pair(&out.perplexity.0, &out.perplexity.1),
            accuracy: out.accuracy.0,
            accuracy_noisy: out.accuracy.1,
            lr,
            tau,
            grad_norm,
        },
        transcript: TranscriptRecord::from_plan(state.step, &plan),
    })
}

/// Mean validation losses over a fixed set of pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Completed training steps of the evaluated parameters.
    pub step: u64,
    pub loss: f64,
    pub l_oo: f64,
    pub l_nn: f64,
    pub l_on: Option<f64>,
    pub l_no: Option<f64>,
    pub l_div: f64,
    pub accuracy: f64,
    pub pairs: usize,
}

/// Loss of `params` on `batches` with dropout off and decisions drawn from
/// [`VALID_SEED`], weighted by batch size.
pub fn evaluate(cfg: &TrainConfig, params: &ParamSet<f32>, batches: &[PairedBatch], step: u64) -> Result<EvalRecord> {
    let tau = anneal_tau(step, &cfg.quantizer);
    let mut streams = FamilyStreams::new(VALID_SEED);
    let mut acc = EvalRecord {
        step,
        loss: 0.0,
        l_oo: 0.0,
        l_nn: 0.0,
        l_on: None,
        l_no: None,
        l_div: 0.0,
        accuracy: 0.0,
        pairs: 0,
    };
    let (mut on, mut no) = (0.0, 0.0);
    for batch in batches {
        let b = batch.batch_size();
        let frames = cfg.model.frames(batch.crop_len)?;
        let plan = plan_pair(&cfg.model, b, frames, false, &mut streams, cfg.pairing)?;
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let waves = tape.constant(Tensor::new(vec![2 * b, batch.crop_len], batch.stacked())?);
        let out = forward_pair(&cfg.model, &bound, waves, &plan, tau, cfg.objective(), cfg.alpha, cfg.pairing)?;
        let w = b as f64;
        let bd = out.breakdown;
        acc.loss += w * bd.total;
        acc.l_oo += w * bd.l_oo;
        acc.l_nn += w * bd.l_nn;
        on += w * bd.l_on.unwrap_or(0.0);
        no += w * bd.l_no.unwrap_or(0.0);
        acc.l_div += w * bd.l_div;
        acc.accuracy += w * 0.5 * (out.accuracy.0 + out.accuracy.1);
        acc.pairs += b;
    }
    if acc.pairs == 0 {
        return Err(Error::usage("no validation pairs"));
    }
    let n = acc.pairs as f64;
    for x in [&mut acc.loss, &mut acc.l_oo, &mut acc.l_nn, &mut acc.l_div, &mut acc.accuracy] {
        *x /= n;
    }
    if !cfg.baseline {
        acc.l_on = Some(on / n);
        acc.l_no = Some(no / n);
    }
    if !acc.loss.is_finite() {
        return Err(Error::NonFinite(format!("validation loss after step {step}")));
    }
    Ok(acc)
}

/// Appends JSON lines, one write per record so nothing is lost on abort.
struct JsonLog {
    file: File,
    path: PathBuf,
}

impl JsonLog {
    /// Opens `path` keeping only records with `step <= keep_through`.
    fn open(path: PathBuf, keep_through: Option<u64>) -> Result<Self> {
        let kept = match keep_through {
            Some(limit) if path.exists() => {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let mut kept = String::new();
                for line in text.lines() {
                    let value: serde_json::Value = serde_json::from_str(line)
                        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
                    let step = value["step"]
                        .as_u64()
                        .ok_or_else(|| Error::format(format!("{}: record without step", path.display())))?;
                    if step <= limit {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
                kept
            }
            _ => String::new(),
        };
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(JsonLog { file, path })
    }

    fn write(&mut self, record: &impl Serialize) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| Error::format(e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a JSON-lines log written by a run.
pub fn read_log<R: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(format!("{}: {e}", path.display()))))
        .collect()
}

pub const METRICS_LOG: &str = "metrics.log";
pub const VALIDATION_LOG: &str = "validation.log";
pub const TRANSCRIPTS_LOG: &str = "transcripts.log";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.bin";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.bin";

/// How a run starts and where it stops.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Multiplies the learning rate schedule, e.g. 0.2 for continued training.
    pub lr_scale: f64,
    /// Stop after this many completed steps instead of `steps`.
    pub stop_at: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            resume: None,
            lr_scale: 1.0,
            stop_at: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub best: Option<BestRecord>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

/// Trains from scratch or from `opts.resume`, writing logs and checkpoints to
/// `cfg.out_dir`. `on_eval` sees every validation record as it is produced.
pub fn run_pretraining(cfg: &TrainConfig, opts: &RunOptions, mut on_eval: impl FnMut(&EvalRecord, bool)) -> Result<RunSummary> {
    cfg.validate()?;
    if !(opts.lr_scale > 0.0) {
        return Err(Error::usage(format!("lr scale must be positive, got {}", opts.lr_scale)));
    }
    let corpus = Corpus::load(cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut state = match &opts.resume {
        Some(p) => TrainState::from_checkpoint(Checkpoint::load(p)?, cfg)?,
        None => TrainState::init(cfg)?,
    };
    let keep = opts.resume.as_ref().map(|_| state.step);
    let dir = &cfg.out_dir;
    let mut metrics = JsonLog::open(dir.join(METRICS_LOG), keep)?;
    let mut validation = JsonLog::open(dir.join(VALIDATION_LOG), keep)?;
    let mut transcripts = if cfg.transcripts {
        Some(JsonLog::open(dir.join(TRANSCRIPTS_LOG), keep)?)
    } else {
        None
    };
    let valid = validation_batches(cfg, &corpus)?;
    let first_step = state.step;
    let end = opts.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    let last_path = dir.join(LAST_CHECKPOINT);
    let best_path = dir.join(BEST_CHECKPOINT);
    while state.step < end {
        let batch = training_batch(cfg, &corpus, state.step)?;
        let report = train_step(&mut state, &batch, cfg, opts.lr_scale)?;
        metrics.write(&report.metrics)?;
        if let Some(log) = transcripts.as_mut() {
            log.write(&report.transcript)?;
        }
        let scheduled = cfg.valid_interval > 0 && state.step % cfg.valid_interval == 0;
        if scheduled || state.step == cfg.steps {
            let record = evaluate(cfg, &state.params, &valid, state.step)?;
            validation.write(&record)?;
            let improved = state.best.map_or(true, |b| record.loss < b.loss);
            if improved {
                state.best = Some(BestRecord {
                    loss: record.loss,
                    step: state.step,
                });
                state.to_checkpoint().save(&best_path)?;
            }
            state.to_checkpoint().save(&last_path)?;
            on_eval(&record, improved);
        }
    }
    state.to_checkpoint().save(&last_path)?;
    Ok(RunSummary {
        first_step,
        last_step: state.step,
        best: state.best,
        last_checkpoint: last_path,
        best_checkpoint: best_path.exists().then_some(best_path),
    })
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub report: GradCheckReport,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub parameters: usize,
}

/// Compares analytic and central-difference gradients of the full loss in
/// float64 with soft Gumbel selection and every random decision fixed.
pub fn grad_check(cfg: &TrainConfig, eps: f64) -> Result<GradCheck> {
    cfg.validate()?;
    if !(eps > 0.0) {
        return Err(Error::usage(format!("eps must be positive, got {eps}")));
    }
    let model = ModelConfig {
        hard_gumbel: false,
        ..cfg.model.clone()
    };
    let params = model.init_params::<f64>(cfg.seed)?;
    let (b, t) = (cfg.batch_pairs, cfg.crop_samples);
    let frames = model.frames(t)?;
    let mut streams = FamilyStreams::new(cfg.seed);
    let plan = plan_pair(&model, b, frames, true, &mut streams, cfg.pairing)?;
    let mut rng = RngStream::new(cfg.seed, streams::SYNTH);
    let original: Vec<f64> = (0..b * t).map(|_| 0.3 * rng.normal()).collect();
    let noisy: Vec<f64> = original.iter().map(|x| x + 0.1 * rng.normal()).collect();
    let waves = Tensor::from_f64(vec![2 * b, t], &[original, noisy].concat())?;
    let names: Vec<String> = params.names().map(String::from).collect();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let tau = cfg.quantizer.tau0;
    let report = finite_difference_check(
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().map(String::as_str), vars);
            let x = tape.constant(waves.clone());
            Ok(forward_pair(&model, &bound, x, &plan, tau, cfg.objective(), cfg.alpha, cfg.pairing)?.loss)
        },
        &tensors,
        eps,
    )?;
    Ok(GradCheck {
        worst_param: names[report.worst.0].clone(),
        parameters: names.len(),
        report,
    })
}
