//! Synthetic tone-plus-babble corpora for smoke runs and tests.
//!
//! An utterance is a chain of short gliding tones with harmonics, separated
//! by occasional pauses. Babble noise is the sum of several such voices.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use crate::audio::{write_manifest, write_wav, ManifestEntry, Waveform};
use crate::error::{Error, Result};
use crate::rng::{streams, RandomSource, RngStream};

/// Size and timing of a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub sample_rate: u32,
    /// Training utterances are added until their total reaches this length.
    pub train_secs: f64,
    pub valid_utterances: usize,
    pub noise_clips: usize,
    pub noise_secs: f64,
    /// Utterance lengths are uniform in this range.
    pub utterance_secs: (f64, f64),
    /// Tone segment lengths are uniform in this range.
    pub segment_ms: (f64, f64),
    /// Voices summed into one babble clip.
    pub babble_voices: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            sample_rate: 16_000,
            train_secs: 150.0,
            valid_utterances: 8,
            noise_clips: 6,
            noise_secs: 5.0,
            utterance_secs: (2.0, 4.0),
            segment_ms: (30.0, 120.0),
            babble_voices: 6,
        }
    }
}

/// Gliding tones with three harmonics, `len` samples long, peak below 1.
pub fn tone_sequence(len: usize, sample_rate: u32, segment_ms: (f64, f64), rng: &mut impl RandomSource) -> Vec<f32> {
    let sr = f64::from(sample_rate);
    let fade = (0.005 * sr) as usize;
    let mut out = Vec::with_capacity(len);
    let mut phase = 0.0f64;
    while out.len() < len {
        let seg = ((rng.uniform_range(segment_ms.0, segment_ms.1) / 1000.0) * sr) as usize;
        let seg = seg.max(1).min(len - out.len());
        if rng.bernoulli(0.15) {
            out.extend(std::iter::repeat(0.0).take(seg));
            continue;
        }
        let f0 = 150.0 * (2000.0f64 / 150.0).powf(rng.uniform());
        let f1 = f0 * 2f64.powf(rng.uniform_range(-0.5, 0.5));
        let amp = rng.uniform_range(0.1, 0.45);
        let weights = [1.0, rng.uniform_range(0.0, 0.6), rng.uniform_range(0.0, 0.3)];
        let norm: f64 = weights.iter().sum();
        for i in 0..seg {
            let frac = i as f64 / seg as f64;
            let f = f0 * (f1 / f0).powf(frac);
            phase = (phase + TAU * f / sr) % TAU;
            let edge = (i.min(seg - 1 - i) as f64 / fade.max(1) as f64).min(1.0);
            let env = amp * 0.5 * (1.0 - (std::f64::consts::PI * edge).cos());
            let s: f64 = weights
                .iter()
                .enumerate()
                .map(|(h, w)| w * ((h + 1) as f64 * phase).sin())
                .sum();
            out.push((env * s / norm) as f32);
        }
    }
    out
}

/// Several independent tone voices summed and rescaled to stay in range.
pub fn babble(len: usize, sample_rate: u32, voices: usize, segment_ms: (f64, f64), rng: &mut impl RandomSource) -> Vec<f32> {
    let mut out = vec![0.0f32; len];
    let scale = 1.0 / (voices.max(1) as f32).sqrt();
    for _ in 0..voices.max(1) {
        for (o, s) in out.iter_mut().zip(tone_sequence(len, sample_rate, segment_ms, rng)) {
            *o += s * scale;
        }
    }
    let peak = out.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak > 0.99 {
        out.iter_mut().for_each(|s| *s *= 0.99 / peak);
    }
    out
}

/// Manifests of a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train_manifest: PathBuf,
    /// `None` when no validation utterances were requested.
    pub valid_manifest: Option<PathBuf>,
    pub noise_manifest: PathBuf,
    pub train_secs: f64,
}

fn write_set(dir: &Path, name: &str, clips: Vec<Vec<f32>>, sample_rate: u32) -> Result<PathBuf> {
    let sub = dir.join(name);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, samples) in clips.into_iter().enumerate() {
        let rel = PathBuf::from(name).join(format!("{name}_{i:04}.wav"));
        let wave = Waveform::new(samples, sample_rate)?;
        write_wav(dir.join(&rel), &wave)?;
        entries.push(ManifestEntry {
            path: rel,
            num_samples: wave.len(),
        });
    }
    let manifest = dir.join(format!("{name}.tsv"));
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Writes train, validation and noise sets under `dir`, each with a manifest.
pub fn write_corpus(dir: impl AsRef<Path>, spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    let dir = dir.as_ref();
    let (lo, hi) = spec.utterance_secs;
    if !(lo > 0.0 && lo <= hi) || spec.train_secs <= 0.0 || spec.noise_clips == 0 {
        return Err(Error::usage("synthetic corpus needs positive lengths and at least one noise clip"));
    }
    let sr = spec.sample_rate;
    let mut rng = RngStream::new(seed, streams::SYNTH);
    let utterance = |rng: &mut RngStream| {
        let len = (rng.uniform_range(lo, hi) * f64::from(sr)) as usize;
        tone_sequence(len, sr, spec.segment_ms, rng)
    };
    let mut train = Vec::new();
    let mut total = 0usize;
    while (total as f64) < spec.train_secs * f64::from(sr) {
        let u = utterance(&mut rng);
        total += u.len();
        train.push(u);
    }
    let valid: Vec<_> = (0..spec.valid_utterances).map(|_| utterance(&mut rng)).collect();
    let noise_len = (spec.noise_secs * f64::from(sr)) as usize;
    let noise: Vec<_> = (0..spec.noise_clips)
        .map(|_| babble(noise_len, sr, spec.babble_voices, spec.segment_ms, &mut rng))
        .collect();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(SynthCorpus {
        train_manifest: write_set(dir, "train", train, sr)?,
        valid_manifest: if spec.valid_utterances > 0 {
            Some(write_set(dir, "valid", valid, sr)?)
        } else {
            None
        },
        noise_manifest: write_set(dir, "noise", noise, sr)?,
        train_secs: total as f64 / f64::from(sr),
    })
}
