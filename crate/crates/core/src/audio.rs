//! Waveform I/O, exact-SNR noise mixing and original/noisy batch construction.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{RandomSource, RngState, RngStream};

/// Mono samples at a fixed rate. Samples decoded from PCM lie in `[-1, 1]`;
/// mixtures may exceed that range since no clipping is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::usage("waveform has no samples"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::domain(format!("waveform sample {i} is not finite")));
        }
        if sample_rate == 0 {
            return Err(Error::usage("sample rate must be positive"));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

fn wav_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e)
            if e.kind() == io::ErrorKind::UnexpectedEof || e.to_string().contains("enough bytes") =>
        {
            Error::format(format!("{}: truncated WAV data", path.display()))
        }
        hound::Error::IoError(e) if e.kind() != io::ErrorKind::InvalidData => Error::io(path, e),
        other => Error::format(format!("{}: {other}", path.display())),
    }
}

/// Reads a RIFF/WAVE file holding 16-bit PCM mono audio; samples become `s / 32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(format!(
            "{}: expected 16-bit PCM, found {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let expected = reader.len() as usize;
    let samples: Vec<f32> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_error(path, e))?;
    if samples.len() != expected {
        return Err(Error::format(format!(
            "{}: truncated WAV data ({} of {} samples)",
            path.display(),
            samples.len(),
            expected
        )));
    }
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Writes 16-bit PCM mono; samples outside `[-1, 1)` saturate. Returns the
/// number of saturated samples.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<usize> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    let mut clipped = 0;
    for &s in &wave.samples {
        let v = (f64::from(s) * 32768.0).round();
        if !(-32768.0..=32767.0).contains(&v) {
            clipped += 1;
        }
        writer
            .write_sample(v.clamp(-32768.0, 32767.0) as i16)
            .map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))?;
    Ok(clipped)
}

/// Mean square of the samples.
pub fn signal_power(samples: &[f32]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::usage("signal power of an empty signal"));
    }
    let sum: f64 = samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
    Ok(sum / samples.len() as f64)
}

/// Gain that puts noise of power `p_noise` at `snr_db` below signal power `p_clean`.
pub fn noise_gain(p_clean: f64, p_noise: f64, snr_db: f64) -> f64 {
    (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `10 log10(p_clean / p_noise)`.
pub fn snr_db(p_clean: f64, p_noise: f64) -> f64 {
    10.0 * (p_clean / p_noise).log10()
}

/// A length-`len` segment of `noise`, tiled end-to-end when the clip is shorter.
pub fn noise_segment(noise: &[f32], len: usize, rng: &mut impl RandomSource) -> Vec<f32> {
    let n = noise.len();
    if n >= len {
        let off = rng.below((n - len + 1) as u64) as usize;
        noise[off..off + len].to_vec()
    } else {
        let off = rng.below(n as u64) as usize;
        (0..len).map(|i| noise[(off + i) % n]).collect()
    }
}

/// Result of mixing one clean signal with one noise segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixed: Waveform,
    pub gain: f64,
    pub snr_db: f64,
}

/// `clean + g * segment` with `g` chosen so the scaled segment sits exactly `snr_db` below `clean`.
pub fn mix_segment(clean: &Waveform, segment: &[f32], snr_db: f64) -> Result<Mixture> {
    if segment.len() != clean.len() {
        return Err(Error::usage(format!(
            "noise segment has {} samples, clean signal {}",
            segment.len(),
            clean.len()
        )));
    }
    let p_clean = signal_power(&clean.samples)?;
    if p_clean == 0.0 {
        return Err(Error::domain("clean signal has zero power"));
    }
    let p_noise = signal_power(segment)?;
    if p_noise == 0.0 {
        return Err(Error::domain("noise segment has zero power"));
    }
    let gain = noise_gain(p_clean, p_noise, snr_db);
    let mixed = clean
        .samples
        .iter()
        .zip(segment)
        .map(|(&c, &n)| (f64::from(c) + gain * f64::from(n)) as f32)
        .collect();
    Ok(Mixture {
        mixed: Waveform::new(mixed, clean.sample_rate)?,
        gain,
        snr_db,
    })
}

/// Mixes `noise` into `clean` at `snr_db`; the noise is cropped (or tiled) at a random offset.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut impl RandomSource) -> Result<Waveform> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::usage(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    let segment = noise_segment(&noise.samples, clean.len(), rng);
    Ok(mix_segment(clean, &segment, snr_db)?.mixed)
}

/// Crop at a random offset, or zero-pad at the end, to exactly `len` samples.
pub fn crop_or_pad(samples: &[f32], len: usize, rng: &mut impl RandomSource) -> Vec<f32> {
    if samples.len() >= len {
        let off = rng.below((samples.len() - len + 1) as u64) as usize;
        samples[off..off + len].to_vec()
    } else {
        let mut out = samples.to_vec();
        out.resize(len, 0.0);
        out
    }
}

/// Noise clips to draw from; all share one sample rate.
#[derive(Clone, Debug)]
pub struct NoiseBank {
    clips: Vec<(String, Waveform)>,
}

impl NoiseBank {
    pub fn new(clips: Vec<(String, Waveform)>) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::usage("noise bank is empty"))?;
        let rate = first.1.sample_rate;
        if let Some((id, w)) = clips.iter().find(|(_, w)| w.sample_rate != rate) {
            return Err(Error::usage(format!(
                "noise clip '{id}' is {} Hz, bank is {rate} Hz",
                w.sample_rate
            )));
        }
        Ok(NoiseBank { clips })
    }

    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let entries = read_manifest(&path)?;
        let clips = load_entries(&entries)?
            .into_iter()
            .zip(&entries)
            .map(|(w, e)| (e.path.display().to_string(), w))
            .collect();
        Self::new(clips)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip(&self, i: usize) -> (&str, &Waveform) {
        let (id, w) = &self.clips[i];
        (id, w)
    }

    pub fn sample_rate(&self) -> u32 {
        self.clips[0].1.sample_rate
    }
}

/// One original example and its noisy copy.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub original: Vec<f32>,
    pub noisy: Vec<f32>,
    pub snr_db: f64,
    pub noise_clip: usize,
    pub gain: f64,
    /// Stream position before any draw for this example; replaying it rebuilds the pair.
    pub seed: RngState,
}

const SILENT_CROP_RETRIES: usize = 8;

/// Builds one pair: crop/pad the utterance, pick a clip and an SNR, mix.
/// An all-zero crop is redrawn up to 8 times; a crop that stays silent is a
/// domain error.
pub fn make_paired_example(
    wave: &Waveform,
    bank: &NoiseBank,
    snr_range: (f64, f64),
    crop_len: usize,
    rng: &mut RngStream,
) -> Result<PairedExample> {
    let (lo, hi) = snr_range;
    if !(lo <= hi) {
        return Err(Error::usage(format!("SNR range [{lo}, {hi}] is empty")));
    }
    if bank.is_empty() {
        return Err(Error::usage("noise bank is empty"));
    }
    if wave.sample_rate != bank.sample_rate() {
        return Err(Error::usage(format!(
            "utterance is {} Hz, noise bank is {} Hz",
            wave.sample_rate,
            bank.sample_rate()
        )));
    }
    let seed = rng.save_state();
    // Short crops can land inside a pause; redraw a few times before giving up.
    let mut original = crop_or_pad(&wave.samples, crop_len, rng);
    for _ in 0..SILENT_CROP_RETRIES {
        if original.iter().any(|&s| s != 0.0) {
            break;
        }
        original = crop_or_pad(&wave.samples, crop_len, rng);
    }
    let noise_clip = rng.below(bank.len() as u64) as usize;
    let snr = rng.uniform_range(lo, hi);
    let segment = noise_segment(&bank.clip(noise_clip).1.samples, crop_len, rng);
    let clean = Waveform::new(original, wave.sample_rate)?;
    let mix = mix_segment(&clean, &segment, snr)?;
    Ok(PairedExample {
        original: clean.samples,
        noisy: mix.mixed.samples,
        snr_db: snr,
        noise_clip,
        gain: mix.gain,
        seed,
    })
}

/// `B` original crops and their independently noised copies.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub examples: Vec<PairedExample>,
    pub crop_len: usize,
    pub sample_rate: u32,
}

impl PairedBatch {
    pub fn batch_size(&self) -> usize {
        self.examples.len()
    }

    /// Original half followed by the noisy half, row-major `[2B, T]`.
    pub fn stacked(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(2 * self.examples.len() * self.crop_len);
        for e in &self.examples {
            out.extend_from_slice(&e.original);
        }
        for e in &self.examples {
            out.extend_from_slice(&e.noisy);
        }
        out
    }

    /// A pair whose noisy half is an exact copy of the original (noise gain 0).
    pub fn without_noise(mut self) -> Self {
        for e in &mut self.examples {
            e.noisy = e.original.clone();
            e.gain = 0.0;
            e.snr_db = f64::INFINITY;
        }
        self
    }
}

/// Duplicates `batch` and applies independently drawn noise to every copy.
pub fn make_paired_batch(
    batch: &[Waveform],
    bank: &NoiseBank,
    snr_range: (f64, f64),
    crop_len: usize,
    rng: &mut RngStream,
) -> Result<PairedBatch> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    if crop_len == 0 {
        return Err(Error::usage("crop length must be positive"));
    }
    let examples = batch
        .iter()
        .map(|w| make_paired_example(w, bank, snr_range, crop_len, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedBatch {
        examples,
        crop_len,
        sample_rate: batch[0].sample_rate,
    })
}

/// One manifest record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub num_samples: usize,
}

/// Parses `path<TAB>num_samples` lines; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (p, n) = line.split_once('\t').ok_or_else(|| {
            Error::format(format!("{}:{}: expected path<TAB>num_samples", path.display(), lineno + 1))
        })?;
        let num_samples = n.trim().parse().map_err(|_| {
            Error::format(format!("{}:{}: bad sample count '{n}'", path.display(), lineno + 1))
        })?;
        let p = Path::new(p);
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            num_samples,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\n", e.path.display(), e.num_samples));
    }
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
}

/// Loads every entry, checking the recorded sample counts.
pub fn load_entries(entries: &[ManifestEntry]) -> Result<Vec<Waveform>> {
    entries
        .iter()
        .map(|e| {
            let w = read_wav(&e.path)?;
            if w.len() != e.num_samples {
                return Err(Error::format(format!(
                    "{}: manifest says {} samples, file has {}",
                    e.path.display(),
                    e.num_samples,
                    w.len()
                )));
            }
            Ok(w)
        })
        .collect()
}
