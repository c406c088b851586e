use std::path::Path;

use switched_contrastive::audio::*;
use switched_contrastive::rng::{RandomSource, RngStream};
use switched_contrastive::Error;

fn write_pcm16(path: &Path, channels: u16, samples: &[i16]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

fn tone(n: usize, f: f64, amp: f64) -> Waveform {
    let s = (0..n)
        .map(|i| (amp * (std::f64::consts::TAU * f * i as f64 / 16_000.0).sin()) as f32)
        .collect();
    Waveform::new(s, 16_000).unwrap()
}

fn noise(n: usize, seed: u64, amp: f64) -> Waveform {
    let mut rng = RngStream::new(seed, 99);
    Waveform::new((0..n).map(|_| (amp * rng.normal()) as f32).collect(), 16_000).unwrap()
}

#[test]
fn pcm16_decoding_examples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wav");
    write_pcm16(&p, 1, &[0, -32768, 16384, 32767]);
    let w = read_wav(&p).unwrap();
    assert_eq!(w.sample_rate(), 16_000);
    assert_eq!(w.samples()[..3], [0.0, -1.0, 0.5]);
    assert_eq!(w.samples()[3], 32767.0 / 32768.0);
}

#[test]
fn wav_format_violations() {
    let dir = tempfile::tempdir().unwrap();
    let stereo = dir.path().join("s.wav");
    write_pcm16(&stereo, 2, &[1, 2, 3, 4]);
    match read_wav(&stereo) {
        Err(Error::Format(msg)) => assert!(msg.contains("channel"), "{msg}"),
        other => panic!("expected format error, got {other:?}"),
    }

    let float = dir.path().join("f.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(&float, spec).unwrap();
    w.write_sample(0.25f32).unwrap();
    w.finalize().unwrap();
    assert!(matches!(read_wav(&float), Err(Error::Format(_))));

    let good = dir.path().join("g.wav");
    write_pcm16(&good, 1, &[7; 100]);
    let bytes = std::fs::read(&good).unwrap();
    let cut = dir.path().join("t.wav");
    std::fs::write(&cut, &bytes[..bytes.len() - 51]).unwrap();
    match read_wav(&cut) {
        Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
        other => panic!("expected format error, got {other:?}"),
    }
    std::fs::write(&cut, &bytes[..20]).unwrap();
    assert!(matches!(read_wav(&cut), Err(Error::Format(_))));
}

#[test]
fn wav_round_trip_within_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.wav");
    let w = tone(500, 440.0, 0.7);
    assert_eq!(write_wav(&p, &w).unwrap(), 0);
    let back = read_wav(&p).unwrap();
    for (a, b) in w.samples().iter().zip(back.samples()) {
        assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-7);
    }
}

#[test]
fn power_examples() {
    assert_eq!(signal_power(&[0.0; 8]).unwrap(), 0.0);
    assert_eq!(signal_power(&[0.5; 3]).unwrap(), 0.25);
    assert_eq!(signal_power(&[1.0, -1.0, 1.0, -1.0]).unwrap(), 1.0);
    assert!(matches!(signal_power(&[]), Err(Error::Usage(_))));
}

#[test]
fn gain_examples() {
    assert_eq!(noise_gain(0.3, 0.3, 0.0), 1.0);
    assert!((noise_gain(0.3, 0.3, 10.0) - 0.316_227_8).abs() < 1e-7);
}

#[test]
fn zero_power_inputs_are_domain_errors() {
    let mut rng = RngStream::new(0, 0);
    let silent = Waveform::new(vec![0.0; 100], 16_000).unwrap();
    let c = tone(100, 300.0, 0.5);
    assert!(matches!(mix_at_snr(&c, &silent, 5.0, &mut rng), Err(Error::Domain(_))));
    assert!(matches!(mix_at_snr(&silent, &c, 5.0, &mut rng), Err(Error::Domain(_))));
}

#[test]
fn realized_snr_is_exact() {
    let mut rng = RngStream::new(4, 1);
    for i in 0..200 {
        let clean = tone(800 + i, 200.0 + i as f64, 0.1 + 0.004 * i as f64);
        let n = noise(300 + 7 * i, i as u64, 0.05 + 0.01 * (i % 9) as f64);
        let snr = rng.uniform_range(0.0, 20.0);
        let seg = noise_segment(n.samples(), clean.len(), &mut rng);
        let mix = mix_segment(&clean, &seg, snr).unwrap();
        // The gain is exact in float64.
        let p_c = signal_power(clean.samples()).unwrap();
        let p_n = signal_power(&seg).unwrap();
        let exact = snr_db(p_c, mix.gain * mix.gain * p_n);
        assert!((exact - snr).abs() < 1e-6, "{exact} vs {snr}");
        // The float32 mixture re-measures within 0.01 dB.
        let residual: Vec<f32> = mix.mixed.samples().iter().zip(clean.samples()).map(|(m, c)| m - c).collect();
        let measured = snr_db(p_c, signal_power(&residual).unwrap());
        assert!((measured - snr).abs() < 1e-2, "{measured} vs {snr}");
    }
}

#[test]
fn paired_batch_is_deterministic_and_leaves_originals_alone() {
    let utts = vec![tone(20_000, 300.0, 0.3), tone(9_000, 500.0, 0.2)];
    let before = utts.clone();
    let bank = NoiseBank::new(vec![("n0".into(), noise(5_000, 1, 0.1)), ("n1".into(), noise(30_000, 2, 0.2))]).unwrap();
    let make = || make_paired_batch(&utts, &bank, (5.0, 10.0), 16_000, &mut RngStream::new(8, 3)).unwrap();
    let a = make();
    let b = make();
    assert_eq!(a, b);
    assert_eq!(utts, before);
    for (ex, w) in a.examples.iter().zip(&utts) {
        assert_eq!(ex.original.len(), 16_000);
        assert_eq!(ex.noisy.len(), 16_000);
        assert!((5.0..=10.0).contains(&ex.snr_db));
        // Replaying the recorded seed reproduces the crop exactly.
        let mut rng = RngStream::from_state(ex.seed);
        let again = make_paired_example(w, &bank, (5.0, 10.0), 16_000, &mut rng).unwrap();
        assert_eq!(&again, ex);
        assert_ne!(ex.original, ex.noisy);
    }
    // The second utterance is shorter than the crop: zero padded, original samples untouched.
    let short = &a.examples[1].original;
    assert_eq!(short.iter().filter(|&&s| s != 0.0).count(), utts[1].samples().iter().filter(|&&s| s != 0.0).count());
}

#[test]
fn bank_errors() {
    let utts = vec![tone(2_000, 300.0, 0.3)];
    assert!(matches!(NoiseBank::new(vec![]), Err(Error::Usage(_))));
    let silent = NoiseBank::new(vec![("z".into(), Waveform::new(vec![0.0; 4_000], 16_000).unwrap())]).unwrap();
    let r = make_paired_batch(&utts, &silent, (5.0, 10.0), 1_000, &mut RngStream::new(0, 0));
    assert!(matches!(r, Err(Error::Domain(_))));
}

#[test]
fn snr_draws_are_uniform() {
    let utts: Vec<Waveform> = (0..10).map(|i| tone(1_200, 200.0 + 50.0 * i as f64, 0.3)).collect();
    let bank = NoiseBank::new(vec![("n".into(), noise(3_000, 5, 0.1))]).unwrap();
    let mut rng = RngStream::new(21, 7);
    let mut draws = Vec::with_capacity(10_000);
    while draws.len() < 10_000 {
        let batch = make_paired_batch(&utts, &bank, (5.0, 10.0), 1_000, &mut rng).unwrap();
        draws.extend(batch.examples.iter().map(|e| e.snr_db));
    }
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - 5.0) / 5.0;
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
}

#[test]
fn manifest_round_trip_and_sample_counts() {
    let dir = tempfile::tempdir().unwrap();
    let w = tone(321, 250.0, 0.4);
    write_wav(dir.path().join("x.wav"), &w).unwrap();
    let entries = vec![ManifestEntry {
        path: "x.wav".into(),
        num_samples: 321,
    }];
    let m = dir.path().join("m.tsv");
    write_manifest(&m, &entries).unwrap();
    let read = read_manifest(&m).unwrap();
    assert_eq!(read[0].path, dir.path().join("x.wav"));
    assert_eq!(load_entries(&read).unwrap()[0].len(), 321);
    std::fs::write(&m, "x.wav\t999\n").unwrap();
    assert!(matches!(load_entries(&read_manifest(&m).unwrap()), Err(Error::Format(_))));
    std::fs::write(&m, "x.wav 321\n").unwrap();
    assert!(matches!(read_manifest(&m), Err(Error::Format(_))));
}
