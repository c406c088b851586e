use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use switched_contrastive::audio::{read_wav, signal_power, snr_db, write_wav, Waveform};
use switched_contrastive::rng::{RandomSource, RngStream};
use switched_contrastive::synth::{write_corpus, SynthSpec};

fn swc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_cfg() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.cfg").display().to_string()
}

fn tone(path: &Path, len: usize, seed: u64, amp: f64) {
    let mut rng = RngStream::new(seed, 0);
    let samples = (0..len).map(|_| (amp * rng.normal()).clamp(-0.9, 0.9) as f32).collect();
    write_wav(path, &Waveform::new(samples, 16_000).unwrap()).unwrap();
}

#[test]
fn exit_codes() {
    assert_eq!(swc(&["pretrain", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(swc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(swc(&["pretrain", "--config", "/missing/file.cfg"]).status.code(), Some(2));
    assert_eq!(
        swc(&["eval-loss", "--config", &tiny_cfg(), "--set", "lambda=-1", "--checkpoint", "x"]).status.code(),
        Some(1)
    );
    assert_eq!(swc(&["inspect-checkpoint", "/missing/ck.bin"]).status.code(), Some(2));
}

#[test]
fn grad_check_passes_on_tiny_config() {
    let out = swc(&["grad-check", "--config", &tiny_cfg()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));
    let strict = swc(&["grad-check", "--config", &tiny_cfg(), "--tolerance", "1e-30"]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(stdout(&strict).contains("FAIL"));
}

#[test]
fn mix_noise_hits_requested_snr() {
    let dir = tempfile::tempdir().unwrap();
    let (a, n, m) = (dir.path().join("a.wav"), dir.path().join("n.wav"), dir.path().join("m.wav"));
    tone(&a, 16_000, 1, 0.1);
    tone(&n, 7_000, 2, 0.05);
    let out = swc(&[
        "mix-noise",
        "--in",
        a.to_str().unwrap(),
        "--noise",
        n.to_str().unwrap(),
        "--snr",
        "10",
        "--seed",
        "1",
        "--out",
        m.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let clean = read_wav(&a).unwrap();
    let mixed = read_wav(&m).unwrap();
    assert_eq!(mixed.len(), clean.len());
    let residual: Vec<f32> = mixed.samples().iter().zip(clean.samples()).map(|(x, c)| x - c).collect();
    let realized = snr_db(signal_power(clean.samples()).unwrap(), signal_power(&residual).unwrap());
    assert!((realized - 10.0).abs() < 0.01, "{realized}");
}

fn corpus(dir: &Path) -> Vec<String> {
    let spec = SynthSpec {
        train_secs: 3.0,
        valid_utterances: 2,
        noise_clips: 2,
        noise_secs: 1.0,
        ..SynthSpec::default()
    };
    let c = write_corpus(dir.join("data"), &spec, 9).unwrap();
    let set = |k: &str, p: &PathBuf| format!("{k}={}", p.display());
    vec![
        "--config".into(),
        tiny_cfg(),
        "--set".into(),
        set("train_manifest", &c.train_manifest),
        "--set".into(),
        set("valid_manifest", c.valid_manifest.as_ref().unwrap()),
        "--set".into(),
        set("noise_manifest", &c.noise_manifest),
        "--set".into(),
        "crop_samples=400".into(),
    ]
}

#[test]
fn pretrain_then_inspect_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let common = corpus(dir.path());
    let run = dir.path().join("run");
    let mut args: Vec<String> = vec!["pretrain".into()];
    args.extend(common.iter().cloned());
    args.extend(["--steps", "2", "--transcripts", "--pair-dropout", "off", "--out-dir"].map(String::from));
    args.push(run.display().to_string());
    let out = swc(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("trained steps 0..2"));
    assert!(run.join("transcripts.log").exists());

    let ck = run.join("checkpoint_last.bin");
    let info = swc(&["inspect-checkpoint", ck.to_str().unwrap(), "--tensors"]);
    assert_eq!(info.status.code(), Some(0));
    let text = stdout(&info);
    assert!(text.contains("step        2"));
    assert!(text.contains("quantizer.codebook"));

    let mut args: Vec<String> = vec!["eval-loss".into()];
    args.extend(common);
    args.extend(["--checkpoint".to_string(), ck.display().to_string()]);
    let eval = swc(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let record: serde_json::Value = serde_json::from_str(stdout(&eval).trim()).unwrap();
    assert_eq!(record["step"], 2);
    assert!(record["loss"].as_f64().unwrap().is_finite());
}
