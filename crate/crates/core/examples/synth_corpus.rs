//! Writes a small synthetic corpus (tone sequences for speech, babble for
//! noise) and prints what landed on disk.

use switched_contrastive::audio::read_manifest;
use switched_contrastive::synth::{write_corpus, SynthSpec};

fn main() -> switched_contrastive::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "target/example-corpus".into());
    let spec = SynthSpec {
        train_secs: 30.0,
        ..SynthSpec::default()
    };
    let corpus = write_corpus(&dir, &spec, 0)?;
    for (name, path) in [("train", Some(&corpus.train_manifest)), ("valid", corpus.valid_manifest.as_ref()), ("noise", Some(&corpus.noise_manifest))] {
        let Some(path) = path else { continue };
        let entries = read_manifest(path)?;
        let samples: usize = entries.iter().map(|e| e.num_samples).sum();
        println!(
            "{name:<6} {:>3} files, {:>6.1} s  ({})",
            entries.len(),
            samples as f64 / f64::from(spec.sample_rate),
            path.display()
        );
    }
    Ok(())
}
