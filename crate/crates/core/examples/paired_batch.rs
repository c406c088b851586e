//! Builds an original/noisy batch and rebuilds one pair from the stream
//! position recorded with it.

use switched_contrastive::audio::{make_paired_batch, make_paired_example, NoiseBank, Waveform};
use switched_contrastive::rng::{streams, RngStream};
use switched_contrastive::synth::{babble, tone_sequence};

fn main() -> switched_contrastive::Result<()> {
    let rate = 16_000;
    let mut gen = RngStream::new(2, streams::SYNTH);
    let utterances = (0..3)
        .map(|_| Waveform::new(tone_sequence(40_000, rate, (30.0, 120.0), &mut gen), rate))
        .collect::<Result<Vec<_>, _>>()?;
    let bank = NoiseBank::new(vec![
        ("cafe".into(), Waveform::new(babble(30_000, rate, 6, (30.0, 120.0), &mut gen), rate)?),
        ("hall".into(), Waveform::new(babble(30_000, rate, 3, (30.0, 120.0), &mut gen), rate)?),
    ])?;

    let mut rng = RngStream::new(2, streams::data(0, 0));
    let batch = make_paired_batch(&utterances, &bank, (5.0, 10.0), 16_000, &mut rng)?;
    for (i, e) in batch.examples.iter().enumerate() {
        println!("pair {i}: clip {} at {:.2} dB, gain {:.4}", bank.clip(e.noise_clip).0, e.snr_db, e.gain);
    }
    println!("stacked input holds {} samples ([2B, T])", batch.stacked().len());

    let first = &batch.examples[0];
    let mut replay = RngStream::from_state(first.seed);
    let again = make_paired_example(&utterances[0], &bank, (5.0, 10.0), 16_000, &mut replay)?;
    println!("replayed pair 0 identical: {}", &again == first);
    Ok(())
}
