//! Mixes babble into a tone sequence at several SNRs and re-measures each
//! mixture from its samples.

use switched_contrastive::audio::{mix_at_snr, signal_power, snr_db, Waveform};
use switched_contrastive::rng::RngStream;
use switched_contrastive::synth::{babble, tone_sequence};

fn main() -> switched_contrastive::Result<()> {
    let rate = 16_000;
    let mut rng = RngStream::new(1, 0);
    let clean = Waveform::new(tone_sequence(2 * rate as usize, rate, (30.0, 120.0), &mut rng), rate)?;
    let noise = Waveform::new(babble(rate as usize, rate, 6, (30.0, 120.0), &mut rng), rate)?;
    println!("requested   measured");
    for target in [0.0, 5.0, 7.5, 10.0, 20.0] {
        let mixed = mix_at_snr(&clean, &noise, target, &mut rng)?;
        let residual: Vec<f32> = mixed.samples().iter().zip(clean.samples()).map(|(m, c)| m - c).collect();
        let measured = snr_db(signal_power(clean.samples())?, signal_power(&residual)?);
        println!("{target:>6.1} dB  {measured:>8.4} dB");
    }
    Ok(())
}
