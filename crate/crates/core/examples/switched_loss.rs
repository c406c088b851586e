//! One paired forward pass through the full network on a noisy copy of a
//! tone sequence: the four contrastive terms and how lambda weighs them.

use switched_contrastive::audio::{mix_at_snr, Waveform};
use switched_contrastive::model::{forward_pair, plan_pair, ModelConfig, Objective};
use switched_contrastive::pairing::{FamilyStreams, PairingMode};
use switched_contrastive::rng::RngStream;
use switched_contrastive::synth::{babble, tone_sequence};
use switched_contrastive::tensor::{Tape, Tensor};

fn main() -> switched_contrastive::Result<()> {
    let cfg = ModelConfig::default();
    let params = cfg.init_params::<f32>(0)?;
    let (rate, t) = (16_000, 16_000);
    let mut rng = RngStream::new(4, 0);
    let clean = Waveform::new(tone_sequence(t, rate, (30.0, 120.0), &mut rng), rate)?;
    let noise = Waveform::new(babble(t, rate, 6, (30.0, 120.0), &mut rng), rate)?;
    let noisy = mix_at_snr(&clean, &noise, 7.5, &mut rng)?;
    let waves = Tensor::new(vec![2, t], [clean.samples(), noisy.samples()].concat())?;

    let frames = cfg.frames(t)?;
    let plan = plan_pair(&cfg, 1, frames, true, &mut FamilyStreams::new(4), PairingMode::all_on())?;
    for objective in [Objective::Baseline, Objective::Switched { lambda: 0.0 }, Objective::Switched { lambda: 0.3 }, Objective::Switched { lambda: 1.0 }] {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let out = forward_pair(&cfg, &bound, tape.constant(waves.clone()), &plan, 2.0, objective, 0.1, PairingMode::all_on())?;
        let b = out.breakdown;
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{objective:?}: l_oo {:.4} l_nn {:.4} l_on {} l_no {} div {:.4} total {:.4}",
            b.l_oo,
            b.l_nn,
            opt(b.l_on),
            opt(b.l_no),
            b.l_div,
            b.total
        );
    }
    Ok(())
}
