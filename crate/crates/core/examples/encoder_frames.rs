//! Frame geometry of the convolutional encoder and one forward pass.

use switched_contrastive::encoder::{encode, output_length, EncoderConfig};
use switched_contrastive::params::ParamSet;
use switched_contrastive::rng::RngStream;
use switched_contrastive::synth::tone_sequence;
use switched_contrastive::tensor::{Tape, Tensor};

fn main() -> switched_contrastive::Result<()> {
    for (name, cfg) in [("desk", EncoderConfig::default()), ("base", EncoderConfig::base())] {
        println!(
            "{name}: hop {} samples, receptive field {}, width {}, 1 s -> {} frames",
            cfg.hop(),
            cfg.receptive_field(),
            cfg.dim(),
            output_length(16_000, &cfg)?
        );
    }
    let cfg = EncoderConfig::default();
    let mut params = ParamSet::<f32>::new();
    cfg.init_params(&mut params, &mut RngStream::new(0, 0));
    let wave = tone_sequence(8000, 16_000, (30.0, 120.0), &mut RngStream::new(1, 1));
    let tape = Tape::new();
    let z = encode(tape.constant(Tensor::new(vec![1, 8000], wave)?), &cfg, &params.bind(&tape, false))?;
    println!("0.5 s of audio encodes to {:?}", z.shape());
    match output_length(100, &cfg) {
        Err(e) => println!("too short: {e}"),
        Ok(n) => println!("unexpected {n} frames"),
    }
    Ok(())
}
