//! Gumbel product quantization of random latents at a few temperatures,
//! with the diversity term and codebook perplexity.

use switched_contrastive::context::MaskSpec;
use switched_contrastive::params::ParamSet;
use switched_contrastive::quantizer::{anneal_tau, diversity_loss, quantize, Codebook, QuantizerConfig};
use switched_contrastive::rng::{RandomSource, RngStream};
use switched_contrastive::tensor::{Tape, Tensor};

fn main() -> switched_contrastive::Result<()> {
    let cb = Codebook::default();
    let (b, t, d) = (2, 50, 64);
    let mut rng = RngStream::new(3, 0);
    let mut params = ParamSet::<f64>::new();
    cb.init_params(d, &mut params, &mut rng);
    let z = Tensor::new(vec![b, t, d], (0..b * t * d).map(|_| rng.normal()).collect())?;
    let noise = Tensor::new(vec![b, t, cb.groups, cb.entries], cb.draw_noise(b * t, &mut rng))?;
    let all = MaskSpec::new(t, vec![(0..t).collect(); b])?;

    let schedule = QuantizerConfig::default();
    for step in [0, 1000, 10_000, 100_000] {
        let tau = anneal_tau(step, &schedule);
        let tape = Tape::new();
        let out = quantize(tape.constant(z.clone()), &cb, &params.bind(&tape, false), tau, &noise, true)?;
        let div = diversity_loss(out.probs, &all)?;
        let mut used = out.indices.clone();
        used.sort_unstable();
        used.dedup();
        println!(
            "step {step:>6}: tau {tau:.3}  diversity {:.4}  perplexity {:?}  distinct entries {}",
            div.loss.value().item(),
            div.perplexity.iter().map(|p| format!("{p:.1}")).collect::<Vec<_>>(),
            used.len()
        );
    }
    Ok(())
}
