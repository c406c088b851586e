//! Product quantization of latent frames with Gumbel-softmax selection.

use crate::context::MaskSpec;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::RandomSource;
use crate::tensor::{gumbel_from_uniform, gumbel_softmax_st, Scalar, Tensor, Var};

/// Shape of the product codebook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Codebook {
    /// Number of groups `G`.
    pub groups: usize,
    /// Entries per group `V`.
    pub entries: usize,
    /// Concatenated codeword width `e`; each group contributes `e / G`.
    pub codeword_dim: usize,
    /// Width `d_q` of the projected targets.
    pub out_dim: usize,
}

impl Default for Codebook {
    fn default() -> Self {
        Codebook {
            groups: 2,
            entries: 40,
            codeword_dim: 64,
            out_dim: 64,
        }
    }
}

impl Codebook {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.codeword_dim % self.groups != 0 {
            return Err(Error::usage(format!(
                "codeword width {} is not divisible into {} groups",
                self.codeword_dim, self.groups
            )));
        }
        if self.entries < 2 {
            return Err(Error::usage(format!("codebook needs at least 2 entries per group, got {}", self.entries)));
        }
        if self.out_dim == 0 {
            return Err(Error::usage("quantizer output width must be positive"));
        }
        Ok(())
    }

    pub fn param_shapes(&self, input_dim: usize) -> Vec<(String, Vec<usize>)> {
        let gv = self.groups * self.entries;
        vec![
            ("quantizer.logits.weight".into(), vec![input_dim, gv]),
            ("quantizer.logits.bias".into(), vec![gv]),
            (
                "quantizer.codebook".into(),
                vec![self.groups, self.entries, self.codeword_dim / self.groups],
            ),
            ("quantizer.out.weight".into(), vec![self.codeword_dim, self.out_dim]),
            ("quantizer.out.bias".into(), vec![self.out_dim]),
        ]
    }

    pub fn init_params<T: Scalar>(&self, input_dim: usize, params: &mut ParamSet<T>, rng: &mut impl RandomSource) {
        for (name, shape) in self.param_shapes(input_dim) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match name.as_str() {
                "quantizer.codebook" => (0..n).map(|_| T::of(rng.uniform())).collect(),
                n_ if n_.ends_with(".bias") => vec![T::zero(); n],
                _ => {
                    let std = (1.0 / shape[0] as f64).sqrt();
                    (0..n).map(|_| T::of(std * rng.normal())).collect()
                }
            };
            params.insert(name, Tensor::from_parts(shape, data));
        }
    }

    /// Standard Gumbel noise for `frames` frames, `[frames, G, V]` in draw order.
    pub fn draw_noise(&self, frames: usize, rng: &mut impl RandomSource) -> Vec<f64> {
        (0..frames * self.groups * self.entries)
            .map(|_| gumbel_from_uniform(rng.uniform_open()))
            .collect()
    }
}

/// Temperature schedule `tau = max(tau_min, tau0 * decay^step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerConfig {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            tau0: 2.0,
            tau_min: 0.5,
            decay: 0.999,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau0 >= self.tau_min) {
            return Err(Error::usage(format!(
                "need tau0 >= tau_min > 0, got tau0 = {}, tau_min = {}",
                self.tau0, self.tau_min
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::usage(format!("tau decay must lie in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }
}

pub fn anneal_tau(step: u64, cfg: &QuantizerConfig) -> f64 {
    let exp = i32::try_from(step).unwrap_or(i32::MAX);
    (cfg.tau0 * cfg.decay.powi(exp)).max(cfg.tau_min)
}

/// Output of [`quantize`].
pub struct Quantized<'t, T: Scalar> {
    /// `[B, T', d_q]`
    pub q: Var<'t, T>,
    /// Soft selection probabilities, `[B, T', G, V]`.
    pub probs: Var<'t, T>,
    /// Selected entry per frame and group, `[B, T', G]` flattened.
    pub indices: Vec<usize>,
}

/// Quantizes `[B, T', d]` latents. `noise` has shape `[B, T', G, V]`.
pub fn quantize<'t, T: Scalar>(
    z: Var<'t, T>,
    codebook: &Codebook,
    params: &Bound<'t, T>,
    tau: f64,
    noise: &Tensor<T>,
    hard: bool,
) -> Result<Quantized<'t, T>> {
    codebook.validate()?;
    let shape = z.shape();
    if shape.len() != 3 {
        return Err(Error::usage(format!("quantizer input must be [B, T', d], got {shape:?}")));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let (g, v) = (codebook.groups, codebook.entries);
    let n = b * t;
    if noise.shape() != [b, t, g, v] {
        return Err(Error::usage(format!(
            "gumbel noise shape {:?} does not match [{b}, {t}, {g}, {v}]",
            noise.shape()
        )));
    }
    let logits = z
        .reshape(&[n, d])?
        .matmul(params.get("quantizer.logits.weight")?)?
        .add_bias(params.get("quantizer.logits.bias")?)?
        .reshape(&[n, g, v])?;
    let (selected, soft) = gumbel_softmax_st(logits, tau, &noise.reshape(vec![n, g, v])?, hard)?;
    let indices = soft
        .value()
        .data()
        .chunks(v)
        .map(crate::tensor::argmax)
        .collect();
    let codewords = selected
        .permute(&[1, 0, 2])?
        .bmm(params.get("quantizer.codebook")?, false)?
        .permute(&[1, 0, 2])?
        .reshape(&[n, codebook.codeword_dim])?;
    let q = codewords
        .matmul(params.get("quantizer.out.weight")?)?
        .add_bias(params.get("quantizer.out.bias")?)?
        .reshape(&[b, t, codebook.out_dim])?;
    Ok(Quantized {
        q,
        probs: soft.reshape(&[b, t, g, v])?,
        indices,
    })
}

/// Diversity term and the per-group perplexities it was built from.
pub struct Diversity<'t, T: Scalar> {
    pub loss: Var<'t, T>,
    pub perplexity: Vec<f64>,
}

/// `-(1 / GV) * sum_g exp(H(p_bar_g))`, with `p_bar` averaged over masked frames.
pub fn diversity_loss<'t, T: Scalar>(probs: Var<'t, T>, mask: &MaskSpec) -> Result<Diversity<'t, T>> {
    let shape = probs.shape();
    if shape.len() != 4 {
        return Err(Error::usage(format!("probs must be [B, T', G, V], got {shape:?}")));
    }
    let (b, t, g, v) = (shape[0], shape[1], shape[2], shape[3]);
    if mask.batch() != b || mask.frames() != t {
        return Err(Error::usage(format!(
            "mask for {} x {} frames applied to probs {shape:?}",
            mask.batch(),
            mask.frames()
        )));
    }
    let rows = mask.flat_indices();
    if rows.is_empty() {
        return Err(Error::usage("diversity loss needs at least one masked frame"));
    }
    let p_bar = probs
        .reshape(&[b * t, g, v])?
        .gather_rows(&rows)?
        .mean_rows()?;
    let perplexity = p_bar.xlogx().sum_last()?.neg().exp();
    let perplexity_values = perplexity.value().data().iter().map(|p| p.as_f64()).collect();
    let loss = perplexity.sum().scale(T::of(-1.0 / (g * v) as f64));
    Ok(Diversity {
        loss,
        perplexity: perplexity_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn anneal_examples() {
        let cfg = QuantizerConfig::default();
        assert_eq!(anneal_tau(0, &cfg), 2.0);
        let flat = QuantizerConfig { decay: 1.0, ..cfg };
        assert_eq!(anneal_tau(12345, &flat), 2.0);
        assert_eq!(anneal_tau(2000, &cfg), 0.5);
        assert!(2.0 * 0.999f64.powi(2000) < 0.28);
    }

    fn div(p: &[f64], g: usize, v: usize) -> f64 {
        let tape = Tape::<f64>::new();
        let probs = tape.constant(Tensor::from_f64([1, 1, g, v], p).unwrap());
        let mask = MaskSpec::new(1, vec![vec![0]]).unwrap();
        diversity_loss(probs, &mask).unwrap().loss.value().item()
    }

    #[test]
    fn diversity_examples() {
        assert!((div(&[0.25; 8], 2, 4) + 1.0).abs() < 1e-12);
        assert_eq!(div(&[0.0, 1.0, 0.0, 0.0], 1, 4), -0.25);
        assert!((div(&[0.5, 0.5, 0.0, 0.0], 1, 4) + 0.5).abs() < 1e-12);
    }
}
