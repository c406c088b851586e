//! Strided convolution stack from raw waveform to latent frames.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::RandomSource;
use crate::tensor::{Conv1dSpec, Scalar, Tensor, Var};

/// One convolution block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvLayer {
            channels,
            kernel,
            stride,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: Vec<ConvLayer>,
    pub activation: Activation,
    /// Group norm after the first block, with this many groups.
    pub group_norm_groups: Option<usize>,
    /// Layer norm over the channels of every output frame.
    pub feature_layer_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: vec![ConvLayer::new(64, 10, 5), ConvLayer::new(64, 8, 4), ConvLayer::new(64, 4, 2)],
            activation: Activation::Gelu,
            group_norm_groups: Some(16),
            feature_layer_norm: true,
        }
    }
}

impl EncoderConfig {
    /// The seven-block stack of the 95M-parameter reference model.
    pub fn base() -> Self {
        let mut layers = vec![ConvLayer::new(512, 10, 5)];
        layers.extend([ConvLayer::new(512, 3, 2); 4]);
        layers.extend([ConvLayer::new(512, 2, 2); 2]);
        EncoderConfig {
            layers,
            activation: Activation::Gelu,
            group_norm_groups: Some(512),
            feature_layer_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::usage("encoder needs at least one layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.channels == 0 || l.stride == 0 || l.kernel < l.stride {
                return Err(Error::usage(format!(
                    "encoder layer {i}: need channels >= 1 and kernel >= stride >= 1, got {l:?}"
                )));
            }
        }
        if let Some(g) = self.group_norm_groups {
            let c = self.layers[0].channels;
            if g == 0 || c % g != 0 {
                return Err(Error::usage(format!("{g} norm groups do not divide {c} channels")));
            }
        }
        Ok(())
    }

    /// Channels of each output frame.
    pub fn dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels)
    }

    /// Input samples per output frame.
    pub fn hop(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Smallest input length that yields one frame.
    pub fn receptive_field(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .fold(1, |need, l| (need - 1) * l.stride + l.kernel)
    }

    /// Canonical parameter shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 1;
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), vec![l.channels, cin, l.kernel]));
            cin = l.channels;
        }
        if self.group_norm_groups.is_some() {
            let c = self.layers[0].channels;
            out.push(("encoder.norm.gamma".into(), vec![c]));
            out.push(("encoder.norm.beta".into(), vec![c]));
        }
        if self.feature_layer_norm {
            out.push(("encoder.layer_norm.gamma".into(), vec![cin]));
            out.push(("encoder.layer_norm.beta".into(), vec![cin]));
        }
        out
    }

    pub fn init_params<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut impl RandomSource) {
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".gamma") {
                vec![T::one(); n]
            } else if name.ends_with(".beta") {
                vec![T::zero(); n]
            } else {
                let std = (2.0 / (shape[1] * shape[2]) as f64).sqrt();
                (0..n).map(|_| T::of(std * rng.normal())).collect()
            };
            params.insert(name, Tensor::from_parts(shape, data));
        }
    }
}

/// Frames produced from `t` samples: per layer `L <- floor((L - kernel) / stride) + 1`.
pub fn output_length(t: usize, cfg: &EncoderConfig) -> Result<usize> {
    cfg.validate()?;
    let min = cfg.receptive_field();
    if t < min {
        return Err(Error::domain(format!(
            "input of {t} samples is shorter than the encoder's receptive field; need at least {min}"
        )));
    }
    Ok(cfg.layers.iter().fold(t, |len, l| (len - l.kernel) / l.stride + 1))
}

/// Maps a `[B, T]` waveform batch to `[B, T', d]` latent frames.
pub fn encode<'t, T: Scalar>(x: Var<'t, T>, cfg: &EncoderConfig, params: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::usage(format!("encoder input must be [B, T], got {shape:?}")));
    }
    output_length(shape[1], cfg)?;
    let mut h = x.reshape(&[shape[0], 1, shape[1]])?;
    for (i, l) in cfg.layers.iter().enumerate() {
        let w = params.get(&format!("encoder.conv{i}.weight"))?;
        let expected = [l.channels, if i == 0 { 1 } else { cfg.layers[i - 1].channels }, l.kernel];
        if w.shape() != expected {
            return Err(Error::usage(format!(
                "encoder.conv{i}.weight has shape {:?}, config needs {expected:?}",
                w.shape()
            )));
        }
        h = h.conv1d(
            w,
            None,
            Conv1dSpec {
                stride: l.stride,
                ..Default::default()
            },
        )?;
        if i == 0 {
            if let Some(groups) = cfg.group_norm_groups {
                h = h.group_norm(params.get("encoder.norm.gamma")?, params.get("encoder.norm.beta")?, groups)?;
            }
        }
        if cfg.activation == Activation::Gelu {
            h = h.gelu();
        }
    }
    let mut z = h.permute(&[0, 2, 1])?;
    if cfg.feature_layer_norm {
        z = z.layer_norm(
            params.get("encoder.layer_norm.gamma")?,
            params.get("encoder.layer_norm.beta")?,
        )?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(layers: &[(usize, usize, usize)]) -> EncoderConfig {
        EncoderConfig {
            layers: layers.iter().map(|&(c, k, s)| ConvLayer::new(c, k, s)).collect(),
            group_norm_groups: None,
            ..Default::default()
        }
    }

    #[test]
    fn output_length_examples() {
        assert_eq!(output_length(37, &stack(&[(4, 1, 1), (4, 1, 1), (4, 1, 1)])).unwrap(), 37);
        assert_eq!(output_length(1000, &stack(&[(64, 10, 5)])).unwrap(), 199);
        assert_eq!(output_length(1000, &EncoderConfig::default()).unwrap(), 23);
    }

    #[test]
    fn short_input_reports_minimum() {
        let cfg = EncoderConfig::default();
        let min = cfg.receptive_field();
        assert_eq!(output_length(min, &cfg).unwrap(), 1);
        match output_length(min - 1, &cfg) {
            Err(Error::Domain(msg)) => assert!(msg.contains(&min.to_string()), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn base_stack_hop_is_320() {
        assert_eq!(EncoderConfig::base().hop(), 320);
        assert_eq!(EncoderConfig::base().receptive_field(), 400);
    }
}
