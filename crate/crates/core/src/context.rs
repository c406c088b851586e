//! Span masking and the transformer context network.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::RandomSource;
use crate::tensor::{Conv1dSpec, Scalar, Tensor, Var};

/// Sorted masked frame indices for every example of a batch.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskSpec {
    frames: usize,
    per_example: Vec<Vec<usize>>,
}

impl MaskSpec {
    /// Indices are sorted and deduplicated; each example needs at least one in `[0, frames)`.
    pub fn new(frames: usize, per_example: Vec<Vec<usize>>) -> Result<Self> {
        let mut per_example = per_example;
        for (b, idx) in per_example.iter_mut().enumerate() {
            idx.sort_unstable();
            idx.dedup();
            if idx.is_empty() {
                return Err(Error::usage(format!("example {b} has no masked frames")));
            }
            if let Some(&t) = idx.iter().find(|&&t| t >= frames) {
                return Err(Error::usage(format!("example {b}: masked index {t} outside {frames} frames")));
            }
        }
        Ok(MaskSpec { frames, per_example })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn batch(&self) -> usize {
        self.per_example.len()
    }

    pub fn example(&self, b: usize) -> &[usize] {
        &self.per_example[b]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_example.iter().map(Vec::len).collect()
    }

    /// Total masked count `N` over the batch.
    pub fn total(&self) -> usize {
        self.per_example.iter().map(Vec::len).sum()
    }

    /// Masked rows of the flattened `[B * T']` frame axis, example-major.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.per_example
            .iter()
            .enumerate()
            .flat_map(|(b, idx)| idx.iter().map(move |&t| b * self.frames + t))
            .collect()
    }

    /// One flag per frame of the flattened batch.
    pub fn flags(&self) -> Vec<bool> {
        let mut out = vec![false; self.batch() * self.frames];
        for i in self.flat_indices() {
            out[i] = true;
        }
        out
    }

    /// The specs of `self` followed by those of `other`.
    pub fn concat(&self, other: &MaskSpec) -> Result<MaskSpec> {
        if self.frames != other.frames {
            return Err(Error::usage(format!(
                "cannot stack masks over {} and {} frames",
                self.frames, other.frames
            )));
        }
        let mut per_example = self.per_example.clone();
        per_example.extend(other.per_example.iter().cloned());
        Ok(MaskSpec {
            frames: self.frames,
            per_example,
        })
    }
}

/// Span-mask parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub p_start: f64,
    pub span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { p_start: 0.2, span: 3 }
    }
}

fn check_mask_args(frames: usize, p_start: f64, span: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::usage("cannot mask a sequence of 0 frames"));
    }
    if !(0.0..=1.0).contains(&p_start) {
        return Err(Error::usage(format!("mask start probability {p_start} outside [0, 1]")));
    }
    if span == 0 || span > frames {
        return Err(Error::usage(format!("mask span {span} outside [1, {frames}]")));
    }
    Ok(())
}

/// Union of spans of length `span` started at each frame with probability
/// `p_start`, clipped to the sequence; one random frame if the union is empty.
pub fn sample_masks(frames: usize, p_start: f64, span: usize, rng: &mut impl RandomSource) -> Result<Vec<usize>> {
    check_mask_args(frames, p_start, span)?;
    let mut masked = vec![false; frames];
    for t in 0..frames {
        if rng.bernoulli(p_start) {
            masked[t..(t + span).min(frames)].iter_mut().for_each(|m| *m = true);
        }
    }
    let mut idx: Vec<usize> = (0..frames).filter(|&t| masked[t]).collect();
    if idx.is_empty() {
        idx.push(rng.below(frames as u64) as usize);
    }
    Ok(idx)
}

/// A span mask adjusted to exactly `count` frames by dropping or adding
/// uniformly chosen frames.
pub fn sample_masks_with_count(
    frames: usize,
    count: usize,
    p_start: f64,
    span: usize,
    rng: &mut impl RandomSource,
) -> Result<Vec<usize>> {
    if count == 0 || count > frames {
        return Err(Error::usage(format!("cannot mask {count} of {frames} frames")));
    }
    let mut idx = sample_masks(frames, p_start, span, rng)?;
    while idx.len() > count {
        let i = rng.below(idx.len() as u64) as usize;
        idx.remove(i);
    }
    if idx.len() < count {
        let mut free: Vec<usize> = (0..frames).filter(|t| idx.binary_search(t).is_err()).collect();
        while idx.len() < count {
            let i = rng.below(free.len() as u64) as usize;
            idx.push(free.swap_remove(i));
        }
        idx.sort_unstable();
    }
    Ok(idx)
}

/// Replaces masked frames of `[B, T', D]` by `embedding` (`[D]`).
pub fn apply_mask<'t, T: Scalar>(z: Var<'t, T>, spec: &MaskSpec, embedding: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = z.shape();
    if shape.len() != 3 || shape[0] != spec.batch() || shape[1] != spec.frames() {
        return Err(Error::usage(format!(
            "mask over {} x {} frames applied to latents {shape:?}",
            spec.batch(),
            spec.frames()
        )));
    }
    if embedding.shape() != [shape[2]] {
        return Err(Error::usage(format!(
            "mask embedding {:?} for frames of width {}",
            embedding.shape(),
            shape[2]
        )));
    }
    z.reshape(&[shape[0] * shape[1], shape[2]])?
        .replace_rows(embedding, &spec.flags())?
        .reshape(&shape)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextConfig {
    pub blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            blocks: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            pos_conv_kernel: 9,
            pos_conv_groups: 4,
        }
    }
}

impl ContextConfig {
    /// The 12-block, 768-wide reference configuration.
    pub fn base() -> Self {
        ContextConfig {
            blocks: 12,
            model_dim: 768,
            heads: 8,
            ffn_dim: 3072,
            dropout: 0.1,
            pos_conv_kernel: 129,
            pos_conv_groups: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim;
        if d == 0 || self.heads == 0 || d % self.heads != 0 {
            return Err(Error::usage(format!("model width {d} is not divisible by {} heads", self.heads)));
        }
        if self.pos_conv_groups == 0 || d % self.pos_conv_groups != 0 {
            return Err(Error::usage(format!(
                "model width {d} is not divisible by {} positional groups",
                self.pos_conv_groups
            )));
        }
        if self.pos_conv_kernel % 2 == 0 {
            return Err(Error::usage(format!(
                "positional kernel must be odd to preserve length, got {}",
                self.pos_conv_kernel
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::usage("feed-forward width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Dropout sites per forward pass: after the positional stage and twice per block.
    pub fn dropout_sites(&self) -> usize {
        1 + 2 * self.blocks
    }

    pub fn param_shapes(&self, input_dim: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.model_dim;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("context.proj.weight".into(), vec![input_dim, d]),
            ("context.proj.bias".into(), vec![d]),
            ("context.mask_embedding".into(), vec![d]),
            (
                "context.pos_conv.weight".into(),
                vec![d, d / self.pos_conv_groups, self.pos_conv_kernel],
            ),
            ("context.pos_conv.bias".into(), vec![d]),
        ];
        for i in 0..self.blocks {
            let p = |s: &str| format!("context.block{i}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.q.weight"), vec![d, d]),
                (p("attn.q.bias"), vec![d]),
                (p("attn.k.weight"), vec![d, d]),
                (p("attn.v.weight"), vec![d, d]),
                (p("attn.v.bias"), vec![d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("ffn.fc1.weight"), vec![d, self.ffn_dim]),
                (p("ffn.fc1.bias"), vec![self.ffn_dim]),
                (p("ffn.fc2.weight"), vec![self.ffn_dim, d]),
                (p("ffn.fc2.bias"), vec![d]),
            ]);
        }
        out.push(("context.final_ln.gamma".into(), vec![d]));
        out.push(("context.final_ln.beta".into(), vec![d]));
        out
    }

    pub fn init_params<T: Scalar>(&self, input_dim: usize, params: &mut ParamSet<T>, rng: &mut impl RandomSource) {
        for (name, shape) in self.param_shapes(input_dim) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".gamma") {
                vec![T::one(); n]
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                vec![T::zero(); n]
            } else if name == "context.mask_embedding" {
                (0..n).map(|_| T::of(rng.uniform())).collect()
            } else if name == "context.pos_conv.weight" {
                let std = (4.0 / (self.pos_conv_kernel * self.model_dim) as f64).sqrt();
                (0..n).map(|_| T::of(std * rng.normal())).collect()
            } else {
                let std = (1.0 / shape[0] as f64).sqrt();
                (0..n).map(|_| T::of(std * rng.normal())).collect()
            };
            params.insert(name, Tensor::from_parts(shape, data));
        }
    }
}

/// Keep masks for every dropout site of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DropoutMasks {
    /// One `[B * T' * D]` keep mask per site.
    pub sites: Vec<Vec<bool>>,
}

impl DropoutMasks {
    /// Each element is dropped with probability `cfg.dropout`, resolved to
    /// 2^-32; every 64-bit draw decides two elements.
    pub fn draw(cfg: &ContextConfig, batch: usize, frames: usize, rng: &mut impl RandomSource) -> Self {
        let n = batch * frames * cfg.model_dim;
        let threshold = (cfg.dropout * 4_294_967_296.0).round() as u64;
        let sites = (0..cfg.dropout_sites())
            .map(|_| {
                let mut keep = Vec::with_capacity(n + 1);
                while keep.len() < n {
                    let u = rng.next_u64();
                    keep.push(u & 0xffff_ffff >= threshold);
                    keep.push(u >> 32 >= threshold);
                }
                keep.truncate(n);
                keep
            })
            .collect();
        DropoutMasks { sites }
    }

    /// Site-wise concatenation along the batch axis.
    pub fn concat(&self, other: &DropoutMasks) -> DropoutMasks {
        DropoutMasks {
            sites: self
                .sites
                .iter()
                .zip(&other.sites)
                .map(|(a, b)| a.iter().chain(b).copied().collect())
                .collect(),
        }
    }
}

/// Context network output.
pub struct Contextualized<'t, T: Scalar> {
    /// `[B, T', model_dim]`
    pub c: Var<'t, T>,
    /// Attention probabilities per block, `[B * heads, T', T']`.
    pub attention: Vec<Var<'t, T>>,
}

/// Projects `[B, T', d]` latents to the model width.
pub fn project<'t, T: Scalar>(z: Var<'t, T>, params: &Bound<'t, T>) -> Result<Var<'t, T>> {
    z.matmul(params.get("context.proj.weight")?)?
        .add_bias(params.get("context.proj.bias")?)
}

fn maybe_dropout<'t, T: Scalar>(x: Var<'t, T>, masks: Option<&DropoutMasks>, site: usize, p: f64) -> Result<Var<'t, T>> {
    match masks {
        Some(m) => {
            let keep = m
                .sites
                .get(site)
                .ok_or_else(|| Error::usage(format!("no dropout mask for site {site}")))?;
            x.dropout(keep, p)
        }
        None => Ok(x),
    }
}

fn linear<'t, T: Scalar>(x: Var<'t, T>, params: &Bound<'t, T>, name: &str, bias: bool) -> Result<Var<'t, T>> {
    let y = x.matmul(params.get(&format!("{name}.weight"))?)?;
    if bias {
        y.add_bias(params.get(&format!("{name}.bias"))?)
    } else {
        Ok(y)
    }
}

/// Positional convolution, then pre-norm transformer blocks, then a final layer norm.
///
/// `dropout` supplies the keep masks for every site; `None` disables dropout.
pub fn contextualize<'t, T: Scalar>(
    x: Var<'t, T>,
    cfg: &ContextConfig,
    params: &Bound<'t, T>,
    dropout: Option<&DropoutMasks>,
) -> Result<Contextualized<'t, T>> {
    cfg.validate()?;
    let shape = x.shape();
    let d = cfg.model_dim;
    if shape.len() != 3 || shape[2] != d {
        return Err(Error::usage(format!("context input must be [B, T', {d}], got {shape:?}")));
    }
    let (b, t) = (shape[0], shape[1]);
    if let Some(m) = dropout {
        let n = b * t * d;
        if m.sites.len() != cfg.dropout_sites() || m.sites.iter().any(|s| s.len() != n) {
            return Err(Error::usage(format!(
                "dropout masks do not match {} sites of {n} elements",
                cfg.dropout_sites()
            )));
        }
    }
    let p = cfg.dropout;
    let pos = x
        .permute(&[0, 2, 1])?
        .conv1d(
            params.get("context.pos_conv.weight")?,
            Some(params.get("context.pos_conv.bias")?),
            Conv1dSpec {
                stride: 1,
                padding: cfg.pos_conv_kernel / 2,
                groups: cfg.pos_conv_groups,
            },
        )?
        .gelu()
        .permute(&[0, 2, 1])?;
    let mut h = maybe_dropout(x.add(pos)?, dropout, 0, p)?;
    let (heads, dh) = (cfg.heads, d / cfg.heads);
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let split = |v: Var<'t, T>| -> Result<Var<'t, T>> {
        v.reshape(&[b, t, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * heads, t, dh])
    };
    let mut attention = Vec::with_capacity(cfg.blocks);
    for i in 0..cfg.blocks {
        let name = |s: &str| format!("context.block{i}.{s}");
        let a = h.layer_norm(params.get(&name("ln1.gamma"))?, params.get(&name("ln1.beta"))?)?;
        let q = split(linear(a, params, &name("attn.q"), true)?)?;
        let k = split(linear(a, params, &name("attn.k"), false)?)?;
        let v = split(linear(a, params, &name("attn.v"), true)?)?;
        let probs = q.bmm(k, true)?.scale(scale).softmax()?;
        attention.push(probs);
        let mixed = probs
            .bmm(v, false)?
            .reshape(&[b, heads, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        let attn_out = maybe_dropout(linear(mixed, params, &name("attn.out"), true)?, dropout, 1 + 2 * i, p)?;
        h = h.add(attn_out)?;
        let f = h.layer_norm(params.get(&name("ln2.gamma"))?, params.get(&name("ln2.beta"))?)?;
        let f = linear(f, params, &name("ffn.fc1"), true)?.gelu();
        let f = maybe_dropout(linear(f, params, &name("ffn.fc2"), true)?, dropout, 2 + 2 * i, p)?;
        h = h.add(f)?;
    }
    let c = h.layer_norm(
        params.get("context.final_ln.gamma")?,
        params.get("context.final_ln.beta")?,
    )?;
    Ok(Contextualized { c, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn mask_examples() {
        let mut rng = RngStream::new(1, 1);
        assert_eq!(sample_masks(10, 1.0, 1, &mut rng).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_masks(10, 0.0, 3, &mut rng).unwrap().len(), 1);
        assert!(matches!(sample_masks(0, 0.5, 1, &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn count_constrained_masks() {
        let mut rng = RngStream::new(2, 1);
        for count in [1, 5, 17, 40] {
            let m = sample_masks_with_count(40, count, 0.2, 3, &mut rng).unwrap();
            assert_eq!(m.len(), count);
            assert!(m.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(MaskSpec::new(4, vec![vec![]]), Err(Error::Usage(_))));
        assert!(matches!(MaskSpec::new(4, vec![vec![4]]), Err(Error::Usage(_))));
        let s = MaskSpec::new(4, vec![vec![3, 1, 3], vec![0]]).unwrap();
        assert_eq!(s.example(0), &[1, 3]);
        assert_eq!(s.flat_indices(), vec![1, 3, 4]);
        assert_eq!(s.total(), 3);
    }
}
