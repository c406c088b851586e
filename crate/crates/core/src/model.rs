//! The full network and one paired forward pass over an original/noisy batch.

use crate::context::{
    apply_mask, contextualize, project, sample_masks, sample_masks_with_count, ContextConfig, DropoutMasks,
    MaskConfig, MaskSpec,
};
use crate::encoder::{self, encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::{
    pretrain_loss, sample_distractors, switched_loss, ContrastiveConfig, DistractorSet, LossBreakdown, PairDecisions,
};
use crate::pairing::{paired_forward, DecisionSource, Family, FamilyStreams, Half, PairingMode, Transcript};
use crate::params::{Bound, ParamSet};
use crate::quantizer::{diversity_loss, quantize, Codebook};
use crate::rng::{streams, RngStream};
use crate::tensor::{Scalar, Tensor, Var};

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub context: ContextConfig,
    pub codebook: Codebook,
    pub mask: MaskConfig,
    pub contrastive: ContrastiveConfig,
    /// Straight-through hard selection; soft probabilities otherwise.
    pub hard_gumbel: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            context: ContextConfig::default(),
            codebook: Codebook::default(),
            mask: MaskConfig::default(),
            contrastive: ContrastiveConfig::default(),
            hard_gumbel: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.context.validate()?;
        self.codebook.validate()?;
        self.contrastive.validate()?;
        if self.codebook.out_dim != self.context.model_dim {
            return Err(Error::usage(format!(
                "quantizer output width {} must equal the model width {}",
                self.codebook.out_dim, self.context.model_dim
            )));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.encoder.dim();
        let mut out = self.encoder.param_shapes();
        out.extend(self.context.param_shapes(d));
        out.extend(self.codebook.param_shapes(d));
        out
    }

    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut rng = RngStream::new(seed, streams::INIT);
        let mut params = ParamSet::new();
        let d = self.encoder.dim();
        self.encoder.init_params(&mut params, &mut rng);
        self.context.init_params(d, &mut params, &mut rng);
        self.codebook.init_params(d, &mut params, &mut rng);
        Ok(params)
    }

    /// Frames per example for crops of `samples` samples.
    pub fn frames(&self, samples: usize) -> Result<usize> {
        encoder::output_length(samples, &self.encoder)
    }
}

/// Every random decision one half of a pair consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfDecisions {
    pub masks: MaskSpec,
    /// `None` when dropout is disabled.
    pub dropout: Option<DropoutMasks>,
    /// Gumbel noise, `[B, T', G, V]` flattened.
    pub gumbel: Vec<f64>,
    pub distractors: DistractorSet,
}

/// Draws one half's decisions. An unpaired noisy half keeps the original's
/// per-example masked counts.
pub fn draw_half(
    cfg: &ModelConfig,
    batch: usize,
    frames: usize,
    train: bool,
    src: &mut DecisionSource<'_>,
    original: Option<&HalfDecisions>,
    mode: PairingMode,
) -> Result<HalfDecisions> {
    let mut per_example = Vec::with_capacity(batch);
    {
        let mut rng = src.stream(Family::MaskPositions)?;
        for b in 0..batch {
            let idx = match original {
                Some(o) if !mode.mask_positions => sample_masks_with_count(
                    frames,
                    o.masks.example(b).len(),
                    cfg.mask.p_start,
                    cfg.mask.span,
                    &mut rng,
                )?,
                _ => sample_masks(frames, cfg.mask.p_start, cfg.mask.span, &mut rng)?,
            };
            per_example.push(idx);
        }
    }
    let masks = MaskSpec::new(frames, per_example)?;
    let dropout = if train && cfg.context.dropout > 0.0 {
        let mut rng = src.stream(Family::DropoutMasks)?;
        Some(DropoutMasks::draw(&cfg.context, batch, frames, &mut rng))
    } else {
        None
    };
    let gumbel = cfg
        .codebook
        .draw_noise(batch * frames, &mut src.stream(Family::GumbelNoise)?);
    let distractors = sample_distractors(&masks, cfg.contrastive.k, &mut src.stream(Family::Distractors)?)?;
    Ok(HalfDecisions {
        masks,
        dropout,
        gumbel,
        distractors,
    })
}

/// Decisions for both halves and the transcripts of what each half drew.
#[derive(Clone, Debug)]
pub struct PairPlan {
    pub original: HalfDecisions,
    pub noisy: HalfDecisions,
    pub original_transcript: Transcript,
    pub noisy_transcript: Transcript,
}

/// Runs the save/restore protocol over the family streams to plan one pair.
pub fn plan_pair(
    cfg: &ModelConfig,
    batch: usize,
    frames: usize,
    train: bool,
    streams: &mut FamilyStreams,
    mode: PairingMode,
) -> Result<PairPlan> {
    let out = paired_forward(streams, mode, &Family::ALL, |_half: Half, src, original| {
        draw_half(cfg, batch, frames, train, src, original, mode)
    })?;
    Ok(PairPlan {
        original: out.original,
        noisy: out.noisy,
        original_transcript: out.original_transcript,
        noisy_transcript: out.noisy_transcript,
    })
}

/// Whether the switched terms are part of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Own-target terms plus `lambda` times the switched-target terms.
    Switched { lambda: f64 },
    /// Own-target terms only; the switched terms are never computed.
    Baseline,
}

impl Objective {
    fn lambda(self) -> Option<f64> {
        match self {
            Objective::Switched { lambda } => Some(lambda),
            Objective::Baseline => None,
        }
    }
}

/// Everything a paired forward pass produced.
pub struct PairForward<'t, T: Scalar> {
    pub loss: Var<'t, T>,
    pub breakdown: LossBreakdown,
    /// Per-group perplexity of the original and noisy halves.
    pub perplexity: (Vec<f64>, Vec<f64>),
    /// Top-1 contrastive accuracy of the original and noisy own-target terms.
    pub accuracy: (f64, f64),
    /// `[2B, T', D]`: rows `0..B` original, `B..2B` noisy.
    pub c: Var<'t, T>,
    pub q: Var<'t, T>,
    /// Selected codebook entries, `[2B, T', G]` flattened.
    pub indices: Vec<usize>,
}

/// One forward pass of the stacked `[2B, T]` batch and the pre-training loss.
pub fn forward_pair<'t, T: Scalar>(
    cfg: &ModelConfig,
    params: &Bound<'t, T>,
    waves: Var<'t, T>,
    plan: &PairPlan,
    tau: f64,
    objective: Objective,
    alpha: f64,
    mode: PairingMode,
) -> Result<PairForward<'t, T>> {
    let shape = waves.shape();
    if shape.len() != 2 || shape[0] % 2 != 0 || shape[0] == 0 {
        return Err(Error::usage(format!("paired batch must be [2B, T], got {shape:?}")));
    }
    let b = shape[0] / 2;
    let (o, n) = (&plan.original, &plan.noisy);
    let masks = o.masks.concat(&n.masks)?;
    let frames = masks.frames();

    let z = encode(waves, &cfg.encoder, params)?;
    if z.shape()[1] != frames {
        return Err(Error::usage(format!(
            "plan covers {frames} frames, encoder produced {}",
            z.shape()[1]
        )));
    }
    let noise: Vec<T> = o.gumbel.iter().chain(&n.gumbel).map(|&g| T::of(g)).collect();
    let (g, v) = (cfg.codebook.groups, cfg.codebook.entries);
    let noise = Tensor::new(vec![2 * b, frames, g, v], noise)?;
    let quantized = quantize(z, &cfg.codebook, params, tau, &noise, cfg.hard_gumbel)?;

    let x = apply_mask(project(z, params)?, &masks, params.get("context.mask_embedding")?)?;
    let dropout = match (&o.dropout, &n.dropout) {
        (Some(a), Some(bm)) => Some(a.concat(bm)),
        (None, None) => None,
        _ => return Err(Error::Invariant("only one half of the pair has dropout masks".into())),
    };
    let c = contextualize(x, &cfg.context, params, dropout.as_ref())?.c;
    let q = quantized.q;

    let terms = switched_loss(
        c.narrow0(0, b)?,
        q.narrow0(0, b)?,
        c.narrow0(b, b)?,
        q.narrow0(b, b)?,
        PairDecisions {
            masks: (&o.masks, &n.masks),
            distractors: (&o.distractors, &n.distractors),
        },
        objective.lambda(),
        mode,
        &cfg.contrastive,
    )?;
    let div_o = diversity_loss(quantized.probs.narrow0(0, b)?, &o.masks)?;
    let div_n = diversity_loss(quantized.probs.narrow0(b, b)?, &n.masks)?;
    let (loss, breakdown) = pretrain_loss(&terms, div_o.loss, div_n.loss, alpha)?;
    Ok(PairForward {
        loss,
        breakdown,
        perplexity: (div_o.perplexity, div_n.perplexity),
        accuracy: (terms.oo.accuracy(), terms.nn.accuracy()),
        c,
        q,
        indices: quantized.indices,
    })
}
