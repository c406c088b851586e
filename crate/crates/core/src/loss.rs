//! Contrastive, switched and combined pre-training losses.

use crate::context::MaskSpec;
use crate::error::{Error, Result};
use crate::pairing::PairingMode;
use crate::rng::RandomSource;
use crate::tensor::{Scalar, Tensor, Var};

/// For every masked position, `K` ordinals into its example's masked list.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DistractorSet {
    k: usize,
    /// `per_example[b][j * K + i]`: i-th distractor of the j-th masked position.
    per_example: Vec<Vec<usize>>,
}

impl DistractorSet {
    /// Explicit ordinals, `per_example[b][j * k + i]`; none may point at its own position `j`.
    pub fn new(k: usize, per_example: Vec<Vec<usize>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::usage("need at least one distractor"));
        }
        for (b, ords) in per_example.iter().enumerate() {
            if ords.len() % k != 0 {
                return Err(Error::usage(format!("example {b}: {} ordinals is not a multiple of K = {k}", ords.len())));
            }
            if let Some(j) = ords.chunks(k).enumerate().position(|(j, c)| c.contains(&j)) {
                return Err(Error::usage(format!("example {b}: masked position {j} is its own distractor")));
            }
        }
        Ok(DistractorSet { k, per_example })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Distractor ordinals of masked position `j` of example `b`.
    pub fn of(&self, b: usize, j: usize) -> &[usize] {
        &self.per_example[b][j * self.k..(j + 1) * self.k]
    }

    /// Distractor frame indices of masked position `j` of example `b`.
    pub fn frames(&self, spec: &MaskSpec, b: usize, j: usize) -> Vec<usize> {
        self.of(b, j).iter().map(|&o| spec.example(b)[o]).collect()
    }

    pub fn concat(&self, other: &DistractorSet) -> Result<DistractorSet> {
        if self.k != other.k {
            return Err(Error::usage(format!("cannot stack K = {} with K = {}", self.k, other.k)));
        }
        let mut per_example = self.per_example.clone();
        per_example.extend(other.per_example.iter().cloned());
        Ok(DistractorSet { k: self.k, per_example })
    }

    fn check(&self, spec: &MaskSpec) -> Result<()> {
        let ok = self.per_example.len() == spec.batch()
            && self
                .per_example
                .iter()
                .zip(spec.counts())
                .all(|(d, n)| d.len() == n * self.k && d.iter().all(|&o| o < n));
        if ok {
            Ok(())
        } else {
            Err(Error::usage("distractor set does not match the mask spec"))
        }
    }
}

/// Draws `k` distinct values from `0..m` (Floyd's algorithm).
fn distinct(m: usize, k: usize, rng: &mut impl RandomSource) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(k);
    for j in m - k..m {
        let t = rng.below(j as u64 + 1) as usize;
        out.push(if out.contains(&t) { j } else { t });
    }
    out
}

/// Uniform distractors from the other masked positions of the same example,
/// without replacement when at least `k` candidates exist.
pub fn sample_distractors(spec: &MaskSpec, k: usize, rng: &mut impl RandomSource) -> Result<DistractorSet> {
    if k == 0 {
        return Err(Error::usage("need at least one distractor"));
    }
    let mut per_example = Vec::with_capacity(spec.batch());
    for b in 0..spec.batch() {
        let n = spec.example(b).len();
        if n < 2 {
            return Err(Error::domain(format!(
                "example {b} has a single masked frame, so it has no distractors; raise the mask rate or span"
            )));
        }
        let m = n - 1;
        let mut ords = Vec::with_capacity(n * k);
        for j in 0..n {
            let picks = if m >= k {
                distinct(m, k, rng)
            } else {
                (0..k).map(|_| rng.below(m as u64) as usize).collect()
            };
            ords.extend(picks.into_iter().map(|c| if c < j { c } else { c + 1 }));
        }
        per_example.push(ords);
    }
    Ok(DistractorSet { k, per_example })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    /// Distractors per masked position.
    pub k: usize,
    /// Temperature dividing the cosine similarity.
    pub kappa: f64,
    /// Whether the positive also appears in the softmax denominator.
    pub include_positive: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            k: 10,
            kappa: 0.1,
            include_positive: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::usage("need at least one distractor"));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::usage(format!("similarity temperature must be > 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// One contrastive term with its similarity logits.
pub struct ContrastiveTerm<'t, T: Scalar> {
    pub loss: Var<'t, T>,
    /// `[N, K + 1]` scaled similarities; column 0 is the positive.
    pub logits: Tensor<T>,
}

impl<T: Scalar> ContrastiveTerm<'_, T> {
    /// Fraction of positions whose positive scores strictly above every distractor.
    pub fn accuracy(&self) -> f64 {
        let c = self.logits.shape()[1];
        let rows = self.logits.data().chunks(c);
        let n = rows.len();
        let hits = rows.filter(|r| r[1..].iter().all(|&x| r[0] > x)).count();
        hits as f64 / n as f64
    }
}

/// Contrastive loss of predictions `c` against targets `q`, both `[B, T', D]`.
///
/// Averages over the masked positions of each example, then over examples.
pub fn contrastive_term<'t, T: Scalar>(
    c: Var<'t, T>,
    q: Var<'t, T>,
    spec: &MaskSpec,
    distractors: &DistractorSet,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveTerm<'t, T>> {
    cfg.validate()?;
    let shape = c.shape();
    if shape.len() != 3 || q.shape() != shape {
        return Err(Error::usage(format!(
            "predictions {shape:?} and targets {:?} must both be [B, T', D]",
            q.shape()
        )));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if spec.batch() != b || spec.frames() != t {
        return Err(Error::usage(format!(
            "mask over {} x {} frames applied to {shape:?}",
            spec.batch(),
            spec.frames()
        )));
    }
    if spec.total() == 0 {
        return Err(Error::usage("contrastive loss needs at least one masked position"));
    }
    if distractors.k() != cfg.k {
        return Err(Error::usage(format!(
            "distractor set has K = {}, config says {}",
            distractors.k(),
            cfg.k
        )));
    }
    distractors.check(spec)?;
    let k1 = cfg.k + 1;
    let mut c_rows = Vec::with_capacity(spec.total() * k1);
    let mut q_rows = Vec::with_capacity(spec.total() * k1);
    let mut weights = Vec::with_capacity(spec.total());
    for ex in 0..b {
        let masked = spec.example(ex);
        let w = T::of(1.0 / (b * masked.len()) as f64);
        for (j, &pos) in masked.iter().enumerate() {
            c_rows.extend(std::iter::repeat(ex * t + pos).take(k1));
            q_rows.push(ex * t + pos);
            q_rows.extend(distractors.of(ex, j).iter().map(|&o| ex * t + masked[o]));
            weights.push(w);
        }
    }
    let cf = c.reshape(&[b * t, d])?.gather_rows(&c_rows)?;
    let qf = q.reshape(&[b * t, d])?.gather_rows(&q_rows)?;
    let logits = cf
        .row_cosine(qf)?
        .scale(T::of(1.0 / cfg.kappa))
        .reshape(&[spec.total(), k1])?;
    let loss = logits.cross_entropy_first(&weights, cfg.include_positive)?;
    Ok(ContrastiveTerm {
        loss,
        logits: logits.value(),
    })
}

pub fn contrastive_loss<'t, T: Scalar>(
    c: Var<'t, T>,
    q: Var<'t, T>,
    spec: &MaskSpec,
    distractors: &DistractorSet,
    cfg: &ContrastiveConfig,
) -> Result<Var<'t, T>> {
    Ok(contrastive_term(c, q, spec, distractors, cfg)?.loss)
}

/// Masks and distractors of both halves of a pair.
#[derive(Clone, Copy, Debug)]
pub struct PairDecisions<'a> {
    pub masks: (&'a MaskSpec, &'a MaskSpec),
    pub distractors: (&'a DistractorSet, &'a DistractorSet),
}

/// The four contrastive terms of a paired pass, or two in baseline mode.
pub struct SwitchedTerms<'t, T: Scalar> {
    pub oo: ContrastiveTerm<'t, T>,
    pub nn: ContrastiveTerm<'t, T>,
    /// `(C, Q_hat)` and `(C_hat, Q)`; absent in baseline mode.
    pub switched: Option<(ContrastiveTerm<'t, T>, ContrastiveTerm<'t, T>)>,
    pub lambda: f64,
}

impl<'t, T: Scalar> SwitchedTerms<'t, T> {
    /// `l_oo + l_nn + lambda (l_on + l_no)`.
    pub fn contrastive_sum(&self) -> Result<Var<'t, T>> {
        let own = self.oo.loss.add(self.nn.loss)?;
        match &self.switched {
            Some((on, no)) => own.add(on.loss.add(no.loss)?.scale(T::of(self.lambda))),
            None => Ok(own),
        }
    }
}

/// Own-target and switched-target terms.
///
/// Each prediction half uses its own masked positions and distractor
/// ordinals; a switched term reads the positive and its distractors from the
/// other half's targets at those positions. With `lambda = None` the switched
/// terms are never computed.
pub fn switched_loss<'t, T: Scalar>(
    c: Var<'t, T>,
    q: Var<'t, T>,
    c_hat: Var<'t, T>,
    q_hat: Var<'t, T>,
    decisions: PairDecisions<'_>,
    lambda: Option<f64>,
    mode: PairingMode,
    cfg: &ContrastiveConfig,
) -> Result<SwitchedTerms<'t, T>> {
    let (m_o, m_n) = decisions.masks;
    let (d_o, d_n) = decisions.distractors;
    if mode.mask_positions && m_o != m_n {
        return Err(Error::Invariant(
            "mask positions are paired but the two halves have different masks".into(),
        ));
    }
    if mode.distractors && mode.mask_positions && d_o != d_n {
        return Err(Error::Invariant(
            "distractors are paired but the two halves drew different indices".into(),
        ));
    }
    if m_o.counts() != m_n.counts() {
        return Err(Error::Invariant(
            "the two halves mask different numbers of frames per example".into(),
        ));
    }
    if let Some(l) = lambda {
        if !(l >= 0.0) {
            return Err(Error::usage(format!("lambda must be >= 0, got {l}")));
        }
    }
    let oo = contrastive_term(c, q, m_o, d_o, cfg)?;
    let nn = contrastive_term(c_hat, q_hat, m_n, d_n, cfg)?;
    let switched = match lambda {
        Some(_) => Some((
            contrastive_term(c, q_hat, m_o, d_o, cfg)?,
            contrastive_term(c_hat, q, m_n, d_n, cfg)?,
        )),
        None => None,
    };
    Ok(SwitchedTerms {
        oo,
        nn,
        switched,
        lambda: lambda.unwrap_or(0.0),
    })
}

/// Scalar summary of every loss term of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_oo: f64,
    pub l_nn: f64,
    pub l_on: Option<f64>,
    pub l_no: Option<f64>,
    pub l_div: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the parts.
    pub fn recombine(&self) -> f64 {
        pretrain_total(
            self.l_oo,
            self.l_nn,
            self.l_on.unwrap_or(0.0),
            self.l_no.unwrap_or(0.0),
            self.lambda,
            self.l_div,
            self.alpha,
        )
    }
}

/// `l_oo + l_nn + lambda (l_on + l_no) + alpha l_div` on plain numbers.
pub fn pretrain_total(l_oo: f64, l_nn: f64, l_on: f64, l_no: f64, lambda: f64, l_div: f64, alpha: f64) -> f64 {
    l_oo + l_nn + lambda * (l_on + l_no) + alpha * l_div
}

/// Adds `alpha * (div_original + div_noisy) / 2` to the contrastive sum.
pub fn pretrain_loss<'t, T: Scalar>(
    terms: &SwitchedTerms<'t, T>,
    div_original: Var<'t, T>,
    div_noisy: Var<'t, T>,
    alpha: f64,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    if !(alpha >= 0.0) {
        return Err(Error::usage(format!("alpha must be >= 0, got {alpha}")));
    }
    let div = div_original.add(div_noisy)?.scale(T::of(0.5));
    let total = terms.contrastive_sum()?.add(div.scale(T::of(alpha)))?;
    let item = |v: Var<'t, T>| v.value().item().as_f64();
    let breakdown = LossBreakdown {
        l_oo: item(terms.oo.loss),
        l_nn: item(terms.nn.loss),
        l_on: terms.switched.as_ref().map(|(on, _)| item(on.loss)),
        l_no: terms.switched.as_ref().map(|(_, no)| item(no.loss)),
        l_div: item(div),
        lambda: terms.lambda,
        alpha,
        total: item(total),
    };
    Ok((total, breakdown))
}
