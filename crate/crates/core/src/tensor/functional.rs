use super::dense::Tensor;
use super::scalar::Scalar;
use super::tape::Var;
use crate::error::{Error, Result};

/// Cosine similarity of two equal-length vectors, as a rank-0 var.
pub fn cosine_similarity<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 1 || sa != sb || sa[0] == 0 {
        return Err(Error::usage(format!(
            "cosine_similarity expects two non-empty vectors of equal length, got {sa:?} and {sb:?}"
        )));
    }
    let d = sa[0];
    a.reshape(&[1, d])?
        .row_cosine(b.reshape(&[1, d])?)?
        .reshape(&[])
}

/// Gumbel-softmax with straight-through selection over the last axis.
///
/// `soft = softmax((logits + noise) / tau)`. With `hard`, the first output is
/// the one-hot argmax of `soft` whose gradient is that of `soft`; otherwise
/// both outputs are `soft`. The noise is always supplied by the caller.
pub fn gumbel_softmax_st<'t, T: Scalar>(
    logits: Var<'t, T>,
    tau: f64,
    noise: &Tensor<T>,
    hard: bool,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::domain(format!("gumbel softmax temperature must be > 0, got {tau}")));
    }
    if noise.shape() != logits.shape().as_slice() {
        return Err(Error::usage(format!(
            "gumbel noise shape {:?} does not match logits {:?}",
            noise.shape(),
            logits.shape()
        )));
    }
    let noise = logits.tape().constant(noise.clone());
    let soft = logits
        .add(noise)?
        .scale(T::of(1.0 / tau))
        .softmax()?;
    let selected = if hard { soft.straight_through_onehot()? } else { soft };
    Ok((selected, soft))
}

/// Standard Gumbel(0, 1) sample from a uniform draw in the open interval (0, 1).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}
