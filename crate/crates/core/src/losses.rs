//! The three supervision terms and their weighted sum.
//!
//! All losses are built on the tape from prediction handles and plain target
//! tensors, so one backward pass drives the whole stack. Norms are taken as
//! per-element means (the masked detail term divides by the mask population),
//! which keeps the weights' meaning independent of resolution and batch size.

use crate::data::semantic_target;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor4;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Weights of the combined objective. Defaults: semantic 1, detail 10, alpha 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub lambda_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_d: 10.0,
            lambda_alpha: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.lambda_s, "lambda_s"),
            (self.lambda_d, "lambda_d"),
            (self.lambda_alpha, "lambda_alpha"),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar values of every term, for logging. `l_alpha` already includes the
/// compositional term `l_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_d: f64,
    pub l_alpha: f64,
    pub l_c: f64,
    pub total: f64,
}

/// Semantic term: half the mean squared gap between the coarse prediction and
/// the pooled-and-blurred matte.
pub fn loss_s(tape: &mut Tape, s_po: ValueId, alpha_g: &Tensor4) -> Result<ValueId> {
    let target = semantic_target(alpha_g)?;
    if tape.shape(s_po) != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "semantic loss".into(),
            expected: format!("prediction shaped {}", target.shape()),
            found: tape.shape(s_po).to_string(),
        });
    }
    let t = tape.leaf(target);
    let diff = tape.sub(s_po, t)?;
    let sq = tape.mul(diff, diff)?;
    let m = tape.mean(sq);
    Ok(tape.affine(m, 0.5, 0.0))
}

/// Detail term: squared error under the transition mask, averaged over the
/// masked pixels (an empty mask contributes zero).
pub fn loss_d(tape: &mut Tape, d_p: ValueId, alpha_g: &Tensor4, m_d: &Tensor4) -> Result<ValueId> {
    for (index, &v) in m_d.data().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::NonBinaryMask { index, value: v });
        }
    }
    let count = m_d.sum();
    let a = tape.leaf(alpha_g.clone());
    let m = tape.leaf(m_d.clone());
    let diff = tape.sub(d_p, a)?;
    let masked = tape.mul(diff, m)?;
    let sq = tape.mul(masked, masked)?;
    let s = tape.sum(sq);
    Ok(tape.affine(s, 1.0 / count.max(1.0), 0.0))
}

/// Alpha term: mean absolute matte error plus, when both plates are known,
/// the compositional error |I - (alpha_p*F + (1-alpha_p)*B)|.
///
/// Returns (full alpha loss, compositional part alone).
pub fn loss_alpha(
    tape: &mut Tape,
    alpha_p: ValueId,
    alpha_g: &Tensor4,
    image: &Tensor4,
    fg: Option<&Tensor4>,
    bg: Option<&Tensor4>,
) -> Result<(ValueId, ValueId)> {
    let a = tape.leaf(alpha_g.clone());
    let diff = tape.sub(alpha_p, a)?;
    let ad = tape.abs(diff);
    let l_mae = tape.mean(ad);

    let l_c = match (fg, bg) {
        (Some(fg), Some(bg)) => {
            let f = tape.leaf(fg.clone());
            let b = tape.leaf(bg.clone());
            let i = tape.leaf(image.clone());
            let a3 = tape.replicate3(alpha_p)?;
            let fa = tape.mul(a3, f)?;
            let inv = tape.affine(a3, -1.0, 1.0);
            let bb = tape.mul(inv, b)?;
            let comp = tape.add(fa, bb)?;
            let cd = tape.sub(i, comp)?;
            let acd = tape.abs(cd);
            tape.mean(acd)
        }
        (None, None) => tape.scalar(0.0),
        _ => {
            return Err(Error::InvalidArgument(
                "compositional loss needs both foreground and background plates".into(),
            ))
        }
    };
    let full = tape.add(l_mae, l_c)?;
    Ok((full, l_c))
}

/// Everything the combined objective consumes: prediction handles plus the
/// batched ground-truth tensors.
pub struct TotalLossInputs<'a> {
    pub s_po: ValueId,
    pub d_p: ValueId,
    pub alpha_p: ValueId,
    pub alpha_g: &'a Tensor4,
    pub m_d: &'a Tensor4,
    pub image: &'a Tensor4,
    pub fg: Option<&'a Tensor4>,
    pub bg: Option<&'a Tensor4>,
}

/// Weighted sum of the three terms. Returns the scalar node to differentiate
/// plus the logged values of every component.
pub fn total_loss(
    tape: &mut Tape,
    inputs: &TotalLossInputs,
    weights: &LossWeights,
) -> Result<(ValueId, LossBreakdown)> {
    weights.validate()?;
    let ls = loss_s(tape, inputs.s_po, inputs.alpha_g)?;
    let ld = loss_d(tape, inputs.d_p, inputs.alpha_g, inputs.m_d)?;
    let (la, lc) = loss_alpha(
        tape,
        inputs.alpha_p,
        inputs.alpha_g,
        inputs.image,
        inputs.fg,
        inputs.bg,
    )?;
    let ws = tape.affine(ls, weights.lambda_s, 0.0);
    let wd = tape.affine(ld, weights.lambda_d, 0.0);
    let wa = tape.affine(la, weights.lambda_alpha, 0.0);
    let sd = tape.add(ws, wd)?;
    let total = tape.add(sd, wa)?;
    let breakdown = LossBreakdown {
        l_s: tape.value(ls).scalar()?,
        l_d: tape.value(ld).scalar()?,
        l_alpha: tape.value(la).scalar()?,
        l_c: tape.value(lc).scalar()?,
        total: tape.value(total).scalar()?,
    };
    Ok((total, breakdown))
}
