//! Training objectives: the two-term graph contrastive loss over a
//! projected triplet, the hinge answer-ranking loss, and their weighted
//! combination.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Projected anchor/positive/negative embeddings entering the
/// contrastive loss.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedTriplet {
    pub anchor: TensorId,
    pub positive: TensorId,
    pub negative: TensorId,
}

/// Candidate scores with the supervised correct index.
#[derive(Clone, Debug)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub correct_index: usize,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>, correct_index: usize) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::contract("score vector needs at least 2 candidates"));
        }
        if correct_index >= scores.len() {
            return Err(Error::contract(format!(
                "correct index {correct_index} out of range for {} candidates",
                scores.len()
            )));
        }
        Ok(ScoreVector { scores, correct_index })
    }

    /// Argmax with ties broken toward the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable `log(1 + exp(z))` composed from tape primitives:
/// `relu(z) + log(1 + exp(−|z|))`.
fn softplus(tape: &mut Tape, z: TensorId) -> Result<TensorId> {
    let pos = tape.relu(z);
    let nz = tape.neg(z);
    let neg = tape.relu(nz);
    let abs = tape.add(pos, neg)?;
    let nabs = tape.neg(abs);
    let e = tape.exp(nabs);
    let one = tape.leaf(Tensor::full(tape.shape(e), 1.0));
    let onep = tape.add(e, one)?;
    let log = tape.log(onep);
    tape.add(pos, log)
}

/// Two-term temperature-scaled contrastive loss with cosine similarity:
/// `−log[exp(d(a,p)/τ) / (exp(d(a,p)/τ) + exp(d(a,n)/τ))]`, evaluated as
/// `softplus((d(a,n) − d(a,p))/τ)`. Errors on zero-norm members or a
/// non-positive temperature.
pub fn contrastive_loss(tape: &mut Tape, t: &ProjectedTriplet, tau: f64) -> Result<TensorId> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let d_pos = tape.cosine_similarity(t.anchor, t.positive)?;
    let d_neg = tape.cosine_similarity(t.anchor, t.negative)?;
    let gap = tape.sub(d_neg, d_pos)?;
    let z = tape.scale(gap, 1.0 / tau);
    softplus(tape, z)
}

/// Hinge answer-ranking loss over a `[C]` (or `[C×1]`) score tensor:
/// per incorrect candidate, `max(0, 1 + y_incorrect − y_correct)`,
/// summed.
pub fn hinge_loss(tape: &mut Tape, scores: TensorId, correct_index: usize) -> Result<TensorId> {
    let shape = tape.shape(scores).to_vec();
    let c = shape[0];
    if c < 2 || (shape.len() == 2 && shape[1] != 1) || shape.len() > 2 {
        return Err(Error::contract(format!(
            "hinge loss needs a [C>=2] score vector, got shape {shape:?}"
        )));
    }
    if correct_index >= c {
        return Err(Error::contract(format!(
            "correct index {correct_index} out of range for {c} candidates"
        )));
    }
    let flat = if shape.len() == 2 {
        tape.reshape(scores, &[c])?
    } else {
        scores
    };
    let y_p = tape.slice(flat, 0, correct_index, correct_index + 1)?;
    let one = tape.scalar(1.0);
    let mut total: Option<TensorId> = None;
    for i in 0..c {
        if i == correct_index {
            continue;
        }
        let y_i = tape.slice(flat, 0, i, i + 1)?;
        let margin = tape.add(y_i, one)?;
        let diff = tape.sub(margin, y_p)?;
        let term = tape.relu(diff);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one incorrect candidate"))
}

/// `l_pre + λ·l_cl`.
pub fn total_loss(
    tape: &mut Tape,
    l_pre: TensorId,
    l_cl: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::contract(format!(
            "loss trade-off weight must be nonnegative, got {lambda}"
        )));
    }
    let weighted = tape.scale(l_cl, lambda);
    tape.add(l_pre, weighted)
}
