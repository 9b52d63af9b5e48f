//! Soft-attention pooling over object sets, fusion with the enhanced
//! visual feature, and GRU sequence encoding.

use crate::error::Result;
use crate::nn::{LinearParams, MlpParams, Nonlinearity};
use crate::param::{Binding, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, TensorId};

/// Output of a soft-attention pool: the pooled row and the weights that
/// produced it.
#[derive(Clone, Copy, Debug)]
pub struct AttentionResult {
    /// Pooled feature, `[1 × d]`.
    pub pooled: TensorId,
    /// Normalized weights, `[N × 1]`.
    pub weights: TensorId,
}

/// Learned scalar-logit attention: one weight column and bias shared by
/// all rows.
#[derive(Clone, Copy, Debug)]
pub struct SoftAttentionParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl SoftAttentionParams {
    pub fn alloc(set: &mut ParamSet, prefix: &str, d: usize) -> Self {
        SoftAttentionParams {
            w: set.alloc(&format!("{prefix}.w"), &[d, 1], d),
            b: set.alloc(&format!("{prefix}.b"), &[1], d),
        }
    }
}

/// Pools `[N × d]` rows into one `[1 × d]` row. Per-row logits go
/// through the inner nonlinearity, then a softmax over rows; the pooled
/// output is the weight-weighted sum of the inputs.
pub fn soft_attention(
    tape: &mut Tape,
    bind: &Binding,
    features: TensorId,
    params: &SoftAttentionParams,
    nonlin: Nonlinearity,
) -> Result<AttentionResult> {
    let raw = tape.matmul(features, bind.of(params.w))?;
    let raw = tape.add_bias(raw, bind.of(params.b))?;
    let logits = nonlin.apply(tape, raw);
    let weights = tape.softmax(logits, 0)?;
    let wt = tape.transpose(weights)?;
    let pooled = tape.matmul(wt, features)?;
    Ok(AttentionResult { pooled, weights })
}

/// Maps `concat(pooled_vco, f_ev)` through a one-hidden-layer MLP,
/// producing the enhanced commonsense-visual feature row.
pub fn enhance_visual(
    tape: &mut Tape,
    bind: &Binding,
    pooled_vco: TensorId,
    f_ev: TensorId,
    mlp: &MlpParams,
    nonlin: Nonlinearity,
) -> Result<TensorId> {
    let cat = tape.concat(pooled_vco, f_ev, 1)?;
    mlp.apply(tape, bind, cat, nonlin)
}

/// Gate and candidate parameters of a GRU cell.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_update: LinearParams,
    pub u_update: ParamId,
    pub w_reset: LinearParams,
    pub u_reset: ParamId,
    pub w_cand: LinearParams,
    pub u_cand: ParamId,
}

impl GruParams {
    pub fn alloc(set: &mut ParamSet, prefix: &str, d_in: usize, d_h: usize) -> Self {
        GruParams {
            w_update: LinearParams::alloc(set, &format!("{prefix}.update"), d_in, d_h),
            u_update: set.alloc(&format!("{prefix}.update.u"), &[d_h, d_h], d_h),
            w_reset: LinearParams::alloc(set, &format!("{prefix}.reset"), d_in, d_h),
            u_reset: set.alloc(&format!("{prefix}.reset.u"), &[d_h, d_h], d_h),
            w_cand: LinearParams::alloc(set, &format!("{prefix}.cand"), d_in, d_h),
            u_cand: set.alloc(&format!("{prefix}.cand.u"), &[d_h, d_h], d_h),
        }
    }
}

/// Left-to-right GRU over a `[T × d_in]` sequence, hidden size `d_h`:
///
/// z = sigmoid(x·Wz + h·Uz + bz)
/// r = sigmoid(x·Wr + h·Ur + br)
/// h~ = tanh(x·Wh + (r ⊙ h)·Uh + bh)
/// h' = (1 − z) ⊙ h + z ⊙ h~
///
/// Returns all hidden states stacked to `[T × d_h]`.
pub fn gru_encode(
    tape: &mut Tape,
    bind: &Binding,
    seq: TensorId,
    params: &GruParams,
    h0: TensorId,
) -> Result<TensorId> {
    let t_len = tape.shape(seq)[0];
    let d_h = tape.shape(h0)[1];
    let ones = tape.leaf(Tensor::full(&[1, d_h], 1.0));
    let mut h = h0;
    let mut out: Option<TensorId> = None;
    for t in 0..t_len {
        let x = tape.slice(seq, 0, t, t + 1)?;

        let zx = params.w_update.apply(tape, bind, x)?;
        let zh = tape.matmul(h, bind.of(params.u_update))?;
        let z_in = tape.add(zx, zh)?;
        let z = tape.sigmoid(z_in);

        let rx = params.w_reset.apply(tape, bind, x)?;
        let rh = tape.matmul(h, bind.of(params.u_reset))?;
        let r_in = tape.add(rx, rh)?;
        let r = tape.sigmoid(r_in);

        let gated = tape.mul(r, h)?;
        let cx = params.w_cand.apply(tape, bind, x)?;
        let ch = tape.matmul(gated, bind.of(params.u_cand))?;
        let c_in = tape.add(cx, ch)?;
        let cand = tape.tanh(c_in);

        let keep = tape.sub(ones, z)?;
        let kept = tape.mul(keep, h)?;
        let taken = tape.mul(z, cand)?;
        h = tape.add(kept, taken)?;

        out = Some(match out {
            None => h,
            Some(acc) => tape.concat(acc, h, 0)?,
        });
    }
    Ok(out.expect("sequence has at least one step"))
}
