//! Bidirectional single-head attention between the textual and visual
//! streams. Queries from one side score keys from the other with plain
//! dot products (no scaling), the softmaxed rows mix projected values,
//! and a feed-forward branch is added residually under a post-norm
//! layer norm. Output shapes equal input shapes.

use crate::error::Result;
use crate::nn::{MlpParams, Nonlinearity};
use crate::param::{Binding, ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};

const LN_EPS: f64 = 1e-5;

/// Projections, feed-forward and layer-norm parameters of one attention
/// direction.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub ffn: MlpParams,
    pub ln_gain: ParamId,
    pub ln_shift: ParamId,
}

impl CrossAttentionParams {
    /// `d` is the common stream width; the FFN hidden layer is `2d`.
    pub fn alloc(set: &mut ParamSet, prefix: &str, d: usize) -> Self {
        CrossAttentionParams {
            w_query: set.alloc(&format!("{prefix}.query"), &[d, d], d),
            w_key: set.alloc(&format!("{prefix}.key"), &[d, d], d),
            w_value: set.alloc(&format!("{prefix}.value"), &[d, d], d),
            ffn: MlpParams::alloc(set, &format!("{prefix}.ffn"), d, 2 * d, d),
            ln_gain: set.alloc_const(&format!("{prefix}.ln.gain"), &[d], 1.0),
            ln_shift: set.alloc_const(&format!("{prefix}.ln.shift"), &[d], 0.0),
        }
    }
}

/// One attention direction over `queries [Q × d]` and `keys [K × d]`:
/// returns the residual-normalized output `[Q × d]` and the attention
/// rows `[Q × K]`.
fn attend(
    tape: &mut Tape,
    bind: &Binding,
    queries: TensorId,
    keys: TensorId,
    params: &CrossAttentionParams,
    nonlin: Nonlinearity,
) -> Result<(TensorId, TensorId)> {
    let q = tape.matmul(queries, bind.of(params.w_query))?;
    let k = tape.matmul(keys, bind.of(params.w_key))?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let beta = tape.softmax(scores, 1)?;
    let v = tape.matmul(keys, bind.of(params.w_value))?;
    let context = tape.matmul(beta, v)?;
    let ffn_out = params.ffn.apply(tape, bind, context, nonlin)?;
    let residual = tape.add(queries, ffn_out)?;
    let out = tape.layer_norm(residual, bind.of(params.ln_gain), bind.of(params.ln_shift), LN_EPS)?;
    Ok((out, beta))
}

/// Reinforces token features by attending over the visual rows.
pub fn attend_text_over_visual(
    tape: &mut Tape,
    bind: &Binding,
    text: TensorId,
    visual: TensorId,
    params: &CrossAttentionParams,
    nonlin: Nonlinearity,
) -> Result<(TensorId, TensorId)> {
    attend(tape, bind, text, visual, params, nonlin)
}

/// Strengthens visual features by attending over the token rows.
pub fn attend_visual_over_text(
    tape: &mut Tape,
    bind: &Binding,
    visual: TensorId,
    text: TensorId,
    params: &CrossAttentionParams,
    nonlin: Nonlinearity,
) -> Result<(TensorId, TensorId)> {
    attend(tape, bind, visual, text, params, nonlin)
}

/// Both attention directions applied to one (text, visual) pair.
pub struct CrossModalState {
    /// Aggregated token features, `[M × d]`.
    pub text: TensorId,
    /// Aggregated visual features, `[K × d]`.
    pub visual: TensorId,
    /// Text-to-visual attention rows, `[M × K]`.
    pub beta_v: TensorId,
    /// Visual-to-text attention rows, `[K × M]`.
    pub beta_t: TensorId,
}

pub fn cross_modal_fuse(
    tape: &mut Tape,
    bind: &Binding,
    text: TensorId,
    visual: TensorId,
    text_side: &CrossAttentionParams,
    visual_side: &CrossAttentionParams,
    nonlin: Nonlinearity,
) -> Result<CrossModalState> {
    let (text_out, beta_v) = attend_text_over_visual(tape, bind, text, visual, text_side, nonlin)?;
    let (visual_out, beta_t) =
        attend_visual_over_text(tape, bind, visual, text, visual_side, nonlin)?;
    Ok(CrossModalState {
        text: text_out,
        visual: visual_out,
        beta_v,
        beta_t,
    })
}
