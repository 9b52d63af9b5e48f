//! Small shared building blocks: affine maps and one-hidden-layer MLPs
//! over tape tensors.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::param::{Binding, ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};

/// Inner nonlinearity used by attention logits, FFNs and MLPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Sigmoid,
    Relu,
}

impl Nonlinearity {
    pub fn apply(self, tape: &mut Tape, x: TensorId) -> TensorId {
        match self {
            Nonlinearity::Tanh => tape.tanh(x),
            Nonlinearity::Sigmoid => tape.sigmoid(x),
            Nonlinearity::Relu => tape.relu(x),
        }
    }
}

/// Weight + optional bias of an affine map `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearParams {
    pub fn alloc(set: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize) -> Self {
        LinearParams {
            w: set.alloc(&format!("{prefix}.w"), &[d_in, d_out], d_in),
            b: Some(set.alloc(&format!("{prefix}.b"), &[d_out], d_in)),
        }
    }

    /// Weight-only map. A ranking head needs no bias: a shared score
    /// offset cancels in every margin, leaving the bias unlearnable.
    pub fn alloc_no_bias(set: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize) -> Self {
        LinearParams {
            w: set.alloc(&format!("{prefix}.w"), &[d_in, d_out], d_in),
            b: None,
        }
    }

    /// Applies the map to a `[m×d_in]` matrix.
    pub fn apply(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: TensorId,
    ) -> Result<TensorId> {
        let y = tape.matmul(x, bind.of(self.w))?;
        match self.b {
            Some(b) => tape.add_bias(y, bind.of(b)),
            None => Ok(y),
        }
    }
}

/// One-hidden-layer MLP: `W2·σ(W1·x + b1) + b2`, applied row-wise.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub hidden: LinearParams,
    pub out: LinearParams,
}

impl MlpParams {
    pub fn alloc(
        set: &mut ParamSet,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        MlpParams {
            hidden: LinearParams::alloc(set, &format!("{prefix}.hidden"), d_in, d_hidden),
            out: LinearParams::alloc(set, &format!("{prefix}.out"), d_hidden, d_out),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: TensorId,
        nonlin: Nonlinearity,
    ) -> Result<TensorId> {
        let h = self.hidden.apply(tape, bind, x)?;
        let h = nonlin.apply(tape, h);
        self.out.apply(tape, bind, h)
    }
}
