//! Contrastive sample generation: the anchor fuses commonsense and
//! object features, the positive perturbs the anchor with Gaussian
//! noise, and the negative zero-pads the commonsense slots away.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grn::BoundingBox;
use crate::nn::LinearParams;
use crate::param::Binding;
use crate::tensor::{Tape, Tensor, TensorId};

/// Per-frame visual input: object features, their commonsense features,
/// and one bounding box per object.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectFrame {
    /// Object features, `[N × d_o]`.
    pub f_o: Tensor,
    /// Visual-commonsense features, `[N × d_vc]`.
    pub f_vc: Tensor,
    pub bboxes: Vec<BoundingBox>,
}

impl ObjectFrame {
    pub fn object_count(&self) -> usize {
        self.f_o.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_o.shape().len() != 2 || self.f_vc.shape().len() != 2 {
            return Err(Error::contract("object frame features must be 2-D"));
        }
        let n = self.f_o.shape()[0];
        if n == 0 {
            return Err(Error::contract("object frame needs at least one object"));
        }
        if self.f_vc.shape()[0] != n || self.bboxes.len() != n {
            return Err(Error::contract(format!(
                "object frame is inconsistent: {} object rows, {} commonsense rows, {} boxes",
                n,
                self.f_vc.shape()[0],
                self.bboxes.len()
            )));
        }
        for b in &self.bboxes {
            b.validate()?;
        }
        Ok(())
    }
}

/// The three fused representations flowing through the shared pipeline.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTriplet {
    pub anchor: TensorId,
    pub positive: TensorId,
    pub negative: TensorId,
}

/// How the noise scale for the positive sample is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// Population standard deviation over all entries of the anchor's
    /// pre-projection concat for the current frame.
    #[default]
    AnchorStd,
    Fixed(f64),
}

/// Fuses `[f_vc : f_o]` per object and projects it. Returns the fused
/// `[N × d]` tensor together with the pre-projection concat, which the
/// positive sample perturbs.
pub fn fuse_anchor(
    tape: &mut Tape,
    bind: &Binding,
    frame: &ObjectFrame,
    proj: &LinearParams,
) -> Result<(TensorId, TensorId)> {
    let f_vc = tape.leaf(frame.f_vc.clone());
    let f_o = tape.leaf(frame.f_o.clone());
    let raw = tape.concat(f_vc, f_o, 1)?;
    let fused = proj.apply(tape, bind, raw)?;
    Ok((fused, raw))
}

/// Population standard deviation over every entry of the tensor.
fn population_std(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Disturbs the anchor's pre-projection concat with zero-mean Gaussian
/// noise and applies the positive projection. The noise is a standard
/// normal sample scaled by sigma; identical seeds give identical noise.
pub fn make_positive(
    tape: &mut Tape,
    bind: &Binding,
    anchor_raw: TensorId,
    proj: &LinearParams,
    sigma_mode: SigmaMode,
    rng_seed: u64,
) -> Result<TensorId> {
    let sigma = match sigma_mode {
        SigmaMode::AnchorStd => population_std(tape.data(anchor_raw)),
        SigmaMode::Fixed(s) => s,
    };
    let shape = tape.shape(anchor_raw).to_vec();
    let numel: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise: Vec<f64> = (0..numel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sigma
        })
        .collect();
    let noise = tape.leaf(Tensor::new(noise, &shape)?);
    let disturbed = tape.add(anchor_raw, noise)?;
    proj.apply(tape, bind, disturbed)
}

/// Replaces the commonsense slots with exact zeros, keeping the object
/// features, and applies the negative projection. Returns the projected
/// tensor and the zero-padded pre-projection concat.
pub fn make_negative(
    tape: &mut Tape,
    bind: &Binding,
    frame: &ObjectFrame,
    proj: &LinearParams,
) -> Result<(TensorId, TensorId)> {
    let n = frame.object_count();
    let d_vc = frame.f_vc.shape()[1];
    let zeros = tape.leaf(Tensor::zeros(&[n, d_vc]));
    let f_o = tape.leaf(frame.f_o.clone());
    let raw = tape.concat(zeros, f_o, 1)?;
    let projected = proj.apply(tape, bind, raw)?;
    Ok((projected, raw))
}
