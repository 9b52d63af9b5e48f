//! Synthetic multiple-choice QA generator with a planted commonsense
//! signal and a spurious object-feature trap.
//!
//! Each instance hides the correct answer as a one-hot pattern inside
//! one object's commonsense slice. Object features are noise, except
//! that with probability `spurious_strength` one object carries a
//! co-occurrence pattern pointing at a *wrong* answer. Candidate token
//! rows carry their own index pattern, so answering requires matching
//! the commonsense cue against candidate text; the object-feature trap
//! only ever misleads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ObjectFrame;
use crate::grn::BoundingBox;
use crate::pipeline::{ModelConfig, QAInstance};
use crate::tensor::Tensor;

/// Amplitude of the planted answer cue in the commonsense slice.
const CUE_STRENGTH: f64 = 0.6;
/// Amplitude of the misleading co-occurrence pattern in object features.
const TRAP_STRENGTH: f64 = 2.0;
/// Background noise levels.
const VC_NOISE: f64 = 0.03;
const O_NOISE: f64 = 1.0;
const TOKEN_NOISE: f64 = 0.05;
const FILLER_NOISE: f64 = 0.2;
/// Tokens per candidate answer.
const CANDIDATE_TOKENS: usize = 2;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_eval: usize,
    /// Frames per instance.
    pub t: usize,
    /// Objects per frame.
    pub n: usize,
    /// Question tokens.
    pub m_q: usize,
    /// Answer candidates.
    pub c: usize,
    /// Probability that an instance carries a misleading co-occurrence
    /// cue in the object features.
    pub spurious_strength: f64,
    /// Half-open index range of the commonsense slice carrying the
    /// answer cue.
    pub signal_dims: (usize, usize),
    pub seed: u64,
    /// Data-side feature widths; must agree with the model config.
    pub d_o: usize,
    pub d_vc: usize,
    pub d_t: usize,
    pub d_ev_in: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let m = ModelConfig::default();
        SynthSpec {
            n_train: 2000,
            n_eval: 500,
            t: 4,
            n: 4,
            m_q: 6,
            c: 4,
            spurious_strength: 0.7,
            signal_dims: (0, 4),
            seed: 7,
            d_o: m.d_o,
            d_vc: m.d_vc,
            d_t: m.d_t,
            d_ev_in: m.d_ev_in,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.m_q == 0 {
            return Err(Error::contract("spec needs t >= 1 and m_q >= 1"));
        }
        if self.n < 2 {
            return Err(Error::contract("spec needs at least 2 objects per frame"));
        }
        if self.c < 2 {
            return Err(Error::contract("spec needs at least 2 candidates"));
        }
        let (lo, hi) = self.signal_dims;
        if lo >= hi || hi > self.d_vc {
            return Err(Error::contract(format!(
                "signal dims {lo}..{hi} do not fit inside d_vc = {}",
                self.d_vc
            )));
        }
        if hi - lo < self.c {
            return Err(Error::contract(format!(
                "signal range {lo}..{hi} cannot encode {} answers",
                self.c
            )));
        }
        if self.c > self.d_t {
            return Err(Error::contract("candidate patterns need c <= d_t"));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(Error::contract(format!(
                "spurious strength must lie in [0,1], got {}",
                self.spurious_strength
            )));
        }
        Ok(())
    }

    /// Model config whose data-side dims this spec must match.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if config.d_o != self.d_o
            || config.d_vc != self.d_vc
            || config.d_t != self.d_t
            || config.d_ev_in != self.d_ev_in
        {
            return Err(Error::contract(format!(
                "spec dims (d_o={}, d_vc={}, d_t={}, d_ev_in={}) do not match \
                 config dims (d_o={}, d_vc={}, d_t={}, d_ev_in={})",
                self.d_o,
                self.d_vc,
                self.d_t,
                self.d_ev_in,
                config.d_o,
                config.d_vc,
                config.d_t,
                config.d_ev_in
            )));
        }
        Ok(())
    }
}

/// A generated instance plus the planting metadata the harness reads
/// (which object carries the signal, and the trap, if any).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthInstance {
    pub qa: QAInstance,
    pub signal_object: usize,
    /// `(object index, wrong answer index)` when the trap was planted.
    pub trap: Option<(usize, usize)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: Vec<SynthInstance>,
    pub eval: Vec<SynthInstance>,
}

/// Generates the train and eval splits. Fully determined by
/// `spec.seed`; each instance draws from its own ChaCha stream keyed by
/// (seed, split, index).
pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let train = (0..spec.n_train)
        .map(|i| generate_instance(spec, instance_seed(spec.seed, 0, i)))
        .collect();
    let eval = (0..spec.n_eval)
        .map(|i| generate_instance(spec, instance_seed(spec.seed, 1, i)))
        .collect();
    Ok(SynthDataset {
        spec: *spec,
        train,
        eval,
    })
}

fn instance_seed(seed: u64, split: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15)
        ^ split.wrapping_mul(0xBF58476D1CE4E5B9)
        ^ (index as u64).wrapping_add(0x94D049BB133111EB)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma
        })
        .collect()
}

fn generate_instance(spec: &SynthSpec, seed: u64) -> SynthInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = rng.gen_range(0..spec.c);
    let signal_object = rng.gen_range(0..spec.n);
    let context_object = (signal_object + 1 + rng.gen_range(0..spec.n - 1)) % spec.n;

    let trap = if rng.gen_bool(spec.spurious_strength) {
        let object = rng.gen_range(0..spec.n);
        let wrong = (label + 1 + rng.gen_range(0..spec.c - 1)) % spec.c;
        Some((object, wrong))
    } else {
        None
    };

    let mut frames = Vec::with_capacity(spec.t);
    for _ in 0..spec.t {
        let mut f_vc = gaussian(&mut rng, spec.n * spec.d_vc, VC_NOISE);
        f_vc[signal_object * spec.d_vc + spec.signal_dims.0 + label] += CUE_STRENGTH;

        let mut f_o = gaussian(&mut rng, spec.n * spec.d_o, O_NOISE);
        if let Some((object, wrong)) = trap {
            f_o[object * spec.d_o + wrong] += TRAP_STRENGTH;
        }

        let bboxes = layout_boxes(spec.n, signal_object, context_object, &mut rng);
        frames.push(ObjectFrame {
            f_o: Tensor::new(f_o, &[spec.n, spec.d_o]).expect("sized data"),
            f_vc: Tensor::new(f_vc, &[spec.n, spec.d_vc]).expect("sized data"),
            bboxes,
        });
    }

    let appearance = Tensor::new(
        gaussian(&mut rng, spec.t * spec.d_ev_in, FILLER_NOISE),
        &[spec.t, spec.d_ev_in],
    )
    .expect("sized data");
    let question_tokens = Tensor::new(
        gaussian(&mut rng, spec.m_q * spec.d_t, FILLER_NOISE),
        &[spec.m_q, spec.d_t],
    )
    .expect("sized data");

    let candidates = (0..spec.c)
        .map(|k| {
            let mut toks = gaussian(&mut rng, CANDIDATE_TOKENS * spec.d_t, TOKEN_NOISE);
            toks[k] += CUE_STRENGTH;
            Tensor::new(toks, &[CANDIDATE_TOKENS, spec.d_t]).expect("sized data")
        })
        .collect();

    SynthInstance {
        qa: QAInstance {
            frames,
            appearance,
            question_tokens,
            candidates,
            correct_index: label,
        },
        signal_object,
        trap,
    }
}

/// Signal and context boxes overlap; the remaining objects sit on a
/// disjoint grid in the far corner, pairwise disjoint.
fn layout_boxes(
    n: usize,
    signal: usize,
    context: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<BoundingBox> {
    let jx: f64 = rng.gen_range(0.0..5.0);
    let jy: f64 = rng.gen_range(0.0..5.0);
    let mut slot = 0usize;
    (0..n)
        .map(|i| {
            if i == signal {
                BoundingBox::new(10.0 + jx, 10.0 + jy, 30.0 + jx, 30.0 + jy)
            } else if i == context {
                BoundingBox::new(20.0 + jx, 20.0 + jy, 40.0 + jx, 40.0 + jy)
            } else {
                let (col, row) = (slot % 4, slot / 4);
                slot += 1;
                let x = 55.0 + 10.0 * col as f64;
                let y = 55.0 + 10.0 * row as f64;
                BoundingBox::new(x, y, x + 8.0, y + 8.0)
            }
            .expect("layout produces valid boxes")
        })
        .collect()
}
