//! Training/evaluation harness over the synthetic dataset: per-epoch
//! reports, the four-variant ablation runner, and attention-inspection
//! dumps.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{generate_dataset, SynthDataset, SynthInstance, SynthSpec};
use crate::error::{Error, Result};
use crate::pipeline::{train_step, Ablation, Model, ModelConfig, QaMode, SgdMomentum};

/// Instances per optimizer step.
const BATCH_SIZE: usize = 4;
/// Optimizer momentum.
const MOMENTUM: f64 = 0.9;
/// Global gradient-norm clip, stabilizing the mid-training transition.
const CLIP_NORM: f64 = 5.0;

/// Metrics for one epoch boundary. Epoch 0 is the untrained evaluation
/// and has no training loss.
#[derive(Clone, Debug, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub eval_accuracy: f64,
    /// Mean cosine of projected (anchor, positive) pairs over the eval
    /// split; absent for non-contrastive variants.
    pub sim_positive: Option<f64>,
    pub sim_negative: Option<f64>,
    /// Mean object-attention mass on the signal-carrying object.
    pub signal_attention: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub ablation: Ablation,
    pub epochs: Vec<EpochReport>,
}

impl RunReport {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map(|e| e.eval_accuracy).unwrap_or(0.0)
    }

    /// One CSV row per epoch; absent fields stay empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,train_loss,eval_accuracy,sim_positive,sim_negative,signal_attention\n",
        );
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{:.6},{},{},{:.6}\n",
                e.epoch,
                fmt(e.train_loss),
                e.eval_accuracy,
                fmt(e.sim_positive),
                fmt(e.sim_negative),
                e.signal_attention,
            ));
        }
        out
    }
}

/// Aggregate eval metrics in one pass over the eval split.
pub fn evaluate(model: &Model, eval: &[SynthInstance]) -> Result<EpochReport> {
    let mut correct = 0usize;
    let mut sim_pos_sum = 0.0;
    let mut sim_neg_sum = 0.0;
    let mut sims = 0usize;
    let mut attention_sum = 0.0;
    let mut attention_count = 0usize;
    for (idx, inst) in eval.iter().enumerate() {
        let noise_seed = 0xE7A1u64.wrapping_add(idx as u64);
        let pass = model.forward(&inst.qa, noise_seed)?;
        if pass.scores.argmax() == inst.qa.correct_index {
            correct += 1;
        }
        if let (Some(sp), Some(sn)) = (pass.sim_positive, pass.sim_negative) {
            sim_pos_sum += sp;
            sim_neg_sum += sn;
            sims += 1;
        }
        if !pass.diagnostics.object_alpha.is_empty() {
            let mass: f64 = pass
                .diagnostics
                .object_alpha
                .iter()
                .map(|frame| frame[inst.signal_object])
                .sum::<f64>()
                / pass.diagnostics.object_alpha.len() as f64;
            attention_sum += mass;
            attention_count += 1;
        }
    }
    let denom = eval.len().max(1) as f64;
    Ok(EpochReport {
        epoch: 0,
        train_loss: None,
        eval_accuracy: correct as f64 / denom,
        sim_positive: (sims > 0).then(|| sim_pos_sum / sims as f64),
        sim_negative: (sims > 0).then(|| sim_neg_sum / sims as f64),
        signal_attention: if attention_count > 0 {
            attention_sum / attention_count as f64
        } else {
            0.0
        },
    })
}

/// Trains on a pre-generated dataset and evaluates after every epoch.
/// Epoch 0 in the report is the untrained evaluation. Returns the
/// report together with the trained model.
pub fn run_training_on(
    config: &ModelConfig,
    dataset: &SynthDataset,
    epochs: usize,
    lr: f64,
) -> Result<(RunReport, Model)> {
    dataset.spec.check_config(config)?;
    let mut model = Model::new(*config)?;
    let mut opt = SgdMomentum::new(lr, MOMENTUM, model.params()).with_clip(CLIP_NORM);

    let mut report = RunReport {
        ablation: config.ablation,
        epochs: Vec::with_capacity(epochs + 1),
    };
    report.epochs.push(evaluate(&model, &dataset.eval)?);

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 1..=epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed.wrapping_mul(0x9E3779B97F4A7C15) ^ epoch as u64,
        );
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(BATCH_SIZE) {
            let batch: Vec<_> = chunk.iter().map(|&i| dataset.train[i].qa.clone()).collect();
            loss_sum += train_step(&mut model, &batch, &mut opt).map_err(|e| match e {
                Error::Numeric { op, detail } => Error::Numeric {
                    op,
                    detail: format!("{detail} (epoch {epoch})"),
                },
                other => other,
            })?;
            batches += 1;
        }
        let mut row = evaluate(&model, &dataset.eval)?;
        row.epoch = epoch;
        row.train_loss = Some(loss_sum / batches.max(1) as f64);
        report.epochs.push(row);
    }
    Ok((report, model))
}

/// Generates the dataset from the spec, then trains.
pub fn run_training(
    config: &ModelConfig,
    spec: &SynthSpec,
    epochs: usize,
    lr: f64,
) -> Result<(RunReport, Model)> {
    let dataset = generate_dataset(spec)?;
    run_training_on(config, &dataset, epochs, lr)
}

/// The four ablation rows, trained with shared seeds on one dataset.
pub const ABLATION_ORDER: [Ablation; 4] = [
    Ablation::Baseline,
    Ablation::VCOOnly,
    Ablation::MLPContrastive,
    Ablation::GRNContrastive,
];

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<(Ablation, f64)>,
    pub reports: Vec<RunReport>,
}

impl AblationTable {
    pub fn accuracy(&self, ablation: Ablation) -> f64 {
        self.rows
            .iter()
            .find(|(a, _)| *a == ablation)
            .map(|(_, acc)| *acc)
            .expect("all four rows present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("configuration,eval_accuracy\n");
        for (ablation, acc) in &self.rows {
            out.push_str(&format!("{ablation:?},{acc:.6}\n"));
        }
        out
    }
}

/// Runs all four configurations over the same generated dataset and
/// seed, reporting final eval accuracy per row.
pub fn run_ablation(
    base_config: &ModelConfig,
    spec: &SynthSpec,
    epochs: usize,
    lr: f64,
) -> Result<AblationTable> {
    let dataset = generate_dataset(spec)?;
    let mut rows = Vec::with_capacity(4);
    let mut reports = Vec::with_capacity(4);
    for ablation in ABLATION_ORDER {
        let config = ModelConfig {
            ablation,
            ..*base_config
        };
        let (report, _) = run_training_on(&config, &dataset, epochs, lr)?;
        rows.push((ablation, report.final_accuracy()));
        reports.push(report);
    }
    Ok(AblationTable { rows, reports })
}

/// JSON attention record for one instance: per-object weights keyed by
/// index and box, node-level weights, and the gated edge matrix.
#[derive(Serialize)]
struct AttentionDump<'a> {
    mode: QaMode,
    objects: Vec<ObjectAttention>,
    node_alpha: &'a [f64],
    node_kinds: &'a [crate::grn::NodeKind],
    gated_edges: &'a [Vec<f64>],
    chosen_candidate: usize,
}

#[derive(Serialize)]
struct ObjectAttention {
    index: usize,
    bbox: crate::grn::BoundingBox,
    /// One weight per frame (Eq-style object attention); empty in
    /// image mode where objects are graph nodes directly.
    alpha_per_frame: Vec<f64>,
}

/// Writes the attention record for one instance to `path`.
pub fn dump_attention(model: &Model, instance: &SynthInstance, path: &Path) -> Result<()> {
    let pass = model.forward(&instance.qa, 0xD0B5)?;
    let chosen = pass.scores.argmax();
    let n = instance.qa.frames[0].bboxes.len();
    let objects = (0..n)
        .map(|i| ObjectAttention {
            index: i,
            bbox: instance.qa.frames[0].bboxes[i],
            alpha_per_frame: pass
                .diagnostics
                .object_alpha
                .iter()
                .map(|frame| frame[i])
                .collect(),
        })
        .collect();
    let dump = AttentionDump {
        mode: model.config().mode,
        objects,
        node_alpha: &pass.diagnostics.node_alpha,
        node_kinds: &pass.diagnostics.node_kinds,
        gated_edges: &pass.diagnostics.gated_edges,
        chosen_candidate: chosen,
    };
    let mut file = std::fs::File::create(path)?;
    file.write_all(&serde_json::to_vec_pretty(&dump)?)?;
    file.write_all(b"\n")?;
    Ok(())
}
