//! End-to-end model: fusion → encoders → cross-modal attention →
//! graph relation stage → losses, with per-candidate scoring, the
//! three-branch contrastive pass, and SGD training.

use serde::{Deserialize, Serialize};

use crate::crossmodal::{cross_modal_fuse, CrossAttentionParams, CrossModalState};
use crate::encoders::{enhance_visual, gru_encode, soft_attention, GruParams, SoftAttentionParams};
use crate::error::{Error, Result};
use crate::fusion::{fuse_anchor, make_negative, make_positive, ObjectFrame, SigmaMode};
use crate::grn::{
    aggregate_and_update, edge_scores_with, gate_edges, graph_head, BoundingBox, HeteroGraph,
    NodeKind, PairSelectors,
};
use crate::losses::{contrastive_loss, hinge_loss, total_loss, ProjectedTriplet, ScoreVector};
use crate::nn::{LinearParams, MlpParams, Nonlinearity};
use crate::param::{bind_all, harvest, Binding, ParamSet};
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum QaMode {
    #[default]
    VideoQA,
    ImageQA,
}

/// Which parts of the module are active. The stronger variants are
/// supersets of the weaker ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Commonsense features zeroed, no contrastive branches, no
    /// relation stage.
    Baseline,
    /// Commonsense concat only.
    VCOOnly,
    /// Contrastive learning with a per-node MLP instead of the graph.
    MLPContrastive,
    /// The full graph relation network with contrastive learning.
    #[default]
    GRNContrastive,
}

impl Ablation {
    /// Positive/negative branches and the projector exist only when a
    /// contrastive variant is selected.
    pub fn contrastive(self) -> bool {
        matches!(self, Ablation::MLPContrastive | Ablation::GRNContrastive)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Object feature width.
    pub d_o: usize,
    /// Commonsense feature width.
    pub d_vc: usize,
    /// Fused representation width.
    pub d: usize,
    /// Enhanced visual feature width.
    pub d_ev: usize,
    /// Recurrent hidden width (the common stream width in video mode).
    pub d_h: usize,
    /// Head output width.
    pub d_out: usize,
    /// Projector output width.
    pub p: usize,
    /// Token feature width.
    pub d_t: usize,
    /// Appearance input width.
    pub d_ev_in: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Contrastive weight in the combined objective.
    pub lambda: f64,
    pub mode: QaMode,
    pub sigma_mode: SigmaMode,
    pub seed: u64,
    pub ablation: Ablation,
    pub nonlinearity: Nonlinearity,
    /// When set, the positive and negative branches reuse the anchor
    /// fusion weights instead of owning (W_plus, b_plus) and
    /// (W_minus, b_minus). Off by default.
    pub share_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_o: 32,
            d_vc: 8,
            d: 16,
            d_ev: 16,
            d_h: 16,
            d_out: 16,
            p: 8,
            d_t: 16,
            d_ev_in: 8,
            tau: 0.5,
            lambda: 1.7,
            mode: QaMode::VideoQA,
            sigma_mode: SigmaMode::AnchorStd,
            seed: 7,
            ablation: Ablation::GRNContrastive,
            nonlinearity: Nonlinearity::Tanh,
            share_fusion: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_o, self.d_vc, self.d, self.d_ev, self.d_h, self.d_out, self.p, self.d_t,
            self.d_ev_in,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract("every model dimension must be positive"));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::contract(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::contract(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Common width of the visual and textual streams entering the
    /// cross-modal stage.
    pub fn width(&self) -> usize {
        match self.mode {
            QaMode::VideoQA => self.d_h,
            QaMode::ImageQA => self.d,
        }
    }

    /// Contrastive weight actually used: non-contrastive ablations force
    /// it to zero.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.contrastive() {
            self.lambda
        } else {
            0.0
        }
    }
}

/// One supervised example: frames, frame-level appearance features, the
/// question tokens, and C candidate token sequences.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QAInstance {
    pub frames: Vec<ObjectFrame>,
    /// `[T × d_ev_in]`, consumed by the appearance encoder in video mode.
    pub appearance: Tensor,
    /// `[M_q × d_t]`.
    pub question_tokens: Tensor,
    /// C sequences, each `[L × d_t]`.
    pub candidates: Vec<Tensor>,
    pub correct_index: usize,
}

impl QAInstance {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::contract("instance needs at least one frame"));
        }
        if config.mode == QaMode::ImageQA && self.frames.len() != 1 {
            return Err(Error::contract(format!(
                "image mode expects a single frame, got {}",
                self.frames.len()
            )));
        }
        for f in &self.frames {
            f.validate()?;
            if f.f_o.shape()[1] != config.d_o || f.f_vc.shape()[1] != config.d_vc {
                return Err(Error::contract(format!(
                    "frame widths ({}, {}) do not match configured (d_o={}, d_vc={})",
                    f.f_o.shape()[1],
                    f.f_vc.shape()[1],
                    config.d_o,
                    config.d_vc
                )));
            }
        }
        if config.mode == QaMode::VideoQA {
            if self.appearance.shape().len() != 2
                || self.appearance.shape()[0] != self.frames.len()
                || self.appearance.shape()[1] != config.d_ev_in
            {
                return Err(Error::contract(format!(
                    "appearance shape {:?} does not match {} frames × d_ev_in={}",
                    self.appearance.shape(),
                    self.frames.len(),
                    config.d_ev_in
                )));
            }
        }
        if self.candidates.len() < 2 {
            return Err(Error::contract("instance needs at least two candidates"));
        }
        if self.correct_index >= self.candidates.len() {
            return Err(Error::contract(format!(
                "correct index {} out of range for {} candidates",
                self.correct_index,
                self.candidates.len()
            )));
        }
        for tok in std::iter::once(&self.question_tokens).chain(self.candidates.iter()) {
            if tok.shape().len() != 2 || tok.shape()[1] != config.d_t || tok.shape()[0] == 0 {
                return Err(Error::contract(format!(
                    "token tensor shape {:?} must be [len>=1 × d_t={}]",
                    tok.shape(),
                    config.d_t
                )));
            }
        }
        Ok(())
    }

    pub fn candidate_count(&self) -> usize {
        self.candidates.len()
    }
}

/// Relation stage between the cross-modal outputs and the head.
enum Relation {
    /// Nodes pass straight to the head.
    Passthrough,
    /// Residual per-node MLP, no cross-node interaction.
    NodeMlp(MlpParams),
    /// Full edge-scored, IoU-gated graph update.
    Grn { mlp_r: MlpParams, mlp_n: MlpParams },
}

struct Blocks {
    fusion_anchor: LinearParams,
    fusion_positive: Option<LinearParams>,
    fusion_negative: Option<LinearParams>,
    /// Frame-level pooling and temporal encoding, video mode only.
    obj_attn: Option<SoftAttentionParams>,
    enhance: Option<MlpParams>,
    gru_appearance: Option<GruParams>,
    gru_visual: Option<GruParams>,
    gru_text: GruParams,
    cross_text: CrossAttentionParams,
    cross_visual: CrossAttentionParams,
    relation: Relation,
    node_attn: SoftAttentionParams,
    out_proj: LinearParams,
    classifier: LinearParams,
    projector: Option<MlpParams>,
}

/// Per-forward products the harness and tests read back.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    /// Object-attention weights per frame (anchor branch, video mode).
    pub object_alpha: Vec<Vec<f64>>,
    /// Node-attention weights of the argmax candidate's anchor pass.
    pub node_alpha: Vec<f64>,
    /// Gated edge matrix of the argmax candidate's anchor pass.
    pub gated_edges: Vec<Vec<f64>>,
    pub node_kinds: Vec<NodeKind>,
    /// Boxes aligned with the visual nodes (image mode only).
    pub boxes: Vec<Option<BoundingBox>>,
}

/// Everything produced by one training-mode forward pass. The tape is
/// kept alive so callers can run backward.
pub struct ForwardPass {
    pub tape: Tape,
    pub binding: Binding,
    pub scores: ScoreVector,
    /// `[C]` tensor of candidate scores on the tape.
    pub scores_id: TensorId,
    /// Hinge ranking loss on the tape.
    pub pre_loss: TensorId,
    /// Contrastive loss node, when the variant builds one.
    pub contrastive: Option<TensorId>,
    /// Value of the contrastive term (exactly 0.0 when disabled).
    pub contrastive_value: f64,
    /// Combined objective on the tape.
    pub total: TensorId,
    pub total_value: f64,
    /// Cosine similarities of the projected (anchor, positive) and
    /// (anchor, negative) pairs, when the triplet was built.
    pub sim_positive: Option<f64>,
    pub sim_negative: Option<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Copy, PartialEq)]
enum BranchKind {
    Anchor,
    Positive,
    Negative,
}

pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    blocks: Blocks,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut set = ParamSet::new(config.seed);
        let w = config.width();
        let fused_in = config.d_vc + config.d_o;

        let fusion_anchor = LinearParams::alloc(&mut set, "fusion.anchor", fused_in, config.d);
        let (fusion_positive, fusion_negative, projector) = if config.ablation.contrastive() {
            let own_branches = !config.share_fusion;
            (
                own_branches
                    .then(|| LinearParams::alloc(&mut set, "fusion.positive", fused_in, config.d)),
                own_branches
                    .then(|| LinearParams::alloc(&mut set, "fusion.negative", fused_in, config.d)),
                Some(MlpParams::alloc(&mut set, "projector", config.d_out, config.d_out, config.p)),
            )
        } else {
            (None, None, None)
        };

        // Residual relation branches start at identity: their output
        // layers begin at zero so the untrained stage adds no noise to
        // the scoring path and switches on as it learns.
        let mut zero_out = |set: &mut ParamSet, mlp: &MlpParams| {
            set.get_mut(mlp.out.w).value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
            if let Some(b) = mlp.out.b {
                set.get_mut(b).value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        };
        let relation = match config.ablation {
            Ablation::Baseline | Ablation::VCOOnly => Relation::Passthrough,
            Ablation::MLPContrastive => {
                let mlp = MlpParams::alloc(&mut set, "node_mlp", w, 2 * w, w);
                zero_out(&mut set, &mlp);
                Relation::NodeMlp(mlp)
            }
            Ablation::GRNContrastive => {
                let mlp_r = MlpParams::alloc(&mut set, "grn.edge_mlp", 2 * w, 2 * w, 1);
                let mlp_n = MlpParams::alloc(&mut set, "grn.node_mlp", w + 2, 2 * w, w);
                zero_out(&mut set, &mlp_n);
                Relation::Grn { mlp_r, mlp_n }
            }
        };

        let video = config.mode == QaMode::VideoQA;
        let blocks = Blocks {
            fusion_anchor,
            fusion_positive,
            fusion_negative,
            obj_attn: video
                .then(|| SoftAttentionParams::alloc(&mut set, "object_attention", config.d)),
            enhance: video.then(|| {
                MlpParams::alloc(
                    &mut set,
                    "enhance",
                    config.d + config.d_ev,
                    2 * config.d,
                    config.d,
                )
            }),
            gru_appearance: video
                .then(|| GruParams::alloc(&mut set, "gru.appearance", config.d_ev_in, config.d_ev)),
            gru_visual: video.then(|| GruParams::alloc(&mut set, "gru.visual", config.d, w)),
            gru_text: GruParams::alloc(&mut set, "gru.text", config.d_t, w),
            cross_text: CrossAttentionParams::alloc(&mut set, "cross.text_over_visual", w),
            cross_visual: CrossAttentionParams::alloc(&mut set, "cross.visual_over_text", w),
            relation,
            node_attn: SoftAttentionParams::alloc(&mut set, "node_attention", w),
            out_proj: LinearParams::alloc(&mut set, "head.out_proj", 2 * w, config.d_out),
            classifier: LinearParams::alloc_no_bias(&mut set, "head.classifier", config.d_out, 1),
            projector,
        };

        Ok(Model {
            config,
            params: set,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Training-mode pass: candidate scores, ranking loss, and in
    /// contrastive variants the triplet loss built on the
    /// question⊕correct-candidate encoding.
    pub fn forward(&self, instance: &QAInstance, noise_seed: u64) -> Result<ForwardPass> {
        self.forward_inner(instance, noise_seed, self.config.ablation.contrastive())
    }

    /// Chosen candidate index; ties break toward the lowest index.
    pub fn predict(&self, instance: &QAInstance) -> Result<usize> {
        let pass = self.forward_inner(instance, 0, false)?;
        Ok(pass.scores.argmax())
    }

    fn forward_inner(
        &self,
        instance: &QAInstance,
        noise_seed: u64,
        want_contrastive: bool,
    ) -> Result<ForwardPass> {
        instance.validate(&self.config)?;
        let want_contrastive = want_contrastive && self.config.ablation.contrastive();
        let cfg = &self.config;
        let nonlin = cfg.nonlinearity;
        let mut tape = Tape::with_capacity(4096);
        let bind = bind_all(&mut tape, &self.params);

        // Commonsense features are zeroed at the input in the baseline
        // variant; the parameter shapes stay identical.
        let frames: Vec<ObjectFrame> = if cfg.ablation == Ablation::Baseline {
            instance
                .frames
                .iter()
                .map(|f| ObjectFrame {
                    f_o: f.f_o.clone(),
                    f_vc: Tensor::zeros(f.f_vc.shape()),
                    bboxes: f.bboxes.clone(),
                })
                .collect()
        } else {
            instance.frames.clone()
        };

        // Appearance encoding is branch-independent.
        let f_ev = match cfg.mode {
            QaMode::VideoQA => {
                let seq = tape.leaf(instance.appearance.clone());
                let h0 = tape.leaf(Tensor::zeros(&[1, cfg.d_ev]));
                let gru = self.blocks.gru_appearance.as_ref().expect("video blocks");
                Some(gru_encode(&mut tape, &bind, seq, gru, h0)?)
            }
            QaMode::ImageQA => None,
        };

        // Anchor visual stream, with per-frame attention diagnostics.
        let mut object_alpha = Vec::new();
        let anchor_visual = self.visual_stream(
            &mut tape,
            &bind,
            &frames,
            f_ev,
            BranchKind::Anchor,
            noise_seed,
            Some(&mut object_alpha),
        )?;

        let (pos_visual, neg_visual) = if want_contrastive {
            let p = self.visual_stream(
                &mut tape,
                &bind,
                &frames,
                f_ev,
                BranchKind::Positive,
                noise_seed,
                None,
            )?;
            let n = self.visual_stream(
                &mut tape,
                &bind,
                &frames,
                f_ev,
                BranchKind::Negative,
                noise_seed,
                None,
            )?;
            (Some(p), Some(n))
        } else {
            (None, None)
        };

        let boxes: Option<Vec<BoundingBox>> = match cfg.mode {
            QaMode::ImageQA => Some(frames[0].bboxes.clone()),
            QaMode::VideoQA => None,
        };

        // Selection matrices are shared by every graph pass with the
        // same node count.
        let mut selectors: Vec<(usize, PairSelectors)> = Vec::new();

        // Score every candidate through the anchor branch.
        let mut score_ids = Vec::with_capacity(instance.candidates.len());
        let mut per_candidate_diag = Vec::with_capacity(instance.candidates.len());
        let mut correct_pass = None;
        for (c, cand) in instance.candidates.iter().enumerate() {
            let q = tape.leaf(instance.question_tokens.clone());
            let a = tape.leaf(cand.clone());
            let tokens = tape.concat(q, a, 0)?;
            let h0 = tape.leaf(Tensor::zeros(&[1, cfg.width()]));
            let text = gru_encode(&mut tape, &bind, tokens, &self.blocks.gru_text, h0)?;
            let (out, diag) = self.interaction_stack(
                &mut tape,
                &bind,
                text,
                anchor_visual,
                boxes.as_deref(),
                &mut selectors,
            )?;
            if c == instance.correct_index {
                correct_pass = Some((text, out));
            }
            let score = self.blocks.classifier.apply(&mut tape, &bind, out)?;
            let score = tape.reshape(score, &[1])?;
            score_ids.push(score);
            per_candidate_diag.push(diag);
        }

        let mut scores_id = score_ids[0];
        for s in &score_ids[1..] {
            scores_id = tape.concat(scores_id, *s, 0)?;
        }
        let scores = ScoreVector::new(tape.data(scores_id).to_vec(), instance.correct_index)?;
        let pre_loss = hinge_loss(&mut tape, scores_id, instance.correct_index)?;

        // Triplet branches share the correct candidate's text encoding.
        let mut contrastive = None;
        let mut contrastive_value = 0.0;
        let (mut sim_positive, mut sim_negative) = (None, None);
        if want_contrastive {
            let (text, anchor_out) = correct_pass.expect("correct candidate was scored");
            let projector = self.blocks.projector.as_ref().expect("contrastive variant");
            let (pos_out, _) = self.interaction_stack(
                &mut tape,
                &bind,
                text,
                pos_visual.expect("positive branch built"),
                boxes.as_deref(),
                &mut selectors,
            )?;
            let (neg_out, _) = self.interaction_stack(
                &mut tape,
                &bind,
                text,
                neg_visual.expect("negative branch built"),
                boxes.as_deref(),
                &mut selectors,
            )?;
            let triplet = ProjectedTriplet {
                anchor: projector.apply(&mut tape, &bind, anchor_out, nonlin)?,
                positive: projector.apply(&mut tape, &bind, pos_out, nonlin)?,
                negative: projector.apply(&mut tape, &bind, neg_out, nonlin)?,
            };
            let l_cl = contrastive_loss(&mut tape, &triplet, cfg.tau)?;
            contrastive_value = tape.data(l_cl)[0];
            contrastive = Some(l_cl);
            let sp = tape.cosine_similarity(triplet.anchor, triplet.positive)?;
            let sn = tape.cosine_similarity(triplet.anchor, triplet.negative)?;
            sim_positive = Some(tape.data(sp)[0]);
            sim_negative = Some(tape.data(sn)[0]);
        }

        let total = match contrastive {
            Some(l_cl) => total_loss(&mut tape, pre_loss, l_cl, cfg.effective_lambda())?,
            None => pre_loss,
        };
        let total_value = tape.data(total)[0];

        // Attach the argmax candidate's graph diagnostics.
        let chosen = scores.argmax();
        let (node_alpha, gated_edges, node_kinds, diag_boxes) =
            per_candidate_diag.swap_remove(chosen);
        let node_alpha = tape.data(node_alpha).to_vec();

        Ok(ForwardPass {
            tape,
            binding: bind,
            scores,
            scores_id,
            pre_loss,
            contrastive,
            contrastive_value,
            total,
            total_value,
            sim_positive,
            sim_negative,
            diagnostics: Diagnostics {
                object_alpha,
                node_alpha,
                gated_edges,
                node_kinds,
                boxes: diag_boxes,
            },
        })
    }

    /// Branch-specific visual stream ending at the `[K × width]`
    /// tensor that enters the cross-modal stage.
    #[allow(clippy::too_many_arguments)]
    fn visual_stream(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        frames: &[ObjectFrame],
        f_ev: Option<TensorId>,
        branch: BranchKind,
        noise_seed: u64,
        mut alpha_out: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let nonlin = cfg.nonlinearity;

        let mut fused_frames = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let fused = match branch {
                BranchKind::Anchor => fuse_anchor(tape, bind, frame, &self.blocks.fusion_anchor)?.0,
                BranchKind::Positive => {
                    let (_, raw) = fuse_anchor(tape, bind, frame, &self.blocks.fusion_anchor)?;
                    let proj = self
                        .blocks
                        .fusion_positive
                        .as_ref()
                        .unwrap_or(&self.blocks.fusion_anchor);
                    make_positive(
                        tape,
                        bind,
                        raw,
                        proj,
                        cfg.sigma_mode,
                        mix_seed(noise_seed, t as u64),
                    )?
                }
                BranchKind::Negative => {
                    let proj = self
                        .blocks
                        .fusion_negative
                        .as_ref()
                        .unwrap_or(&self.blocks.fusion_anchor);
                    make_negative(tape, bind, frame, proj)?.0
                }
            };
            fused_frames.push(fused);
        }

        match cfg.mode {
            QaMode::ImageQA => Ok(fused_frames[0]),
            QaMode::VideoQA => {
                let f_ev = f_ev.expect("video mode encodes appearance");
                let obj_attn = self.blocks.obj_attn.as_ref().expect("video blocks");
                let enhance = self.blocks.enhance.as_ref().expect("video blocks");
                let gru_visual = self.blocks.gru_visual.as_ref().expect("video blocks");
                let mut rows: Option<TensorId> = None;
                for (t, fused) in fused_frames.into_iter().enumerate() {
                    let att = soft_attention(tape, bind, fused, obj_attn, nonlin)?;
                    if let Some(alphas) = alpha_out.as_deref_mut() {
                        alphas.push(tape.data(att.weights).to_vec());
                    }
                    let ev_row = tape.slice(f_ev, 0, t, t + 1)?;
                    let enhanced =
                        enhance_visual(tape, bind, att.pooled, ev_row, enhance, nonlin)?;
                    rows = Some(match rows {
                        None => enhanced,
                        Some(acc) => tape.concat(acc, enhanced, 0)?,
                    });
                }
                let seq = rows.expect("at least one frame");
                let h0 = tape.leaf(Tensor::zeros(&[1, cfg.width()]));
                gru_encode(tape, bind, seq, gru_visual, h0)
            }
        }
    }

    /// Cross-modal fusion, the relation stage, and the head for one
    /// (text, visual) pair. Returns the head output and the graph
    /// diagnostics (node attention, gated edges, kinds, boxes).
    fn interaction_stack(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        text: TensorId,
        visual: TensorId,
        boxes: Option<&[BoundingBox]>,
        selectors: &mut Vec<(usize, PairSelectors)>,
    ) -> Result<(TensorId, CandidateDiag)> {
        let nonlin = self.config.nonlinearity;
        let state: CrossModalState = cross_modal_fuse(
            tape,
            bind,
            text,
            visual,
            &self.blocks.cross_text,
            &self.blocks.cross_visual,
            nonlin,
        )?;

        let mut graph = HeteroGraph::build(tape, state.visual, state.text, boxes)?;
        let updated = match &self.blocks.relation {
            Relation::Passthrough => graph.nodes,
            Relation::NodeMlp(mlp) => {
                let delta = mlp.apply(tape, bind, graph.nodes, nonlin)?;
                tape.add(graph.nodes, delta)?
            }
            Relation::Grn { mlp_r, mlp_n } => {
                let n = graph.node_count();
                if !selectors.iter().any(|(k, _)| *k == n) {
                    let built = PairSelectors::build(tape, n)?;
                    selectors.push((n, built));
                }
                let sel = &selectors.iter().find(|(k, _)| *k == n).expect("just built").1;
                edge_scores_with(tape, bind, &mut graph, mlp_r, nonlin, sel)?;
                gate_edges(tape, &mut graph)?;
                aggregate_and_update(tape, bind, &graph, mlp_n, nonlin)?.updated
            }
        };

        // Host multimodal stand-in: the mean over aggregated token rows.
        let f_m = tape.mean_axis(state.text, 0)?;
        let (out, pooled) = graph_head(
            tape,
            bind,
            updated,
            &self.blocks.node_attn,
            f_m,
            &self.blocks.out_proj,
            nonlin,
        )?;
        let gated = graph.gated_matrix(tape);
        Ok((out, (pooled.weights, gated, graph.kinds.clone(), graph.boxes.clone())))
    }

    /// Central-difference check of d(total loss)/d(parameter) for every
    /// parameter coordinate on one instance. Returns the worst relative
    /// error.
    pub fn parameter_gradient_check(&mut self, instance: &QAInstance, h: f64) -> Result<f64> {
        let noise_seed = 0xF1D0;
        self.params.zero_grads();
        let pass = self.forward(instance, noise_seed)?;
        let mut tape = pass.tape;
        tape.backward(pass.total)?;
        harvest(&tape, &pass.binding, &mut self.params);
        let grads: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|p| p.value().grad().expect("harvested").to_vec())
            .collect();

        let mut worst = 0.0f64;
        for pi in 0..self.params.len() {
            for ci in 0..grads[pi].len() {
                let pid = crate::param::ParamId(pi);
                let orig = self.params.get(pid).value().data()[ci];
                self.params.get_mut(pid).value_mut().data_mut()[ci] = orig + h;
                let up = self.forward(instance, noise_seed)?.total_value;
                self.params.get_mut(pid).value_mut().data_mut()[ci] = orig - h;
                let down = self.forward(instance, noise_seed)?.total_value;
                self.params.get_mut(pid).value_mut().data_mut()[ci] = orig;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(crate::gradcheck::relative_error(grads[pi][ci], numeric));
            }
        }
        Ok(worst)
    }
}

type CandidateDiag = (TensorId, Vec<Vec<f64>>, Vec<NodeKind>, Vec<Option<BoundingBox>>);

fn mix_seed(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_add(0xD1B54A32D192ED03)
}

/// Deterministic random instance sized for pipeline-level checks.
pub fn synthetic_instance(
    config: &ModelConfig,
    seed: u64,
    frames: usize,
    objects: usize,
    candidates: usize,
    scale: f64,
) -> QAInstance {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    };
    let frame_count = if config.mode == QaMode::ImageQA { 1 } else { frames };
    let mut frame_list = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let f_o = uniform(objects * config.d_o);
        let f_vc = uniform(objects * config.d_vc);
        let bboxes = (0..objects)
            .map(|i| {
                let base = i as f64 * 1.5;
                BoundingBox::new(base, base, base + 2.0, base + 2.0).expect("valid box")
            })
            .collect();
        frame_list.push(ObjectFrame {
            f_o: Tensor::new(f_o, &[objects, config.d_o]).expect("sized data"),
            f_vc: Tensor::new(f_vc, &[objects, config.d_vc]).expect("sized data"),
            bboxes,
        });
    }
    let appearance = uniform(frame_count * config.d_ev_in);
    let question = uniform(2 * config.d_t);
    let candidates = (0..candidates)
        .map(|_| Tensor::new(uniform(config.d_t), &[1, config.d_t]).expect("sized data"))
        .collect();
    QAInstance {
        frames: frame_list,
        appearance: Tensor::new(appearance, &[frame_count, config.d_ev_in]).expect("sized data"),
        question_tokens: Tensor::new(question, &[2, config.d_t]).expect("sized data"),
        candidates,
        correct_index: 0,
    }
}

/// Model + instance fixture for end-to-end derivative verification.
///
/// The evaluation point matters for central differences at h = 1e−5:
/// parameters are rescaled to a mid-training magnitude and the inputs
/// drawn slightly wide, so that every coordinate's true derivative sits
/// safely above the floating-point noise of the two loss evaluations.
/// Derivative correctness itself is point-independent.
pub fn gradcheck_fixture(mode: QaMode) -> Result<(Model, QAInstance)> {
    let config = ModelConfig {
        d_o: 8,
        d_vc: 4,
        d: 6,
        d_ev: 6,
        d_h: 6,
        d_out: 8,
        p: 4,
        d_t: 6,
        d_ev_in: 4,
        seed: 11,
        mode,
        ablation: Ablation::GRNContrastive,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config)?;
    for p in model.params_mut().iter_mut() {
        p.value_mut().data_mut().iter_mut().for_each(|v| *v *= 1.6);
    }
    // Identity-start layers (zeroed residual outputs, layer-norm
    // shifts) get generic values: derivatives are checked at a point
    // without structural zeros.
    {
        use rand::{Rng, SeedableRng};
        let zeroed: Vec<String> = model
            .params()
            .iter()
            .filter(|p| p.value().data().iter().all(|v| *v == 0.0))
            .map(|p| p.name().to_string())
            .collect();
        for name in zeroed {
            let pid = model.params().lookup(&name).expect("listed above");
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xF00D ^ name.len() as u64);
            let fan = model.params().get(pid).value().shape()[0].max(1) as f64;
            let bound = 1.6 / fan.sqrt();
            for v in model.params_mut().get_mut(pid).value_mut().data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }
    let mut instance = match mode {
        QaMode::VideoQA => synthetic_instance(&config, 7, 2, 2, 2, 1.2),
        QaMode::ImageQA => synthetic_instance(&config, 19, 1, 3, 2, 1.2),
    };
    if mode == QaMode::ImageQA {
        // Overlapping pair plus disjoint pairs: the gate mask is mixed.
        instance.frames[0].bboxes = vec![
            BoundingBox::new(0.0, 0.0, 2.0, 2.0)?,
            BoundingBox::new(1.0, 1.0, 3.0, 3.0)?,
            BoundingBox::new(10.0, 10.0, 12.0, 12.0)?,
        ];
    }
    Ok((model, instance))
}

/// Plain SGD with momentum and optional global gradient-norm clipping;
/// velocity buffers are keyed by parameter order.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    /// Rescale the whole gradient when its L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
    pub step: u64,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, params: &ParamSet) -> Self {
        let velocity = params.iter().map(|p| vec![0.0; p.value().numel()]).collect();
        SgdMomentum {
            lr,
            momentum,
            clip_norm: None,
            velocity,
            step: 0,
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    fn apply(&mut self, params: &mut ParamSet) {
        let mut scale = 1.0;
        if let Some(clip) = self.clip_norm {
            let sq: f64 = params
                .iter()
                .flat_map(|p| p.value().grad().expect("gradients populated"))
                .map(|g| g * g)
                .sum();
            let norm = sq.sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        for (pi, vel) in self.velocity.iter_mut().enumerate() {
            let pid = crate::param::ParamId(pi);
            let p = params.get_mut(pid).value_mut();
            let grads: Vec<f64> = p.grad().expect("gradients populated").to_vec();
            for (ci, g) in grads.iter().enumerate() {
                vel[ci] = self.momentum * vel[ci] + g * scale;
                p.data_mut()[ci] -= self.lr * vel[ci];
            }
        }
    }
}

/// One optimizer step over a batch: mean total loss is backpropagated,
/// parameters update once, and the pre-update mean loss is returned.
pub fn train_step(
    model: &mut Model,
    batch: &[QAInstance],
    opt: &mut SgdMomentum,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("train step needs a nonempty batch"));
    }
    model.params.zero_grads();
    let inv = 1.0 / batch.len() as f64;
    let mut mean_loss = 0.0;
    for (idx, instance) in batch.iter().enumerate() {
        let noise_seed = mix_seed(model.config.seed ^ opt.step, idx as u64);
        let pass = model.forward(instance, noise_seed)?;
        if !pass.total_value.is_finite() {
            return Err(Error::numeric(
                "train_step",
                format!("non-finite loss {} at batch instance {idx}", pass.total_value),
            ));
        }
        mean_loss += pass.total_value * inv;
        let mut tape = pass.tape;
        let scaled = tape.scale(pass.total, inv);
        tape.backward(scaled)?;
        harvest(&tape, &pass.binding, &mut model.params);
    }
    opt.apply(&mut model.params);
    opt.step += 1;
    Ok(mean_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(ablation: Ablation, mode: QaMode) -> ModelConfig {
        ModelConfig {
            d_o: 4,
            d_vc: 2,
            d: 3,
            d_ev: 3,
            d_h: 3,
            d_out: 4,
            p: 2,
            d_t: 3,
            d_ev_in: 2,
            tau: 0.5,
            lambda: 1.7,
            mode,
            sigma_mode: SigmaMode::AnchorStd,
            seed: 11,
            ablation,
            nonlinearity: Nonlinearity::Tanh,
            share_fusion: false,
        }
    }

    fn toy_instance(config: &ModelConfig, seed: u64, t: usize, n: usize, c: usize) -> QAInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frames = Vec::new();
        let frame_count = if config.mode == QaMode::ImageQA { 1 } else { t };
        for _ in 0..frame_count {
            let f_o: Vec<f64> = (0..n * config.d_o).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f_vc: Vec<f64> = (0..n * config.d_vc).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bboxes = (0..n)
                .map(|i| {
                    let base = i as f64 * 1.5;
                    BoundingBox::new(base, base, base + 2.0, base + 2.0).unwrap()
                })
                .collect();
            frames.push(ObjectFrame {
                f_o: Tensor::new(f_o, &[n, config.d_o]).unwrap(),
                f_vc: Tensor::new(f_vc, &[n, config.d_vc]).unwrap(),
                bboxes,
            });
        }
        let appearance: Vec<f64> = (0..frame_count * config.d_ev_in)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let question: Vec<f64> = (0..2 * config.d_t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let candidates = (0..c)
            .map(|_| {
                let toks: Vec<f64> =
                    (0..config.d_t).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::new(toks, &[1, config.d_t]).unwrap()
            })
            .collect();
        QAInstance {
            frames,
            appearance: Tensor::new(appearance, &[frame_count, config.d_ev_in]).unwrap(),
            question_tokens: Tensor::new(question, &[2, config.d_t]).unwrap(),
            candidates,
            correct_index: 0,
        }
    }

    #[test]
    fn branch_specific_parameters_are_exactly_the_fusion_pair() {
        let model = Model::new(small_config(Ablation::GRNContrastive, QaMode::VideoQA)).unwrap();
        let branch_params: Vec<&str> = model
            .params()
            .iter()
            .map(|p| p.name())
            .filter(|n| n.contains("positive") || n.contains("negative"))
            .collect();
        let mut expected = vec![
            "fusion.negative.b",
            "fusion.negative.w",
            "fusion.positive.b",
            "fusion.positive.w",
        ];
        let mut got = branch_params.clone();
        got.sort_unstable();
        expected.sort_unstable();
        assert_eq!(got, expected);
    }

    #[test]
    fn baseline_allocates_no_contrastive_path_parameters() {
        let model = Model::new(small_config(Ablation::Baseline, QaMode::VideoQA)).unwrap();
        for p in model.params().iter() {
            assert!(
                !p.name().contains("positive")
                    && !p.name().contains("negative")
                    && !p.name().contains("projector"),
                "unexpected contrastive parameter {}",
                p.name()
            );
        }
        let cfg = small_config(Ablation::Baseline, QaMode::VideoQA);
        let instance = toy_instance(&cfg, 5, 2, 2, 2);
        let pass = model.forward(&instance, 99).unwrap();
        assert_eq!(pass.contrastive_value, 0.0);
        assert!(pass.contrastive.is_none());
        assert_eq!(cfg.effective_lambda(), 0.0);
    }

    #[test]
    fn shared_parameters_are_bitwise_equal_across_ablations() {
        let grn = Model::new(small_config(Ablation::GRNContrastive, QaMode::VideoQA)).unwrap();
        let base = Model::new(small_config(Ablation::Baseline, QaMode::VideoQA)).unwrap();
        for p in base.params().iter() {
            let other = grn.params().lookup(p.name()).expect("shared parameter");
            assert_eq!(
                p.value().data(),
                grn.params().get(other).value().data(),
                "{} differs across ablations",
                p.name()
            );
        }
    }

    #[test]
    fn vco_only_never_constructs_triplet_branches() {
        let cfg = small_config(Ablation::VCOOnly, QaMode::VideoQA);
        let model = Model::new(cfg).unwrap();
        let instance = toy_instance(&cfg, 5, 2, 2, 2);
        let with_request = model.forward_inner(&instance, 3, true).unwrap();
        let without = model.forward_inner(&instance, 3, false).unwrap();
        // Requesting the contrastive term changes nothing: the branches
        // do not exist in this variant.
        assert_eq!(with_request.tape.node_count(), without.tape.node_count());
        assert_eq!(with_request.contrastive_value, 0.0);
    }

    #[test]
    fn contrastive_variant_builds_more_nodes_than_score_pass() {
        let cfg = small_config(Ablation::GRNContrastive, QaMode::VideoQA);
        let model = Model::new(cfg).unwrap();
        let instance = toy_instance(&cfg, 5, 2, 2, 2);
        let full = model.forward(&instance, 3).unwrap();
        let lean = model.forward_inner(&instance, 3, false).unwrap();
        assert!(full.tape.node_count() > lean.tape.node_count());
        assert!(full.contrastive.is_some());
        assert!(full.sim_positive.is_some() && full.sim_negative.is_some());
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let cfg = small_config(Ablation::GRNContrastive, QaMode::VideoQA);
        let model = Model::new(cfg).unwrap();
        let instance = toy_instance(&cfg, 8, 2, 2, 3);
        let a = model.forward(&instance, 42).unwrap();
        let b = model.forward(&instance, 42).unwrap();
        assert_eq!(a.scores.scores, b.scores.scores);
        assert_eq!(a.total_value, b.total_value);
        let c = model.forward(&instance, 43).unwrap();
        assert_eq!(a.scores.scores, c.scores.scores, "scores ignore the noise seed");
        assert_ne!(a.contrastive_value, c.contrastive_value);
    }

    #[test]
    fn identical_candidates_score_identically() {
        let cfg = small_config(Ablation::GRNContrastive, QaMode::VideoQA);
        let model = Model::new(cfg).unwrap();
        let mut instance = toy_instance(&cfg, 8, 2, 2, 2);
        instance.candidates[1] = instance.candidates[0].clone();
        let pass = model.forward(&instance, 1).unwrap();
        assert_eq!(pass.scores.scores[0], pass.scores.scores[1]);
    }

    #[test]
    fn predict_is_invariant_to_classifier_scaling() {
        let cfg = small_config(Ablation::GRNContrastive, QaMode::VideoQA);
        let mut model = Model::new(cfg).unwrap();
        let instance = toy_instance(&cfg, 8, 2, 2, 3);
        let before = model.predict(&instance).unwrap();
        for pid in [model.blocks.classifier.w] {
            model
                .params
                .get_mut(pid)
                .value_mut()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 37.5);
        }
        assert_eq!(model.predict(&instance).unwrap(), before);
    }

    #[test]
    fn video_mode_ignores_box_contents() {
        let cfg = small_config(Ablation::GRNContrastive, QaMode::VideoQA);
        let model = Model::new(cfg).unwrap();
        let mut instance = toy_instance(&cfg, 8, 2, 2, 2);
        let a = model.forward(&instance, 7).unwrap();
        for f in &mut instance.frames {
            f.bboxes = vec![BoundingBox::new(100.0, 100.0, 101.0, 101.0).unwrap(); 2];
        }
        let b = model.forward(&instance, 7).unwrap();
        assert_eq!(a.scores.scores, b.scores.scores);
        assert_eq!(a.total_value, b.total_value);
    }

    #[test]
    fn full_model_gradients_video_mode() {
        let (mut model, instance) = gradcheck_fixture(QaMode::VideoQA).unwrap();
        let err = model.parameter_gradient_check(&instance, 1e-5).unwrap();
        assert!(err < 1e-4, "worst relative error {err}");
    }

    #[test]
    fn full_model_gradients_image_mode_with_gating() {
        let (mut model, instance) = gradcheck_fixture(QaMode::ImageQA).unwrap();
        let err = model.parameter_gradient_check(&instance, 1e-5).unwrap();
        assert!(err < 1e-4, "worst relative error {err}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bitwise() {
        let cfg = small_config(Ablation::GRNContrastive, QaMode::VideoQA);
        let mut model = Model::new(cfg).unwrap();
        let instance = toy_instance(&cfg, 3, 2, 2, 2);
        let before: Vec<Vec<f64>> = model.params().iter().map(|p| p.value().data().to_vec()).collect();
        let mut opt = SgdMomentum::new(0.0, 0.9, model.params());
        train_step(&mut model, &[instance], &mut opt).unwrap();
        let after: Vec<Vec<f64>> = model.params().iter().map(|p| p.value().data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn satisfied_margins_with_zero_lambda_give_zero_loss_and_zero_gradients() {
        let cfg = small_config(Ablation::VCOOnly, QaMode::VideoQA);
        let mut model = Model::new(cfg).unwrap();
        let instance = toy_instance(&cfg, 12, 2, 2, 2);

        // Rescale the classifier so the correct candidate wins by a
        // margin over 1; hinge then sits at exactly zero.
        let pass = model.forward(&instance, 0).unwrap();
        let gap = pass.scores.scores[0] - pass.scores.scores[1];
        assert!(gap.abs() > 1e-9, "degenerate toy instance");
        let factor = 2.0 / gap;
        for pid in [model.blocks.classifier.w] {
            model
                .params
                .get_mut(pid)
                .value_mut()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= factor);
        }

        let before: Vec<Vec<f64>> = model.params().iter().map(|p| p.value().data().to_vec()).collect();
        let mut opt = SgdMomentum::new(1e-3, 0.9, model.params());
        let loss = train_step(&mut model, &[instance], &mut opt).unwrap();
        assert_eq!(loss, 0.0);
        for p in model.params().iter() {
            assert!(p.value().grad().unwrap().iter().all(|g| *g == 0.0));
        }
        let after: Vec<Vec<f64>> = model.params().iter().map(|p| p.value().data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn single_step_descends_in_most_trials() {
        let cfg = small_config(Ablation::GRNContrastive, QaMode::VideoQA);
        let mut violations = 0;
        for trial in 0..20u64 {
            let mut local = cfg;
            local.seed = 100 + trial;
            let mut model = Model::new(local).unwrap();
            let instance = toy_instance(&local, 200 + trial, 2, 2, 2);
            let before = model.forward(&instance, 0).unwrap().total_value;
            let mut opt = SgdMomentum::new(1e-3, 0.9, model.params());
            train_step(&mut model, std::slice::from_ref(&instance), &mut opt).unwrap();
            let after = model.forward(&instance, 0).unwrap().total_value;
            if after > before {
                violations += 1;
            }
        }
        assert!(violations <= 2, "{violations} of 20 trials increased the loss");
    }

    #[test]
    fn rejects_mismatched_instances() {
        let cfg = small_config(Ablation::GRNContrastive, QaMode::VideoQA);
        let model = Model::new(cfg).unwrap();
        let mut instance = toy_instance(&cfg, 3, 2, 2, 2);
        instance.correct_index = 5;
        assert!(matches!(
            model.forward(&instance, 0),
            Err(Error::Contract { .. })
        ));

        let mut other = toy_instance(&cfg, 3, 2, 2, 2);
        other.question_tokens = Tensor::zeros(&[2, 7]);
        assert!(model.forward(&other, 0).is_err());
    }

    #[test]
    fn diagnostics_expose_attention_and_edges() {
        let cfg = small_config(Ablation::GRNContrastive, QaMode::VideoQA);
        let model = Model::new(cfg).unwrap();
        let instance = toy_instance(&cfg, 3, 2, 3, 2);
        let pass = model.forward(&instance, 0).unwrap();
        assert_eq!(pass.diagnostics.object_alpha.len(), 2);
        for alphas in &pass.diagnostics.object_alpha {
            assert_eq!(alphas.len(), 3);
            let sum: f64 = alphas.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let node_sum: f64 = pass.diagnostics.node_alpha.iter().sum();
        assert!((node_sum - 1.0).abs() < 1e-9);
        let n = pass.diagnostics.node_kinds.len();
        assert_eq!(pass.diagnostics.gated_edges.len(), n);
        assert!(pass
            .diagnostics
            .node_kinds
            .iter()
            .any(|k| *k == NodeKind::Text));
    }
}
