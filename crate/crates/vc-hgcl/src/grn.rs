//! Graph Relation Network: a fully connected heterogeneous graph over
//! visual and text nodes with learned pairwise edge scores, IoU gating
//! of visual-visual edges, mean aggregation, residual node updates, and
//! the attention head that fuses the pooled graph with the host
//! multimodal feature.

use serde::{Deserialize, Serialize};

use crate::encoders::{soft_attention, AttentionResult, SoftAttentionParams};
use crate::error::{Error, Result};
use crate::nn::{LinearParams, MlpParams, Nonlinearity};
use crate::param::Binding;
use crate::tensor::{Tape, Tensor, TensorId};

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max)
            || !self.x_min.is_finite()
            || !self.y_min.is_finite()
            || !self.x_max.is_finite()
            || !self.y_max.is_finite()
        {
            return Err(Error::contract(format!(
                "malformed box ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// Intersection over union of two boxes. Boxes that are disjoint or
/// touch only along an edge or corner have zero intersection area and
/// give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return Ok(0.0);
    }
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Visual,
    Text,
}

/// Fully connected graph over stacked visual and text node embeddings.
/// Edge scores are kept flattened as `[n² × 1]`, row-major in (i, j).
pub struct HeteroGraph {
    /// Node embeddings, `[(K+M) × d]`, visual rows first.
    pub nodes: TensorId,
    pub kinds: Vec<NodeKind>,
    /// One box per visual node when gating applies (image mode).
    pub boxes: Vec<Option<BoundingBox>>,
    /// Raw scores e(i,j), `[n² × 1]`.
    pub edges: Option<TensorId>,
    /// Multiplicative gate per ordered pair, 1.0 (open) or 0.0 (cut).
    pub gate_mask: Vec<f64>,
    /// Scores after gating, `[n² × 1]`.
    pub gated: Option<TensorId>,
}

impl HeteroGraph {
    /// Stacks visual `[K × d]` over text `[M × d]` nodes. `boxes`, when
    /// given, must hold one box per visual node and enables IoU gating.
    pub fn build(
        tape: &mut Tape,
        visual: TensorId,
        text: TensorId,
        boxes: Option<&[BoundingBox]>,
    ) -> Result<Self> {
        let k = tape.shape(visual)[0];
        let m = tape.shape(text)[0];
        if let Some(bs) = boxes {
            if bs.len() != k {
                return Err(Error::contract(format!(
                    "{} boxes for {k} visual nodes",
                    bs.len()
                )));
            }
        }
        let nodes = tape.concat(visual, text, 0)?;
        let mut kinds = vec![NodeKind::Visual; k];
        kinds.extend(std::iter::repeat(NodeKind::Text).take(m));
        let mut node_boxes: Vec<Option<BoundingBox>> =
            match boxes {
                Some(bs) => bs.iter().copied().map(Some).collect(),
                None => vec![None; k],
            };
        node_boxes.extend(std::iter::repeat(None).take(m));
        let n = k + m;
        Ok(HeteroGraph {
            nodes,
            kinds,
            boxes: node_boxes,
            edges: None,
            gate_mask: vec![1.0; n * n],
            gated: None,
        })
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    /// Materializes the gated edge scores as an n×n matrix of plain
    /// values, for diagnostics and export.
    pub fn gated_matrix(&self, tape: &Tape) -> Vec<Vec<f64>> {
        let n = self.node_count();
        let data = self.gated.map(|id| tape.data(id).to_vec()).unwrap_or_default();
        (0..n)
            .map(|i| (0..n).map(|j| data.get(i * n + j).copied().unwrap_or(0.0)).collect())
            .collect()
    }
}

/// Constant 0/1 matrices that replicate node rows into the n² ordered
/// pairs: row (i·n + j) of the left selector picks node i, the right
/// selector node j. Built once per tape and reused across passes.
pub struct PairSelectors {
    n: usize,
    left: TensorId,
    right: TensorId,
}

impl PairSelectors {
    pub fn build(tape: &mut Tape, n: usize) -> Result<Self> {
        let mut left = vec![0.0; n * n * n];
        let mut right = vec![0.0; n * n * n];
        for i in 0..n {
            for j in 0..n {
                let row = i * n + j;
                left[row * n + i] = 1.0;
                right[row * n + j] = 1.0;
            }
        }
        Ok(PairSelectors {
            n,
            left: tape.leaf(Tensor::new(left, &[n * n, n])?),
            right: tape.leaf(Tensor::new(right, &[n * n, n])?),
        })
    }
}

/// Scores every ordered node pair with `MLP_R(concat(node_i, node_j))`.
///
/// The hidden layer distributes over the pair construction:
/// `concat(node_i, node_j)·W1 = (nodes·W1_top)_i + (nodes·W1_bot)_j`,
/// so the heavy matmul runs over n node rows instead of n² pair rows,
/// and the 0/1 selectors only replicate the small results.
pub fn edge_scores_with(
    tape: &mut Tape,
    bind: &Binding,
    graph: &mut HeteroGraph,
    mlp_r: &MlpParams,
    nonlin: Nonlinearity,
    selectors: &PairSelectors,
) -> Result<TensorId> {
    let n = graph.node_count();
    if n < 2 {
        return Err(Error::contract("edge scores need at least two nodes"));
    }
    if selectors.n != n {
        return Err(Error::contract(format!(
            "pair selectors sized for {} nodes used on {n}",
            selectors.n
        )));
    }
    let d = tape.shape(graph.nodes)[1];
    let w1 = bind.of(mlp_r.hidden.w);
    let w1_top = tape.slice(w1, 0, 0, d)?;
    let w1_bot = tape.slice(w1, 0, d, 2 * d)?;
    let from_left = tape.matmul(graph.nodes, w1_top)?;
    let from_right = tape.matmul(graph.nodes, w1_bot)?;
    let rep_left = tape.matmul(selectors.left, from_left)?;
    let rep_right = tape.matmul(selectors.right, from_right)?;
    let pre = tape.add(rep_left, rep_right)?;
    let pre = match mlp_r.hidden.b {
        Some(b) => tape.add_bias(pre, bind.of(b))?,
        None => pre,
    };
    let hidden = nonlin.apply(tape, pre);
    let scores = mlp_r.out.apply(tape, bind, hidden)?;
    graph.edges = Some(scores);
    Ok(scores)
}

/// [`edge_scores_with`], building the selectors on the spot.
pub fn edge_scores(
    tape: &mut Tape,
    bind: &Binding,
    graph: &mut HeteroGraph,
    mlp_r: &MlpParams,
    nonlin: Nonlinearity,
) -> Result<TensorId> {
    let selectors = PairSelectors::build(tape, graph.node_count())?;
    edge_scores_with(tape, bind, graph, mlp_r, nonlin, &selectors)
}

/// Applies IoU gating: the two directed edges between visual nodes with
/// zero box overlap are multiplied by 0. Pairs involving a text node,
/// and graphs without boxes (video mode), pass through unchanged.
pub fn gate_edges(tape: &mut Tape, graph: &mut HeteroGraph) -> Result<TensorId> {
    let edges = graph
        .edges
        .ok_or_else(|| Error::contract("gate_edges called before edge_scores"))?;
    let n = graph.node_count();
    let mut mask = vec![1.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if let (Some(bi), Some(bj)) = (&graph.boxes[i], &graph.boxes[j]) {
                if iou(bi, bj)? == 0.0 {
                    mask[i * n + j] = 0.0;
                }
            }
        }
    }
    graph.gate_mask = mask.clone();
    let mask_t = tape.leaf(Tensor::new(mask, &[n * n, 1])?);
    let gated = tape.mul(edges, mask_t)?;
    graph.gated = Some(gated);
    Ok(gated)
}

/// Result of one aggregation/update round.
pub struct GrnUpdate {
    /// Residual-updated node embeddings, `[(K+M) × d]`.
    pub updated: TensorId,
    /// Per-node mean of gated incident edges, `[(K+M) × 1]`.
    pub node_agg: TensorId,
    /// Mean of the per-node aggregates, `[1]`.
    pub global: TensorId,
}

/// Per node i: e_i = mean over j≠i of the gated score (zeroed edges
/// still count in the fixed n−1 denominator), a global mean over all
/// e_i, then `node + MLP_N(concat(e_i, global, node))`.
pub fn aggregate_and_update(
    tape: &mut Tape,
    bind: &Binding,
    graph: &HeteroGraph,
    mlp_n: &MlpParams,
    nonlin: Nonlinearity,
) -> Result<GrnUpdate> {
    let gated = graph
        .gated
        .ok_or_else(|| Error::contract("aggregate called before gating"))?;
    let n = graph.node_count();
    let mut agg = vec![0.0; n * n * n];
    let inv = 1.0 / (n as f64 - 1.0);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                agg[i * (n * n) + i * n + j] = inv;
            }
        }
    }
    let m_agg = tape.leaf(Tensor::new(agg, &[n, n * n])?);
    let node_agg = tape.matmul(m_agg, gated)?;
    let global = tape.mean_all(node_agg);
    let global_row = tape.reshape(global, &[1, 1])?;
    let ones = tape.leaf(Tensor::full(&[n, 1], 1.0));
    let global_col = tape.matmul(ones, global_row)?;
    let ag = tape.concat(node_agg, global_col, 1)?;
    let mlp_in = tape.concat(ag, graph.nodes, 1)?;
    let delta = mlp_n.apply(tape, bind, mlp_in, nonlin)?;
    let updated = tape.add(graph.nodes, delta)?;
    Ok(GrnUpdate { updated, node_agg, global })
}

/// Pools the updated nodes with a second soft attention and projects
/// the pool concatenated with the host multimodal feature `f_m`.
pub fn graph_head(
    tape: &mut Tape,
    bind: &Binding,
    updated: TensorId,
    attn: &SoftAttentionParams,
    f_m: TensorId,
    out_proj: &LinearParams,
    nonlin: Nonlinearity,
) -> Result<(TensorId, AttentionResult)> {
    let pooled = soft_attention(tape, bind, updated, attn, nonlin)?;
    let cat = tape.concat(pooled.pooled, f_m, 1)?;
    let out = out_proj.apply(tape, bind, cat)?;
    Ok((out, pooled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradient_check, relative_error};
    use crate::param::{bind_all, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_identical_boxes() {
        let b = bx(1.0, 2.0, 4.0, 6.0);
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_hand_computed_overlap() {
        // Intersection 1, union 4 + 4 − 1 = 7.
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_touching_edge_is_zero() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)).unwrap(), 0.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 1.0, 2.0, 2.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_malformed_box() {
        let bad = BoundingBox { x_min: 2.0, y_min: 0.0, x_max: 1.0, y_max: 1.0 };
        assert!(iou(&bad, &bx(0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn iou_symmetric_bounded_and_one_iff_coincident() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab));
            if ab == 1.0 {
                assert_eq!(a, b);
            }
        }
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
        let x0 = rng.gen_range(0.0..50.0);
        let y0 = rng.gen_range(0.0..50.0);
        bx(x0, y0, x0 + rng.gen_range(1.0..30.0), y0 + rng.gen_range(1.0..30.0))
    }

    fn graph_of(
        tape: &mut Tape,
        rows: &[f64],
        k: usize,
        m: usize,
        d: usize,
        boxes: Option<&[BoundingBox]>,
    ) -> HeteroGraph {
        let visual = tape.leaf(Tensor::new(rows[..k * d].to_vec(), &[k, d]).unwrap());
        let text = tape.leaf(Tensor::new(rows[k * d..].to_vec(), &[m, d]).unwrap());
        HeteroGraph::build(tape, visual, text, boxes).unwrap()
    }

    #[test]
    fn edge_scores_constant_map() {
        let mut set = ParamSet::new(0);
        let mlp = MlpParams::alloc(&mut set, "r", 4, 2, 1);
        for pid in [mlp.hidden.w, mlp.hidden.b.unwrap(), mlp.out.w] {
            set.get_mut(pid).value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        set.get_mut(mlp.out.b.unwrap()).value_mut().data_mut().copy_from_slice(&[2.25]);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let mut g = graph_of(&mut tape, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 1, 2, None);
        let scores = edge_scores(&mut tape, &bind, &mut g, &mlp, Nonlinearity::Tanh).unwrap();
        assert!(tape.data(scores).iter().all(|&v| v == 2.25));
    }

    #[test]
    fn edge_scores_deterministic_on_identical_nodes() {
        let mut set = ParamSet::new(17);
        let mlp = MlpParams::alloc(&mut set, "r", 4, 4, 1);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let rows = [0.5, -1.0, 0.5, -1.0, 0.5, -1.0];
        let mut g = graph_of(&mut tape, &rows, 2, 1, 2, None);
        let scores = edge_scores(&mut tape, &bind, &mut g, &mlp, Nonlinearity::Tanh).unwrap();
        let d = tape.data(scores);
        // Nodes 0, 1, 2 identical: e(0,1) == e(0,2).
        assert_eq!(d[1], d[2]);
    }

    #[test]
    fn edge_scores_sum_configuration() {
        // relu MLP arranged as the sum of both node values.
        let mut set = ParamSet::new(0);
        let mlp = MlpParams::alloc(&mut set, "r", 2, 2, 1);
        set.get_mut(mlp.hidden.w).value_mut().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        set.get_mut(mlp.hidden.b.unwrap()).value_mut().data_mut().copy_from_slice(&[0.0, 0.0]);
        set.get_mut(mlp.out.w).value_mut().data_mut().copy_from_slice(&[1.0, 1.0]);
        set.get_mut(mlp.out.b.unwrap()).value_mut().data_mut().copy_from_slice(&[0.0]);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let mut g = graph_of(&mut tape, &[1.0, 2.0], 1, 1, 1, None);
        let scores = edge_scores(&mut tape, &bind, &mut g, &mlp, Nonlinearity::Relu).unwrap();
        let d = tape.data(scores);
        // Order: (0,0), (0,1), (1,0), (1,1).
        assert_eq!(d[1], 3.0);
        assert_eq!(d[2], 3.0);
    }

    #[test]
    fn gating_identity_for_identical_boxes() {
        let mut set = ParamSet::new(5);
        let mlp = MlpParams::alloc(&mut set, "r", 4, 4, 1);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let boxes = vec![bx(0.0, 0.0, 2.0, 2.0); 2];
        let rows = [0.4, 0.1, -0.2, 0.9, 1.0, -1.0];
        let mut g = graph_of(&mut tape, &rows, 2, 1, 2, Some(&boxes));
        let scores = edge_scores(&mut tape, &bind, &mut g, &mlp, Nonlinearity::Tanh).unwrap();
        let gated = gate_edges(&mut tape, &mut g).unwrap();
        assert_eq!(tape.data(scores), tape.data(gated));
        assert!(g.gate_mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn gating_cuts_disjoint_visual_pairs_exactly() {
        let mut set = ParamSet::new(5);
        let mlp = MlpParams::alloc(&mut set, "r", 4, 4, 1);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let boxes = [bx(0.0, 0.0, 1.0, 1.0), bx(5.0, 5.0, 6.0, 6.0)];
        let rows = [0.4, 0.1, -0.2, 0.9, 1.0, -1.0];
        let mut g = graph_of(&mut tape, &rows, 2, 1, 2, Some(&boxes));
        edge_scores(&mut tape, &bind, &mut g, &mlp, Nonlinearity::Tanh).unwrap();
        let gated = gate_edges(&mut tape, &mut g).unwrap();
        let d = tape.data(gated);
        let n = 3;
        assert_eq!(d[1], 0.0); // (0,1)
        assert_eq!(d[n], 0.0); // (1,0)
        // Text-connected edges stay open.
        for (i, j) in [(0usize, 2usize), (2, 0), (1, 2), (2, 1)] {
            let raw = tape.data(g.edges.unwrap())[i * n + j];
            assert_eq!(d[i * n + j], raw);
        }
    }

    #[test]
    fn gating_mixed_case_matches_per_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let boxes: Vec<BoundingBox> = (0..3).map(|_| random_box(&mut rng)).collect();
            let mut set = ParamSet::new(rng.gen());
            let mlp = MlpParams::alloc(&mut set, "r", 4, 4, 1);
            let mut tape = Tape::new();
            let bind = bind_all(&mut tape, &set);
            let rows: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = graph_of(&mut tape, &rows, 3, 1, 2, Some(&boxes));
            edge_scores(&mut tape, &bind, &mut g, &mlp, Nonlinearity::Tanh).unwrap();
            gate_edges(&mut tape, &mut g).unwrap();
            let n = 4;
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if iou(&boxes[i], &boxes[j]).unwrap() == 0.0 { 0.0 } else { 1.0 };
                    assert_eq!(g.gate_mask[i * n + j], expect);
                }
            }
        }
    }

    #[test]
    fn gating_is_identity_without_boxes() {
        let mut set = ParamSet::new(5);
        let mlp = MlpParams::alloc(&mut set, "r", 4, 4, 1);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let rows = [0.4, 0.1, -0.2, 0.9, 1.0, -1.0];
        let mut g = graph_of(&mut tape, &rows, 2, 1, 2, None);
        let scores = edge_scores(&mut tape, &bind, &mut g, &mlp, Nonlinearity::Tanh).unwrap();
        let gated = gate_edges(&mut tape, &mut g).unwrap();
        assert_eq!(tape.data(scores), tape.data(gated));
    }

    #[test]
    fn gating_never_increases_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let boxes: Vec<BoundingBox> = (0..2).map(|_| random_box(&mut rng)).collect();
            let mut set = ParamSet::new(rng.gen());
            let mlp = MlpParams::alloc(&mut set, "r", 4, 4, 1);
            let mut tape = Tape::new();
            let bind = bind_all(&mut tape, &set);
            let rows: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = graph_of(&mut tape, &rows, 2, 1, 2, Some(&boxes));
            let raw = edge_scores(&mut tape, &bind, &mut g, &mlp, Nonlinearity::Tanh).unwrap();
            let gated = gate_edges(&mut tape, &mut g).unwrap();
            for (r, gv) in tape.data(raw).iter().zip(tape.data(gated)) {
                assert!(gv.abs() <= r.abs() + 1e-15);
            }
        }
    }

    fn zero_mlp(set: &mut ParamSet, prefix: &str, d_in: usize, d_h: usize, d_out: usize) -> MlpParams {
        let mlp = MlpParams::alloc(set, prefix, d_in, d_h, d_out);
        for pid in [mlp.hidden.w, mlp.hidden.b.unwrap(), mlp.out.w, mlp.out.b.unwrap()] {
            set.get_mut(pid).value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        mlp
    }

    #[test]
    fn aggregate_constant_edges_give_constant_means() {
        let mut set = ParamSet::new(1);
        let mlp_n = MlpParams::alloc(&mut set, "n", 4, 4, 2);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let rows = [0.4, 0.1, -0.2, 0.9, 1.0, -1.0];
        let mut g = graph_of(&mut tape, &rows, 2, 1, 2, None);
        let c = 0.75;
        g.gated = Some(tape.leaf(Tensor::full(&[9, 1], c)));
        let up = aggregate_and_update(&mut tape, &bind, &g, &mlp_n, Nonlinearity::Tanh).unwrap();
        assert!(tape.data(up.node_agg).iter().all(|v| (v - c).abs() < 1e-12));
        assert!((tape.data(up.global)[0] - c).abs() < 1e-12);
    }

    #[test]
    fn aggregate_zero_update_is_pure_residual() {
        let mut set = ParamSet::new(1);
        let mlp_n = zero_mlp(&mut set, "n", 4, 4, 2);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let rows = [0.4, 0.1, -0.2, 0.9, 1.0, -1.0];
        let mut g = graph_of(&mut tape, &rows, 2, 1, 2, None);
        g.gated = Some(tape.leaf(Tensor::full(&[9, 1], 0.3)));
        let up = aggregate_and_update(&mut tape, &bind, &g, &mlp_n, Nonlinearity::Tanh).unwrap();
        assert_eq!(tape.data(up.updated), tape.data(g.nodes));
    }

    #[test]
    fn aggregate_hand_mean_over_incident_edges() {
        let mut set = ParamSet::new(1);
        let mlp_n = MlpParams::alloc(&mut set, "n", 4, 4, 2);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let rows = [0.4, 0.1, -0.2, 0.9, 1.0, -1.0];
        let mut g = graph_of(&mut tape, &rows, 2, 1, 2, None);
        // Scores for node 0: e(0,1) = 1, e(0,2) = 3 → mean 2.
        let mut scores = vec![9.0; 9];
        scores[1] = 1.0;
        scores[2] = 3.0;
        g.gated = Some(tape.leaf(Tensor::new(scores, &[9, 1]).unwrap()));
        let up = aggregate_and_update(&mut tape, &bind, &g, &mlp_n, Nonlinearity::Tanh).unwrap();
        assert!((tape.data(up.node_agg)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_ignores_self_edges() {
        let mut set = ParamSet::new(1);
        let mlp_n = MlpParams::alloc(&mut set, "n", 4, 4, 2);
        let rows = [0.4, 0.1, -0.2, 0.9, 1.0, -1.0];

        let run = |diag: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let bind = bind_all(&mut tape, &set);
            let mut g = graph_of(&mut tape, &rows, 2, 1, 2, None);
            let mut scores = vec![0.5; 9];
            for i in 0..3 {
                scores[i * 3 + i] = diag;
            }
            g.gated = Some(tape.leaf(Tensor::new(scores, &[9, 1]).unwrap()));
            let up =
                aggregate_and_update(&mut tape, &bind, &g, &mlp_n, Nonlinearity::Tanh).unwrap();
            tape.data(up.updated).to_vec()
        };
        assert_eq!(run(0.0), run(1234.5));
    }

    #[test]
    fn grn_stage_is_permutation_equivariant() {
        // Permuting (nodes, kinds, boxes) jointly permutes the updated
        // rows identically.
        let mut set = ParamSet::new(33);
        let mlp_r = MlpParams::alloc(&mut set, "r", 4, 4, 1);
        let mlp_n = MlpParams::alloc(&mut set, "n", 4, 4, 2);
        let rows = [
            [0.3, -1.0],
            [2.0, 0.1],
            [-1.5, 0.9],
            [0.0, 0.5],
        ];
        let boxes = [
            bx(0.0, 0.0, 2.0, 2.0),
            bx(1.0, 1.0, 3.0, 3.0),
            bx(10.0, 10.0, 12.0, 12.0),
            bx(0.5, 0.5, 1.5, 1.5),
        ];
        let perm = [3usize, 1, 0, 2];

        let run = |order: &[usize]| -> Vec<Vec<f64>> {
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i]).collect();
            let bxs: Vec<BoundingBox> = order.iter().map(|&i| boxes[i]).collect();
            let mut tape = Tape::new();
            let bind = bind_all(&mut tape, &set);
            let visual = tape.leaf(Tensor::new(data, &[4, 2]).unwrap());
            let text = tape.leaf(Tensor::new(vec![0.7, -0.7], &[1, 2]).unwrap());
            let mut g = HeteroGraph::build(&mut tape, visual, text, Some(&bxs)).unwrap();
            edge_scores(&mut tape, &bind, &mut g, &mlp_r, Nonlinearity::Tanh).unwrap();
            gate_edges(&mut tape, &mut g).unwrap();
            let up =
                aggregate_and_update(&mut tape, &bind, &g, &mlp_n, Nonlinearity::Tanh).unwrap();
            let d = tape.data(up.updated);
            (0..5).map(|i| d[i * 2..(i + 1) * 2].to_vec()).collect()
        };

        let base = run(&[0, 1, 2, 3]);
        let permuted = run(&perm);
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((permuted[i][c] - base[src][c]).abs() < 1e-9);
            }
        }
        // The text node is last in both runs.
        for c in 0..2 {
            assert!((permuted[4][c] - base[4][c]).abs() < 1e-9);
        }
    }

    #[test]
    fn grn_gradients_pass_finite_differences() {
        let mut set = ParamSet::new(13);
        let mlp_r = MlpParams::alloc(&mut set, "r", 6, 6, 1);
        let mlp_n = MlpParams::alloc(&mut set, "n", 5, 6, 3);
        let boxes = [bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 1.0, 3.0, 3.0), bx(9.0, 9.0, 11.0, 11.0)];

        let visual_data = Tensor::new(
            vec![0.4, -0.2, 0.8, 1.1, 0.0, -0.9, 0.3, 0.6, -0.5],
            &[3, 3],
        )
        .unwrap();

        let err = gradient_check(
            |tape, visual| {
                let bind = bind_all(tape, &set);
                let text = tape.constant(vec![0.5, -0.5, 0.2, 0.1, 0.9, -0.3], &[2, 3])?;
                let mut g = HeteroGraph::build(tape, visual, text, Some(&boxes))?;
                edge_scores(tape, &bind, &mut g, &mlp_r, Nonlinearity::Tanh)?;
                gate_edges(tape, &mut g)?;
                let up = aggregate_and_update(tape, &bind, &g, &mlp_n, Nonlinearity::Tanh)?;
                let sq = tape.mul(up.updated, up.updated)?;
                Ok(tape.sum_all(sq))
            },
            &visual_data,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn grn_parameter_gradients_pass_finite_differences() {
        let mut set = ParamSet::new(29);
        let mlp_r = MlpParams::alloc(&mut set, "r", 4, 4, 1);
        let mlp_n = MlpParams::alloc(&mut set, "n", 4, 4, 2);
        let boxes = [bx(0.0, 0.0, 2.0, 2.0), bx(5.0, 5.0, 6.0, 6.0)];

        let loss_at = |set: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let bind = bind_all(&mut tape, set);
            let visual = tape.constant(vec![0.4, -0.2, 0.8, 1.1], &[2, 2]).unwrap();
            let text = tape.constant(vec![0.5, -0.5, 0.2, 0.1, 0.9, -0.3], &[3, 2]).unwrap();
            let mut g = HeteroGraph::build(&mut tape, visual, text, Some(&boxes)).unwrap();
            edge_scores(&mut tape, &bind, &mut g, &mlp_r, Nonlinearity::Tanh).unwrap();
            gate_edges(&mut tape, &mut g).unwrap();
            let up =
                aggregate_and_update(&mut tape, &bind, &g, &mlp_n, Nonlinearity::Tanh).unwrap();
            let sq = tape.mul(up.updated, up.updated).unwrap();
            let l = tape.sum_all(sq);
            tape.data(l)[0]
        };

        set.zero_grads();
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let visual = tape.constant(vec![0.4, -0.2, 0.8, 1.1], &[2, 2]).unwrap();
        let text = tape.constant(vec![0.5, -0.5, 0.2, 0.1, 0.9, -0.3], &[3, 2]).unwrap();
        let mut g = HeteroGraph::build(&mut tape, visual, text, Some(&boxes)).unwrap();
        edge_scores(&mut tape, &bind, &mut g, &mlp_r, Nonlinearity::Tanh).unwrap();
        gate_edges(&mut tape, &mut g).unwrap();
        let up = aggregate_and_update(&mut tape, &bind, &g, &mlp_n, Nonlinearity::Tanh).unwrap();
        let sq = tape.mul(up.updated, up.updated).unwrap();
        let l = tape.sum_all(sq);
        tape.backward(l).unwrap();
        crate::param::harvest(&tape, &bind, &mut set);

        let h = 1e-5;
        for pi in 0..set.len() {
            let pid = crate::param::ParamId(pi);
            let grads = set.get(pid).value().grad().unwrap().to_vec();
            for ci in 0..grads.len() {
                let orig = set.get(pid).value().data()[ci];
                set.get_mut(pid).value_mut().data_mut()[ci] = orig + h;
                let upv = loss_at(&set);
                set.get_mut(pid).value_mut().data_mut()[ci] = orig - h;
                let dn = loss_at(&set);
                set.get_mut(pid).value_mut().data_mut()[ci] = orig;
                let numeric = (upv - dn) / (2.0 * h);
                let rel = relative_error(grads[ci], numeric);
                assert!(rel < 1e-4, "param {pi} coord {ci}: rel {rel}");
            }
        }
    }

    #[test]
    fn head_single_node_pools_that_node() {
        let mut set = ParamSet::new(2);
        let attn = SoftAttentionParams::alloc(&mut set, "attn", 2);
        let out = LinearParams::alloc(&mut set, "out", 4, 3);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let updated = tape.leaf(Tensor::new(vec![0.8, -0.6], &[1, 2]).unwrap());
        let f_m = tape.leaf(Tensor::new(vec![0.1, 0.2], &[1, 2]).unwrap());
        let (_, pooled) =
            graph_head(&mut tape, &bind, updated, &attn, f_m, &out, Nonlinearity::Tanh).unwrap();
        assert_eq!(tape.data(pooled.pooled), &[0.8, -0.6]);
        assert_eq!(tape.data(pooled.weights), &[1.0]);
    }

    #[test]
    fn head_identical_nodes_pool_to_common_row() {
        let mut set = ParamSet::new(2);
        let attn = SoftAttentionParams::alloc(&mut set, "attn", 2);
        let out = LinearParams::alloc(&mut set, "out", 4, 3);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let updated = tape.leaf(Tensor::new(vec![0.8, -0.6, 0.8, -0.6, 0.8, -0.6], &[3, 2]).unwrap());
        let f_m = tape.leaf(Tensor::zeros(&[1, 2]));
        let (_, pooled) =
            graph_head(&mut tape, &bind, updated, &attn, f_m, &out, Nonlinearity::Tanh).unwrap();
        let d = tape.data(pooled.pooled);
        assert!((d[0] - 0.8).abs() < 1e-12 && (d[1] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn head_zero_host_feature_passes_pool_through_identity() {
        let mut set = ParamSet::new(0);
        let attn = SoftAttentionParams::alloc(&mut set, "attn", 2);
        let out = LinearParams::alloc(&mut set, "out", 4, 4);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        set.get_mut(out.w).value_mut().data_mut().copy_from_slice(&eye);
        set.get_mut(out.b.unwrap()).value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let bind = bind_all(&mut tape, &set);
        let updated = tape.leaf(Tensor::new(vec![0.8, -0.6], &[1, 2]).unwrap());
        let f_m = tape.leaf(Tensor::zeros(&[1, 2]));
        let (head, _) =
            graph_head(&mut tape, &bind, updated, &attn, f_m, &out, Nonlinearity::Tanh).unwrap();
        assert_eq!(tape.data(head), &[0.8, -0.6, 0.0, 0.0]);
    }
}
