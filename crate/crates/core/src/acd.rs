//! Anchor-context detection.
//!
//! An anchor (the pooled instrument region) queries every spatial position
//! of the current frame and of the recent memory frames. Similarity is the
//! exponential of a scaled dot product between learned embeddings, so the
//! normalized weights form a softmax and the interaction outputs are convex
//! combinations of learned value vectors. A linear head on the concatenated
//! spatial/temporal outputs produces the initial class distribution; the
//! action box is the anchor box itself.

use crate::dataset::{BoundingBox, Dataset, FrameRecord, MemoryBank, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{Graph, NodeId, ParamStore};
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// IoU required between an anchor and a ground-truth action for the pair to
/// become a training instance. Matches the strictest reporting threshold.
pub const TRAIN_MATCH_IOU: f64 = 0.5;

/// Which interaction branches feed the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interactions {
    /// Anchor vector plus frame mean pool, no attention. The ablation
    /// baseline.
    None,
    Spatial,
    Temporal,
    Both,
}

impl Interactions {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Interactions::None),
            "spatial" => Ok(Interactions::Spatial),
            "temporal" => Ok(Interactions::Temporal),
            "both" => Ok(Interactions::Both),
            other => Err(Error::config(format!(
                "unknown interactions '{other}' (expected none|spatial|temporal|both)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Interactions::None => "none",
            Interactions::Spatial => "spatial",
            Interactions::Temporal => "temporal",
            Interactions::Both => "both",
        }
    }
}

/// Normalization of the pairwise similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnNorm {
    /// Divide by the sum of similarities; with the exponential similarity
    /// this is a softmax and the weights are convex.
    Softmax,
    /// Divide by the position count instead.
    Count,
}

impl AttnNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AttnNorm::Softmax),
            "count" => Ok(AttnNorm::Count),
            other => Err(Error::config(format!(
                "unknown attention normalization '{other}' (expected softmax|count)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AcdConfig {
    /// RoIAlign output grid (P x P).
    pub roi_grid: usize,
    /// Embedding width D of the interaction space.
    pub embed_dim: usize,
    /// Memory length L in frames.
    pub memory_len: usize,
    pub interactions: Interactions,
    pub attn_norm: AttnNorm,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for AcdConfig {
    fn default() -> Self {
        AcdConfig {
            roi_grid: 7,
            embed_dim: 32,
            memory_len: 10,
            interactions: Interactions::Both,
            attn_norm: AttnNorm::Softmax,
            learning_rate: 0.08,
            epochs: 18,
        }
    }
}

/// Bilinear sample of channel `ch` at continuous grid coordinates, with
/// cell centers at half-integer positions and edge clamping.
fn bilinear(map: &Tensor<f64>, ch: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let at = |r: usize, c: usize| map.data()[ch * h * w + r * w + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Pools a `P x P` grid from the feature map over a box. Each output cell is
/// the bilinear interpolation of the map at the cell's center in continuous
/// box coordinates.
pub fn roi_align(feature_map: &Tensor<f64>, bbox: &BoundingBox, p: usize) -> Result<Tensor<f64>> {
    if feature_map.rank() != 3 {
        return Err(Error::Dimension {
            op: "roi_align",
            lhs: feature_map.shape().to_vec(),
            rhs: vec![],
        });
    }
    if p == 0 {
        return Err(Error::contract("roi_align needs an output grid of at least 1"));
    }
    bbox.validate()?;
    let c = feature_map.shape()[0];
    let (bw, bh) = (bbox.width(), bbox.height());
    let mut data = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        for py in 0..p {
            for px in 0..p {
                let x = bbox.x1 + (px as f64 + 0.5) * bw / p as f64;
                let y = bbox.y1 + (py as f64 + 0.5) * bh / p as f64;
                data.push(bilinear(feature_map, ch, y, x));
            }
        }
    }
    Tensor::new(vec![c, p, p], data)
}

/// Pooled anchor region and its spatially averaged vector.
#[derive(Debug, Clone)]
pub struct AnchorFeature {
    pub bbox: BoundingBox,
    /// `[C, P, P]`
    pub pooled: Tensor<f64>,
    /// `[C]`, the mean of `pooled` over the P x P grid.
    pub vector: Tensor<f64>,
}

pub fn anchor_feature(
    feature_map: &Tensor<f64>,
    bbox: &BoundingBox,
    p: usize,
) -> Result<AnchorFeature> {
    let pooled = roi_align(feature_map, bbox, p)?;
    let c = pooled.shape()[0];
    let cells = p * p;
    let mut vector = Vec::with_capacity(c);
    for ch in 0..c {
        let slice = &pooled.data()[ch * cells..(ch + 1) * cells];
        vector.push(slice.iter().sum::<f64>() / cells as f64);
    }
    Ok(AnchorFeature {
        bbox: *bbox,
        pooled,
        vector: Tensor::new(vec![c], vector)?,
    })
}

/// Rearranges a `[C, H, W]` map into a `[H*W, C]` matrix of position rows.
pub fn positions_matrix(feature_map: &Tensor<f64>) -> Result<Tensor<f64>> {
    if feature_map.rank() != 3 {
        return Err(Error::Dimension {
            op: "positions_matrix",
            lhs: feature_map.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (c, h, w) = (
        feature_map.shape()[0],
        feature_map.shape()[1],
        feature_map.shape()[2],
    );
    let hw = h * w;
    let mut data = vec![0.0; hw * c];
    for ch in 0..c {
        for pos in 0..hw {
            data[pos * c + ch] = feature_map.data()[ch * hw + pos];
        }
    }
    Tensor::new(vec![hw, c], data)
}

/// Everything one forward pass needs, with features already flattened.
#[derive(Debug, Clone)]
pub struct InstanceInputs {
    /// `[1, C]` pooled anchor vector.
    pub anchor_vec: Tensor<f64>,
    /// `[H*W, C]` current frame positions.
    pub frame_positions: Tensor<f64>,
    /// `[1, C]` mean over frame positions.
    pub frame_meanpool: Tensor<f64>,
    /// `[M, C]` rows of all memory-frame positions, oldest first. Absent
    /// when the frame has no predecessors.
    pub memory_positions: Option<Tensor<f64>>,
}

/// Node handles of one forward pass, for weight and value inspection.
pub struct ForwardNodes {
    pub logits: NodeId,
    pub probs: NodeId,
    pub spatial: Option<InteractionNodes>,
    pub temporal: Option<InteractionNodes>,
}

pub struct InteractionNodes {
    pub weights: NodeId,
    pub values: NodeId,
    pub output: NodeId,
}

/// Plain forward result.
#[derive(Debug, Clone)]
pub struct AcdForward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// `concat(a_t, b_t)` (zeros for disabled branches); the conditioning
    /// summary handed to the diffusion stage.
    pub summary: Vec<f64>,
    pub spatial_weights: Option<Vec<f64>>,
    pub temporal_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AcdModel {
    pub params: ParamStore<f64>,
    pub config: AcdConfig,
    pub channels: usize,
    pub num_classes: usize,
}

impl AcdModel {
    /// Fresh model with seeded Gaussian initialization.
    pub fn init(channels: usize, num_classes: usize, config: AcdConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, "acd-init");
        let proj = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).unwrap();
        let head = Normal::new(0.0, 0.02).unwrap();
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let head_in = match config.interactions {
            Interactions::None => 2 * channels,
            _ => 2 * d,
        };
        let mat = |rows: usize, cols: usize, dist: &Normal<f64>, rng: &mut dyn rand::RngCore| {
            let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Tensor::new(vec![rows, cols], data)
        };
        if config.interactions != Interactions::None {
            params.insert("theta", mat(channels, d, &proj, &mut rng)?);
            params.insert("phi", mat(channels, d, &proj, &mut rng)?);
            params.insert("g", mat(channels, d, &proj, &mut rng)?);
        }
        params.insert("head_w", mat(head_in, num_classes, &head, &mut rng)?);
        params.insert("head_b", Tensor::zeros(vec![1, num_classes]));
        Ok(AcdModel {
            params,
            config,
            channels,
            num_classes,
        })
    }

    /// Restores a model around previously trained parameters.
    pub fn from_params(
        params: ParamStore<f64>,
        config: AcdConfig,
        channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let model = AcdModel {
            params,
            config,
            channels,
            num_classes,
        };
        let head_in = match model.config.interactions {
            Interactions::None => 2 * channels,
            _ => 2 * model.config.embed_dim,
        };
        let head = model.params.get("head_w")?;
        if head.shape() != [head_in, num_classes] {
            return Err(Error::validation(format!(
                "checkpoint head shape {:?} does not match configuration [{head_in}, {num_classes}]",
                head.shape()
            )));
        }
        Ok(model)
    }

    /// One attention branch over `positions`, queried by the anchor node.
    fn interaction(
        &self,
        g: &mut Graph<f64>,
        anchor: NodeId,
        positions: NodeId,
        theta: NodeId,
        phi: NodeId,
        value_proj: NodeId,
    ) -> Result<InteractionNodes> {
        let d = self.config.embed_dim;
        let query = g.matmul(anchor, theta)?;
        let keys = g.matmul(positions, phi)?;
        let keys_t = g.transpose(keys)?;
        let raw = g.matmul(query, keys_t)?;
        let scores = g.scale(raw, 1.0 / (d as f64).sqrt())?;
        let weights = match self.config.attn_norm {
            AttnNorm::Softmax => g.softmax_rows(scores)?,
            AttnNorm::Count => {
                let n = g.value(scores).cols();
                let e = g.exp(scores)?;
                g.scale(e, 1.0 / n as f64)?
            }
        };
        let values = g.matmul(positions, value_proj)?;
        let output = g.matmul(weights, values)?;
        Ok(InteractionNodes {
            weights,
            values,
            output,
        })
    }

    /// Builds the forward graph for one instance. Model parameters enter the
    /// graph as trainable leaves; instance features enter as constants.
    pub fn forward_nodes(&self, g: &mut Graph<f64>, inputs: &InstanceInputs) -> Result<ForwardNodes> {
        let anchor_node = g.input(inputs.anchor_vec.clone());
        let head_w = g.param("head_w", self.params.get("head_w")?.clone())?;
        let head_b = g.param("head_b", self.params.get("head_b")?.clone())?;

        let (head_in, spatial, temporal) = match self.config.interactions {
            Interactions::None => {
                let mean_node = g.input(inputs.frame_meanpool.clone());
                (g.concat_cols(&[anchor_node, mean_node])?, None, None)
            }
            variant => {
                let theta = g.param("theta", self.params.get("theta")?.clone())?;
                let phi = g.param("phi", self.params.get("phi")?.clone())?;
                let value_proj = g.param("g", self.params.get("g")?.clone())?;
                let d = self.config.embed_dim;

                let spatial = if variant != Interactions::Temporal {
                    let frame_node = g.input(inputs.frame_positions.clone());
                    Some(self.interaction(g, anchor_node, frame_node, theta, phi, value_proj)?)
                } else {
                    None
                };
                // Empty memory falls back to a zero temporal output; frames
                // before the video start contribute no attention mass.
                let temporal = if variant != Interactions::Spatial {
                    match &inputs.memory_positions {
                        Some(mem) => {
                            let mem_node = g.input(mem.clone());
                            Some(self.interaction(
                                g,
                                anchor_node,
                                mem_node,
                                theta,
                                phi,
                                value_proj,
                            )?)
                        }
                        None => None,
                    }
                } else {
                    None
                };

                let zero = g.input(Tensor::zeros(vec![1, d]));
                let a = spatial.as_ref().map(|s| s.output).unwrap_or(zero);
                let b = temporal.as_ref().map(|t| t.output).unwrap_or(zero);
                (g.concat_cols(&[a, b])?, spatial, temporal)
            }
        };

        let scores = g.matmul(head_in, head_w)?;
        let logits = g.add(scores, head_b)?;
        let probs = g.softmax_rows(logits)?;
        Ok(ForwardNodes {
            logits,
            probs,
            spatial,
            temporal,
        })
    }

    /// Negative log-likelihood of `class_id` appended to a forward graph.
    pub fn loss_node(
        &self,
        g: &mut Graph<f64>,
        nodes: &ForwardNodes,
        class_id: usize,
    ) -> Result<NodeId> {
        let p = g.pick(nodes.probs, 0, class_id)?;
        let lp = g.ln(p)?;
        g.scale(lp, -1.0)
    }

    /// Plain forward pass; builds a throwaway graph.
    pub fn forward(&self, inputs: &InstanceInputs) -> Result<AcdForward> {
        let mut g = Graph::new();
        let nodes = self.forward_nodes(&mut g, inputs)?;
        let d = self.config.embed_dim;
        let mut summary = vec![0.0; 2 * d];
        if let Some(s) = &nodes.spatial {
            summary[..d].copy_from_slice(g.value(s.output).data());
        }
        if let Some(t) = &nodes.temporal {
            summary[d..].copy_from_slice(g.value(t.output).data());
        }
        Ok(AcdForward {
            logits: g.value(nodes.logits).data().to_vec(),
            probs: g.value(nodes.probs).data().to_vec(),
            summary,
            spatial_weights: nodes.spatial.as_ref().map(|s| g.value(s.weights).data().to_vec()),
            temporal_weights: nodes
                .temporal
                .as_ref()
                .map(|t| g.value(t.weights).data().to_vec()),
        })
    }
}

/// Per-frame flattened features shared by all anchors of a dataset.
pub struct PositionsCache {
    positions: Vec<Tensor<f64>>,
    meanpool: Vec<Tensor<f64>>,
    index: HashMap<(String, usize), usize>,
}

impl PositionsCache {
    pub fn build(dataset: &Dataset) -> Result<Self> {
        let mut positions = Vec::with_capacity(dataset.frames.len());
        let mut meanpool = Vec::with_capacity(dataset.frames.len());
        let mut index = HashMap::new();
        for (i, frame) in dataset.frames.iter().enumerate() {
            let mat = positions_matrix(&frame.feature_map)?;
            let rows = mat.rows() as f64;
            let c = mat.cols();
            let mut mean = vec![0.0; c];
            for r in 0..mat.rows() {
                for ch in 0..c {
                    mean[ch] += mat.get2(r, ch);
                }
            }
            for v in &mut mean {
                *v /= rows;
            }
            positions.push(mat);
            meanpool.push(Tensor::new(vec![1, c], mean)?);
            index.insert((frame.video_id.clone(), frame.t), i);
        }
        Ok(PositionsCache {
            positions,
            meanpool,
            index,
        })
    }

    pub fn frame_index(&self, video_id: &str, t: usize) -> Option<usize> {
        self.index.get(&(video_id.to_string(), t)).copied()
    }

    pub fn positions(&self, idx: usize) -> &Tensor<f64> {
        &self.positions[idx]
    }

    pub fn meanpool(&self, idx: usize) -> &Tensor<f64> {
        &self.meanpool[idx]
    }

    /// Concatenated position rows of the given frames, oldest first.
    pub fn memory_matrix(&self, idxs: &[usize]) -> Result<Option<Tensor<f64>>> {
        if idxs.is_empty() {
            return Ok(None);
        }
        let c = self.positions[idxs[0]].cols();
        let total: usize = idxs.iter().map(|&i| self.positions[i].rows()).sum();
        let mut data = Vec::with_capacity(total * c);
        for &i in idxs {
            data.extend_from_slice(self.positions[i].data());
        }
        Ok(Some(Tensor::new(vec![total, c], data)?))
    }
}

/// One matched (anchor, ground-truth class) pair with resolved feature
/// indices into a [`PositionsCache`].
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub video_id: String,
    pub t: usize,
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub anchor_vec: Tensor<f64>,
    pub frame_idx: usize,
    pub memory_idxs: Vec<usize>,
}

fn assemble_inputs(
    cache: &PositionsCache,
    anchor_vec: &Tensor<f64>,
    frame_idx: usize,
    memory_idxs: &[usize],
) -> Result<InstanceInputs> {
    Ok(InstanceInputs {
        anchor_vec: anchor_vec.clone(),
        frame_positions: cache.positions(frame_idx).clone(),
        frame_meanpool: cache.meanpool(frame_idx).clone(),
        memory_positions: cache.memory_matrix(memory_idxs)?,
    })
}

impl TrainInstance {
    pub fn inputs(&self, cache: &PositionsCache) -> Result<InstanceInputs> {
        assemble_inputs(cache, &self.anchor_vec, self.frame_idx, &self.memory_idxs)
    }
}

/// One filtered anchor prepared for inference.
#[derive(Debug, Clone)]
pub struct EvalAnchor {
    pub video_id: String,
    pub t: usize,
    pub bbox: BoundingBox,
    /// Index among the frame's kept anchors; part of the sampling key.
    pub anchor_idx: usize,
    pub anchor_vec: Tensor<f64>,
    pub frame_idx: usize,
    pub memory_idxs: Vec<usize>,
}

impl EvalAnchor {
    pub fn inputs(&self, cache: &PositionsCache) -> Result<InstanceInputs> {
        assemble_inputs(cache, &self.anchor_vec, self.frame_idx, &self.memory_idxs)
    }
}

/// The anchors a detector predicts on: every anchor of the split whose
/// score passes the confidence filter.
pub struct EvalAnchorSet {
    pub anchors: Vec<EvalAnchor>,
}

pub fn build_eval_anchors(
    dataset: &Dataset,
    cache: &PositionsCache,
    split: Split,
    config: &AcdConfig,
    score_threshold: f64,
) -> Result<EvalAnchorSet> {
    let mut anchors = Vec::new();
    let video_ids: Vec<String> = dataset
        .manifest
        .videos
        .iter()
        .filter(|v| v.split == split)
        .map(|v| v.id.clone())
        .collect();
    for vid in video_ids {
        let frames = dataset.video_frames(&vid);
        for (fi, frame) in frames.iter().enumerate() {
            let kept = crate::dataset::filter_anchors(frame, score_threshold);
            if kept.is_empty() {
                continue;
            }
            let memory = MemoryBank::for_frame(&frames, fi, config.memory_len);
            let memory_idxs: Vec<usize> = memory
                .frames()
                .iter()
                .map(|f| cache.frame_index(&f.video_id, f.t).unwrap())
                .collect();
            let frame_idx = cache.frame_index(&frame.video_id, frame.t).unwrap();
            for (ai, anchor) in kept.iter().enumerate() {
                let feat = anchor_feature(&frame.feature_map, &anchor.bbox, config.roi_grid)?;
                let c = feat.vector.len();
                anchors.push(EvalAnchor {
                    video_id: frame.video_id.clone(),
                    t: frame.t,
                    bbox: anchor.bbox,
                    anchor_idx: ai,
                    anchor_vec: Tensor::new(vec![1, c], feat.vector.data().to_vec())?,
                    frame_idx,
                    memory_idxs: memory_idxs.clone(),
                });
            }
        }
    }
    Ok(EvalAnchorSet { anchors })
}

/// Greedy class-agnostic matching of a frame's anchors to its ground
/// truths: anchors in descending score order claim the unmatched ground
/// truth of highest IoU, requiring at least [`TRAIN_MATCH_IOU`].
pub fn match_anchors_to_gt(frame: &FrameRecord) -> Result<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = (0..frame.anchors.len()).collect();
    order.sort_by(|&i, &j| {
        frame.anchors[j]
            .score
            .partial_cmp(&frame.anchors[i].score)
            .unwrap()
            .then_with(|| {
                frame.anchors[i]
                    .bbox
                    .lex_key()
                    .partial_cmp(&frame.anchors[j].bbox.lex_key())
                    .unwrap()
            })
    });
    let mut taken = vec![false; frame.ground_truth.len()];
    let mut pairs = Vec::new();
    for &ai in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in frame.ground_truth.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let overlap = eval::iou(&frame.anchors[ai].bbox, &gt.bbox)?;
            if overlap >= TRAIN_MATCH_IOU && best.map(|(_, b)| overlap > b).unwrap_or(true) {
                best = Some((gi, overlap));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            pairs.push((ai, gi));
        }
    }
    pairs.sort();
    Ok(pairs)
}

/// Builds the matched training (or evaluation) instances of one split.
pub fn build_instances(
    dataset: &Dataset,
    cache: &PositionsCache,
    split: Split,
    config: &AcdConfig,
) -> Result<Vec<TrainInstance>> {
    let mut out = Vec::new();
    let video_ids: Vec<String> = dataset
        .manifest
        .videos
        .iter()
        .filter(|v| v.split == split)
        .map(|v| v.id.clone())
        .collect();
    for vid in video_ids {
        let frames = dataset.video_frames(&vid);
        for (fi, frame) in frames.iter().enumerate() {
            if frame.ground_truth.is_empty() || frame.anchors.is_empty() {
                continue;
            }
            let memory = MemoryBank::for_frame(&frames, fi, config.memory_len);
            let memory_idxs: Vec<usize> = memory
                .frames()
                .iter()
                .map(|f| cache.frame_index(&f.video_id, f.t).unwrap())
                .collect();
            let frame_idx = cache.frame_index(&frame.video_id, frame.t).unwrap();
            for (ai, gi) in match_anchors_to_gt(frame)? {
                let anchor = &frame.anchors[ai];
                let feat = anchor_feature(&frame.feature_map, &anchor.bbox, config.roi_grid)?;
                let c = feat.vector.len();
                out.push(TrainInstance {
                    video_id: frame.video_id.clone(),
                    t: frame.t,
                    bbox: anchor.bbox,
                    class_id: frame.ground_truth[gi].class_id,
                    anchor_vec: Tensor::new(vec![1, c], feat.vector.data().to_vec())?,
                    frame_idx,
                    memory_idxs: memory_idxs.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Plain SGD training over matched instances. Returns the per-epoch mean
/// cross-entropy, which must trend downward on the synthetic set.
pub fn train_acd(
    model: &mut AcdModel,
    instances: &[TrainInstance],
    cache: &PositionsCache,
    seed: u64,
) -> Result<Vec<f64>> {
    if instances.is_empty() {
        return Err(Error::config("no matched training instances"));
    }
    let mut rng = stream_rng(seed, "acd-train");
    let lr = model.config.learning_rate;
    let mut curve = Vec::with_capacity(model.config.epochs);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for _epoch in 0..model.config.epochs {
        // Fisher-Yates on the fixed stream keeps epochs reproducible.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for &idx in &order {
            let inst = &instances[idx];
            let inputs = inst.inputs(cache)?;
            let mut g = Graph::new();
            let nodes = model.forward_nodes(&mut g, &inputs)?;
            let loss = model.loss_node(&mut g, &nodes, inst.class_id)?;
            total += g.value(loss).scalar_value()?;
            let grads = g.backward(loss)?;
            model.params.sgd_step(&grads, lr)?;
        }
        curve.push(total / instances.len() as f64);
    }
    Ok(curve)
}

/// Fraction of instances whose argmax class matches the label.
pub fn accuracy(
    model: &AcdModel,
    instances: &[TrainInstance],
    cache: &PositionsCache,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::config("no instances to score"));
    }
    let mut correct = 0usize;
    for inst in instances {
        let fwd = model.forward(&inst.inputs(cache)?)?;
        let pred = argmax(&fwd.probs);
        if pred == inst.class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AnchorDetection;

    fn map_2x2() -> Tensor<f64> {
        // One channel: [[1,2],[3,4]].
        Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn roi_align_constant_map() {
        let map = Tensor::filled(vec![3, 5, 5], 2.75);
        let bbox = BoundingBox::new(0.7, 1.1, 4.2, 4.9).unwrap();
        let pooled = roi_align(&map, &bbox, 4).unwrap();
        assert!(pooled.data().iter().all(|&v| (v - 2.75).abs() < 1e-12));
    }

    #[test]
    fn roi_align_single_cell_box() {
        // Box exactly covering cell (1,1); P=1 samples its center.
        let pooled = roi_align(&map_2x2(), &BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap(), 1).unwrap();
        assert_eq!(pooled.data(), &[4.0]);
    }

    #[test]
    fn roi_align_bilinear_center() {
        // Box centered on the point between all four cells: mean 2.5.
        let pooled =
            roi_align(&map_2x2(), &BoundingBox::new(0.5, 0.5, 1.5, 1.5).unwrap(), 1).unwrap();
        assert!((pooled.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn roi_align_rejects_degenerate_box() {
        let bbox = BoundingBox {
            x1: 1.0,
            y1: 1.0,
            x2: 1.0,
            y2: 2.0,
        };
        assert!(roi_align(&map_2x2(), &bbox, 1).is_err());
    }

    #[test]
    fn anchor_vector_is_mean_of_pooled() {
        let mut data = Vec::new();
        for i in 0..(2 * 6 * 6) {
            data.push((i as f64 * 0.37).sin());
        }
        let map = Tensor::new(vec![2, 6, 6], data).unwrap();
        let feat = anchor_feature(&map, &BoundingBox::new(1.0, 1.5, 4.5, 5.0).unwrap(), 3).unwrap();
        let cells = 9;
        for ch in 0..2 {
            let mean: f64 =
                feat.pooled.data()[ch * cells..(ch + 1) * cells].iter().sum::<f64>() / cells as f64;
            assert!((feat.vector.data()[ch] - mean).abs() < 1e-12);
        }
    }

    fn tiny_model(interactions: Interactions) -> AcdModel {
        let config = AcdConfig {
            roi_grid: 2,
            embed_dim: 4,
            memory_len: 3,
            interactions,
            ..AcdConfig::default()
        };
        AcdModel::init(3, 2, config, 99).unwrap()
    }

    fn inputs_from(frame: Tensor<f64>, anchor: Vec<f64>, memory: Option<Tensor<f64>>) -> InstanceInputs {
        let c = anchor.len();
        let mean = {
            let rows = frame.rows() as f64;
            let mut m = vec![0.0; c];
            for r in 0..frame.rows() {
                for ch in 0..c {
                    m[ch] += frame.get2(r, ch) / rows;
                }
            }
            Tensor::new(vec![1, c], m).unwrap()
        };
        InstanceInputs {
            anchor_vec: Tensor::new(vec![1, c], anchor).unwrap(),
            frame_positions: frame,
            frame_meanpool: mean,
            memory_positions: memory,
        }
    }

    #[test]
    fn identical_positions_collapse_to_g_of_f() {
        // Every position holds the same vector f, so any convex weights
        // give exactly g(f).
        let model = tiny_model(Interactions::Spatial);
        let f = vec![0.4, -0.2, 1.1];
        let frame = Tensor::from_rows(&vec![f.clone(); 6]).unwrap();
        let inputs = inputs_from(frame, vec![0.9, 0.1, -0.3], None);
        let fwd = model.forward(&inputs).unwrap();
        let g_of_f = Tensor::row(&f)
            .unwrap()
            .matmul(model.params.get("g").unwrap())
            .unwrap();
        let d = model.config.embed_dim;
        for (a, b) in fwd.summary[..d].iter().zip(g_of_f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_weight_is_one() {
        let model = tiny_model(Interactions::Spatial);
        let frame = Tensor::from_rows(&[vec![0.3, 0.8, -0.5]]).unwrap();
        let inputs = inputs_from(frame, vec![1.0, 0.0, 0.0], None);
        let fwd = model.forward(&inputs).unwrap();
        let w = fwd.spatial_weights.unwrap();
        assert_eq!(w.len(), 1);
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_two_position_weights() {
        // Engineered params: query [sqrt(D)*ln3, 0, ...], keys [0,...] and
        // [1,0,...], so the scaled scores are 0 and ln 3 and the weights
        // are [1/4, 3/4]. Values are the unit vectors, making a_t the
        // weight vector itself.
        let config = AcdConfig {
            roi_grid: 1,
            embed_dim: 2,
            memory_len: 2,
            interactions: Interactions::Spatial,
            ..AcdConfig::default()
        };
        let mut model = AcdModel::init(2, 2, config, 1).unwrap();
        let ln3 = 3.0_f64.ln();
        let s = 2.0_f64.sqrt();
        model
            .params
            .insert("theta", Tensor::from_rows(&[vec![s * ln3, 0.0], vec![0.0, 0.0]]).unwrap());
        model
            .params
            .insert("phi", Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap());
        model
            .params
            .insert("g", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        // Positions: f1 = [1,0] keys to [0,0] (score 0), f2 = [0,1] keys to
        // [1,0] (score ln3 after scaling by query).
        let frame = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let inputs = inputs_from(frame, vec![1.0, 0.0], None);
        let fwd = model.forward(&inputs).unwrap();
        let w = fwd.spatial_weights.unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12, "weights {w:?}");
        assert!((w[1] - 0.75).abs() < 1e-12);
        let d = model.config.embed_dim;
        assert!((fwd.summary[0] - 0.25).abs() < 1e-12);
        assert!((fwd.summary[1] - 0.75).abs() < 1e-12);
        assert!(fwd.summary[d..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temporal_singleton_memory() {
        let model = tiny_model(Interactions::Temporal);
        let prev = vec![0.7, -0.1, 0.2];
        let memory = Tensor::from_rows(&[prev.clone()]).unwrap();
        let frame = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let inputs = inputs_from(frame, vec![0.5, 0.5, 0.5], Some(memory));
        let fwd = model.forward(&inputs).unwrap();
        let expect = Tensor::row(&prev)
            .unwrap()
            .matmul(model.params.get("g").unwrap())
            .unwrap();
        let d = model.config.embed_dim;
        for (a, b) in fwd.summary[d..].iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_memory_gives_zero_temporal_branch() {
        let model = tiny_model(Interactions::Both);
        let frame = Tensor::from_rows(&[vec![0.3, 0.8, -0.5], vec![0.1, 0.2, 0.3]]).unwrap();
        let inputs = inputs_from(frame, vec![1.0, 0.0, 0.0], None);
        let fwd = model.forward(&inputs).unwrap();
        let d = model.config.embed_dim;
        assert!(fwd.summary[d..].iter().all(|&v| v == 0.0));
        assert!(fwd.temporal_weights.is_none());
    }

    #[test]
    fn zero_head_passes_bias_through() {
        let mut model = tiny_model(Interactions::Both);
        let k = model.num_classes;
        let head_in = 2 * model.config.embed_dim;
        model.params.insert("head_w", Tensor::zeros(vec![head_in, k]));
        model
            .params
            .insert("head_b", Tensor::row(&[0.35, -1.25]).unwrap());
        let frame = Tensor::from_rows(&[vec![0.3, 0.8, -0.5], vec![0.1, 0.2, 0.3]]).unwrap();
        let memory = Tensor::from_rows(&[vec![0.9, -0.9, 0.4]]).unwrap();
        let inputs = inputs_from(frame, vec![1.0, 0.0, 0.0], Some(memory));
        let fwd = model.forward(&inputs).unwrap();
        assert_eq!(fwd.logits, vec![0.35, -1.25]);
    }

    #[test]
    fn attention_weights_are_convex() {
        let model = tiny_model(Interactions::Both);
        let mut rng = stream_rng(5, "test-convex");
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..50 {
            let frame = Tensor::from_rows(
                &(0..8)
                    .map(|_| (0..3).map(|_| normal.sample(&mut rng)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let memory = Tensor::from_rows(
                &(0..12)
                    .map(|_| (0..3).map(|_| normal.sample(&mut rng)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let anchor: Vec<f64> = (0..3).map(|_| normal.sample(&mut rng)).collect();
            let inputs = inputs_from(frame, anchor, Some(memory));
            let fwd = model.forward(&inputs).unwrap();
            for w in [fwd.spatial_weights.unwrap(), fwd.temporal_weights.unwrap()] {
                assert!(w.iter().all(|&v| v >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn spatial_output_is_permutation_equivariant() {
        let model = tiny_model(Interactions::Spatial);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![0.3 * i as f64, -0.1 * i as f64, (i as f64).sin()])
            .collect();
        let frame = Tensor::from_rows(&rows).unwrap();
        let mut shuffled = rows.clone();
        shuffled.swap(0, 4);
        shuffled.swap(2, 5);
        let frame_p = Tensor::from_rows(&shuffled).unwrap();
        let a = model
            .forward(&inputs_from(frame, vec![0.2, 0.4, -0.6], None))
            .unwrap();
        let b = model
            .forward(&inputs_from(frame_p, vec![0.2, 0.4, -0.6], None))
            .unwrap();
        let d = model.config.embed_dim;
        for (x, y) in a.summary[..d].iter().zip(&b.summary[..d]) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn value_set_is_identical_across_anchors() {
        // Changing the anchor may only move the weights; the projected
        // value rows must match bitwise.
        let model = tiny_model(Interactions::Spatial);
        let frame = Tensor::from_rows(&[
            vec![0.3, 0.8, -0.5],
            vec![0.1, 0.2, 0.3],
            vec![-0.9, 0.4, 0.0],
        ])
        .unwrap();
        let values_for = |anchor: Vec<f64>| {
            let inputs = inputs_from(frame.clone(), anchor, None);
            let mut g = Graph::new();
            let nodes = model.forward_nodes(&mut g, &inputs).unwrap();
            g.value(nodes.spatial.as_ref().unwrap().values).clone()
        };
        let va = values_for(vec![1.0, 0.0, 0.0]);
        let vb = values_for(vec![-0.7, 2.0, 0.4]);
        assert_eq!(va, vb);
    }

    #[test]
    fn count_normalization_weights_are_not_convex() {
        let mut model = tiny_model(Interactions::Spatial);
        model.config.attn_norm = AttnNorm::Count;
        let frame = Tensor::from_rows(&[vec![0.3, 0.8, -0.5], vec![0.1, 0.2, 0.3]]).unwrap();
        let fwd = model
            .forward(&inputs_from(frame, vec![1.0, 0.5, -0.2], None))
            .unwrap();
        let w = fwd.spatial_weights.unwrap();
        assert!(w.iter().all(|&v| v > 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() > 1e-6);
    }

    #[test]
    fn match_anchors_prefers_high_scores_and_is_one_to_one() {
        let frame = FrameRecord {
            video_id: "v".into(),
            t: 1,
            feature_map: Tensor::filled(vec![1, 8, 8], 0.0),
            anchors: vec![
                AnchorDetection {
                    bbox: BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap(),
                    score: 0.6,
                },
                AnchorDetection {
                    bbox: BoundingBox::new(0.2, 0.0, 2.2, 2.0).unwrap(),
                    score: 0.9,
                },
                AnchorDetection {
                    bbox: BoundingBox::new(5.0, 5.0, 7.0, 7.0).unwrap(),
                    score: 0.8,
                },
            ],
            ground_truth: vec![crate::dataset::GroundTruthAction {
                bbox: BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap(),
                class_id: 0,
            }],
        };
        let pairs = match_anchors_to_gt(&frame).unwrap();
        // The 0.9 anchor wins the only ground truth; nothing else matches.
        assert_eq!(pairs, vec![(1, 0)]);
    }

    #[test]
    fn gradcheck_full_acd_loss() {
        // Central finite differences through the whole attention + head
        // stack, at tiny dimensions.
        let model = tiny_model(Interactions::Both);
        let frame = Tensor::from_rows(&[
            vec![0.3, 0.8, -0.5],
            vec![0.1, 0.2, 0.3],
            vec![-0.4, 0.9, 0.2],
        ])
        .unwrap();
        let memory = Tensor::from_rows(&[vec![0.9, -0.9, 0.4], vec![0.2, 0.1, -0.6]]).unwrap();
        let inputs = inputs_from(frame, vec![0.5, -0.3, 0.8], Some(memory));

        let mut g = Graph::new();
        let nodes = model.forward_nodes(&mut g, &inputs).unwrap();
        let loss = model.loss_node(&mut g, &nodes, 1).unwrap();
        let grads = g.backward(loss).unwrap();

        for name in ["theta", "phi", "g", "head_w", "head_b"] {
            let base = model.params.get(name).unwrap().clone();
            let analytic = grads.get(name).unwrap().clone();
            let numeric = crate::testing::finite_diff_grad(
                |x| {
                    let mut m = model.clone();
                    m.params
                        .insert(name, Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap());
                    let mut g2 = Graph::new();
                    let nodes2 = m.forward_nodes(&mut g2, &inputs).unwrap();
                    let loss2 = m.loss_node(&mut g2, &nodes2, 1).unwrap();
                    g2.value(loss2).scalar_value().unwrap()
                },
                base.data(),
                1e-5,
            );
            for (a, n) in analytic.data().iter().zip(&numeric) {
                assert!(
                    crate::testing::rel_err(*a, *n) < 1e-4,
                    "{name}: analytic {a} vs numeric {n}"
                );
            }
        }
    }
}
