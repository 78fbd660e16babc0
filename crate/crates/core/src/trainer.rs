//! Self-supervised training of a linear embedder on detection features.
//!
//! Training never sees identities: sequences are first converted to a
//! [`TrainingSequence`], which only carries detections, features and the
//! boxes of annotated frames.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};
use crate::losses::{graph_losses, LossConfig, LossReport, TargetPolicy};
use crate::synth::{FrameDetections, SyntheticSequence};
use crate::toag::{EmbeddingMatrix, GraphConfig, NodeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Setting {
    /// Every frame carries ground-truth boxes, which select positives.
    #[default]
    Dense,
    /// Only every `stride`-th frame is annotated; positives come from
    /// confident detections.
    Sparse,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Setting::Dense),
            "sparse" => Ok(Setting::Sparse),
            other => Err(Error::Config(format!("unknown setting '{other}'"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Dense => "dense",
            Setting::Sparse => "sparse",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k_hat: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta_obj: f64,
    pub beta_cycle: f64,
    pub tau: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub neg_ratio: usize,
    pub max_pos_nodes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub setting: Setting,
    pub seed: u64,
    pub embed_dim: usize,
    pub policy: TargetPolicy,
    /// Proposal jitter as a fraction of the box size.
    pub proposal_jitter: f64,
    /// Std of the noise added to blended proposal features.
    pub proposal_feature_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_hat: 10,
            alpha1: 0.7,
            alpha2: 0.3,
            beta_obj: 0.3,
            beta_cycle: 0.8,
            tau: 0.05,
            gamma1: 1.0,
            gamma2: 2.0,
            neg_ratio: 3,
            max_pos_nodes: 128,
            learning_rate: 0.002,
            epochs: 30,
            setting: Setting::Dense,
            seed: 0,
            embed_dim: 16,
            policy: TargetPolicy::MultiPositive,
            proposal_jitter: 0.15,
            proposal_feature_noise: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha2 && self.alpha2 < self.alpha1 && self.alpha1 <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < alpha2 < alpha1 <= 1, got alpha1={} alpha2={}",
                self.alpha1, self.alpha2
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.k_hat == 0 {
            return Err(Error::Config("k_hat must be >= 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be >= 2".into()));
        }
        if self.max_pos_nodes == 0 {
            return Err(Error::Config("max_pos_nodes must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.beta_obj) || !(0.0..=1.0).contains(&self.beta_cycle) {
            return Err(Error::Config("beta_obj and beta_cycle must lie in [0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.proposal_jitter) || self.proposal_feature_noise < 0.0 {
            return Err(Error::Config("invalid proposal jitter or noise".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            graph: GraphConfig {
                tau: self.tau,
                ..GraphConfig::default()
            },
            alpha1: self.alpha1,
            beta_cycle: self.beta_cycle,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            neg_ratio: self.neg_ratio,
            policy: self.policy,
        }
    }
}

/// Linear map from object features to embeddings: `rows = F * W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl EmbedderModel {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::DimensionMismatch {
                expected: weights.ncols(),
                actual: bias.len(),
            });
        }
        if weights.ncols() < 2 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 2".into()));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(EmbedderModel { weights, bias })
    }

    /// Gaussian init with std `1 / sqrt(dim_features)` and zero bias.
    pub fn random(dim_features: usize, dim_embed: usize, seed: u64) -> Result<Self> {
        if dim_features == 0 {
            return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim_features as f64).sqrt()).unwrap();
        let weights = DMatrix::from_fn(dim_features, dim_embed, |_, _| normal.sample(&mut rng));
        EmbedderModel::new(weights, DVector::zeros(dim_embed))
    }

    pub fn dim_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim_embed(&self) -> usize {
        self.weights.ncols()
    }

    /// Plain-text form: `rows cols`, one weight row per line, then the bias.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.weights.nrows(), self.weights.ncols());
        let join = |vals: &mut dyn Iterator<Item = f64>| vals.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        for r in 0..self.weights.nrows() {
            let _ = writeln!(out, "{}", join(&mut self.weights.row(r).iter().copied()));
        }
        let _ = writeln!(out, "{}", join(&mut self.bias.iter().copied()));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_row = |(n, line): (usize, &str)| -> Result<Vec<f64>> {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| Error::Parse {
                        line: n + 1,
                        message: format!("'{tok}': {e}"),
                    })
                })
                .collect()
        };
        let header = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing 'rows cols' header".into(),
        })?;
        let dims: Vec<usize> = header
            .1
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: header.0 + 1,
                message: e.to_string(),
            })?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Parse {
                line: header.0 + 1,
                message: "header must be 'rows cols'".into(),
            });
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: "truncated weight rows".into(),
            })?;
            let n = line.0 + 1;
            let row = parse_row(line)?;
            if row.len() != cols {
                return Err(Error::Parse {
                    line: n,
                    message: format!("expected {cols} values, got {}", row.len()),
                });
            }
            data.extend(row);
        }
        let line = lines.next().ok_or_else(|| Error::Parse {
            line: 0,
            message: "missing bias line".into(),
        })?;
        let n = line.0 + 1;
        let bias = parse_row(line)?;
        if bias.len() != cols {
            return Err(Error::Parse {
                line: n,
                message: format!("expected {cols} bias values, got {}", bias.len()),
            });
        }
        if let Some((n, _)) = lines.next() {
            return Err(Error::Parse {
                line: n + 1,
                message: "trailing content".into(),
            });
        }
        EmbedderModel::new(DMatrix::from_row_slice(rows, cols, &data), DVector::from_vec(bias))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        EmbedderModel::from_text(&std::fs::read_to_string(path)?)
    }
}

/// `features * weights + bias`, one embedding per feature row.
pub fn embed(features: &DMatrix<f64>, model: &EmbedderModel) -> Result<EmbeddingMatrix> {
    if features.ncols() != model.dim_features() {
        return Err(Error::DimensionMismatch {
            expected: model.dim_features(),
            actual: features.ncols(),
        });
    }
    let mut out = features * &model.weights;
    for mut row in out.row_iter_mut() {
        row += model.bias.transpose();
    }
    EmbeddingMatrix::new(out)
}

/// Stacks feature vectors into a matrix.
pub fn feature_matrix(features: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: f.len(),
        });
    }
    Ok(DMatrix::from_fn(features.len(), dim, |i, j| features[i][j]))
}

/// One frame as seen by the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingFrame {
    pub detections: Vec<Detection>,
    pub features: Vec<Vec<f64>>,
    /// Ground-truth boxes, present only on annotated frames.
    pub gt_boxes: Option<Vec<BBox>>,
}

/// Identity-free view of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub frames: Vec<TrainingFrame>,
    pub annotation_stride: usize,
}

impl TrainingSequence {
    /// Keeps detections, features and the boxes of frames `0, stride, ...`.
    pub fn from_synthetic(seq: &SyntheticSequence, dets: &[FrameDetections], stride: usize) -> Result<Self> {
        if dets.len() != seq.length {
            return Err(Error::ShapeMismatch(format!(
                "{} detection frames for a {}-frame sequence",
                dets.len(),
                seq.length
            )));
        }
        let mask = crate::synth::sparsify_annotations(seq.length, stride)?;
        let frames = dets
            .iter()
            .enumerate()
            .map(|(t, f)| TrainingFrame {
                detections: f.detections.clone(),
                features: f.features.clone(),
                gt_boxes: mask[t].then(|| seq.frame_boxes(t).into_iter().map(|(_, b)| b).collect()),
            })
            .collect();
        Ok(TrainingSequence {
            frames,
            annotation_stride: stride,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_annotated(&self, t: usize) -> bool {
        self.frames.get(t).is_some_and(|f| f.gt_boxes.is_some())
    }

    /// Frames eligible as key frames: every annotated frame.
    pub fn key_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.is_annotated(t)).collect()
    }

    /// Boxes that define positive proposals on frame `t`.
    pub fn reference_boxes(&self, t: usize, cfg: &TrainConfig) -> Result<Vec<BBox>> {
        let frame = self.frames.get(t).ok_or(Error::IndexOutOfRange {
            index: t,
            len: self.len(),
        })?;
        match cfg.setting {
            Setting::Dense => frame
                .gt_boxes
                .clone()
                .ok_or_else(|| Error::InvalidArgument(format!("dense setting needs ground truth on frame {t}"))),
            Setting::Sparse => Ok(frame
                .detections
                .iter()
                .filter(|d| d.confidence >= cfg.beta_obj)
                .map(|d| d.bbox)
                .collect()),
        }
    }

    fn feature_dim(&self) -> Option<usize> {
        self.frames.iter().flat_map(|f| f.features.first()).map(Vec::len).next()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePair {
    pub key: usize,
    pub reference: usize,
    pub offset: i64,
}

/// Draws a reference frame `t_key + k`, `k` uniform over the non-zero
/// offsets in `[-k_hat, k_hat]` that stay inside the sequence.
pub fn sample_frame_pair<R: Rng>(seq: &TrainingSequence, t_key: usize, cfg: &TrainConfig, rng: &mut R) -> Result<FramePair> {
    if seq.len() < 2 {
        return Err(Error::InvalidArgument("sequence too short for a frame pair".into()));
    }
    if !seq.is_annotated(t_key) {
        return Err(Error::InvalidArgument(format!("key frame {t_key} carries no annotation")));
    }
    if cfg.k_hat == 0 {
        return Err(Error::Config("k_hat must be >= 1".into()));
    }
    let lo = -(cfg.k_hat.min(t_key) as i64);
    let hi = cfg.k_hat.min(seq.len() - 1 - t_key) as i64;
    let count = (hi - lo) as usize;
    let mut k = lo + rng.random_range(0..count) as i64;
    if k >= 0 {
        k += 1;
    }
    Ok(FramePair {
        key: t_key,
        reference: (t_key as i64 + k) as usize,
        offset: k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalLabel {
    Positive,
    Negative,
    Ignored,
}

/// Labels each proposal by its best IoU against `reference`.
pub fn label_proposals(proposals: &[BBox], reference: &[BBox], alpha1: f64, alpha2: f64) -> Vec<ProposalLabel> {
    proposals
        .iter()
        .map(|p| {
            let best = reference.iter().map(|r| iou(p, r)).fold(0.0, f64::max);
            if best >= alpha1 {
                ProposalLabel::Positive
            } else if best < alpha2 {
                ProposalLabel::Negative
            } else {
                ProposalLabel::Ignored
            }
        })
        .collect()
}

/// Proposals and their features, positives first.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledNodes {
    pub boxes: Vec<BBox>,
    pub features: DMatrix<f64>,
    pub positive_count: usize,
}

impl SampledNodes {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// A key frame without positives contributes nothing to training.
    pub fn has_positives(&self) -> bool {
        self.positive_count > 0
    }

    pub fn embed(&self, model: &EmbedderModel) -> Result<NodeSet> {
        NodeSet::new(self.boxes.clone(), embed(&self.features, model)?, self.positive_count)
    }
}

/// Builds graph nodes for one frame.
///
/// Each detection yields itself plus four copies jittered by up to
/// `proposal_jitter` of its size. A proposal's feature is the IoU-weighted
/// mean of the overlapping detections' features plus small noise.
pub fn select_nodes<R: Rng>(
    detections: &[Detection],
    features: &[Vec<f64>],
    reference_boxes: &[BBox],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SampledNodes> {
    if detections.len() != features.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} detections with {} feature rows",
            detections.len(),
            features.len()
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    let feats = feature_matrix(features, dim)?;

    let j = cfg.proposal_jitter;
    let mut proposals = Vec::with_capacity(detections.len() * 5);
    for d in detections {
        let b = d.bbox;
        proposals.push(b);
        for _ in 0..4 {
            let mut u = || if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
            let (dx, dy, sw, sh) = (u(), u(), u(), u());
            proposals.push(BBox::new(b.x + dx * b.w, b.y + dy * b.h, b.w * (1.0 + sw), b.h * (1.0 + sh))?);
        }
    }

    let labels = label_proposals(&proposals, reference_boxes, cfg.alpha1, cfg.alpha2);
    let pos: Vec<usize> = (0..proposals.len()).filter(|&i| labels[i] == ProposalLabel::Positive).collect();
    let neg: Vec<usize> = (0..proposals.len()).filter(|&i| labels[i] == ProposalLabel::Negative).collect();
    let pick = |pool: &[usize], n: usize, rng: &mut R| -> Vec<usize> {
        if pool.len() <= n {
            return pool.to_vec();
        }
        let mut idx = sample(rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    };
    let pos = pick(&pos, cfg.max_pos_nodes, rng);
    let neg = pick(&neg, cfg.neg_ratio * pos.len(), rng);

    let noise = (cfg.proposal_feature_noise > 0.0).then(|| Normal::new(0.0, cfg.proposal_feature_noise).unwrap());
    let chosen: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    let mut node_feats = DMatrix::zeros(chosen.len(), dim);
    for (r, &p) in chosen.iter().enumerate() {
        let src = p / 5;
        let mut total = 0.0;
        for (d, det) in detections.iter().enumerate() {
            let w = if d == src { iou(&proposals[p], &det.bbox).max(1e-6) } else { iou(&proposals[p], &det.bbox) };
            if w > 0.0 {
                total += w;
                let mut row = node_feats.row_mut(r);
                row += feats.row(d) * w;
            }
        }
        let mut row = node_feats.row_mut(r);
        row /= total;
        if let Some(n) = &noise {
            row.iter_mut().for_each(|v| *v += n.sample(rng));
        }
    }
    Ok(SampledNodes {
        boxes: chosen.iter().map(|&p| proposals[p]).collect(),
        features: node_feats,
        positive_count: pos.len(),
    })
}

/// Total loss and its gradient w.r.t. the model parameters.
pub fn loss_and_gradient(
    key: &SampledNodes,
    reference: &SampledNodes,
    model: &EmbedderModel,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<(LossReport, DMatrix<f64>, DVector<f64>)> {
    if !key.has_positives() {
        return Err(Error::Empty("key frame has no positive nodes".into()));
    }
    let key_nodes = key.embed(model)?;
    let ref_nodes = reference.embed(model)?;
    let out = graph_losses(&key_nodes, &ref_nodes, &cfg.loss_config(), rng_seed)?;
    let r = out.report;
    let dw = key.features.transpose() * &r.grad_embeddings_key + reference.features.transpose() * &r.grad_embeddings_ref;
    let db = r.grad_embeddings_key.row_sum().transpose() + r.grad_embeddings_ref.row_sum().transpose();
    Ok((r, dw, db))
}

/// One gradient-descent update on a frame pair.
pub fn train_step(
    key: &SampledNodes,
    reference: &SampledNodes,
    model: &EmbedderModel,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<(EmbedderModel, LossReport)> {
    let (report, dw, db) = loss_and_gradient(key, reference, model, cfg, rng_seed)?;
    if dw.iter().chain(db.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let updated = EmbedderModel::new(
        &model.weights - dw * cfg.learning_rate,
        &model.bias - db * cfg.learning_rate,
    )?;
    Ok((updated, report))
}

/// The frame pair and sampled nodes used for a key frame. Derived from
/// `(seed, sequence, key frame)` only, so every epoch revisits the same pairs.
pub fn prepare_pair(seq: &TrainingSequence, seq_index: usize, t_key: usize, cfg: &TrainConfig) -> Result<(FramePair, SampledNodes, SampledNodes, u64)> {
    let mix = cfg
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((seq_index as u64) << 32)
        .wrapping_add(t_key as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let pair = sample_frame_pair(seq, t_key, cfg, &mut rng)?;
    let kf = &seq.frames[pair.key];
    let rf = &seq.frames[pair.reference];
    let key = select_nodes(&kf.detections, &kf.features, &seq.reference_boxes(pair.key, cfg)?, cfg, &mut rng)?;
    let reference = if cfg.setting == Setting::Dense && !seq.is_annotated(pair.reference) {
        return Err(Error::InvalidArgument(format!(
            "dense setting needs ground truth on frame {}",
            pair.reference
        )));
    } else {
        select_nodes(&rf.detections, &rf.features, &seq.reference_boxes(pair.reference, cfg)?, cfg, &mut rng)?
    };
    Ok((pair, key, reference, rng.random()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLoss {
    pub cycle: f64,
    pub forward: f64,
    pub total: f64,
}

/// Trains from a random init; returns the model and the mean loss per epoch.
pub fn train(dataset: &[TrainingSequence], cfg: &TrainConfig) -> Result<(EmbedderModel, Vec<f64>)> {
    let (model, history) = train_detailed(dataset, cfg)?;
    Ok((model, history.iter().map(|e| e.total).collect()))
}

/// Same as [`train`] with the cycle and forward parts of each epoch mean kept apart.
pub fn train_detailed(dataset: &[TrainingSequence], cfg: &TrainConfig) -> Result<(EmbedderModel, Vec<EpochLoss>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let dim = dataset
        .iter()
        .find_map(TrainingSequence::feature_dim)
        .ok_or_else(|| Error::Empty("no detections in the training dataset".into()))?;
    if cfg.setting == Setting::Dense {
        if let Some(s) = dataset.iter().position(|s| s.annotation_stride != 1) {
            return Err(Error::Config(format!("dense setting needs stride 1, sequence {s} is sparser")));
        }
    }
    let mut model = EmbedderModel::random(dim, cfg.embed_dim, cfg.seed)?;

    let mut pairs = Vec::new();
    for (s, seq) in dataset.iter().enumerate() {
        if seq.len() < 2 {
            continue;
        }
        for t in seq.key_frames() {
            let (pair, key, reference, seed) = prepare_pair(seq, s, t, cfg)?;
            if key.has_positives() && !reference.is_empty() {
                pairs.push((s, pair, key, reference, seed));
            }
        }
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut sum = EpochLoss::default();
        for (s, pair, key, reference, seed) in &pairs {
            let (next, report) = train_step(key, reference, &model, cfg, *seed).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} on sequence {s}, frames {} -> {}",
                    pair.key, pair.reference
                )),
                other => other,
            })?;
            sum.cycle += report.cycle_loss;
            sum.forward += report.forward_loss;
            sum.total += report.total;
            model = next;
        }
        let n = pairs.len().max(1) as f64;
        history.push(EpochLoss {
            cycle: sum.cycle / n,
            forward: sum.forward / n,
            total: sum.total / n,
        });
    }
    Ok((model, history))
}
