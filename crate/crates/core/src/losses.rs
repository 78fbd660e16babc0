//! Self-supervision objectives on the cycle walk.
//!
//! The cycle loss is a multi-positive contrastive term on the chained
//! key -> reference -> key transition. The forward loss pulls forward
//! transitions toward pseudo-labels found by greedy, mutually exclusive
//! cluster assignment. [`graph_losses`] evaluates both from two frames'
//! embeddings and backpropagates to those embeddings analytically.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{cluster_of, BBox, Cluster};
use crate::toag::{
    cosine_backward, cosine_matrix, cycle_closure_probability, cycle_transition,
    latent_cluster_distribution, softmax_rows, softmax_rows_backward, GraphConfig, NodeSet,
    TransitionMatrix,
};

/// Which key nodes count as positive targets for a cycle walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetPolicy {
    /// The IoU cluster of the starting node.
    #[default]
    MultiPositive,
    /// Only the starting node itself.
    SinglePositive,
}

impl std::str::FromStr for TargetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(TargetPolicy::MultiPositive),
            "single" => Ok(TargetPolicy::SinglePositive),
            other => Err(Error::Config(format!("unknown target policy '{other}'"))),
        }
    }
}

impl std::fmt::Display for TargetPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetPolicy::MultiPositive => "multi",
            TargetPolicy::SinglePositive => "single",
        })
    }
}

/// Positive/negative cycle targets for each positive key node.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSets {
    pub positives: Vec<Cluster>,
    pub negatives: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignedPair {
    pub key: Cluster,
    pub latent: Cluster,
    pub closure: f64,
}

/// Pseudo-assignments of key clusters to reference clusters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardAssignment {
    /// In processing order (non-increasing closure probability).
    pub pairs: Vec<AssignedPair>,
    pub rejected: Vec<Cluster>,
}

/// A loss value and its gradients w.r.t. the key and reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPart {
    pub value: f64,
    pub grad_key: DMatrix<f64>,
    pub grad_ref: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub cycle_loss: f64,
    pub forward_loss: f64,
    pub total: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub grad_embeddings_key: DMatrix<f64>,
    pub grad_embeddings_ref: DMatrix<f64>,
}

pub fn build_targets(key_nodes: &NodeSet, alpha1: f64) -> Result<TargetSets> {
    build_targets_from_boxes(&key_nodes.boxes, key_nodes.positive_count, alpha1, TargetPolicy::MultiPositive)
}

/// Targets for the first `positive_count` boxes against all `boxes`.
pub fn build_targets_from_boxes(
    boxes: &[BBox],
    positive_count: usize,
    alpha1: f64,
    policy: TargetPolicy,
) -> Result<TargetSets> {
    if positive_count > boxes.len() {
        return Err(Error::InvalidArgument("positive_count exceeds node count".into()));
    }
    let mut positives = Vec::with_capacity(positive_count);
    let mut negatives = Vec::with_capacity(positive_count);
    for i in 0..positive_count {
        let pos = match policy {
            TargetPolicy::MultiPositive => cluster_of(i, boxes, alpha1)?,
            TargetPolicy::SinglePositive => Cluster::singleton(i),
        };
        let neg = (0..boxes.len()).filter(|j| !pos.contains(*j)).collect();
        positives.push(pos);
        negatives.push(neg);
    }
    Ok(TargetSets { positives, negatives })
}

/// `sum_i log(1 + sum_{l in Y+} sum_{j in Y-} exp(cyc(i,j) - cyc(i,l)))`,
/// taken on raw probabilities, with its gradient w.r.t. `cycle`.
pub fn cycle_loss(cycle: &TransitionMatrix, targets: &TargetSets) -> Result<(f64, DMatrix<f64>)> {
    if targets.positives.len() != cycle.src() {
        return Err(Error::ShapeMismatch(format!(
            "{} target sets for {} cycle rows",
            targets.positives.len(),
            cycle.src()
        )));
    }
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(cycle.src(), cycle.dst());
    for (i, (pos, neg)) in targets.positives.iter().zip(&targets.negatives).enumerate() {
        if neg.is_empty() {
            continue;
        }
        // The double sum factorizes into (sum_j e^{a_ij}) * (sum_l e^{-a_il}).
        let exp_neg: Vec<f64> = neg.iter().map(|&j| cycle.get(i, j).exp()).collect();
        let exp_pos: Vec<f64> = pos.members.iter().map(|&l| (-cycle.get(i, l)).exp()).collect();
        let sn: f64 = exp_neg.iter().sum();
        let sp: f64 = exp_pos.iter().sum();
        let s = sn * sp;
        loss += s.ln_1p();
        let denom = 1.0 + s;
        for (&j, e) in neg.iter().zip(&exp_neg) {
            grad[(i, j)] += e * sp / denom;
        }
        for (&l, e) in pos.members.iter().zip(&exp_pos) {
            grad[(i, l)] -= e * sn / denom;
        }
    }
    Ok((loss, grad))
}

/// Unique IoU clusters around each box, in first-seen order.
pub fn unique_clusters(boxes: &[BBox], alpha1: f64) -> Result<Vec<Cluster>> {
    let mut out: Vec<Cluster> = Vec::new();
    for i in 0..boxes.len() {
        let c = cluster_of(i, boxes, alpha1)?;
        if !out.iter().any(|o| o.members == c.members) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Greedy, mutually exclusive assignment of key clusters to reference
/// clusters.
///
/// Clusters are visited by decreasing cycle-closure probability; those
/// below `beta_cycle` are rejected. Each remaining cluster takes the most
/// likely latent node (cluster-averaged posterior) that no earlier
/// assignment has claimed, and its latent cluster is built around that node.
/// A cluster left with no unclaimed latent node is rejected.
pub fn forward_assign(
    fwd: &TransitionMatrix,
    bwd: &TransitionMatrix,
    key_clusters: &[Cluster],
    ref_boxes: &[BBox],
    beta_cycle: f64,
    alpha1: f64,
) -> Result<ForwardAssignment> {
    if ref_boxes.len() != fwd.dst() {
        return Err(Error::ShapeMismatch(format!(
            "{} reference boxes for {} latent nodes",
            ref_boxes.len(),
            fwd.dst()
        )));
    }
    let cycle = cycle_transition(fwd, bwd)?;

    let mut unique: Vec<&Cluster> = Vec::new();
    for c in key_clusters {
        if !unique.iter().any(|u| u.members == c.members) {
            unique.push(c);
        }
    }
    let mut scored = unique
        .into_iter()
        .map(|c| Ok((cycle_closure_probability(&cycle, c, c)?, c)))
        .collect::<Result<Vec<_>>>()?;
    // Stable: equal closures keep first-seen order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut out = ForwardAssignment::default();
    let mut claimed = vec![false; ref_boxes.len()];
    for (closure, cluster) in scored {
        if closure < beta_cycle {
            out.rejected.push(cluster.clone());
            continue;
        }
        let p = latent_cluster_distribution(fwd, bwd, cluster, cluster)?;
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
        match order.into_iter().find(|&j| !claimed[j]) {
            Some(z) => {
                let latent = cluster_of(z, ref_boxes, alpha1)?;
                for &m in &latent.members {
                    claimed[m] = true;
                }
                out.pairs.push(AssignedPair {
                    key: cluster.clone(),
                    latent,
                    closure,
                });
            }
            None => out.rejected.push(cluster.clone()),
        }
    }
    Ok(out)
}

/// Squared error between forward transitions and the pseudo-label
/// indicator, over all positive pairs and `neg_ratio` sampled negatives per
/// positive for each assigned cluster.
pub fn forward_loss(
    fwd: &TransitionMatrix,
    assignment: &ForwardAssignment,
    neg_ratio: usize,
    rng_seed: u64,
) -> Result<(f64, DMatrix<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(fwd.src(), fwd.dst());
    let mut add = |i: usize, j: usize, target: f64, grad: &mut DMatrix<f64>| {
        let r = fwd.get(i, j) - target;
        loss += r * r;
        grad[(i, j)] += 2.0 * r;
    };
    for pair in &assignment.pairs {
        let mut negatives = Vec::new();
        for &i in &pair.key.members {
            if i >= fwd.src() {
                return Err(Error::IndexOutOfRange { index: i, len: fwd.src() });
            }
            for j in 0..fwd.dst() {
                if pair.latent.contains(j) {
                    add(i, j, 1.0, &mut grad);
                } else {
                    negatives.push((i, j));
                }
            }
        }
        let wanted = (neg_ratio * pair.key.len() * pair.latent.len()).min(negatives.len());
        let mut picked = sample(&mut rng, negatives.len(), wanted).into_vec();
        picked.sort_unstable();
        for k in picked {
            let (i, j) = negatives[k];
            add(i, j, 0.0, &mut grad);
        }
    }
    Ok((loss, grad))
}

pub fn total_loss(cycle_part: &LossPart, forward_part: &LossPart, gamma1: f64, gamma2: f64) -> Result<LossReport> {
    if cycle_part.grad_key.shape() != forward_part.grad_key.shape()
        || cycle_part.grad_ref.shape() != forward_part.grad_ref.shape()
    {
        return Err(Error::ShapeMismatch("loss gradients differ in shape".into()));
    }
    Ok(LossReport {
        cycle_loss: cycle_part.value,
        forward_loss: forward_part.value,
        total: gamma1 * cycle_part.value + gamma2 * forward_part.value,
        gamma1,
        gamma2,
        grad_embeddings_key: &cycle_part.grad_key * gamma1 + &forward_part.grad_key * gamma2,
        grad_embeddings_ref: &cycle_part.grad_ref * gamma1 + &forward_part.grad_ref * gamma2,
    })
}

/// Knobs for [`graph_losses`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub graph: GraphConfig,
    pub alpha1: f64,
    pub beta_cycle: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub neg_ratio: usize,
    pub policy: TargetPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            graph: GraphConfig::default(),
            alpha1: 0.7,
            beta_cycle: 0.8,
            gamma1: 1.0,
            gamma2: 2.0,
            neg_ratio: 3,
            policy: TargetPolicy::MultiPositive,
        }
    }
}

/// Everything computed for one key/reference pair.
#[derive(Debug, Clone)]
pub struct GraphLosses {
    pub report: LossReport,
    pub fwd: TransitionMatrix,
    pub bwd: TransitionMatrix,
    pub cycle: TransitionMatrix,
    pub assignment: ForwardAssignment,
}

/// Forward pass of the walk plus analytic backprop of both losses to the
/// key and reference embeddings.
pub fn graph_losses(key: &NodeSet, reference: &NodeSet, cfg: &LossConfig, rng_seed: u64) -> Result<GraphLosses> {
    if key.positive_count == 0 {
        return Err(Error::Empty("key frame has no positive nodes".into()));
    }
    if reference.is_empty() {
        return Err(Error::Empty("reference frame has no nodes".into()));
    }
    let g = &cfg.graph;
    let key_pos = key.positive_embeddings();
    let cos_f = cosine_matrix(&key_pos, &reference.embeddings, g)?;
    let fwd = softmax_rows(&cos_f, g.tau)?;
    let cos_b = cosine_matrix(&reference.embeddings, &key.embeddings, g)?;
    let bwd = softmax_rows(&cos_b, g.tau)?;
    let cycle = cycle_transition(&fwd, &bwd)?;

    let targets = build_targets_from_boxes(&key.boxes, key.positive_count, cfg.alpha1, cfg.policy)?;
    let (lc, d_cycle) = cycle_loss(&cycle, &targets)?;

    let key_clusters = unique_clusters(key.positive_boxes(), cfg.alpha1)?;
    let assignment = forward_assign(&fwd, &bwd, &key_clusters, &reference.boxes, cfg.beta_cycle, cfg.alpha1)?;
    let (lf, d_fwd_direct) = forward_loss(&fwd, &assignment, cfg.neg_ratio, rng_seed)?;

    let backprop = |d_fwd: DMatrix<f64>, d_bwd: DMatrix<f64>| {
        let dcf = softmax_rows_backward(&fwd, &d_fwd, g.tau);
        let dcb = softmax_rows_backward(&bwd, &d_bwd, g.tau);
        let (dk_pos, dr1) = cosine_backward(&key_pos, &reference.embeddings, &cos_f, &dcf, g);
        let (dr2, mut dk) = cosine_backward(&reference.embeddings, &key.embeddings, &cos_b, &dcb, g);
        let mut top = dk.rows_mut(0, key.positive_count);
        top += dk_pos;
        (dk, dr1 + dr2)
    };

    let (gk, gr) = backprop(&d_cycle * bwd.probs().transpose(), fwd.probs().transpose() * &d_cycle);
    let cycle_part = LossPart {
        value: lc,
        grad_key: gk,
        grad_ref: gr,
    };
    let (gk, gr) = backprop(d_fwd_direct, DMatrix::zeros(bwd.src(), bwd.dst()));
    let forward_part = LossPart {
        value: lf,
        grad_key: gk,
        grad_ref: gr,
    };
    let report = total_loss(&cycle_part, &forward_part, cfg.gamma1, cfg.gamma2)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(GraphLosses {
        report,
        fwd,
        bwd,
        cycle,
        assignment,
    })
}

/// Largest relative disagreement between an analytic gradient and central
/// differences: `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn grad_check<F>(loss: F, params: &DMatrix<f64>, step: f64) -> Result<f64>
where
    F: Fn(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!("step {step} outside [1e-7, 1e-3]")));
    }
    let (value, analytic) = loss(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if analytic.shape() != params.shape() {
        return Err(Error::ShapeMismatch("gradient shape differs from parameters".into()));
    }
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for idx in 0..params.len() {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let (up, _) = loss(&probe)?;
        probe[idx] = orig - step;
        let (down, _) = loss(&probe)?;
        probe[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
