//! Temporal object appearance graph math.
//!
//! Nodes are object regions described by embedding rows; edges between two
//! frames are temperature-softmaxed cosine similarities, giving a
//! row-stochastic [`TransitionMatrix`]. A forward transition chained with a
//! backward one is the cycle walk; the latent-node posterior along such a
//! walk drives both forward assignment during training and the biwalk
//! similarity at inference.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{BBox, Cluster};

/// Tolerance on row sums accepted by [`TransitionMatrix::new`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// One embedding per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(DMatrix<f64>);

impl EmbeddingMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding entries".into()));
        }
        Ok(EmbeddingMatrix(data))
    }

    pub fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
        }
        EmbeddingMatrix::new(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
    }

    pub fn empty(dim: usize) -> Result<Self> {
        EmbeddingMatrix::new(DMatrix::zeros(0, dim))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix(self.0.select_rows(idx))
    }
}

/// Graph nodes of one frame: the first `positive_count` rows are positives.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    pub boxes: Vec<BBox>,
    pub embeddings: EmbeddingMatrix,
    pub positive_count: usize,
}

impl NodeSet {
    pub fn new(boxes: Vec<BBox>, embeddings: EmbeddingMatrix, positive_count: usize) -> Result<Self> {
        if boxes.len() != embeddings.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} boxes but {} embedding rows",
                boxes.len(),
                embeddings.rows()
            )));
        }
        if positive_count > boxes.len() {
            return Err(Error::InvalidArgument(format!(
                "positive_count {positive_count} exceeds {} nodes",
                boxes.len()
            )));
        }
        Ok(NodeSet {
            boxes,
            embeddings,
            positive_count,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn positive_boxes(&self) -> &[BBox] {
        &self.boxes[..self.positive_count]
    }

    pub fn positive_embeddings(&self) -> EmbeddingMatrix {
        EmbeddingMatrix(self.embeddings.0.rows(0, self.positive_count).into_owned())
    }
}

/// Row-stochastic affinity between a source and a destination node set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    probs: DMatrix<f64>,
}

impl TransitionMatrix {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        if probs.ncols() == 0 && probs.nrows() > 0 {
            return Err(Error::Empty("transition destination set".into()));
        }
        if probs.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0 + ROW_SUM_TOLERANCE) {
            return Err(Error::NonFinite("transition entries must lie in [0, 1]".into()));
        }
        for (i, row) in probs.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("row {i} sums to {s}")));
            }
        }
        Ok(TransitionMatrix { probs })
    }

    pub fn src(&self) -> usize {
        self.probs.nrows()
    }

    pub fn dst(&self) -> usize {
        self.probs.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[(i, j)]
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    pub tau: f64,
    pub eps_norm: f64,
}

impl GraphConfig {
    pub fn new(tau: f64) -> Result<Self> {
        let cfg = GraphConfig {
            tau,
            ..GraphConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau {} must be positive", self.tau)));
        }
        if !(self.eps_norm > 0.0) {
            return Err(Error::InvalidArgument("eps_norm must be positive".into()));
        }
        Ok(())
    }
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            tau: 0.05,
            eps_norm: 1e-12,
        }
    }
}

/// Guarded row norms: `max(||row||, eps)`.
pub(crate) fn row_norms(m: &DMatrix<f64>, eps: f64) -> Vec<f64> {
    m.row_iter().map(|r| r.norm().max(eps)).collect()
}

pub fn cosine_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix, cfg: &GraphConfig) -> Result<DMatrix<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let na = row_norms(&a.0, cfg.eps_norm);
    let nb = row_norms(&b.0, cfg.eps_norm);
    let mut c = &a.0 * b.0.transpose();
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            c[(i, j)] /= na[i] * nb[j];
        }
    }
    Ok(c)
}

/// Row-wise softmax of `logits / tau` with per-row max subtraction.
pub fn softmax_rows(logits: &DMatrix<f64>, tau: f64) -> Result<TransitionMatrix> {
    if logits.ncols() == 0 {
        return Err(Error::Empty("transition destination set".into()));
    }
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    TransitionMatrix::new(p)
}

pub fn transition_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix, cfg: &GraphConfig) -> Result<TransitionMatrix> {
    if b.rows() == 0 {
        return Err(Error::Empty("transition destination set".into()));
    }
    softmax_rows(&cosine_matrix(a, b, cfg)?, cfg.tau)
}

/// Chains a forward walk with a backward walk: `fwd * bwd`.
pub fn cycle_transition(fwd: &TransitionMatrix, bwd: &TransitionMatrix) -> Result<TransitionMatrix> {
    if fwd.dst() != bwd.src() {
        return Err(Error::ShapeMismatch(format!(
            "forward has {} destinations, backward has {} sources",
            fwd.dst(),
            bwd.src()
        )));
    }
    let mut prod = &fwd.probs * &bwd.probs;
    // Products of stochastic matrices drift by a few ulps; renormalize rows.
    for mut row in prod.row_iter_mut() {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row /= s;
        }
    }
    TransitionMatrix::new(prod)
}

fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        Err(Error::IndexOutOfRange { index, len })
    } else {
        Ok(())
    }
}

/// Posterior over latent nodes `j` for a cycle walk that starts at source
/// node `i` and ends at node `l`: `fwd(i, j) * bwd(j, l) / C`.
pub fn latent_transition_distribution(
    fwd: &TransitionMatrix,
    bwd: &TransitionMatrix,
    i: usize,
    l: usize,
) -> Result<Vec<f64>> {
    if fwd.dst() != bwd.src() {
        return Err(Error::ShapeMismatch("forward/backward latent sets differ".into()));
    }
    check_index(i, fwd.src())?;
    check_index(l, bwd.dst())?;
    let mut p: Vec<f64> = (0..fwd.dst()).map(|j| fwd.get(i, j) * bwd.get(j, l)).collect();
    let c: f64 = p.iter().sum();
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cycle ({i} -> {l}) has zero probability"
        )));
    }
    p.iter_mut().for_each(|v| *v /= c);
    Ok(p)
}

/// Latent posterior averaged over every walk that starts in `source_cluster`
/// and ends in `targets`, normalized by the number of (start, end) pairs.
pub fn latent_cluster_distribution(
    fwd: &TransitionMatrix,
    bwd: &TransitionMatrix,
    source_cluster: &Cluster,
    targets: &Cluster,
) -> Result<Vec<f64>> {
    if source_cluster.is_empty() || targets.is_empty() {
        return Err(Error::Empty("cluster".into()));
    }
    let mut acc = vec![0.0; fwd.dst()];
    for &i in &source_cluster.members {
        for &l in &targets.members {
            let p = latent_transition_distribution(fwd, bwd, i, l)?;
            acc.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
        }
    }
    let pairs = (source_cluster.len() * targets.len()) as f64;
    acc.iter_mut().for_each(|a| *a /= pairs);
    Ok(acc)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(j),
        }
    }
    best
}

/// The max-likelihood latent state of the cluster-averaged cycle walk.
pub fn max_likelihood_state(
    fwd: &TransitionMatrix,
    bwd: &TransitionMatrix,
    source_cluster: &Cluster,
    targets: &Cluster,
) -> Result<usize> {
    let p = latent_cluster_distribution(fwd, bwd, source_cluster, targets)?;
    argmax(&p).ok_or_else(|| Error::Empty("latent node set".into()))
}

/// Probability that walks leaving `cluster` close on `targets`, averaged over
/// the starting nodes.
pub fn cycle_closure_probability(cycle: &TransitionMatrix, cluster: &Cluster, targets: &Cluster) -> Result<f64> {
    if cluster.is_empty() || targets.is_empty() {
        return Err(Error::Empty("cluster".into()));
    }
    let mut total = 0.0;
    for &m in &cluster.members {
        check_index(m, cycle.src())?;
        for &l in &targets.members {
            check_index(l, cycle.dst())?;
            total += cycle.get(m, l);
        }
    }
    Ok(total / cluster.len() as f64)
}

/// Backpropagates `d_probs` through a row softmax with temperature `tau`,
/// returning the gradient w.r.t. the pre-temperature logits.
pub fn softmax_rows_backward(probs: &TransitionMatrix, d_probs: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let p = &probs.probs;
    let mut out = DMatrix::zeros(p.nrows(), p.ncols());
    for i in 0..p.nrows() {
        let dot: f64 = (0..p.ncols()).map(|j| p[(i, j)] * d_probs[(i, j)]).sum();
        for j in 0..p.ncols() {
            out[(i, j)] = p[(i, j)] * (d_probs[(i, j)] - dot) / tau;
        }
    }
    out
}

/// Backpropagates `d_cos` through [`cosine_matrix`], returning gradients
/// w.r.t. both embedding matrices.
pub fn cosine_backward(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    cos: &DMatrix<f64>,
    d_cos: &DMatrix<f64>,
    cfg: &GraphConfig,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (am, bm) = (&a.0, &b.0);
    let na = row_norms(am, cfg.eps_norm);
    let nb = row_norms(bm, cfg.eps_norm);
    // Below the guard the norm is a constant and contributes no gradient.
    let a_live: Vec<bool> = am.row_iter().map(|r| r.norm() > cfg.eps_norm).collect();
    let b_live: Vec<bool> = bm.row_iter().map(|r| r.norm() > cfg.eps_norm).collect();

    let mut da = DMatrix::zeros(am.nrows(), am.ncols());
    let mut db = DMatrix::zeros(bm.nrows(), bm.ncols());
    for i in 0..am.nrows() {
        for j in 0..bm.nrows() {
            let g = d_cos[(i, j)];
            if g == 0.0 {
                continue;
            }
            let c = cos[(i, j)];
            let s = g / (na[i] * nb[j]);
            for k in 0..am.ncols() {
                da[(i, k)] += s * bm[(j, k)];
                db[(j, k)] += s * am[(i, k)];
            }
            if a_live[i] {
                let t = g * c / (na[i] * na[i]);
                for k in 0..am.ncols() {
                    da[(i, k)] -= t * am[(i, k)];
                }
            }
            if b_live[j] {
                let t = g * c / (nb[j] * nb[j]);
                for k in 0..bm.ncols() {
                    db[(j, k)] -= t * bm[(j, k)];
                }
            }
        }
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(rows: &[&[f64]]) -> EmbeddingMatrix {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        EmbeddingMatrix::from_rows(&v, rows[0].len()).unwrap()
    }

    fn random_stochastic(rng: &mut ChaCha8Rng, r: usize, c: usize) -> TransitionMatrix {
        let logits = DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        softmax_rows(&logits, 0.3).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let cfg = GraphConfig::default();
        let a = emb(&[&[1.0, 0.0], &[0.3, -2.0]]);
        let b = emb(&[&[1.0, 1.0], &[0.0, 1.0], &[0.3, -2.0]]);
        let c = cosine_matrix(&a, &b, &cfg).unwrap();
        assert!((c[(0, 0)] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(c[(0, 1)].abs() < 1e-15);
        assert!((c[(1, 2)] - 1.0).abs() < 1e-12);
        assert!(cosine_matrix(&a, &emb(&[&[1.0, 0.0, 0.0]]), &cfg).is_err());
    }

    #[test]
    fn zero_norm_rows_are_guarded() {
        let cfg = GraphConfig::default();
        let c = cosine_matrix(&emb(&[&[0.0, 0.0]]), &emb(&[&[1.0, 0.0]]), &cfg).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
    }

    #[test]
    fn transition_examples() {
        let cfg = GraphConfig::default();
        let a = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = transition_matrix(&a, &emb(&[&[0.5, 0.5]]), &cfg).unwrap();
        assert_eq!(t.dst(), 1);
        assert!((t.get(0, 0) - 1.0).abs() < 1e-15 && (t.get(1, 0) - 1.0).abs() < 1e-15);

        let t = transition_matrix(&emb(&[&[1.0, 0.0]]), &emb(&[&[0.0, 1.0], &[0.0, -1.0]]), &cfg).unwrap();
        assert!((t.get(0, 0) - 0.5).abs() < 1e-15);

        assert!(transition_matrix(&a, &EmbeddingMatrix::empty(2).unwrap(), &cfg).is_err());
    }

    #[test]
    fn sharp_softmax_matches_high_precision_value() {
        // softmax(20, 0)[1] = 1 / (1 + e^20); reference from a 50-digit evaluation.
        let expected_small = 2.061_153_618_190_204e-9;
        let t = transition_matrix(&emb(&[&[1.0, 0.0]]), &emb(&[&[1.0, 0.0], &[0.0, 1.0]]), &GraphConfig::default())
            .unwrap();
        assert!((t.get(0, 1) - expected_small).abs() < 1e-22);
        assert!((t.get(0, 0) - (1.0 - expected_small)).abs() < 1e-15);
    }

    #[test]
    fn cycle_examples() {
        let one = TransitionMatrix::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(cycle_transition(&one, &one).unwrap().get(0, 0), 1.0);

        let fwd = TransitionMatrix::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.5])).unwrap();
        let bwd = TransitionMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let c = cycle_transition(&fwd, &bwd).unwrap();
        assert_eq!((c.get(0, 0), c.get(0, 1)), (0.5, 0.5));

        assert!(cycle_transition(&fwd, &one).is_err());
    }

    #[test]
    fn cycle_matches_path_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fwd = random_stochastic(&mut rng, 4, 6);
        let bwd = random_stochastic(&mut rng, 6, 5);
        let c = cycle_transition(&fwd, &bwd).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for m in 0..6 {
                    s += fwd.get(i, m) * bwd.get(m, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn latent_examples() {
        let one = TransitionMatrix::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(latent_transition_distribution(&one, &one, 0, 0).unwrap(), vec![1.0]);

        let fwd = TransitionMatrix::new(DMatrix::from_row_slice(1, 3, &[1.0 / 3.0; 3])).unwrap();
        let bwd = TransitionMatrix::new(DMatrix::from_row_slice(3, 2, &[0.5; 6])).unwrap();
        let p = latent_transition_distribution(&fwd, &bwd, 0, 1).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let fwd = TransitionMatrix::new(DMatrix::from_row_slice(1, 2, &[0.8, 0.2])).unwrap();
        let bwd = TransitionMatrix::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5])).unwrap();
        let p = latent_transition_distribution(&fwd, &bwd, 0, 0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);

        assert!(latent_transition_distribution(&fwd, &bwd, 1, 0).is_err());
    }

    #[test]
    fn max_likelihood_examples() {
        let one = TransitionMatrix::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let c0 = Cluster::singleton(0);
        assert_eq!(max_likelihood_state(&one, &one, &c0, &c0).unwrap(), 0);

        // Both sources strongly prefer latent node 2.
        let fwd = TransitionMatrix::new(DMatrix::from_row_slice(
            2,
            3,
            &[0.1, 0.1, 0.8, 0.05, 0.15, 0.8],
        ))
        .unwrap();
        let bwd = TransitionMatrix::new(DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5])).unwrap();
        let both = Cluster {
            anchor: 0,
            members: vec![0, 1],
        };
        for i in 0..2 {
            let single = Cluster::singleton(i);
            assert_eq!(max_likelihood_state(&fwd, &bwd, &single, &single).unwrap(), 2);
        }
        assert_eq!(max_likelihood_state(&fwd, &bwd, &both, &both).unwrap(), 2);

        let empty = Cluster {
            anchor: 0,
            members: vec![],
        };
        assert!(max_likelihood_state(&fwd, &bwd, &empty, &both).is_err());
    }

    #[test]
    fn max_likelihood_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let fwd = random_stochastic(&mut rng, 3, 4);
            let bwd = random_stochastic(&mut rng, 4, 5);
            let src = Cluster {
                anchor: 0,
                members: vec![0, 1, 2],
            };
            let tgt = Cluster {
                anchor: 1,
                members: vec![1, 3, 4],
            };
            let mut score = [0.0f64; 4];
            for &i in &src.members {
                for &l in &tgt.members {
                    let mut c = 0.0;
                    for m in 0..4 {
                        c += fwd.get(i, m) * bwd.get(m, l);
                    }
                    for (j, s) in score.iter_mut().enumerate() {
                        *s += fwd.get(i, j) * bwd.get(j, l) / c;
                    }
                }
            }
            let mut best = 0;
            for j in 1..4 {
                if score[j] > score[best] {
                    best = j;
                }
            }
            assert_eq!(max_likelihood_state(&fwd, &bwd, &src, &tgt).unwrap(), best);
        }
    }

    #[test]
    fn max_likelihood_is_permutation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fwd = random_stochastic(&mut rng, 2, 5);
        let bwd = random_stochastic(&mut rng, 5, 2);
        let c = Cluster {
            anchor: 0,
            members: vec![0, 1],
        };
        let z = max_likelihood_state(&fwd, &bwd, &c, &c).unwrap();
        let perm = [3usize, 0, 4, 1, 2]; // new column k holds old latent perm[k]
        let pf = TransitionMatrix::new(DMatrix::from_fn(2, 5, |i, k| fwd.get(i, perm[k]))).unwrap();
        let pb = TransitionMatrix::new(DMatrix::from_fn(5, 2, |k, l| bwd.get(perm[k], l))).unwrap();
        let pz = max_likelihood_state(&pf, &pb, &c, &c).unwrap();
        assert_eq!(perm[pz], z);
    }

    #[test]
    fn closure_examples() {
        let one = TransitionMatrix::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let c0 = Cluster::singleton(0);
        assert_eq!(cycle_closure_probability(&one, &c0, &c0).unwrap(), 1.0);

        let cyc = TransitionMatrix::new(DMatrix::from_row_slice(2, 3, &[0.4, 0.4, 0.2, 0.3, 0.5, 0.2])).unwrap();
        let c = Cluster {
            anchor: 0,
            members: vec![0, 1],
        };
        assert!((cycle_closure_probability(&cyc, &c, &c).unwrap() - 0.8).abs() < 1e-15);

        // Mass lands outside the target set: falls below the 0.8 training gate.
        let cyc = TransitionMatrix::new(DMatrix::from_row_slice(1, 3, &[0.1, 0.05, 0.85])).unwrap();
        let v = cycle_closure_probability(&cyc, &c0, &Cluster::singleton(1)).unwrap();
        assert!(v < 0.8);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn temperature_sharpens_argmax() {
        let a = emb(&[&[1.0, 0.2, -0.3]]);
        let b = emb(&[&[1.0, 0.1, -0.2], &[0.2, 1.0, 0.0], &[-0.5, 0.4, 1.0]]);
        let mut prev = 0.0;
        for tau in [1.0, 0.5, 0.2, 0.1, 0.07, 0.05] {
            let t = transition_matrix(&a, &b, &GraphConfig::new(tau).unwrap()).unwrap();
            assert!(t.get(0, 0) > prev);
            prev = t.get(0, 0);
        }
    }

    fn arb_embeddings(max_rows: usize, dim: usize) -> impl Strategy<Value = EmbeddingMatrix> {
        prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), 1..max_rows)
            .prop_map(move |rows| EmbeddingMatrix::from_rows(&rows, dim).unwrap())
    }

    proptest! {
        #[test]
        fn transitions_are_row_stochastic(a in arb_embeddings(20, 5), b in arb_embeddings(20, 5)) {
            let t = transition_matrix(&a, &b, &GraphConfig::default()).unwrap();
            for row in t.probs().row_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
            let c = cosine_matrix(&a, &b, &GraphConfig::default()).unwrap();
            prop_assert!(c.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }

        #[test]
        fn cosine_is_scale_invariant(a in arb_embeddings(8, 4), b in arb_embeddings(8, 4), s in 0.01..100.0f64) {
            prop_assume!(a.matrix().row(0).norm() > 1e-3);
            let cfg = GraphConfig::default();
            let mut scaled = a.matrix().clone();
            scaled.row_mut(0).scale_mut(s);
            let c1 = cosine_matrix(&a, &b, &cfg).unwrap();
            let c2 = cosine_matrix(&EmbeddingMatrix::new(scaled).unwrap(), &b, &cfg).unwrap();
            for (x, y) in c1.iter().zip(c2.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_ignores_row_shift(a in arb_embeddings(6, 3), b in arb_embeddings(6, 3), shift in -5.0..5.0f64) {
            let cfg = GraphConfig::default();
            let c = cosine_matrix(&a, &b, &cfg).unwrap();
            let mut shifted = c.clone();
            shifted.row_mut(0).add_scalar_mut(shift);
            let t1 = softmax_rows(&c, cfg.tau).unwrap();
            let t2 = softmax_rows(&shifted, cfg.tau).unwrap();
            for j in 0..t1.dst() {
                prop_assert!((t1.get(0, j) - t2.get(0, j)).abs() < 1e-12);
            }
        }

        #[test]
        fn latent_distribution_normalizes(seed in 0u64..10_000, n in 1usize..7, m in 1usize..7, k in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fwd = random_stochastic(&mut rng, n, m);
            let bwd = random_stochastic(&mut rng, m, k);
            for i in 0..n {
                for l in 0..k {
                    let p = latent_transition_distribution(&fwd, &bwd, i, l).unwrap();
                    prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
