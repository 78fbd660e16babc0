//! Appearance similarity between detections and track candidates, and the
//! motion-gated cost fusion.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::toag::{cosine_matrix, softmax_rows, EmbeddingMatrix, GraphConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// `(c + 1) / 2` of the cosine similarity.
    Cosine,
    /// Mean of row- and column-softmax of the cosine matrix.
    Bisoftmax,
    /// Latent-transition probability of the candidate on the detection's
    /// cycle walk, gated by the cycle-closure probability.
    #[default]
    Biwalk,
    /// No appearance; association by motion only.
    None,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "bisoftmax" => Ok(Metric::Bisoftmax),
            "biwalk" => Ok(Metric::Biwalk),
            "none" => Ok(Metric::None),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Bisoftmax => "bisoftmax",
            Metric::Biwalk => "biwalk",
            Metric::None => "none",
        })
    }
}

/// Biwalk scores before gating, plus the per-detection closure `cyc(i, i)`.
pub fn biwalk_raw(dets: &EmbeddingMatrix, cands: &EmbeddingMatrix, tau: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let g = GraphConfig::new(tau)?;
    let (n, m) = (dets.rows(), cands.rows());
    if m == 0 || n == 0 {
        return Ok((DMatrix::zeros(n, m), vec![0.0; n]));
    }
    let fwd = softmax_rows(&cosine_matrix(dets, cands, &g)?, tau)?;
    let bwd = softmax_rows(&cosine_matrix(cands, dets, &g)?, tau)?;
    let mut scores = DMatrix::zeros(n, m);
    let mut closure = vec![0.0; n];
    for i in 0..n {
        let path: Vec<f64> = (0..m).map(|j| fwd.get(i, j) * bwd.get(j, i)).collect();
        let c: f64 = path.iter().sum();
        closure[i] = c;
        if c > 0.0 {
            for j in 0..m {
                scores[(i, j)] = path[j] / c;
            }
        }
    }
    Ok((scores, closure))
}

/// Detection-by-candidate similarity in `[0, 1]`. An empty candidate set
/// yields an `N x 0` matrix.
pub fn appearance_similarity(
    dets: &EmbeddingMatrix,
    cands: &EmbeddingMatrix,
    metric: Metric,
    tau: f64,
    beta_cycle: f64,
) -> Result<DMatrix<f64>> {
    if dets.dim() != cands.dim() {
        return Err(Error::DimensionMismatch {
            expected: dets.dim(),
            actual: cands.dim(),
        });
    }
    let (n, m) = (dets.rows(), cands.rows());
    if n == 0 || m == 0 {
        return Ok(DMatrix::zeros(n, m));
    }
    let g = GraphConfig::new(tau)?;
    match metric {
        Metric::Cosine => Ok(cosine_matrix(dets, cands, &g)?.map(|c| ((c + 1.0) / 2.0).clamp(0.0, 1.0))),
        Metric::Bisoftmax => {
            let cos = cosine_matrix(dets, cands, &g)?;
            let rows = softmax_rows(&cos, tau)?;
            let cols = softmax_rows(&cos.transpose(), tau)?;
            Ok(DMatrix::from_fn(n, m, |i, j| 0.5 * (rows.get(i, j) + cols.get(j, i))))
        }
        Metric::Biwalk => {
            let (mut s, closure) = biwalk_raw(dets, cands, tau)?;
            for (i, &c) in closure.iter().enumerate() {
                if c < beta_cycle {
                    s.row_mut(i).fill(0.0);
                }
            }
            Ok(s)
        }
        Metric::None => Ok(DMatrix::zeros(n, m)),
    }
}

/// Thresholds of the motion-gated fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub beta_iou: f64,
    pub beta_biwalk: f64,
    pub lambda_biwalk: f64,
}

/// `W = min(lambda * d_hat, d_iou)`, where `d_hat` is the appearance distance
/// when both the appearance and IoU distances pass their gates and 1 otherwise.
pub fn fused_cost(sim: &DMatrix<f64>, det_boxes: &[BBox], cand_boxes: &[BBox], p: &FusionParams) -> Result<DMatrix<f64>> {
    if sim.shape() != (det_boxes.len(), cand_boxes.len()) {
        return Err(Error::ShapeMismatch(format!(
            "similarity {:?} for {} detections and {} candidates",
            sim.shape(),
            det_boxes.len(),
            cand_boxes.len()
        )));
    }
    Ok(DMatrix::from_fn(det_boxes.len(), cand_boxes.len(), |i, j| {
        let d_iou = 1.0 - iou(&det_boxes[i], &cand_boxes[j]);
        let d_app = 1.0 - sim[(i, j)];
        let d_hat = if d_iou < p.beta_iou && d_app < p.beta_biwalk { d_app } else { 1.0 };
        (p.lambda_biwalk * d_hat).min(d_iou)
    }))
}

/// `1 - IoU` between every detection and candidate.
pub fn iou_distance(det_boxes: &[BBox], cand_boxes: &[BBox]) -> DMatrix<f64> {
    DMatrix::from_fn(det_boxes.len(), cand_boxes.len(), |i, j| 1.0 - iou(&det_boxes[i], &cand_boxes[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), rows[0].len()).unwrap()
    }

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn biwalk_single_pair() {
        let e = emb(&[&[0.3, 0.4]]);
        let s = appearance_similarity(&e, &e, Metric::Biwalk, 0.07, 0.1).unwrap();
        assert_eq!(s[(0, 0)], 1.0);
    }

    #[test]
    fn biwalk_gate_zeroes_orthogonal_row() {
        // d0 is orthogonal to both candidates, d1 matches both exactly.
        // cyc(0,0) = sum_j 0.5 * bwd(j,0), with bwd(j,0) = 1 / (1 + e^{1/tau}).
        let dets = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cands = emb(&[&[0.0, 1.0], &[0.0, 2.0]]);
        let expected = 1.0 / (1.0 + (1.0f64 / 0.07).exp());
        let (_, closure) = biwalk_raw(&dets, &cands, 0.07).unwrap();
        assert!((closure[0] - expected).abs() < 1e-15);
        assert!(closure[0] < 0.1);
        let s = appearance_similarity(&dets, &cands, Metric::Biwalk, 0.07, 0.1).unwrap();
        assert_eq!(s.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert!((s[(1, 0)] + s[(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let d = EmbeddingMatrix::from_rows(&rows(4, &mut rng), 5).unwrap();
        let c = EmbeddingMatrix::from_rows(&rows(3, &mut rng), 5).unwrap();
        for metric in [Metric::Cosine, Metric::Bisoftmax, Metric::Biwalk, Metric::None] {
            let s = appearance_similarity(&d, &c, metric, 0.07, 0.1).unwrap();
            assert_eq!(s.shape(), (4, 3));
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let empty = EmbeddingMatrix::empty(5).unwrap();
        assert_eq!(appearance_similarity(&d, &empty, Metric::Biwalk, 0.07, 0.1).unwrap().shape(), (4, 0));
        let other = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]], 2).unwrap();
        assert!(appearance_similarity(&d, &other, Metric::Cosine, 0.07, 0.1).is_err());
    }

    #[test]
    fn bisoftmax_matches_definition() {
        let d = emb(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let c = emb(&[&[0.0, 1.0], &[1.0, 1.0], &[1.0, 0.2]]);
        let s = appearance_similarity(&d, &c, Metric::Bisoftmax, 0.07, 0.1).unwrap();
        let cos = |a: &[f64], b: &[f64]| (a[0] * b[0] + a[1] * b[1]) / (a[0].hypot(a[1]) * b[0].hypot(b[1]));
        let dr = [[1.0, 0.0], [0.6, 0.8]];
        let cr = [[0.0, 1.0], [1.0, 1.0], [1.0, 0.2]];
        for i in 0..2 {
            for j in 0..3 {
                let row: f64 = (0..3).map(|k| (cos(&dr[i], &cr[k]) / 0.07).exp()).sum();
                let col: f64 = (0..2).map(|k| (cos(&dr[k], &cr[j]) / 0.07).exp()).sum();
                let e = (cos(&dr[i], &cr[j]) / 0.07).exp();
                assert!((s[(i, j)] - 0.5 * (e / row + e / col)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn biwalk_rows_normalize(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let c: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let (s, closure) = biwalk_raw(
                &EmbeddingMatrix::from_rows(&d, 4).unwrap(),
                &EmbeddingMatrix::from_rows(&c, 4).unwrap(),
                0.07,
            ).unwrap();
            for i in 0..3 {
                if closure[i] > 0.0 {
                    prop_assert!((s.row(i).sum() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn fused_cost_examples() {
        let p = FusionParams {
            beta_iou: 0.5,
            beta_biwalk: 0.2,
            lambda_biwalk: 2.0,
        };
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let far = bx(100.0, 100.0, 10.0, 10.0);
        let w = fused_cost(&DMatrix::from_element(1, 1, 1.0), &[a], &[a], &p).unwrap();
        assert_eq!(w[(0, 0)], 0.0);
        let w = fused_cost(&DMatrix::from_element(1, 1, 1.0), &[a], &[far], &p).unwrap();
        assert_eq!(w[(0, 0)], 1.0);
        // IoU 0.6: a 10x10 box against a 10x(10/0.6) box sharing its top edge.
        let tall = bx(0.0, 0.0, 10.0, 10.0 / 0.6);
        let w = fused_cost(&DMatrix::from_element(1, 1, 0.9), &[a], &[tall], &p).unwrap();
        assert!((w[(0, 0)] - 0.2).abs() < 1e-12);
        assert!(fused_cost(&DMatrix::zeros(2, 1), &[a], &[a], &p).is_err());
    }

    #[test]
    fn rejected_pairs_fall_back_to_motion() {
        let p = FusionParams {
            beta_iou: 0.5,
            beta_biwalk: 0.2,
            lambda_biwalk: 2.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let d = bx(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), 10.0, 10.0);
            let c = bx(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), 10.0, 10.0);
            let s: f64 = rng.random();
            let w = fused_cost(&DMatrix::from_element(1, 1, s), &[d], &[c], &p).unwrap()[(0, 0)];
            let d_iou = 1.0 - iou(&d, &c);
            assert!((0.0..=1.0).contains(&w));
            if d_iou >= 0.5 || 1.0 - s >= 0.2 {
                assert_eq!(w, (2.0f64).min(d_iou));
            }
        }
    }
}
