//! CLEAR-MOT and identity metrics.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::tracker::hungarian;

/// A labelled box: ground truth or tracker output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub frame: usize,
    pub id: u64,
    pub bbox: BBox,
}

/// Raw counts; ratios are derived so reports can be summed across sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalReport {
    pub gt_boxes: usize,
    pub pred_boxes: usize,
    pub matches: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub idtp: usize,
    pub gt_ids: usize,
    pub pred_ids: usize,
}

impl EvalReport {
    pub fn mota(&self) -> f64 {
        if self.gt_boxes == 0 {
            return f64::NAN;
        }
        1.0 - (self.false_negatives + self.false_positives + self.id_switches) as f64 / self.gt_boxes as f64
    }

    pub fn idf1(&self) -> f64 {
        let denom = self.gt_boxes + self.pred_boxes;
        if denom == 0 {
            return f64::NAN;
        }
        2.0 * self.idtp as f64 / denom as f64
    }

    pub fn precision(&self) -> f64 {
        self.matches as f64 / self.pred_boxes.max(1) as f64
    }

    pub fn recall(&self) -> f64 {
        self.matches as f64 / self.gt_boxes.max(1) as f64
    }

    pub fn combine(reports: &[EvalReport]) -> EvalReport {
        reports.iter().fold(EvalReport::default(), |a, r| EvalReport {
            gt_boxes: a.gt_boxes + r.gt_boxes,
            pred_boxes: a.pred_boxes + r.pred_boxes,
            matches: a.matches + r.matches,
            false_positives: a.false_positives + r.false_positives,
            false_negatives: a.false_negatives + r.false_negatives,
            id_switches: a.id_switches + r.id_switches,
            idtp: a.idtp + r.idtp,
            gt_ids: a.gt_ids + r.gt_ids,
            pred_ids: a.pred_ids + r.pred_ids,
        })
    }
}

/// Identity pairs `(gt id, pred id)` matched in one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMatches {
    pub frame: usize,
    pub pairs: Vec<(u64, u64)>,
}

fn by_frame(items: &[Annotation], what: &str) -> Result<BTreeMap<usize, Vec<Annotation>>> {
    let mut out: BTreeMap<usize, Vec<Annotation>> = BTreeMap::new();
    for a in items {
        a.bbox.validate()?;
        let frame = out.entry(a.frame).or_default();
        if frame.iter().any(|b| b.id == a.id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate {what} id {} in frame {}",
                a.id, a.frame
            )));
        }
        frame.push(*a);
    }
    Ok(out)
}

/// Scores `pred` against `gt`. A pair counts as a match when IoU reaches
/// `iou_thr`. Per frame, correspondences from the previous frame are kept
/// when still valid, the rest are assigned by minimum total `1 - IoU`.
pub fn evaluate(gt: &[Annotation], pred: &[Annotation], iou_thr: f64) -> Result<EvalReport> {
    evaluate_detailed(gt, pred, iou_thr).map(|(r, _)| r)
}

/// [`evaluate`] plus the per-frame match table.
pub fn evaluate_detailed(
    gt: &[Annotation],
    pred: &[Annotation],
    iou_thr: f64,
) -> Result<(EvalReport, Vec<FrameMatches>)> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::InvalidArgument(format!("iou threshold {iou_thr} outside (0, 1]")));
    }
    let gt_frames = by_frame(gt, "ground-truth")?;
    let pred_frames = by_frame(pred, "predicted")?;
    let frames: BTreeSet<usize> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();

    let mut report = EvalReport {
        gt_boxes: gt.len(),
        pred_boxes: pred.len(),
        ..EvalReport::default()
    };
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let mut table = Vec::new();
    let empty = Vec::new();
    for f in frames {
        let g = gt_frames.get(&f).unwrap_or(&empty);
        let p = pred_frames.get(&f).unwrap_or(&empty);
        let ious = DMatrix::from_fn(g.len(), p.len(), |i, j| iou(&g[i].bbox, &p[j].bbox));
        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        let mut pairs = Vec::new();
        for (i, ga) in g.iter().enumerate() {
            if let Some(&pid) = last.get(&ga.id) {
                if let Some(j) = p.iter().position(|pa| pa.id == pid) {
                    if !p_used[j] && ious[(i, j)] >= iou_thr {
                        g_used[i] = true;
                        p_used[j] = true;
                        pairs.push((i, j));
                    }
                }
            }
        }
        let gi: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let pj: Vec<usize> = (0..p.len()).filter(|&j| !p_used[j]).collect();
        if !gi.is_empty() && !pj.is_empty() {
            let cost = DMatrix::from_fn(gi.len(), pj.len(), |a, b| {
                let v = ious[(gi[a], pj[b])];
                if v >= iou_thr {
                    1.0 - v
                } else {
                    2.0
                }
            });
            for (a, b) in hungarian(&cost)?.matches {
                if ious[(gi[a], pj[b])] >= iou_thr {
                    let (i, j) = (gi[a], pj[b]);
                    if last.get(&g[i].id).is_some_and(|&prev| prev != p[j].id) {
                        report.id_switches += 1;
                    }
                    g_used[i] = true;
                    p_used[j] = true;
                    pairs.push((i, j));
                }
            }
        }
        for &(i, j) in &pairs {
            last.insert(g[i].id, p[j].id);
        }
        let mut ids: Vec<(u64, u64)> = pairs.iter().map(|&(i, j)| (g[i].id, p[j].id)).collect();
        ids.sort_unstable();
        table.push(FrameMatches { frame: f, pairs: ids });
        report.matches += pairs.len();
        report.false_negatives += g_used.iter().filter(|u| !**u).count();
        report.false_positives += p_used.iter().filter(|u| !**u).count();
    }

    let (overlap, gt_ids, pred_ids) = identity_overlap(&gt_frames, &pred_frames, iou_thr);
    report.gt_ids = gt_ids.len();
    report.pred_ids = pred_ids.len();
    if !gt_ids.is_empty() && !pred_ids.is_empty() {
        let max = overlap.max();
        let cost = overlap.map(|v| (max - v) as f64);
        report.idtp = hungarian(&cost)?.matches.iter().map(|&(r, c)| overlap[(r, c)]).sum();
    }
    Ok((report, table))
}

/// Frames in which each (gt id, pred id) pair overlaps by at least `iou_thr`.
fn identity_overlap(
    gt: &BTreeMap<usize, Vec<Annotation>>,
    pred: &BTreeMap<usize, Vec<Annotation>>,
    iou_thr: f64,
) -> (DMatrix<usize>, Vec<u64>, Vec<u64>) {
    let collect = |m: &BTreeMap<usize, Vec<Annotation>>| -> Vec<u64> {
        m.values().flatten().map(|a| a.id).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let (gids, pids) = (collect(gt), collect(pred));
    let gpos: BTreeMap<u64, usize> = gids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let ppos: BTreeMap<u64, usize> = pids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut overlap = DMatrix::zeros(gids.len(), pids.len());
    for (f, g) in gt {
        if let Some(p) = pred.get(f) {
            for ga in g {
                for pa in p {
                    if iou(&ga.bbox, &pa.bbox) >= iou_thr {
                        overlap[(gpos[&ga.id], ppos[&pa.id])] += 1;
                    }
                }
            }
        }
    }
    (overlap, gids, pids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ann(frame: usize, id: u64, cx: f64) -> Annotation {
        Annotation {
            frame,
            id,
            bbox: BBox::from_center(cx, 100.0, 20.0, 40.0).unwrap(),
        }
    }

    fn two_lanes(frames: usize) -> Vec<Annotation> {
        (1..=frames).flat_map(|f| [ann(f, 1, 100.0), ann(f, 2, 300.0)]).collect()
    }

    #[test]
    fn perfect_tracking() {
        let gt = two_lanes(10);
        let r = evaluate(&gt, &gt, 0.5).unwrap();
        assert_eq!(r.mota(), 1.0);
        assert_eq!(r.idf1(), 1.0);
        assert_eq!(r.id_switches, 0);
    }

    #[test]
    fn swap_midway() {
        let gt = two_lanes(10);
        let pred: Vec<Annotation> = gt
            .iter()
            .map(|a| Annotation {
                id: if a.frame > 5 { 3 - a.id } else { a.id },
                ..*a
            })
            .collect();
        let r = evaluate(&gt, &pred, 0.5).unwrap();
        assert_eq!(r.id_switches, 2);
        assert!((r.mota() - 0.9).abs() < 1e-12);
        assert!((r.idf1() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn misses_and_false_positives() {
        let gt = two_lanes(4);
        let mut pred: Vec<Annotation> = gt.iter().filter(|a| a.id == 1).copied().collect();
        pred.push(ann(2, 9, 600.0));
        let r = evaluate(&gt, &pred, 0.5).unwrap();
        assert_eq!((r.false_negatives, r.false_positives, r.id_switches), (4, 1, 0));
        assert!((r.mota() - (1.0 - 5.0 / 8.0)).abs() < 1e-12);
        assert!((r.idf1() - 2.0 * 4.0 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn previous_correspondence_is_kept_over_better_iou() {
        let gt = vec![ann(1, 1, 100.0), ann(2, 1, 100.0), ann(2, 2, 1000.0)];
        let pred = vec![ann(1, 7, 100.0), ann(2, 7, 104.0), ann(2, 8, 100.0)];
        let r = evaluate(&gt, &pred, 0.5).unwrap();
        assert_eq!(r.id_switches, 0);
        assert_eq!(r.false_positives, 1);
    }

    #[test]
    fn empty_prediction() {
        let gt = two_lanes(5);
        let r = evaluate(&gt, &[], 0.5).unwrap();
        assert_eq!(r.false_negatives, 10);
        assert_eq!(r.mota(), 0.0);
        assert_eq!(r.idf1(), 0.0);
    }

    #[test]
    fn match_table_records_the_swap() {
        let gt = two_lanes(4);
        let pred: Vec<Annotation> = gt
            .iter()
            .map(|a| Annotation {
                id: if a.frame > 2 { 3 - a.id } else { a.id },
                ..*a
            })
            .collect();
        let (_, table) = evaluate_detailed(&gt, &pred, 0.5).unwrap();
        assert_eq!(table.len(), 4);
        assert_eq!(table[1].pairs, vec![(1, 1), (2, 2)]);
        assert_eq!(table[2].pairs, vec![(1, 2), (2, 1)]);
    }

    #[test]
    fn ground_truth_scores_perfectly_on_synthetic_sequences() {
        use crate::synth::{generate_sequence, GenerationParams};
        for seed in 0..20 {
            let s = generate_sequence(&GenerationParams::default(), seed).unwrap();
            let gt: Vec<Annotation> = (0..s.length)
                .flat_map(|t| s.frame_boxes(t).into_iter().map(move |(id, bbox)| Annotation { frame: t, id, bbox }))
                .collect();
            let r = evaluate(&gt, &gt, 0.5).unwrap();
            assert_eq!((r.mota(), r.idf1(), r.id_switches), (1.0, 1.0, 0), "seed {seed}");
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let gt = vec![ann(1, 1, 100.0), ann(1, 1, 300.0)];
        assert!(evaluate(&gt, &[], 0.5).is_err());
        assert!(evaluate(&[], &gt, 0.5).is_err());
    }

    /// Best identity assignment by enumerating every injective partial map.
    fn brute_idtp(overlap: &DMatrix<usize>) -> usize {
        fn go(r: usize, used: &mut Vec<bool>, m: &DMatrix<usize>) -> usize {
            if r == m.nrows() {
                return 0;
            }
            let mut best = go(r + 1, used, m);
            for c in 0..m.ncols() {
                if !used[c] {
                    used[c] = true;
                    best = best.max(m[(r, c)] + go(r + 1, used, m));
                    used[c] = false;
                }
            }
            best
        }
        go(0, &mut vec![false; overlap.ncols()], overlap)
    }

    fn arb_tracks() -> impl Strategy<Value = (Vec<Annotation>, Vec<Annotation>)> {
        let lanes = [100.0, 200.0, 300.0, 400.0];
        (
            prop::collection::vec((1usize..8, 0usize..4), 1..20),
            prop::collection::vec((1usize..8, 0usize..4, 0u64..5), 0..20),
        )
            .prop_map(move |(g, p)| {
                let mut gt: Vec<Annotation> = g.into_iter().map(|(f, l)| ann(f, l as u64 + 1, lanes[l])).collect();
                gt.sort_by_key(|a| (a.frame, a.id));
                gt.dedup_by_key(|a| (a.frame, a.id));
                let mut pred: Vec<Annotation> =
                    p.into_iter().map(|(f, l, id)| ann(f, id + 10, lanes[l] + 2.0)).collect();
                pred.sort_by_key(|a| (a.frame, a.id));
                pred.dedup_by_key(|a| (a.frame, a.id));
                (gt, pred)
            })
    }

    proptest! {
        #[test]
        fn idtp_matches_brute_force((gt, pred) in arb_tracks()) {
            let r = evaluate(&gt, &pred, 0.5).unwrap();
            let g = by_frame(&gt, "g").unwrap();
            let p = by_frame(&pred, "p").unwrap();
            let (overlap, _, _) = identity_overlap(&g, &p, 0.5);
            prop_assert_eq!(r.idtp, brute_idtp(&overlap));
            prop_assert_eq!(r.matches + r.false_negatives, r.gt_boxes);
            prop_assert_eq!(r.matches + r.false_positives, r.pred_boxes);
            prop_assert!(r.idtp <= r.gt_boxes.min(r.pred_boxes));
        }

        #[test]
        fn false_positives_never_raise_mota(frames in 2usize..12, extra in proptest::collection::vec((0usize..12, 0.0f64..800.0), 0..15)) {
            let gt = two_lanes(frames);
            let mut pred = gt.clone();
            let base = evaluate(&gt, &pred, 0.5).unwrap().mota();
            for (k, (f, cx)) in extra.into_iter().enumerate() {
                pred.push(ann(1 + f % frames, 100 + k as u64, cx));
                let m = evaluate(&gt, &pred, 0.5).unwrap().mota();
                prop_assert!(m <= base + 1e-12);
            }
        }

        #[test]
        fn midpoint_swaps_cost_two_switches_each(frames in 2usize..10, swaps in 1usize..4) {
            let gt = two_lanes(frames * (swaps + 1));
            let pred: Vec<Annotation> = gt
                .iter()
                .map(|a| {
                    let flipped = ((a.frame - 1) / frames) % 2 == 1;
                    Annotation { id: if flipped { 3 - a.id } else { a.id }, ..*a }
                })
                .collect();
            prop_assert_eq!(evaluate(&gt, &pred, 0.5).unwrap().id_switches, 2 * swaps);
        }

        #[test]
        fn relabelling_predictions_changes_nothing((gt, pred) in arb_tracks(), shift in 1u64..1000) {
            let relabelled: Vec<Annotation> = pred.iter().map(|a| Annotation { id: a.id * 7 + shift, ..*a }).collect();
            prop_assert_eq!(evaluate(&gt, &pred, 0.5).unwrap(), evaluate(&gt, &relabelled, 0.5).unwrap());
        }
    }
}
