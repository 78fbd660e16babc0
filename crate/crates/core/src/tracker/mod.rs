//! Online association of detections into tracks.
//!
//! Two schemes share one [`TrackerState`]: a two-stage motion plus
//! appearance scheme ([`associate_walker`]) and an appearance-only scheme
//! with backdrops ([`associate_qd_walker`]).

pub mod hungarian;
pub mod interpolate;
pub mod kalman;
pub mod similarity;

use nalgebra::DMatrix;

pub use hungarian::{hungarian, Assignment};
pub use interpolate::{interpolate_tracks, TrackHistory};
pub use kalman::{KalmanFilter, KalmanState};
pub use similarity::{appearance_similarity, fused_cost, iou_distance, FusionParams, Metric};

use crate::error::{Error, Result};
use crate::geometry::{iou, partition_indices_by_confidence, BBox, Detection};
use crate::toag::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Walker,
    QdWalker,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walker" => Ok(Mode::Walker),
            "qd_walker" => Ok(Mode::QdWalker),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Walker => "walker",
            Mode::QdWalker => "qd_walker",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub beta_high: f64,
    pub beta_low: f64,
    pub beta_new: f64,
    pub beta_match_high: f64,
    pub beta_match_low: f64,
    pub beta_biwalk: f64,
    pub beta_iou: f64,
    pub lambda_biwalk: f64,
    pub beta_cycle_inf: f64,
    pub tau_inf: f64,
    pub max_inactive_k: usize,
    pub ema_momentum: f64,
    pub backdrop_frames: usize,
    pub metric: Metric,
    pub mode: Mode,
    pub interpolate: bool,
    pub interp_max_gap: usize,
    /// Appearance-only mode: minimum score for a track match.
    pub qd_beta_match: f64,
    /// Appearance-only mode: minimum detection confidence for a track match.
    pub qd_beta_obj: f64,
    /// Appearance-only mode: detections below this confidence are discarded.
    pub det_conf_thr: f64,
    /// Appearance-only mode: IoU above which a weaker detection is suppressed.
    pub det_nms_iou: f64,
    pub kalman: KalmanFilter,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            beta_high: 0.6,
            beta_low: 0.1,
            beta_new: 0.8,
            beta_match_high: 0.1,
            beta_match_low: 0.5,
            beta_biwalk: 0.2,
            beta_iou: 0.5,
            lambda_biwalk: 2.0,
            beta_cycle_inf: 0.1,
            tau_inf: 0.07,
            max_inactive_k: 20,
            ema_momentum: 0.8,
            backdrop_frames: 1,
            metric: Metric::Biwalk,
            mode: Mode::Walker,
            interpolate: false,
            interp_max_gap: 20,
            qd_beta_match: 0.5,
            qd_beta_obj: 0.3,
            det_conf_thr: 0.1,
            det_nms_iou: 0.6,
            kalman: KalmanFilter::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("beta_high", self.beta_high),
            ("beta_low", self.beta_low),
            ("beta_new", self.beta_new),
            ("beta_match_high", self.beta_match_high),
            ("beta_match_low", self.beta_match_low),
            ("beta_biwalk", self.beta_biwalk),
            ("beta_iou", self.beta_iou),
            ("beta_cycle_inf", self.beta_cycle_inf),
            ("ema_momentum", self.ema_momentum),
            ("qd_beta_match", self.qd_beta_match),
            ("qd_beta_obj", self.qd_beta_obj),
            ("det_conf_thr", self.det_conf_thr),
            ("det_nms_iou", self.det_nms_iou),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name}={v} outside [0, 1]")));
            }
        }
        if self.beta_low > self.beta_high {
            return Err(Error::Config("beta_low exceeds beta_high".into()));
        }
        if !(self.tau_inf > 0.0 && self.tau_inf.is_finite()) {
            return Err(Error::Config(format!("tau_inf must be positive, got {}", self.tau_inf)));
        }
        if !(self.lambda_biwalk >= 0.0 && self.lambda_biwalk.is_finite()) {
            return Err(Error::Config("lambda_biwalk must be non-negative".into()));
        }
        Ok(())
    }

    fn fusion(&self) -> FusionParams {
        FusionParams {
            beta_iou: self.beta_iou,
            beta_biwalk: self.beta_biwalk,
            lambda_biwalk: self.lambda_biwalk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Inactive,
    Removed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub track_id: u64,
    pub kalman: KalmanState,
    /// Unit-length EMA of matched detection embeddings.
    pub embedding: Vec<f64>,
    pub last_box: BBox,
    pub status: TrackStatus,
    pub frames_since_update: usize,
    pub history: Vec<(usize, BBox)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backdrop {
    pub embedding: Vec<f64>,
    pub bbox: BBox,
    pub frame: usize,
}

/// A box emitted for a track on the current frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOutput {
    pub frame: usize,
    pub track_id: u64,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub tracklets: Vec<Tracklet>,
    pub backdrops: Vec<Backdrop>,
    pub next_id: u64,
    pub frame_cursor: Option<usize>,
}

impl Default for TrackerState {
    fn default() -> Self {
        TrackerState {
            tracklets: Vec::new(),
            backdrops: Vec::new(),
            next_id: 1,
            frame_cursor: None,
        }
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

impl TrackerState {
    pub fn new() -> Self {
        TrackerState::default()
    }

    /// Runs the association scheme selected by `cfg.mode` on one frame.
    pub fn step(
        &mut self,
        frame: usize,
        detections: &[Detection],
        embeddings: &EmbeddingMatrix,
        cfg: &TrackerConfig,
    ) -> Result<Vec<TrackOutput>> {
        match cfg.mode {
            Mode::Walker => associate_walker(self, frame, detections, embeddings, cfg),
            Mode::QdWalker => associate_qd_walker(self, frame, detections, embeddings, cfg),
        }
    }

    /// Every track's history, including removed tracks, ordered by id.
    pub fn histories(&self) -> Vec<TrackHistory> {
        let mut out: Vec<TrackHistory> = self
            .tracklets
            .iter()
            .map(|t| TrackHistory {
                track_id: t.track_id,
                boxes: t.history.clone(),
            })
            .collect();
        out.sort_by_key(|h| h.track_id);
        out
    }

    fn begin_frame(&mut self, frame: usize, detections: &[Detection], embeddings: &EmbeddingMatrix) -> Result<()> {
        if let Some(cursor) = self.frame_cursor {
            if frame <= cursor {
                return Err(Error::FrameOutOfOrder {
                    cursor: cursor as i64,
                    frame: frame as i64,
                });
            }
        }
        if let Some(d) = detections.iter().find(|d| d.frame != frame) {
            return Err(Error::FrameOutOfOrder {
                cursor: frame as i64,
                frame: d.frame as i64,
            });
        }
        if embeddings.rows() != detections.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} embeddings for {} detections",
                embeddings.rows(),
                detections.len()
            )));
        }
        if let Some(t) = self.tracklets.iter().find(|t| t.status != TrackStatus::Removed) {
            if t.embedding.len() != embeddings.dim() && !detections.is_empty() {
                return Err(Error::DimensionMismatch {
                    expected: t.embedding.len(),
                    actual: embeddings.dim(),
                });
            }
        }
        self.frame_cursor = Some(frame);
        Ok(())
    }

    fn live(&self) -> Vec<usize> {
        (0..self.tracklets.len())
            .filter(|&i| self.tracklets[i].status != TrackStatus::Removed)
            .collect()
    }

    fn spawn(&mut self, frame: usize, det: &Detection, embedding: Vec<f64>, cfg: &TrackerConfig) -> TrackOutput {
        let id = self.next_id;
        self.next_id += 1;
        self.tracklets.push(Tracklet {
            track_id: id,
            kalman: cfg.kalman.initiate(&det.bbox),
            embedding: normalized(&embedding),
            last_box: det.bbox,
            status: TrackStatus::Active,
            frames_since_update: 0,
            history: vec![(frame, det.bbox)],
        });
        TrackOutput {
            frame,
            track_id: id,
            bbox: det.bbox,
            confidence: det.confidence,
        }
    }

    fn absorb(&mut self, t: usize, frame: usize, det: &Detection, embedding: &[f64], cfg: &TrackerConfig) -> Result<TrackOutput> {
        let track = &mut self.tracklets[t];
        track.kalman = cfg.kalman.update(&track.kalman, &det.bbox)?;
        let new = normalized(embedding);
        let m = cfg.ema_momentum;
        let mixed: Vec<f64> = track.embedding.iter().zip(&new).map(|(a, b)| m * a + (1.0 - m) * b).collect();
        track.embedding = normalized(&mixed);
        track.last_box = det.bbox;
        track.status = TrackStatus::Active;
        track.frames_since_update = 0;
        track.history.push((frame, det.bbox));
        Ok(TrackOutput {
            frame,
            track_id: track.track_id,
            bbox: det.bbox,
            confidence: det.confidence,
        })
    }

    fn age(&mut self, t: usize, cfg: &TrackerConfig) {
        let track = &mut self.tracklets[t];
        track.frames_since_update += 1;
        track.status = if track.frames_since_update > cfg.max_inactive_k {
            TrackStatus::Removed
        } else {
            TrackStatus::Inactive
        };
    }

    fn candidate_embeddings(&self, cands: &[usize], dim: usize) -> Result<EmbeddingMatrix> {
        let rows: Vec<Vec<f64>> = cands.iter().map(|&t| self.tracklets[t].embedding.clone()).collect();
        EmbeddingMatrix::from_rows(&rows, dim)
    }
}

fn rows_of(e: &EmbeddingMatrix, idx: &[usize]) -> EmbeddingMatrix {
    e.select_rows(idx)
}

/// Two-stage association: high-confidence detections against every live
/// track under the fused cost, then low-confidence detections against the
/// remaining tracks by IoU. Unmatched high-confidence detections start tracks.
pub fn associate_walker(
    state: &mut TrackerState,
    frame: usize,
    detections: &[Detection],
    embeddings: &EmbeddingMatrix,
    cfg: &TrackerConfig,
) -> Result<Vec<TrackOutput>> {
    state.begin_frame(frame, detections, embeddings)?;
    let (high, low, _) = partition_indices_by_confidence(detections, cfg.beta_high, cfg.beta_low)?;
    let cands = state.live();
    for &t in &cands {
        let tr = &mut state.tracklets[t];
        tr.kalman = cfg.kalman.predict(&tr.kalman);
    }
    let predicted: Vec<BBox> = cands.iter().map(|&t| state.tracklets[t].kalman.bbox()).collect();
    let dim = embeddings.dim();

    let mut matches: Vec<(usize, usize)> = Vec::new();
    let mut cand_taken = vec![false; cands.len()];
    let mut high_left: Vec<usize> = high.clone();
    if !high.is_empty() && !cands.is_empty() {
        let high_boxes: Vec<BBox> = high.iter().map(|&i| detections[i].bbox).collect();
        let sim = appearance_similarity(
            &rows_of(embeddings, &high),
            &state.candidate_embeddings(&cands, dim)?,
            cfg.metric,
            cfg.tau_inf,
            cfg.beta_cycle_inf,
        )?;
        let cost = fused_cost(&sim, &high_boxes, &predicted, &cfg.fusion())?;
        let a = hungarian(&cost)?;
        for (r, c) in a.matches {
            if 1.0 - cost[(r, c)] >= cfg.beta_match_high {
                matches.push((high[r], c));
                cand_taken[c] = true;
            }
        }
        high_left.retain(|i| !matches.iter().any(|m| m.0 == *i));
    }

    let remaining: Vec<usize> = (0..cands.len()).filter(|&c| !cand_taken[c]).collect();
    if !low.is_empty() && !remaining.is_empty() {
        let low_boxes: Vec<BBox> = low.iter().map(|&i| detections[i].bbox).collect();
        let rem_boxes: Vec<BBox> = remaining.iter().map(|&c| predicted[c]).collect();
        let cost = iou_distance(&low_boxes, &rem_boxes);
        let a = hungarian(&cost)?;
        for (r, c) in a.matches {
            if cost[(r, c)] <= cfg.beta_match_low {
                matches.push((low[r], remaining[c]));
                cand_taken[remaining[c]] = true;
            }
        }
    }

    let mut out = Vec::new();
    for &(d, c) in &matches {
        out.push(state.absorb(cands[c], frame, &detections[d], &embeddings.row(d), cfg)?);
    }
    for (c, &t) in cands.iter().enumerate() {
        if !cand_taken[c] {
            state.age(t, cfg);
        }
    }
    for &d in &high_left {
        out.push(state.spawn(frame, &detections[d], embeddings.row(d), cfg));
    }
    out.sort_by_key(|o| o.track_id);
    Ok(out)
}

/// Greedy non-maximum suppression. Returns kept indices by descending
/// confidence (ties by index), dropping detections below `conf_thr`.
pub fn nms(detections: &[Detection], conf_thr: f64, iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).filter(|&i| detections[i].confidence >= conf_thr).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&detections[k].bbox, &detections[i].bbox) <= iou_thr) {
            keep.push(i);
        }
    }
    keep
}

/// Appearance-only association. Detections are visited by descending
/// confidence; each takes its best-scoring candidate among live tracks and
/// recent backdrops. A detection whose best candidate is a backdrop never
/// updates a track; it starts one only above `beta_new` and otherwise
/// becomes a backdrop itself.
pub fn associate_qd_walker(
    state: &mut TrackerState,
    frame: usize,
    detections: &[Detection],
    embeddings: &EmbeddingMatrix,
    cfg: &TrackerConfig,
) -> Result<Vec<TrackOutput>> {
    state.begin_frame(frame, detections, embeddings)?;
    let dim = embeddings.dim();
    let kept = nms(detections, cfg.det_conf_thr, cfg.det_nms_iou);
    state.backdrops.retain(|b| frame - b.frame <= cfg.backdrop_frames);

    let tracks = state.live();
    for &t in &tracks {
        let tr = &mut state.tracklets[t];
        tr.kalman = cfg.kalman.predict(&tr.kalman);
    }
    let mut cand_rows: Vec<Vec<f64>> = tracks.iter().map(|&t| state.tracklets[t].embedding.clone()).collect();
    cand_rows.extend(state.backdrops.iter().map(|b| b.embedding.clone()));
    let cand = EmbeddingMatrix::from_rows(&cand_rows, dim)?;
    let mut scores: DMatrix<f64> =
        appearance_similarity(&rows_of(embeddings, &kept), &cand, cfg.metric, cfg.tau_inf, cfg.beta_cycle_inf)?;

    let mut out = Vec::new();
    let mut updated = vec![false; tracks.len()];
    let mut new_backdrops = Vec::new();
    for (r, &d) in kept.iter().enumerate() {
        let det = &detections[d];
        let best = (0..scores.ncols()).fold(None, |acc: Option<(usize, f64)>, j| match acc {
            Some((_, v)) if scores[(r, j)] <= v => acc,
            _ => Some((j, scores[(r, j)])),
        });
        let matched = best.filter(|&(_, c)| c > cfg.qd_beta_match);
        match matched {
            Some((j, _)) if j < tracks.len() && det.confidence > cfg.qd_beta_obj => {
                out.push(state.absorb(tracks[j], frame, det, &embeddings.row(d), cfg)?);
                updated[j] = true;
                for k in 0..scores.nrows() {
                    if k != r {
                        scores[(k, j)] = 0.0;
                    }
                }
            }
            _ if det.confidence > cfg.beta_new => {
                out.push(state.spawn(frame, det, embeddings.row(d), cfg));
            }
            _ => new_backdrops.push(Backdrop {
                embedding: embeddings.row(d),
                bbox: det.bbox,
                frame,
            }),
        }
    }
    for (k, &t) in tracks.iter().enumerate() {
        if !updated[k] {
            state.age(t, cfg);
        }
    }
    state.backdrops.extend(new_backdrops);
    out.sort_by_key(|o| o.track_id);
    Ok(out)
}
