//! Sequence-level glue: synthetic datasets, training, tracking and scoring.

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::metrics::{evaluate, Annotation, EvalReport};
use crate::synth::{generate_sequence, simulate_detections, AppearanceRegime, GenerationParams, NoiseConfig};
use crate::toag::EmbeddingMatrix;
use crate::tracker::{interpolate_tracks, TrackHistory, TrackerConfig, TrackerState};
use crate::trainer::{embed, feature_matrix, train, EmbedderModel, TrainConfig, TrainingFrame, TrainingSequence};

/// One sequence as stored on disk: 0-based frames, detections with their
/// features, and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub name: String,
    pub length: usize,
    pub feature_dim: usize,
    pub annotation_stride: usize,
    pub detections: Vec<Vec<Detection>>,
    pub features: Vec<Vec<Vec<f64>>>,
    pub gt: Vec<Annotation>,
}

impl SequenceData {
    pub fn validate(&self) -> Result<()> {
        if self.detections.len() != self.length || self.features.len() != self.length {
            return Err(Error::ShapeMismatch(format!(
                "sequence '{}' has {} detection and {} feature frames for length {}",
                self.name,
                self.detections.len(),
                self.features.len(),
                self.length
            )));
        }
        for (t, (d, f)) in self.detections.iter().zip(&self.features).enumerate() {
            if d.len() != f.len() {
                return Err(Error::ShapeMismatch(format!(
                    "frame {t}: {} detections, {} feature rows",
                    d.len(),
                    f.len()
                )));
            }
            if let Some(row) = f.iter().find(|r| r.len() != self.feature_dim) {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    actual: row.len(),
                });
            }
        }
        if self.annotation_stride == 0 {
            return Err(Error::InvalidArgument("annotation stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Identity-free training view; ground-truth boxes are kept only on
    /// frames `0, stride, 2 * stride, ...`.
    pub fn to_training(&self) -> Result<TrainingSequence> {
        self.validate()?;
        let mut boxes: Vec<Vec<BBox>> = vec![Vec::new(); self.length];
        for a in &self.gt {
            if a.frame < self.length {
                boxes[a.frame].push(a.bbox);
            }
        }
        let frames = (0..self.length)
            .map(|t| TrainingFrame {
                detections: self.detections[t].clone(),
                features: self.features[t].clone(),
                gt_boxes: (t % self.annotation_stride == 0).then(|| boxes[t].clone()),
            })
            .collect();
        Ok(TrainingSequence {
            frames,
            annotation_stride: self.annotation_stride,
        })
    }
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub generation: GenerationParams,
    pub noise: NoiseConfig,
    pub sequences: usize,
    pub seed: u64,
    pub annotation_stride: usize,
}

/// Seed of sequence `index` in a dataset seeded with `seed`.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SequenceData>> {
    (0..spec.sequences)
        .map(|i| {
            let s = sequence_seed(spec.seed, i);
            let seq = generate_sequence(&spec.generation, s)?;
            let frames = simulate_detections(&seq, &spec.noise, s.wrapping_add(1))?;
            let gt = (0..seq.length)
                .flat_map(|t| {
                    seq.frame_boxes(t).into_iter().map(move |(id, bbox)| Annotation { frame: t, id, bbox })
                })
                .collect();
            Ok(SequenceData {
                name: format!("seq{i:03}"),
                length: seq.length,
                feature_dim: crate::synth::FEATURE_DIM,
                annotation_stride: spec.annotation_stride,
                detections: frames.iter().map(|f| f.detections.clone()).collect(),
                features: frames.iter().map(|f| f.features.clone()).collect(),
                gt,
            })
        })
        .collect()
}

pub fn train_on(sequences: &[SequenceData], cfg: &TrainConfig) -> Result<(EmbedderModel, Vec<f64>)> {
    let data = sequences.iter().map(|s| s.to_training()).collect::<Result<Vec<_>>>()?;
    train(&data, cfg)
}

/// Runs the tracker over a sequence and returns its (optionally
/// interpolated) tracks as 0-based annotations.
pub fn track_sequence(seq: &SequenceData, model: &EmbedderModel, cfg: &TrackerConfig) -> Result<Vec<Annotation>> {
    seq.validate()?;
    cfg.validate()?;
    let mut state = TrackerState::new();
    for t in 0..seq.length {
        let emb = if seq.detections[t].is_empty() {
            EmbeddingMatrix::empty(model.bias.len())?
        } else {
            embed(&feature_matrix(&seq.features[t], seq.feature_dim)?, model)?
        };
        state.step(t, &seq.detections[t], &emb, cfg)?;
    }
    let mut tracks: Vec<TrackHistory> = state.histories();
    if cfg.interpolate {
        tracks = interpolate_tracks(&tracks, cfg.interp_max_gap);
    }
    let mut out: Vec<Annotation> = tracks
        .iter()
        .flat_map(|h| h.boxes.iter().map(move |&(frame, bbox)| Annotation { frame, id: h.track_id, bbox }))
        .collect();
    out.sort_by_key(|a| (a.frame, a.id));
    Ok(out)
}

/// Tracks and scores every sequence; the combined report sums counts.
pub fn evaluate_on(sequences: &[SequenceData], model: &EmbedderModel, cfg: &TrackerConfig) -> Result<EvalReport> {
    let reports = sequences
        .iter()
        .map(|s| evaluate(&s.gt, &track_sequence(s, model, cfg)?, 0.5))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::combine(&reports))
}

/// Train/test protocol on synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub generation: GenerationParams,
    pub noise: NoiseConfig,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub annotation_stride: usize,
}

impl Scenario {
    /// Six objects, each in two constructed crossings, with mild occlusion.
    pub fn benchmark(appearance: AppearanceRegime) -> Self {
        Scenario {
            generation: GenerationParams {
                crossings: 6,
                dwell_range: (2, 6),
                appearance,
                ..GenerationParams::default()
            },
            noise: NoiseConfig {
                fn_rate: 0.02,
                occlusion_conf_decay: 0.9,
                ..NoiseConfig::default()
            },
            train_sequences: 30,
            test_sequences: 10,
            annotation_stride: 10,
        }
    }

    /// Training and held-out datasets for one seed. The two never share a
    /// sequence seed.
    pub fn datasets(&self, seed: u64) -> Result<(Vec<SequenceData>, Vec<SequenceData>)> {
        let train = SynthSpec {
            generation: self.generation.clone(),
            noise: self.noise.clone(),
            sequences: self.train_sequences,
            seed: sequence_seed(seed, usize::MAX),
            annotation_stride: self.annotation_stride,
        };
        let test = SynthSpec {
            seed: sequence_seed(seed, usize::MAX - 1),
            sequences: self.test_sequences,
            annotation_stride: 1,
            ..train.clone()
        };
        Ok((synth_dataset(&train)?, synth_dataset(&test)?))
    }
}

/// Held-out scores of a trained model and of the same tracker with an
/// untrained embedder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentOutcome {
    pub trained: EvalReport,
    pub untrained: EvalReport,
}

/// Trains on the scenario's training split for `seed` and tracks the
/// held-out split. `train_cfg.seed` is replaced by `seed`.
pub fn run_experiment(
    scenario: &Scenario,
    seed: u64,
    train_cfg: &TrainConfig,
    tracker_cfg: &TrackerConfig,
) -> Result<ExperimentOutcome> {
    let (train_set, test_set) = scenario.datasets(seed)?;
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let (model, _) = train_on(&train_set, &cfg)?;
    let untrained = EmbedderModel::random(model.weights.nrows(), model.weights.ncols(), seed)?;
    Ok(ExperimentOutcome {
        trained: evaluate_on(&test_set, &model, tracker_cfg)?,
        untrained: evaluate_on(&test_set, &untrained, tracker_cfg)?,
    })
}
