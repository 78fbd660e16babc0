//! Procedural ground-truth sequences and a detector simulator.
//!
//! Objects are abstract: a box per alive frame plus appearance parameters
//! from which per-detection feature vectors are drawn. Crossing encounters
//! are constructed explicitly so that occlusions happen where requested.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};

/// Length of the per-detection feature vector.
pub const FEATURE_DIM: usize = 12;

/// IoU above which the lower-identity object occludes the other.
pub const OCCLUSION_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObject {
    pub identity: u64,
    /// First alive frame (inclusive).
    pub birth: usize,
    /// Last alive frame (inclusive).
    pub death: usize,
    /// One box per alive frame, `boxes[t - birth]`.
    pub boxes: Vec<BBox>,
    pub color_mean: [f64; 3],
    pub color_var: [f64; 3],
    pub pattern_seed: u64,
    /// Texture signature derived from `pattern_seed` for the appearance regime.
    pub texture: [f64; 3],
}

impl SyntheticObject {
    pub fn is_alive(&self, frame: usize) -> bool {
        frame >= self.birth && frame <= self.death
    }

    pub fn box_at(&self, frame: usize) -> Option<BBox> {
        self.is_alive(frame).then(|| self.boxes[frame - self.birth])
    }
}

/// A scheduled encounter: `mover` joins `host` at `frame` and stays glued
/// to it for `dwell` further frames. Both are object identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crossing {
    pub host: u64,
    pub mover: u64,
    pub frame: usize,
    pub dwell: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub length: usize,
    pub canvas: (f64, f64),
    pub objects: Vec<SyntheticObject>,
    pub fps_label: f64,
    pub seed: u64,
    pub crossings: Vec<Crossing>,
}

impl SyntheticSequence {
    /// Ground-truth `(identity, box)` pairs on a frame.
    pub fn frame_boxes(&self, frame: usize) -> Vec<(u64, BBox)> {
        self.objects
            .iter()
            .filter_map(|o| o.box_at(frame).map(|b| (o.identity, b)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppearanceRegime {
    /// Colors and textures spread over the whole unit cube.
    Distinct,
    /// All appearances drawn from a small ball around a shared center.
    Uniform,
}

impl std::str::FromStr for AppearanceRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distinct" => Ok(AppearanceRegime::Distinct),
            "uniform" => Ok(AppearanceRegime::Uniform),
            other => Err(Error::Config(format!("unknown appearance regime '{other}'"))),
        }
    }
}

impl std::fmt::Display for AppearanceRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AppearanceRegime::Distinct => "distinct",
            AppearanceRegime::Uniform => "uniform",
        })
    }
}

/// Parameters for [`generate_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub length: usize,
    pub canvas: (f64, f64),
    pub n_objects: usize,
    /// Box width range in pixels.
    pub width_range: (f64, f64),
    /// Height / width range.
    pub aspect_range: (f64, f64),
    /// Speed range in pixels per frame.
    pub speed_range: (f64, f64),
    /// Per-frame probability of a random heading change.
    pub turn_prob: f64,
    /// Amplitude in pixels of the sinusoidal wobble added to each box.
    pub jitter_amplitude: f64,
    /// Number of constructed crossing encounters.
    pub crossings: usize,
    /// Explicit frames for the first crossings; the rest are drawn at random.
    pub crossing_frames: Vec<usize>,
    /// Frames a crossing partner travels glued to the other object.
    pub dwell_range: (usize, usize),
    /// Probability that an object not involved in a crossing enters late or leaves early.
    pub partial_lifespan_prob: f64,
    pub appearance: AppearanceRegime,
    /// Radius of the appearance ball in the uniform regime.
    pub uniform_spread: f64,
    /// Allowed overhang of boxes beyond the canvas, in pixels.
    pub margin: f64,
    pub fps_label: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            length: 40,
            canvas: (512.0, 512.0),
            n_objects: 6,
            width_range: (30.0, 50.0),
            aspect_range: (1.6, 2.4),
            speed_range: (2.0, 6.0),
            turn_prob: 0.05,
            jitter_amplitude: 1.5,
            crossings: 2,
            crossing_frames: Vec::new(),
            dwell_range: (0, 6),
            partial_lifespan_prob: 0.0,
            appearance: AppearanceRegime::Distinct,
            uniform_spread: 0.08,
            margin: 8.0,
            fps_label: 20.0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::InvalidArgument("sequence length must be >= 2".into()));
        }
        if self.n_objects == 0 {
            return Err(Error::InvalidArgument("at least one object required".into()));
        }
        let (w_min, w_max) = self.width_range;
        let (a_min, a_max) = self.aspect_range;
        if !(w_min > 0.0 && w_min <= w_max && a_min > 0.0 && a_min <= a_max) {
            return Err(Error::InvalidArgument("invalid size ranges".into()));
        }
        if self.speed_range.0 < 0.0 || self.speed_range.0 > self.speed_range.1 {
            return Err(Error::InvalidArgument("invalid speed range".into()));
        }
        if self.dwell_range.0 > self.dwell_range.1 {
            return Err(Error::InvalidArgument("invalid dwell range".into()));
        }
        let (cw, ch) = self.canvas;
        let w_max_box = w_max;
        let h_max_box = w_max * a_max;
        if w_max_box >= cw - 2.0 || h_max_box >= ch - 2.0 {
            return Err(Error::InvalidArgument("boxes do not fit the canvas".into()));
        }
        let min_area = w_min * w_min * a_min;
        if self.n_objects as f64 * min_area > 0.5 * cw * ch {
            return Err(Error::InvalidArgument(format!(
                "{} objects of at least {min_area:.0} px^2 cannot share a {cw}x{ch} canvas",
                self.n_objects
            )));
        }
        if self.crossings > 0 && self.n_objects < 2 {
            return Err(Error::InvalidArgument("crossings need at least two objects".into()));
        }
        if let Some(&f) = self.crossing_frames.iter().find(|&&f| f >= self.length) {
            return Err(Error::InvalidArgument(format!("crossing frame {f} beyond sequence end")));
        }
        Ok(())
    }
}

struct PathState {
    center: (f64, f64),
    velocity: (f64, f64),
}

/// Keeps a center inside the canvas by reflecting both position and velocity.
fn reflect(state: &mut PathState, half: (f64, f64), canvas: (f64, f64)) {
    let lo = (half.0, half.1);
    let hi = (canvas.0 - half.0, canvas.1 - half.1);
    if state.center.0 < lo.0 {
        state.center.0 = 2.0 * lo.0 - state.center.0;
        state.velocity.0 = state.velocity.0.abs();
    } else if state.center.0 > hi.0 {
        state.center.0 = 2.0 * hi.0 - state.center.0;
        state.velocity.0 = -state.velocity.0.abs();
    }
    if state.center.1 < lo.1 {
        state.center.1 = 2.0 * lo.1 - state.center.1;
        state.velocity.1 = state.velocity.1.abs();
    } else if state.center.1 > hi.1 {
        state.center.1 = 2.0 * hi.1 - state.center.1;
        state.velocity.1 = -state.velocity.1.abs();
    }
    state.center.0 = state.center.0.clamp(lo.0, hi.0);
    state.center.1 = state.center.1.clamp(lo.1, hi.1);
}

fn random_velocity(rng: &mut ChaCha8Rng, speed: (f64, f64)) -> (f64, f64) {
    let s = if speed.1 > speed.0 { rng.random_range(speed.0..=speed.1) } else { speed.0 };
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    (s * a.cos(), s * a.sin())
}

/// Walks `steps` frames from `start`, returning the visited centers
/// (excluding the start). `sign` = -1 walks backwards in time.
fn walk(
    rng: &mut ChaCha8Rng,
    start: PathState,
    steps: usize,
    sign: f64,
    params: &GenerationParams,
    half: (f64, f64),
) -> Vec<(f64, f64)> {
    let mut s = start;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        if rng.random::<f64>() < params.turn_prob {
            let speed = (s.velocity.0.hypot(s.velocity.1)).max(params.speed_range.0);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            s.velocity = (speed * a.cos(), speed * a.sin());
        }
        s.center.0 += sign * s.velocity.0;
        s.center.1 += sign * s.velocity.1;
        // Reflection flips the stored velocity; walking backwards the
        // geometric direction is -velocity, so reflect in that frame.
        if sign < 0.0 {
            s.velocity = (-s.velocity.0, -s.velocity.1);
            reflect(&mut s, half, params.canvas);
            s.velocity = (-s.velocity.0, -s.velocity.1);
        } else {
            reflect(&mut s, half, params.canvas);
        }
        out.push(s.center);
    }
    out
}

fn texture_signature(pattern_seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed ^ 0x9e37_79b9_7f4a_7c15);
    [rng.random(), rng.random(), rng.random()]
}

fn point_in_ball(rng: &mut ChaCha8Rng, center: [f64; 3], radius: f64) -> [f64; 3] {
    loop {
        let p: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return [
                center[0] + radius * p[0],
                center[1] + radius * p[1],
                center[2] + radius * p[2],
            ];
        }
    }
}


fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Generates a sequence deterministically from `seed`.
///
/// Objects first get independent random-walk paths. Crossings are then
/// scheduled in time order: each picks the least-involved pair of free
/// objects, bends the mover's path onto the host over an approach window,
/// keeps it glued to the host for the dwell frames and sends it off on a
/// fresh heading. Sizes are drawn around a shared base so that glued boxes
/// overlap strongly.
pub fn generate_sequence(params: &GenerationParams, seed: u64) -> Result<SyntheticSequence> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.n_objects;
    let len = params.length;
    let clamp_to = |p: (f64, f64), half: (f64, f64)| {
        (
            p.0.clamp(half.0, params.canvas.0 - half.0),
            p.1.clamp(half.1, params.canvas.1 - half.1),
        )
    };

    let base_w = rng.random_range(params.width_range.0..=params.width_range.1);
    let base_aspect = rng.random_range(params.aspect_range.0..=params.aspect_range.1);
    let sizes: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let w = (base_w * rng.random_range(0.9..1.1)).clamp(params.width_range.0, params.width_range.1);
            let a = (base_aspect * rng.random_range(0.95..1.05)).clamp(params.aspect_range.0, params.aspect_range.1);
            (w, w * a)
        })
        .collect();
    let halves: Vec<(f64, f64)> = sizes.iter().map(|&(w, h)| (w / 2.0, h / 2.0)).collect();

    let mut paths: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|k| {
            let half = halves[k];
            let start = (
                rng.random_range(half.0..params.canvas.0 - half.0),
                rng.random_range(half.1..params.canvas.1 - half.1),
            );
            let v = random_velocity(&mut rng, params.speed_range);
            let mut path = vec![start];
            path.extend(walk(&mut rng, PathState { center: start, velocity: v }, len - 1, 1.0, params, half));
            path
        })
        .collect();

    let mut frames: Vec<usize> = (0..params.crossings)
        .map(|c| {
            let lo = len / 5;
            let hi = (len * 4 / 5).max(lo + 1);
            let drawn = rng.random_range(lo..hi).min(len - 1);
            params.crossing_frames.get(c).copied().unwrap_or(drawn)
        })
        .collect();
    frames.sort_unstable();

    // Frame after which each object is free to take part in a new crossing.
    let mut free_from: Vec<Option<usize>> = vec![None; n];
    let mut involvement = vec![0usize; n];
    let mut crossings: Vec<Crossing> = Vec::new();
    for t0 in frames {
        let dwell = rng.random_range(params.dwell_range.0..=params.dwell_range.1);
        let available = |k: usize| match free_from[k] {
            None => Some(t0),
            Some(f) if f < t0 => Some(t0 - f - 1),
            Some(_) => None,
        };
        let mut best: Option<((usize, f64), usize, usize, usize)> = None;
        for host in 0..n {
            if available(host).is_none() {
                continue;
            }
            for mover in 0..n {
                if mover == host {
                    continue;
                }
                let Some(window) = available(mover) else { continue };
                let (a, b) = (paths[host][t0], paths[mover][t0]);
                let dist = (a.0 - b.0).hypot(a.1 - b.1);
                // Extra speed the approach would need beyond a normal walk.
                let strain = (dist / window.max(1) as f64 - params.speed_range.1).max(0.0);
                let key = (involvement[host] + involvement[mover], strain * 1e3 + dist);
                if best.as_ref().is_none_or(|(k, ..)| key.0 < k.0 || (key.0 == k.0 && key.1 < k.1)) {
                    best = Some((key, host, mover, window));
                }
            }
        }
        let Some((_, host, mover, window)) = best else { continue };

        let half = halves[mover];
        let glued_end = (t0 + dwell).min(len - 1);
        let offset = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let target = |t: usize, paths: &Vec<Vec<(f64, f64)>>| {
            let p = paths[host][t];
            clamp_to((p.0 + offset.0, p.1 + offset.1), half)
        };
        let goal = target(t0, &paths);
        let own = paths[mover][t0];
        let dist = (goal.0 - own.0).hypot(goal.1 - own.1);
        let ramp = ((dist / params.speed_range.1.max(1.0)).ceil() as usize).clamp(1, window.max(1));
        for t in t0.saturating_sub(ramp)..t0 {
            let s = smoothstep((t + ramp - t0) as f64 / ramp as f64);
            let p = paths[mover][t];
            paths[mover][t] = clamp_to((p.0 + s * (goal.0 - own.0), p.1 + s * (goal.1 - own.1)), half);
        }
        for t in t0..=glued_end {
            paths[mover][t] = target(t, &paths);
        }
        let v = random_velocity(&mut rng, params.speed_range);
        let after = walk(
            &mut rng,
            PathState {
                center: paths[mover][glued_end],
                velocity: v,
            },
            len - 1 - glued_end,
            1.0,
            params,
            half,
        );
        for (k, p) in after.into_iter().enumerate() {
            paths[mover][glued_end + 1 + k] = p;
        }
        free_from[host] = Some(glued_end);
        free_from[mover] = Some(glued_end);
        involvement[host] += 1;
        involvement[mover] += 1;
        crossings.push(Crossing {
            host: host as u64 + 1,
            mover: mover as u64 + 1,
            frame: t0,
            dwell: glued_end - t0,
        });
    }

    let center_base = [0.5, 0.45, 0.4];
    let texture_base = [0.5, 0.5, 0.5];
    let mut objects: Vec<SyntheticObject> = Vec::with_capacity(n);
    for k in 0..n {
        let (w, h) = sizes[k];
        let (mut birth, mut death) = (0, len - 1);
        if involvement[k] == 0 && len >= 6 && rng.random::<f64>() < params.partial_lifespan_prob {
            if rng.random::<bool>() {
                birth = rng.random_range(1..len / 3);
            } else {
                death = rng.random_range(len * 2 / 3..len - 1);
            }
        }
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let omega = rng.random_range(0.2..0.6);
        let boxes = (birth..=death)
            .map(|t| {
                let (cx, cy) = paths[k][t];
                let dx = params.jitter_amplitude * (omega * t as f64 + phase).sin();
                let dy = params.jitter_amplitude * (omega * t as f64 + phase).cos();
                BBox::from_center(cx + dx, cy + dy, w, h)
            })
            .collect::<Result<Vec<_>>>()?;

        let pattern_seed: u64 = rng.random();
        let sig = texture_signature(pattern_seed);
        let (color_mean, texture) = match params.appearance {
            AppearanceRegime::Distinct => (
                [
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                ],
                sig,
            ),
            AppearanceRegime::Uniform => {
                let c = point_in_ball(&mut rng, center_base, params.uniform_spread);
                let t = [
                    texture_base[0] + params.uniform_spread * (2.0 * sig[0] - 1.0),
                    texture_base[1] + params.uniform_spread * (2.0 * sig[1] - 1.0),
                    texture_base[2] + params.uniform_spread * (2.0 * sig[2] - 1.0),
                ];
                (c, t)
            }
        };
        let color_var = [
            rng.random_range(0.02..0.1),
            rng.random_range(0.02..0.1),
            rng.random_range(0.02..0.1),
        ];
        objects.push(SyntheticObject {
            identity: k as u64 + 1,
            birth,
            death,
            boxes,
            color_mean,
            color_var,
            pattern_seed,
            texture,
        });
    }

    Ok(SyntheticSequence {
        length: len,
        canvas: params.canvas,
        objects,
        fps_label: params.fps_label,
        seed,
        crossings,
    })
}

/// Detector noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// Std of box coordinate noise as a fraction of the box size.
    pub box_jitter_sigma: f64,
    /// (mean, sigma) of true-detection confidence.
    pub true_confidence: (f64, f64),
    /// (mean, sigma) of false-positive confidence.
    pub false_confidence: (f64, f64),
    pub fn_rate: f64,
    /// Expected number of false positives per frame.
    pub fp_rate_per_frame: f64,
    /// Confidence multiplier for occluded objects; also scales their extra drop chance.
    pub occlusion_conf_decay: f64,
    /// Std of the noise on appearance-bearing feature channels.
    pub feature_sigma: f64,
    /// Std of the noise on the illumination-dependent variance channels.
    pub nuisance_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            box_jitter_sigma: 0.02,
            true_confidence: (0.85, 0.08),
            false_confidence: (0.25, 0.1),
            fn_rate: 0.03,
            fp_rate_per_frame: 0.3,
            occlusion_conf_decay: 0.5,
            feature_sigma: 0.03,
            nuisance_sigma: 0.3,
        }
    }
}

impl NoiseConfig {
    /// Detections equal to ground truth with fixed confidence and clean features.
    pub fn noiseless() -> Self {
        NoiseConfig {
            box_jitter_sigma: 0.0,
            true_confidence: (0.9, 0.0),
            false_confidence: (0.2, 0.0),
            fn_rate: 0.0,
            fp_rate_per_frame: 0.0,
            occlusion_conf_decay: 1.0,
            feature_sigma: 0.0,
            nuisance_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.fn_rate) || !unit(self.occlusion_conf_decay) {
            return Err(Error::InvalidArgument("rates must lie in [0, 1]".into()));
        }
        if self.fp_rate_per_frame < 0.0
            || self.box_jitter_sigma < 0.0
            || self.true_confidence.1 < 0.0
            || self.false_confidence.1 < 0.0
            || self.feature_sigma < 0.0
            || self.nuisance_sigma < 0.0
        {
            return Err(Error::InvalidArgument("sigmas and rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Simulated detector output for one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDetections {
    pub detections: Vec<Detection>,
    /// One feature vector of length [`FEATURE_DIM`] per detection.
    pub features: Vec<Vec<f64>>,
    /// Generating object identity; `None` for false positives.
    pub origin: Vec<Option<u64>>,
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).unwrap().sample(rng)
    }
}

/// Appearance features of an object seen through `bbox`, with
/// `cover` of its area hidden by `occluder`.
fn object_features(
    rng: &mut ChaCha8Rng,
    obj: &SyntheticObject,
    bbox: &BBox,
    canvas: (f64, f64),
    occluder: Option<(&SyntheticObject, f64)>,
    noise: &NoiseConfig,
) -> Vec<f64> {
    let mut color = obj.color_mean;
    if let Some((front, cover)) = occluder {
        for (c, f) in color.iter_mut().zip(front.color_mean) {
            *c = (1.0 - cover) * *c + cover * f;
        }
    }
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.extend(color.iter().map(|c| c + normal(rng, noise.feature_sigma)));
    f.extend(obj.color_var.iter().map(|v| v + normal(rng, noise.nuisance_sigma)));
    f.push(4.0 * bbox.w / canvas.0);
    f.push(4.0 * bbox.h / canvas.1);
    f.push(bbox.h / bbox.w / 3.0);
    f.extend(obj.texture.iter().map(|t| t + normal(rng, noise.feature_sigma)));
    f
}

/// Runs the detector simulator over every frame of `seq`.
pub fn simulate_detections(seq: &SyntheticSequence, noise: &NoiseConfig, seed: u64) -> Result<Vec<FrameDetections>> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cw, ch) = seq.canvas;
    let poisson = if noise.fp_rate_per_frame > 0.0 {
        Some(Poisson::new(noise.fp_rate_per_frame).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(seq.length);
    for t in 0..seq.length {
        let mut frame = FrameDetections::default();
        let alive: Vec<&SyntheticObject> = seq.objects.iter().filter(|o| o.is_alive(t)).collect();
        for obj in &alive {
            let gt = obj.box_at(t).unwrap();
            // Lowest identity among heavily overlapping objects is in front.
            let occluder = alive
                .iter()
                .filter(|o| o.identity < obj.identity)
                .filter_map(|o| {
                    let b = o.box_at(t).unwrap();
                    (iou(&gt, &b) > OCCLUSION_IOU).then(|| (*o, gt.intersection_area(&b) / gt.area()))
                })
                .max_by(|a, b| a.1.total_cmp(&b.1));

            let (mut p_drop, mut conf_scale) = (noise.fn_rate, 1.0);
            if let Some((_, cover)) = occluder {
                p_drop += (1.0 - noise.fn_rate) * (1.0 - noise.occlusion_conf_decay) * cover;
                conf_scale = noise.occlusion_conf_decay;
            }
            if rng.random::<f64>() < p_drop {
                continue;
            }
            let s = noise.box_jitter_sigma;
            let w = (gt.w * (1.0 + normal(&mut rng, s))).max(1.0);
            let h = (gt.h * (1.0 + normal(&mut rng, s))).max(1.0);
            let x = gt.x + gt.w * normal(&mut rng, s);
            let y = gt.y + gt.h * normal(&mut rng, s);
            let bbox = BBox::new(x, y, w, h)?;
            let conf = ((noise.true_confidence.0 + normal(&mut rng, noise.true_confidence.1)) * conf_scale).clamp(0.0, 1.0);
            let feats = object_features(&mut rng, obj, &bbox, seq.canvas, occluder, noise);
            frame.detections.push(Detection::new(bbox, conf, t, 0)?);
            frame.features.push(feats);
            frame.origin.push(Some(obj.identity));
        }
        let n_fp = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..n_fp {
            let w = rng.random_range(20.0..60.0);
            let h = w * rng.random_range(1.0..2.5);
            let bbox = BBox::new(rng.random_range(0.0..cw - w), rng.random_range(0.0..ch - h), w, h)?;
            let conf = (noise.false_confidence.0 + normal(&mut rng, noise.false_confidence.1)).clamp(0.0, 1.0);
            let mut feats: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random::<f64>()).collect();
            feats[6] = 4.0 * w / cw;
            feats[7] = 4.0 * h / ch;
            feats[8] = h / w / 3.0;
            frame.detections.push(Detection::new(bbox, conf, t, 0)?);
            frame.features.push(feats);
            frame.origin.push(None);
        }
        out.push(frame);
    }
    Ok(out)
}

/// Marks frames `0, stride, 2 * stride, ...` as annotated.
pub fn sparsify_annotations(length: usize, stride: usize) -> Result<Vec<bool>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("annotation stride must be >= 1".into()));
    }
    Ok((0..length).map(|t| t % stride == 0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_object_is_constant() {
        let p = GenerationParams {
            length: 10,
            n_objects: 1,
            speed_range: (0.0, 0.0),
            turn_prob: 0.0,
            jitter_amplitude: 0.0,
            crossings: 0,
            ..GenerationParams::default()
        };
        let s = generate_sequence(&p, 1).unwrap();
        let o = &s.objects[0];
        assert_eq!(o.boxes.len(), 10);
        assert!(o.boxes.iter().all(|b| *b == o.boxes[0]));
        assert_eq!(s.frame_boxes(9)[0].0, o.identity);
    }

    #[test]
    fn crossing_produces_overlap() {
        let p = GenerationParams {
            length: 11,
            n_objects: 2,
            crossings: 1,
            dwell_range: (0, 0),
            turn_prob: 0.0,
            ..GenerationParams::default()
        };
        for seed in 0..20 {
            let s = generate_sequence(&p, seed).unwrap();
            let best = (0..s.length)
                .map(|t| iou(&s.objects[0].box_at(t).unwrap(), &s.objects[1].box_at(t).unwrap()))
                .fold(0.0, f64::max);
            assert!(best > 0.3, "seed {seed}: max IoU {best}");
        }
    }

    #[test]
    fn crossing_at_requested_frame() {
        // Partner sizes are within 10% of the host's and its center within
        // 2px per axis: for 30x48 boxes that alone keeps IoU above 0.7.
        let p = GenerationParams {
            length: 10,
            n_objects: 2,
            crossings: 1,
            crossing_frames: vec![5],
            dwell_range: (0, 0),
            turn_prob: 0.0,
            ..GenerationParams::default()
        };
        for seed in 0..20 {
            let s = generate_sequence(&p, seed).unwrap();
            let (a, b) = (&s.objects[0], &s.objects[1]);
            let best = (4..=6)
                .map(|t| iou(&a.box_at(t).unwrap(), &b.box_at(t).unwrap()))
                .fold(0.0, f64::max);
            assert!(best > 0.3, "seed {seed}: {best}");
        }
        let bad = GenerationParams {
            crossing_frames: vec![10],
            ..p
        };
        assert!(generate_sequence(&bad, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let p = GenerationParams::default();
        assert_eq!(generate_sequence(&p, 9).unwrap(), generate_sequence(&p, 9).unwrap());
        assert_ne!(generate_sequence(&p, 9).unwrap(), generate_sequence(&p, 10).unwrap());
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let p = GenerationParams {
            n_objects: 500,
            ..GenerationParams::default()
        };
        assert!(generate_sequence(&p, 0).is_err());
        let p = GenerationParams {
            length: 1,
            ..GenerationParams::default()
        };
        assert!(generate_sequence(&p, 0).is_err());
    }

    #[test]
    fn ground_truth_is_consistent() {
        let p = GenerationParams {
            partial_lifespan_prob: 0.5,
            n_objects: 8,
            ..GenerationParams::default()
        };
        for seed in 0..10 {
            let s = generate_sequence(&p, seed).unwrap();
            let mut ids: Vec<u64> = s.objects.iter().map(|o| o.identity).collect();
            ids.dedup();
            assert_eq!(ids.len(), s.objects.len());
            for o in &s.objects {
                assert_eq!(o.boxes.len(), o.death - o.birth + 1);
                assert!(o.death < s.length);
                for b in &o.boxes {
                    assert!(b.x >= -p.margin && b.right() <= s.canvas.0 + p.margin);
                    assert!(b.y >= -p.margin && b.bottom() <= s.canvas.1 + p.margin);
                }
            }
        }
    }

    #[test]
    fn noiseless_detections_equal_ground_truth() {
        let p = GenerationParams {
            crossings: 0,
            n_objects: 3,
            ..GenerationParams::default()
        };
        let s = generate_sequence(&p, 3).unwrap();
        let dets = simulate_detections(&s, &NoiseConfig::noiseless(), 1).unwrap();
        for (t, f) in dets.iter().enumerate() {
            let gt = s.frame_boxes(t);
            assert_eq!(f.detections.len(), gt.len());
            for ((d, origin), (id, b)) in f.detections.iter().zip(&f.origin).zip(&gt) {
                assert!((d.bbox.x - b.x).abs() < 1e-12 && (d.bbox.w - b.w).abs() < 1e-12);
                assert_eq!(d.confidence, 0.9);
                assert_eq!(*origin, Some(*id));
            }
        }
    }

    #[test]
    fn full_drop_rate_removes_true_detections() {
        let s = generate_sequence(&GenerationParams::default(), 3).unwrap();
        let noise = NoiseConfig {
            fn_rate: 1.0,
            ..NoiseConfig::default()
        };
        let dets = simulate_detections(&s, &noise, 1).unwrap();
        assert!(dets.iter().all(|f| f.origin.iter().all(|o| o.is_none())));
    }

    #[test]
    fn drop_fraction_concentrates() {
        // Static, well separated objects: no occlusion raises the drop rate.
        let p = GenerationParams {
            length: 1000,
            n_objects: 10,
            width_range: (20.0, 20.0),
            aspect_range: (1.0, 1.0),
            speed_range: (0.0, 0.0),
            turn_prob: 0.0,
            jitter_amplitude: 0.0,
            crossings: 0,
            ..GenerationParams::default()
        };
        let mut s = generate_sequence(&p, 0).unwrap();
        for (k, o) in s.objects.iter_mut().enumerate() {
            let b = BBox::new(10.0 + 45.0 * k as f64, 100.0, 20.0, 20.0).unwrap();
            o.boxes.iter_mut().for_each(|x| *x = b);
        }
        let noise = NoiseConfig {
            fn_rate: 0.1,
            fp_rate_per_frame: 0.0,
            ..NoiseConfig::default()
        };
        let dets = simulate_detections(&s, &noise, 5).unwrap();
        let kept: usize = dets.iter().map(|f| f.detections.len()).sum();
        let dropped = 1.0 - kept as f64 / 10_000.0;
        assert!((dropped - 0.1).abs() < 0.01, "drop fraction {dropped}");
    }

    #[test]
    fn features_separate_identities() {
        let s = generate_sequence(&GenerationParams::default(), 12).unwrap();
        let dets = simulate_detections(&s, &NoiseConfig::default(), 4).unwrap();
        let mut feats: Vec<(u64, &Vec<f64>)> = Vec::new();
        for f in &dets {
            for (o, v) in f.origin.iter().zip(&f.features) {
                if let Some(id) = o {
                    feats.push((*id, v));
                }
            }
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let d = dist(feats[i].1, feats[j].1);
                if feats[i].0 == feats[j].0 {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    ne += 1;
                }
            }
        }
        assert!(inter / ne as f64 > intra / ni as f64);
    }

    #[test]
    fn sparsify_examples() {
        assert!(sparsify_annotations(5, 1).unwrap().iter().all(|&a| a));
        let m = sparsify_annotations(10, 3).unwrap();
        let frames: Vec<usize> = (0..10).filter(|&t| m[t]).collect();
        assert_eq!(frames, vec![0, 3, 6, 9]);
        assert_eq!(frames.len(), 10usize.div_ceil(3));
        let m = sparsify_annotations(10, 12).unwrap();
        assert_eq!(m.iter().filter(|&&a| a).count(), 1);
        assert!(sparsify_annotations(10, 0).is_err());
    }
}
