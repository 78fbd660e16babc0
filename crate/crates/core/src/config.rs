//! Flat `key=value` run configuration with the three benchmark presets.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::{Scenario, SynthSpec};
use crate::synth::AppearanceRegime;
use crate::tracker::TrackerConfig;
use crate::trainer::{Setting, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Mot17,
    DanceTrack,
    Bdd100k,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mot17" => Ok(Preset::Mot17),
            "dancetrack" => Ok(Preset::DanceTrack),
            "bdd100k" => Ok(Preset::Bdd100k),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected mot17, dancetrack or bdd100k)"
            ))),
        }
    }
}

impl Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Mot17 => "mot17",
            Preset::DanceTrack => "dancetrack",
            Preset::Bdd100k => "bdd100k",
        })
    }
}

/// Everything a CLI run depends on besides file paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub synth: SynthSpec,
    pub eval_iou: f64,
}

impl RunConfig {
    /// Desk-scale values for keys outside the benchmark table, with the
    /// DanceTrack column for the rest.
    fn base() -> Self {
        let scenario = Scenario::benchmark(AppearanceRegime::Distinct);
        RunConfig {
            preset: None,
            train: TrainConfig {
                setting: Setting::Sparse,
                ..TrainConfig::default()
            },
            tracker: TrackerConfig::default(),
            synth: SynthSpec {
                generation: scenario.generation,
                noise: scenario.noise,
                sequences: scenario.train_sequences,
                seed: 0,
                annotation_stride: scenario.annotation_stride,
            },
            eval_iou: 0.5,
        }
    }

    pub fn preset(p: Preset) -> Self {
        let mut c = RunConfig::base();
        c.preset = Some(p);
        let (gamma, k_hat, nms, beta_new, beta_high, k, m) = match p {
            Preset::Mot17 => ((1.0, 2.0), 10, 0.7, 0.75, 0.3, 30, 0.5),
            Preset::DanceTrack => ((1.0, 2.0), 10, 0.6, 0.8, 0.6, 20, 0.8),
            Preset::Bdd100k => ((0.5, 1.0), 3, 0.65, 0.5, 0.35, 10, 0.8),
        };
        let t = &mut c.train;
        (t.gamma1, t.gamma2) = gamma;
        t.k_hat = k_hat;
        t.alpha1 = 0.7;
        t.alpha2 = 0.3;
        t.beta_obj = 0.3;
        t.beta_cycle = 0.8;
        t.tau = 0.05;
        let r = &mut c.tracker;
        r.det_conf_thr = 0.1;
        r.det_nms_iou = nms;
        r.beta_new = beta_new;
        r.beta_high = beta_high;
        r.beta_low = 0.1;
        r.beta_match_high = 0.1;
        r.beta_biwalk = 0.2;
        r.beta_iou = 0.5;
        r.lambda_biwalk = 2.0;
        r.beta_match_low = 0.5;
        r.beta_cycle_inf = 0.1;
        r.tau_inf = 0.07;
        r.max_inactive_k = k;
        r.ema_momentum = m;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.tracker.validate()?;
        let k = &self.tracker.kalman;
        if !(k.std_weight_position > 0.0 && k.std_weight_velocity > 0.0 && k.measurement_weight > 0.0) {
            return Err(Error::Config("kalman weights must be positive".into()));
        }
        self.synth.generation.validate().map_err(as_config)?;
        self.synth.noise.validate().map_err(as_config)?;
        if self.synth.sequences == 0 {
            return Err(Error::Config("synth_sequences must be >= 1".into()));
        }
        if self.synth.annotation_stride == 0 {
            return Err(Error::Config("annotation_stride must be >= 1".into()));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return Err(Error::Config(format!("eval_iou={} outside (0, 1]", self.eval_iou)));
        }
        Ok(())
    }

    /// Parses config text. A `preset=<name>` line, if present, must come
    /// first; without one every key must be given.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<RunConfig> = None;
        let mut seen: Vec<&'static str> = Vec::new();
        let mut any = false;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: line_no, message };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
            if key == "preset" {
                if any {
                    return Err(err("preset must be the first setting".into()));
                }
                cfg = Some(RunConfig::preset(value.parse().map_err(|e: Error| err(e.to_string()))?));
                any = true;
                continue;
            }
            any = true;
            let c = cfg.get_or_insert_with(RunConfig::base);
            let canonical = canonical_key(key).ok_or_else(|| err(format!("unknown key '{key}'")))?;
            if seen.contains(&canonical) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            set_field(c, canonical, value).map_err(|e| err(e.to_string()))?;
            seen.push(canonical);
        }
        let cfg = cfg.ok_or_else(|| Error::Config("empty config: give a preset or every key".into()))?;
        if cfg.preset.is_none() {
            let missing: Vec<&str> = KEYS.iter().copied().filter(|k| !seen.contains(k)).collect();
            if !missing.is_empty() {
                return Err(Error::Config(format!(
                    "no preset given and {} keys missing: {}",
                    missing.len(),
                    missing.join(", ")
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one key and revalidates. `preset` is not a key here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let canonical = canonical_key(key).ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        let mut next = self.clone();
        set_field(&mut next, canonical, value.trim()).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    /// Every key with its resolved value, preset first. Parsing the result
    /// gives back an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(p) = self.preset {
            out.push_str(&format!("preset={p}\n"));
        }
        for key in KEYS {
            out.push_str(&format!("{key}={}\n", get_field(self, key)));
        }
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::DanceTrack)
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse::<$t>().map_err(|e| Error::Config(format!("'{s}': {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, bool, Setting, crate::losses::TargetPolicy, crate::tracker::Metric, crate::tracker::Mode, AppearanceRegime);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self> {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Err(Error::Config(format!("'{s}' is not finite"))),
            Err(e) => Err(Error::Config(format!("'{s}': {e}"))),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(usize::parse_value)
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:tt).+;)*) => {
        /// Every accepted key, in echo order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_field(c: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => c.$($field).+ = ConfigValue::parse_value(value)?,)*
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
            Ok(())
        }

        fn get_field(c: &RunConfig, key: &str) -> String {
            match key {
                $($key => c.$($field).+.render(),)*
                other => unreachable!("key table lists '{other}'"),
            }
        }
    };
}

config_keys! {
    "k_hat" => train.k_hat;
    "alpha1" => train.alpha1;
    "alpha2" => train.alpha2;
    "beta_obj" => train.beta_obj;
    "beta_cycle" => train.beta_cycle;
    "tau" => train.tau;
    "gamma1" => train.gamma1;
    "gamma2" => train.gamma2;
    "neg_ratio" => train.neg_ratio;
    "max_pos_nodes" => train.max_pos_nodes;
    "learning_rate" => train.learning_rate;
    "epochs" => train.epochs;
    "setting" => train.setting;
    "train_seed" => train.seed;
    "embed_dim" => train.embed_dim;
    "target_policy" => train.policy;
    "proposal_jitter" => train.proposal_jitter;
    "proposal_feature_noise" => train.proposal_feature_noise;
    "mode" => tracker.mode;
    "metric" => tracker.metric;
    "det_conf_thr" => tracker.det_conf_thr;
    "det_nms_iou" => tracker.det_nms_iou;
    "beta_new" => tracker.beta_new;
    "beta_high" => tracker.beta_high;
    "beta_low" => tracker.beta_low;
    "beta_match_high" => tracker.beta_match_high;
    "beta_biwalk" => tracker.beta_biwalk;
    "beta_iou" => tracker.beta_iou;
    "lambda_biwalk" => tracker.lambda_biwalk;
    "beta_match_low" => tracker.beta_match_low;
    "beta_cycle_inf" => tracker.beta_cycle_inf;
    "tau_inf" => tracker.tau_inf;
    "max_inactive_k" => tracker.max_inactive_k;
    "ema_momentum" => tracker.ema_momentum;
    "backdrop_frames" => tracker.backdrop_frames;
    "qd_beta_match" => tracker.qd_beta_match;
    "qd_beta_obj" => tracker.qd_beta_obj;
    "interpolate" => tracker.interpolate;
    "interp_max_gap" => tracker.interp_max_gap;
    "kalman_std_position" => tracker.kalman.std_weight_position;
    "kalman_std_velocity" => tracker.kalman.std_weight_velocity;
    "kalman_measurement_weight" => tracker.kalman.measurement_weight;
    "eval_iou" => eval_iou;
    "synth_sequences" => synth.sequences;
    "synth_seed" => synth.seed;
    "annotation_stride" => synth.annotation_stride;
    "synth_length" => synth.generation.length;
    "synth_canvas_w" => synth.generation.canvas.0;
    "synth_canvas_h" => synth.generation.canvas.1;
    "synth_objects" => synth.generation.n_objects;
    "synth_width_min" => synth.generation.width_range.0;
    "synth_width_max" => synth.generation.width_range.1;
    "synth_aspect_min" => synth.generation.aspect_range.0;
    "synth_aspect_max" => synth.generation.aspect_range.1;
    "synth_speed_min" => synth.generation.speed_range.0;
    "synth_speed_max" => synth.generation.speed_range.1;
    "synth_turn_prob" => synth.generation.turn_prob;
    "synth_jitter" => synth.generation.jitter_amplitude;
    "synth_crossings" => synth.generation.crossings;
    "synth_crossing_frames" => synth.generation.crossing_frames;
    "synth_dwell_min" => synth.generation.dwell_range.0;
    "synth_dwell_max" => synth.generation.dwell_range.1;
    "synth_partial_lifespan" => synth.generation.partial_lifespan_prob;
    "synth_appearance" => synth.generation.appearance;
    "synth_uniform_spread" => synth.generation.uniform_spread;
    "synth_margin" => synth.generation.margin;
    "synth_fps" => synth.generation.fps_label;
    "noise_box_jitter" => synth.noise.box_jitter_sigma;
    "noise_true_conf_mean" => synth.noise.true_confidence.0;
    "noise_true_conf_sigma" => synth.noise.true_confidence.1;
    "noise_fp_conf_mean" => synth.noise.false_confidence.0;
    "noise_fp_conf_sigma" => synth.noise.false_confidence.1;
    "noise_fn_rate" => synth.noise.fn_rate;
    "noise_fp_rate" => synth.noise.fp_rate_per_frame;
    "noise_occlusion_decay" => synth.noise.occlusion_conf_decay;
    "noise_feature_sigma" => synth.noise.feature_sigma;
    "noise_nuisance_sigma" => synth.noise.nuisance_sigma;
}

/// Resolves the loss-weight aliases used by the benchmark table.
fn canonical_key(key: &str) -> Option<&'static str> {
    let key = match key {
        "lambda1" => "gamma1",
        "lambda2" => "gamma2",
        other => other,
    };
    KEYS.iter().copied().find(|k| *k == key)
}
