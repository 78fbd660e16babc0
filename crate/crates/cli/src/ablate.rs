//! Metric and loss ablations over several training seeds.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use walker_core::losses::TargetPolicy;
use walker_core::pipeline::{evaluate_on, train_on, Scenario};
use walker_core::{EmbedderModel, Error, EvalReport, Metric, Result, SequenceData, TrackerConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Multi-positive cycle loss plus forward loss, biwalk association.
    Biwalk,
    Cosine,
    Bisoftmax,
    SinglePositive,
    CycleOnly,
    MotionOnly,
    Untrained,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Biwalk,
        Variant::Cosine,
        Variant::Bisoftmax,
        Variant::SinglePositive,
        Variant::CycleOnly,
        Variant::MotionOnly,
        Variant::Untrained,
    ];

    fn training(self) -> Option<Training> {
        match self {
            Variant::Biwalk | Variant::Cosine | Variant::Bisoftmax => Some(Training::Full),
            Variant::SinglePositive => Some(Training::SinglePositive),
            Variant::CycleOnly => Some(Training::CycleOnly),
            Variant::MotionOnly | Variant::Untrained => None,
        }
    }

    fn metric(self, base: Metric) -> Metric {
        match self {
            Variant::Cosine => Metric::Cosine,
            Variant::Bisoftmax => Metric::Bisoftmax,
            Variant::Biwalk => Metric::Biwalk,
            Variant::MotionOnly => Metric::None,
            _ => base,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant '{s}'")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Biwalk => "biwalk",
            Variant::Cosine => "cosine",
            Variant::Bisoftmax => "bisoftmax",
            Variant::SinglePositive => "single_positive",
            Variant::CycleOnly => "cycle_only",
            Variant::MotionOnly => "motion_only",
            Variant::Untrained => "untrained",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Training {
    Full,
    SinglePositive,
    CycleOnly,
}

impl Training {
    fn config(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig { seed, ..base.clone() };
        match self {
            Training::Full => {}
            Training::SinglePositive => cfg.policy = TargetPolicy::SinglePositive,
            Training::CycleOnly => cfg.gamma2 = 0.0,
        }
        cfg
    }
}

/// Where training and held-out sequences come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Fresh synthetic data per seed.
    Synthetic(Scenario),
    /// Fixed data; seeds vary only the training run.
    Fixed {
        train: Vec<SequenceData>,
        test: Vec<SequenceData>,
    },
}

impl DataSource {
    fn datasets(&self, seed: u64) -> Result<(Vec<SequenceData>, Vec<SequenceData>)> {
        match self {
            DataSource::Synthetic(s) => s.datasets(seed),
            DataSource::Fixed { train, test } => Ok((train.clone(), test.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// One report per seed, in seed order.
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn mean_idf1(&self) -> f64 {
        mean(self.reports.iter().map(EvalReport::idf1))
    }

    pub fn mean_mota(&self) -> f64 {
        mean(self.reports.iter().map(EvalReport::mota))
    }

    pub fn idsw(&self) -> usize {
        self.reports.iter().map(|r| r.id_switches).sum()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,mota,idf1,id_switches,false_positives,false_negatives\n");
        for row in &self.rows {
            for (seed, r) in self.seeds.iter().zip(&row.reports) {
                out.push_str(&format!(
                    "{},{seed},{},{},{},{},{}\n",
                    row.variant,
                    r.mota(),
                    r.idf1(),
                    r.id_switches,
                    r.false_positives,
                    r.false_negatives
                ));
            }
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>8} {:>8} {:>6}  per-seed IDF1", "variant", "IDF1", "MOTA", "IDSW")?;
        for row in &self.rows {
            let per: Vec<String> = row.reports.iter().map(|r| format!("{:.4}", r.idf1())).collect();
            writeln!(
                f,
                "{:<16} {:>8.4} {:>8.4} {:>6}  {}",
                row.variant.to_string(),
                row.mean_idf1(),
                row.mean_mota(),
                row.idsw(),
                per.join(" ")
            )?;
        }
        Ok(())
    }
}

fn run_seed(
    source: &DataSource,
    seed: u64,
    train: &TrainConfig,
    tracker: &TrackerConfig,
    variants: &[Variant],
) -> Result<Vec<EvalReport>> {
    let (train_set, test_set) = source.datasets(seed)?;
    let mut models: Vec<(Training, EmbedderModel)> = Vec::new();
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let model = match v.training() {
            Some(t) => match models.iter().find(|(k, _)| *k == t) {
                Some((_, m)) => m.clone(),
                None => {
                    let (m, _) = train_on(&train_set, &t.config(train, seed))?;
                    models.push((t, m.clone()));
                    m
                }
            },
            None => {
                let dim = train_set
                    .first()
                    .map(|s| s.feature_dim)
                    .ok_or_else(|| Error::Empty("training dataset".into()))?;
                EmbedderModel::random(dim, train.embed_dim, seed)?
            }
        };
        let cfg = TrackerConfig {
            metric: v.metric(tracker.metric),
            ..tracker.clone()
        };
        out.push(evaluate_on(&test_set, &model, &cfg)?);
    }
    Ok(out)
}

/// Trains and scores every variant for every seed. Seeds run on up to
/// `parallel` threads; results do not depend on the thread count.
pub fn run_ablation(
    source: &DataSource,
    seeds: &[u64],
    train: &TrainConfig,
    tracker: &TrackerConfig,
    variants: &[Variant],
    parallel: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Empty("ablation needs at least one seed and one variant".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let per_seed: Vec<Vec<EvalReport>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| run_seed(source, s, train, tracker, variants))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(k, &variant)| AblationRow {
            variant,
            reports: per_seed.iter().map(|r| r[k]).collect(),
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
