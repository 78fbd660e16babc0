//! Command-line front end: synthetic data, training, tracking, scoring,
//! graph dumps and ablations.

pub mod ablate;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use walker_core::io::{
    read_annotations, read_dataset, read_sequence_dir, sequence_dirs, write_annotations, write_dataset,
};
use walker_core::losses::graph_losses;
use walker_core::metrics::{evaluate, EvalReport};
use walker_core::pipeline::{synth_dataset, track_sequence, Scenario};
use walker_core::toag::TransitionMatrix;
use walker_core::trainer::{prepare_pair, train_detailed};
use walker_core::{EmbedderModel, RunConfig, SequenceData};

use crate::ablate::{run_ablation, DataSource, Variant};

#[derive(Debug, Parser)]
#[command(name = "walker", version, about = "Self-supervised multi-object tracking on appearance graphs")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// key=value config file; without one the dancetrack preset is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Also write the resolved config to this file.
    #[arg(long, global = true)]
    pub save_config: Option<PathBuf>,
    /// Worker threads for commands that process several sequences or seeds.
    #[arg(long, default_value_t = 1, global = true)]
    pub parallel: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedder; writes the model and a per-epoch loss CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Defaults to `<model>.loss.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Track a sequence directory, or every sequence under a dataset directory.
    Track {
        #[arg(long = "in")]
        input: PathBuf,
        /// Results file for one sequence, directory for a dataset.
        #[arg(long)]
        out: PathBuf,
        /// Without a model the embedder keeps its random initialization.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score tracker output against ground truth.
    Eval {
        /// gt.txt, or a dataset directory.
        #[arg(long)]
        gt: PathBuf,
        /// results file, or a directory with one `<sequence>.txt` per sequence.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dump the transition matrices and assignments of one training frame pair.
    InspectGraph {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// 1-based key frame; must be annotated under the configured setting.
        #[arg(long, default_value_t = 1)]
        key_frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare association metrics and loss variants over several seeds.
    Ablate {
        /// Training dataset; synthetic data per seed when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Held-out dataset; defaults to the last quarter of `--dataset`.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Held-out sequences per seed for synthetic data.
        #[arg(long, default_value_t = 10)]
        test_sequences: usize,
        /// Comma-separated subset of variants.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Per-seed results as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Loads the config file (or the default preset) and applies overrides.
pub fn resolve_config(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &global.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override '{o}' is not KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: Option<&Path>, dim: usize, cfg: &RunConfig, out: &mut dyn Write) -> anyhow::Result<EmbedderModel> {
    match path {
        Some(p) => {
            let m = EmbedderModel::load(p)?;
            if m.dim_features() != dim {
                bail!("model {} expects {} features, data has {dim}", p.display(), m.dim_features());
            }
            Ok(m)
        }
        None => {
            writeln!(out, "note: no model given, using the untrained embedder (train_seed={})", cfg.train.seed)?;
            Ok(EmbedderModel::random(dim, cfg.train.embed_dim, cfg.train.seed)?)
        }
    }
}

fn in_pool<T: Send>(parallel: usize, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build()?;
    Ok(pool.install(f))
}

/// Human-readable summary followed by a key=value block.
pub fn format_report(r: &EvalReport) -> String {
    format!(
        "MOTA {:.4}  IDF1 {:.4}  IDSW {}  FP {}  FN {}  GT {}\n\
         mota={}\nidf1={}\nid_switches={}\nfalse_positives={}\nfalse_negatives={}\n\
         gt_boxes={}\npred_boxes={}\nmatches={}\nidtp={}\nprecision={}\nrecall={}\n",
        r.mota(),
        r.idf1(),
        r.id_switches,
        r.false_positives,
        r.false_negatives,
        r.gt_boxes,
        r.mota(),
        r.idf1(),
        r.id_switches,
        r.false_positives,
        r.false_negatives,
        r.gt_boxes,
        r.pred_boxes,
        r.matches,
        r.idtp,
        r.precision(),
        r.recall()
    )
}

fn matrix_csv(m: &TransitionMatrix, row: &str, col: &str) -> String {
    let p = m.probs();
    let mut out = format!("{row}\\{col}");
    for j in 0..p.ncols() {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for i in 0..p.nrows() {
        out.push_str(&i.to_string());
        for j in 0..p.ncols() {
            out.push_str(&format!(",{}", p[(i, j)]));
        }
        out.push('\n');
    }
    out
}

fn members(m: &[usize]) -> String {
    m.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn cmd_synth(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let data = synth_dataset(&cfg.synth)?;
    write_dataset(dir, &data)?;
    let boxes: usize = data.iter().map(|s| s.gt.len()).sum();
    let dets: usize = data.iter().flat_map(|s| &s.detections).map(Vec::len).sum();
    writeln!(
        out,
        "wrote {} sequences to {} ({boxes} ground-truth boxes, {dets} detections)",
        data.len(),
        dir.display()
    )?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, model: &Path, history: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<()> {
    let seqs = read_dataset(data)?;
    let training = seqs.iter().map(SequenceData::to_training).collect::<walker_core::Result<Vec<_>>>()?;
    let (m, hist) = train_detailed(&training, &cfg.train)?;
    write_file(model, &m.to_text())?;
    let history = history.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = model.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let mut csv = String::from("epoch,cycle_loss,forward_loss,total_loss\n");
    for (e, l) in hist.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", e + 1, l.cycle, l.forward, l.total));
    }
    write_file(&history, &csv)?;
    writeln!(
        out,
        "trained on {} sequences for {} epochs; model {}, loss history {}",
        seqs.len(),
        hist.len(),
        model.display(),
        history.display()
    )?;
    if let (Some(first), Some(last)) = (hist.first(), hist.last()) {
        writeln!(out, "loss first={} last={}", first.total, last.total)?;
    }
    Ok(())
}

fn cmd_track(
    cfg: &RunConfig,
    input: &Path,
    dest: &Path,
    model: Option<&Path>,
    parallel: usize,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let dirs = sequence_dirs(input)?;
    let single = input.join("det.txt").is_file();
    let seqs = dirs.iter().map(|d| read_sequence_dir(d)).collect::<walker_core::Result<Vec<_>>>()?;
    let dim = seqs[0].feature_dim;
    if let Some(s) = seqs.iter().find(|s| s.feature_dim != dim) {
        bail!("sequence {} has {} features, expected {dim}", s.name, s.feature_dim);
    }
    let m = load_model(model, dim, cfg, out)?;
    let tracks = in_pool(parallel, || {
        seqs.par_iter()
            .map(|s| track_sequence(s, &m, &cfg.tracker))
            .collect::<walker_core::Result<Vec<_>>>()
    })??;
    for (s, t) in seqs.iter().zip(&tracks) {
        let path = if single { dest.to_path_buf() } else { dest.join(format!("{}.txt", s.name)) };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_annotations(&path, t)?;
        let ids: std::collections::BTreeSet<u64> = t.iter().map(|a| a.id).collect();
        writeln!(out, "{}: {} boxes, {} tracks -> {}", s.name, t.len(), ids.len(), path.display())?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, gt: &Path, pred: &Path, report: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    let mut lines = String::new();
    if gt.is_dir() {
        for dir in sequence_dirs(gt)? {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let g = read_annotations(&dir.join("gt.txt"))?;
            let pred_path = if pred.is_dir() { pred.join(format!("{name}.txt")) } else { pred.to_path_buf() };
            let p = read_annotations(&pred_path)?;
            let r = evaluate(&g, &p, cfg.eval_iou)?;
            lines.push_str(&format!("{name}: MOTA {:.4} IDF1 {:.4} IDSW {}\n", r.mota(), r.idf1(), r.id_switches));
            reports.push(r);
        }
    } else {
        reports.push(evaluate(&read_annotations(gt)?, &read_annotations(pred)?, cfg.eval_iou)?);
    }
    let text = format!("{lines}{}", format_report(&EvalReport::combine(&reports)));
    out.write_all(text.as_bytes())?;
    if let Some(p) = report {
        write_file(p, &text)?;
    }
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig, input: &Path, model: Option<&Path>, key_frame: usize, dir: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let seq = read_sequence_dir(input)?;
    if key_frame == 0 || key_frame > seq.length {
        bail!("key frame {key_frame} outside 1..={}", seq.length);
    }
    let training = seq.to_training()?;
    let t = key_frame - 1;
    if !training.key_frames().contains(&t) {
        bail!("frame {key_frame} is not an annotated key frame (stride {})", seq.annotation_stride);
    }
    let m = load_model(model, seq.feature_dim, cfg, out)?;
    let (pair, key, reference, rng_seed) = prepare_pair(&training, 0, t, &cfg.train)?;
    if !key.has_positives() {
        bail!("key frame {key_frame} has no positive nodes");
    }
    let key_nodes = key.embed(&m)?;
    let ref_nodes = reference.embed(&m)?;
    let g = graph_losses(&key_nodes, &ref_nodes, &cfg.train.loss_config(), rng_seed)?;

    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut nodes = String::from("frame,node,x,y,w,h,positive\n");
    for (frame, set) in [(pair.key, &key), (pair.reference, &reference)] {
        for (i, b) in set.boxes.iter().enumerate() {
            nodes.push_str(&format!("{},{i},{},{},{},{},{}\n", frame + 1, b.x, b.y, b.w, b.h, i < set.positive_count));
        }
    }
    write_file(&dir.join("nodes.csv"), &nodes)?;
    write_file(&dir.join("fwd.csv"), &matrix_csv(&g.fwd, "key", "ref"))?;
    write_file(&dir.join("bwd.csv"), &matrix_csv(&g.bwd, "ref", "key"))?;
    write_file(&dir.join("cycle.csv"), &matrix_csv(&g.cycle, "key", "key"))?;
    let mut assign = String::from("status,key_members,latent_members,closure\n");
    for p in &g.assignment.pairs {
        assign.push_str(&format!("assigned,{},{},{}\n", members(&p.key.members), members(&p.latent.members), p.closure));
    }
    for c in &g.assignment.rejected {
        assign.push_str(&format!("rejected,{},,\n", members(&c.members)));
    }
    write_file(&dir.join("assignment.csv"), &assign)?;
    writeln!(
        out,
        "key frame {} -> reference frame {}: {} key nodes ({} positive), {} reference nodes",
        pair.key + 1,
        pair.reference + 1,
        key.len(),
        key.positive_count,
        reference.len()
    )?;
    writeln!(
        out,
        "cycle_loss={} forward_loss={} total={} assigned={} rejected={}",
        g.report.cycle_loss,
        g.report.forward_loss,
        g.report.total,
        g.assignment.pairs.len(),
        g.assignment.rejected.len()
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    test: Option<&Path>,
    seeds: usize,
    first_seed: u64,
    test_sequences: usize,
    variants: Option<&[String]>,
    csv: Option<&Path>,
    parallel: usize,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let variants: Vec<Variant> = match variants {
        Some(names) => names.iter().map(|n| n.trim().parse()).collect::<walker_core::Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let source = match (dataset, test) {
        (Some(d), Some(t)) => DataSource::Fixed {
            train: read_dataset(d)?,
            test: read_dataset(t)?,
        },
        (Some(d), None) => {
            let mut all = read_dataset(d)?;
            if all.len() < 2 {
                bail!("{} holds {} sequence(s); need two to hold one out", d.display(), all.len());
            }
            let held = all.len().div_ceil(4);
            let test = all.split_off(all.len() - held);
            writeln!(out, "training on {} sequences, holding out {}", all.len(), test.len())?;
            DataSource::Fixed { train: all, test }
        }
        (None, Some(_)) => bail!("--test needs --dataset"),
        (None, None) => DataSource::Synthetic(Scenario {
            generation: cfg.synth.generation.clone(),
            noise: cfg.synth.noise.clone(),
            train_sequences: cfg.synth.sequences,
            test_sequences,
            annotation_stride: cfg.synth.annotation_stride,
        }),
    };
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| first_seed + k).collect();
    let table = run_ablation(&source, &seed_list, &cfg.train, &cfg.tracker, &variants, parallel)?;
    write!(out, "{table}")?;
    if let Some(p) = csv {
        write_file(p, &table.to_csv())?;
    }
    Ok(())
}

/// Runs a parsed command, writing the resolved config and the report to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli.global)?;
    let echo = cfg.to_text();
    writeln!(out, "# resolved config")?;
    out.write_all(echo.as_bytes())?;
    writeln!(out, "# end config")?;
    if let Some(p) = &cli.global.save_config {
        write_file(p, &echo)?;
    }
    let parallel = cli.global.parallel;
    match &cli.command {
        Command::Synth { out: dir } => cmd_synth(&cfg, dir, out),
        Command::Train { data, model, history } => cmd_train(&cfg, data, model, history.as_deref(), out),
        Command::Track { input, out: dest, model } => cmd_track(&cfg, input, dest, model.as_deref(), parallel, out),
        Command::Eval { gt, pred, report } => cmd_eval(&cfg, gt, pred, report.as_deref(), out),
        Command::InspectGraph {
            input,
            model,
            key_frame,
            out: dir,
        } => cmd_inspect(&cfg, input, model.as_deref(), *key_frame, dir, out),
        Command::Ablate {
            dataset,
            test,
            seeds,
            first_seed,
            test_sequences,
            variants,
            csv,
        } => cmd_ablate(
            &cfg,
            dataset.as_deref(),
            test.as_deref(),
            *seeds,
            *first_seed,
            *test_sequences,
            variants.as_deref(),
            csv.as_deref(),
            parallel,
            out,
        ),
    }
}

/// Parses `argv` and runs it. Returns the process exit code: 0 on success,
/// 1 on a run error, 2 on a usage error.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}
