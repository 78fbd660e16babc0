//! MOT Challenge text files, feature tables and dataset directories.
//!
//! Frames are 1-based in every file and 0-based in memory. A sequence
//! directory holds `det.txt`, `feat.csv`, an optional `gt.txt` and an
//! optional `meta.txt`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::metrics::Annotation;
use crate::pipeline::SequenceData;

/// One line of a MOT file: `frame,id,x,y,w,h,conf,class,visibility`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRecord {
    pub frame: u64,
    /// -1 for detections.
    pub id: i64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
    pub class_id: i64,
    pub visibility: f64,
}

impl fmt::Display for MotRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            self.frame, self.id, self.x, self.y, self.w, self.h, self.conf, self.class_id, self.visibility
        )
    }
}

impl MotRecord {
    pub fn bbox(&self) -> Result<BBox> {
        BBox::new(self.x, self.y, self.w, self.h)
    }

    pub fn from_detection(d: &Detection) -> Self {
        MotRecord {
            frame: d.frame as u64 + 1,
            id: -1,
            x: d.bbox.x,
            y: d.bbox.y,
            w: d.bbox.w,
            h: d.bbox.h,
            conf: d.confidence,
            class_id: d.class_id as i64,
            visibility: -1.0,
        }
    }

    pub fn from_annotation(a: &Annotation, conf: f64) -> Self {
        MotRecord {
            frame: a.frame as u64 + 1,
            id: a.id as i64,
            x: a.bbox.x,
            y: a.bbox.y,
            w: a.bbox.w,
            h: a.bbox.h,
            conf,
            class_id: 1,
            visibility: 1.0,
        }
    }

    /// Negative class ids (the MOT "unused" marker) become class 0.
    pub fn to_detection(&self) -> Result<Detection> {
        Detection::new(self.bbox()?, self.conf, self.frame as usize - 1, self.class_id.max(0) as u32)
    }

    pub fn to_annotation(&self) -> Result<Annotation> {
        if self.id < 0 {
            return Err(Error::InvalidArgument(format!(
                "frame {}: negative id {} in a labelled file",
                self.frame, self.id
            )));
        }
        Ok(Annotation {
            frame: self.frame as usize - 1,
            id: self.id as u64,
            bbox: self.bbox()?,
        })
    }
}

/// Parses one line. A tenth field, as in legacy detection files, is
/// accepted and dropped.
pub fn parse_mot(line: &str, line_no: usize) -> Result<MotRecord> {
    let err = |message: String| Error::Parse { line: line_no, message };
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() != 9 && fields.len() != 10 {
        return Err(err(format!("expected 9 or 10 fields, found {}", fields.len())));
    }
    let int = |k: usize, name: &str| -> Result<i64> {
        fields[k].parse::<i64>().map_err(|e| err(format!("{name} '{}': {e}", fields[k])))
    };
    let real = |k: usize, name: &str| -> Result<f64> {
        let v = fields[k].parse::<f64>().map_err(|e| err(format!("{name} '{}': {e}", fields[k])))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(err(format!("{name} is not finite")))
        }
    };
    let frame = int(0, "frame")?;
    if frame < 1 {
        return Err(err(format!("frame {frame} must be >= 1")));
    }
    let rec = MotRecord {
        frame: frame as u64,
        id: int(1, "id")?,
        x: real(2, "x")?,
        y: real(3, "y")?,
        w: real(4, "w")?,
        h: real(5, "h")?,
        conf: real(6, "conf")?,
        class_id: int(7, "class")?,
        visibility: real(8, "visibility")?,
    };
    if !(rec.w > 0.0 && rec.h > 0.0) {
        return Err(err(format!("box size {}x{} must be positive", rec.w, rec.h)));
    }
    Ok(rec)
}

/// Parses a whole file body; blank lines are skipped, line numbers are 1-based.
pub fn parse_mot_text(text: &str) -> Result<Vec<MotRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_mot(l, n + 1))
        .collect()
}

pub fn mot_text(records: &[MotRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

pub fn read_mot_file(path: &Path) -> Result<Vec<MotRecord>> {
    parse_mot_text(&read(path)?).map_err(|e| in_file(path, e))
}

pub fn write_mot_file(path: &Path, records: &[MotRecord]) -> Result<()> {
    write(path, &mot_text(records))
}

/// Reads labelled boxes (ground truth or tracker output).
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    read_mot_file(path)?.iter().map(MotRecord::to_annotation).collect()
}

pub fn write_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    let recs: Vec<MotRecord> = anns.iter().map(|a| MotRecord::from_annotation(a, 1.0)).collect();
    write_mot_file(path, &recs)
}

/// `frame,det_index,f1,...,fD` with a header line; `det_index` counts
/// detections within a frame in `det.txt` order.
pub fn features_text(features: &[Vec<Vec<f64>>], dim: usize) -> String {
    let mut out = String::from("frame,det_index");
    for k in 1..=dim {
        out.push_str(&format!(",f{k}"));
    }
    out.push('\n');
    for (t, rows) in features.iter().enumerate() {
        for (i, row) in rows.iter().enumerate() {
            out.push_str(&format!("{},{i}", t + 1));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Feature rows keyed by 0-based `(frame, det_index)`.
pub type FeatureRows = BTreeMap<(usize, usize), Vec<f64>>;

/// Parsed rows plus the feature dimension.
pub fn parse_features(text: &str) -> Result<(FeatureRows, usize)> {
    let mut rows = BTreeMap::new();
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with("frame") {
            continue;
        }
        let err = |message: String| Error::Parse { line: line_no, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(err("expected frame, det_index and at least one feature".into()));
        }
        let frame: usize = fields[0].parse().map_err(|e| err(format!("frame '{}': {e}", fields[0])))?;
        if frame < 1 {
            return Err(err("frame must be >= 1".into()));
        }
        let index: usize = fields[1].parse().map_err(|e| err(format!("det_index '{}': {e}", fields[1])))?;
        let values = fields[2..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(err(format!("feature '{f}' is not finite"))),
                Err(e) => Err(err(format!("feature '{f}': {e}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(err(format!("{} features, earlier rows have {d}", values.len())));
            }
            _ => {}
        }
        if rows.insert((frame - 1, index), values).is_some() {
            return Err(err(format!("duplicate row for frame {frame}, det_index {index}")));
        }
    }
    let dim = dim.ok_or_else(|| Error::Empty("feature table has no rows".into()))?;
    Ok((rows, dim))
}

fn meta_text(seq: &SequenceData) -> String {
    format!(
        "name={}\nlength={}\nfeature_dim={}\nannotation_stride={}\n",
        seq.name, seq.length, seq.feature_dim, seq.annotation_stride
    )
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: format!("expected key=value, got '{line}'"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn write_sequence_dir(dir: &Path, seq: &SequenceData) -> Result<()> {
    seq.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let dets: Vec<MotRecord> = seq.detections.iter().flatten().map(MotRecord::from_detection).collect();
    write_mot_file(&dir.join("det.txt"), &dets)?;
    write(&dir.join("feat.csv"), &features_text(&seq.features, seq.feature_dim))?;
    write_annotations(&dir.join("gt.txt"), &seq.gt)?;
    write(&dir.join("meta.txt"), &meta_text(seq))
}

/// Loads a sequence directory. `feat.csv` is mandatory: it stands in for
/// the image crops the embedder would otherwise see.
pub fn read_sequence_dir(dir: &Path) -> Result<SequenceData> {
    let feat_path = dir.join("feat.csv");
    if !feat_path.is_file() {
        return Err(Error::Io(format!(
            "{}: missing feat.csv; appearance features are required",
            dir.display()
        )));
    }
    let det_path = dir.join("det.txt");
    let det_records = read_mot_file(&det_path)?;
    let gt_path = dir.join("gt.txt");
    let gt = if gt_path.is_file() {
        read_annotations(&gt_path)?
    } else {
        Vec::new()
    };
    let meta_path = dir.join("meta.txt");
    let meta = if meta_path.is_file() {
        parse_meta(&read(&meta_path)?).map_err(|e| in_file(&meta_path, e))?
    } else {
        BTreeMap::new()
    };
    let meta_num = |key: &str| -> Result<Option<usize>> {
        meta.get(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|e| Error::Config(format!("{}: {key} '{v}': {e}", meta_path.display())))
            })
            .transpose()
    };

    let (mut rows, dim) = parse_features(&read(&feat_path)?).map_err(|e| in_file(&feat_path, e))?;
    if let Some(d) = meta_num("feature_dim")? {
        if d != dim {
            return Err(Error::DimensionMismatch { expected: d, actual: dim });
        }
    }
    let last_frame = det_records
        .iter()
        .map(|r| r.frame as usize)
        .chain(gt.iter().map(|a| a.frame + 1))
        .max()
        .unwrap_or(0);
    let length = meta_num("length")?.unwrap_or(last_frame);
    if last_frame > length {
        return Err(Error::ShapeMismatch(format!(
            "{}: frame {last_frame} beyond sequence length {length}",
            dir.display()
        )));
    }

    let mut detections: Vec<Vec<Detection>> = vec![Vec::new(); length];
    for r in &det_records {
        detections[r.frame as usize - 1].push(r.to_detection()?);
    }
    let mut features: Vec<Vec<Vec<f64>>> = Vec::with_capacity(length);
    for (t, dets) in detections.iter().enumerate() {
        let mut frame_rows = Vec::with_capacity(dets.len());
        for i in 0..dets.len() {
            frame_rows.push(rows.remove(&(t, i)).ok_or_else(|| {
                Error::ShapeMismatch(format!("{}: no features for frame {}, detection {i}", feat_path.display(), t + 1))
            })?);
        }
        features.push(frame_rows);
    }
    if let Some(&(t, i)) = rows.keys().next() {
        return Err(Error::ShapeMismatch(format!(
            "{}: features for frame {}, detection {i} have no detection",
            feat_path.display(),
            t + 1
        )));
    }

    let name = meta.get("name").cloned().unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into())
    });
    let seq = SequenceData {
        name,
        length,
        feature_dim: dim,
        annotation_stride: meta_num("annotation_stride")?.unwrap_or(1),
        detections,
        features,
        gt,
    };
    seq.validate()?;
    Ok(seq)
}

/// Sequence directories under `dir`, sorted by name; `dir` itself when it
/// is a sequence directory.
pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("det.txt").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::Io(e.to_string()))?.path();
        if path.join("det.txt").is_file() {
            out.push(path);
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no sequence directories under {}", dir.display())));
    }
    out.sort();
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SequenceData>> {
    sequence_dirs(dir)?.iter().map(|d| read_sequence_dir(d)).collect()
}

/// Writes each sequence to `dir/<name>`.
pub fn write_dataset(dir: &Path, sequences: &[SequenceData]) -> Result<()> {
    for s in sequences {
        write_sequence_dir(&dir.join(&s.name), s)?;
    }
    Ok(())
}
