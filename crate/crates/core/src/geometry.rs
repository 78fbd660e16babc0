//! Axis-aligned boxes, IoU, confidence partitioning and IoU clusters.
//!
//! Boxes use the MOT convention: `(x, y)` is the top-left corner, `w`/`h`
//! are strictly positive extents in pixels.

use crate::error::{Error, Result};

/// Axis-aligned box `(x, y, w, h)` with a top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinates {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("non-positive extent {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub frame: usize,
    pub class_id: u32,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64, frame: usize, class_id: u32) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Detection {
            bbox,
            confidence,
            frame,
            class_id,
        })
    }
}

/// Nodes whose IoU with `anchor` reaches the clustering threshold.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Cluster {
    pub anchor: usize,
    /// Sorted ascending, contains `anchor`.
    pub members: Vec<usize>,
}

impl Cluster {
    pub fn singleton(anchor: usize) -> Self {
        Cluster {
            anchor,
            members: vec![anchor],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.binary_search(&index).is_ok()
    }
}

/// Intersection over union. Symmetric by construction: the intersection is
/// computed from order-independent min/max and the union sums both areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Splits detections into `conf >= high`, `low <= conf < high` and the rest,
/// preserving input order within each list.
pub fn partition_by_confidence(
    dets: &[Detection],
    beta_high: f64,
    beta_low: f64,
) -> Result<(Vec<Detection>, Vec<Detection>, Vec<Detection>)> {
    let (high, low, rest) = partition_indices_by_confidence(dets, beta_high, beta_low)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| dets[i]).collect::<Vec<_>>();
    Ok((pick(high), pick(low), pick(rest)))
}

/// Index form of [`partition_by_confidence`].
pub fn partition_indices_by_confidence(
    dets: &[Detection],
    beta_high: f64,
    beta_low: f64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if beta_low > beta_high {
        return Err(Error::InvalidArgument(format!(
            "beta_low {beta_low} exceeds beta_high {beta_high}"
        )));
    }
    let mut high = Vec::new();
    let mut low = Vec::new();
    let mut rest = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        if d.confidence >= beta_high {
            high.push(i);
        } else if d.confidence >= beta_low {
            low.push(i);
        } else {
            rest.push(i);
        }
    }
    Ok((high, low, rest))
}

/// Anchor-relative cluster: every box whose IoU with `boxes[anchor]` is at
/// least `alpha1`. Not a transitive closure.
pub fn cluster_of(anchor: usize, boxes: &[BBox], alpha1: f64) -> Result<Cluster> {
    if anchor >= boxes.len() {
        return Err(Error::IndexOutOfRange {
            index: anchor,
            len: boxes.len(),
        });
    }
    if !(alpha1 > 0.0 && alpha1 <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha1 {alpha1} outside (0, 1]")));
    }
    let a = &boxes[anchor];
    let members = boxes
        .iter()
        .enumerate()
        .filter(|&(j, b)| j == anchor || iou(a, b) >= alpha1)
        .map(|(j, _)| j)
        .collect();
    Ok(Cluster { anchor, members })
}
