use crate::geometry::BBox;

/// One track's boxes, frames strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackHistory {
    pub track_id: u64,
    pub boxes: Vec<(usize, BBox)>,
}

/// Fills runs of at most `max_gap` missing frames by linear interpolation
/// of each box coordinate. Longer gaps are left untouched.
pub fn interpolate_tracks(tracks: &[TrackHistory], max_gap: usize) -> Vec<TrackHistory> {
    tracks
        .iter()
        .map(|t| {
            let mut boxes = Vec::with_capacity(t.boxes.len());
            for (k, &(f, b)) in t.boxes.iter().enumerate() {
                if let Some(&(pf, pb)) = k.checked_sub(1).map(|p| &t.boxes[p]) {
                    let missing = f - pf - 1;
                    if missing > 0 && missing <= max_gap {
                        let span = (f - pf) as f64;
                        for g in pf + 1..f {
                            let a = (g - pf) as f64 / span;
                            let lerp = |u: f64, v: f64| u + a * (v - u);
                            boxes.push((
                                g,
                                BBox {
                                    x: lerp(pb.x, b.x),
                                    y: lerp(pb.y, b.y),
                                    w: lerp(pb.w, b.w),
                                    h: lerp(pb.h, b.h),
                                },
                            ));
                        }
                    }
                }
                boxes.push((f, b));
            }
            TrackHistory {
                track_id: t.track_id,
                boxes,
            }
        })
        .collect()
}
