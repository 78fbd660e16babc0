//! Constant-velocity Kalman filter over `(cx, cy, w, h)`.
//!
//! Process and measurement noise scale with the current box size.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub type StateVector = SVector<f64, 8>;
pub type StateMatrix = SMatrix<f64, 8, 8>;

/// Smallest width/height the filter will report.
pub const MIN_EXTENT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVector,
    pub covariance: StateMatrix,
}

impl KalmanState {
    pub fn bbox(&self) -> BBox {
        let w = self.mean[2].max(MIN_EXTENT);
        let h = self.mean[3].max(MIN_EXTENT);
        BBox {
            x: self.mean[0] - w / 2.0,
            y: self.mean[1] - h / 2.0,
            w,
            h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanFilter {
    pub std_weight_position: f64,
    pub std_weight_velocity: f64,
    /// Multiplier on the measurement noise std.
    pub measurement_weight: f64,
}

impl Default for KalmanFilter {
    fn default() -> Self {
        KalmanFilter {
            std_weight_position: 1.0 / 20.0,
            std_weight_velocity: 1.0 / 160.0,
            measurement_weight: 1.0,
        }
    }
}

fn observation() -> SMatrix<f64, 4, 8> {
    SMatrix::<f64, 4, 8>::from_fn(|r, c| if r == c { 1.0 } else { 0.0 })
}

fn transition() -> StateMatrix {
    let mut f = StateMatrix::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn clamp_extent(mean: &mut StateVector) {
    mean[2] = mean[2].max(MIN_EXTENT);
    mean[3] = mean[3].max(MIN_EXTENT);
}

impl KalmanFilter {
    pub fn initiate(&self, b: &BBox) -> KalmanState {
        let (cx, cy) = b.center();
        let mean = StateVector::from_column_slice(&[cx, cy, b.w, b.h, 0.0, 0.0, 0.0, 0.0]);
        let (p, v) = (self.std_weight_position, self.std_weight_velocity);
        let std = [
            2.0 * p * b.w,
            2.0 * p * b.h,
            2.0 * p * b.w,
            2.0 * p * b.h,
            10.0 * v * b.w,
            10.0 * v * b.h,
            10.0 * v * b.w,
            10.0 * v * b.h,
        ];
        KalmanState {
            mean,
            covariance: StateMatrix::from_diagonal(&StateVector::from_fn(|i, _| std[i] * std[i])),
        }
    }

    pub fn process_noise(&self, mean: &StateVector) -> StateMatrix {
        let (w, h) = (mean[2], mean[3]);
        let (p, v) = (self.std_weight_position, self.std_weight_velocity);
        let std = [p * w, p * h, p * w, p * h, v * w, v * h, v * w, v * h];
        StateMatrix::from_diagonal(&StateVector::from_fn(|i, _| std[i] * std[i]))
    }

    pub fn measurement_noise(&self, mean: &StateVector) -> SMatrix<f64, 4, 4> {
        let (w, h) = (mean[2], mean[3]);
        let p = self.std_weight_position * self.measurement_weight;
        let std = [p * w, p * h, p * w, p * h];
        SMatrix::<f64, 4, 4>::from_diagonal(&SVector::<f64, 4>::from_fn(|i, _| std[i] * std[i]))
    }

    pub fn predict(&self, s: &KalmanState) -> KalmanState {
        let f = transition();
        let q = self.process_noise(&s.mean);
        let mut mean = f * s.mean;
        clamp_extent(&mut mean);
        let cov = f * s.covariance * f.transpose() + q;
        KalmanState {
            mean,
            covariance: (cov + cov.transpose()) * 0.5,
        }
    }

    pub fn update(&self, s: &KalmanState, measurement: &BBox) -> Result<KalmanState> {
        measurement.validate().map_err(|_| Error::NonFinite(format!("measurement {measurement:?}")))?;
        let h = observation();
        let (cx, cy) = measurement.center();
        let z = SVector::<f64, 4>::new(cx, cy, measurement.w, measurement.h);
        let innovation_cov = h * s.covariance * h.transpose() + self.measurement_noise(&s.mean);
        let inv = innovation_cov
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("singular innovation covariance".into()))?;
        let gain = s.covariance * h.transpose() * inv;
        let mut mean = s.mean + gain * (z - h * s.mean);
        clamp_extent(&mut mean);
        let cov = s.covariance - gain * innovation_cov * gain.transpose();
        Ok(KalmanState {
            mean,
            covariance: (cov + cov.transpose()) * 0.5,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::from_center(cx, cy, w, h).unwrap()
    }

    #[test]
    fn predict_examples() {
        let kf = KalmanFilter::default();
        let s = kf.initiate(&bx(50.0, 60.0, 20.0, 40.0));
        let p = kf.predict(&s);
        assert_eq!(p.mean.fixed_rows::<4>(0), s.mean.fixed_rows::<4>(0));

        let mut moving = s.clone();
        moving.mean[4] = 1.0;
        let p = kf.predict(&moving);
        assert_eq!(p.mean[0], 51.0);
        assert_eq!(p.mean[1], 60.0);
    }

    #[test]
    fn update_examples() {
        let kf = KalmanFilter::default();
        let s = kf.predict(&kf.initiate(&bx(50.0, 60.0, 20.0, 40.0)));
        let same = kf.update(&s, &s.bbox()).unwrap();
        for i in 0..8 {
            assert!((same.mean[i] - s.mean[i]).abs() < 1e-12);
        }

        let sharp = KalmanFilter {
            measurement_weight: 1e-6,
            ..KalmanFilter::default()
        };
        let m = bx(55.0, 58.0, 22.0, 41.0);
        let u = sharp.update(&s, &m).unwrap();
        assert!((u.mean[0] - 55.0).abs() < 1e-6);
        assert!((u.mean[1] - 58.0).abs() < 1e-6);
        assert!((u.mean[2] - 22.0).abs() < 1e-6);
        assert!((u.mean[3] - 41.0).abs() < 1e-6);
        let bad = BBox {
            x: f64::NAN,
            y: 0.0,
            w: 1.0,
            h: 1.0,
        };
        assert!(kf.update(&s, &bad).is_err());
    }

    #[test]
    fn tracks_constant_velocity() {
        let kf = KalmanFilter::default();
        let truth = |t: usize| bx(100.0 + 3.0 * t as f64, 80.0 - 2.0 * t as f64, 30.0, 60.0);
        let mut s = kf.initiate(&truth(0));
        let mut prev = f64::INFINITY;
        for t in 1..60 {
            s = kf.predict(&s);
            if t > 10 {
                let (cx, cy) = truth(t).center();
                let err = (s.mean[0] - cx).hypot(s.mean[1] - cy);
                assert!(err < prev, "frame {t}");
                assert!(t < 30 || err < 0.05, "frame {t}");
                prev = err;
            }
            s = kf.update(&s, &truth(t)).unwrap();
        }
    }

    // Textbook filter on plain arrays: K = P H' S^-1, x += K y, P = (I - K H) P.
    struct Reference {
        x: Vec<f64>,
        p: Vec<Vec<f64>>,
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (n, k, m) = (a.len(), b.len(), b[0].len());
        (0..n).map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
    }

    fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
    }

    fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for c in 0..n {
            let piv = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            m.swap(c, piv);
            let d = m[c][c];
            m[c].iter_mut().for_each(|v| *v /= d);
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    let pivot_row = m[c].clone();
                    m[r].iter_mut().zip(pivot_row).for_each(|(v, p)| *v -= f * p);
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    impl Reference {
        fn predict(&mut self, kf: &KalmanFilter) {
            let (w, h) = (self.x[2], self.x[3]);
            let (sp, sv) = (kf.std_weight_position, kf.std_weight_velocity);
            let q = [sp * w, sp * h, sp * w, sp * h, sv * w, sv * h, sv * w, sv * h];
            let f: Vec<Vec<f64>> = (0..8)
                .map(|i| (0..8).map(|j| if i == j || j == i + 4 { 1.0 } else { 0.0 }).collect())
                .collect();
            self.x = (0..8).map(|i| (0..8).map(|j| f[i][j] * self.x[j]).sum()).collect();
            let mut p = matmul(&matmul(&f, &self.p), &transpose(&f));
            for i in 0..8 {
                p[i][i] += q[i] * q[i];
            }
            self.p = p;
        }

        fn update(&mut self, kf: &KalmanFilter, z: [f64; 4]) {
            let (w, h) = (self.x[2], self.x[3]);
            let sp = kf.std_weight_position * kf.measurement_weight;
            let r = [sp * w, sp * h, sp * w, sp * h];
            let hm: Vec<Vec<f64>> = (0..4).map(|i| (0..8).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
            let mut s = matmul(&matmul(&hm, &self.p), &transpose(&hm));
            for i in 0..4 {
                s[i][i] += r[i] * r[i];
            }
            let k = matmul(&matmul(&self.p, &transpose(&hm)), &invert(&s));
            let y: Vec<f64> = (0..4).map(|i| z[i] - self.x[i]).collect();
            for i in 0..8 {
                self.x[i] += (0..4).map(|j| k[i][j] * y[j]).sum::<f64>();
            }
            let kh = matmul(&k, &hm);
            let ikh: Vec<Vec<f64>> = (0..8)
                .map(|i| (0..8).map(|j| if i == j { 1.0 } else { 0.0 } - kh[i][j]).collect())
                .collect();
            self.p = matmul(&ikh, &self.p);
        }
    }

    #[test]
    fn matches_reference_filter() {
        let kf = KalmanFilter::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let first = bx(rng.random_range(50.0..400.0), rng.random_range(50.0..400.0), rng.random_range(20.0..60.0), rng.random_range(40.0..120.0));
            let mut s = kf.initiate(&first);
            let mut r = Reference {
                x: s.mean.iter().copied().collect(),
                p: (0..8).map(|i| (0..8).map(|j| s.covariance[(i, j)]).collect()).collect(),
            };
            let (mut cx, mut cy) = first.center();
            for _ in 0..30 {
                s = kf.predict(&s);
                r.predict(&kf);
                cx += rng.random_range(-4.0..4.0);
                cy += rng.random_range(-4.0..4.0);
                let m = bx(cx, cy, first.w * rng.random_range(0.9..1.1), first.h * rng.random_range(0.9..1.1));
                s = kf.update(&s, &m).unwrap();
                r.update(&kf, [cx, cy, m.w, m.h]);
                for i in 0..8 {
                    assert!((s.mean[i] - r.x[i]).abs() < 1e-9 * r.x[i].abs().max(1.0));
                    for j in 0..8 {
                        let scale = r.p[i][j].abs().max(1.0);
                        assert!((s.covariance[(i, j)] - r.p[i][j]).abs() < 1e-9 * scale);
                    }
                }
                assert!((s.covariance - s.covariance.transpose()).abs().max() < 1e-9);
                assert!(s.mean[2] > 0.0 && s.mean[3] > 0.0);
            }
        }
    }
}
