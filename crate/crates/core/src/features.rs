//! Frame metadata to normalized 4-D feature vectors, plus the weighted
//! ground metric and pairwise distance matrices.
//!
//! A frame contributes four coordinates: elapsed time (seconds), a min-max
//! projection of its planar pose onto `[-1, 1]^2`, and its normalized
//! sequential position in the manifest. Distances between features are a
//! weighted Euclidean metric; the default weights prioritize temporal spread.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

/// Microseconds per second; temporal normalization divisor.
pub const TIME_SCALE_US: f64 = 1.0e6;

/// Hard cap on manifest size: the distance matrix is dense `n x n`.
pub const MAX_FRAMES: usize = 20_000;

/// One multi-agent capture's metadata as ingested from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    /// Unique id within a manifest.
    pub id: String,
    /// Timestamp in microseconds; must be non-negative.
    pub t_us: i64,
    /// Pose (x, y, z) in meters.
    pub pose: [f64; 3],
    /// Optional path to the sensor payload; never decoded here.
    pub payload_path: Option<String>,
}

impl FrameRecord {
    pub fn new(id: impl Into<String>, t_us: i64, pose: [f64; 3]) -> Self {
        Self {
            id: id.into(),
            t_us,
            pose,
            payload_path: None,
        }
    }
}

/// Normalized 4-D spatio-temporal embedding of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    /// Normalized time, unitless, `>= 0`.
    pub f_t: f64,
    /// Projected x in `[-1, 1]`.
    pub f_x: f64,
    /// Projected y in `[-1, 1]`.
    pub f_y: f64,
    /// Sequential position in `(0, 1]` (1-based index over n).
    pub f_s: f64,
}

impl FeatureVector {
    pub fn new(f_t: f64, f_x: f64, f_y: f64, f_s: f64) -> Self {
        Self { f_t, f_x, f_y, f_s }
    }

    #[inline]
    pub fn coords(&self) -> [f64; 4] {
        [self.f_t, self.f_x, self.f_y, self.f_s]
    }
}

/// Per-coordinate weights of the ground metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightVector {
    pub w_t: f64,
    pub w_x: f64,
    pub w_y: f64,
    pub w_s: f64,
}

impl WeightVector {
    pub fn new(w_t: f64, w_x: f64, w_y: f64, w_s: f64) -> Self {
        Self { w_t, w_x, w_y, w_s }
    }

    #[inline]
    pub fn coords(&self) -> [f64; 4] {
        [self.w_t, self.w_x, self.w_y, self.w_s]
    }

    /// All weights non-negative, at least one strictly positive, all finite.
    pub fn is_valid(&self) -> bool {
        let c = self.coords();
        c.iter().all(|w| w.is_finite() && *w >= 0.0) && c.iter().any(|w| *w > 0.0)
    }
}

/// Default weights: temporal diversity first, then spatial coverage, then
/// sequential ordering.
impl Default for WeightVector {
    fn default() -> Self {
        Self::new(2.0, 1.0, 1.0, 0.5)
    }
}

/// How the temporal coordinate is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimestampMode {
    /// Seconds since the earliest frame (default).
    #[default]
    Relative,
    /// Seconds since the epoch of the raw timestamps.
    Absolute,
}

/// Dense symmetric pairwise-distance matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Wraps a full row-major `n x n` buffer. Panics if the length is wrong.
    pub fn from_raw(n: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), n * n, "distance matrix buffer length");
        Self { n, entries }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureError {
    /// No frames were supplied.
    EmptyDataset,
    /// A record carries a non-finite timestamp or pose; payload is the id.
    InvalidRecord(String),
    /// Manifest exceeds the dense-matrix budget.
    TooManyFrames { n: usize, max: usize },
}

impl fmt::Display for FeatureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureError::EmptyDataset => write!(f, "empty dataset: no frames supplied"),
            FeatureError::InvalidRecord(id) => {
                write!(f, "invalid record `{id}`: non-finite timestamp or pose")
            }
            FeatureError::TooManyFrames { n, max } => {
                write!(f, "manifest has {n} frames, above the {max}-frame limit")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FeatureError {}

/// Extracts feature vectors in manifest order, relative timestamp mode.
pub fn extract_features(frames: &[FrameRecord]) -> Result<Vec<FeatureVector>, FeatureError> {
    extract_features_mode(frames, TimestampMode::Relative)
}

/// Extracts feature vectors in manifest order.
///
/// * `f_t` — `(t_us - min t_us) / 1e6` in relative mode, `t_us / 1e6` in
///   absolute mode.
/// * `(f_x, f_y)` — dataset-wide min-max projection of pose (x, y) onto
///   `[-1, 1]^2`; a coordinate with zero range maps to 0.
/// * `f_s` — `i / n` with `i` the 1-based manifest position.
pub fn extract_features_mode(
    frames: &[FrameRecord],
    mode: TimestampMode,
) -> Result<Vec<FeatureVector>, FeatureError> {
    if frames.is_empty() {
        return Err(FeatureError::EmptyDataset);
    }
    for rec in frames {
        if rec.t_us < 0 || rec.pose.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidRecord(rec.id.clone()));
        }
    }

    let n = frames.len();
    let t_min = frames.iter().map(|r| r.t_us).min().expect("non-empty");
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for rec in frames {
        x_min = x_min.min(rec.pose[0]);
        x_max = x_max.max(rec.pose[0]);
        y_min = y_min.min(rec.pose[1]);
        y_max = y_max.max(rec.pose[1]);
    }

    let project = |v: f64, lo: f64, hi: f64| -> f64 {
        if hi > lo {
            2.0 * (v - lo) / (hi - lo) - 1.0
        } else {
            0.0
        }
    };

    let mut out = Vec::with_capacity(n);
    for (idx, rec) in frames.iter().enumerate() {
        let f_t = match mode {
            TimestampMode::Relative => (rec.t_us - t_min) as f64 / TIME_SCALE_US,
            TimestampMode::Absolute => rec.t_us as f64 / TIME_SCALE_US,
        };
        out.push(FeatureVector::new(
            f_t,
            project(rec.pose[0], x_min, x_max),
            project(rec.pose[1], y_min, y_max),
            (idx + 1) as f64 / n as f64,
        ));
    }
    Ok(out)
}

/// Weighted Euclidean ground distance between two feature vectors.
///
/// Summation order is fixed (t, x, y, s) so equal calls are bit-identical;
/// `d(a, b) == d(b, a)` exactly because `(a-b)^2 == (b-a)^2` in IEEE 754.
#[inline]
pub fn weighted_distance(a: &FeatureVector, b: &FeatureVector, w: &WeightVector) -> f64 {
    let fa = a.coords();
    let fb = b.coords();
    let wc = w.coords();
    let mut acc = 0.0;
    for k in 0..4 {
        let d = fa[k] - fb[k];
        acc += wc[k] * d * d;
    }
    math::sqrt(acc)
}

/// Full pairwise distance matrix; each unordered pair is computed once and
/// mirrored, so symmetry and the zero diagonal hold bit-exactly.
pub fn distance_matrix(
    features: &[FeatureVector],
    w: &WeightVector,
) -> Result<DistanceMatrix, FeatureError> {
    let n = features.len();
    if n == 0 {
        return Err(FeatureError::EmptyDataset);
    }
    if n > MAX_FRAMES {
        return Err(FeatureError::TooManyFrames { n, max: MAX_FRAMES });
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = weighted_distance(&features[i], &features[j], w);
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, entries })
}

/// Manifest-derived distances; convenience composition used by the selector.
pub fn frames_to_matrix(
    frames: &[FrameRecord],
    w: &WeightVector,
    mode: TimestampMode,
) -> Result<(Vec<FeatureVector>, DistanceMatrix), FeatureError> {
    let feats = extract_features_mode(frames, mode)?;
    let dm = distance_matrix(&feats, w)?;
    Ok((feats, dm))
}

pub(crate) fn frame_id(idx: usize) -> String {
    format!("frame_{idx:06}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rec(id: &str, t_us: i64, x: f64, y: f64) -> FrameRecord {
        FrameRecord::new(id, t_us, [x, y, 0.0])
    }

    #[test]
    fn default_weights_match_ground_metric() {
        let w = WeightVector::default();
        assert_eq!(w.coords(), [2.0, 1.0, 1.0, 0.5]);
        assert!(w.is_valid());
    }

    #[test]
    fn two_frame_normalization() {
        let frames = [rec("a", 0, 0.0, 0.0), rec("b", 1_000_000, 10.0, 0.0)];
        let f = extract_features(&frames).unwrap();
        assert_eq!(f[0].coords(), [0.0, -1.0, 0.0, 0.5]);
        assert_eq!(f[1].coords(), [1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn single_frame_degenerates_to_origin() {
        let frames = [rec("only", 123, 4.0, 5.0)];
        let f = extract_features(&frames).unwrap();
        assert_eq!(f[0].coords(), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn absolute_mode_keeps_epoch() {
        let frames = [rec("a", 2_000_000, 0.0, 0.0), rec("b", 3_000_000, 1.0, 0.0)];
        let f = extract_features_mode(&frames, TimestampMode::Absolute).unwrap();
        assert_eq!(f[0].f_t, 2.0);
        assert_eq!(f[1].f_t, 3.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert_eq!(extract_features(&[]), Err(FeatureError::EmptyDataset));
    }

    #[test]
    fn non_finite_pose_is_rejected() {
        let frames = [rec("ok", 0, 0.0, 0.0), rec("bad", 1, f64::NAN, 0.0)];
        assert_eq!(
            extract_features(&frames),
            Err(FeatureError::InvalidRecord("bad".into()))
        );
    }

    #[test]
    fn negative_timestamp_is_rejected() {
        let frames = [rec("neg", -1, 0.0, 0.0)];
        assert!(matches!(
            extract_features(&frames),
            Err(FeatureError::InvalidRecord(_))
        ));
    }

    #[test]
    fn weighted_distance_identity_and_examples() {
        let w = WeightVector::default();
        let zero = FeatureVector::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(weighted_distance(&zero, &zero, &w), 0.0);

        let t1 = FeatureVector::new(1.0, 0.0, 0.0, 0.0);
        assert!((weighted_distance(&zero, &t1, &w) - 2.0f64.sqrt()).abs() < 1e-12);

        let ones = FeatureVector::new(1.0, 1.0, 1.0, 1.0);
        assert!((weighted_distance(&zero, &ones, &w) - 4.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distance_matrix_single_entry() {
        let f = [FeatureVector::new(0.0, 0.0, 0.0, 1.0)];
        let dm = distance_matrix(&f, &WeightVector::default()).unwrap();
        assert_eq!(dm.n(), 1);
        assert_eq!(dm.get(0, 0), 0.0);
    }

    #[test]
    fn distance_matrix_line_example() {
        // Only f_t varies as {0, 1, 10}; w = [1, 0, 0, 0] makes distances
        // absolute time differences.
        let f = [
            FeatureVector::new(0.0, 0.0, 0.0, 0.0),
            FeatureVector::new(1.0, 0.0, 0.0, 0.0),
            FeatureVector::new(10.0, 0.0, 0.0, 0.0),
        ];
        let w = WeightVector::new(1.0, 0.0, 0.0, 0.0);
        let dm = distance_matrix(&f, &w).unwrap();
        let expected = [[0.0, 1.0, 10.0], [1.0, 0.0, 9.0], [10.0, 9.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(dm.get(i, j), expected[i][j]);
            }
        }
    }

    fn random_features(n: usize, seed: u64) -> Vec<FeatureVector> {
        let mut rng = crate::rng::derive(seed, 99);
        (0..n)
            .map(|i| {
                FeatureVector::new(
                    rng.gen_range(0.0..5.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    (i + 1) as f64 / n as f64,
                )
            })
            .collect()
    }

    #[test]
    fn random_matrix_passes_triangle_scan() {
        // Independent oracle: exhaustive scan over all ordered triples.
        let feats = random_features(50, 7);
        let w = WeightVector::default();
        let dm = distance_matrix(&feats, &w).unwrap();
        let n = dm.n();
        for a in 0..n {
            assert_eq!(dm.get(a, a), 0.0);
            for b in 0..n {
                assert_eq!(dm.get(a, b).to_bits(), dm.get(b, a).to_bits());
                for c in 0..n {
                    let scale = dm.get(a, c).max(dm.get(a, b)).max(dm.get(b, c));
                    assert!(dm.get(a, c) <= dm.get(a, b) + dm.get(b, c) + 1e-12 * scale);
                }
            }
        }
    }

    #[test]
    fn normalization_bounds_hold_for_wild_inputs() {
        let mut rng = crate::rng::derive(3, 98);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let frames: Vec<FrameRecord> = (0..n)
                .map(|i| {
                    rec(
                        &frame_id(i),
                        rng.gen_range(0..10_000_000_000_i64),
                        rng.gen_range(-1.0e6..1.0e6),
                        rng.gen_range(-1.0e6..1.0e6),
                    )
                })
                .collect();
            for f in extract_features(&frames).unwrap() {
                assert!(f.f_t >= 0.0 && f.f_t.is_finite());
                assert!((-1.0..=1.0).contains(&f.f_x));
                assert!((-1.0..=1.0).contains(&f.f_y));
                assert!(f.f_s > 0.0 && f.f_s <= 1.0);
            }
        }
    }

    #[test]
    fn weight_scaling_scales_distances_by_sqrt() {
        let feats = random_features(20, 11);
        let w = WeightVector::default();
        let c = 3.7;
        let wc = WeightVector::new(c * w.w_t, c * w.w_x, c * w.w_y, c * w.w_s);
        for i in 0..feats.len() {
            for j in 0..feats.len() {
                let d = weighted_distance(&feats[i], &feats[j], &w);
                let dc = weighted_distance(&feats[i], &feats[j], &wc);
                assert!((dc - c.sqrt() * d).abs() <= 1e-12 * dc.max(1.0));
            }
        }
    }
}
