//! Medoid-initialized farthest-first greedy selection and coverage radii.
//!
//! The selector starts from the sample whose mean distance to all others is
//! closest to the median of mean distances, then repeatedly adds the point
//! farthest from the current selection, maintaining the running
//! min-distance-to-selection vector `r` so the loop is `O(n * m)`. All ties
//! break toward the lowest index, which makes selections deterministic.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;

use crate::features::{
    frames_to_matrix, DistanceMatrix, FeatureError, FrameRecord, TimestampMode, WeightVector,
};
use crate::rng;

/// Ordered selection with its coverage-radius trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selected frame indices in selection order.
    pub indices: Vec<usize>,
    /// `max_i min_{j in S} D[i][j]` for the final selection.
    pub coverage_radius: f64,
    /// Residual radius after each selection step; non-increasing.
    pub radius_trace: Vec<f64>,
    /// Budget; equals `indices.len()`.
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectError {
    /// Budget outside `1..=n`.
    InvalidBudget { m: usize, n: usize },
    /// Empty subset handed to a coverage query.
    InvalidSubset,
    /// Selection ratio outside `(0, 1]`.
    InvalidRatio(f64),
    /// Feature extraction failed.
    Feature(FeatureError),
}

impl fmt::Display for SelectError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectError::InvalidBudget { m, n } => {
                write!(f, "invalid budget m={m} for n={n} samples")
            }
            SelectError::InvalidSubset => write!(f, "subset must be non-empty"),
            SelectError::InvalidRatio(a) => {
                write!(f, "selection ratio {a} outside (0, 1]")
            }
            SelectError::Feature(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SelectError {}

impl From<FeatureError> for SelectError {
    fn from(e: FeatureError) -> Self {
        SelectError::Feature(e)
    }
}

/// Greedy farthest-first selection with medoid initialization.
///
/// Step 1 picks `argmin_i |mu_i - median(mu)|` where `mu_i` is the mean of
/// row `i` (median = lower of the two middles for even `n`). Steps `2..m`
/// pick `argmax_{i not in S} r_i` and fold `r <- min(r, D[s*, :])`.
pub fn wgs_select(d: &DistanceMatrix, m: usize) -> Result<SelectionResult, SelectError> {
    let n = d.n();
    if m == 0 || m > n {
        return Err(SelectError::InvalidBudget { m, n });
    }

    let mut mu = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += d.get(i, j);
        }
        mu.push(acc / n as f64);
    }
    let mut sorted = mu.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let median = sorted[(n - 1) / 2];

    let mut s1 = 0;
    let mut best = f64::INFINITY;
    for (i, &m_i) in mu.iter().enumerate() {
        let gap = crate::math::abs(m_i - median);
        if gap < best {
            best = gap;
            s1 = i;
        }
    }

    let mut selected = vec![false; n];
    let mut indices = Vec::with_capacity(m);
    let mut r: Vec<f64> = d.row(s1).to_vec();
    selected[s1] = true;
    indices.push(s1);

    let mut radius_trace = Vec::with_capacity(m);
    radius_trace.push(max_entry(&r));

    while indices.len() < m {
        let mut star = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (i, &ri) in r.iter().enumerate() {
            if !selected[i] && ri > far {
                far = ri;
                star = i;
            }
        }
        selected[star] = true;
        indices.push(star);
        let row = d.row(star);
        for (ri, &di) in r.iter_mut().zip(row) {
            if di < *ri {
                *ri = di;
            }
        }
        radius_trace.push(max_entry(&r));
    }

    let coverage_radius = *radius_trace.last().expect("m >= 1");
    Ok(SelectionResult {
        indices,
        coverage_radius,
        radius_trace,
        m,
    })
}

fn max_entry(r: &[f64]) -> f64 {
    let mut best = 0.0;
    for &v in r {
        if v > best {
            best = v;
        }
    }
    best
}

/// `max_i min_{j in subset} D[i][j]`.
pub fn coverage_radius(d: &DistanceMatrix, subset: &[usize]) -> Result<f64, SelectError> {
    if subset.is_empty() {
        return Err(SelectError::InvalidSubset);
    }
    let n = d.n();
    if subset.iter().any(|&j| j >= n) {
        return Err(SelectError::InvalidSubset);
    }
    let mut radius = 0.0;
    for i in 0..n {
        let mut nearest = f64::INFINITY;
        for &j in subset {
            let dij = d.get(i, j);
            if dij < nearest {
                nearest = dij;
            }
        }
        if nearest > radius {
            radius = nearest;
        }
    }
    Ok(radius)
}

/// Builds a [`SelectionResult`] for an externally chosen ordered selection,
/// reusing the same residual-vector machinery as the greedy loop so the
/// radius trace semantics match.
pub fn selection_with_trace(
    d: &DistanceMatrix,
    ordered: &[usize],
) -> Result<SelectionResult, SelectError> {
    let n = d.n();
    if ordered.is_empty() || ordered.len() > n {
        return Err(SelectError::InvalidBudget {
            m: ordered.len(),
            n,
        });
    }
    let mut seen = vec![false; n];
    for &i in ordered {
        if i >= n || seen[i] {
            return Err(SelectError::InvalidSubset);
        }
        seen[i] = true;
    }

    let mut r: Vec<f64> = d.row(ordered[0]).to_vec();
    let mut radius_trace = Vec::with_capacity(ordered.len());
    radius_trace.push(max_entry(&r));
    for &s in &ordered[1..] {
        let row = d.row(s);
        for (ri, &di) in r.iter_mut().zip(row) {
            if di < *ri {
                *ri = di;
            }
        }
        radius_trace.push(max_entry(&r));
    }
    Ok(SelectionResult {
        indices: ordered.to_vec(),
        coverage_radius: *radius_trace.last().expect("non-empty"),
        radius_trace,
        m: ordered.len(),
    })
}

/// Seeded uniform selection without replacement.
///
/// Draws one permutation per seed and takes its first `m` entries, so a
/// larger budget under the same seed always extends the smaller selection
/// (the sweep monotonicity property relies on this prefix structure).
pub fn random_select(
    d: &DistanceMatrix,
    m: usize,
    seed: u64,
) -> Result<SelectionResult, SelectError> {
    let n = d.n();
    if m == 0 || m > n {
        return Err(SelectError::InvalidBudget { m, n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = rng::derive(seed, rng::stream::SELECTION);
    perm.shuffle(&mut rng);
    selection_with_trace(d, &perm[..m])
}

/// Fixed temporal stride over manifest order: index `floor(j * n / m)` for
/// `j = 0..m`.
pub fn uniform_select(d: &DistanceMatrix, m: usize) -> Result<SelectionResult, SelectError> {
    let n = d.n();
    if m == 0 || m > n {
        return Err(SelectError::InvalidBudget { m, n });
    }
    let ordered: Vec<usize> = (0..m).map(|j| j * n / m).collect();
    selection_with_trace(d, &ordered)
}

/// Budget for a selection ratio: `floor(alpha * n)`, clamped to at least 1.
pub fn budget_for_ratio(n: usize, alpha: f64) -> Result<usize, SelectError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SelectError::InvalidRatio(alpha));
    }
    let m = crate::math::floor(alpha * n as f64) as usize;
    Ok(m.clamp(1, n))
}

/// Full ratio-driven pipeline: features, distances, then greedy selection.
pub fn select_ratio(
    frames: &[FrameRecord],
    alpha: f64,
    w: &WeightVector,
) -> Result<SelectionResult, SelectError> {
    select_ratio_mode(frames, alpha, w, TimestampMode::Relative)
}

/// [`select_ratio`] with an explicit timestamp normalization mode.
pub fn select_ratio_mode(
    frames: &[FrameRecord],
    alpha: f64,
    w: &WeightVector,
    mode: TimestampMode,
) -> Result<SelectionResult, SelectError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SelectError::InvalidRatio(alpha));
    }
    let (_feats, dm) = frames_to_matrix(frames, w, mode)?;
    let m = budget_for_ratio(dm.n(), alpha)?;
    wgs_select(&dm, m)
}
