//! Exact small-instance references for the greedy selector.
//!
//! Three oracles live here: a brute-force k-center solver (enumerates every
//! m-subset), exact bottleneck transport `W_inf` (binary search over cost
//! thresholds with max-flow feasibility), and exact `W_p` for `p` in {1, 2}
//! (min-cost flow on integer mass units). None of them share code with the
//! greedy path they check.
//!
//! Transport instances carry explicit integer mass units. Two constructions
//! are provided: [`TransportInstance::uniform`] puts mass `L/n` and `L/m`
//! (`L = lcm(n, m)`) on sources and targets, and
//! [`TransportInstance::nearest_pushforward`] weights each target by the
//! size of its nearest-neighbor cell. The coverage-radius bound
//! `W_inf <= R` is a theorem for the pushforward measure (route every point
//! to its nearest selected center); for uniform target masses it can fail
//! whenever cells are unbalanced, which `winf_uniform_exceeds_radius_on_line`
//! below pins down. Bound reports therefore use the pushforward measure and
//! record the uniform value alongside it.

mod flow;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::features::{distance_matrix, DistanceMatrix, FeatureVector, WeightVector};
use crate::math;
use crate::rng;
use crate::sampler::{wgs_select, SelectError};

use flow::FlowGraph;

/// Maximum subsets the brute-force k-center solver will enumerate.
pub const KCENTER_BUDGET: u64 = 200_000;
/// Maximum cost-matrix entries for the min-cost-flow oracle.
pub const WP_BUDGET: usize = 10_000;
/// Maximum scaled mass units per instance.
pub const MASS_BUDGET: i64 = 1_000_000;

/// Absolute slack used by the bound checks.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    /// A combinatorial or mass budget was exceeded; payload explains which.
    InstanceTooLarge(String),
    /// Selection failed while preparing the instance.
    Select(SelectError),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::InstanceTooLarge(what) => write!(f, "instance too large: {what}"),
            OracleError::Select(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for OracleError {}

impl From<SelectError> for OracleError {
    fn from(e: SelectError) -> Self {
        OracleError::Select(e)
    }
}

/// Wasserstein order supported by the exact solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WpOrder {
    W1,
    W2,
}

impl WpOrder {
    fn exponent(self) -> i32 {
        match self {
            WpOrder::W1 => 1,
            WpOrder::W2 => 2,
        }
    }
}

/// Discrete transport instance with integer mass units.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportInstance {
    /// Source support size.
    pub n: usize,
    /// Target support size.
    pub m: usize,
    /// Row-major `n x m` ground costs.
    pub cost: Vec<f64>,
    /// Integer source masses; sums to `total_units`.
    pub source_units: Vec<i64>,
    /// Integer target masses; sums to `total_units`.
    pub target_units: Vec<i64>,
    /// Common denominator of both marginals.
    pub total_units: i64,
}

impl TransportInstance {
    /// Uniform marginals `1/n` and `1/m`, scaled by `L = lcm(n, m)`.
    pub fn uniform(n: usize, m: usize, cost: Vec<f64>) -> Result<Self, OracleError> {
        assert_eq!(cost.len(), n * m, "cost matrix shape");
        assert!(n > 0 && m > 0, "empty marginals");
        let l = lcm(n as i64, m as i64);
        if l > MASS_BUDGET {
            return Err(OracleError::InstanceTooLarge(format!(
                "lcm({n}, {m}) = {l} exceeds {MASS_BUDGET} mass units"
            )));
        }
        Ok(Self {
            n,
            m,
            cost,
            source_units: vec![l / n as i64; n],
            target_units: vec![l / m as i64; m],
            total_units: l,
        })
    }

    /// Unit source masses with each target weighted by the number of sources
    /// whose nearest column it is (ties toward the lowest column index).
    pub fn nearest_pushforward(n: usize, m: usize, cost: Vec<f64>) -> Self {
        assert_eq!(cost.len(), n * m, "cost matrix shape");
        assert!(n > 0 && m > 0, "empty marginals");
        let mut target_units = vec![0i64; m];
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            let mut best = 0;
            for (j, &c) in row.iter().enumerate() {
                if c < row[best] {
                    best = j;
                }
            }
            target_units[best] += 1;
        }
        Self {
            n,
            m,
            cost,
            source_units: vec![1; n],
            target_units,
            total_units: n as i64,
        }
    }

    /// Cost columns of a distance matrix restricted to a subset: the
    /// transport instance between all points and the selected points.
    pub fn subset_costs(d: &DistanceMatrix, subset: &[usize]) -> Vec<f64> {
        let n = d.n();
        let mut cost = Vec::with_capacity(n * subset.len());
        for i in 0..n {
            for &j in subset {
                cost.push(d.get(i, j));
            }
        }
        cost
    }

    #[inline]
    fn cost_at(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.m + j]
    }
}

/// Exact bottleneck transport cost.
///
/// Binary-searches the sorted distinct cost values; a threshold is feasible
/// iff max-flow saturates all mass when only edges with `cost <= theta` are
/// admissible. Feasibility is monotone in the threshold, which is what makes
/// the binary search exact.
pub fn exact_winf(inst: &TransportInstance) -> f64 {
    let mut values: Vec<f64> = inst.cost.clone();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    values.dedup();

    let feasible = |theta: f64| -> bool {
        let src = inst.n + inst.m;
        let sink = src + 1;
        let mut g = FlowGraph::new(inst.n + inst.m + 2);
        for (i, &u) in inst.source_units.iter().enumerate() {
            g.add_edge(src, i, u, 0.0);
        }
        for (j, &u) in inst.target_units.iter().enumerate() {
            g.add_edge(inst.n + j, sink, u, 0.0);
        }
        for i in 0..inst.n {
            for j in 0..inst.m {
                if inst.cost_at(i, j) <= theta {
                    g.add_edge(i, inst.n + j, inst.total_units, 0.0);
                }
            }
        }
        g.max_flow(src, sink) == inst.total_units
    };

    let (mut lo, mut hi) = (0usize, values.len() - 1);
    debug_assert!(feasible(values[hi]), "complete bipartite must be feasible");
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if feasible(values[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    values[lo]
}

/// Exact `W_p` via min-cost flow on the instance's mass units.
pub fn exact_wp(inst: &TransportInstance, p: WpOrder) -> Result<f64, OracleError> {
    if inst.n * inst.m > WP_BUDGET {
        return Err(OracleError::InstanceTooLarge(format!(
            "cost matrix {} x {} exceeds {WP_BUDGET} entries",
            inst.n, inst.m
        )));
    }
    let src = inst.n + inst.m;
    let sink = src + 1;
    let mut g = FlowGraph::new(inst.n + inst.m + 2);
    for (i, &u) in inst.source_units.iter().enumerate() {
        g.add_edge(src, i, u, 0.0);
    }
    for (j, &u) in inst.target_units.iter().enumerate() {
        g.add_edge(inst.n + j, sink, u, 0.0);
    }
    for i in 0..inst.n {
        for j in 0..inst.m {
            let c = inst.cost_at(i, j);
            let powered = match p.exponent() {
                1 => c,
                _ => c * c,
            };
            g.add_edge(i, inst.n + j, inst.total_units, powered);
        }
    }
    let objective = g.min_cost_flow(src, sink, inst.total_units);
    let mean = objective / inst.total_units as f64;
    Ok(match p {
        WpOrder::W1 => mean,
        WpOrder::W2 => math::sqrt(mean),
    })
}

/// Brute-force k-center: enumerates every m-subset in lexicographic order
/// and returns one with minimal coverage radius (lexicographically smallest
/// among ties) along with that radius.
pub fn kcenter_bruteforce(
    d: &DistanceMatrix,
    m: usize,
) -> Result<(Vec<usize>, f64), OracleError> {
    let n = d.n();
    if m == 0 || m > n {
        return Err(OracleError::Select(SelectError::InvalidBudget { m, n }));
    }
    let combos = binomial(n as u64, m as u64);
    if combos > KCENTER_BUDGET {
        return Err(OracleError::InstanceTooLarge(format!(
            "C({n}, {m}) = {combos} subsets exceeds {KCENTER_BUDGET}"
        )));
    }

    let mut subset: Vec<usize> = (0..m).collect();
    let mut best_subset = subset.clone();
    let mut best_radius = subset_radius(d, &subset);
    while next_combination(&mut subset, n) {
        let r = subset_radius(d, &subset);
        if r < best_radius {
            best_radius = r;
            best_subset = subset.clone();
        }
    }
    Ok((best_subset, best_radius))
}

fn subset_radius(d: &DistanceMatrix, subset: &[usize]) -> f64 {
    let n = d.n();
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
    radius
}

/// Advances `subset` to the lexicographically next m-combination of `0..n`;
/// returns false once exhausted.
fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let m = subset.len();
    let mut i = m;
    while i > 0 {
        i -= 1;
        if subset[i] < n - m + i {
            subset[i] += 1;
            for k in (i + 1)..m {
                subset[k] = subset[k - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
        if acc > 10 * KCENTER_BUDGET {
            return acc; // already hopeless, avoid overflow
        }
    }
    acc
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: i64, b: i64) -> i64 {
    a / gcd(a, b) * b
}

/// One verified instance: greedy vs optimal radii plus transport bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub n: usize,
    pub m: usize,
    pub greedy_radius: f64,
    pub optimal_radius: f64,
    /// `greedy_radius / optimal_radius` (1.0 when both are zero).
    pub ratio: f64,
    /// Bottleneck transport onto the selection, nearest-pushforward measure.
    pub w_inf: f64,
    /// Same cost matrix with uniform target masses; informational (the
    /// coverage bound does not apply to it).
    pub w_inf_uniform: f64,
    /// `W_1` on the pushforward measure.
    pub w1: f64,
    /// `W_2` on the pushforward measure.
    pub w2: f64,
    pub bound_holds: bool,
}

/// Runs the greedy selector, the brute-force optimum, and the transport
/// oracles on one distance matrix.
pub fn verify_instance(d: &DistanceMatrix, m: usize) -> Result<OracleReport, OracleError> {
    let n = d.n();
    let sel = wgs_select(d, m)?;
    let greedy_radius = sel.coverage_radius;
    let (_opt_subset, optimal_radius) = kcenter_bruteforce(d, m)?;

    let cost = TransportInstance::subset_costs(d, &sel.indices);
    let push = TransportInstance::nearest_pushforward(n, m, cost.clone());
    let w_inf = exact_winf(&push);
    let w1 = exact_wp(&push, WpOrder::W1)?;
    let w2 = exact_wp(&push, WpOrder::W2)?;
    let uniform = TransportInstance::uniform(n, m, cost)?;
    let w_inf_uniform = exact_winf(&uniform);

    let ratio = if optimal_radius > 0.0 {
        greedy_radius / optimal_radius
    } else if greedy_radius <= BOUND_SLACK {
        1.0
    } else {
        f64::INFINITY
    };
    let bound_holds = ratio <= 2.0 + BOUND_SLACK && w_inf <= greedy_radius + BOUND_SLACK;

    Ok(OracleReport {
        n,
        m,
        greedy_radius,
        optimal_radius,
        ratio,
        w_inf,
        w_inf_uniform,
        w1,
        w2,
        bound_holds,
    })
}

/// Samples random triples and checks the metric axioms: exact symmetry,
/// exact identity, and the triangle inequality with relative slack `1e-12`.
pub fn verify_metric(
    features: &[FeatureVector],
    w: &WeightVector,
    trials: usize,
    seed: u64,
) -> bool {
    if features.len() < 3 {
        return false;
    }
    let mut rng = rng::derive(seed, rng::stream::CAMPAIGN);
    let n = features.len();
    for _ in 0..trials {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let c = rng.gen_range(0..n);
        let dab = crate::features::weighted_distance(&features[a], &features[b], w);
        let dba = crate::features::weighted_distance(&features[b], &features[a], w);
        let dbc = crate::features::weighted_distance(&features[b], &features[c], w);
        let dac = crate::features::weighted_distance(&features[a], &features[c], w);
        let daa = crate::features::weighted_distance(&features[a], &features[a], w);
        if daa != 0.0 || dab.to_bits() != dba.to_bits() {
            return false;
        }
        let scale = dac.max(dab).max(dbc);
        if dac > dab + dbc + 1e-12 * scale {
            return false;
        }
    }
    true
}

/// Configuration for a seeded verification campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub instances: usize,
    pub n_range: (usize, usize),
    pub m_range: (usize, usize),
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            n_range: (6, 12),
            m_range: (2, 4),
            seed: 0,
        }
    }
}

/// Aggregate of a campaign run.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSummary {
    pub instances: usize,
    pub violations: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
}

/// Random feature cloud in the canonical feature box: time in `[0, 3]`,
/// projected pose in `[-1, 1]^2`, sequential position `(i + 1) / n`.
pub fn random_instance_features(n: usize, seed: u64) -> Vec<FeatureVector> {
    let mut rng = rng::derive(seed, rng::stream::CAMPAIGN);
    (0..n)
        .map(|i| {
            FeatureVector::new(
                rng.gen_range(0.0..3.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                (i + 1) as f64 / n as f64,
            )
        })
        .collect()
}

/// Runs a seeded campaign; every instance gets a full [`OracleReport`].
pub fn run_campaign(
    cfg: &CampaignConfig,
) -> Result<(Vec<OracleReport>, CampaignSummary), OracleError> {
    let mut reports = Vec::with_capacity(cfg.instances);
    let w = WeightVector::default();
    for k in 0..cfg.instances {
        let inst_seed = rng::mix(cfg.seed, 1000 + k as u64);
        let mut rng = rng::derive(inst_seed, rng::stream::CAMPAIGN);
        let n = rng.gen_range(cfg.n_range.0..=cfg.n_range.1);
        let m_hi = cfg.m_range.1.min(n);
        let m = rng.gen_range(cfg.m_range.0.min(m_hi)..=m_hi);
        let feats = random_instance_features(n, inst_seed);
        let d = distance_matrix(&feats, &w).map_err(SelectError::from)?;
        reports.push(verify_instance(&d, m)?);
    }

    let violations = reports.iter().filter(|r| !r.bound_holds).count();
    let finite: Vec<f64> = reports
        .iter()
        .map(|r| r.ratio)
        .filter(|r| r.is_finite())
        .collect();
    let max_ratio = finite.iter().cloned().fold(0.0, f64::max);
    let mean_ratio = if finite.is_empty() {
        0.0
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok((
        reports,
        CampaignSummary {
            instances: cfg.instances,
            violations,
            max_ratio,
            mean_ratio,
        },
    ))
}
