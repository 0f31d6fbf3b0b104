//! Central-difference gradient checking against the tape's backward pass.
//!
//! The checker perturbs individual parameter coordinates, rebuilds the
//! forward graph through a caller-supplied closure, and compares
//! finite-difference slopes against the analytic gradients. Buffers are
//! snapshotted and restored so batch-mode normalization cannot leak running
//! statistics between probe evaluations.

use alloc::vec::Vec;

use rand::Rng;

use super::graph::{Graph, NodeId, ParamId};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// At most this many coordinates are probed per parameter.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords: 64,
            seed: 0,
        }
    }
}

/// Relative error with an absolute floor of 1: small gradients are compared
/// absolutely, large ones relatively.
fn rel_err(fd: f64, analytic: f64) -> f64 {
    let denom = fd.abs().max(analytic.abs()).max(1.0);
    (fd - analytic).abs() / denom
}

fn sample_coords(len: usize, max_coords: usize, seed: u64) -> Vec<usize> {
    if len <= max_coords {
        return (0..len).collect();
    }
    let mut rng = rng::derive(seed, rng::stream::GRADCHECK);
    let mut picked = Vec::with_capacity(max_coords);
    // Floyd's sampling: distinct, order-independent of len
    for j in (len - max_coords)..len {
        let t = rng.gen_range(0..=j);
        if picked.contains(&t) {
            picked.push(j);
        } else {
            picked.push(t);
        }
    }
    picked.sort_unstable();
    picked
}

fn snapshot_buffers(g: &Graph) -> Vec<Vec<f64>> {
    g.buffers().map(|(_, b)| b.data.clone()).collect()
}

fn restore_buffers(g: &mut Graph, snap: &[Vec<f64>]) {
    let ids: Vec<_> = g.buffers().map(|(id, _)| id).collect();
    for (id, data) in ids.into_iter().zip(snap) {
        g.buffer_mut(id).data.clone_from(data);
    }
}

fn loss_at<F>(g: &mut Graph, build: &mut F) -> f64
where
    F: FnMut(&mut Graph) -> NodeId,
{
    g.clear_tape();
    let loss = build(g);
    let v = g.scalar_value(loss);
    g.clear_tape();
    v
}

/// Maximum relative error between analytic and central-difference gradients
/// over a sampled coordinate subset of `param`.
pub fn grad_check<F>(g: &mut Graph, mut build: F, param: ParamId, cfg: GradCheckConfig) -> f64
where
    F: FnMut(&mut Graph) -> NodeId,
{
    let buffers = snapshot_buffers(g);

    g.clear_tape();
    g.zero_grads();
    let loss = build(g);
    g.backward(loss);
    let analytic = g.param(param).grad.clone();
    g.clear_tape();
    restore_buffers(g, &buffers);

    let coords = sample_coords(analytic.len(), cfg.max_coords, cfg.seed);
    let mut worst = 0.0f64;
    for &i in &coords {
        let orig = g.param(param).value.data()[i];

        g.param_mut(param).value.data_mut()[i] = orig + cfg.eps;
        let plus = loss_at(g, &mut build);
        g.param_mut(param).value.data_mut()[i] = orig - cfg.eps;
        let minus = loss_at(g, &mut build);
        g.param_mut(param).value.data_mut()[i] = orig;

        let fd = (plus - minus) / (2.0 * cfg.eps);
        worst = worst.max(rel_err(fd, analytic.data()[i]));
    }
    restore_buffers(g, &buffers);
    worst
}

/// Largest absolute central-difference slope over sampled coordinates;
/// used to show a parameter still moves the loss even when its analytic
/// gradient is exactly zero (the detach probes).
pub fn fd_sensitivity<F>(g: &mut Graph, mut build: F, param: ParamId, cfg: GradCheckConfig) -> f64
where
    F: FnMut(&mut Graph) -> NodeId,
{
    let buffers = snapshot_buffers(g);
    let len = g.param(param).value.len();
    let coords = sample_coords(len, cfg.max_coords, cfg.seed);
    let mut worst = 0.0f64;
    for &i in &coords {
        let orig = g.param(param).value.data()[i];
        g.param_mut(param).value.data_mut()[i] = orig + cfg.eps;
        let plus = loss_at(g, &mut build);
        g.param_mut(param).value.data_mut()[i] = orig - cfg.eps;
        let minus = loss_at(g, &mut build);
        g.param_mut(param).value.data_mut()[i] = orig;
        worst = worst.max(((plus - minus) / (2.0 * cfg.eps)).abs());
    }
    restore_buffers(g, &buffers);
    worst
}
