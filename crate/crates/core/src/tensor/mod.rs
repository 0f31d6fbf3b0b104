//! Minimal deterministic dense rank-4 tensor engine with reverse-mode
//! gradients for the operations the adaptation blocks need, plus a
//! finite-difference gradient checker.

mod dense;
pub mod gradcheck;
mod graph;

pub use dense::{Dims, Tensor4};
pub use gradcheck::{fd_sensitivity, grad_check, GradCheckConfig};
pub use graph::{BnMode, BufId, Buffer, Graph, NodeId, Param, ParamId, BN_MOMENTUM};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::rng as seedrng;

/// He-style uniform init over `fan_in` with a deterministic RNG.
pub fn he_uniform(
    dims: Dims,
    fan_in: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor4 {
    let bound = crate::math::sqrt(6.0 / fan_in as f64);
    let (n, c, h, w) = dims;
    let data: Vec<f64> = (0..n * c * h * w)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor4::from_vec(dims, data)
}

/// Random tensor with entries nudged away from zero so relu kinks cannot
/// corrupt finite-difference probes.
pub fn kink_free_random(dims: Dims, seed: u64) -> Tensor4 {
    let mut rng = seedrng::derive(seed, seedrng::stream::GRADCHECK);
    let (n, c, h, w) = dims;
    let data: Vec<f64> = (0..n * c * h * w)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor4::from_vec(dims, data)
}

/// Standard per-channel batchnorm state: scale 1, shift 0, running mean 0,
/// running variance 1.
pub fn bn_params(
    g: &mut Graph,
    name: &str,
    channels: usize,
    trainable: bool,
) -> (ParamId, ParamId, BufId, BufId) {
    let scale = g.add_param(
        alloc::format!("{name}.scale"),
        Tensor4::from_vec((1, channels, 1, 1), vec![1.0; channels]),
        trainable,
    );
    let shift = g.add_param(
        alloc::format!("{name}.shift"),
        Tensor4::zeros((1, channels, 1, 1)),
        trainable,
    );
    let mean = g.add_buffer(alloc::format!("{name}.running_mean"), vec![0.0; channels]);
    let var = g.add_buffer(alloc::format!("{name}.running_var"), vec![1.0; channels]);
    (scale, shift, mean, var)
}
