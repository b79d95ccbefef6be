//! Weight initialization: fan-in-scaled Gaussians via Box-Muller on the
//! crate's deterministic RNG.

use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use rand::Rng as _;

/// Standard normal draw (Box-Muller, deterministic given the generator).
pub fn standard_normal(rng: &mut Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(0.0..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

pub fn fill_normal<T: Scalar>(t: &mut Tensor<T>, rng: &mut Rng, std: f64) {
    for v in t.data_mut() {
        *v = T::from_f64(standard_normal(rng) * std);
    }
}

/// He initialization for convolutions followed by ReLU.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Plain fan-in scaling for linear/gate convolutions.
pub fn fan_in_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}
