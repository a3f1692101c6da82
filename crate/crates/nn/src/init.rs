use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Real;

/// Samples from N(0, std^2) truncated to +-2 std by rejection.
pub fn trunc_normal<T: Real, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect()
}

pub const INIT_STD: f64 = 0.02;
