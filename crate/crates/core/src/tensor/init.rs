use rand::Rng;

use super::{Real, Tensor};

/// Glorot/Xavier uniform: i.i.d. draws on `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-a..=a)))
}
