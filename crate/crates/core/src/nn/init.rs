use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::rng::Stream;

/// Fan sizes for a row-major `[fan_in, fan_out]` weight; vectors use their
/// length for both.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
    }
}

/// Uniform Glorot initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<F: Scalar>(shape: &[usize], stream: Stream) -> Tensor<F> {
    let (fan_in, fan_out) = fans(shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = stream.rng();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}
