use rand::Rng;
use rand_distr::StandardNormal;

use crate::element::Element;
use crate::tensor::Tensor;

pub fn normal<T: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("numel matches shape")
}

/// He initialization; fan-in is the product of all but the first axis.
pub fn he_normal<T: Element>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}
