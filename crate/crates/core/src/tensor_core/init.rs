use crate::rng::Xoshiro256pp;
use crate::tensor_core::tensor::Tensor;

/// (fan_in, fan_out) of a weight shape: `[out, in, kh, kw]` for kernels,
/// `[out, in]` for dense weights.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [a, b, rest @ ..] => {
            let field: usize = rest.iter().product();
            (b * field, a * field)
        }
        [] => (1, 1),
    }
}

pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fi, fo) = fans(shape);
    (6.0 / (fi + fo) as f64).sqrt()
}

/// Glorot/Xavier uniform samples on `[-sqrt(6/(fan_in+fan_out)), +sqrt(...)]`.
pub fn xavier_uniform_init(shape: &[usize], seed: u64) -> Tensor {
    let bound = xavier_bound(shape);
    let mut rng = Xoshiro256pp::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound) as f32)
}
