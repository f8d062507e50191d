use crate::numerics::{Rng, Scalar, Tensor};

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    /// Uniform in the open interval `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, where
    /// `fan_in` is the leading extent. For an embedding table `[K x d]` this is
    /// `K`, the width of the one-hot input the table stands in for.
    UniformScaled,
    Zeros,
    /// Layer-normalization gains.
    Ones,
}

impl ParamInit {
    pub fn build(self, shape: &[usize], rng: &mut Rng) -> Tensor {
        match self {
            ParamInit::Zeros => Tensor::zeros(shape),
            ParamInit::Ones => Tensor::full(shape, 1.0),
            ParamInit::UniformScaled => {
                let fan_in = shape.first().copied().unwrap_or(1).max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data: Vec<Scalar> = (0..n).map(|_| rng.symmetric(bound)).collect();
                Tensor::from_parts(shape.to_vec(), data)
            }
        }
    }
}
