use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => relu(input),
        Activation::Sigmoid => sigmoid(input),
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Logistic function, evaluated without clamping.
///
/// The result is strictly inside (0, 1) for |v| below about 16.6. Past that
/// the upper tail rounds to exactly 1.0 in `f32` (the lower tail only reaches 0
/// below about −103), so saturated masks pass values through unchanged.
pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let y = relu(&Tensor::new([3], vec![-1., 0., 2.]).unwrap());
        assert_eq!(y.data(), &[0., 0., 2.]);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((1.0 - sigmoid_scalar(30.0) as f64).abs() < 1e-9);
        assert!(sigmoid_scalar(16.0) < 1.0);
        assert!(sigmoid_scalar(-30.0) > 0.0);
    }
}
