use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::element::Element;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Exponential linear unit with alpha = 1.
    Elu,
    /// Exact (erf-based) Gaussian error linear unit.
    Gelu,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    #[inline]
    pub fn eval<T: Element>(self, x: T) -> T {
        match self {
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Gelu => T::lit(0.5) * x * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf()),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    #[inline]
    fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Activation::Gelu => {
                let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * PI).sqrt());
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// Applies `kind` elementwise.
pub fn activation<T: Element>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| kind.eval(v)).collect();
    let xc = x.clone();
    Tensor::from_op(
        kind.name(),
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |args| {
            let g = args
                .grad
                .iter()
                .zip(xc.data())
                .zip(args.out)
                .map(|((&g, &x), &y)| g * kind.derivative(x, y))
                .collect();
            vec![Some(g)]
        }),
    )
}

impl<T: Element> Tensor<T> {
    pub fn elu(&self) -> Tensor<T> {
        activation(Activation::Elu, self)
    }

    pub fn gelu(&self) -> Tensor<T> {
        activation(Activation::Gelu, self)
    }

    pub fn relu(&self) -> Tensor<T> {
        activation(Activation::Relu, self)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        activation(Activation::Sigmoid, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_values() {
        assert_eq!(Activation::Elu.eval(0.0f64), 0.0);
        assert_eq!(Activation::Elu.eval(1.0f64), 1.0);
        let expected = (-1.0f64).exp() - 1.0;
        assert!((Activation::Elu.eval(-1.0f64) - expected).abs() < 1e-15);
        assert!((Activation::Elu.eval(-1.0f64) + 0.63212).abs() < 1e-5);
    }

    #[test]
    fn sigmoid_half() {
        assert_eq!(Activation::Sigmoid.eval(0.0f64), 0.5);
        assert_eq!(Activation::Sigmoid.eval(0.0f32), 0.5);
    }

    #[test]
    fn gelu_and_relu_at_zero() {
        assert_eq!(Activation::Gelu.eval(0.0f64), 0.0);
        assert_eq!(Activation::Relu.eval(-2.0f64), 0.0);
        // GELU(1) = Φ(1) ≈ 0.841344746
        assert!((Activation::Gelu.eval(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
    }
}
