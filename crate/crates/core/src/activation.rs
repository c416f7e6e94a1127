//! Elementwise non-linearities for the FFN gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    /// Tanh approximation.
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044_715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044_715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Elementwise application; rejects non-finite input.
    pub fn apply_tensor(self, x: &Tensor) -> Result<Tensor> {
        if !x.is_finite() {
            return Err(Error::NonFinite("activation input"));
        }
        let data = x.data().iter().map(|&v| self.apply(v)).collect();
        Tensor::from_vec(x.shape().to_vec(), data)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "silu" | "swish" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x · sigmoid(x)` elementwise.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Activation::Silu.apply_tensor(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_zero() {
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
    }

    #[test]
    fn silu_large_positive_is_identity() {
        let x = 40.0;
        assert!((Activation::Silu.apply(x) - x).abs() < 1e-12);
    }

    #[test]
    fn silu_one() {
        // 1 / (1 + e^-1), evaluated with mpmath at 30 digits.
        let expected = 0.731_058_578_630_004_9;
        assert!((Activation::Silu.apply(1.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn silu_rejects_non_finite() {
        let t = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(silu(&t), Err(Error::NonFinite(_))));
    }

    #[test]
    fn positive_iff_input_positive() {
        for act in [Activation::Silu, Activation::Gelu, Activation::Relu] {
            for x in [-3.0, -1e-3, 0.0, 1e-3, 2.5] {
                assert_eq!(act.apply(x) > 0.0, x > 0.0, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for act in [Activation::Silu, Activation::Gelu] {
            for x in [-2.0, -0.3, 0.7, 3.1] {
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }
}
