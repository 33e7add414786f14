//! Expert activation functions and their derivatives.

use serde::{Deserialize, Serialize};

/// Activation applied to expert outputs (or to the inner mixture, depending
/// on the model variant). `SigmoidWithBias` evaluates `sigmoid(z + bias)`.
///
/// A nonzero bias is what makes the sigmoid a usable strong-identifiability
/// witness; `bias = 0` is accepted but the identifiability checks will flag
/// the resulting family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    SigmoidWithBias { bias: f64 },
}

impl ActivationKind {
    pub fn sigmoid(bias: f64) -> Self {
        ActivationKind::SigmoidWithBias { bias }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ActivationKind::Identity)
    }

    /// Evaluate the activation or one of its first two derivatives at `z`.
    ///
    /// `order` 0 gives the value, 1 the first derivative, 2 the second.
    /// Orders above 2 panic; callers needing higher orders have taken a
    /// wrong turn well before this point.
    pub fn eval(&self, z: f64, order: usize) -> f64 {
        match self {
            ActivationKind::Identity => match order {
                0 => z,
                1 => 1.0,
                2 => 0.0,
                _ => panic!("activation derivative order {order} not supported"),
            },
            ActivationKind::SigmoidWithBias { bias } => {
                let s = sigmoid(z + bias);
                match order {
                    0 => s,
                    1 => s * (1.0 - s),
                    2 => s * (1.0 - s) * (1.0 - 2.0 * s),
                    _ => panic!("activation derivative order {order} not supported"),
                }
            }
        }
    }

    /// Value of the activation at `z`.
    pub fn value(&self, z: f64) -> f64 {
        self.eval(z, 0)
    }

    /// First derivative at `z`.
    pub fn deriv(&self, z: f64) -> f64 {
        self.eval(z, 1)
    }

    /// Second derivative at `z`.
    pub fn deriv2(&self, z: f64) -> f64 {
        self.eval(z, 2)
    }
}

/// Numerically stable logistic function.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
