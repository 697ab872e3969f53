//! Sigmoid and tanh, exact and approximated.
//!
//! The approximation is the seventh-order continued fraction of tanh,
//! collapsed to a ratio of polynomials:
//!
//! ```text
//! tanh(x) ~ (x^7 + 378 x^5 + 17325 x^3 + 135135 x) / (28 x^6 + 3150 x^4 + 62370 x^2 + 135135)
//! ```
//!
//! valid on `[-4.972, 4.972]` and clipped to `+-1` outside it.

use crate::Real;

/// Inputs beyond this magnitude clip to `+-1`.
pub const TANH_CLIP: f64 = 4.972;

pub fn tanh_exact<T: Real>(x: T) -> T {
    x.tanh()
}

pub fn sigmoid_exact<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn tanh_approx<T: Real>(x: T) -> T {
    let clip = T::lit(TANH_CLIP);
    if x > clip {
        return T::one();
    }
    if x < -clip {
        return -T::one();
    }
    let x2 = x * x;
    let num = x * (T::lit(135135.0) + x2 * (T::lit(17325.0) + x2 * (T::lit(378.0) + x2)));
    let den = T::lit(135135.0) + x2 * (T::lit(62370.0) + x2 * (T::lit(3150.0) + x2 * T::lit(28.0)));
    num / den
}

/// Logistic sigmoid through the approximate tanh, `(tanh(x/2) + 1) / 2`.
///
/// Saturates to exactly 0 or 1 once `x/2` leaves the valid tanh range.
/// Negative inputs are reflected so that `s(x) + s(-x) == 1` holds exactly
/// in floating point (`1 - s` is exact for `s` in `[0.5, 1]`).
pub fn sigmoid_approx<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let upper = |v: T| (tanh_approx(v * half) + T::one()) * half;
    if x < T::zero() {
        T::one() - upper(-x)
    } else {
        upper(x)
    }
}

/// Which activation family an inference path uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Exact,
    Approx,
}

impl Activation {
    #[inline]
    pub fn sigmoid<T: Real>(self, x: T) -> T {
        match self {
            Activation::Exact => sigmoid_exact(x),
            Activation::Approx => sigmoid_approx(x),
        }
    }

    #[inline]
    pub fn tanh<T: Real>(self, x: T) -> T {
        match self {
            Activation::Exact => tanh_exact(x),
            Activation::Approx => tanh_approx(x),
        }
    }
}
