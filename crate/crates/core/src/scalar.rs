//! Numeric abstraction shared by the protocol, simulator and analysis.
//!
//! Everything in the core is generic over [`Scalar`]. Floating-point types
//! drive simulations; the rational impls let identities be checked exactly.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::ops::Neg;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Ordered field element usable as a time value.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Num
    + Neg<Output = Self>
    + FromPrimitive
    + ToPrimitive
{
    /// Largest integer not greater than `self`.
    fn floor(self) -> Self;

    /// Converts an `f64` literal. Panics if the value is not representable.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(|| panic!("{x} is not representable"))
    }

    fn from_count(n: u64) -> Self {
        Self::from_u64(n).unwrap_or_else(|| panic!("{n} is not representable"))
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn abs_val(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }

    /// Total order for event queues; incomparable values compare equal.
    fn total_cmp_lossy(&self, other: &Self) -> Ordering {
        self.partial_cmp(other).unwrap_or(Ordering::Equal)
    }
}

impl Scalar for f32 {
    fn floor(self) -> Self {
        f32::floor(self)
    }
}

impl Scalar for f64 {
    fn floor(self) -> Self {
        f64::floor(self)
    }
}

impl Scalar for Ratio<i64> {
    fn floor(self) -> Self {
        Ratio::floor(&self)
    }
}

impl Scalar for Ratio<i128> {
    fn floor(self) -> Self {
        Ratio::floor(&self)
    }
}

/// The rational equal to `x`, if `x` is finite and fits.
pub fn exact_ratio(x: f64) -> Option<Ratio<i128>> {
    if !x.is_finite() {
        return None;
    }
    if x == 0.0 {
        return Some(Ratio::from_integer(0));
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1 << 52) - 1)) as i128;
    let (mantissa, exp) = if exp == 0 { (frac, -1074) } else { (frac | (1 << 52), exp - 1075) };
    let shift = (mantissa.trailing_zeros() as i32).min(-exp).max(0);
    let (mantissa, exp) = (mantissa >> shift, exp + shift);
    let mantissa = if x < 0.0 { -mantissa } else { mantissa };
    if exp >= 0 {
        mantissa.checked_mul(1i128.checked_shl(exp as u32)?).filter(|_| exp < 74).map(Ratio::from_integer)
    } else if exp > -126 {
        Some(Ratio::new(mantissa, 1i128 << (-exp) as u32))
    } else {
        None
    }
}

/// Formats a value with 17 significant digits (round-trip exact for `f64`).
pub fn fmt_sig17(x: f64) -> String {
    format!("{x:.16e}")
}
