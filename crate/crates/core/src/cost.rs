//! Fixed-point storage and bandwidth costs.
//!
//! Costs are compared against budgets with `<=`, so they are held as integer
//! counts of millionths. Values such as `0.89` or `0.66` land exactly on the
//! grid and feasibility checks never depend on float rounding.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Number of grid points per cost unit.
pub const COST_SCALE: u64 = 1_000_000;

/// A nonnegative cost or budget on a 1e-6 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Cost(u64);

impl Cost {
    pub const ZERO: Cost = Cost(0);

    pub const fn from_micros(micros: u64) -> Self {
        Cost(micros)
    }

    pub const fn from_units(units: u64) -> Self {
        Cost(units * COST_SCALE)
    }

    /// Rounds `value` to the nearest grid point. Returns `None` for negative,
    /// non-finite or out-of-range input.
    pub fn from_f64(value: f64) -> Option<Self> {
        if !value.is_finite() || value < 0.0 {
            return None;
        }
        let scaled = (value * COST_SCALE as f64).round();
        if scaled > u64::MAX as f64 / 2.0 {
            return None;
        }
        Some(Cost(scaled as u64))
    }

    pub const fn micros(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / COST_SCALE as f64
    }

    pub fn checked_sub(self, rhs: Cost) -> Option<Cost> {
        self.0.checked_sub(rhs.0).map(Cost)
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.0 += rhs.0;
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Cost> for Cost {
    fn sum<I: Iterator<Item = &'a Cost>>(iter: I) -> Cost {
        iter.copied().sum()
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = f64::deserialize(deserializer)?;
        Cost::from_f64(value)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid cost {value}")))
    }
}
