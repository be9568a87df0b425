use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Output-size / input-size ratio of an operator, kept as an exact rational so
/// that products over layer groups are reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Selectivity(Ratio<u128>);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectivityError {
    #[error("selectivity must be positive")]
    NonPositive,
    #[error("cannot parse selectivity {0:?}")]
    Parse(String),
}

const MAX_DECIMALS: usize = 30;

impl Selectivity {
    pub const ONE: Selectivity = Selectivity(Ratio::new_raw(1, 1));

    pub fn new(numer: u128, denom: u128) -> Result<Self, SelectivityError> {
        if numer == 0 || denom == 0 {
            return Err(SelectivityError::NonPositive);
        }
        Ok(Self(Ratio::new(numer, denom)))
    }

    /// Exact conversion through the shortest decimal representation of `x`,
    /// so `0.1` becomes `1/10` rather than the nearest binary fraction.
    pub fn from_f64(x: f64) -> Result<Self, SelectivityError> {
        if !x.is_finite() || x <= 0.0 {
            return Err(SelectivityError::NonPositive);
        }
        parse_decimal(&format!("{x}"))
    }

    pub fn numer(&self) -> u128 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u128 {
        *self.0.denom()
    }

    pub fn to_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }

    pub fn le_one(&self) -> bool {
        self.numer() <= self.denom()
    }

    pub fn lt_one(&self) -> bool {
        self.numer() < self.denom()
    }

    /// `max(1, ceil(bytes * self))`, the size law every operator obeys.
    pub fn apply(&self, bytes: u64) -> u64 {
        let num = (bytes as u128).saturating_mul(self.numer());
        let out = num.div_ceil(self.denom());
        out.clamp(1, u64::MAX as u128) as u64
    }
}

impl Default for Selectivity {
    fn default() -> Self {
        Self::ONE
    }
}

impl std::ops::Mul for Selectivity {
    type Output = Selectivity;

    fn mul(self, rhs: Self) -> Self {
        Self(self.0 * rhs.0)
    }
}

impl std::iter::Product for Selectivity {
    fn product<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Selectivity::ONE, |a, b| a * b)
    }
}

impl fmt::Display for Selectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

fn parse_decimal(s: &str) -> Result<Selectivity, SelectivityError> {
    let err = || SelectivityError::Parse(s.to_string());
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int.is_empty() && frac.is_empty() {
        return Err(err());
    }
    if frac.len() > MAX_DECIMALS || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return Err(err());
    }
    let digits = format!("{int}{frac}");
    let numer: u128 = digits.trim_start_matches('0').parse().unwrap_or(0);
    let denom = 10u128.pow(frac.len() as u32);
    Selectivity::new(numer, denom)
}

impl FromStr for Selectivity {
    type Err = SelectivityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.split_once('/') {
            Some((n, d)) => {
                let n = n.trim().parse().map_err(|_| SelectivityError::Parse(s.to_string()))?;
                let d = d.trim().parse().map_err(|_| SelectivityError::Parse(s.to_string()))?;
                Selectivity::new(n, d)
            }
            None => parse_decimal(s),
        }
    }
}

impl Serialize for Selectivity {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let as_float = self.to_f64();
        match Selectivity::from_f64(as_float) {
            Ok(back) if back == *self => serializer.serialize_f64(as_float),
            _ => serializer.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Selectivity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct SelVisitor;

        impl Visitor<'_> for SelVisitor {
            type Value = Selectivity;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive number or a \"n/d\" string")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Selectivity, E> {
                Selectivity::from_f64(v).map_err(E::custom)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Selectivity, E> {
                Selectivity::new(v as u128, 1).map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Selectivity, E> {
                if v <= 0 {
                    return Err(E::custom(SelectivityError::NonPositive));
                }
                Selectivity::new(v as u128, 1).map_err(E::custom)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Selectivity, E> {
                v.parse().map_err(E::custom)
            }
        }

        deserializer.deserialize_any(SelVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimals_are_exact() {
        assert_eq!(Selectivity::from_f64(0.1).unwrap(), Selectivity::new(1, 10).unwrap());
        assert_eq!(Selectivity::from_f64(2.0).unwrap(), Selectivity::new(2, 1).unwrap());
        assert_eq!("3/6".parse::<Selectivity>().unwrap(), Selectivity::new(1, 2).unwrap());
    }

    #[test]
    fn rejects_non_positive() {
        assert!(Selectivity::from_f64(0.0).is_err());
        assert!(Selectivity::from_f64(-1.0).is_err());
        assert!("0/3".parse::<Selectivity>().is_err());
    }

    #[test]
    fn size_law() {
        let half = Selectivity::new(1, 2).unwrap();
        assert_eq!(half.apply(100), 50);
        assert_eq!(half.apply(101), 51);
        assert_eq!(Selectivity::new(1, 1000).unwrap().apply(10), 1);
    }

    #[test]
    fn serde_round_trip() {
        let third = Selectivity::new(1, 3).unwrap();
        let s = serde_json::to_string(&third).unwrap();
        assert_eq!(s, "\"1/3\"");
        assert_eq!(serde_json::from_str::<Selectivity>(&s).unwrap(), third);
        let quarter = Selectivity::new(1, 4).unwrap();
        assert_eq!(serde_json::to_string(&quarter).unwrap(), "0.25");
    }
}
