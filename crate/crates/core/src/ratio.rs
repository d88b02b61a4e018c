//! Exact rational thresholds.
//!
//! Grid constraints such as "at least 30% of the width" or "aspect ratio at
//! least 2:3" sit exactly on representable grid boxes, so they are compared
//! by integer cross-multiplication instead of floating point.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "ratio denominator must be positive");
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `a / b >= self`, exactly.
    pub fn le_frac(self, a: u64, b: u64) -> bool {
        (a as u128) * (self.den as u128) >= (self.num as u128) * (b as u128)
    }

    /// `a / b <= self`, exactly.
    pub fn ge_frac(self, a: u64, b: u64) -> bool {
        (a as u128) * (self.den as u128) <= (self.num as u128) * (b as u128)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    /// Accepts `p/q`, `p:q`, or a plain decimal such as `0.3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid ratio '{s}'"));
        if let Some((p, q)) = s.split_once(['/', ':']) {
            let p: u64 = p.trim().parse().map_err(|_| bad())?;
            let q: u64 = q.trim().parse().map_err(|_| bad())?;
            if q == 0 {
                return Err(bad());
            }
            return Ok(Ratio::new(p, q));
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 12 {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let den = 10u64.pow(frac.len() as u32);
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Ok(Ratio::new(int * den + frac_v, den))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_forms() {
        assert_eq!("2/3".parse::<Ratio>().unwrap(), Ratio::new(2, 3));
        assert_eq!("3:2".parse::<Ratio>().unwrap(), Ratio::new(3, 2));
        assert_eq!("0.3".parse::<Ratio>().unwrap(), Ratio::new(3, 10));
        assert_eq!("0.6667".parse::<Ratio>().unwrap(), Ratio::new(6667, 10000));
        assert_eq!("1".parse::<Ratio>().unwrap(), Ratio::new(1, 1));
        assert!("x".parse::<Ratio>().is_err());
        assert!("1/0".parse::<Ratio>().is_err());
    }

    #[test]
    fn boundary_is_inclusive() {
        let r = Ratio::new(2, 3);
        assert!(r.le_frac(4, 6));
        assert!(r.ge_frac(4, 6));
        assert!(!r.le_frac(3, 5));
    }
}
