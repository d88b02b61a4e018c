use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open frame interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    /// Measure of `self ∩ other` over measure of `self ∪ other`.
    pub fn iou(&self, other: &Span) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyInterval(self.start, self.end));
        }
        if other.is_empty() {
            return Err(Error::EmptyInterval(other.start, other.end));
        }
        let inter = self.overlap(other);
        let union = self.len() + other.len() - inter;
        Ok(inter as f64 / union as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_fixtures() {
        let a = Span::new(0, 100);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        assert_eq!(a.iou(&Span::new(100, 150)).unwrap(), 0.0);
        let v = a.iou(&Span::new(50, 150)).unwrap();
        assert!((v - 50.0 / 150.0).abs() < 1e-15);
        assert!(a.iou(&Span::new(5, 5)).is_err());
    }
}
