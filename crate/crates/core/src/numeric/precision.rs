//! Element formats and accumulation policies.
//!
//! All arithmetic in the crate goes through a [`PrecisionMode`]: values are
//! stored as `f64` and every elementary operation is rounded back onto the
//! selected element grid. Reductions accumulate either on the element grid
//! (`Same`) or in binary32 with a single final rounding (`Wide`, Half only).

use std::fmt;

use serde::{Deserialize, Serialize};

use super::half::{is_half_representable, round_half};
use super::NumericError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Element {
    F64,
    F32,
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulator {
    Same,
    /// 32-bit accumulation for Half elements.
    Wide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrecisionMode {
    element: Element,
    accumulator: Accumulator,
}

impl Default for PrecisionMode {
    fn default() -> Self {
        Self::F64
    }
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.element, self.accumulator) {
            (Element::F64, _) => f.write_str("f64"),
            (Element::F32, _) => f.write_str("f32"),
            (Element::Half, Accumulator::Same) => f.write_str("half"),
            (Element::Half, Accumulator::Wide) => f.write_str("half+wide"),
        }
    }
}

#[inline]
fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl PrecisionMode {
    pub const F64: Self = Self { element: Element::F64, accumulator: Accumulator::Same };
    pub const F32: Self = Self { element: Element::F32, accumulator: Accumulator::Same };
    pub const HALF: Self = Self { element: Element::Half, accumulator: Accumulator::Same };
    pub const HALF_WIDE: Self = Self { element: Element::Half, accumulator: Accumulator::Wide };

    /// F64 and F32 only accept `Accumulator::Same`.
    pub fn new(element: Element, accumulator: Accumulator) -> Result<Self, NumericError> {
        if element != Element::Half && accumulator == Accumulator::Wide {
            return Err(NumericError::InvalidPrecision(format!("{element:?} elements require the Same accumulator")));
        }
        Ok(Self { element, accumulator })
    }

    pub fn element(&self) -> Element {
        self.element
    }

    pub fn accumulator(&self) -> Accumulator {
        self.accumulator
    }

    pub fn is_half(&self) -> bool {
        self.element == Element::Half
    }

    /// Snap a value onto the element grid.
    #[inline]
    pub fn round(&self, x: f64) -> f64 {
        match self.element {
            Element::F64 => x,
            Element::F32 => round_f32(x),
            Element::Half => round_half(x),
        }
    }

    #[inline]
    fn acc_round(&self, x: f64) -> f64 {
        match (self.element, self.accumulator) {
            (Element::F64, _) => x,
            (Element::F32, _) | (Element::Half, Accumulator::Wide) => round_f32(x),
            (Element::Half, Accumulator::Same) => round_half(x),
        }
    }

    /// Whether `x` may be stored as an input under this mode.
    pub fn is_representable(&self, x: f64) -> bool {
        match self.element {
            Element::F64 => !x.is_nan(),
            Element::F32 => !x.is_nan() && round_f32(x).to_bits() == x.to_bits(),
            Element::Half => is_half_representable(x),
        }
    }

    #[inline]
    pub fn add(&self, a: f64, b: f64) -> f64 {
        self.round(a + b)
    }

    #[inline]
    pub fn sub(&self, a: f64, b: f64) -> f64 {
        self.round(a - b)
    }

    #[inline]
    pub fn mul(&self, a: f64, b: f64) -> f64 {
        self.round(a * b)
    }

    #[inline]
    pub fn div(&self, a: f64, b: f64) -> f64 {
        self.round(a / b)
    }

    #[inline]
    pub fn sqrt(&self, a: f64) -> f64 {
        self.round(a.sqrt())
    }

    #[inline]
    pub fn exp(&self, a: f64) -> f64 {
        self.round(a.exp())
    }

    #[inline]
    pub fn ln(&self, a: f64) -> f64 {
        self.round(a.ln())
    }

    /// A count converted onto the element grid (e.g. a batch size divisor).
    #[inline]
    pub fn count(&self, n: usize) -> f64 {
        self.round(n as f64)
    }

    /// Left-to-right sum with this mode's accumulator, rounded once more to
    /// the element grid at the end.
    #[inline]
    pub fn sum<I: IntoIterator<Item = f64>>(&self, values: I) -> f64 {
        let mut acc = 0.0;
        for v in values {
            acc = self.acc_round(acc + v);
        }
        self.round(acc)
    }

    /// Dot product: each product is rounded to the element grid, the running
    /// sum follows the accumulator policy.
    #[inline]
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        self.sum(a.iter().zip(b).map(|(&x, &y)| self.mul(x, y)))
    }

    /// Strided dot product, `a[i]` against `b[i * stride]`.
    #[inline]
    pub fn dot_strided(&self, a: &[f64], b: &[f64], offset: usize, stride: usize) -> f64 {
        self.sum(a.iter().enumerate().map(|(i, &x)| self.mul(x, b[offset + i * stride])))
    }

    /// `mean = sum / n` under this mode.
    #[inline]
    pub fn mean<I: IntoIterator<Item = f64>>(&self, values: I, n: usize) -> f64 {
        self.div(self.sum(values), self.count(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_requires_half() {
        assert!(PrecisionMode::new(Element::F32, Accumulator::Wide).is_err());
        assert!(PrecisionMode::new(Element::F64, Accumulator::Wide).is_err());
        assert_eq!(PrecisionMode::new(Element::Half, Accumulator::Wide).unwrap(), PrecisionMode::HALF_WIDE);
    }

    #[test]
    fn half_square_overflows_above_255_9() {
        let p = PrecisionMode::HALF;
        assert_eq!(p.mul(256.0, 256.0), f64::INFINITY);
        assert_eq!(p.mul(255.875, 255.875), 65472.0);
    }

    #[test]
    fn same_vs_wide_accumulation() {
        let ones = vec![1.0; 4096];
        let hundreds = vec![100.0; 4096];
        assert_eq!(PrecisionMode::HALF.dot(&ones, &hundreds), f64::INFINITY);
        // 409600 is finite in binary32 but overflows at the final cast.
        assert_eq!(PrecisionMode::HALF_WIDE.dot(&ones, &hundreds), f64::INFINITY);
        let small = vec![10.0; 4096];
        // Same mode stalls once the spacing exceeds the addend; Wide does not.
        let same = PrecisionMode::HALF.dot(&ones, &small);
        let wide = PrecisionMode::HALF_WIDE.dot(&ones, &small);
        assert_eq!(wide, 40960.0);
        assert!(same < wide);
    }

    #[test]
    fn f32_rounds() {
        let p = PrecisionMode::F32;
        assert_eq!(p.add(1.0, 1e-9), 1.0);
        assert!(!p.is_representable(0.1));
        assert!(p.is_representable(0.1f32 as f64));
    }
}
