//! Signed fixed-point Q(i,f) semantics: quantization, saturation, exact
//! dequantization.
//!
//! A Q(i,f) format has `i` integer bits (sign-inclusive) and `f` fractional
//! bits. Its grid is the multiples of 2^-f inside [-2^(i-1), 2^(i-1) - 2^-f];
//! Q(4,4) spans exactly [-8.0, 7.9375] in steps of 0.0625. Quantization rounds
//! to the nearest grid point with ties to the even integer code and saturates
//! out-of-range values to the boundary.

use crate::error::{QfxError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Maximum supported total width; codes are stored in i64.
pub const MAX_TOTAL_BITS: u32 = 32;

/// Signed fixed-point format with `int_bits` (sign-inclusive) and `frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QFormat {
    int_bits: u8,
    frac_bits: u8,
}

impl QFormat {
    /// Build a format. `int_bits` must be at least 1 (it carries the sign) and
    /// the total width may not exceed [`MAX_TOTAL_BITS`].
    pub fn new(int_bits: u32, frac_bits: u32) -> Result<Self> {
        if int_bits == 0 {
            return Err(QfxError::InvalidFormat(
                "int_bits must be >= 1 (sign-inclusive)".into(),
            ));
        }
        if int_bits + frac_bits > MAX_TOTAL_BITS {
            return Err(QfxError::InvalidFormat(format!(
                "total width {} exceeds {MAX_TOTAL_BITS}",
                int_bits + frac_bits
            )));
        }
        Ok(QFormat {
            int_bits: int_bits as u8,
            frac_bits: frac_bits as u8,
        })
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits as u32
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits as u32
    }

    pub fn total_bits(&self) -> u32 {
        self.int_bits() + self.frac_bits()
    }

    /// Grid spacing 2^-f, exact.
    pub fn step(&self) -> f64 {
        f64::powi(2.0, -(self.frac_bits as i32))
    }

    /// Smallest representable value, -2^(i-1).
    pub fn min_value(&self) -> f64 {
        self.min_code() as f64 * self.step()
    }

    /// Largest representable value, 2^(i-1) - 2^-f.
    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.step()
    }

    /// Smallest integer code, -2^(i+f-1).
    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.total_bits() - 1))
    }

    /// Largest integer code, 2^(i+f-1) - 1.
    pub fn max_code(&self) -> i64 {
        (1i64 << (self.total_bits() - 1)) - 1
    }

    /// Number of representable values, 2^(i+f).
    pub fn values_count(&self) -> u64 {
        1u64 << self.total_bits()
    }

    /// True when x lies strictly inside (min_value, max_value); the
    /// straight-through estimator passes gradient only here.
    pub fn is_interior(&self, x: f64) -> bool {
        self.min_value() < x && x < self.max_value()
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.int_bits, self.frac_bits)
    }
}

impl FromStr for QFormat {
    type Err = QfxError;

    /// Parses the textual form "Qi.f", e.g. "Q4.4".
    fn from_str(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix('Q')
            .or_else(|| s.strip_prefix('q'))
            .ok_or_else(|| QfxError::InvalidFormat(format!("expected Qi.f, got {s:?}")))?;
        let (i, f) = body
            .split_once('.')
            .ok_or_else(|| QfxError::InvalidFormat(format!("expected Qi.f, got {s:?}")))?;
        let int_bits: u32 = i
            .parse()
            .map_err(|_| QfxError::InvalidFormat(format!("bad integer width in {s:?}")))?;
        let frac_bits: u32 = f
            .parse()
            .map_err(|_| QfxError::InvalidFormat(format!("bad fraction width in {s:?}")))?;
        QFormat::new(int_bits, frac_bits)
    }
}

impl TryFrom<String> for QFormat {
    type Error = QfxError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QFormat> for String {
    fn from(q: QFormat) -> String {
        q.to_string()
    }
}

/// A stored fixed-point value: integer code plus its format.
/// The real value is `raw * 2^-f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedValue {
    raw: i64,
    format: QFormat,
}

impl FixedValue {
    pub fn new(raw: i64, format: QFormat) -> Result<Self> {
        if raw < format.min_code() || raw > format.max_code() {
            return Err(QfxError::InvalidFormat(format!(
                "code {raw} outside [{}, {}] of {format}",
                format.min_code(),
                format.max_code()
            )));
        }
        Ok(FixedValue { raw, format })
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn format(&self) -> QFormat {
        self.format
    }
}

/// Round a finite real to the nearest representable value of `q`.
///
/// Out-of-range inputs saturate to the boundary; exact halfway points round
/// to the even integer code. The result is itself representable, so the map
/// is idempotent.
pub fn quantize(x: f64, q: QFormat) -> Result<f64> {
    Ok(quantize_code(x, q)? as f64 * q.step())
}

/// Like [`quantize`] but returns the integer code.
fn quantize_code(x: f64, q: QFormat) -> Result<i64> {
    if !x.is_finite() {
        return Err(QfxError::NonFinite {
            context: format!("quantize to {q}"),
            value: x,
        });
    }
    // Power-of-two scaling is exact in binary floating point, so halfway
    // inputs scale to exact .5 values and round_ties_even lands on the even
    // code. Saturation clamps the code, not the input.
    let scaled = x / q.step();
    let code = scaled
        .round_ties_even()
        .clamp(q.min_code() as f64, q.max_code() as f64);
    Ok(code as i64)
}

/// Exact real value of a stored fixed-point code.
pub fn dequantize(v: FixedValue) -> f64 {
    v.raw as f64 * v.format.step()
}

/// Quantize and keep the integer code: `dequantize(encode(x)) == quantize(x)`.
pub fn encode(x: f64, q: QFormat) -> Result<FixedValue> {
    Ok(FixedValue {
        raw: quantize_code(x, q)?,
        format: q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(i: u32, f: u32) -> QFormat {
        QFormat::new(i, f).unwrap()
    }

    /// Independent oracle: scan every grid point of a small format, pick the
    /// nearest to x (saturating first), break exact ties toward the even code.
    fn quantize_by_enumeration(x: f64, fmt: QFormat) -> f64 {
        let step = fmt.step();
        let clamped = x.clamp(fmt.min_value(), fmt.max_value());
        let mut best_code = fmt.min_code();
        let mut best_dist = f64::INFINITY;
        for code in fmt.min_code()..=fmt.max_code() {
            let g = code as f64 * step;
            let d = (clamped - g).abs();
            let better = d < best_dist
                || (d == best_dist && code % 2 == 0 && best_code % 2 != 0);
            if better {
                best_dist = d;
                best_code = code;
            }
        }
        best_code as f64 * step
    }

    #[test]
    fn q44_range_matches_reference() {
        let fmt = q(4, 4);
        assert_eq!(fmt.min_value(), -8.0);
        assert_eq!(fmt.max_value(), 7.9375);
        assert_eq!(fmt.step(), 0.0625);
        assert_eq!(fmt.values_count(), 256);
    }

    #[test]
    fn quantize_saturates_at_range_max() {
        assert_eq!(quantize(7.95, q(4, 4)).unwrap(), 7.9375);
        assert_eq!(quantize(-100.0, q(4, 4)).unwrap(), -8.0);
    }

    #[test]
    fn zero_is_always_on_grid() {
        for i in 1..=8 {
            for f in 0..=8 {
                assert_eq!(quantize(0.0, q(i, f)).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn nearest_grid_point_matches_enumeration() {
        // 0.40 in Q(3,3): grid step 0.125, nearest is 0.375.
        let fmt = q(3, 3);
        assert_eq!(quantize_by_enumeration(0.40, fmt), 0.375);
        assert_eq!(quantize(0.40, fmt).unwrap(), 0.375);
        // Spot-check the full small grid against the oracle.
        let mut x = -5.0;
        while x < 5.0 {
            assert_eq!(
                quantize(x, fmt).unwrap(),
                quantize_by_enumeration(x, fmt),
                "x = {x}"
            );
            x += 0.0437;
        }
    }

    #[test]
    fn exact_tie_rounds_to_even_code() {
        // 0.03125 in Q(4,4) is exactly halfway between codes 0 and 1.
        let fmt = q(4, 4);
        assert_eq!(quantize_by_enumeration(0.03125, fmt), 0.0);
        assert_eq!(quantize(0.03125, fmt).unwrap(), 0.0);
        // Halfway between codes 1 and 2 rounds up to the even code 2.
        assert_eq!(quantize(3.0 * 0.03125, fmt).unwrap(), 0.125);
        // Negative side: halfway between codes -1 and 0 goes to 0.
        assert_eq!(quantize(-0.03125, fmt).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            assert!(quantize(bad, q(4, 4)).is_err());
            assert!(encode(bad, q(4, 4)).is_err());
        }
    }

    #[test]
    fn dequantize_is_exact() {
        assert_eq!(dequantize(FixedValue::new(-128, q(4, 4)).unwrap()), -8.0);
        assert_eq!(dequantize(FixedValue::new(0, q(8, 8)).unwrap()), 0.0);
        assert_eq!(dequantize(FixedValue::new(3, q(3, 3)).unwrap()), 0.375);
    }

    #[test]
    fn encode_matches_quantize() {
        assert_eq!(encode(7.9375, q(4, 4)).unwrap().raw(), 127);
        assert_eq!(encode(0.0, q(8, 8)).unwrap().raw(), 0);
        // Saturation to max code.
        assert_eq!(encode(9.0, q(4, 4)).unwrap().raw(), 127);
        for x in [-3.7, 0.02, 5.11, 100.0, -100.0] {
            let fmt = q(5, 3);
            assert_eq!(
                dequantize(encode(x, fmt).unwrap()),
                quantize(x, fmt).unwrap()
            );
        }
    }

    #[test]
    fn fixed_value_code_must_be_in_range() {
        assert!(FixedValue::new(128, q(4, 4)).is_err());
        assert!(FixedValue::new(-129, q(4, 4)).is_err());
        assert!(FixedValue::new(127, q(4, 4)).is_ok());
    }

    #[test]
    fn format_validation() {
        assert!(QFormat::new(0, 4).is_err());
        assert!(QFormat::new(16, 17).is_err());
        assert!(QFormat::new(16, 16).is_ok());
        assert!(QFormat::new(1, 0).is_ok());
    }

    #[test]
    fn textual_form_round_trips() {
        for s in ["Q4.4", "Q16.16", "Q1.0", "Q3.7"] {
            let fmt: QFormat = s.parse().unwrap();
            assert_eq!(fmt.to_string(), s);
        }
        assert!("4.4".parse::<QFormat>().is_err());
        assert!("Q4".parse::<QFormat>().is_err());
        assert!("Qx.y".parse::<QFormat>().is_err());
        assert!("Q0.4".parse::<QFormat>().is_err());
    }

    #[test]
    fn huge_inputs_saturate_without_overflow() {
        let fmt = q(16, 16);
        assert_eq!(quantize(1e300, fmt).unwrap(), fmt.max_value());
        assert_eq!(quantize(-1e300, fmt).unwrap(), fmt.min_value());
    }
}
