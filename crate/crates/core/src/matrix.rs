//! Fixed-point integer matrices with a declared element format.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widest element format a [`QMatrix`] may declare. Keeps every product of two
/// pre-added elements inside the 64-bit working domain.
pub const MAX_ELEMENT_BITS: u32 = 30;

/// Width of the internal working domain used for derived values.
const WORKING_BITS: u32 = 63;

/// Bit width plus signedness of a fixed-point integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntFormat {
    pub bits: u32,
    pub signed: bool,
}

impl IntFormat {
    pub const fn new(bits: u32, signed: bool) -> Self {
        Self { bits, signed }
    }

    pub const fn signed(bits: u32) -> Self {
        Self::new(bits, true)
    }

    pub const fn unsigned(bits: u32) -> Self {
        Self::new(bits, false)
    }

    pub fn min(self) -> i64 {
        if self.signed {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn max(self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    pub fn fits(self, value: i64) -> bool {
        if self.bits >= 64 {
            return self.signed || value >= 0;
        }
        value >= self.min() && value <= self.max()
    }

    /// Fit-assertion: `Err(WidthOverflow)` when `value` is out of range.
    pub fn check(self, what: &'static str, value: i64) -> Result<i64> {
        if self.fits(value) {
            Ok(value)
        } else {
            Err(Error::WidthOverflow {
                what,
                value,
                bits: self.bits,
                signed: self.signed,
            })
        }
    }

    /// Saturating clamp into the representable range.
    pub fn saturate(self, value: i128) -> i64 {
        value.clamp(self.min() as i128, self.max() as i128) as i64
    }

    /// Format wide enough for the sum of two values of `self` and `other`
    /// with `growth` extra bits, signed if either operand is signed.
    pub fn grow(self, other: IntFormat, growth: u32) -> IntFormat {
        IntFormat::new(
            (self.bits.max(other.bits) + growth).min(WORKING_BITS),
            self.signed || other.signed,
        )
    }

    pub fn widen(self, extra: u32) -> IntFormat {
        IntFormat::new((self.bits + extra).min(WORKING_BITS), self.signed)
    }

    pub fn working() -> IntFormat {
        IntFormat::signed(WORKING_BITS)
    }
}

impl fmt::Display for IntFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", if self.signed { "i" } else { "u" }, self.bits)
    }
}

/// ⌈log2 n⌉ with `ceil_log2(1) == 0`.
pub fn ceil_log2(n: usize) -> u32 {
    assert!(n > 0, "ceil_log2 of zero");
    usize::BITS - (n - 1).leading_zeros()
}

/// Row-major matrix of fixed-point integers.
///
/// Every element is guaranteed to fit `format`; constructors reject anything else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QMatrix {
    rows: usize,
    cols: usize,
    format: IntFormat,
    data: Vec<i64>,
}

impl QMatrix {
    pub fn new(rows: usize, cols: usize, format: IntFormat, data: Vec<i64>) -> Result<Self> {
        if format.bits == 0 || format.bits > WORKING_BITS {
            return Err(Error::Config(format!("unsupported element format {format}")));
        }
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        for &v in &data {
            format.check("matrix element", v)?;
        }
        Ok(Self {
            rows,
            cols,
            format,
            data,
        })
    }

    pub fn from_rows<R: AsRef<[i64]>>(format: IntFormat, rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), cols, format, data)
    }

    pub fn zeros(rows: usize, cols: usize, format: IntFormat) -> Self {
        Self {
            rows,
            cols,
            format,
            data: vec![0; rows * cols],
        }
    }

    pub fn identity(n: usize, format: IntFormat) -> Self {
        let mut m = Self::zeros(n, n, format);
        for i in 0..n {
            m.data[i * n + i] = 1;
        }
        m
    }

    /// Uniformly random matrix over the full range of `format`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, format: IntFormat) -> Self {
        let (lo, hi) = (format.min(), format.max());
        let data = (0..rows * cols).map(|_| rng.gen_range(lo..=hi)).collect();
        Self {
            rows,
            cols,
            format,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn format(&self) -> IntFormat {
        self.format
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> QMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        QMatrix {
            rows: self.cols,
            cols: self.rows,
            format: self.format,
            data,
        }
    }

    /// Same values under a wider (or differently signed) format.
    pub fn reformat(&self, format: IntFormat) -> Result<QMatrix> {
        QMatrix::new(self.rows, self.cols, format, self.data.clone())
    }

    /// Copy of the `rows × cols` window at (`r0`, `c0`); cells outside `self`
    /// are zero.
    pub fn window(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> QMatrix {
        let mut out = QMatrix::zeros(rows, cols, self.format);
        for r in 0..rows.min(self.rows.saturating_sub(r0)) {
            for c in 0..cols.min(self.cols.saturating_sub(c0)) {
                out.data[r * cols + c] = self.get(r0 + r, c0 + c);
            }
        }
        out
    }

    /// Elementwise map into a new format, with fit-assertions on the results.
    pub fn map(&self, format: IntFormat, f: impl Fn(i64) -> i64) -> Result<QMatrix> {
        QMatrix::new(self.rows, self.cols, format, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl fmt::Display for QMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            writeln!(f, "{:?}", self.row(r))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_ranges() {
        assert_eq!((IntFormat::signed(8).min(), IntFormat::signed(8).max()), (-128, 127));
        assert_eq!((IntFormat::unsigned(4).min(), IntFormat::unsigned(4).max()), (0, 15));
        assert!(IntFormat::signed(1).fits(-1));
        assert!(!IntFormat::signed(1).fits(1));
    }

    #[test]
    fn ceil_log2_values() {
        let got: Vec<u32> = [1, 2, 3, 4, 5, 8, 64, 65].iter().map(|&n| ceil_log2(n)).collect();
        assert_eq!(got, vec![0, 1, 2, 2, 3, 3, 6, 7]);
    }

    #[test]
    fn rejects_out_of_range_and_bad_shape() {
        assert!(matches!(
            QMatrix::new(1, 1, IntFormat::signed(4), vec![8]),
            Err(Error::WidthOverflow { .. })
        ));
        assert!(matches!(
            QMatrix::new(2, 2, IntFormat::signed(4), vec![0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(QMatrix::from_rows(IntFormat::signed(8), &[vec![1, 2], vec![3]]).is_err());
    }

    #[test]
    fn window_pads_with_zeros() {
        let m = QMatrix::from_rows(IntFormat::signed(8), &[[1, 2], [3, 4]]).unwrap();
        let w = m.window(1, 1, 2, 2);
        assert_eq!(w.data(), &[4, 0, 0, 0]);
    }
}
