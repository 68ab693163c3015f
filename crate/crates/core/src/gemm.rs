//! Bit-exact reference kernels for the baseline, FIP and FFIP matrix products.
//!
//! All three kernels compute `C = A·B` exactly over integers. The fast variants
//! pair up the K dimension: FIP multiplies pre-added pairs
//! `(a[2k] + b[2k+1]) · (a[2k+1] + b[2k])` and subtracts the self-product sums
//! α (per row of A) and β (per column of B). FFIP multiplies the same factors
//! but builds them column by column from the previous column's factors plus a
//! column difference of B, which is what lets a systolic array chain the
//! pre-adders row to row.
//!
//! Every pre-adder output and product is checked against the width the
//! hardware would give it; a violation is reported, never wrapped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{ceil_log2, IntFormat, QMatrix};
use crate::quant::derive_d;

/// Inner-product algorithm / MXU flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Fip,
    Ffip,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Fip, Variant::Ffip];

    pub fn is_fast(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Fip => "fip",
            Variant::Ffip => "ffip",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "fip" => Ok(Variant::Fip),
            "ffip" => Ok(Variant::Ffip),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Operation tally of one kernel run.
///
/// `output_adjust` holds the final `-α_i - β_j` subtractions of the fast
/// variants; they are kept apart so `additions` matches the closed-form count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub multiplications: u64,
    pub additions: u64,
    pub output_adjust: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    fn mul(&mut self, n: u64) {
        self.multiplications += n;
    }

    fn add(&mut self, n: u64) {
        self.additions += n;
    }
}

/// The α (per row of A) and β (per column of B) correction vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FipAux {
    pub alpha: Vec<i64>,
    pub beta: Vec<i64>,
}

impl FipAux {
    pub fn compute(a: &QMatrix, b: &QMatrix, counter: &mut OpCounter) -> Result<Self> {
        Ok(Self {
            alpha: compute_alpha(a, counter)?,
            beta: compute_beta(b, counter)?,
        })
    }
}

fn check_inner(a: &QMatrix, b_rows: usize) -> Result<usize> {
    if a.cols() != b_rows {
        return Err(Error::Shape(format!(
            "A is {}x{} but B has {} rows",
            a.rows(),
            a.cols(),
            b_rows
        )));
    }
    Ok(a.cols())
}

fn check_even(k: usize) -> Result<()> {
    if k % 2 == 1 {
        return Err(Error::OddK(k));
    }
    if k == 0 {
        return Err(Error::Shape("K must be at least 2".into()));
    }
    Ok(())
}

/// Signed format holding any exact `K`-term dot product of `a` and `b` values.
pub fn product_format(a: IntFormat, b: IntFormat, k: usize) -> IntFormat {
    IntFormat::signed(a.bits + b.bits + 1).widen(ceil_log2(k.max(1)))
}

/// Format of a pre-adder output `a + b` (w+d bits for equal widths).
pub fn pre_adder_format(a: IntFormat, b: IntFormat) -> IntFormat {
    a.grow(b, derive_d(a.signed, b.signed))
}

fn acc_add(acc: i64, v: i64, what: &'static str) -> Result<i64> {
    acc.checked_add(v).ok_or(Error::Overflow(what))
}

/// Traditional inner product: `c[i][j] = Σ_k a[i][k]·b[k][j]`.
pub fn gemm_baseline(a: &QMatrix, b: &QMatrix, counter: &mut OpCounter) -> Result<QMatrix> {
    let k = check_inner(a, b.rows())?;
    let (m, n) = (a.rows(), b.cols());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = a.row(i);
        for j in 0..n {
            let mut acc = 0i64;
            for (kk, &av) in row.iter().enumerate() {
                acc = acc_add(acc, av * b.get(kk, j), "baseline accumulation")?;
            }
            out.push(acc);
        }
    }
    counter.mul((m * n * k) as u64);
    counter.add((m * n * k.saturating_sub(1)) as u64);
    QMatrix::new(m, n, product_format(a.format(), b.format(), k), out)
}

/// `α_i = Σ_k a[i][2k]·a[i][2k+1]`.
pub fn compute_alpha(a: &QMatrix, counter: &mut OpCounter) -> Result<Vec<i64>> {
    check_even(a.cols())?;
    let half = a.cols() / 2;
    let alpha = (0..a.rows())
        .map(|i| {
            a.row(i)
                .chunks_exact(2)
                .try_fold(0i64, |acc, p| acc_add(acc, p[0] * p[1], "alpha"))
        })
        .collect::<Result<Vec<_>>>()?;
    counter.mul((a.rows() * half) as u64);
    counter.add((a.rows() * (half - 1)) as u64);
    Ok(alpha)
}

/// `β_j = Σ_k b[2k][j]·b[2k+1][j]`.
pub fn compute_beta(b: &QMatrix, counter: &mut OpCounter) -> Result<Vec<i64>> {
    check_even(b.rows())?;
    let half = b.rows() / 2;
    let beta = (0..b.cols())
        .map(|j| {
            (0..half).try_fold(0i64, |acc, k| acc_add(acc, b.get(2 * k, j) * b.get(2 * k + 1, j), "beta"))
        })
        .collect::<Result<Vec<_>>>()?;
    counter.mul((b.cols() * half) as u64);
    counter.add((b.cols() * (half - 1)) as u64);
    Ok(beta)
}

/// Winograd's fast inner product.
pub fn gemm_fip(a: &QMatrix, b: &QMatrix, counter: &mut OpCounter) -> Result<QMatrix> {
    let k = check_inner(a, b.rows())?;
    check_even(k)?;
    let aux = FipAux::compute(a, b, counter)?;
    let pre = pre_adder_format(a.format(), b.format());
    let prod = IntFormat::new(2 * pre.bits, pre.signed);
    let (m, n) = (a.rows(), b.cols());

    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = a.row(i);
        for j in 0..n {
            let mut acc = 0i64;
            for p in 0..k / 2 {
                let lo = pre.check("fip pre-adder", row[2 * p] + b.get(2 * p + 1, j))?;
                let hi = pre.check("fip pre-adder", row[2 * p + 1] + b.get(2 * p, j))?;
                acc = acc_add(acc, prod.check("fip product", lo * hi)?, "fip accumulation")?;
            }
            out.push(acc - aux.alpha[i] - aux.beta[j]);
        }
    }
    counter.mul((m * n * k / 2) as u64);
    counter.add((m * n * (k + k / 2 - 1)) as u64);
    counter.output_adjust += 2 * (m * n) as u64;
    QMatrix::new(m, n, product_format(a.format(), b.format(), k), out)
}

/// Column-differenced weights: `y[i][0] = b[i][0]`, `y[i][j] = b[i][j] - b[i][j-1]`.
///
/// Stored on one more bit than the source, always signed. `source` remembers
/// the original element format, which sizes the FFIP pre-adders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct YMatrix {
    y: QMatrix,
    source: IntFormat,
}

impl YMatrix {
    pub fn values(&self) -> &QMatrix {
        &self.y
    }

    pub fn source_format(&self) -> IntFormat {
        self.source
    }

    pub fn rows(&self) -> usize {
        self.y.rows()
    }

    pub fn cols(&self) -> usize {
        self.y.cols()
    }

    /// Row-wise prefix sum; recovers the original B exactly.
    pub fn inverse(&self) -> QMatrix {
        let (rows, cols) = (self.y.rows(), self.y.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let mut run = 0i64;
            for c in 0..cols {
                run += self.y.get(r, c);
                data.push(run);
            }
        }
        QMatrix::new(rows, cols, self.source, data).expect("prefix sum of a y-transform stays in the source range")
    }
}

pub fn y_transform(b: &QMatrix) -> YMatrix {
    let (rows, cols) = (b.rows(), b.cols());
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let prev = if c == 0 { 0 } else { b.get(r, c - 1) };
            data.push(b.get(r, c) - prev);
        }
    }
    let format = IntFormat::signed(b.format().bits + 1);
    YMatrix {
        y: QMatrix::new(rows, cols, format, data).expect("column differences fit one extra bit"),
        source: b.format(),
    }
}

/// Free-pipeline fast inner product over pre-transformed weights.
///
/// The factors `g` for output column `j` are derived from those of column
/// `j - 1` by adding the column `j` of `y`; B itself is only rebuilt to
/// evaluate β, which in deployment is folded into the bias offline.
pub fn gemm_ffip(a: &QMatrix, y: &YMatrix, counter: &mut OpCounter) -> Result<QMatrix> {
    let k = check_inner(a, y.rows())?;
    check_even(k)?;
    let alpha = compute_alpha(a, counter)?;
    let beta = compute_beta(&y.inverse(), counter)?;
    let pre = pre_adder_format(a.format(), y.source);
    let prod = IntFormat::new(2 * pre.bits, pre.signed);
    let yv = &y.y;
    let (m, n) = (a.rows(), y.cols());

    let mut out = vec![0i64; m * n];
    let mut g = vec![0i64; k];
    for i in 0..m {
        let row = a.row(i);
        for j in 0..n {
            for p in 0..k / 2 {
                let (lo, hi) = if j == 0 {
                    (row[2 * p + 1] + yv.get(2 * p, 0), row[2 * p] + yv.get(2 * p + 1, 0))
                } else {
                    (g[2 * p] + yv.get(2 * p, j), g[2 * p + 1] + yv.get(2 * p + 1, j))
                };
                g[2 * p] = pre.check("ffip pre-adder", lo)?;
                g[2 * p + 1] = pre.check("ffip pre-adder", hi)?;
            }
            let mut acc = 0i64;
            for p in 0..k / 2 {
                acc = acc_add(acc, prod.check("ffip product", g[2 * p] * g[2 * p + 1])?, "ffip accumulation")?;
            }
            out[i * n + j] = acc - alpha[i] - beta[j];
        }
    }
    counter.mul((m * n * k / 2) as u64);
    counter.add((m * n * (k + k / 2 - 1)) as u64);
    counter.output_adjust += 2 * (m * n) as u64;
    QMatrix::new(m, n, product_format(a.format(), y.source, k), out)
}

/// Closed-form operation counts for an `m×k` by `k×n` product.
pub fn predicted_op_counts(variant: Variant, m: usize, n: usize, k: usize) -> Result<OpCounter> {
    let (m, n, k) = (m as u64, n as u64, k as u64);
    match variant {
        Variant::Baseline => Ok(OpCounter {
            multiplications: m * n * k,
            additions: m * n * k.saturating_sub(1),
            output_adjust: 0,
        }),
        Variant::Fip | Variant::Ffip => {
            check_even(k as usize)?;
            Ok(OpCounter {
                multiplications: (m * n * k + m * k + n * k) / 2,
                additions: (3 * m * n * k + m * k + n * k) / 2 - m * n - m - n,
                output_adjust: 2 * m * n,
            })
        }
    }
}

/// Appends a zero column to A and a zero row to B when K is odd.
pub fn pad_even_k(a: &QMatrix, b: &QMatrix) -> Result<(QMatrix, QMatrix)> {
    let k = check_inner(a, b.rows())?;
    if k % 2 == 0 {
        return Ok((a.clone(), b.clone()));
    }
    Ok((a.window(0, 0, a.rows(), k + 1), b.window(0, 0, k + 1, b.cols())))
}

/// Dispatches to the kernel for `variant`; odd K is zero-padded for the fast ones.
pub fn gemm(variant: Variant, a: &QMatrix, b: &QMatrix, counter: &mut OpCounter) -> Result<QMatrix> {
    match variant {
        Variant::Baseline => gemm_baseline(a, b, counter),
        Variant::Fip => {
            let (a, b) = pad_even_k(a, b)?;
            gemm_fip(&a, &b, counter)
        }
        Variant::Ffip => {
            let (a, b) = pad_even_k(a, b)?;
            gemm_ffip(&a, &y_transform(&b), counter)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const I8: IntFormat = IntFormat::signed(8);

    fn m(rows: &[&[i64]]) -> QMatrix {
        QMatrix::from_rows(I8, rows).unwrap()
    }

    #[test]
    fn baseline_identity_and_scalar() {
        let a = m(&[&[1, 2], &[3, 4]]);
        let mut c = OpCounter::new();
        assert_eq!(gemm_baseline(&a, &QMatrix::identity(2, I8), &mut c).unwrap().data(), a.data());

        let mut c = OpCounter::new();
        let out = gemm_baseline(&m(&[&[5]]), &m(&[&[7]]), &mut c).unwrap();
        assert_eq!(out.data(), &[35]);
        assert_eq!((c.multiplications, c.additions), (1, 0));
    }

    #[test]
    fn shape_errors() {
        let mut c = OpCounter::new();
        let a = m(&[&[1, 2]]);
        assert!(matches!(gemm_baseline(&a, &a, &mut c), Err(Error::Shape(_))));
        assert!(matches!(gemm_fip(&a, &a, &mut c), Err(Error::Shape(_))));
        let y = y_transform(&a);
        assert!(matches!(gemm_ffip(&a, &y, &mut c), Err(Error::Shape(_))));
    }

    #[test]
    fn alpha_examples() {
        let mut c = OpCounter::new();
        assert_eq!(compute_alpha(&m(&[&[1, 2, 3, 4]]), &mut c).unwrap(), vec![14]);
        assert_eq!((c.multiplications, c.additions), (2, 1));
        assert_eq!(compute_alpha(&QMatrix::zeros(3, 4, I8), &mut c).unwrap(), vec![0, 0, 0]);
        assert_eq!(compute_alpha(&m(&[&[1, 0, 0, 1]]), &mut c).unwrap(), vec![0]);
        assert_eq!(compute_alpha(&m(&[&[1, 2, 3]]), &mut c), Err(Error::OddK(3)));
    }

    #[test]
    fn beta_examples() {
        let mut c = OpCounter::new();
        assert_eq!(compute_beta(&m(&[&[3], &[4]]), &mut c).unwrap(), vec![12]);
        assert_eq!(compute_beta(&QMatrix::identity(2, I8), &mut c).unwrap(), vec![0, 0]);
        let a = m(&[&[1, 2, 3, 4]]);
        assert_eq!(compute_beta(&a.transpose(), &mut c).unwrap(), compute_alpha(&a, &mut c).unwrap());
        assert_eq!(compute_beta(&m(&[&[1], &[2], &[3]]), &mut c), Err(Error::OddK(3)));
    }

    #[test]
    fn fip_small_example() {
        let mut c = OpCounter::new();
        let out = gemm_fip(&m(&[&[1, 2]]), &m(&[&[3], &[4]]), &mut c).unwrap();
        assert_eq!(out.data(), &[11]);
    }

    #[test]
    fn fip_identity() {
        let b = m(&[&[1, -2, 3, 4], &[5, 6, -7, 8], &[9, 10, 11, -12], &[-13, 14, 15, 16]]);
        let mut c = OpCounter::new();
        assert_eq!(gemm_fip(&QMatrix::identity(4, I8), &b, &mut c).unwrap().data(), b.data());
    }

    #[test]
    fn fip_counts_at_four() {
        let a = m(&[&[1, -2, 3, 4], &[5, 6, -7, 8], &[9, 10, 11, -12], &[-13, 14, 15, 16]]);
        let mut c = OpCounter::new();
        gemm_fip(&a, &a.transpose(), &mut c).unwrap();
        assert_eq!((c.multiplications, c.additions), (48, 88));
        assert_eq!(c.output_adjust, 32);
    }

    #[test]
    fn y_transform_examples() {
        let y = y_transform(&m(&[&[3, 3], &[4, 4]]));
        assert_eq!(y.values().data(), &[3, 0, 4, 0]);
        assert_eq!(y.values().format(), IntFormat::signed(9));

        let col = m(&[&[3], &[-4]]);
        assert_eq!(y_transform(&col).values().data(), col.data());
    }

    #[test]
    fn ffip_small_example() {
        let a = m(&[&[1, 2]]);
        let b = m(&[&[3, 4], &[4, 1]]);
        let mut c = OpCounter::new();
        assert_eq!(gemm_ffip(&a, &y_transform(&b), &mut c).unwrap().data(), &[11, 6]);
    }

    #[test]
    fn ffip_single_column_matches_fip() {
        let a = m(&[&[1, -2, 3, 4], &[5, 6, -7, 8]]);
        let b = m(&[&[9], &[-10], &[11], &[12]]);
        let (mut c1, mut c2) = (OpCounter::new(), OpCounter::new());
        let fip = gemm_fip(&a, &b, &mut c1).unwrap();
        let ffip = gemm_ffip(&a, &y_transform(&b), &mut c2).unwrap();
        assert_eq!(fip, ffip);
        assert_eq!(c1, c2);
    }

    #[test]
    fn predicted_examples() {
        let c = predicted_op_counts(Variant::Baseline, 2, 2, 2).unwrap();
        assert_eq!((c.multiplications, c.additions), (8, 4));
        let c = predicted_op_counts(Variant::Fip, 2, 2, 2).unwrap();
        assert_eq!((c.multiplications, c.additions), (8, 8));
        let c = predicted_op_counts(Variant::Fip, 64, 64, 64).unwrap();
        assert_eq!(c.multiplications, 135_168);
        assert_eq!(predicted_op_counts(Variant::Ffip, 2, 2, 3), Err(Error::OddK(3)));
    }

    #[test]
    fn pad_even_k_cases() {
        let a = m(&[&[1, 2, 3], &[4, 5, 6]]);
        let b = m(&[&[1, 2], &[3, 4], &[5, 6]]);
        let (pa, pb) = pad_even_k(&a, &b).unwrap();
        assert_eq!((pa.cols(), pb.rows()), (4, 4));
        assert_eq!(pa.row(1), &[4, 5, 6, 0]);
        assert_eq!(pb.row(3), &[0, 0]);
        let mut c = OpCounter::new();
        assert_eq!(gemm_baseline(&pa, &pb, &mut c).unwrap().data(), gemm_baseline(&a, &b, &mut c).unwrap().data());

        let (a4, b4) = (QMatrix::identity(4, I8), QMatrix::identity(4, I8));
        assert_eq!(pad_even_k(&a4, &b4).unwrap(), (a4, b4));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("FFIP".parse::<Variant>().unwrap(), Variant::Ffip);
        assert!("winograd".parse::<Variant>().is_err());
    }
}
