//! Fixed-point representation policy: signedness pairing, β folding into the
//! bias, the weight zero-point correction and inter-layer requantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{compute_beta, y_transform, OpCounter, Variant, YMatrix};
use crate::matrix::{IntFormat, QMatrix};

/// Extra pre-adder bits: 1 when both operands share signedness, 2 otherwise.
pub fn derive_d(a_signed: bool, b_signed: bool) -> u32 {
    if a_signed == b_signed {
        1
    } else {
        2
    }
}

/// Rescale factor `multiplier / divisor`, `divisor > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    pub multiplier: i64,
    pub divisor: i64,
}

impl Scale {
    pub const ONE: Scale = Scale {
        multiplier: 1,
        divisor: 1,
    };

    pub fn new(multiplier: i64, divisor: i64) -> Result<Self> {
        if multiplier <= 0 || divisor <= 0 {
            return Err(Error::Config(format!(
                "scale {multiplier}/{divisor} must be positive"
            )));
        }
        Ok(Self {
            multiplier,
            divisor,
        })
    }
}

impl Default for Scale {
    fn default() -> Self {
        Scale::ONE
    }
}

/// Layer quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub w: u32,
    pub a_signed: bool,
    pub b_signed: bool,
    pub d: u32,
    /// Activation zero point; only zero is supported.
    pub a_zero_point: i64,
    /// Layer-wise weight zero point (every element of the constant matrix R).
    pub b_zero_point: i64,
    pub scale: Scale,
}

impl QuantSpec {
    pub fn new(w: u32, a_signed: bool, b_signed: bool) -> Self {
        Self {
            w,
            a_signed,
            b_signed,
            d: derive_d(a_signed, b_signed),
            a_zero_point: 0,
            b_zero_point: 0,
            scale: Scale::ONE,
        }
    }

    pub fn signed(w: u32) -> Self {
        Self::new(w, true, true)
    }

    pub fn with_b_zero_point(mut self, r: i64) -> Self {
        self.b_zero_point = r;
        self
    }

    pub fn with_scale(mut self, scale: Scale) -> Self {
        self.scale = scale;
        self
    }

    /// Overrides the derived pre-adder growth. [`QuantSpec::validate`] rejects
    /// a `d` that contradicts the operand signedness; the simulator accepts it
    /// and reports the resulting datapath overflows.
    pub fn with_forced_d(mut self, d: u32) -> Self {
        self.d = d;
        self
    }

    pub fn a_format(&self) -> IntFormat {
        IntFormat::new(self.w, self.a_signed)
    }

    pub fn b_format(&self) -> IntFormat {
        IntFormat::new(self.w, self.b_signed)
    }

    /// Pre-adder output format, `w + d` bits.
    pub fn pre_adder_format(&self) -> IntFormat {
        IntFormat::new(self.w + self.d, self.a_signed || self.b_signed)
    }

    /// Structural checks that do not involve the `d` rule.
    pub fn validate_structure(&self) -> Result<()> {
        if self.w == 0 || self.w > crate::matrix::MAX_ELEMENT_BITS {
            return Err(Error::Config(format!("w = {} out of range", self.w)));
        }
        if !(1..=2).contains(&self.d) {
            return Err(Error::Config(format!("d = {} must be 1 or 2", self.d)));
        }
        if self.a_zero_point != 0 {
            return Err(Error::Config("activation zero points must be zero".into()));
        }
        self.b_format().check("weight zero point", self.b_zero_point)?;
        Scale::new(self.scale.multiplier, self.scale.divisor)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        let expected = derive_d(self.a_signed, self.b_signed);
        if self.d != expected {
            return Err(Error::Config(format!(
                "d = {} but signedness (a: {}, b: {}) requires d = {expected}",
                self.d, self.a_signed, self.b_signed
            )));
        }
        Ok(())
    }
}

/// `bias[j] - beta[j]`: moves the β subtraction into the bias-add stage.
pub fn fold_beta(bias: &[i64], beta: &[i64]) -> Result<Vec<i64>> {
    if bias.len() != beta.len() {
        return Err(Error::Length {
            expected: bias.len(),
            got: beta.len(),
        });
    }
    Ok(bias.iter().zip(beta).map(|(b, s)| b - s).collect())
}

/// Row contributions of `A·R` for a constant weight zero point `r`:
/// `r · Σ_k a[i][k]`, one multiplication per row.
pub fn zero_point_adjust(a: &QMatrix, r_value: i64) -> Vec<i64> {
    zero_point_adjust_counted(a, r_value, &mut OpCounter::new())
}

pub fn zero_point_adjust_counted(a: &QMatrix, r_value: i64, counter: &mut OpCounter) -> Vec<i64> {
    let out = (0..a.rows())
        .map(|i| r_value * a.row(i).iter().sum::<i64>())
        .collect();
    counter.multiplications += a.rows() as u64;
    counter.additions += (a.rows() * a.cols().saturating_sub(1)) as u64;
    out
}

/// Round-half-to-even of `value · scale`, saturated to the activation format.
pub fn requantize(value: i64, spec: &QuantSpec) -> i64 {
    let num = value as i128 * spec.scale.multiplier as i128;
    let den = spec.scale.divisor as i128;
    let q = num.div_euclid(den);
    let twice_rem = 2 * num.rem_euclid(den);
    let rounded = match twice_rem.cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    };
    spec.a_format().saturate(rounded)
}

/// Weights held stationary in the MXU for one tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stationary {
    /// Raw weights (baseline and FIP).
    Plain(QMatrix),
    /// Column-differenced weights (FFIP).
    Y(YMatrix),
}

/// One `x × y` weight tile plus its precomputed β.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightTile {
    pub variant: Variant,
    pub stationary: Stationary,
    pub beta: Vec<i64>,
}

impl WeightTile {
    pub fn new(variant: Variant, b_tile: &QMatrix) -> Result<Self> {
        let beta = if variant.is_fast() {
            compute_beta(b_tile, &mut OpCounter::new())?
        } else {
            vec![0; b_tile.cols()]
        };
        let stationary = match variant {
            Variant::Ffip => Stationary::Y(y_transform(b_tile)),
            _ => Stationary::Plain(b_tile.clone()),
        };
        Ok(Self {
            variant,
            stationary,
            beta,
        })
    }

    pub fn rows(&self) -> usize {
        match &self.stationary {
            Stationary::Plain(b) => b.rows(),
            Stationary::Y(y) => y.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match &self.stationary {
            Stationary::Plain(b) => b.cols(),
            Stationary::Y(y) => y.cols(),
        }
    }

    /// The values the PEs latch, and the format of the original weights.
    pub fn values(&self) -> (&QMatrix, IntFormat) {
        match &self.stationary {
            Stationary::Plain(b) => (b, b.format()),
            Stationary::Y(y) => (y.values(), y.source_format()),
        }
    }
}

/// Offline weight-side precompute for one layer on an `x × y` MXU.
///
/// `tiles` is indexed `[n_tile * k_tiles + k_tile]`; partial tiles are
/// zero-padded, which leaves β and the zero-point terms unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedWeights {
    pub variant: Variant,
    pub x: usize,
    pub y: usize,
    pub k: usize,
    pub n: usize,
    pub k_tiles: usize,
    pub n_tiles: usize,
    pub tiles: Vec<WeightTile>,
    pub beta: Vec<i64>,
    pub folded_bias: Vec<i64>,
    pub b_zero_point: i64,
}

impl PreparedWeights {
    pub fn new(
        variant: Variant,
        b: &QMatrix,
        bias: Option<&[i64]>,
        b_zero_point: i64,
        x: usize,
        y: usize,
    ) -> Result<Self> {
        if x == 0 || y == 0 || x % 2 == 1 {
            return Err(Error::Config(format!("bad tile geometry {x}x{y}")));
        }
        let (k, n) = (b.rows(), b.cols());
        let bias = match bias {
            Some(bias) if bias.len() != n => {
                return Err(Error::Length {
                    expected: n,
                    got: bias.len(),
                })
            }
            Some(bias) => bias.to_vec(),
            None => vec![0; n],
        };
        let k_tiles = k.div_ceil(x).max(1);
        let n_tiles = n.div_ceil(y).max(1);
        let mut tiles = Vec::with_capacity(k_tiles * n_tiles);
        for nt in 0..n_tiles {
            for kt in 0..k_tiles {
                tiles.push(WeightTile::new(variant, &b.window(kt * x, nt * y, x, y))?);
            }
        }
        let beta = if variant.is_fast() {
            compute_beta(&b.window(0, 0, k_tiles * x, n), &mut OpCounter::new())?
        } else {
            vec![0; n]
        };
        let folded_bias = fold_beta(&bias, &beta)?;
        Ok(Self {
            variant,
            x,
            y,
            k,
            n,
            k_tiles,
            n_tiles,
            tiles,
            beta,
            folded_bias,
            b_zero_point,
        })
    }

    pub fn tile(&self, k_tile: usize, n_tile: usize) -> &WeightTile {
        &self.tiles[n_tile * self.k_tiles + k_tile]
    }
}
