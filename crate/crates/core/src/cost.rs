//! Closed-form hardware cost and efficiency arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::Variant;
use crate::matrix::ceil_log2;
use crate::tiler::LayerShape;

/// Register budgets of one processing element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeRegisterVariant {
    /// FIP PE with the minimal register set.
    Fip,
    /// FIP PE with the extra pipeline registers needed to reach a multiplier-
    /// bound clock.
    FipExtraRegs,
    Ffip,
}

impl PeRegisterVariant {
    pub const ALL: [PeRegisterVariant; 3] = [Self::Fip, Self::FipExtraRegs, Self::Ffip];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fip => "fip",
            Self::FipExtraRegs => "fip_extra_regs",
            Self::Ffip => "ffip",
        }
    }
}

/// Register bits per PE for `w`-bit inputs in an array `x` inputs wide.
pub fn pe_register_bits(variant: PeRegisterVariant, w: u32, d: u32, x: usize) -> Result<u32> {
    if !(1..=2).contains(&d) {
        return Err(Error::Config(format!("d must be 1 or 2, got {d}")));
    }
    if w == 0 || x < 2 {
        return Err(Error::Config(format!("need w >= 1 and x >= 2, got w={w}, x={x}")));
    }
    let log_x = ceil_log2(x);
    Ok(match variant {
        PeRegisterVariant::Fip => 6 * w + log_x + 1,
        PeRegisterVariant::FipExtraRegs => 8 * w + 2 * d + log_x + 1,
        PeRegisterVariant::Ffip => 6 * w + 2 * d + log_x + 3,
    })
}

/// Peak effective op/s: 2 per multiplier per cycle for the baseline, 4 for
/// FIP and FFIP.
pub fn throughput_roof(variant: Variant, multipliers: u64, frequency_hz: f64) -> f64 {
    roof_ops_per_mult_cycle(variant) * multipliers as f64 * frequency_hz
}

pub fn roof_ops_per_mult_cycle(variant: Variant) -> f64 {
    if variant.is_fast() {
        4.0
    } else {
        2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub dsp_count: u64,
    pub multipliers_per_dsp: u64,
    pub frequency_hz: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if self.dsp_count == 0 || self.multipliers_per_dsp == 0 || self.frequency_hz.is_nan() || self.frequency_hz <= 0.0 {
            return Err(Error::Config(format!("device profile must be positive: {self:?}")));
        }
        Ok(())
    }
}

pub fn multipliers_of(profile: &DeviceProfile) -> u64 {
    profile.dsp_count * profile.multipliers_per_dsp
}

/// Whether a measured efficiency lies above the baseline roof and within
/// the fast roof.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoofFlags {
    pub exceeds_baseline_roof: bool,
    pub within_fast_roof: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub register_bits_per_pe: Option<u32>,
    pub multipliers: u64,
    pub gops: f64,
    pub gops_per_multiplier: f64,
    pub ops_per_multiplier_per_cycle: f64,
    pub roof_flags: RoofFlags,
}

impl CostReport {
    pub fn with_register_bits(mut self, bits: u32) -> Self {
        self.register_bits_per_pe = Some(bits);
        self
    }
}

/// Throughput `ops_per_inference · inferences_per_s` and its efficiency
/// metrics. Zero throughput yields all-zero metrics; zero multipliers zero
/// the per-multiplier ones.
pub fn metrics(ops_per_inference: u64, inferences_per_s: f64, multipliers: u64, frequency_hz: f64) -> CostReport {
    metrics_from_gops(ops_per_inference as f64 * inferences_per_s / 1e9, multipliers, frequency_hz)
}

pub fn metrics_from_gops(gops: f64, multipliers: u64, frequency_hz: f64) -> CostReport {
    let (per_mult, per_cycle) = if multipliers == 0 || gops == 0.0 || frequency_hz <= 0.0 {
        (0.0, 0.0)
    } else {
        let per_mult = gops / multipliers as f64;
        (per_mult, per_mult * 1e9 / frequency_hz)
    };
    CostReport {
        register_bits_per_pe: None,
        multipliers,
        gops,
        gops_per_multiplier: per_mult,
        ops_per_multiplier_per_cycle: per_cycle,
        roof_flags: RoofFlags {
            exceeds_baseline_roof: per_cycle > 2.0,
            within_fast_roof: per_cycle <= 4.0,
        },
    }
}

/// A GEMM-decomposable layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        #[serde(flatten)]
        shape: LayerShape,
        #[serde(default = "one")]
        repeat: u64,
    },
    Fc {
        m: u64,
        n: u64,
        k: u64,
        #[serde(default = "one")]
        repeat: u64,
    },
}

fn one() -> u64 {
    1
}

impl Layer {
    /// Equivalent GEMM `(M, N, K)`: output pixels, output channels and
    /// `cin·kh·kw` for convolutions.
    pub fn gemm_dims(&self) -> Result<(u64, u64, u64)> {
        match *self {
            Layer::Conv { shape, .. } => {
                let (oh, ow) = shape.output_dims()?;
                Ok(((oh * ow) as u64, shape.cout as u64, (shape.cin * shape.kh * shape.kw) as u64))
            }
            Layer::Fc { m, n, k, .. } => Ok((m, n, k)),
        }
    }

    pub fn repeat(&self) -> u64 {
        match *self {
            Layer::Conv { repeat, .. } | Layer::Fc { repeat, .. } => repeat,
        }
    }

    pub fn ops(&self) -> Result<u64> {
        let (m, n, k) = self.gemm_dims()?;
        Ok(2 * m * n * k * self.repeat())
    }
}

/// Operations per inference, `Σ 2·M·N·K` over the layers.
pub fn model_ops(layers: &[Layer]) -> Result<u64> {
    layers.iter().map(Layer::ops).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_bits_reference_points() {
        assert_eq!(pe_register_bits(PeRegisterVariant::Fip, 8, 1, 64).unwrap(), 55);
        assert_eq!(pe_register_bits(PeRegisterVariant::FipExtraRegs, 8, 1, 64).unwrap(), 73);
        assert_eq!(pe_register_bits(PeRegisterVariant::Ffip, 8, 1, 64).unwrap(), 59);
        assert!(pe_register_bits(PeRegisterVariant::Ffip, 8, 3, 64).is_err());
    }

    #[test]
    fn roofs() {
        let f = 388e6;
        assert_eq!(throughput_roof(Variant::Baseline, 2144, f), 2.0 * 2144.0 * f);
        assert_eq!(throughput_roof(Variant::Ffip, 2144, f), 4.0 * 2144.0 * f);
        assert!((throughput_roof(Variant::Baseline, 2144, f) / 1e12 - 1.664).abs() < 1e-3);
    }

    #[test]
    fn multiplier_rule() {
        let p = |dsp, per| DeviceProfile {
            dsp_count: dsp,
            multipliers_per_dsp: per,
            frequency_hz: 1e8,
        };
        assert_eq!(multipliers_of(&p(1072, 2)), 2144);
        assert_eq!(multipliers_of(&p(1473, 4)), 5892);
        assert_eq!(multipliers_of(&p(0, 2)), 0);
        assert!(p(0, 2).validate().is_err());
    }

    #[test]
    fn metric_examples() {
        let r = metrics_from_gops(2529.0, 2144, 388e6);
        assert!((r.gops_per_multiplier - 1.1796).abs() < 1e-4);
        assert!((r.ops_per_multiplier_per_cycle - 3.0401).abs() < 1e-4);
        assert!(r.roof_flags.exceeds_baseline_roof && r.roof_flags.within_fast_roof);
        let z = metrics(1_000, 0.0, 2144, 388e6);
        assert_eq!((z.gops, z.gops_per_multiplier, z.ops_per_multiplier_per_cycle), (0.0, 0.0, 0.0));
    }

    #[test]
    fn model_op_counts() {
        let fc = Layer::Fc {
            m: 1,
            n: 1000,
            k: 4096,
            repeat: 1,
        };
        assert_eq!(model_ops(&[fc]).unwrap(), 8_192_000);
        assert_eq!(model_ops(&[]).unwrap(), 0);
    }
}
