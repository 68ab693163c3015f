//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ffip_core::cost::{DeviceProfile, Layer};
use ffip_core::gemm::Variant;
use ffip_core::quant::QuantSpec;
use ffip_core::sim::MxuConfig;
use ffip_core::tiler::LayerShape;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    pub out_dir: PathBuf,
    pub mxu: MxuSection,
    pub quant: QuantSection,
    pub verify: VerifySection,
    pub simulate: SimulateSection,
    pub tiler: TilerSection,
    pub device: Option<DeviceProfile>,
    pub cost: CostSection,
    /// Directory relative paths in the file resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            trials: 200,
            out_dir: PathBuf::from("out"),
            mxu: MxuSection::default(),
            quant: QuantSection::default(),
            verify: VerifySection::default(),
            simulate: SimulateSection::default(),
            tiler: TilerSection::default(),
            device: None,
            cost: CostSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MxuSection {
    pub x: usize,
    pub y: usize,
    pub variant: Variant,
}

impl Default for MxuSection {
    fn default() -> Self {
        Self {
            x: 8,
            y: 8,
            variant: Variant::Ffip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub w: u32,
    pub a_signed: bool,
    pub b_signed: bool,
    pub b_zero_point: i64,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            w: 8,
            a_signed: true,
            b_signed: true,
            b_zero_point: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub suites: Vec<String>,
    pub max_m: usize,
    pub max_n: usize,
    pub max_k: usize,
    /// Draw odd inner dimensions as well as even ones.
    pub odd_k: bool,
    /// Zero-pad odd inner dimensions before the fast kernels.
    pub pad_odd_k: bool,
    pub latency_widths: Vec<usize>,
    /// Element width of the exhaustive width sweep.
    pub sweep_bits: u32,
}

pub const SUITES: [&str; 4] = ["equivalence", "counts", "latency", "width"];

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            suites: SUITES.iter().map(|s| s.to_string()).collect(),
            max_m: 16,
            max_n: 16,
            max_k: 32,
            odd_k: false,
            pad_odd_k: true,
            latency_widths: vec![8, 16, 32, 64],
            sweep_bits: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { m: 512, k: 32, n: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilerSection {
    pub layers: Vec<LayerShape>,
    /// Extra randomly drawn layers.
    pub random_layers: usize,
    /// Also run every layer through the MXU simulator.
    pub systolic: bool,
}

impl Default for TilerSection {
    fn default() -> Self {
        Self {
            layers: vec![LayerShape {
                cin: 8,
                h: 8,
                w_dim: 8,
                cout: 8,
                kh: 3,
                kw: 3,
                stride: 1,
                padding: 1,
            }],
            random_layers: 20,
            systolic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub rows: Vec<CostRow>,
    /// Relative tolerance for expected metrics.
    pub tolerance: Option<f64>,
}

/// One measured design point: a variant running a model at a recorded
/// throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRow {
    pub variant: Variant,
    pub model_file: PathBuf,
    pub gops: f64,
    pub expected_gops_per_multiplier: Option<f64>,
    pub expected_ops_per_multiplier_per_cycle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn quant_spec(&self) -> QuantSpec {
        let q = self.quant;
        QuantSpec::new(q.w, q.a_signed, q.b_signed).with_b_zero_point(q.b_zero_point)
    }

    pub fn mxu_config(&self, variant: Variant) -> Result<MxuConfig> {
        Ok(MxuConfig::new(self.mxu.x, self.mxu.y, variant, self.quant_spec())?)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn load_model(&self, path: &Path) -> Result<ModelFile> {
        let full = self.resolve(path);
        let text = std::fs::read_to_string(&full).with_context(|| format!("reading {}", full.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", full.display()))
    }

    pub fn device(&self) -> Result<DeviceProfile> {
        match self.device {
            Some(d) => {
                d.validate()?;
                Ok(d)
            }
            None => bail!("the configuration has no [device] profile"),
        }
    }
}
