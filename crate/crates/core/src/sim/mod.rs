//! Clocked functional simulator of baseline, FIP and FFIP matrix units.
//!
//! [`simulate_tile`] streams one A tile against one stationary weight tile.
//! [`run_gemm`] and [`run_passes`] drive a whole GEMM as a sequence of tile
//! passes with double-buffered weights: while one buffer is in use the loader
//! fills the other one MXU row per cycle, so weight loads overlap compute and
//! input vectors from consecutive passes issue back to back.

mod mxu;
mod wire;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{product_format, Variant};
use crate::matrix::{ceil_log2, IntFormat, QMatrix};
use crate::quant::{PreparedWeights, QuantSpec, WeightTile};

use mxu::{Mxu, Output, Tag};
pub use wire::CriticalPath;

/// MXU geometry in effective (baseline-equivalent) MAC units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MxuConfig {
    pub x: usize,
    pub y: usize,
    pub variant: Variant,
    pub quant: QuantSpec,
}

impl MxuConfig {
    pub fn new(x: usize, y: usize, variant: Variant, quant: QuantSpec) -> Result<Self> {
        let cfg = Self { x, y, variant, quant };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x == 0 || self.y == 0 || !self.x.is_multiple_of(4) || !self.y.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "MXU geometry {}x{} must be positive multiples of 4",
                self.x, self.y
            )));
        }
        self.quant.validate_structure()
    }

    /// Instantiated MAC columns: `x`, or `x/2` for the fast variants.
    pub fn mac_columns(&self) -> usize {
        if self.variant.is_fast() {
            self.x / 2
        } else {
            self.x
        }
    }

    /// Instantiated MAC rows: `y`, or `y + 1` with the α row.
    pub fn mac_rows(&self) -> usize {
        if self.variant.is_fast() {
            self.y + 1
        } else {
            self.y
        }
    }

    /// Multipliers in the MAC array, including the α row.
    pub fn multipliers(&self) -> usize {
        self.mac_columns() * self.mac_rows()
    }

    /// Depth of skew shift register `SR_k`, `k` in `1..=x`.
    pub fn skew_depth(&self, k: usize) -> usize {
        if self.variant.is_fast() {
            k.div_ceil(2)
        } else {
            k
        }
    }

    /// Partial-sum register format.
    ///
    /// Baseline: `2w + ⌈log2 x⌉ + 1`. Fast variants sum `x/2` products of
    /// `(w+d)`-bit factors: `2(w+d) + ⌈log2(x/2)⌉`, which is the same
    /// `2w + ⌈log2 x⌉ + 1` when `d = 1`.
    pub fn acc_format(&self) -> IntFormat {
        let q = &self.quant;
        let signed = q.a_signed || q.b_signed;
        let bits = if self.variant.is_fast() {
            2 * (q.w + q.d) + ceil_log2(self.x / 2)
        } else {
            2 * q.w + ceil_log2(self.x) + 1
        };
        IntFormat::new(bits, signed)
    }
}

/// Simulator switches that are not part of the hardware configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    /// Feed the array through the triangular skew buffer. Disabling it is a
    /// mutation check only; results are then wrong.
    pub skew: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { skew: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimResult {
    pub c_tile: QMatrix,
    /// Clock edges from presenting the first input vector to latching the
    /// first output.
    pub first_output_latency: u64,
    pub total_cycles: u64,
    /// Busy multipliers (array plus α row) in each cycle.
    pub mac_busy_histogram: Vec<u32>,
    /// Outputs leaving the array in each cycle.
    pub outputs_per_cycle: Vec<u32>,
    pub vectors: u64,
    /// Cycles in which the issue port had work but no loaded weights.
    pub stall_cycles: u64,
    pub critical_path: CriticalPath,
}

/// One pass of input vectors against one stationary tile.
#[derive(Debug, Clone)]
pub struct Pass<'a> {
    pub tile: &'a WeightTile,
    /// First output column this tile covers.
    pub n_offset: usize,
    /// `(output row, x-wide input vector)` in issue order.
    pub rows: Vec<(usize, Vec<i64>)>,
}

/// Accumulated raw outputs of [`run_passes`]: `Σ` over passes of
/// `A_tile·W_tile − α − r·Σa`, before any bias or β.
#[derive(Debug, Clone)]
pub struct PassOutput {
    pub m: usize,
    pub n: usize,
    pub acc: Vec<i64>,
    pub stats: SimResult,
}

/// Runs `passes` back to back on one MXU instance.
pub fn run_passes(cfg: &MxuConfig, passes: &[Pass<'_>], m: usize, n: usize, opts: SimOptions) -> Result<PassOutput> {
    cfg.validate()?;
    for p in passes {
        if p.tile.variant != cfg.variant {
            return Err(Error::Config(format!(
                "weight tile prepared for {} on a {} MXU",
                p.tile.variant, cfg.variant
            )));
        }
        if p.tile.rows() != cfg.x || p.tile.cols() != cfg.y {
            return Err(Error::Shape(format!(
                "weight tile is {}x{}, MXU is {}x{}",
                p.tile.rows(),
                p.tile.cols(),
                cfg.x,
                cfg.y
            )));
        }
        if let Some((row, v)) = p.rows.iter().find(|(r, v)| *r >= m || v.len() != cfg.x) {
            return Err(Error::Shape(format!(
                "input vector for row {row} has {} lanes (x = {}, m = {m})",
                v.len(),
                cfg.x
            )));
        }
    }

    let mut mxu = Mxu::new(cfg, opts.skew);
    let mut acc = vec![0i64; m * n];
    let mut ids: Vec<(usize, usize)> = Vec::new(); // id -> (pass, row index)
    let mut histogram = Vec::new();
    let mut outputs_per_cycle = Vec::new();
    let mut outputs = Vec::new();

    let total_vectors: usize = passes.iter().map(|p| p.rows.len()).sum();
    let expected_outputs = total_vectors * cfg.y;
    let mut produced = 0usize;

    // Loader: next pass to load, progress through its rows, loaded flags.
    let mut load_pass = 0usize;
    let mut load_row = 0usize;
    let mut loaded = vec![false; passes.len()];
    let mut in_flight = [0u32; 2];
    // Issue: current pass and position within it.
    let mut issue_pass = 0usize;
    let mut issue_row = 0usize;
    let mut first_issue: Option<u64> = None;
    let mut first_output: Option<u64> = None;
    let mut stall_cycles = 0u64;

    let mut cycle = 0u64;
    while produced < expected_outputs || !mxu.is_empty() {
        if issue_pass >= passes.len() && mxu.is_empty() {
            break;
        }
        // Weight loader: one MXU row per cycle into the idle buffer.
        if load_pass < passes.len() {
            let buf = (load_pass % 2) as u8;
            let prev_done = load_pass < 2 || issue_pass > load_pass - 2;
            if load_row > 0 || (prev_done && in_flight[buf as usize] == 0) {
                mxu.load_row(buf, passes[load_pass].tile, load_row)?;
                load_row += 1;
                if load_row == cfg.y {
                    loaded[load_pass] = true;
                    load_pass += 1;
                    load_row = 0;
                }
            }
        }

        while issue_pass < passes.len() && issue_row >= passes[issue_pass].rows.len() {
            issue_pass += 1;
            issue_row = 0;
        }
        let mut input = None;
        if issue_pass < passes.len() {
            if loaded[issue_pass] {
                let buf = (issue_pass % 2) as u8;
                let id = ids.len() as u32;
                ids.push((issue_pass, issue_row));
                in_flight[buf as usize] += 1;
                input = Some((passes[issue_pass].rows[issue_row].1.as_slice(), Tag { id, buf }));
                first_issue.get_or_insert(cycle);
                issue_row += 1;
            } else if first_issue.is_some() {
                stall_cycles += 1;
            }
        }

        outputs.clear();
        let act = mxu.step(input, &mut outputs)?;
        for (count, retired) in in_flight.iter_mut().zip(act.retired) {
            *count -= retired;
        }
        histogram.push(act.busy_multipliers);
        outputs_per_cycle.push(outputs.len() as u32);
        for &Output { tag, row, value } in &outputs {
            let (pass, r) = ids[tag.id as usize];
            let p = &passes[pass];
            let (out_row, col) = (p.rows[r].0, p.n_offset + row);
            if col < n {
                acc[out_row * n + col] += value;
            }
            produced += 1;
            first_output.get_or_insert(cycle);
        }
        cycle += 1;
    }

    let latency = match (first_issue, first_output) {
        (Some(i), Some(o)) => o - i + 1,
        _ => 0,
    };
    let stats = SimResult {
        c_tile: QMatrix::zeros(0, 0, IntFormat::working()),
        first_output_latency: latency,
        total_cycles: cycle,
        mac_busy_histogram: histogram,
        outputs_per_cycle,
        vectors: total_vectors as u64,
        stall_cycles,
        critical_path: mxu.critical_path(),
    };
    Ok(PassOutput { m, n, acc, stats })
}

fn output_format(cfg: &MxuConfig, k: usize) -> IntFormat {
    product_format(cfg.quant.a_format(), cfg.quant.b_format(), k).widen(2)
}

fn check_a(cfg: &MxuConfig, a: &QMatrix) -> Result<()> {
    let fmt = cfg.quant.a_format();
    if a.format().bits > fmt.bits || (a.format().signed && !fmt.signed) {
        // Values are still checked one by one at the skew buffer.
        for &v in a.data() {
            fmt.check("input element", v)?;
        }
    }
    Ok(())
}

/// Streams every row of `a_tile` through the MXU holding `weights`.
///
/// `c_tile` is the exact product `a_tile · (B − R)` where `B` is the tile
/// the weights were prepared from and `R` the weight zero point: the α row
/// removes `α + r·Σa` on the way out and the tile's β is subtracted at the
/// bias stage.
pub fn simulate_tile(config: &MxuConfig, a_tile: &QMatrix, weights: &WeightTile) -> Result<SimResult> {
    simulate_tile_with(config, a_tile, weights, SimOptions::default())
}

pub fn simulate_tile_with(config: &MxuConfig, a_tile: &QMatrix, weights: &WeightTile, opts: SimOptions) -> Result<SimResult> {
    if a_tile.cols() != config.x {
        return Err(Error::Shape(format!(
            "A tile has {} columns, MXU width is {}",
            a_tile.cols(),
            config.x
        )));
    }
    check_a(config, a_tile)?;
    let m = a_tile.rows();
    let pass = Pass {
        tile: weights,
        n_offset: 0,
        rows: (0..m).map(|i| (i, a_tile.row(i).to_vec())).collect(),
    };
    let out = run_passes(config, std::slice::from_ref(&pass), m, config.y, opts)?;
    let mut data = out.acc;
    for i in 0..m {
        for (j, b) in weights.beta.iter().enumerate() {
            data[i * config.y + j] -= b;
        }
    }
    let mut stats = out.stats;
    stats.c_tile = QMatrix::new(m, config.y, output_format(config, config.x), data)?;
    Ok(stats)
}

/// Full GEMM `A · (B − R) + bias` through the MXU, one pass per weight tile.
/// β arrives already folded into `prepared.folded_bias`.
pub fn run_gemm(config: &MxuConfig, a: &QMatrix, prepared: &PreparedWeights) -> Result<(QMatrix, SimResult)> {
    run_gemm_with(config, a, prepared, SimOptions::default())
}

pub fn run_gemm_with(
    config: &MxuConfig,
    a: &QMatrix,
    prepared: &PreparedWeights,
    opts: SimOptions,
) -> Result<(QMatrix, SimResult)> {
    if a.cols() != prepared.k {
        return Err(Error::Shape(format!(
            "A has {} columns but the weights have K = {}",
            a.cols(),
            prepared.k
        )));
    }
    if prepared.x != config.x || prepared.y != config.y || prepared.variant != config.variant {
        return Err(Error::Config("weights were prepared for a different MXU".into()));
    }
    if prepared.b_zero_point != config.quant.b_zero_point {
        return Err(Error::Config("weight zero point differs between MXU and weights".into()));
    }
    check_a(config, a)?;
    let (m, n, x) = (a.rows(), prepared.n, config.x);

    let mut passes = Vec::with_capacity(prepared.tiles.len());
    for nt in 0..prepared.n_tiles {
        for kt in 0..prepared.k_tiles {
            let rows = (0..m).map(|i| (i, a.window(i, kt * x, 1, x).into_data())).collect();
            passes.push(Pass {
                tile: prepared.tile(kt, nt),
                n_offset: nt * config.y,
                rows,
            });
        }
    }
    let out = run_passes(config, &passes, m, n, opts)?;
    let mut data = out.acc;
    for i in 0..m {
        for j in 0..n {
            data[i * n + j] += prepared.folded_bias[j];
        }
    }
    let mut stats = out.stats;
    let c = QMatrix::new(m, n, IntFormat::working(), data)?;
    stats.c_tile = c.clone();
    Ok((c, stats))
}

/// First-output latency of a full `x`-row tile on `config`.
pub fn measure_latency(config: &MxuConfig) -> Result<u64> {
    let a = QMatrix::zeros(config.x, config.x, config.quant.a_format());
    let b = QMatrix::zeros(config.x, config.y, config.quant.b_format());
    let tile = WeightTile::new(config.variant, &b)?;
    Ok(simulate_tile(config, &a, &tile)?.first_output_latency)
}

/// Longest register-to-register path of a variant's datapath, measured by
/// running a small tile through the simulator.
pub fn critical_path_stages(variant: Variant) -> Result<CriticalPath> {
    let cfg = MxuConfig::new(4, 4, variant, QuantSpec::signed(8).with_b_zero_point(3))?;
    let a = QMatrix::new(4, 4, cfg.quant.a_format(), (1..=16).collect())?;
    let b = QMatrix::new(4, 4, cfg.quant.b_format(), (0..16).map(|v| 7 - v).collect())?;
    let tile = WeightTile::new(variant, &b)?;
    Ok(simulate_tile(&cfg, &a, &tile)?.critical_path)
}

/// Baseline-equivalent operations per multiplier per cycle, `2·x·y` per
/// processed input vector over every simulated cycle.
pub fn ops_per_mult_cycle(result: &SimResult, config: &MxuConfig) -> f64 {
    if result.total_cycles == 0 {
        return 0.0;
    }
    let ops = 2.0 * (config.x * config.y) as f64 * result.vectors as f64;
    ops / (config.multipliers() as f64 * result.total_cycles as f64)
}

/// Like [`ops_per_mult_cycle`] but refuses runs where fill, drain, weight
/// loads or stalls take 10% or more of the cycles.
pub fn steady_state_ops_per_mult_cycle(result: &SimResult, config: &MxuConfig) -> Result<f64> {
    let full = config.multipliers() as u32;
    let fill_drain = result.mac_busy_histogram.iter().filter(|&&b| b < full).count() as u64;
    if result.total_cycles == 0 || fill_drain * 10 >= result.total_cycles {
        return Err(Error::InsufficientRun {
            fill_drain,
            total: result.total_cycles,
        });
    }
    Ok(ops_per_mult_cycle(result, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gemm::{gemm_baseline, OpCounter};

    fn cfg(x: usize, y: usize, variant: Variant) -> MxuConfig {
        MxuConfig::new(x, y, variant, QuantSpec::signed(8)).unwrap()
    }

    #[test]
    fn geometry() {
        let c = cfg(8, 12, Variant::Ffip);
        assert_eq!((c.mac_columns(), c.mac_rows(), c.multipliers()), (4, 13, 52));
        let depths: Vec<usize> = (1..=8).map(|k| c.skew_depth(k)).collect();
        assert_eq!(depths, vec![1, 1, 2, 2, 3, 3, 4, 4]);
        let b = cfg(8, 12, Variant::Baseline);
        assert_eq!((b.mac_columns(), b.mac_rows()), (8, 12));
        assert_eq!(b.skew_depth(5), 5);
        assert_eq!(c.acc_format(), IntFormat::signed(16 + 3 + 1));
        assert!(MxuConfig::new(6, 8, Variant::Fip, QuantSpec::signed(8)).is_err());
    }

    #[test]
    fn baseline_identity_tile() {
        let c = cfg(8, 8, Variant::Baseline);
        let mut rng = rand::thread_rng();
        let b = QMatrix::random(&mut rng, 8, 8, IntFormat::signed(8));
        let tile = WeightTile::new(Variant::Baseline, &b).unwrap();
        let r = simulate_tile(&c, &QMatrix::identity(8, IntFormat::signed(8)), &tile).unwrap();
        assert_eq!(r.c_tile.data(), b.data());
    }

    #[test]
    fn latency_formula() {
        for x in [4, 8, 16] {
            for v in Variant::ALL {
                let c = cfg(x, 8, v);
                let expected = if v.is_fast() { x / 2 + 2 } else { x + 2 } as u64;
                assert_eq!(measure_latency(&c).unwrap(), expected, "{v} x={x}");
            }
        }
    }

    #[test]
    fn tile_shape_errors() {
        let c = cfg(8, 8, Variant::Fip);
        let b = QMatrix::zeros(8, 8, IntFormat::signed(8));
        let tile = WeightTile::new(Variant::Fip, &b).unwrap();
        let a = QMatrix::zeros(2, 4, IntFormat::signed(8));
        assert!(matches!(simulate_tile(&c, &a, &tile), Err(Error::Shape(_))));
        let wrong = WeightTile::new(Variant::Ffip, &b).unwrap();
        let a = QMatrix::zeros(2, 8, IntFormat::signed(8));
        assert!(simulate_tile(&c, &a, &wrong).is_err());
    }

    #[test]
    fn degenerate_gemm_is_one_tile() {
        let c = cfg(8, 8, Variant::Ffip);
        let mut rng = rand::thread_rng();
        let a = QMatrix::random(&mut rng, 5, 8, IntFormat::signed(8));
        let b = QMatrix::random(&mut rng, 8, 8, IntFormat::signed(8));
        let prepared = PreparedWeights::new(Variant::Ffip, &b, None, 0, 8, 8).unwrap();
        let (got, _) = run_gemm(&c, &a, &prepared).unwrap();
        let tile = simulate_tile(&c, &a, prepared.tile(0, 0)).unwrap();
        assert_eq!(got.data(), tile.c_tile.data());
        let want = gemm_baseline(&a, &b, &mut OpCounter::new()).unwrap();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn short_run_is_rejected_and_below_roof() {
        let c = cfg(8, 8, Variant::Ffip);
        let a = QMatrix::zeros(4, 8, IntFormat::signed(8));
        let tile = WeightTile::new(Variant::Ffip, &QMatrix::zeros(8, 8, IntFormat::signed(8))).unwrap();
        let r = simulate_tile(&c, &a, &tile).unwrap();
        assert!(matches!(
            steady_state_ops_per_mult_cycle(&r, &c),
            Err(Error::InsufficientRun { .. })
        ));
        assert!(ops_per_mult_cycle(&r, &c) < 4.0);
    }

    #[test]
    fn multi_tile_gemm_with_zero_point_and_bias() {
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for variant in Variant::ALL {
            for (a_signed, b_signed) in [(true, true), (false, false), (false, true), (true, false)] {
                let quant = QuantSpec::new(8, a_signed, b_signed).with_b_zero_point(if b_signed { -3 } else { 5 });
                let c = MxuConfig::new(8, 4, variant, quant).unwrap();
                let a = QMatrix::random(&mut rng, 9, 19, quant.a_format());
                let b = QMatrix::random(&mut rng, 19, 10, quant.b_format());
                let bias: Vec<i64> = (0..10).map(|j| j * 100 - 400).collect();
                let prepared = PreparedWeights::new(variant, &b, Some(&bias), quant.b_zero_point, 8, 4).unwrap();
                let (got, stats) = run_gemm(&c, &a, &prepared).unwrap();
                let shifted = b.map(IntFormat::working(), |v| v - quant.b_zero_point).unwrap();
                let want = gemm_baseline(&a, &shifted, &mut OpCounter::new()).unwrap();
                for i in 0..9 {
                    for j in 0..10 {
                        assert_eq!(got.get(i, j), want.get(i, j) + bias[j], "{variant} {a_signed}/{b_signed}");
                    }
                }
                assert_eq!(stats.vectors, 9 * 3 * 3);
            }
        }
    }

    #[test]
    fn measured_critical_paths() {
        let path = |v| critical_path_stages(v).unwrap();
        let cp = |adders, multipliers| CriticalPath { adders, multipliers };
        assert_eq!(path(Variant::Baseline), cp(1, 1));
        assert_eq!(path(Variant::Fip), cp(2, 1));
        assert_eq!(path(Variant::Ffip), cp(1, 1));
    }

    #[test]
    fn long_run_approaches_roof() {
        let c = cfg(8, 8, Variant::Ffip);
        let a = QMatrix::zeros(400, 16, IntFormat::signed(8));
        let b = QMatrix::zeros(16, 16, IntFormat::signed(8));
        let prepared = PreparedWeights::new(Variant::Ffip, &b, None, 0, 8, 8).unwrap();
        let (_, stats) = run_gemm(&c, &a, &prepared).unwrap();
        assert_eq!(stats.stall_cycles, 0);
        let ratio = steady_state_ops_per_mult_cycle(&stats, &c).unwrap();
        assert!(ratio > 3.3 && ratio < 4.0, "{ratio}");
    }

    #[test]
    fn no_skew_breaks_results() {
        let c = cfg(8, 8, Variant::Ffip);
        let mut rng = rand::thread_rng();
        let a = QMatrix::random(&mut rng, 6, 8, IntFormat::signed(8));
        let b = QMatrix::random(&mut rng, 8, 8, IntFormat::signed(8));
        let tile = WeightTile::new(Variant::Ffip, &b).unwrap();
        let good = simulate_tile(&c, &a, &tile).unwrap();
        let bad = simulate_tile_with(&c, &a, &tile, SimOptions { skew: false }).unwrap();
        let want = gemm_baseline(&a, &b, &mut OpCounter::new()).unwrap();
        assert_eq!(good.c_tile.data(), want.data());
        assert_ne!(bad.c_tile.data(), want.data());
    }
}
