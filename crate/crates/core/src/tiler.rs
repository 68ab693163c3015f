//! Convolution as tiled GEMM without an im2col copy.
//!
//! A seven-digit counter nest walks the feature store and emits one address
//! per MXU input vector. Each store location holds `x` consecutive input
//! channels; locations are laid out by channel group, then row, then column,
//! with zero halos for padding:
//!
//! ```text
//! address = group · Hp·Wp + row · Wp + col
//! ```
//!
//! Digits, outermost first: output-column tile (`n_t`), output-row tile
//! (`h_t`), kernel row, kernel column, channel group, output row within the
//! tile, output column. The last two are the GEMM M dimension, the middle
//! three the K dimension. `address = m_offset + k_offset`, where each offset
//! is the sum of its digits' `index × stride`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, OpCounter, Variant};
use crate::matrix::{IntFormat, QMatrix};
use crate::quant::PreparedWeights;
use crate::sim::{run_passes, MxuConfig, Pass, SimOptions, SimResult};

/// Default cap on output pixels per row tile.
pub const DEFAULT_MAX_M_TILE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub cin: usize,
    pub h: usize,
    pub w_dim: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerShape {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.cin, self.h, self.w_dim, self.cout, self.kh, self.kw, self.stride];
        if dims.contains(&0) {
            return Err(Error::Shape(format!("layer has a zero dimension: {self:?}")));
        }
        if self.padding >= self.kh || self.padding >= self.kw {
            return Err(Error::Shape(format!(
                "padding {} must be smaller than the {}x{} kernel",
                self.padding, self.kh, self.kw
            )));
        }
        Ok(())
    }

    pub fn padded_h(&self) -> usize {
        self.h + 2 * self.padding
    }

    pub fn padded_w(&self) -> usize {
        self.w_dim + 2 * self.padding
    }

    /// Output `(height, width)`; a kernel larger than the padded input is a
    /// planning error.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        self.validate()?;
        let (hp, wp) = (self.padded_h(), self.padded_w());
        if hp < self.kh || wp < self.kw {
            return Err(Error::Plan(format!(
                "{}x{} kernel does not fit the {hp}x{wp} padded input",
                self.kh, self.kw
            )));
        }
        Ok(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    /// Multiply-accumulates of the layer, `cout·cin·kh·kw·oh·ow`.
    pub fn macs(&self) -> Result<u64> {
        let (oh, ow) = self.output_dims()?;
        Ok((self.cout * self.cin * self.kh * self.kw * oh * ow) as u64)
    }
}

/// Digit positions in the counter nest, outermost first.
pub const DIGIT_NAMES: [&str; 7] = ["n_t", "h_t", "kh", "kw", "cin_t", "h", "w"];
const N_T: usize = 0;
const H_T: usize = 1;
const KH: usize = 2;
const KW: usize = 3;
const CIN_T: usize = 4;
const H: usize = 5;
const W: usize = 6;
const M_DIGITS: [usize; 3] = [H_T, H, W];
const K_DIGITS: [usize; 3] = [KH, KW, CIN_T];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digit {
    pub extent: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilerPlan {
    pub layer: LayerShape,
    pub x: usize,
    pub y: usize,
    /// `n_t, h_t, kh, kw, cin_t, h, w`.
    pub digits: [Digit; 7],
    pub channel_groups: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub rows_per_tile: usize,
}

/// One emitted address with the counter state that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub counters: [usize; 7],
    pub m_offset: usize,
    pub k_offset: usize,
    pub address: usize,
}

impl TilerPlan {
    /// A plan from raw digits, e.g. for hand-written nests. Layer metadata
    /// is left degenerate.
    pub fn from_digits(digits: [Digit; 7]) -> Result<Self> {
        if digits.iter().any(|d| d.extent == 0) {
            return Err(Error::Plan("every digit extent must be at least 1".into()));
        }
        Ok(Self {
            layer: LayerShape {
                cin: 1,
                h: 1,
                w_dim: 1,
                cout: 1,
                kh: 1,
                kw: 1,
                stride: 1,
                padding: 0,
            },
            x: 1,
            y: 1,
            digits,
            channel_groups: 1,
            out_h: 1,
            out_w: 1,
            rows_per_tile: 1,
        })
    }

    pub fn len(&self) -> usize {
        self.digits.iter().map(|d| d.extent).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input vectors per GEMM pass (the `h × w` inner digits).
    pub fn pass_len(&self) -> usize {
        self.digits[H].extent * self.digits[W].extent
    }

    pub fn k_tiles(&self) -> usize {
        K_DIGITS.iter().map(|&d| self.digits[d].extent).product()
    }

    pub fn store_locations(&self) -> usize {
        self.channel_groups * self.layer.padded_h() * self.layer.padded_w()
    }

    fn max_offset(&self, digits: &[usize]) -> usize {
        digits
            .iter()
            .map(|&d| (self.digits[d].extent - 1) * self.digits[d].stride)
            .sum()
    }

    /// Largest `m_offset` and `k_offset` the nest can produce.
    pub fn offset_ranges(&self) -> (usize, usize) {
        (self.max_offset(&M_DIGITS), self.max_offset(&K_DIGITS))
    }

    pub fn walk(&self) -> Walk<'_> {
        Walk {
            plan: self,
            counters: [0; 7],
            done: self.is_empty(),
        }
    }

    /// Output pixel (GEMM row) addressed by a counter state.
    pub fn output_row(&self, counters: &[usize; 7]) -> usize {
        let oh = counters[H_T] * self.rows_per_tile + counters[H];
        oh * self.out_w + counters[W]
    }

    /// GEMM K-tile index of a counter state, matching the weight row order
    /// `(kh, kw, channel)`.
    pub fn k_tile(&self, counters: &[usize; 7]) -> usize {
        (counters[KH] * self.digits[KW].extent + counters[KW]) * self.digits[CIN_T].extent + counters[CIN_T]
    }
}

pub struct Walk<'a> {
    plan: &'a TilerPlan,
    counters: [usize; 7],
    done: bool,
}

impl Iterator for Walk<'_> {
    type Item = Access;

    fn next(&mut self) -> Option<Access> {
        if self.done {
            return None;
        }
        let c = self.counters;
        let d = &self.plan.digits;
        let offset = |set: &[usize]| set.iter().map(|&i| c[i] * d[i].stride).sum::<usize>();
        let (m_offset, k_offset) = (offset(&M_DIGITS), offset(&K_DIGITS));
        let access = Access {
            counters: c,
            m_offset,
            k_offset,
            address: m_offset + k_offset,
        };
        self.done = true;
        for i in (0..7).rev() {
            self.counters[i] += 1;
            if self.counters[i] < d[i].extent {
                self.done = false;
                break;
            }
            self.counters[i] = 0;
        }
        Some(access)
    }
}

pub fn address_stream(plan: &TilerPlan) -> Vec<usize> {
    plan.walk().map(|a| a.address).collect()
}

pub fn plan_tiler(layer: &LayerShape, mxu: &MxuConfig) -> Result<TilerPlan> {
    plan_tiler_with_m_tile(layer, mxu, DEFAULT_MAX_M_TILE)
}

/// Plans the nest with at most `max_m` output pixels per row tile (at least
/// one full output row).
pub fn plan_tiler_with_m_tile(layer: &LayerShape, mxu: &MxuConfig, max_m: usize) -> Result<TilerPlan> {
    let (out_h, out_w) = layer.output_dims()?;
    if mxu.x == 0 || mxu.y == 0 {
        return Err(Error::Plan("MXU has a zero dimension".into()));
    }
    let (hp, wp, s) = (layer.padded_h(), layer.padded_w(), layer.stride);
    let channel_groups = layer.cin.div_ceil(mxu.x);
    let rows_per_tile = (1..=out_h)
        .rev()
        .find(|r| out_h % r == 0 && r * out_w <= max_m.max(out_w))
        .unwrap_or(1);
    let digit = |extent, stride| Digit { extent, stride };
    let digits = [
        digit(layer.cout.div_ceil(mxu.y), 0),
        digit(out_h / rows_per_tile, rows_per_tile * s * wp),
        digit(layer.kh, wp),
        digit(layer.kw, 1),
        digit(channel_groups, hp * wp),
        digit(rows_per_tile, s * wp),
        digit(out_w, s),
    ];
    if digits.iter().any(|d| d.extent == 0) {
        return Err(Error::Plan(format!("layer {layer:?} yields an empty tile")));
    }
    let plan = TilerPlan {
        layer: *layer,
        x: mxu.x,
        y: mxu.y,
        digits,
        channel_groups,
        out_h,
        out_w,
        rows_per_tile,
    };
    let (m_max, k_max) = plan.offset_ranges();
    if m_max + k_max >= plan.store_locations() {
        return Err(Error::Plan("address range exceeds the feature store".into()));
    }
    Ok(plan)
}

/// Input activations, `[channel][row][col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMap {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub format: IntFormat,
    pub data: Vec<i64>,
}

impl FeatureMap {
    pub fn new(channels: usize, h: usize, w: usize, format: IntFormat, data: Vec<i64>) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(Error::Length {
                expected: channels * h * w,
                got: data.len(),
            });
        }
        for &v in &data {
            format.check("feature map element", v)?;
        }
        Ok(Self { channels, h, w, format, data })
    }

    pub fn zeros(channels: usize, h: usize, w: usize, format: IntFormat) -> Self {
        Self {
            channels,
            h,
            w,
            format,
            data: vec![0; channels * h * w],
        }
    }

    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R, channels: usize, h: usize, w: usize, format: IntFormat) -> Self {
        let data = QMatrix::random(rng, channels, h * w, format).into_data();
        Self { channels, h, w, format, data }
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> i64 {
        self.data[(c * self.h + r) * self.w + col]
    }
}

/// Convolution weights, `[out][in][kernel row][kernel col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvWeights {
    pub cout: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub format: IntFormat,
    pub data: Vec<i64>,
}

impl ConvWeights {
    pub fn new(cout: usize, cin: usize, kh: usize, kw: usize, format: IntFormat, data: Vec<i64>) -> Result<Self> {
        let len = cout * cin * kh * kw;
        if data.len() != len {
            return Err(Error::Length {
                expected: len,
                got: data.len(),
            });
        }
        for &v in &data {
            format.check("conv weight", v)?;
        }
        Ok(Self { cout, cin, kh, kw, format, data })
    }

    pub fn random<R: rand::Rng + ?Sized>(
        rng: &mut R,
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        format: IntFormat,
    ) -> Self {
        let data = QMatrix::random(rng, cout, cin * kh * kw, format).into_data();
        Self { cout, cin, kh, kw, format, data }
    }

    pub fn get(&self, o: usize, c: usize, r: usize, col: usize) -> i64 {
        self.data[((o * self.cin + c) * self.kh + r) * self.kw + col]
    }

    /// GEMM weight matrix with rows ordered `(kh, kw, channel)` and channels
    /// padded to `groups · x`.
    pub fn to_gemm(&self, x: usize, groups: usize) -> Result<QMatrix> {
        let cin_pad = groups * x;
        let k = self.kh * self.kw * cin_pad;
        let mut data = vec![0; k * self.cout];
        for r in 0..self.kh {
            for col in 0..self.kw {
                for c in 0..self.cin {
                    let row = (r * self.kw + col) * cin_pad + c;
                    for o in 0..self.cout {
                        data[row * self.cout + o] = self.get(o, c, r, col);
                    }
                }
            }
        }
        QMatrix::new(k, self.cout, self.format, data)
    }

    fn check_layer(&self, layer: &LayerShape) -> Result<()> {
        if (self.cout, self.cin, self.kh, self.kw) != (layer.cout, layer.cin, layer.kh, layer.kw) {
            return Err(Error::Shape(format!(
                "weights are {}x{}x{}x{}, layer expects {}x{}x{}x{}",
                self.cout, self.cin, self.kh, self.kw, layer.cout, layer.cin, layer.kh, layer.kw
            )));
        }
        Ok(())
    }
}

/// Zero-haloed, channel-grouped activation memory. Each location holds `x`
/// channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureStore {
    x: usize,
    locations: usize,
    data: Vec<i64>,
}

impl FeatureStore {
    pub fn load(input: &FeatureMap, layer: &LayerShape, x: usize) -> Result<Self> {
        if (input.channels, input.h, input.w) != (layer.cin, layer.h, layer.w_dim) {
            return Err(Error::Shape(format!(
                "input is {}x{}x{}, layer expects {}x{}x{}",
                input.channels, input.h, input.w, layer.cin, layer.h, layer.w_dim
            )));
        }
        let (hp, wp, p) = (layer.padded_h(), layer.padded_w(), layer.padding);
        let groups = layer.cin.div_ceil(x);
        let locations = groups * hp * wp;
        let mut data = vec![0; locations * x];
        for c in 0..layer.cin {
            let (g, lane) = (c / x, c % x);
            for r in 0..layer.h {
                for col in 0..layer.w_dim {
                    let loc = (g * hp + r + p) * wp + col + p;
                    data[loc * x + lane] = input.get(c, r, col);
                }
            }
        }
        Ok(Self { x, locations, data })
    }

    pub fn capacity(&self) -> usize {
        self.locations
    }

    pub fn read(&self, address: usize) -> &[i64] {
        &self.data[address * self.x..(address + 1) * self.x]
    }
}

/// Which datapath executes [`conv2d_via_gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvEngine {
    /// Tile-by-tile reference kernels.
    Reference(Variant),
    /// The clocked MXU simulator.
    Systolic,
}

/// Convolution output, `[out channel][row][col]`, and simulator statistics
/// when the systolic engine ran.
#[derive(Debug, Clone)]
pub struct ConvOutput {
    pub map: FeatureMap,
    pub stats: Option<SimResult>,
}

/// Convolves `input` with `weights − r` (r the MXU's weight zero point) by
/// streaming addresses from the tiler against the feature store.
pub fn conv2d_via_gemm(
    layer: &LayerShape,
    input: &FeatureMap,
    weights: &ConvWeights,
    mxu: &MxuConfig,
    engine: ConvEngine,
) -> Result<ConvOutput> {
    weights.check_layer(layer)?;
    let plan = plan_tiler(layer, mxu)?;
    let store = FeatureStore::load(input, layer, mxu.x)?;
    let b = weights.to_gemm(mxu.x, plan.channel_groups)?;
    let (m, n) = (plan.out_h * plan.out_w, layer.cout);
    let r = mxu.quant.b_zero_point;

    let accesses: Vec<Access> = plan.walk().collect();
    let pass_len = plan.pass_len();
    let (acc, stats) = match engine {
        ConvEngine::Reference(variant) => {
            let mut acc = vec![0i64; m * n];
            for pass in accesses.chunks(pass_len) {
                let c0 = pass[0].counters;
                let rows: Vec<&[i64]> = pass.iter().map(|a| store.read(a.address)).collect();
                let a_tile = QMatrix::from_rows(input.format, &rows)?;
                let b_tile = b
                    .window(plan.k_tile(&c0) * mxu.x, c0[N_T] * mxu.y, mxu.x, mxu.y)
                    .map(IntFormat::signed(b.format().bits + 2), |v| v - r)?;
                let c = gemm(variant, &a_tile, &b_tile, &mut OpCounter::new())?;
                for (i, a) in pass.iter().enumerate() {
                    let row = plan.output_row(&a.counters);
                    for j in 0..mxu.y.min(n - c0[N_T] * mxu.y) {
                        acc[row * n + c0[N_T] * mxu.y + j] += c.get(i, j);
                    }
                }
            }
            (acc, None)
        }
        ConvEngine::Systolic => {
            let prepared = PreparedWeights::new(mxu.variant, &b, None, r, mxu.x, mxu.y)?;
            let passes: Vec<Pass<'_>> = accesses
                .chunks(pass_len)
                .map(|pass| {
                    let c0 = pass[0].counters;
                    Pass {
                        tile: prepared.tile(plan.k_tile(&c0), c0[N_T]),
                        n_offset: c0[N_T] * mxu.y,
                        rows: pass
                            .iter()
                            .map(|a| (plan.output_row(&a.counters), store.read(a.address).to_vec()))
                            .collect(),
                    }
                })
                .collect();
            let out = run_passes(mxu, &passes, m, n, SimOptions::default())?;
            let mut acc = out.acc;
            for i in 0..m {
                for j in 0..n {
                    acc[i * n + j] += prepared.folded_bias[j];
                }
            }
            (acc, Some(out.stats))
        }
    };

    let mut data = vec![0; n * m];
    for p in 0..m {
        for o in 0..n {
            data[o * m + p] = acc[p * n + o];
        }
    }
    let map = FeatureMap::new(n, plan.out_h, plan.out_w, IntFormat::working(), data)?;
    Ok(ConvOutput { map, stats })
}

/// Textbook nested-loop convolution.
pub fn direct_conv2d(layer: &LayerShape, input: &FeatureMap, weights: &ConvWeights) -> Result<FeatureMap> {
    let (oh, ow) = layer.output_dims()?;
    weights.check_layer(layer)?;
    if (input.channels, input.h, input.w) != (layer.cin, layer.h, layer.w_dim) {
        return Err(Error::Shape("input does not match the layer".into()));
    }
    let (s, p) = (layer.stride as isize, layer.padding as isize);
    let mut data = vec![0i64; layer.cout * oh * ow];
    for o in 0..layer.cout {
        for r in 0..oh {
            for col in 0..ow {
                let mut sum = 0i64;
                for c in 0..layer.cin {
                    for i in 0..layer.kh {
                        for j in 0..layer.kw {
                            let ir = r as isize * s + i as isize - p;
                            let ic = col as isize * s + j as isize - p;
                            if ir < 0 || ic < 0 || ir >= layer.h as isize || ic >= layer.w_dim as isize {
                                continue;
                            }
                            sum += input.get(c, ir as usize, ic as usize) * weights.get(o, c, i, j);
                        }
                    }
                }
                data[(o * oh + r) * ow + col] = sum;
            }
        }
    }
    FeatureMap::new(layer.cout, oh, ow, IntFormat::working(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantSpec;
    use rand::SeedableRng;

    fn layer(cin: usize, hw: usize, cout: usize, k: usize, stride: usize, padding: usize) -> LayerShape {
        LayerShape {
            cin,
            h: hw,
            w_dim: hw,
            cout,
            kh: k,
            kw: k,
            stride,
            padding,
        }
    }

    fn mxu(variant: Variant) -> MxuConfig {
        MxuConfig::new(4, 4, variant, QuantSpec::signed(8)).unwrap()
    }

    #[test]
    fn degenerate_nests() {
        let one = Digit { extent: 1, stride: 0 };
        let plan = TilerPlan::from_digits([one; 7]).unwrap();
        assert_eq!(address_stream(&plan), vec![0]);

        let mut digits = [one; 7];
        digits[5] = Digit { extent: 2, stride: 3 };
        digits[6] = Digit { extent: 3, stride: 1 };
        let plan = TilerPlan::from_digits(digits).unwrap();
        assert_eq!(address_stream(&plan), vec![0, 1, 2, 3, 4, 5]);

        digits[0].extent = 0;
        assert!(TilerPlan::from_digits(digits).is_err());
    }

    #[test]
    fn pointwise_layer_is_plain_tiling() {
        let plan = plan_tiler(&layer(8, 4, 8, 1, 1, 0), &mxu(Variant::Ffip)).unwrap();
        assert_eq!(plan.digits[KH].extent, 1);
        assert_eq!(plan.digits[KW].extent, 1);
        let first_pass: Vec<usize> = address_stream(&plan).into_iter().take(16).collect();
        assert_eq!(first_pass, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn layer_validation() {
        assert!(layer(0, 4, 4, 3, 1, 0).validate().is_err());
        assert!(layer(4, 4, 4, 3, 1, 3).validate().is_err());
        assert!(matches!(layer(4, 2, 4, 5, 1, 1).output_dims(), Err(Error::Plan(_))));
        assert_eq!(layer(3, 8, 4, 3, 2, 1).output_dims().unwrap(), (4, 4));
    }

    #[test]
    fn delta_kernel_sums_channels() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let l = layer(6, 5, 1, 1, 2, 0);
        let input = FeatureMap::random(&mut rng, 6, 5, 5, IntFormat::signed(8));
        let w = ConvWeights::new(1, 6, 1, 1, IntFormat::signed(8), vec![1; 6]).unwrap();
        let out = conv2d_via_gemm(&l, &input, &w, &mxu(Variant::Fip), ConvEngine::Reference(Variant::Fip)).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want: i64 = (0..6).map(|ch| input.get(ch, 2 * r, 2 * c)).sum();
                assert_eq!(out.map.get(0, r, c), want);
            }
        }
    }

    #[test]
    fn small_layers_match_direct_convolution() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        for l in [layer(4, 8, 4, 3, 1, 0), layer(5, 8, 6, 3, 2, 1), layer(3, 7, 9, 2, 1, 1)] {
            let input = FeatureMap::random(&mut rng, l.cin, l.h, l.w_dim, IntFormat::signed(8));
            let w = ConvWeights::random(&mut rng, l.cout, l.cin, l.kh, l.kw, IntFormat::signed(8));
            let want = direct_conv2d(&l, &input, &w).unwrap();
            for v in Variant::ALL {
                let got = conv2d_via_gemm(&l, &input, &w, &mxu(v), ConvEngine::Reference(v)).unwrap();
                assert_eq!(got.map, want, "{v} {l:?}");
                let got = conv2d_via_gemm(&l, &input, &w, &mxu(v), ConvEngine::Systolic).unwrap();
                assert_eq!(got.map, want, "systolic {v} {l:?}");
            }
        }
    }

    #[test]
    fn plan_round_trips_through_serde_fields() {
        let plan = plan_tiler(&layer(4, 8, 4, 3, 1, 0), &mxu(Variant::Ffip)).unwrap();
        assert_eq!(plan.len(), address_stream(&plan).len());
        assert_eq!(plan.out_h * plan.out_w, plan.digits[H_T].extent * plan.pass_len());
    }
}
