//! Register-level state of one MXU and its per-cycle update.
//!
//! Geometry: weights are stationary, the K dimension runs along the array
//! width and partial sums move left to right. Row `j` owns output column `j`.
//! Input vectors enter through the triangular skew buffer and then move down
//! one row per cycle; in the FFIP array the registers that move down are the
//! pre-adder outputs `g`, each row adding its column difference `y`.
//!
//! The fast arrays put an α row between the skew buffer and row 0. It taps the
//! skew-buffer outputs, accumulates `Σ a[2k]·a[2k+1]` along its own partial
//! sum chain and, in the same pass, the plain row sum of `a` for the weight
//! zero-point correction. A single multiplier turns the row sum into `r·Σa`,
//! the sum `α + r·Σa` is delayed down a column of registers on the right edge
//! and subtracted from every row's output as it leaves the array. The
//! baseline array carries the same right-edge column with only the `r·Σa`
//! term.
//!
//! Every register write goes through [`Mxu::latch`], which asserts the value
//! fits the register's declared width and records the logic depth in front of
//! it.

use crate::error::Result;
use crate::gemm::Variant;
use crate::matrix::{ceil_log2, IntFormat};
use crate::quant::WeightTile;

use super::wire::{CriticalPath, Wire};
use super::MxuConfig;

/// Identifies an input vector and the weight buffer it computes against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Tag {
    pub id: u32,
    pub buf: u8,
}

type Slot = Option<(i64, Tag)>;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Output {
    pub tag: Tag,
    pub row: usize,
    pub value: i64,
}

#[derive(Debug, Clone, Copy)]
struct Formats {
    lane: IntFormat,
    input_reg: IntFormat,
    pre_adder: IntFormat,
    product: IntFormat,
    acc: IntFormat,
    weight: IntFormat,
    alpha: IntFormat,
    row_sum: IntFormat,
    side: IntFormat,
}

impl Formats {
    fn new(cfg: &MxuConfig) -> Formats {
        let q = &cfg.quant;
        let a = q.a_format();
        let pre = q.pre_adder_format();
        let lanes = cfg.x;
        let cols = cfg.mac_columns();
        Formats {
            lane: a,
            input_reg: if cfg.variant == Variant::Ffip { pre } else { a },
            pre_adder: pre,
            product: IntFormat::new(2 * pre.bits, pre.signed),
            acc: cfg.acc_format(),
            weight: match cfg.variant {
                Variant::Ffip => IntFormat::signed(q.w + 1),
                _ => q.b_format(),
            },
            alpha: IntFormat::new(2 * q.w + ceil_log2(cols), q.a_signed),
            row_sum: IntFormat::new(q.w + ceil_log2(lanes), q.a_signed),
            side: IntFormat::signed(2 * q.w + ceil_log2(lanes) + 3),
        }
    }
}

/// Per-step activity used for the utilisation histogram.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct StepActivity {
    pub busy_multipliers: u32,
    /// Vectors whose last weight read happened in this step, per buffer.
    pub retired: [u32; 2],
}

pub(crate) struct Mxu {
    variant: Variant,
    lanes: usize,
    cols: usize,
    rows: usize,
    zero_point: i64,
    fmt: Formats,
    /// Skew buffer: `sr[lane]` holds `depth(lane)` stages; the last stage feeds the array.
    sr: Vec<Vec<Slot>>,
    /// Input registers (a for baseline/FIP, g for FFIP), `[row * lanes + lane]`.
    inputs: Vec<Slot>,
    /// Partial-sum registers, `[row * cols + col]`.
    psum: Vec<Slot>,
    /// α-row chain (fast) or row-sum chain (baseline): (α part, row sum, tag).
    side_acc: Vec<Option<(i64, i64, Tag)>>,
    /// Right-edge correction column; entry `j` lines up with row `j`'s output.
    side_chain: Vec<Slot>,
    /// Double-buffered stationary weights, `[buf][row * lanes + lane]`.
    weights: [Vec<i64>; 2],
    critical: CriticalPath,
}

impl Mxu {
    pub fn new(cfg: &MxuConfig, skew: bool) -> Mxu {
        let lanes = cfg.x;
        let cols = cfg.mac_columns();
        let rows = cfg.y;
        let sr = (1..=lanes)
            .map(|k| {
                let depth = if skew { cfg.skew_depth(k) } else { 1 };
                vec![None; depth]
            })
            .collect();
        let side_len = if cfg.variant.is_fast() { cols } else { lanes };
        Mxu {
            variant: cfg.variant,
            lanes,
            cols,
            rows,
            zero_point: cfg.quant.b_zero_point,
            fmt: Formats::new(cfg),
            sr,
            inputs: vec![None; rows * lanes],
            psum: vec![None; rows * cols],
            side_acc: vec![None; side_len],
            side_chain: vec![None; rows],
            weights: [vec![0; rows * lanes], vec![0; rows * lanes]],
            critical: CriticalPath::default(),
        }
    }

    pub fn critical_path(&self) -> CriticalPath {
        self.critical
    }

    fn latch(critical: &mut CriticalPath, format: IntFormat, what: &'static str, w: Wire) -> Result<i64> {
        *critical = critical.max(w.path());
        format.check(what, w.value)
    }

    /// Writes MXU row `row` of weight buffer `buf` (one column of the tile).
    pub fn load_row(&mut self, buf: u8, tile: &WeightTile, row: usize) -> Result<()> {
        let (values, _) = tile.values();
        let dst = &mut self.weights[buf as usize][row * self.lanes..(row + 1) * self.lanes];
        for (lane, slot) in dst.iter_mut().enumerate() {
            *slot = self.fmt.weight.check("weight register", values.get(lane, row))?;
        }
        Ok(())
    }

    fn weight(&self, buf: u8, row: usize, lane: usize) -> Wire {
        Wire::reg(self.weights[buf as usize][row * self.lanes + lane])
    }

    fn sr_out(&self, lane: usize) -> Slot {
        *self.sr[lane].last().expect("skew stages are non-empty")
    }

    /// No valid value left in any register.
    pub fn is_empty(&self) -> bool {
        self.sr.iter().all(|l| l.iter().all(Option::is_none))
            && self.inputs.iter().all(Option::is_none)
            && self.psum.iter().all(Option::is_none)
            && self.side_acc.iter().all(Option::is_none)
            && self.side_chain.iter().all(Option::is_none)
    }

    /// Advances one clock edge. Every register is computed from the values
    /// held before the edge; updates run back to front so in-place writes
    /// never clobber a value still to be read.
    pub fn step(&mut self, input: Option<(&[i64], Tag)>, outputs: &mut Vec<Output>) -> Result<StepActivity> {
        let mut act = StepActivity::default();
        let mut crit = self.critical;

        self.step_psums(&mut crit, &mut act)?;
        self.step_side(&mut crit)?;
        self.step_inputs(&mut crit, &mut act)?;

        for (lane, stages) in self.sr.iter_mut().enumerate() {
            stages.rotate_right(1);
            stages[0] = match input {
                Some((v, tag)) => Some((self.fmt.lane.check("skew register", v[lane])?, tag)),
                None => None,
            };
        }

        let last = self.cols - 1;
        for row in 0..self.rows {
            if let Some((raw, tag)) = self.psum[row * self.cols + last] {
                let correction = self.side_chain[row].map_or(0, |(v, _)| v);
                let out = Wire::reg(raw) - Wire::reg(correction);
                let value = Self::latch(&mut crit, IntFormat::working(), "output", out)?;
                outputs.push(Output { tag, row, value });
            }
        }

        self.critical = crit;
        Ok(act)
    }

    fn step_psums(&mut self, crit: &mut CriticalPath, act: &mut StepActivity) -> Result<()> {
        let (lanes, cols) = (self.lanes, self.cols);
        for row in 0..self.rows {
            for col in (0..cols).rev() {
                let idx = row * cols + col;
                let left = if col == 0 {
                    Wire::reg(0)
                } else {
                    Wire::reg(self.psum[idx - 1].map_or(0, |(v, _)| v))
                };
                let next = match self.variant {
                    Variant::Baseline => match self.inputs[row * lanes + col] {
                        Some((a, tag)) => {
                            let prod = Wire::reg(a) * self.weight(tag.buf, row, col);
                            act.busy_multipliers += 1;
                            let v = Self::latch(crit, self.fmt.acc, "partial sum", left + prod)?;
                            Some((v, tag))
                        }
                        None => None,
                    },
                    Variant::Fip => {
                        let (l0, l1) = (row * lanes + 2 * col, row * lanes + 2 * col + 1);
                        match (self.inputs[l0], self.inputs[l1]) {
                            (Some((a0, tag)), Some((a1, _))) => {
                                let lo = Wire::reg(a0) + self.weight(tag.buf, row, 2 * col + 1);
                                let hi = Wire::reg(a1) + self.weight(tag.buf, row, 2 * col);
                                self.fmt.pre_adder.check("fip pre-adder", lo.value)?;
                                self.fmt.pre_adder.check("fip pre-adder", hi.value)?;
                                let prod = lo * hi;
                                self.fmt.product.check("fip product", prod.value)?;
                                act.busy_multipliers += 1;
                                let v = Self::latch(crit, self.fmt.acc, "partial sum", left + prod)?;
                                Some((v, tag))
                            }
                            _ => None,
                        }
                    }
                    Variant::Ffip => {
                        let (l0, l1) = (row * lanes + 2 * col, row * lanes + 2 * col + 1);
                        match (self.inputs[l0], self.inputs[l1]) {
                            (Some((g0, tag)), Some((g1, _))) => {
                                let prod = Wire::reg(g0) * Wire::reg(g1);
                                self.fmt.product.check("ffip product", prod.value)?;
                                act.busy_multipliers += 1;
                                let v = Self::latch(crit, self.fmt.acc, "partial sum", left + prod)?;
                                Some((v, tag))
                            }
                            _ => None,
                        }
                    }
                };
                self.psum[idx] = next;
            }
        }
        Ok(())
    }

    fn step_side(&mut self, crit: &mut CriticalPath) -> Result<()> {
        for row in (1..self.rows).rev() {
            self.side_chain[row] = self.side_chain[row - 1];
        }
        self.side_chain[0] = match self.side_acc.last().copied().flatten() {
            Some((alpha, row_sum, tag)) => {
                let w = Wire::reg(alpha) + Wire::reg(self.zero_point) * Wire::reg(row_sum);
                Some((Self::latch(crit, self.fmt.side, "alpha/zero-point output", w)?, tag))
            }
            None => None,
        };

        let fast = self.variant.is_fast();
        for col in (0..self.side_acc.len()).rev() {
            let (alpha_in, sum_in) = match col {
                0 => (Wire::reg(0), Wire::reg(0)),
                _ => {
                    let (a, s, _) = self.side_acc[col - 1].unwrap_or((0, 0, Tag { id: 0, buf: 0 }));
                    (Wire::reg(a), Wire::reg(s))
                }
            };
            self.side_acc[col] = if fast {
                match (self.sr_out(2 * col), self.sr_out(2 * col + 1)) {
                    (Some((a0, tag)), Some((a1, _))) => {
                        let (a0, a1) = (Wire::reg(a0), Wire::reg(a1));
                        let alpha = Self::latch(crit, self.fmt.alpha, "alpha partial sum", alpha_in + a0 * a1)?;
                        let sum = Self::latch(crit, self.fmt.row_sum, "row sum", sum_in + (a0 + a1))?;
                        Some((alpha, sum, tag))
                    }
                    _ => None,
                }
            } else {
                match self.sr_out(col) {
                    Some((a, tag)) => {
                        let sum = Self::latch(crit, self.fmt.row_sum, "row sum", sum_in + Wire::reg(a))?;
                        Some((0, sum, tag))
                    }
                    None => None,
                }
            };
        }
        Ok(())
    }

    /// α-row multipliers busy this step (they read the skew outputs).
    fn alpha_busy(&self) -> u32 {
        if !self.variant.is_fast() {
            return 0;
        }
        (0..self.cols)
            .filter(|&c| self.sr_out(2 * c).is_some() && self.sr_out(2 * c + 1).is_some())
            .count() as u32
    }

    fn step_inputs(&mut self, crit: &mut CriticalPath, act: &mut StepActivity) -> Result<()> {
        act.busy_multipliers += self.alpha_busy();
        let lanes = self.lanes;
        if let Some((_, tag)) = self.inputs[(self.rows - 1) * lanes + lanes - 1] {
            act.retired[tag.buf as usize] += 1;
        }
        for row in (0..self.rows).rev() {
            for lane in 0..lanes {
                let src = if row == 0 {
                    // FFIP row 0 starts from the swapped pair: g[2k] = a[2k+1] + y[2k].
                    let from = if self.variant == Variant::Ffip { lane ^ 1 } else { lane };
                    self.sr_out(from)
                } else {
                    self.inputs[(row - 1) * lanes + lane]
                };
                let next = match src {
                    Some((v, tag)) => {
                        let w = match self.variant {
                            Variant::Ffip => Wire::reg(v) + self.weight(tag.buf, row, lane),
                            _ => Wire::reg(v),
                        };
                        let what = if self.variant == Variant::Ffip { "g register" } else { "input register" };
                        Some((Self::latch(crit, self.fmt.input_reg, what, w)?, tag))
                    }
                    None => None,
                };
                self.inputs[row * lanes + lane] = next;
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Mxu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mxu")
            .field("variant", &self.variant)
            .field("lanes", &self.lanes)
            .field("rows", &self.rows)
            .finish_non_exhaustive()
    }
}
