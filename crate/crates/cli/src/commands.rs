//! Subcommand implementations. Each returns its Markdown report and whether
//! every check passed; files go to the configured output directory.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ffip_core::cost::{
    metrics, model_ops, pe_register_bits, roof_ops_per_mult_cycle, throughput_roof, PeRegisterVariant,
};
use ffip_core::gemm::{gemm, gemm_baseline, gemm_ffip, gemm_fip, predicted_op_counts, y_transform, OpCounter, Variant};
use ffip_core::quant::{PreparedWeights, QuantSpec, WeightTile};
use ffip_core::sim::{
    measure_latency, ops_per_mult_cycle, run_gemm, simulate_tile, steady_state_ops_per_mult_cycle, MxuConfig,
    SimResult,
};
use ffip_core::tiler::{
    conv2d_via_gemm, direct_conv2d, plan_tiler, ConvEngine, ConvWeights, FeatureMap, LayerShape, TilerPlan, DIGIT_NAMES,
};
use ffip_core::{Error, IntFormat, QMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, SUITES};
use crate::report::{pass_fail, write_text, Table};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub markdown: String,
    pub passed: bool,
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn naive(a: &QMatrix, b: &QMatrix) -> Vec<i64> {
    let mut out = vec![0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            out[i * b.cols() + j] = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
        }
    }
    out
}

/// Weights minus the layer zero point, in a format wide enough for the shift.
fn shift_weights(b: &QMatrix, r: i64) -> Result<QMatrix> {
    Ok(b.map(IntFormat::signed(b.format().bits + 2), |v| v - r)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: u64,
    pub detail: String,
}

impl SuiteResult {
    fn from(name: &str, result: std::result::Result<(u64, String), String>) -> Self {
        match result {
            Ok((cases, detail)) => Self {
                name: name.into(),
                passed: true,
                cases,
                detail,
            },
            Err(detail) => Self {
                name: name.into(),
                passed: false,
                cases: 0,
                detail,
            },
        }
    }
}

type SuiteOutput = std::result::Result<(u64, String), String>;

fn kernel(variant: Variant, a: &QMatrix, b: &QMatrix, pad: bool) -> ffip_core::Result<QMatrix> {
    let counter = &mut OpCounter::new();
    match (variant, pad) {
        (_, true) => gemm(variant, a, b, counter),
        (Variant::Baseline, false) => gemm_baseline(a, b, counter),
        (Variant::Fip, false) => gemm_fip(a, b, counter),
        (Variant::Ffip, false) => gemm_ffip(a, &y_transform(b), counter),
    }
}

fn suite_equivalence(cfg: &RunConfig) -> SuiteOutput {
    let v = &cfg.verify;
    let quant = cfg.quant_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = 0;
    let sim_trials = cfg.trials.min(32);
    let mxu = cfg.mxu_config(cfg.mxu.variant).map_err(|e| e.to_string())?;
    for t in 0..cfg.trials {
        let m = rng.gen_range(1..=v.max_m.max(1));
        let n = rng.gen_range(1..=v.max_n.max(1));
        let k = if v.odd_k {
            rng.gen_range(1..=v.max_k.max(1))
        } else {
            2 * rng.gen_range(1..=(v.max_k / 2).max(1))
        };
        let a = QMatrix::random(&mut rng, m, k, quant.a_format());
        let b = QMatrix::random(&mut rng, k, n, quant.b_format());
        let want = naive(&a, &b);
        for variant in Variant::ALL {
            let got = kernel(variant, &a, &b, v.pad_odd_k).map_err(|e| format!("trial {t}, {variant}, K={k}: {e}"))?;
            if got.data() != want {
                return Err(format!("trial {t}: {variant} differs from the naive product ({m}x{k}x{n})"));
            }
            cases += 1;
        }
        if t < sim_trials {
            let r = quant.b_zero_point;
            let prepared = PreparedWeights::new(mxu.variant, &b, None, r, mxu.x, mxu.y).map_err(|e| e.to_string())?;
            let (got, _) = run_gemm(&mxu, &a, &prepared).map_err(|e| format!("trial {t}, simulator: {e}"))?;
            let want = naive(&a, &shift_weights(&b, r).map_err(|e| e.to_string())?);
            if got.data() != want {
                return Err(format!("trial {t}: simulator differs from the naive product"));
            }
            cases += 1;
        }
    }
    Ok((cases, format!("{} kernel trials, {sim_trials} simulator trials", cfg.trials)))
}

fn suite_counts(cfg: &RunConfig) -> SuiteOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0);
    let mut cases = 0;
    for m in 1..=8 {
        for n in 1..=8 {
            for k in (2..=16).step_by(2) {
                let a = QMatrix::random(&mut rng, m, k, IntFormat::signed(8));
                let b = QMatrix::random(&mut rng, k, n, IntFormat::signed(8));
                let want = predicted_op_counts(Variant::Fip, m, n, k).map_err(|e| e.to_string())?;
                let mut fip = OpCounter::new();
                gemm_fip(&a, &b, &mut fip).map_err(|e| e.to_string())?;
                let mut ffip = OpCounter::new();
                gemm_ffip(&a, &y_transform(&b), &mut ffip).map_err(|e| e.to_string())?;
                for (name, c) in [("fip", fip), ("ffip", ffip)] {
                    if (c.multiplications, c.additions) != (want.multiplications, want.additions) {
                        return Err(format!("{name} M={m} N={n} K={k}: {c:?} vs {want:?}"));
                    }
                }
                cases += 2;
            }
        }
    }
    Ok((cases, "M,N in 1..8, even K in 2..16".into()))
}

fn suite_latency(cfg: &RunConfig) -> SuiteOutput {
    let mut parts = Vec::new();
    for &x in &cfg.verify.latency_widths {
        let lat = |v| -> std::result::Result<u64, String> {
            let mxu = MxuConfig::new(x, cfg.mxu.y, v, QuantSpec::signed(8)).map_err(|e| e.to_string())?;
            measure_latency(&mxu).map_err(|e| e.to_string())
        };
        let (base, ffip) = (lat(Variant::Baseline)?, lat(Variant::Ffip)?);
        if base.checked_sub(ffip) != Some(x as u64 / 2) {
            return Err(format!("X={x}: baseline {base}, ffip {ffip}"));
        }
        parts.push(format!("X={x}: {base} vs {ffip}"));
    }
    Ok((parts.len() as u64, parts.join("; ")))
}

/// Every operand pair on a 4-wide array.
fn width_sweep(quant: QuantSpec, variant: Variant) -> ffip_core::Result<u64> {
    let cfg = MxuConfig::new(4, 4, variant, quant)?;
    let (af, bf) = (quant.a_format(), quant.b_format());
    let mut rows = Vec::new();
    for a0 in af.min()..=af.max() {
        for a1 in af.min()..=af.max() {
            rows.push([a0, a1, a0, a1]);
        }
    }
    let a = QMatrix::from_rows(af, &rows)?;
    let mut pairs = Vec::new();
    for b0 in bf.min()..=bf.max() {
        for b1 in bf.min()..=bf.max() {
            pairs.push((b0, b1));
        }
    }
    let mut checked = 0;
    for chunk in pairs.chunks(4) {
        let mut data = vec![0; 16];
        for (j, &(b0, b1)) in chunk.iter().enumerate() {
            for (lane, v) in [b0, b1, b0, b1].into_iter().enumerate() {
                data[lane * 4 + j] = v;
            }
        }
        let b = QMatrix::new(4, 4, bf, data)?;
        let got = simulate_tile(&cfg, &a, &WeightTile::new(variant, &b)?)?;
        if got.c_tile.data() != naive(&a, &b) {
            return Err(Error::Config(format!("{variant} sweep result mismatch")));
        }
        checked += (a.rows() * chunk.len()) as u64;
    }
    Ok(checked)
}

fn suite_width(cfg: &RunConfig) -> SuiteOutput {
    let bits = cfg.verify.sweep_bits;
    if !(1..=6).contains(&bits) {
        return Err(format!("sweep_bits = {bits} must be in 1..=6"));
    }
    let q = cfg.quant;
    let quant = QuantSpec::new(bits, q.a_signed, q.b_signed);
    let mut cases = 0;
    for variant in Variant::ALL {
        cases += width_sweep(quant, variant).map_err(|e| format!("{variant}: {e}"))?;
    }
    let mut detail = format!("exhaustive {bits}-bit sweep, d = {}", quant.d);
    if q.a_signed != q.b_signed {
        for variant in [Variant::Fip, Variant::Ffip] {
            match width_sweep(quant.with_forced_d(1), variant) {
                Err(Error::WidthOverflow { .. }) => {}
                other => return Err(format!("{variant} with forced d = 1 should overflow, got {other:?}")),
            }
        }
        detail.push_str("; forced d = 1 overflows");
    }
    Ok((cases, detail))
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<Outcome> {
    for s in &cfg.verify.suites {
        if !SUITES.contains(&s.as_str()) {
            bail!("unknown suite `{s}` (expected one of {SUITES:?})");
        }
    }
    let mut results = Vec::new();
    for name in SUITES.iter().filter(|s| cfg.verify.suites.iter().any(|c| c == *s)) {
        let r = match *name {
            "equivalence" => suite_equivalence(cfg),
            "counts" => suite_counts(cfg),
            "latency" => suite_latency(cfg),
            _ => suite_width(cfg),
        };
        results.push(SuiteResult::from(name, r));
    }
    let mut table = Table::new(["suite", "result", "cases", "detail"]);
    for r in &results {
        table.push([r.name.clone(), pass_fail(r.passed).into(), r.cases.to_string(), r.detail.clone()]);
    }
    let passed = results.iter().all(|r| r.passed);
    let markdown = format!(
        "# verify\n\nseed {}, trials {}, mxu {}x{} {}\n\n{}\noverall: {}\n",
        cfg.seed,
        cfg.trials,
        cfg.mxu.x,
        cfg.mxu.y,
        cfg.mxu.variant,
        table.markdown(),
        pass_fail(passed)
    );
    let dir = out_dir(cfg)?;
    table.write_csv(&dir.join("verify.csv"))?;
    write_text(&dir.join("verify.md"), &markdown)?;
    Ok(Outcome { markdown, passed })
}

fn utilization(stats: &SimResult, mxu: &MxuConfig) -> f64 {
    let busy: u64 = stats.mac_busy_histogram.iter().map(|&b| b as u64).sum();
    busy as f64 / (stats.total_cycles.max(1) as f64 * mxu.multipliers() as f64)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.simulate;
    let quant = cfg.quant_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = QMatrix::random(&mut rng, s.m, s.k, quant.a_format());
    let b = QMatrix::random(&mut rng, s.k, s.n, quant.b_format());
    let want = naive(&a, &shift_weights(&b, quant.b_zero_point)?);

    let mut variants = vec![cfg.mxu.variant];
    if cfg.mxu.variant != Variant::Baseline {
        variants.push(Variant::Baseline);
    }
    let mut table = Table::new([
        "variant",
        "multipliers",
        "latency",
        "cycles",
        "vectors",
        "stalls",
        "utilization",
        "ops/mult/cycle",
        "steady state",
        "roof",
        "attained",
        "critical path",
        "result",
    ]);
    let mut passed = true;
    let mut latencies = Vec::new();
    let mut trace = None;
    for &variant in &variants {
        let mxu = cfg.mxu_config(variant)?;
        let prepared = PreparedWeights::new(variant, &b, None, quant.b_zero_point, mxu.x, mxu.y)?;
        let (c, stats) = run_gemm(&mxu, &a, &prepared)?;
        let ok = c.data() == want;
        passed &= ok;
        let ratio = ops_per_mult_cycle(&stats, &mxu);
        let steady = match steady_state_ops_per_mult_cycle(&stats, &mxu) {
            Ok(r) => format!("{r:.4}"),
            Err(_) => "short run".into(),
        };
        let roof = roof_ops_per_mult_cycle(variant);
        let cp = stats.critical_path;
        table.push([
            variant.to_string(),
            mxu.multipliers().to_string(),
            stats.first_output_latency.to_string(),
            stats.total_cycles.to_string(),
            stats.vectors.to_string(),
            stats.stall_cycles.to_string(),
            format!("{:.4}", utilization(&stats, &mxu)),
            format!("{ratio:.4}"),
            steady,
            format!("{roof:.1}"),
            format!("{:.1}%", 100.0 * ratio / roof),
            format!("{} add + {} mul", cp.adders, cp.multipliers),
            pass_fail(ok).into(),
        ]);
        latencies.push((variant, stats.first_output_latency));
        if trace.is_none() {
            trace = Some(stats);
        }
    }
    let mut markdown = format!(
        "# simulate\n\nA {}x{} times B {}x{}, mxu {}x{}, seed {}\n\n{}",
        s.m,
        s.k,
        s.k,
        s.n,
        cfg.mxu.x,
        cfg.mxu.y,
        cfg.seed,
        table.markdown()
    );
    if let [(v, fast), (_, base)] = latencies[..] {
        let _ = writeln!(markdown, "\nlatency: baseline {base}, {v} {fast}, delta {}", base as i64 - fast as i64);
    }

    let dir = out_dir(cfg)?;
    table.write_csv(&dir.join("simulate.csv"))?;
    if let Some(stats) = trace {
        let mut t = Table::new(["cycle", "busy_multipliers", "outputs"]);
        for (i, (b, o)) in stats.mac_busy_histogram.iter().zip(&stats.outputs_per_cycle).enumerate() {
            t.push([i.to_string(), b.to_string(), o.to_string()]);
        }
        t.write_csv(&dir.join("trace.csv"))?;
    }
    write_text(&dir.join("simulate.md"), &markdown)?;
    Ok(Outcome { markdown, passed })
}

pub fn random_layer<R: Rng>(rng: &mut R) -> LayerShape {
    loop {
        let (kh, kw) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let layer = LayerShape {
            cin: rng.gen_range(1..=16),
            h: rng.gen_range(1..=16),
            w_dim: rng.gen_range(1..=16),
            cout: rng.gen_range(1..=16),
            kh,
            kw,
            stride: rng.gen_range(1..=2),
            padding: rng.gen_range(0..kh.min(kw)),
        };
        if layer.output_dims().is_ok() {
            return layer;
        }
    }
}

#[derive(Serialize)]
struct PlanFile<'a> {
    plans: &'a [TilerPlan],
}

fn shape_label(l: &LayerShape) -> String {
    format!(
        "{}x{}x{} -> {} k{}x{} s{} p{}",
        l.cin, l.h, l.w_dim, l.cout, l.kh, l.kw, l.stride, l.padding
    )
}

pub fn cmd_tile_check(cfg: &RunConfig) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = cfg.tiler.layers.clone();
    layers.extend((0..cfg.tiler.random_layers).map(|_| random_layer(&mut rng)));
    let variant = cfg.mxu.variant;
    let mxu = cfg.mxu_config(variant)?;
    let fmt_a = mxu.quant.a_format();
    let fmt_b = mxu.quant.b_format();
    let r = mxu.quant.b_zero_point;

    let mut table = Table::new(["layer", "shape", "addresses", "k tiles", "reference", "systolic"]);
    let mut plans = Vec::new();
    let mut passed = true;
    for (i, layer) in layers.iter().enumerate() {
        let plan = plan_tiler(layer, &mxu)?;
        let input = FeatureMap::random(&mut rng, layer.cin, layer.h, layer.w_dim, fmt_a);
        let weights = ConvWeights::random(&mut rng, layer.cout, layer.cin, layer.kh, layer.kw, fmt_b);
        let shifted = ConvWeights::new(
            layer.cout,
            layer.cin,
            layer.kh,
            layer.kw,
            IntFormat::signed(fmt_b.bits + 2),
            weights.data.iter().map(|w| w - r).collect(),
        )?;
        let want = direct_conv2d(layer, &input, &shifted)?;
        let reference = conv2d_via_gemm(layer, &input, &weights, &mxu, ConvEngine::Reference(variant))?.map == want;
        let systolic = if cfg.tiler.systolic {
            let ok = conv2d_via_gemm(layer, &input, &weights, &mxu, ConvEngine::Systolic)?.map == want;
            passed &= ok;
            pass_fail(ok)
        } else {
            "-"
        };
        passed &= reference;
        table.push([
            i.to_string(),
            shape_label(layer),
            plan.len().to_string(),
            plan.k_tiles().to_string(),
            pass_fail(reference).into(),
            systolic.into(),
        ]);
        plans.push(plan);
    }
    let markdown = format!(
        "# tile-check\n\nmxu {}x{} {variant}, seed {}\n\n{}\noverall: {}\n",
        mxu.x,
        mxu.y,
        cfg.seed,
        table.markdown(),
        pass_fail(passed)
    );

    let dir = out_dir(cfg)?;
    table.write_csv(&dir.join("tile_check.csv"))?;
    write_text(&dir.join("plans.toml"), &toml::to_string(&PlanFile { plans: &plans })?)?;
    if let Some(plan) = plans.first() {
        write_address_csv(plan, &dir.join("addresses.csv"))?;
    }
    write_text(&dir.join("tile_check.md"), &markdown)?;
    Ok(Outcome { markdown, passed })
}

/// Golden address sequence: one row per emitted address with its counters.
pub fn write_address_csv(plan: &TilerPlan, path: &Path) -> Result<()> {
    let mut header = vec!["index".to_string()];
    header.extend(DIGIT_NAMES.iter().map(|s| s.to_string()));
    header.extend(["m_offset", "k_offset", "address"].map(String::from));
    let mut t = Table::new(header);
    for (i, a) in plan.walk().enumerate() {
        let mut row = vec![i];
        row.extend(a.counters);
        row.extend([a.m_offset, a.k_offset, a.address]);
        t.push(row);
    }
    t.write_csv(path)
}

fn register_variant(v: Variant) -> Option<PeRegisterVariant> {
    match v {
        Variant::Baseline => None,
        Variant::Fip => Some(PeRegisterVariant::Fip),
        Variant::Ffip => Some(PeRegisterVariant::Ffip),
    }
}

pub fn cmd_cost_report(cfg: &RunConfig) -> Result<Outcome> {
    let device = cfg.device()?;
    let mult = ffip_core::cost::multipliers_of(&device);
    let f = device.frequency_hz;
    let quant = cfg.quant_spec();
    let tol = cfg.cost.tolerance.unwrap_or(0.005);

    let mut table = Table::new([
        "variant",
        "model",
        "ops/inference",
        "GOPS",
        "multipliers",
        "GOPS/mult",
        "ops/mult/cycle",
        "register bits",
        "roof GOPS",
        "roof ops/mult/cycle",
        "check",
    ]);
    let mut passed = true;
    for row in &cfg.cost.rows {
        let model = cfg.load_model(&row.model_file)?;
        let ops = model_ops(&model.layers)?;
        let rate = if ops == 0 { 0.0 } else { row.gops * 1e9 / ops as f64 };
        let mut report = metrics(ops, rate, mult, f);
        if let Some(v) = register_variant(row.variant) {
            report = report.with_register_bits(pe_register_bits(v, quant.w, quant.d, cfg.mxu.x)?);
        }
        let close = |got: f64, want: Option<f64>| want.is_none_or(|w| (got / w - 1.0).abs() <= tol);
        let ok = close(report.gops_per_multiplier, row.expected_gops_per_multiplier)
            && close(report.ops_per_multiplier_per_cycle, row.expected_ops_per_multiplier_per_cycle)
            && report.roof_flags.within_fast_roof;
        let has_expect =
            row.expected_gops_per_multiplier.is_some() || row.expected_ops_per_multiplier_per_cycle.is_some();
        passed &= ok;
        table.push([
            row.variant.to_string(),
            model.name.clone(),
            ops.to_string(),
            format!("{:.0}", report.gops),
            mult.to_string(),
            format!("{:.4}", report.gops_per_multiplier),
            format!("{:.4}", report.ops_per_multiplier_per_cycle),
            report.register_bits_per_pe.map_or("-".into(), |b| b.to_string()),
            format!("{:.0}", throughput_roof(row.variant, mult, f) / 1e9),
            format!("{:.1}", roof_ops_per_mult_cycle(row.variant)),
            if has_expect { pass_fail(ok) } else { "-" }.to_string(),
        ]);
    }

    let mut curve = Table::new(["w", "d", "x", "fip", "fip_extra_regs", "ffip"]);
    for d in 1..=2 {
        for w in 1..=16 {
            let bits = |v| pe_register_bits(v, w, d, cfg.mxu.x);
            curve.push([
                w,
                d,
                cfg.mxu.x as u32,
                bits(PeRegisterVariant::Fip)?,
                bits(PeRegisterVariant::FipExtraRegs)?,
                bits(PeRegisterVariant::Ffip)?,
            ]);
        }
    }

    let markdown = format!(
        "# cost-report\n\n{} DSPs x {} multipliers, {:.0} MHz, tolerance {:.2}%\n\n{}\noverall: {}\n",
        device.dsp_count,
        device.multipliers_per_dsp,
        f / 1e6,
        tol * 100.0,
        table.markdown(),
        pass_fail(passed)
    );
    let dir = out_dir(cfg)?;
    table.write_csv(&dir.join("cost.csv"))?;
    curve.write_csv(&dir.join("register_curve.csv"))?;
    write_text(&dir.join("cost.md"), &markdown)?;
    Ok(Outcome { markdown, passed })
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.simulate;
    let quant = cfg.quant_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = QMatrix::random(&mut rng, s.m, s.k, quant.a_format());
    let b = QMatrix::random(&mut rng, s.k, s.n, quant.b_format());
    let reps = cfg.trials.max(1);

    let mut table = Table::new(["kernel", "repetitions", "mean ms"]);
    for variant in Variant::ALL {
        let start = Instant::now();
        for _ in 0..reps {
            gemm(variant, &a, &b, &mut OpCounter::new())?;
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
        table.push([format!("{variant} kernel"), reps.to_string(), format!("{ms:.4}")]);
    }
    let sim_reps = reps.min(5);
    for variant in Variant::ALL {
        let mxu = cfg.mxu_config(variant)?;
        let prepared = PreparedWeights::new(variant, &b, None, quant.b_zero_point, mxu.x, mxu.y)?;
        let start = Instant::now();
        for _ in 0..sim_reps {
            run_gemm(&mxu, &a, &prepared)?;
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / sim_reps as f64;
        table.push([format!("{variant} simulator"), sim_reps.to_string(), format!("{ms:.4}")]);
    }
    let markdown = format!(
        "# bench\n\nA {}x{} times B {}x{}\n\n{}",
        s.m,
        s.k,
        s.k,
        s.n,
        table.markdown()
    );
    let dir = out_dir(cfg)?;
    table.write_csv(&dir.join("bench.csv"))?;
    write_text(&dir.join("bench.md"), &markdown)?;
    Ok(Outcome { markdown, passed: true })
}
