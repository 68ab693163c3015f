use ffip_core::cost::{
    metrics, metrics_from_gops, model_ops, pe_register_bits, throughput_roof, Layer, PeRegisterVariant,
};
use ffip_core::gemm::{predicted_op_counts, Variant};
use ffip_core::tiler::LayerShape;
use proptest::prelude::*;

proptest! {
    #[test]
    fn register_formula_ordering(w in 2u32..=32, d in 1u32..=2, log_x in 1u32..12) {
        let x = 1usize << log_x;
        let fip = pe_register_bits(PeRegisterVariant::Fip, w, d, x).unwrap();
        let extra = pe_register_bits(PeRegisterVariant::FipExtraRegs, w, d, x).unwrap();
        let ffip = pe_register_bits(PeRegisterVariant::Ffip, w, d, x).unwrap();
        prop_assert_eq!(extra - ffip, 2 * w - 2);
        prop_assert_eq!(ffip - fip, 2 * d + 2);
    }

    #[test]
    fn roof_ratio_is_two(mult in 1u64..1_000_000, f in 1e6f64..1e10) {
        prop_assert_eq!(throughput_roof(Variant::Ffip, mult, f) / throughput_roof(Variant::Baseline, mult, f), 2.0);
        prop_assert_eq!(throughput_roof(Variant::Fip, mult, f), throughput_roof(Variant::Ffip, mult, f));
    }

    #[test]
    fn metrics_are_consistent(ops in 1u64..1 << 40, rate in 1.0f64..1e5, mult in 1u64..100_000, f in 1e7f64..1e9) {
        let r = metrics(ops, rate, mult, f);
        prop_assert_eq!(r.gops_per_multiplier, r.gops / mult as f64);
        prop_assert_eq!(r.ops_per_multiplier_per_cycle, r.gops_per_multiplier * 1e9 / f);
    }
}

#[test]
fn conv_layer_ops_match_gemm_counts() {
    let shape = LayerShape {
        cin: 64,
        h: 56,
        w_dim: 56,
        cout: 64,
        kh: 3,
        kw: 3,
        stride: 1,
        padding: 1,
    };
    let layer = Layer::Conv { shape, repeat: 1 };
    let (m, n, k) = layer.gemm_dims().unwrap();
    let counts = predicted_op_counts(Variant::Baseline, m as usize, n as usize, k as usize).unwrap();
    let ops = model_ops(&[layer]).unwrap();
    assert_eq!(counts.multiplications + counts.additions + m * n, ops);
}

#[test]
fn table_metrics() {
    let t1 = metrics_from_gops(2529.0, 2144, 388e6);
    assert!((t1.gops_per_multiplier / 1.180 - 1.0).abs() < 5e-3);
    assert!((t1.ops_per_multiplier_per_cycle / 3.042 - 1.0).abs() < 5e-3);
    let t2 = metrics_from_gops(2258.0, 2144, 346e6);
    assert!((t2.gops_per_multiplier / 1.053 - 1.0).abs() < 5e-3);
    assert!((t2.ops_per_multiplier_per_cycle / 3.042 - 1.0).abs() < 5e-3);
}
