use std::collections::HashMap;

use ffip_core::gemm::Variant;
use ffip_core::quant::QuantSpec;
use ffip_core::sim::MxuConfig;
use ffip_core::tiler::{
    address_stream, conv2d_via_gemm, direct_conv2d, plan_tiler, plan_tiler_with_m_tile, ConvEngine, ConvWeights,
    FeatureMap, FeatureStore, LayerShape,
};
use ffip_core::IntFormat;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mxu(x: usize, variant: Variant) -> MxuConfig {
    MxuConfig::new(x, 4, variant, QuantSpec::signed(8)).unwrap()
}

fn layer_strategy() -> impl Strategy<Value = LayerShape> {
    (1usize..=12, 1usize..=12, 1usize..=5, 1usize..=5, 1usize..=2, 0usize..=4, 1usize..=9, 1usize..=9)
        .prop_filter_map("kernel must fit", |(h, w, kh, kw, stride, pad, cin, cout)| {
            let layer = LayerShape {
                cin,
                h,
                w_dim: w,
                cout,
                kh,
                kw,
                stride,
                padding: pad.min(kh - 1).min(kw - 1),
            };
            layer.output_dims().ok().map(|_| layer)
        })
}

/// Input-vector gather order of an explicit im2col, traversed tile by tile.
/// Each entry is `(channel group, padded row, padded col)`.
fn im2col_order(layer: &LayerShape, x: usize, y: usize, rows_per_tile: usize) -> Vec<(usize, usize, usize)> {
    let (oh, ow) = layer.output_dims().unwrap();
    let groups = layer.cin.div_ceil(x);
    let mut order = Vec::new();
    for _ in 0..layer.cout.div_ceil(y) {
        for tile in 0..oh / rows_per_tile {
            for i in 0..layer.kh {
                for j in 0..layer.kw {
                    for g in 0..groups {
                        for r in 0..rows_per_tile {
                            for c in 0..ow {
                                let orow = tile * rows_per_tile + r;
                                order.push((g, orow * layer.stride + i, c * layer.stride + j));
                            }
                        }
                    }
                }
            }
        }
    }
    order
}

fn loop_nest_oracle(extents: [usize; 7], strides: [usize; 7]) -> Vec<usize> {
    let mut out = Vec::new();
    for a in 0..extents[0] {
        for b in 0..extents[1] {
            for c in 0..extents[2] {
                for d in 0..extents[3] {
                    for e in 0..extents[4] {
                        for f in 0..extents[5] {
                            for g in 0..extents[6] {
                                let idx = [a, b, c, d, e, f, g];
                                out.push(idx.iter().zip(strides).map(|(i, s)| i * s).sum());
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn stream_matches_im2col_gather(layer in layer_strategy(), max_m in 1usize..64) {
        let cfg = mxu(4, Variant::Ffip);
        let plan = plan_tiler_with_m_tile(&layer, &cfg, max_m).unwrap();
        let stream = address_stream(&plan);
        prop_assert_eq!(stream.len(), plan.digits.iter().map(|d| d.extent).product::<usize>());

        let (hp, wp) = (layer.padded_h(), layer.padded_w());
        let want: Vec<usize> = im2col_order(&layer, 4, 4, plan.rows_per_tile)
            .into_iter()
            .map(|(g, r, c)| (g * hp + r) * wp + c)
            .collect();
        prop_assert_eq!(&stream, &want);

        let extents = plan.digits.map(|d| d.extent);
        let strides = plan.digits.map(|d| d.stride);
        prop_assert_eq!(&stream, &loop_nest_oracle(extents, strides));
        prop_assert!(stream.iter().all(|&a| a < plan.store_locations()));
    }

    #[test]
    fn unit_stride_covers_each_pixel_k_times(mut layer in layer_strategy()) {
        layer.stride = 1;
        layer.padding = 0;
        prop_assume!(layer.output_dims().is_ok());
        let plan = plan_tiler(&layer, &mxu(4, Variant::Fip)).unwrap();
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for access in plan.walk() {
            *seen.entry(access.m_offset).or_default() += 1;
        }
        let (oh, ow) = layer.output_dims().unwrap();
        prop_assert_eq!(seen.len(), oh * ow);
        let per_pixel = plan.k_tiles() * plan.digits[0].extent;
        prop_assert!(seen.values().all(|&n| n == per_pixel));
    }

    #[test]
    fn conv_matches_direct(layer in layer_strategy(), v in prop_oneof![Just(Variant::Baseline), Just(Variant::Fip), Just(Variant::Ffip)], seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = FeatureMap::random(&mut rng, layer.cin, layer.h, layer.w_dim, IntFormat::signed(8));
        let weights = ConvWeights::random(&mut rng, layer.cout, layer.cin, layer.kh, layer.kw, IntFormat::signed(8));
        let want = direct_conv2d(&layer, &input, &weights).unwrap();
        let got = conv2d_via_gemm(&layer, &input, &weights, &mxu(4, v), ConvEngine::Reference(v)).unwrap();
        prop_assert_eq!(got.map, want);
    }

    #[test]
    fn direct_conv_commutes_with_channel_permutation(layer in layer_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = FeatureMap::random(&mut rng, layer.cin, layer.h, layer.w_dim, IntFormat::signed(8));
        let weights = ConvWeights::random(&mut rng, layer.cout, layer.cin, layer.kh, layer.kw, IntFormat::signed(8));
        let mut perm: Vec<usize> = (0..layer.cin).collect();
        perm.shuffle(&mut rng);
        let plane = layer.h * layer.w_dim;
        let kernel = layer.kh * layer.kw;
        let mut pin = input.clone();
        let mut pw = weights.clone();
        for (dst, &src) in perm.iter().enumerate() {
            pin.data[dst * plane..(dst + 1) * plane].copy_from_slice(&input.data[src * plane..(src + 1) * plane]);
            for o in 0..layer.cout {
                let base = o * layer.cin * kernel;
                pw.data[base + dst * kernel..base + (dst + 1) * kernel]
                    .copy_from_slice(&weights.data[base + src * kernel..base + (src + 1) * kernel]);
            }
        }
        prop_assert_eq!(direct_conv2d(&layer, &pin, &pw).unwrap(), direct_conv2d(&layer, &input, &weights).unwrap());
    }
}

#[test]
fn three_by_three_golden_sequence() {
    let layer = LayerShape {
        cin: 4,
        h: 8,
        w_dim: 8,
        cout: 4,
        kh: 3,
        kw: 3,
        stride: 1,
        padding: 0,
    };
    let plan = plan_tiler(&layer, &mxu(4, Variant::Ffip)).unwrap();
    let stream = address_stream(&plan);
    assert_eq!(stream.len(), 9 * 36);
    assert_eq!(&stream[..8], &[0, 1, 2, 3, 4, 5, 8, 9]);
    // Second K-tile starts one column to the right: kernel column 1.
    assert_eq!(&stream[36..40], &[1, 2, 3, 4]);
    // Fourth K-tile is kernel row 1.
    assert_eq!(stream[3 * 36], 8);
}

#[test]
fn systolic_conv_with_zero_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layer = LayerShape {
        cin: 6,
        h: 7,
        w_dim: 6,
        cout: 5,
        kh: 3,
        kw: 2,
        stride: 2,
        padding: 1,
    };
    let r = 4;
    let cfg = MxuConfig::new(4, 4, Variant::Ffip, QuantSpec::signed(8).with_b_zero_point(r)).unwrap();
    let input = FeatureMap::random(&mut rng, 6, 7, 6, IntFormat::signed(8));
    let weights = ConvWeights::random(&mut rng, 5, 6, 3, 2, IntFormat::signed(8));
    let shifted = ConvWeights::new(5, 6, 3, 2, IntFormat::signed(10), weights.data.iter().map(|w| w - r).collect()).unwrap();
    let want = direct_conv2d(&layer, &input, &shifted).unwrap();
    for engine in [ConvEngine::Systolic, ConvEngine::Reference(Variant::Fip)] {
        assert_eq!(conv2d_via_gemm(&layer, &input, &weights, &cfg, engine).unwrap().map, want);
    }
}

#[test]
fn feature_store_has_zero_halo() {
    let layer = LayerShape {
        cin: 3,
        h: 2,
        w_dim: 2,
        cout: 1,
        kh: 3,
        kw: 3,
        stride: 1,
        padding: 1,
    };
    let input = FeatureMap::new(3, 2, 2, IntFormat::signed(8), (1..=12).collect()).unwrap();
    let store = FeatureStore::load(&input, &layer, 4).unwrap();
    assert_eq!(store.capacity(), 16);
    assert_eq!(store.read(0), &[0, 0, 0, 0]);
    assert_eq!(store.read(5), &[1, 5, 9, 0]);
    assert_eq!(store.read(10), &[4, 8, 12, 0]);
}
