mod common;

use common::*;
use feedback_quant::feedback::{feedback_deviation, feedback_reconstruct, quantize_model, LayerRecord, Method, OptimizerSettings};
use feedback_quant::io::{bundle_from_bytes, bundle_to_bytes, fbq_from_bytes, fbq_to_bytes, Dtype, FbqLayer, FbqModel};
use feedback_quant::linalg::DenseMatrix;
use feedback_quant::quant::{pack_codes, unpack_codes, quantize_rtn, QuantConfig};
use feedback_quant::runtime::{fused_forward, macs_overhead, naive_forward, Buffer, CostModelQuery, FusedLayer, TrafficCounter};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = QuantConfig> {
    (prop::sample::select(vec![2u8, 3, 4, 8]), prop::sample::select(vec![1usize, 3, 8, 32, 128]))
        .prop_map(|(b, g)| QuantConfig::new(b, g))
}

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>, mag: f64) -> impl Strategy<Value = DenseMatrix> {
    (rows, cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-mag..mag, r * c).prop_map(move |v| DenseMatrix::from_fn(r, c, |i, j| v[i * c + j]))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rtn_error_within_half_step(w in matrix(1..=5, 1..=70, 100.0), cfg in config()) {
        let q = quantize_rtn(&w, &cfg).unwrap();
        let deq = dequant_oracle(&q);
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                prop_assert!(code_at(&q, i, j) <= cfg.max_code());
                prop_assert!((w.get(i, j) - deq.get(i, j)).abs() <= q.scale_at(i, j) as f64 / 2.0);
            }
        }
    }

    #[test]
    fn feedback_error_within_half_step_for_any_sigma(
        (w, sigma) in (1usize..=4, 1usize..=50).prop_flat_map(|(r, c)| (matrix(r..=r, c..=c, 2.0), matrix(r..=r, c..=c, 30.0))),
        cfg in config(),
    ) {
        let (_, q) = feedback_reconstruct(&w, &sigma, &cfg).unwrap();
        let (max_dev, violations) = feedback_deviation(&w, &sigma, &q).unwrap();
        prop_assert_eq!(violations, 0);
        prop_assert!(max_dev <= q.max_half_scale());
    }

    #[test]
    fn pack_unpack_round_trip(
        (bits, rows, cols, codes) in (prop::sample::select(vec![2u8, 3, 4, 8]), 1usize..5, 1usize..40)
            .prop_flat_map(|(bits, rows, cols)| {
                let max = ((1u32 << bits) - 1) as u8;
                (Just(bits), Just(rows), Just(cols), prop::collection::vec(0..=max, rows * cols))
            }),
    ) {
        let packed = pack_codes(&codes, rows, cols, bits).unwrap();
        prop_assert_eq!(packed.len(), rows * (cols * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack_codes(&packed, rows, cols, bits).unwrap(), codes);
    }

    #[test]
    fn fused_equals_naive_and_traffic_model(
        batch in 1usize..5,
        out in 1usize..24,
        inp in 1usize..40,
        r in 0usize..5,
        cfg in config(),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q = quantize_rtn(&randn(out, inp, 1.0, &mut rng), &cfg).unwrap();
        let a = randn(r, inp, 0.5, &mut rng).cast::<f32>();
        let b = randn(out, r, 0.5, &mut rng).cast::<f32>();
        let x = randn(batch, inp, 1.0, &mut rng).cast::<f32>();
        let mut layer = FusedLayer::from_parts(q, a, b).unwrap();
        let (cn, cf) = (TrafficCounter::new(), TrafficCounter::new());
        let yn = naive_forward(&layer, &x, &cn).unwrap();
        let yf = fused_forward(&mut layer, &x, &cf).unwrap();
        prop_assert_eq!(yn.data(), yf.data());
        for (fused, snap) in [(false, cn.snapshot()), (true, cf.snapshot())] {
            let m = traffic_model(fused, batch as u64, out as u64, inp as u64, r as u64, cfg.bits as u64, cfg.group_size as u64, 4);
            prop_assert_eq!(snap.kernels_launched, m.kernels);
            prop_assert_eq!(snap.macs, m.macs);
            for (buf, (rd, wr)) in Buffer::ALL.iter().zip(m.buffers) {
                prop_assert_eq!((snap.buffer(*buf).read, snap.buffer(*buf).written), (rd, wr), "{:?} fused={}", buf, fused);
            }
        }
    }

    #[test]
    fn macs_ratio_is_two_r_over_d(b in 1usize..4096, d in 1usize..16384, r in 0usize..512) {
        let (m0, m1, ratio) = macs_overhead(CostModelQuery::new(b, d, r)).unwrap();
        prop_assert_eq!(m0, (b * d * d) as u64);
        prop_assert_eq!(m1, (2 * b * r * d) as u64);
        prop_assert_eq!(ratio, m1 as f64 / m0 as f64);
        prop_assert!((ratio - 2.0 * r as f64 / d as f64).abs() <= 1e-15 * ratio.max(1.0));
    }

    #[test]
    fn bundle_round_trip_f64(
        layers in prop::collection::btree_map("[A-Za-z][A-Za-z0-9_]{0,8}", (matrix(1..=4, 1..=6, 1e6), 1usize..5), 0..4),
    ) {
        let records: Vec<LayerRecord> = layers
            .into_iter()
            .map(|(name, (w, n))| {
                let x = DenseMatrix::from_fn(n, w.cols(), |i, j| (i as f64 - j as f64) * 0.37);
                LayerRecord::new(name, w, x).unwrap()
            })
            .collect();
        let bytes = bundle_to_bytes(&records, Dtype::F64).unwrap();
        prop_assert_eq!(bytes.len() % 8, 0);
        let back = bundle_from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.w.data(), b.w.data());
            prop_assert_eq!(a.x.data(), b.x.data());
        }
        prop_assert_eq!(bundle_to_bytes(&back, Dtype::F64).unwrap(), bytes);
    }

    #[test]
    fn container_round_trip(w in matrix(1..=6, 1..=40, 4.0), cfg in config(), r in 0usize..4) {
        let q = quantize_rtn(&w, &cfg).unwrap();
        let (o, n) = w.shape();
        let a = DenseMatrix::<f32>::from_fn(r, n, |i, j| (i * 7 + j) as f32 * 0.013 - 0.2);
        let b = DenseMatrix::<f32>::from_fn(o, r, |i, j| (i + 3 * j) as f32 * -0.021);
        let model = FbqModel { config: cfg, layers: vec![FbqLayer { name: "p".into(), quantized: q, a, b }] };
        let bytes = fbq_to_bytes(&model).unwrap();
        let back = fbq_from_bytes(&bytes).unwrap();
        prop_assert_eq!(fbq_to_bytes(&back).unwrap(), bytes.clone());
        let (l, m) = (&back.layers[0], &model.layers[0]);
        prop_assert_eq!(l.quantized.packed_codes(), m.quantized.packed_codes());
        prop_assert_eq!(l.quantized.zero_points(), m.quantized.zero_points());
        prop_assert_eq!(l.a.data(), m.a.data());
        prop_assert_eq!(l.b.data(), m.b.data());
        // Any strict prefix is rejected.
        let cut = bytes.len() / 2;
        prop_assert!(fbq_from_bytes(&bytes[..cut]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn layer_results_do_not_depend_on_order(seed in any::<u64>(), rot in 1usize..3) {
        let layers: Vec<LayerRecord> = (0..3)
            .map(|i| feedback_quant::synth::gaussian_layer(&format!("l{i}"), 12, 16, 10, seed.wrapping_add(i)))
            .collect();
        let mut rotated = layers.clone();
        rotated.rotate_left(rot);
        let settings = OptimizerSettings { rank: 2, epochs: 3, seed, ..Default::default() };
        let cfg = QuantConfig::new(4, 8);
        let a = quantize_model(&layers, &cfg, &settings, Method::Fbquant).unwrap();
        let b = quantize_model(&rotated, &cfg, &settings, Method::Fbquant).unwrap();
        for ra in &a {
            let rb = b.iter().find(|r| r.report.layer == ra.report.layer).unwrap();
            prop_assert_eq!(&ra.report, &rb.report);
            prop_assert_eq!(ra.sub.a.data(), rb.sub.a.data());
        }
    }
}
