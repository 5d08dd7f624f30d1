mod common;

use common::{forward, rel_err};
use half::f16;
use normlab::activation_norm::{Affine, NormMetric, NormScheme};
use normlab::constants::{mc_dispersion_ratio_with, ConstantQuery};
use normlab::dynamics::{effective_step, lr_correction, Trajectory};
use normlab::harness::data::{split, Dataset};
use normlab::harness::train::{read_run_csv, write_run_csv, EpochMetrics};
use normlab::numeric::half::{from_half_bits, to_half_bits};
use normlab::numeric::io::{decode_tensor, write_tensor};
use normlab::numeric::{round_half, Execution, PrecisionMode, Tensor};
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Tensor> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Tensor::from_f64(vec![r, c], d).unwrap())
    })
}

fn finite_half() -> impl Strategy<Value = f64> {
    (0u16..0x7C00, any::<bool>()).prop_map(|(b, neg)| from_half_bits(b | if neg { 0x8000 } else { 0 }))
}

fn metric() -> impl Strategy<Value = NormMetric> {
    prop_oneof![
        Just(NormMetric::L2),
        Just(NormMetric::L1),
        Just(NormMetric::Linf),
        (1usize..4).prop_map(NormMetric::TopK),
    ]
}

proptest! {
    #[test]
    fn rounding_agrees_with_reference_binary16(x in prop::num::f64::ANY) {
        let ours = round_half(x);
        let reference = f16::from_f64(x).to_f64();
        if x.is_nan() {
            prop_assert!(ours.is_nan());
        } else {
            prop_assert_eq!(ours.to_bits(), reference.to_bits());
            prop_assert_eq!(to_half_bits(x), f16::from_f64(x).to_bits());
        }
    }

    #[test]
    fn rounding_agrees_near_the_grid(bits in 0u16..0x7C00, frac in 0.0f64..1.0) {
        let lo = from_half_bits(bits);
        let hi = from_half_bits(bits + 1);
        let x = lo + frac * (hi - lo);
        prop_assert_eq!(round_half(x).to_bits(), f16::from_f64(x).to_f64().to_bits());
    }

    #[test]
    fn half_ops_are_correctly_rounded(a in finite_half(), b in finite_half()) {
        let h = PrecisionMode::HALF;
        let (fa, fb) = (f16::from_f64(a), f16::from_f64(b));
        prop_assert_eq!(h.add(a, b).to_bits(), (fa + fb).to_f64().to_bits());
        prop_assert_eq!(h.sub(a, b).to_bits(), (fa - fb).to_f64().to_bits());
        prop_assert_eq!(h.mul(a, b).to_bits(), (fa * fb).to_f64().to_bits());
        if b != 0.0 {
            prop_assert_eq!(h.div(a, b).to_bits(), (fa / fb).to_f64().to_bits());
        }
    }

    #[test]
    fn half_bits_round_trip(bits in any::<u16>()) {
        let v = from_half_bits(bits);
        let reference = f16::from_bits(bits).to_f64();
        if reference.is_nan() {
            // NaN payloads are not preserved.
            prop_assert!(v.is_nan());
        } else {
            prop_assert_eq!(v.to_bits(), reference.to_bits());
            prop_assert_eq!(to_half_bits(v), bits);
        }
    }

    #[test]
    fn normalization_is_scale_invariant(x in matrix(4..12, 1..5), m in metric(), alpha in 0.01f64..100.0) {
        let scheme = NormScheme::batch(m).with_epsilon(1e-12);
        let affine = Affine::identity(x.shape()[1]);
        let base = forward(&x, &scheme, &affine);
        let scaled = forward(&x.scale(alpha), &scheme, &affine);
        prop_assert!(rel_err(scaled.data(), base.data()) < 1e-6);
    }

    #[test]
    fn topk_endpoints_are_exact(x in matrix(2..10, 1..4)) {
        let n = x.shape()[0];
        let affine = Affine::identity(x.shape()[1]);
        let l1 = forward(&x, &NormScheme::batch(NormMetric::L1), &affine);
        let top_n = forward(&x, &NormScheme::batch(NormMetric::TopK(n)), &affine);
        let linf = forward(&x, &NormScheme::batch(NormMetric::Linf), &affine);
        let top_1 = forward(&x, &NormScheme::batch(NormMetric::TopK(1)), &affine);
        prop_assert_eq!(l1, top_n);
        prop_assert_eq!(linf, top_1);
    }

    #[test]
    fn normalized_columns_are_centered(x in matrix(3..12, 1..4), m in metric()) {
        let y = forward(&x, &NormScheme::batch(m).with_affine(false), &Affine::identity(x.shape()[1]));
        let (rows, cols) = y.dims2().unwrap();
        for c in 0..cols {
            let mean = (0..rows).map(|r| y.get2(r, c)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn execution_paths_agree_bitwise(a in matrix(1..40, 1..30), seed in any::<u64>()) {
        let b = Tensor::from_f64(vec![a.shape()[1], 7], (0..a.shape()[1] * 7).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        prop_assert_eq!(
            a.matmul_with(&b, Execution::Sequential).unwrap(),
            a.matmul_with(&b, Execution::Parallel).unwrap()
        );
        let q = ConstantQuery::topk(16, 3).unwrap();
        prop_assert_eq!(
            mc_dispersion_ratio_with(q, 5000, seed, Execution::Sequential).unwrap(),
            mc_dispersion_ratio_with(q, 5000, seed, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn split_is_disjoint_and_exhaustive(n in 4usize..200, frac in 0.1f64..0.9, seed in any::<u64>()) {
        let features = Tensor::from_f64(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let ds = Dataset::new(features, (0..n).map(|i| i % 2).collect(), 2).unwrap();
        let (a, b) = split(&ds, frac, seed).unwrap();
        let mut ids: Vec<usize> = a.features().data().iter().chain(b.features().data()).map(|&v| v as usize).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn tensor_files_round_trip(x in matrix(1..6, 1..6), code in 0usize..4) {
        let p = [PrecisionMode::F64, PrecisionMode::F32, PrecisionMode::HALF, PrecisionMode::HALF_WIDE][code];
        let t = x.to_precision(p);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(&buf[..4], b"NLT1");
        prop_assert_eq!(buf.len(), 6 + 4 * 2 + 8 * t.len());
        prop_assert_eq!(decode_tensor(&buf).unwrap(), t);
    }

    #[test]
    fn trajectory_csv_round_trips(norms in prop::collection::vec(prop::collection::vec(1e-3f64..1e3, 3), 1..8)) {
        let mut t = Trajectory::new();
        for (step, layer) in norms.iter().enumerate() {
            t.log_layer(step, 0, layer).unwrap();
        }
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        prop_assert!(buf.starts_with(b"step,layer,channel,norm\n"));
        prop_assert_eq!(Trajectory::read_csv(&buf[..]).unwrap(), t);
    }

    #[test]
    fn run_csv_round_trips_to_six_places(rows in prop::collection::vec((0.0f64..10.0, 0.0f64..1.0, 0.1f64..5.0), 0..6)) {
        let epochs: Vec<EpochMetrics> = rows
            .iter()
            .enumerate()
            .map(|(i, &(loss, acc, norm))| EpochMetrics {
                epoch: i + 1,
                train_loss: loss,
                val_acc: acc,
                mean_norm: norm,
                max_norm: 2.0 * norm,
                diverged: false,
            })
            .collect();
        let mut buf = Vec::new();
        write_run_csv(&epochs, &mut buf).unwrap();
        let back = read_run_csv(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), epochs.len());
        for (a, b) in back.iter().zip(&epochs) {
            prop_assert_eq!(a.epoch, b.epoch);
            prop_assert!((a.train_loss - b.train_loss).abs() <= 5e-7);
            prop_assert!((a.max_norm - b.max_norm).abs() <= 5e-7);
        }
    }

    #[test]
    fn corrected_rate_reproduces_reference_step(w in prop::collection::vec(-3.0f64..3.0, 1..10), r in 0.1f64..10.0, eta in 1e-4f64..1.0) {
        prop_assume!(w.iter().any(|v| v.abs() > 1e-3));
        let corrected = lr_correction(eta, &w, r).unwrap();
        let target = eta / (r * r);
        prop_assert!((effective_step(corrected, &w).unwrap() / target - 1.0).abs() < 1e-12);
    }
}
