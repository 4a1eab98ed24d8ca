mod common;

use common::rng;
use gcapsnet::capsule_ops::{
    agreement_update, coupling_from_logits, margin_loss, predict, reconstruction_loss, squash, weighted_sum, AxisMode,
    LogitMatrix, PredictionTensor, TypePartition, MARGIN_DOWNWEIGHT, MARGIN_NEGATIVE, MARGIN_POSITIVE,
};
use gcapsnet::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn squash_one(x: &[f64]) -> Vec<f64> {
    let tape = Tape::new();
    let t = Tensor::new(&[1, x.len()], x.to_vec()).unwrap();
    squash(tape.constant(t), -1).unwrap().value().data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..5,
        values in prop::collection::vec(-700.0f64..700.0, 1..40),
    ) {
        let cols = values.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| values.iter().map(move |v| v * (r as f64 + 1.0) / rows as f64)).collect();
        let tape = Tape::new();
        let s = tape.constant(Tensor::new(&[rows, cols], data).unwrap()).softmax(1).unwrap().value();
        for row in s.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn squash_norm_below_one_and_direction_kept(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let out = squash_one(&v);
        prop_assert!(norm(&out) < 1.0);
        let n = norm(&v);
        if n > 1e-6 {
            let cosine = v.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>() / (n * norm(&out));
            prop_assert!((cosine - 1.0).abs() < 1e-9, "cosine {}", cosine);
        }
    }

    #[test]
    fn squash_of_unit_vector_has_half_norm(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let n = norm(&v);
        prop_assume!(n > 1e-3);
        let unit: Vec<f64> = v.iter().map(|x| x / n).collect();
        prop_assert!((norm(&squash_one(&unit)) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn coupling_is_normalized_and_shift_invariant(
        seed in any::<u64>(),
        types in 1usize..4,
        per_type in 1usize..5,
        upper in 1usize..5,
        shift in -30.0f64..30.0,
    ) {
        let n = types * per_type;
        let mut r = rng(seed);
        let logits = Tensor::randn(&[2, n, upper], 3.0, &mut r);
        let partition = TypePartition::new(types, per_type, n).unwrap();
        let tape = Tape::new();

        // rows over upper capsules
        let c = coupling_from_logits(&LogitMatrix(tape.constant(logits.clone())), AxisMode::UpperPerLower, None).unwrap().c.value();
        for row in c.data().chunks(upper) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let shifted_rows = Tensor::from_fn(logits.shape(), |k| logits.data()[k] + shift * ((k / upper) % 3) as f64);
        let c2 = coupling_from_logits(&LogitMatrix(tape.constant(shifted_rows)), AxisMode::UpperPerLower, None).unwrap().c.value();
        prop_assert!(c.max_abs_diff(&c2) < 1e-9);

        // columns over each type group
        let c = coupling_from_logits(&LogitMatrix(tape.constant(logits.clone())), AxisMode::LowerPerUpper, Some(&partition)).unwrap().c.value();
        for b in 0..2 {
            for j in 0..upper {
                for g in partition.groups() {
                    let total: f64 = g.clone().map(|i| c.at(&[b, i, j])).sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                }
            }
        }
        // a constant per (group, upper) leaves couplings unchanged
        let shifted_groups = Tensor::from_fn(logits.shape(), |k| {
            let (i, j) = ((k / upper) % n, k % upper);
            logits.data()[k] + shift * ((i / per_type) as f64 - j as f64)
        });
        let c2 = coupling_from_logits(&LogitMatrix(tape.constant(shifted_groups)), AxisMode::LowerPerUpper, Some(&partition)).unwrap().c.value();
        prop_assert!(c.max_abs_diff(&c2) < 1e-9);
    }
}

#[test]
fn squash_at_origin_is_zero() {
    assert!(squash_one(&[0.0; 8]).iter().all(|&x| x == 0.0));
}

#[test]
fn predict_weighted_sum_and_agreement_match_loops() {
    let mut r = rng(3);
    for _ in 0..20 {
        let (b, n, j, din, dout) = (
            r.random_range(1..3),
            r.random_range(1..6),
            r.random_range(1..4),
            r.random_range(1..4),
            r.random_range(1..4),
        );
        let u = Tensor::randn(&[b, n, din], 1.0, &mut r);
        let w = Tensor::randn(&[n, j, dout, din], 1.0, &mut r);
        let logits = Tensor::randn(&[b, n, j], 1.0, &mut r);
        let v = Tensor::randn(&[b, j, dout], 1.0, &mut r);
        let tape = Tape::new();
        let pred = predict(tape.constant(u.clone()), tape.constant(w.clone())).unwrap();
        let uhat = pred.u_hat().unwrap().value();
        let mut expected = Tensor::zeros(&[b, n, j, dout]);
        for bb in 0..b {
            for i in 0..n {
                for jj in 0..j {
                    for k in 0..dout {
                        let x: f64 = (0..din).map(|m| w.at(&[i, jj, k, m]) * u.at(&[bb, i, m])).sum();
                        expected.set(&[bb, i, jj, k], x);
                    }
                }
            }
        }
        assert!(uhat.max_abs_diff(&expected) < 1e-12);

        let c = coupling_from_logits(&LogitMatrix(tape.constant(logits.clone())), AxisMode::UpperPerLower, None).unwrap();
        let cv = c.c.value();
        let s = weighted_sum(&c, &pred, None).unwrap().value();
        for bb in 0..b {
            for jj in 0..j {
                for k in 0..dout {
                    let x: f64 = (0..n).map(|i| cv.at(&[bb, i, jj]) * expected.at(&[bb, i, jj, k])).sum();
                    assert!((s.at(&[bb, jj, k]) - x).abs() < 1e-12);
                }
            }
        }

        let updated = agreement_update(&LogitMatrix(tape.constant(logits.clone())), &pred, tape.constant(v.clone()))
            .unwrap()
            .0
            .value();
        for bb in 0..b {
            for i in 0..n {
                for jj in 0..j {
                    let dot: f64 = (0..dout).map(|k| expected.at(&[bb, i, jj, k]) * v.at(&[bb, jj, k])).sum();
                    assert!((updated.at(&[bb, i, jj]) - logits.at(&[bb, i, jj]) - dot).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn weighted_sum_over_upper_major_input_is_consistent() {
    let mut r = rng(4);
    let upper_major = Tensor::randn(&[2, 3, 5, 4], 1.0, &mut r);
    let tape = Tape::new();
    let pred = PredictionTensor::from_upper_major(tape.constant(upper_major.clone()));
    let c = coupling_from_logits(&LogitMatrix(tape.constant(Tensor::zeros(&[2, 5, 3]))), AxisMode::LowerPerUpper, None).unwrap();
    let s = weighted_sum(&c, &pred, None).unwrap().value();
    // uniform couplings over lower capsules average the votes
    for b in 0..2 {
        for j in 0..3 {
            for k in 0..4 {
                let mean: f64 = (0..5).map(|i| upper_major.at(&[b, j, i, k])).sum::<f64>() / 5.0;
                assert!((s.at(&[b, j, k]) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn losses_match_closed_forms() {
    let mut r = rng(5);
    for _ in 0..20 {
        let (b, k) = (r.random_range(1..5), r.random_range(2..11));
        let lengths = Tensor::uniform(&[b, k], 0.0, 1.0, &mut r);
        let mut labels = Tensor::zeros(&[b, k]);
        for bb in 0..b {
            labels.set(&[bb, r.random_range(0..k)], 1.0);
        }
        let mut expected = 0.0;
        for bb in 0..b {
            for kk in 0..k {
                let l = lengths.at(&[bb, kk]);
                expected += if labels.at(&[bb, kk]) == 1.0 {
                    (MARGIN_POSITIVE - l).max(0.0).powi(2)
                } else {
                    MARGIN_DOWNWEIGHT * (l - MARGIN_NEGATIVE).max(0.0).powi(2)
                };
            }
        }
        expected /= b as f64;
        let tape = Tape::new();
        let got = margin_loss(tape.constant(lengths), &labels).unwrap().value().item();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

        let decoded = Tensor::uniform(&[b, 12], 0.0, 1.0, &mut r);
        let target = Tensor::uniform(&[b, 12], 0.0, 1.0, &mut r);
        let expected: f64 = decoded.data().iter().zip(target.data()).map(|(d, t)| (d - t).powi(2)).sum::<f64>() / b as f64;
        let got = reconstruction_loss(tape.constant(decoded), tape.constant(target)).unwrap().value().item();
        assert!((got - expected).abs() < 1e-12);
    }
    // perfect predictions cost nothing
    let tape = Tape::new();
    let labels = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let lengths = Tensor::new(&[1, 3], vec![0.05, 0.95, 0.1]).unwrap();
    assert_eq!(margin_loss(tape.constant(lengths), &labels).unwrap().value().item(), 0.0);
}

fn conv_naive(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ks) = (x.shape(), k.shape());
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, o, oh, ow]);
    for bb in 0..b {
        for oo in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for cc in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let (iy, ix) = ((y * stride + dy) as isize - pad as isize, (xx * stride + dx) as isize - pad as isize);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(&[bb, cc, iy as usize, ix as usize]) * k.at(&[oo, cc, dy, dx]);
                                }
                            }
                        }
                    }
                    out.set(&[bb, oo, y, xx], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_reference() {
    let mut r = rng(6);
    for _ in 0..30 {
        let (b, c, o) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..5));
        let (kh, kw) = (r.random_range(1..5), r.random_range(1..5));
        let (stride, pad) = (r.random_range(1..4), r.random_range(0..3));
        let (h, w) = (r.random_range(kh.max(1)..12), r.random_range(kw.max(1)..12));
        let x = Tensor::randn(&[b, c, h, w], 1.0, &mut r);
        let k = Tensor::randn(&[o, c, kh, kw], 1.0, &mut r);
        let tape = Tape::new();
        let got = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), stride, pad).unwrap().value();
        let expected = conv_naive(&x, &k, stride, pad);
        assert_eq!(got.shape(), expected.shape());
        assert!(got.max_abs_diff(&expected) < 1e-10);
    }
    // large batches go through the chunked path
    let x = Tensor::randn(&[40, 2, 10, 10], 1.0, &mut r);
    let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let tape = Tape::new();
    let got = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), 1, 0).unwrap().value();
    assert!(got.max_abs_diff(&conv_naive(&x, &k, 1, 0)) < 1e-10);
}
