use super::*;
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::rng::Xoshiro256pp;
use crate::Error;

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut r = Xoshiro256pp::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.uniform(-scale, scale) as f32)
}

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn assert_grad_ok(report: &crate::gradcheck::GradCheckReport) {
    let worst = report.worst().expect("checked entries");
    assert!(
        report.max_rel_err() < 1e-3,
        "worst entry {worst:?} (skipped {})",
        report.skipped_kinks
    );
    assert!(report.skipped_kinks * 4 <= report.entries.len());
}

// ---- conv2d ----

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 3, 3], 1.0));
}

#[test]
fn conv2d_hand_summed() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
    assert_eq!(tape.value(y).item(), 10.0);
}

#[test]
fn conv2d_output_extent() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 9, 7]));
    let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, (9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1]);
}

#[test]
fn conv2d_channel_mismatch_is_shape_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(Error::InvalidShape(_))));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let inputs = vec![
        rand_tensor(&[2, 6, 5], 1, 1.0),
        rand_tensor(&[3, 2, 3, 3], 2, 1.0),
        rand_tensor(&[3], 3, 1.0),
    ];
    for &(s, p) in &[(1, 0), (1, 1), (2, 1)] {
        let report = check_gradients(
            &inputs,
            |tape, v| tape.conv2d(v[0], v[1], v[2], s, p),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_grad_ok(&report);
    }
}

// ---- transpose_conv2d ----

#[test]
fn transpose_conv2d_unit_kernel_is_identity() {
    let x = rand_tensor(&[1, 4, 5], 9, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.transpose_conv2d(xv, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn transpose_conv2d_is_adjoint_of_conv2d() {
    for (seed, &(cin, cout, h, w, k, s, p)) in
        [(2, 3, 7, 6, 3, 1, 1), (1, 2, 8, 8, 2, 2, 0), (3, 2, 9, 7, 3, 2, 1)].iter().enumerate()
    {
        let seed = seed as u64 * 10;
        let x = rand_tensor(&[cin, h, w], seed + 1, 1.0);
        let kern = rand_tensor(&[cout, cin, k, k], seed + 2, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(kern.clone());
        let zb_out = tape.constant(Tensor::zeros(&[cout]));
        let zb_in = tape.constant(Tensor::zeros(&[cin]));
        let cx = tape.conv2d(xv, kv, zb_out, s, p).unwrap();
        let y = rand_tensor(tape.value(cx).shape(), seed + 3, 1.0);
        let yv = tape.constant(y.clone());
        let ty = tape.transpose_conv2d(yv, kv, zb_in, s, p).unwrap();
        // Output extent of the adjoint may exceed the input when strides leave remainders.
        let tyv = tape.value(ty);
        assert_eq!(tyv.shape()[0], cin);
        let lhs = tape.value(cx).dot_f64(&y);
        let mut rhs = 0.0f64;
        let (th, tw) = (tyv.shape()[1], tyv.shape()[2]);
        for c in 0..cin {
            for i in 0..h.min(th) {
                for j in 0..w.min(tw) {
                    rhs += f64::from(x.data()[(c * h + i) * w + j])
                        * f64::from(tyv.data()[(c * th + i) * tw + j]);
                }
            }
        }
        assert!((lhs - rhs).abs() < 1e-4, "<conv x, y> = {lhs}, <x, conv^T y> = {rhs}");
    }
}

#[test]
fn transpose_conv2d_gradients_match_finite_differences() {
    let inputs = vec![
        rand_tensor(&[3, 4, 3], 11, 1.0),
        rand_tensor(&[3, 2, 3, 3], 12, 1.0),
        rand_tensor(&[2], 13, 1.0),
    ];
    for &(s, p) in &[(1, 0), (2, 1), (2, 0)] {
        let report = check_gradients(
            &inputs,
            |tape, v| tape.transpose_conv2d(v[0], v[1], v[2], s, p),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_grad_ok(&report);
    }
}

// ---- maxpool ----

#[test]
fn maxpool_constant_and_small_cases() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2, 4, 4], 3.5));
    let y = tape.maxpool2d(c, 2, 2).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[2, 2, 2], 3.5));

    let x = tape.param(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).item(), 4.0);
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_ties_route_to_lowest_index() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 2, 2], &[1.0, 5.0, 5.0, 5.0]));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn maxpool_window_too_large() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(matches!(tape.maxpool2d(x, 3, 1), Err(Error::InvalidShape(_))));
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    let inputs = vec![rand_tensor(&[2, 6, 6], 21, 1.0)];
    let report = check_gradients(
        &inputs,
        |tape, v| tape.maxpool2d(v[0], 2, 2),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_grad_ok(&report);
}

// ---- batchnorm ----

fn channel_moments(t: &Tensor) -> Vec<(f64, f64)> {
    let c = t.shape()[0];
    let plane = t.len() / c;
    t.data()
        .chunks(plane)
        .map(|ch| {
            let m = ch.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64;
            let v = ch.iter().map(|&x| (f64::from(x) - m).powi(2)).sum::<f64>() / plane as f64;
            (m, v)
        })
        .collect()
}

#[test]
fn batchnorm_train_normalises_each_channel() {
    let x = rand_tensor(&[3, 8, 8], 31, 5.0).map(|v| v + 2.0);
    let mut stats = RunningStats::new(3);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.batchnorm2d(xv, g, b, &mut stats, BnMode::Train).unwrap();
    for (m, v) in channel_moments(tape.value(y)) {
        assert!(m.abs() < 1e-4);
        assert!((v - 1.0).abs() < 1e-4);
    }
    // running stats moved toward the batch statistics with momentum 0.9
    assert!(stats.mean.iter().all(|&m| (m - 0.2).abs() < 0.1));
}

#[test]
fn batchnorm_affine_on_normalised_input() {
    let x = rand_tensor(&[2, 8, 8], 32, 1.0);
    let mut stats = RunningStats::new(2);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let one = tape.constant(Tensor::full(&[2], 1.0));
    let zero = tape.constant(Tensor::zeros(&[2]));
    let n = tape.batchnorm2d(xv, one, zero, &mut stats, BnMode::Train).unwrap();
    let normalised = tape.constant(tape.value(n).clone());
    let g = tape.constant(Tensor::full(&[2], 2.0));
    let b = tape.constant(Tensor::full(&[2], 3.0));
    let y = tape.batchnorm2d(normalised, g, b, &mut stats, BnMode::Train).unwrap();
    for (m, v) in channel_moments(tape.value(y)) {
        assert!((m - 3.0).abs() < 1e-3);
        assert!((v.sqrt() - 2.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let mut stats = RunningStats {
        mean: vec![1.0],
        var: vec![4.0],
    };
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 2, 2], 3.0));
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.batchnorm2d(x, g, b, &mut stats, BnMode::Eval).unwrap();
    let expect = (2.0 / (4.0f64 + 1e-5).sqrt()) as f32;
    assert!(tape.value(y).data().iter().all(|&v| (v - expect).abs() < 1e-6));
    assert_eq!(stats.mean, vec![1.0]);
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let inputs = vec![
        rand_tensor(&[2, 4, 4], 33, 2.0),
        rand_tensor(&[2], 34, 1.0).map(|v| v + 1.5),
        rand_tensor(&[2], 35, 1.0),
    ];
    for mode in [BnMode::Train, BnMode::Eval] {
        let report = check_gradients(
            &inputs,
            |tape, v| {
                let mut stats = RunningStats {
                    mean: vec![0.1, -0.2],
                    var: vec![0.8, 1.3],
                };
                tape.batchnorm2d(v[0], v[1], v[2], &mut stats, mode)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_grad_ok(&report);
    }
}

// ---- activations ----

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn softmax_equal_logits_and_closed_form() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[4, 1], 0.7));
    let y = tape.softmax_channels(x);
    assert!(tape.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-7));

    let x = tape.constant(t(&[2], &[0.0, 3f32.ln()]));
    let y = tape.softmax_channels(x);
    let p = tape.value(y).data();
    assert!((p[0] - 0.25).abs() < 1e-6 && (p[1] - 0.75).abs() < 1e-6);
}

#[test]
fn softmax_channel_sums_are_one() {
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&[5, 3, 4], 41, 20.0));
    let y = tape.softmax_channels(x);
    let v = tape.value(y);
    for p in 0..12 {
        let s: f64 = (0..5).map(|c| f64::from(v.data()[c * 12 + p])).sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!((0..5).all(|c| v.data()[c * 12 + p] > 0.0 && v.data()[c * 12 + p] < 1.0));
    }
}

#[test]
fn pointwise_gradients_match_finite_differences() {
    let inputs = vec![rand_tensor(&[3, 3, 3], 42, 2.0)];
    let opts = GradCheckOptions::default();
    for which in 0..3 {
        let report = check_gradients(
            &inputs,
            |tape, v| {
                Ok(match which {
                    0 => tape.relu(v[0]),
                    1 => tape.sigmoid(v[0]),
                    _ => tape.softmax_channels(v[0]),
                })
            },
            &opts,
        )
        .unwrap();
        assert_grad_ok(&report);
    }
}

#[test]
fn extreme_logits_stay_finite() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1e30, -1e30, 0.0]));
    let s = tape.sigmoid(x);
    let p = tape.softmax_channels(x);
    let ce = tape.cross_entropy_loss(x, &[1]).unwrap();
    assert!(tape.value(s).all_finite());
    assert!(tape.value(p).all_finite());
    assert!(tape.value(ce).all_finite());
    let g = tape.backward(ce).unwrap();
    assert!(g.wrt(x).all_finite());
}

// ---- losses ----

#[test]
fn mse_values_and_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(t(&[2], &[0.0, 0.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    let l = tape.mse_loss(a, b).unwrap();
    assert_eq!(tape.value(l).item(), 12.5);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(a).data(), &[-3.0, -4.0]);
    let same = tape.mse_loss(b, b).unwrap();
    assert_eq!(tape.value(same).item(), 0.0);

    let inputs = vec![rand_tensor(&[2, 3, 3], 51, 1.0), rand_tensor(&[2, 3, 3], 52, 1.0)];
    let report =
        check_gradients(&inputs, |tape, v| tape.mse_loss(v[0], v[1]), &GradCheckOptions::default())
            .unwrap();
    assert_grad_ok(&report);
}

#[test]
fn cross_entropy_values() {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::full(&[5], 0.3));
    let l = tape.cross_entropy_loss(u, &[2]).unwrap();
    assert!((f64::from(tape.value(l).item()) - 5f64.ln()).abs() < 1e-6);

    let x = tape.constant(t(&[2], &[10.0, -10.0]));
    let l = tape.cross_entropy_loss(x, &[0]).unwrap();
    assert!(tape.value(l).item().abs() < 1e-8);

    assert!(matches!(
        tape.cross_entropy_loss(x, &[2]),
        Err(Error::InvalidLabel { label: 2, classes: 2 })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = t(&[3], &[0.2, -1.0, 0.5]);
    let mut tape = Tape::new();
    let x = tape.param(logits.clone());
    let l = tape.cross_entropy_loss(x, &[1]).unwrap();
    let g = tape.backward(l).unwrap().wrt(x);
    let z: f64 = logits.data().iter().map(|&v| f64::from(v).exp()).sum();
    for (i, &v) in logits.data().iter().enumerate() {
        let p = f64::from(v).exp() / z;
        let expect = p - if i == 1 { 1.0 } else { 0.0 };
        assert!((f64::from(g.data()[i]) - expect).abs() < 1e-6);
    }

    let inputs = vec![rand_tensor(&[4, 3, 3], 61, 2.0)];
    let labels: Vec<usize> = (0..9).map(|i| i % 4).collect();
    let report = check_gradients(
        &inputs,
        |tape, v| tape.cross_entropy_loss(v[0], &labels),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_grad_ok(&report);
}

// ---- structural ops ----

#[test]
fn structural_gradients_match_finite_differences() {
    let inputs = vec![
        rand_tensor(&[2, 3, 3], 71, 1.0),
        rand_tensor(&[1, 3, 3], 72, 1.0),
        rand_tensor(&[4, 27], 73, 1.0),
        rand_tensor(&[4], 74, 1.0),
    ];
    let report = check_gradients(
        &inputs,
        |tape, v| {
            let c = tape.concat_channels(v[0], v[1])?;
            let f = tape.reshape(c, &[27])?;
            let l = tape.linear(f, v[2], v[3])?;
            let s = tape.scale(l, 0.5);
            let a = tape.add(s, v[3])?;
            tape.sub(a, l)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_grad_ok(&report);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[2, 8, 8], 81, 1.0));
        let w = tape.param(rand_tensor(&[4, 2, 3, 3], 82, 1.0));
        let b = tape.param(rand_tensor(&[4], 83, 1.0));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let r = tape.relu(y);
        let p = tape.maxpool2d(r, 2, 2).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        (g.wrt(w).checksum(), g.wrt(b).checksum())
    };
    assert_eq!(run(), run());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&[1, 4, 4], 91, 1.0));
    let w = tape.param(rand_tensor(&[1, 1, 3, 3], 92, 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).is_none());
    assert!(g.get(b).is_none());
    assert!(g.get(w).is_some());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[3]));
    assert!(tape.backward(x).is_err());
}
