mod common;

use common::*;
use metaquant::hypernet::GenerationMode;
use metaquant::target_net::forward_with_weights;
use metaquant::{Tape, Tensor};
use metaquant_oracle as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;


fn assert_close(actual: &[f32], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        assert!((a as f64 - e).abs() <= tol * (1.0 + e.abs()), "index {i}: {a} vs {e}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..13), rng.random_range(1..7));
        let a = random_vec(m * k, 2.0, &mut rng);
        let b = random_vec(k * n, 2.0, &mut rng);
        let mut tape = Tape::new();
        let va = tape.constant(Tensor::new(vec![m, k], a.clone()).unwrap());
        let vb = tape.constant(Tensor::new(vec![k, n], b.clone()).unwrap());
        let y = tape.matmul(va, vb).unwrap();
        assert_close(tape.value(y).data(), &oracle::matmul(&to_f64(&a), &to_f64(&b), m, k, n), 1e-5);
    }
}

#[test]
fn conv_matches_six_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, padding, kernel) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5)] {
        let g = oracle::Conv { batch: 2, channels: 3, height: 7, width: 6, filters: 4, kernel, stride, padding };
        let x = random_vec(2 * 3 * 7 * 6, 1.0, &mut rng);
        let k = random_vec(4 * 3 * kernel * kernel, 1.0, &mut rng);
        let mut tape = Tape::new();
        let vx = tape.constant(Tensor::new(vec![2, 3, 7, 6], x.clone()).unwrap());
        let vk = tape.constant(Tensor::new(vec![4, 3, kernel, kernel], k.clone()).unwrap());
        let y = tape.conv2d(vx, vk, stride, padding).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, g.out_h(), g.out_w()]);
        assert_close(tape.value(y).data(), &oracle::conv2d(&to_f64(&x), &to_f64(&k), g), 1e-5);
    }
}

#[test]
fn conv_and_pool_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = oracle::Conv { batch: 2, channels: 2, height: 6, width: 5, filters: 3, kernel: 3, stride: 1, padding: 1 };
    let x = random_vec(2 * 2 * 6 * 5, 1.0, &mut rng);
    let k = random_vec(3 * 2 * 9, 1.0, &mut rng);
    let planes = g.batch * g.filters;
    let pooled_len = planes * (g.out_h() / 2) * (g.out_w() / 2);
    let r = random_vec(pooled_len, 1.0, &mut rng);

    let mut tape = Tape::new();
    let vx = tape.param(Tensor::new(vec![2, 2, 6, 5], x.clone()).unwrap());
    let vk = tape.param(Tensor::new(vec![3, 2, 3, 3], k.clone()).unwrap());
    let y = tape.conv2d(vx, vk, 1, 1).unwrap();
    let p = tape.max_pool2(y).unwrap();
    let vr = tape.constant(Tensor::new(tape.shape(p).to_vec(), r.clone()).unwrap());
    let prod = tape.mul(p, vr).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let r64 = to_f64(&r);
    let objective = |xs: &[f64], ks: &[f64]| {
        let y = oracle::conv2d(xs, ks, g);
        let p = oracle::max_pool2(&y, planes, g.out_h(), g.out_w());
        p.iter().zip(&r64).map(|(a, b)| a * b).sum::<f64>()
    };
    let (x64, k64) = (to_f64(&x), to_f64(&k));
    let all_x: Vec<usize> = (0..x.len()).collect();
    let all_k: Vec<usize> = (0..k.len()).collect();
    let dx = oracle::central_difference(|xs| objective(xs, &k64), &x64, &all_x, FD_STEP);
    let dk = oracle::central_difference(|ks| objective(&x64, ks), &k64, &all_k, FD_STEP);
    let ax = oracle::agreement(&to_f64(tape.grad(vx).unwrap()), &dx, REL_TOL, MAGNITUDE_FLOOR);
    let ak = oracle::agreement(&to_f64(tape.grad(vk).unwrap()), &dk, REL_TOL, MAGNITUDE_FLOOR);
    assert!(ax.fraction() >= 0.95, "{ax:?}");
    assert!(ak.fraction() >= 0.95, "{ak:?}");
}

#[test]
fn cross_entropy_gradient_matches_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (rows, classes) = (5, 4);
    let z = random_vec(rows * classes, 3.0, &mut rng);
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let mut tape = Tape::new();
    let vz = tape.param(Tensor::new(vec![rows, classes], z.clone()).unwrap());
    let loss = tape.softmax_cross_entropy(vz, &labels).unwrap();
    assert!((tape.value(loss).data()[0] as f64 - oracle::cross_entropy(&to_f64(&z), &labels, classes)).abs() < 1e-6);
    tape.backward(loss).unwrap();
    let coords: Vec<usize> = (0..z.len()).collect();
    let fd = oracle::central_difference(|zs| oracle::cross_entropy(zs, &labels, classes), &to_f64(&z), &coords, FD_STEP);
    let a = oracle::agreement(&to_f64(tape.grad(vz).unwrap()), &fd, REL_TOL, MAGNITUDE_FLOOR);
    assert_eq!(a.within, a.compared, "{a:?}");
}

#[test]
fn mlp_identity_pipeline_matches_differences() {
    let a = pooled_identity_agreement("mlp-3", &[2], 40);
    assert!(a.compared > 1000, "{a:?}");
    assert!(a.fraction() >= 0.95, "{a:?}");
}

#[test]
fn cnn_identity_pipeline_matches_differences() {
    let a = pooled_identity_agreement("cnn-5", &[1, 6, 6], 30);
    assert!(a.compared > 1000, "{a:?}");
    assert!(a.fraction() >= 0.95, "{a:?}");
}

#[test]
fn reference_loss_agrees_with_tape() {
    let f = fixture("cnn-5", &[1, 6, 6], 7);
    let mut tape = Tape::new();
    let bound = f.net.bind(&mut tape, false);
    let generated = f.net.generate(&mut tape, &bound, &f.policy, GenerationMode::Identity).unwrap();
    let x = tape.constant(f.x.clone());
    let logits = forward_with_weights(&mut tape, &f.spec, &generated.layers, x).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &f.labels).unwrap();
    let expected = reference_loss(&f.spec, &params_f64(&f.net), 8, &f.policy, None, &to_f64(f.x.data()), &f.labels);
    assert!((tape.value(loss).data()[0] as f64 - expected).abs() < 1e-5);
}

#[test]
fn quantized_gradients_are_masked_identity_path() {
    for (name, shape) in [("mlp-3", vec![2]), ("cnn-5", vec![1, 6, 6])] {
        masked_identity_check(&fixture(name, &shape, 8)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

/// γ does not pass through the rounding step, so with the quantizer active
/// its head's gradients are ordinary derivatives of the loss with `Ŵ` held
/// fixed.
#[test]
fn gamma_head_gradients_with_quantizer_active() {
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for seed in 10..14 {
        let f = fixture("mlp-3", &[2], seed);
        let q = run_tape(&f, GenerationMode::Quantized);
        let w_hat: Vec<Vec<f64>> = q.w_hat.iter().map(|&v| to_f64(q.tape.value(v).data())).collect();
        let params = params_f64(&f.net);
        let x = to_f64(f.x.data());
        for block in 0..f.net.block_count() {
            for t in [6, 7] {
                let idx = block * common::TENSORS_PER_BLOCK + t;
                let coords: Vec<usize> = (0..params[idx].len()).collect();
                let mut probe = params.clone();
                let fd = oracle::central_difference(
                    |v| {
                        probe[idx].copy_from_slice(v);
                        reference_loss(&f.spec, &probe, 8, &f.policy, Some(&w_hat), &x, &f.labels)
                    },
                    &params[idx],
                    &coords,
                    FD_STEP,
                );
                analytic.extend(q.grads[idx].iter().map(|&g| g as f64));
                numeric.extend(fd);
            }
        }
    }
    let a = oracle::agreement(&analytic, &numeric, REL_TOL, MAGNITUDE_FLOOR);
    assert!(a.fraction() >= 0.95, "{a:?}");
}
