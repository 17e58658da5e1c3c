use super::*;
use proptest::prelude::*;

fn close(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn softmax_symmetry() {
    let mut g = Graph::new();
    let x = g.constant_slice(&[2], &[0.0, 0.0]);
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);
}

#[test]
fn softmax_hand_value() {
    let mut g = Graph::new();
    let x = g.constant_slice(&[2], &[2.0f32.ln(), 0.0]);
    let s = g.softmax(x).unwrap();
    assert!(close(g.value(s)[0], 2.0 / 3.0, 1e-6));
    assert!(close(g.value(s)[1], 1.0 / 3.0, 1e-6));
}

#[test]
fn relu_definition() {
    let mut g = Graph::new();
    let x = g.constant_slice(&[2], &[-1.0, 2.0]);
    let r = g.relu(x);
    assert_eq!(g.value(r), &[0.0, 2.0]);
}

#[test]
fn backward_square_via_fanout() {
    // loss = x*x at x=3: both product paths contribute, grad = 2x = 6.
    let mut g = Graph::new();
    let t = Tensor::scalar(3.0);
    let x = g.param(&t);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_sigmoid_at_zero() {
    let mut g = Graph::new();
    let t = Tensor::scalar(0.0);
    let x = g.param(&t);
    let y = g.sigmoid(x);
    g.backward(y).unwrap();
    assert!(close(g.grad(x).unwrap()[0], 0.25, 1e-7));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
    let x = g.param(&t);
    let err = g.backward(x).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarLoss { .. }));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.zeros(&[2, 3]);
    let b = g.zeros(&[4]);
    let err = g.matvec(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matvec"), "{msg}");
    assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
}

#[test]
fn constant_never_accumulates_gradient() {
    let mut g = Graph::new();
    let c = g.constant_slice(&[1], &[2.0]);
    let t = Tensor::scalar(5.0);
    let x = g.param(&t);
    let y = g.mul(c, x).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap(), &[2.0]);
}

#[test]
fn collect_grads_reports_detached_param() {
    let mut g = Graph::new();
    let used = Tensor::scalar(1.0);
    let unused = Tensor::scalar(1.0);
    let a = g.param(&used);
    let b = g.param(&unused);
    let loss = g.mul(a, a).unwrap();
    g.backward(loss).unwrap();
    let err = collect_grads(&g, &[("a", a), ("b", b)]).unwrap_err();
    assert!(matches!(err, TensorError::MissingGrad { ref name } if name == "b"));
}

#[test]
fn adam_zero_grad_keeps_params_and_advances_step() {
    let mut p = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
    let before = p.clone();
    let mut opt = Adam::new(0.001, 1.0);
    opt.step(&mut [&mut p], &[vec![0.0, 0.0]]).unwrap();
    assert_eq!(p, before);
    assert_eq!(opt.steps_taken(), 1);
}

#[test]
fn adam_initial_effective_lr() {
    let opt = Adam::new(0.001, 0.9998);
    assert_eq!(opt.effective_lr(), 0.001);
}

#[test]
fn adam_decay_is_per_step() {
    let mut p = Tensor::scalar(1.0);
    let mut opt = Adam::new(0.001, 0.5);
    opt.step(&mut [&mut p], &[vec![1.0]]).unwrap();
    assert!(close(opt.effective_lr(), 0.0005, 1e-9));
    opt.step(&mut [&mut p], &[vec![1.0]]).unwrap();
    assert!(close(opt.effective_lr(), 0.00025, 1e-9));
}

#[test]
fn adam_first_step_magnitude_is_bias_corrected_lr() {
    for &grad in &[3.0f32, -0.7, 0.02] {
        let mut p = Tensor::scalar(10.0);
        let mut opt = Adam::new(0.001, 1.0);
        opt.step(&mut [&mut p], &[vec![grad]]).unwrap();
        let update = (10.0 - p.data()[0]).abs();
        assert!(
            (update - 0.001).abs() < 1e-6,
            "grad {grad}: update {update}"
        );
        assert_eq!((10.0 - p.data()[0]).signum(), grad.signum());
    }
}

#[test]
fn adam_grad_clip_rescales_global_norm() {
    // Norm of [3, 4] is 5; clipping at 1 scales grads by 1/5.
    let mut a = Tensor::scalar(0.0);
    let mut b = Tensor::scalar(0.0);
    let mut clipped = Adam::new(0.001, 1.0).with_grad_clip(1.0);
    clipped
        .step(&mut [&mut a, &mut b], &[vec![3.0], vec![4.0]])
        .unwrap();
    let mut a2 = Tensor::scalar(0.0);
    let mut b2 = Tensor::scalar(0.0);
    let mut plain = Adam::new(0.001, 1.0);
    plain
        .step(&mut [&mut a2, &mut b2], &[vec![0.6], vec![0.8]])
        .unwrap();
    assert_eq!(a.data()[0], a2.data()[0]);
    assert_eq!(b.data()[0], b2.data()[0]);
}

#[test]
fn same_seed_same_trajectory_bitwise() {
    use rand::SeedableRng;
    let run = || {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut w = Tensor::zeros(&[4]);
        w.fill_uniform(&mut rng, 0.1);
        let target = Tensor::from_vec(&[4], vec![0.3, -0.2, 0.9, 0.0]).unwrap();
        let mut opt = Adam::new(0.01, 0.999);
        for _ in 0..25 {
            let mut g = Graph::new();
            let wid = g.param(&w);
            let t = g.constant(&target);
            let neg = g.scale(t, -1.0);
            let diff = g.add(wid, neg).unwrap();
            let sq = g.mul(diff, diff).unwrap();
            let loss = g.sum_all(sq);
            g.backward(loss).unwrap();
            let grads = collect_grads(&g, &[("w", wid)]).unwrap();
            opt.step(&mut [&mut w], &grads).unwrap();
        }
        w.data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn param_digest_detects_single_bit_change() {
    let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
    let mut b = a.clone();
    let d1 = param_digest([("t", &a)]);
    assert_eq!(d1, param_digest([("t", &b)]));
    b.data_mut()[1] = f32::from_bits(2.0f32.to_bits() ^ 1);
    assert_ne!(d1, param_digest([("t", &b)]));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in proptest::collection::vec(-8.0f32..8.0, 1..12)) {
        let mut g = Graph::new();
        let n = xs.len();
        let x = g.constant_slice(&[n], &xs);
        let s = g.softmax(x).unwrap();
        let sum: f32 = g.value(s).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(g.value(s).iter().all(|&p| p > 0.0));
    }

    #[test]
    fn log_softmax_matches_softmax_log(xs in proptest::collection::vec(-8.0f32..8.0, 1..12)) {
        let mut g = Graph::new();
        let n = xs.len();
        let x = g.constant_slice(&[n], &xs);
        let s = g.softmax(x).unwrap();
        let ls = g.log_softmax(x).unwrap();
        for (a, b) in g.value(s).iter().zip(g.value(ls).iter()) {
            prop_assert!((a.ln() - b).abs() < 1e-5);
        }
    }
}
