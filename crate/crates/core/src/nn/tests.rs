use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_batch<T: Scalar>(shape: Shape, n: usize, classes: usize, seed: u64) -> Batch<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product::<usize>() * n;
    let x = (0..len).map(|_| T::of(rng.random::<f64>())).collect();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(x, y, shape, classes).unwrap()
}

/// Perturb the biases too, so the zero-input trace is non-trivial.
fn randomize_biases<T: Scalar>(net: &mut Network<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = net.layers().to_vec();
    for l in layers {
        if let Some((nw, _, nb)) = l.param_shape() {
            let start = l.w_off + nw;
            for p in &mut net.params_mut()[start..start + nb] {
                *p = T::of(rng.random_range(-0.5..0.5));
            }
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn linear_identity_weights() {
    let mut m = Network::<f32>::new(Architecture::Linear, [1, 1, 2], 1, 0).unwrap();
    m.params_mut().copy_from_slice(&[1.0, 0.0, 0.0]);
    let b = Batch::new(vec![3.0, 5.0], vec![0], [1, 1, 2], 1).unwrap();
    assert_eq!(m.forward(&b).unwrap(), vec![3.0]);
}

#[test]
fn identical_inputs_give_identical_rows() {
    let m = Network::<f32>::new(Architecture::Lenet, [1, 28, 28], 10, 3).unwrap();
    let one = random_batch::<f32>([1, 28, 28], 1, 10, 9);
    let mut x = one.inputs().to_vec();
    x.extend_from_slice(one.inputs());
    let b = Batch::new(x, vec![4, 4], [1, 28, 28], 10).unwrap();
    let logits = m.forward(&b).unwrap();
    assert_eq!(logits[..10], logits[10..]);
    let g = m.grad_input(&b).unwrap();
    assert_eq!(g[..784], g[784..]);
}

#[test]
fn lenet_zero_image_follows_bias_path() {
    let mut m = Network::<f64>::new(Architecture::Lenet, [1, 28, 28], 10, 5).unwrap();
    randomize_biases(&mut m, 6);
    let b = Batch::new(vec![0.0; 784], vec![0], [1, 28, 28], 10).unwrap();
    let logits = m.forward(&b).unwrap();

    // Hand trace: with a zero image every spatial map is constant per channel.
    let p = m.params();
    let l = m.layers();
    let (c1, c2, d1, d2) = (l[0], l[3], l[6], l[8]);
    let relu = |v: f64| v.max(0.0);
    let a1: Vec<f64> = (0..16).map(|c| relu(p[c1.b_off + c])).collect();
    let a2: Vec<f64> = (0..32)
        .map(|o| {
            let mut s = p[c2.b_off + o];
            for (c, &a) in a1.iter().enumerate() {
                let w = &p[c2.w_off + (o * 16 + c) * 25..][..25];
                s += a * w.iter().sum::<f64>();
            }
            relu(s)
        })
        .collect();
    // 32 channels x 4 x 4 after the second pool, channel-major.
    let flat: Vec<f64> = a2.iter().flat_map(|&v| std::iter::repeat_n(v, 16)).collect();
    let h: Vec<f64> = (0..100)
        .map(|j| {
            let w = &p[d1.w_off + j * 512..][..512];
            relu(p[d1.b_off + j] + w.iter().zip(&flat).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect();
    for k in 0..10 {
        let w = &p[d2.w_off + k * 100..][..100];
        let expect = p[d2.b_off + k] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        assert!((logits[k] - expect).abs() < 1e-10, "{k}: {} vs {expect}", logits[k]);
    }
}

#[test]
fn lenet_zero_image_with_zero_biases_gives_zero_logits() {
    let m = Network::<f32>::new(Architecture::Lenet, [1, 28, 28], 10, 1).unwrap();
    let b = Batch::new(vec![0.0; 784], vec![0], [1, 28, 28], 10).unwrap();
    assert!(m.forward(&b).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let m = Network::<f32>::new(Architecture::Linear, [1, 1, 4], 2, 0).unwrap();
    let b = Batch::new(vec![0.0; 3], vec![1], [1, 1, 3], 2).unwrap();
    let msg = m.forward(&b).unwrap_err().to_string();
    assert!(msg.contains("[1, 1, 1, 4]") && msg.contains("[1, 1, 1, 3]"), "{msg}");
}

#[test]
fn batch_rejects_bad_labels_and_empty() {
    assert!(matches!(
        Batch::<f32>::new(vec![0.0; 2], vec![0, 3], [1, 1, 1], 3),
        Err(Error::LabelOutOfRange { index: 1, .. })
    ));
    assert!(matches!(
        Batch::<f32>::new(vec![], vec![], [1, 1, 1], 3),
        Err(Error::EmptyBatch)
    ));
}

fn net_with_logits(classes: usize) -> Network<f64> {
    // Linear model over a one-hot-like input where logits are the weights' column 0.
    Network::<f64>::new(Architecture::Linear, [1, 1, 1], classes, 0).unwrap()
}

fn loss_for_logits(logits: &[f64], label: usize) -> f64 {
    let mut m = net_with_logits(logits.len());
    let c = logits.len();
    m.params_mut()[..c].copy_from_slice(logits);
    m.params_mut()[c..].iter_mut().for_each(|b| *b = 0.0);
    let b = Batch::new(vec![1.0], vec![label], [1, 1, 1], c).unwrap();
    m.loss_per_example(&b).unwrap()[0]
}

#[test]
fn cross_entropy_reference_values() {
    assert!((loss_for_logits(&[0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-12);
    let saturated = loss_for_logits(&[1000.0, -1000.0], 0);
    assert!(saturated.is_finite() && saturated.abs() < 1e-12);
    let wrong = loss_for_logits(&[1000.0, -1000.0], 1);
    assert!((wrong - 2000.0).abs() < 1e-9);
}

#[test]
fn cross_entropy_matches_direct_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let z: Vec<f32> = (0..3).map(|_| rng.random_range(-8.0..8.0)).collect();
        let y = rng.random_range(0..3);
        let mut m = Network::<f32>::new(Architecture::Linear, [1, 1, 1], 3, 0).unwrap();
        m.params_mut()[..3].copy_from_slice(&z);
        m.params_mut()[3..].iter_mut().for_each(|b| *b = 0.0);
        let b = Batch::new(vec![1.0], vec![y], [1, 1, 1], 3).unwrap();
        let got = f64::from(m.loss_per_example(&b).unwrap()[0]);
        let oracle = z.iter().map(|&v| f64::from(v).exp()).sum::<f64>().ln() - f64::from(z[y]);
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }
}

#[test]
fn mean_of_per_example_losses_is_training_loss() {
    let m = Network::<f32>::new(Architecture::Mlp { hidden: vec![8] }, [1, 1, 5], 4, 2).unwrap();
    let b = random_batch::<f32>([1, 1, 5], 16, 4, 3);
    let per = m.loss_per_example(&b).unwrap();
    let (_, mean) = m.param_grad(&b).unwrap();
    let direct = per.iter().sum::<f32>() / 16.0;
    assert!((direct - mean).abs() < 1e-6);
    assert!(per.iter().all(|&l| l >= 0.0));
}

/// Central differences against both gradients, on `coords` random
/// coordinates of each. Conv nets need a small step: one pixel feeds
/// hundreds of ReLU/max-pool units and a 1e-3 step regularly crosses a kink.
fn check_gradients(arch: Architecture, shape: Shape, classes: usize, h: f64, seed: u64) {
    let coords = 100;
    let mut net = Network::<f64>::new(arch, shape, classes, seed).unwrap();
    randomize_biases(&mut net, seed + 1);
    let batch = random_batch::<f64>(shape, 3, classes, seed + 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);

    let (pgrad, _) = net.param_grad(&batch).unwrap();
    let mean_loss = |n: &Network<f64>| {
        let l = n.loss_per_example(&batch).unwrap();
        l.iter().sum::<f64>() / l.len() as f64
    };
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.random_range(0..net.param_count());
        let orig = net.params()[i];
        net.params_mut()[i] = orig + h;
        let up = mean_loss(&net);
        net.params_mut()[i] = orig - h;
        let down = mean_loss(&net);
        net.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(fd, pgrad[i]));
    }
    assert!(worst < 1e-3, "parameter gradient rel err {worst}");

    let igrad = net.grad_input(&batch).unwrap();
    let total_loss = |b: &Batch<f64>| net.loss_per_example(b).unwrap().iter().sum::<f64>();
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.random_range(0..batch.inputs().len());
        let mut x = batch.inputs().to_vec();
        x[i] += h;
        let up = total_loss(&batch.with_inputs(x.clone()));
        x[i] -= 2.0 * h;
        let down = total_loss(&batch.with_inputs(x));
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(fd, igrad[i]));
    }
    assert!(worst < 1e-3, "input gradient rel err {worst}");
}

#[test]
fn gradients_match_finite_differences_linear() {
    check_gradients(Architecture::Linear, [1, 1, 6], 3, 1e-3, 20);
}

#[test]
fn gradients_match_finite_differences_mlp() {
    check_gradients(Architecture::Mlp { hidden: vec![16, 8] }, [1, 1, 10], 4, 1e-3, 30);
}

#[test]
fn gradients_match_finite_differences_lenet() {
    check_gradients(Architecture::Lenet, [1, 28, 28], 10, 1e-6, 40);
}

#[test]
fn gradients_match_finite_differences_lenet_rgb() {
    check_gradients(Architecture::Lenet, [3, 16, 16], 5, 1e-6, 50);
}

#[test]
fn f32_gradients_track_f64_gradients() {
    let net = Network::<f32>::new(Architecture::Lenet, [1, 28, 28], 10, 60).unwrap();
    let wide = net.cast::<f64>();
    let b32 = random_batch::<f32>([1, 28, 28], 4, 10, 61);
    let b64 = Batch::new(
        b32.inputs().iter().map(|&v| f64::from(v)).collect(),
        b32.labels().to_vec(),
        b32.shape(),
        10,
    )
    .unwrap();
    let (g32, _) = net.param_grad(&b32).unwrap();
    let (g64, _) = wide.param_grad(&b64).unwrap();
    let scale = g64.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = g32.iter().zip(&g64).fold(0.0f64, |m, (a, b)| m.max((f64::from(*a) - b).abs()));
    assert!(diff / scale < 1e-4, "{}", diff / scale);
}

#[test]
fn exact_minimum_has_zero_gradient() {
    // Squared loss with logits exactly equal to the one-hot targets.
    let mut m = Network::<f64>::new(Architecture::Linear, [1, 1, 2], 2, 0)
        .unwrap()
        .with_loss(LossKind::SquaredError);
    m.params_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let b = Batch::new(vec![1.0, 0.0, 0.0, 1.0], vec![0, 1], [1, 1, 2], 2).unwrap();
    let (g, loss) = m.param_grad(&b).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
    let gi = m.grad_input(&b).unwrap();
    assert!(gi.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
}

#[test]
fn sgd_on_quadratic_follows_closed_form() {
    // One output, input x = 1, target 1: loss (w + b - 1)^2, so both
    // parameters receive 2(u - 1) with u = w + b, and
    // u_t - 1 = (1 - 4 lr)^t (u_0 - 1), w_t = w_0 - (u_0 - u_t) / 2.
    let mut m = Network::<f64>::new(Architecture::Linear, [1, 1, 1], 1, 0)
        .unwrap()
        .with_loss(LossKind::SquaredError);
    let (w0, b0, lr) = (3.0, 0.0, 0.05);
    m.params_mut().copy_from_slice(&[w0, b0]);
    let batch = Batch::new(vec![1.0], vec![0], [1, 1, 1], 1).unwrap();
    let u0 = w0 + b0;
    for t in 1..=40 {
        m.sgd_step(&batch, lr).unwrap();
        let ut = 1.0 + (1.0 - 4.0 * lr).powi(t) * (u0 - 1.0);
        assert!((m.params()[0] - (w0 - (u0 - ut) / 2.0)).abs() < 1e-12);
        assert!((m.params()[0] + m.params()[1] - ut).abs() < 1e-12);
    }
    assert!((m.params()[0] + m.params()[1] - 1.0).abs() < 1e-3);
}

#[test]
fn sgd_step_is_exactly_minus_lr_times_gradient() {
    let mut m = Network::<f32>::new(Architecture::Mlp { hidden: vec![5] }, [1, 1, 4], 3, 8).unwrap();
    let b = random_batch::<f32>([1, 1, 4], 6, 3, 9);
    let before = m.params().to_vec();
    let (g, loss_before) = m.param_grad(&b).unwrap();
    m.sgd_step(&b, 0.01).unwrap();
    for ((p, q), gi) in m.params().iter().zip(&before).zip(&g) {
        assert_eq!(*p, q - 0.01 * gi);
    }
    let (_, loss_after) = m.param_grad(&b).unwrap();
    assert!(loss_after < loss_before);
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let mut m = Network::<f32>::new(Architecture::Lenet, [1, 28, 28], 10, 8).unwrap();
    let b = random_batch::<f32>([1, 28, 28], 2, 10, 9);
    let before = m.clone();
    m.sgd_step(&b, 0.0).unwrap();
    assert_eq!(m, before);
    assert!(m.sgd_step(&b, -1.0).is_err());
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let mut m = Network::<f32>::new(Architecture::Lenet, [1, 28, 28], 10, 77).unwrap();
        let mut opt = Sgd::new(0.9, 0.0, m.param_count());
        for s in 0..5 {
            let b = random_batch::<f32>([1, 28, 28], 8, 10, 100 + s);
            let (g, _) = m.param_grad(&b).unwrap();
            opt.step(&mut m, &g, 0.01);
        }
        m
    };
    let (a, b) = (run(), run());
    assert!(a.all_finite());
    assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn lr_schedule_is_piecewise_constant() {
    let s = LrSchedule {
        phases: vec![
            LrPhase { from_epoch: 1, lr: 0.1 },
            LrPhase { from_epoch: 4, lr: 0.01 },
        ],
    };
    s.validate().unwrap();
    assert_eq!(s.lr_at(1), 0.1);
    assert_eq!(s.lr_at(3), 0.1);
    assert_eq!(s.lr_at(4), 0.01);
    assert_eq!(s.lr_at(40), 0.01);
    assert!(LrSchedule { phases: vec![LrPhase { from_epoch: 2, lr: 0.1 }] }.validate().is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_normalized(z in proptest::collection::vec(-50.0f32..50.0, 10)) {
        let s = softmax(&z, 5);
        for row in s.chunks(5) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn losses_are_non_negative(z in proptest::collection::vec(-80.0f32..80.0, 4), y in 0usize..4) {
        let mut m = Network::<f32>::new(Architecture::Linear, [1, 1, 1], 4, 0).unwrap();
        m.params_mut()[..4].copy_from_slice(&z);
        m.params_mut()[4..].iter_mut().for_each(|b| *b = 0.0);
        let b = Batch::new(vec![1.0], vec![y], [1, 1, 1], 4).unwrap();
        prop_assert!(m.loss_per_example(&b).unwrap()[0] >= 0.0);
    }
}
