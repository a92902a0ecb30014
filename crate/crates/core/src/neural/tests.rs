use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d { out_channels, kernel, stride, padding }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn init_is_deterministic() {
    let spec = [conv(4, 3, 1, 1), LayerSpec::Relu, LayerSpec::Flatten, LayerSpec::Dense { out_features: 3 }];
    let a = Network::init(&spec, &[2, 5, 5], 9).unwrap();
    let b = Network::init(&spec, &[2, 5, 5], 9).unwrap();
    assert_eq!(save_weights(&a), save_weights(&b));
    let c = Network::init(&spec, &[2, 5, 5], 10).unwrap();
    assert_ne!(save_weights(&a), save_weights(&c));
}

#[test]
fn param_shapes() {
    let net = Network::init(&[LayerSpec::Dense { out_features: 4 }], &[3], 0).unwrap();
    let p = net.params()[0].as_ref().unwrap();
    assert_eq!((p.weight.shape(), p.bias.shape()), (&[4, 3][..], &[4][..]));
    assert!(p.bias.data().iter().all(|&b| b == 0.0));
    let limit = (6.0f32 / 7.0).sqrt();
    assert!(p.weight.data().iter().all(|w| w.abs() <= limit));

    let net = Network::init(&[conv(8, 3, 1, 0)], &[3, 16, 16], 0).unwrap();
    assert_eq!(net.params()[0].as_ref().unwrap().weight.shape(), &[8, 3, 3, 3]);
    assert_eq!(net.output_shape(), vec![8, 14, 14]);
}

#[test]
fn init_rejects_bad_shapes() {
    assert!(matches!(
        Network::init(&[LayerSpec::Dense { out_features: 2 }], &[3, 4, 4], 0),
        Err(NeuralError::ShapeMismatch(_))
    ));
    assert!(Network::init(&[conv(2, 5, 1, 0)], &[1, 3, 3], 0).is_err());
    assert!(Network::init(&[LayerSpec::MaxPool2d { window: 0, stride: 1 }], &[1, 3, 3], 0).is_err());
}

#[test]
fn identity_convolution() {
    let mut net = Network::init(&[conv(1, 1, 1, 0)], &[1, 3, 4], 0).unwrap();
    let p = net.params_mut()[0].as_mut().unwrap();
    p.weight.data_mut()[0] = 1.0;
    let x = Tensor::new(vec![1, 3, 4], (0..12).map(|v| v as f32 * 0.5 - 2.0).collect()).unwrap();
    assert_eq!(net.predict(&x).unwrap(), x);
}

#[test]
fn maxpool_example() {
    let net = Network::init(&[LayerSpec::MaxPool2d { window: 2, stride: 2 }], &[1, 2, 2], 0).unwrap();
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = net.predict(&x).unwrap();
    assert_eq!((y.shape(), y.data()), (&[1, 1, 1][..], &[4.0][..]));
}

#[test]
fn maxpool_ties_route_to_first() {
    let net = Network::init(&[LayerSpec::MaxPool2d { window: 2, stride: 2 }], &[1, 2, 2], 0).unwrap();
    let x = Tensor::new(vec![1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
    let (_, cache) = net.forward(&x).unwrap();
    let (_, gx) = net.backward(&cache, &Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap()).unwrap();
    assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn l2_normalize_example() {
    let net = Network::init(&[LayerSpec::L2Normalize], &[2], 0).unwrap();
    let y = net.predict(&Tensor::from_vec(vec![3.0, 4.0])).unwrap();
    assert!((y.data()[0] - 0.6).abs() < 1e-7 && (y.data()[1] - 0.8).abs() < 1e-7);
}

#[test]
fn relu_backward_is_piecewise() {
    let net = Network::init(&[LayerSpec::Relu], &[2], 0).unwrap();
    let (_, cache) = net.forward(&Tensor::from_vec(vec![-1.0, 2.0])).unwrap();
    let (_, gx) = net.backward(&cache, &Tensor::from_vec(vec![0.7, 0.3])).unwrap();
    assert_eq!(gx.data(), &[0.0, 0.3]);
}

#[test]
fn dense_weight_gradient_is_outer_product() {
    let net = Network::init(&[LayerSpec::Dense { out_features: 2 }], &[3], 4).unwrap();
    let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
    let g = Tensor::from_vec(vec![0.25, -1.0]);
    let (_, cache) = net.forward(&x).unwrap();
    let (grads, _) = net.backward(&cache, &g).unwrap();
    let gw = grads.layers()[0].as_ref().unwrap();
    let expected: Vec<f32> = g.data().iter().flat_map(|&a| x.data().iter().map(move |&b| a * b)).collect();
    assert_eq!(gw.weight.data(), &expected[..]);
    assert_eq!(gw.bias.data(), g.data());
}

#[test]
fn forward_rejects_bad_input() {
    let net = Network::init(&[LayerSpec::Relu], &[2], 0).unwrap();
    assert!(matches!(net.forward(&Tensor::from_vec(vec![1.0])), Err(NeuralError::ShapeMismatch(_))));
    assert_eq!(
        net.forward(&Tensor::from_vec(vec![1.0, f32::NAN])).unwrap_err(),
        NeuralError::NonFiniteValue("network input")
    );
    let (_, cache) = net.forward(&Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    assert!(net.backward(&cache, &Tensor::from_vec(vec![1.0, 2.0, 3.0])).is_err());
}

#[test]
fn sgd_arithmetic() {
    let mut net = Network::init(&[LayerSpec::Dense { out_features: 1 }], &[1], 0).unwrap();
    net.params_mut()[0].as_mut().unwrap().weight.data_mut()[0] = 1.0;
    let mut grads = Gradients::zeros_like(&net);
    grads.layers_mut()[0].as_mut().unwrap().weight.data_mut()[0] = 0.5;

    let before = net.clone();
    net.sgd_step(&grads, 0.0).unwrap();
    assert_eq!(net, before);

    net.sgd_step(&grads, 0.1).unwrap();
    assert_eq!(net.params()[0].as_ref().unwrap().weight.data()[0], 0.95);

    let other = Network::init(&[LayerSpec::Dense { out_features: 2 }], &[1], 0).unwrap();
    assert!(net.sgd_step(&Gradients::zeros_like(&other), 0.1).is_err());
}

#[test]
fn recomputed_gradients_differ_from_stale_ones() {
    // On a nonlinear net, two steps with recomputed gradients are not one
    // step with twice the first gradient.
    let spec = [LayerSpec::Dense { out_features: 4 }, LayerSpec::Relu, LayerSpec::Dense { out_features: 1 }];
    let net = Network::init(&spec, &[3], 2).unwrap();
    let x = Tensor::from_vec(vec![0.5, -0.3, 0.9]);
    let grad = |n: &Network| {
        let (y, cache) = n.forward(&x).unwrap();
        // loss = y^2 / 2
        n.backward(&cache, &y).unwrap().0
    };
    let mut twice = net.clone();
    let g0 = grad(&twice);
    twice.sgd_step(&g0, 0.1).unwrap();
    let g1 = grad(&twice);
    twice.sgd_step(&g1, 0.1).unwrap();

    let mut once = net.clone();
    let mut doubled = g0.clone();
    doubled.scale(2.0);
    once.sgd_step(&doubled, 0.1).unwrap();
    assert_ne!(g0, g1);
    assert_ne!(twice, once);
}

#[test]
fn weights_round_trip() {
    let spec = [conv(3, 3, 2, 1), LayerSpec::Relu, LayerSpec::Flatten, LayerSpec::Dense { out_features: 5 }];
    let net = Network::init(&spec, &[2, 7, 7], 77).unwrap();
    let bytes = save_weights(&net);
    let back = load_weights(&bytes, &spec, &[2, 7, 7]).unwrap();
    assert_eq!(back.params(), net.params());
    assert_eq!(save_weights(&back), bytes);
}

#[test]
fn weight_file_errors() {
    let spec = [LayerSpec::Dense { out_features: 2 }];
    let net = Network::init(&spec, &[3], 1).unwrap();
    let mut bytes = save_weights(&net);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(load_weights(&bad, &spec, &[3]), Err(NeuralError::BadMagic(_))));

    assert!(matches!(
        load_weights(&bytes, &[LayerSpec::Dense { out_features: 3 }], &[3]),
        Err(NeuralError::ShapeTableMismatch(_))
    ));
    assert!(matches!(load_weights(&bytes, &[LayerSpec::Relu], &[3]), Err(NeuralError::ShapeTableMismatch(_))));
    assert!(matches!(load_weights(&bytes, &spec, &[4]), Err(NeuralError::ShapeTableMismatch(_))));

    bytes.truncate(bytes.len() - 1);
    assert!(matches!(load_weights(&bytes, &spec, &[3]), Err(NeuralError::TruncatedPayload(_))));
}

// Finite-difference oracle --------------------------------------------------

/// Activation pattern: relu input signs and max-pool choices. Central
/// differences are only meaningful when the pattern does not change.
fn pattern(net: &Network, cache: &ForwardCache) -> (Vec<bool>, Vec<u32>) {
    let mut signs = Vec::new();
    for (layer, input) in net.spec().iter().zip(cache.layer_inputs()) {
        if *layer == LayerSpec::Relu {
            signs.extend(input.data().iter().map(|&v| v > 0.0));
        }
    }
    (signs, cache.pool_choices().flat_map(|c| c.iter().copied()).collect())
}

fn probe_loss(net: &Network, x: &Tensor, probe: &[f32]) -> (f64, (Vec<bool>, Vec<u32>)) {
    let (y, cache) = net.forward(x).unwrap();
    let loss = y.data().iter().zip(probe).map(|(&a, &b)| a as f64 * b as f64).sum();
    (loss, pattern(net, &cache))
}

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if analytic.abs().max(numeric.abs()) >= 1e-2 {
        diff / analytic.abs().max(numeric.abs()) < 1e-2
    } else {
        diff < 1e-4
    }
}

/// Checks parameter and input gradients of `L = probe . net(x)`.
fn gradient_check(net: &Network, x: &Tensor, rng: &mut ChaCha8Rng, max_coords: usize) {
    let h = 1e-3f32;
    let out_len = net.output_shape().iter().product();
    let probe: Vec<f32> = (0..out_len).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    let (_, cache) = net.forward(x).unwrap();
    let base_pattern = pattern(net, &cache);
    let grad_out = Tensor::new(net.output_shape(), probe.clone()).unwrap();
    let (grads, grad_in) = net.backward(&cache, &grad_out).unwrap();

    let mut checked = 0;
    let mut check = |analytic: f64, perturbed: &dyn Fn(f32) -> (f64, (Vec<bool>, Vec<u32>), f32)| {
        let (lp, pp, vp) = perturbed(h);
        let (lm, pm, vm) = perturbed(-h);
        if pp != base_pattern || pm != base_pattern {
            return;
        }
        let numeric = (lp - lm) / (vp as f64 - vm as f64);
        assert!(close(analytic, numeric), "analytic {analytic} vs numeric {numeric}");
        checked += 1;
    };

    for (li, p) in net.params().iter().enumerate() {
        let Some(p) = p else { continue };
        for (which, len) in [(0, p.weight.len()), (1, p.bias.len())] {
            let stride = (len / max_coords).max(1);
            for i in (0..len).step_by(stride) {
                let g = grads.layers()[li].as_ref().unwrap();
                let analytic = if which == 0 { g.weight.data()[i] } else { g.bias.data()[i] } as f64;
                check(analytic, &|delta| {
                    let mut n = net.clone();
                    let p = n.params_mut()[li].as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[i] += delta;
                    let v = t.data()[i];
                    let (l, pat) = probe_loss(&n, x, &probe);
                    (l, pat, v)
                });
            }
        }
    }
    let stride = (x.len() / max_coords).max(1);
    for i in (0..x.len()).step_by(stride) {
        check(grad_in.data()[i] as f64, &|delta| {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            let v = xp.data()[i];
            let (l, pat) = probe_loss(net, &xp, &probe);
            (l, pat, v)
        });
    }
    assert!(checked > 0, "every coordinate sat on a kink");
}

#[test]
fn gradient_check_each_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases: Vec<(Vec<LayerSpec>, Vec<usize>)> = vec![
        (vec![conv(3, 3, 1, 1)], vec![2, 5, 5]),
        (vec![conv(2, 3, 2, 1)], vec![2, 6, 7]),
        (vec![conv(2, 2, 1, 0)], vec![1, 4, 4]),
        (vec![LayerSpec::Relu], vec![10]),
        (vec![LayerSpec::MaxPool2d { window: 2, stride: 2 }], vec![2, 4, 4]),
        (vec![LayerSpec::MaxPool2d { window: 3, stride: 1 }], vec![1, 5, 5]),
        (vec![LayerSpec::Flatten], vec![2, 3, 3]),
        (vec![LayerSpec::Dense { out_features: 4 }], vec![6]),
        (vec![LayerSpec::L2Normalize], vec![8]),
    ];
    for (spec, shape) in cases {
        for seed in 0..3 {
            let net = Network::init(&spec, &shape, seed).unwrap();
            let x = random_tensor(&shape, &mut rng);
            gradient_check(&net, &x, &mut rng, 64);
        }
    }
}

#[test]
fn gradient_check_composed() {
    let spec = [
        conv(3, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { window: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 5 },
        LayerSpec::L2Normalize,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..5 {
        let net = Network::init(&spec, &[2, 8, 8], seed).unwrap();
        let x = random_tensor(&[2, 8, 8], &mut rng);
        gradient_check(&net, &x, &mut rng, 400);
    }
}

#[test]
fn forward_is_pure() {
    let spec = [conv(4, 3, 2, 1), LayerSpec::Relu, LayerSpec::Flatten, LayerSpec::Dense { out_features: 6 }];
    let net = Network::init(&spec, &[3, 9, 9], 1).unwrap();
    let x = random_tensor(&[3, 9, 9], &mut ChaCha8Rng::seed_from_u64(0));
    let a = net.predict(&x).unwrap();
    let b = net.predict(&x).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn conv_output_follows_floor_formula(
        h in 1usize..=16, w in 1usize..=16, k in 1usize..=5, s in 1usize..=3, p in 0usize..=2,
    ) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let net = Network::init(&[conv(2, k, s, p)], &[1, h, w], 0).unwrap();
        let expected = vec![2, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1];
        prop_assert_eq!(net.output_shape(), expected.clone());
        let y = net.predict(&Tensor::zeros(&[1, h, w])).unwrap();
        prop_assert_eq!(y.shape(), &expected[..]);
    }

    #[test]
    fn l2_output_has_unit_norm(v in proptest::collection::vec(-100.0f32..100.0, 1..64)) {
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assume!(norm >= 1e-6);
        let net = Network::init(&[LayerSpec::L2Normalize], &[v.len()], 0).unwrap();
        let y = net.predict(&Tensor::from_vec(v)).unwrap();
        let n = y.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() <= 1e-5);
    }
}
