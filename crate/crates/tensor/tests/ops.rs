use hpn_tensor::gradcheck::check;
use hpn_tensor::{Graph, Mode, ParamStore, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Fixed random projection so every output element contributes to the scalar.
fn project(g: &mut Graph, v: hpn_tensor::Var, seed: u64) -> hpn_tensor::Result<hpn_tensor::Var> {
    let n = g.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_vec(&[n, 1], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let flat = g.reshape(v, &[1, n])?;
    let w = g.input(w)?;
    let out = g.linear(flat, w, None)?;
    g.reshape(out, &[1])
}

#[test]
fn conv_identity_kernel() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.input(x.clone()).unwrap();
    let wv = g.input(w).unwrap();
    let bv = g.input(Tensor::zeros(&[3])).unwrap();
    let y = g.conv2d(xv, wv, bv, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_zero_input_gives_bias() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.input(Tensor::zeros(&[1, 2, 5, 4])).unwrap();
    let wv = g.input(rand_tensor(&mut rng, &[3, 2, 3, 3])).unwrap();
    let bv = g.input(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 5, 4]);
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0][i / 20]);
    }
}

/// Direct definition of "same"-padded cross-correlation.
fn conv_reference(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for b_ in 0..n {
        for fo in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b[fo];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((b_ * c + ci) * h + ii as usize) * wd + jj as usize]
                                    * w.data()[((fo * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b_ * f + fo) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_definition_with_stride() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for stride in [1, 2, 3] {
        let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = vec![0.1, 0.2, -0.3, 0.0];
        let mut g = Graph::new(&store, Mode::Eval);
        let xv = g.input(x.clone()).unwrap();
        let wv = g.input(w.clone()).unwrap();
        let bv = g.input(Tensor::from_vec(&[4], b.clone()).unwrap()).unwrap();
        let y = g.conv2d(xv, wv, bv, stride, 1).unwrap();
        let r = conv_reference(&x, &w, &b, stride, 1);
        for (a, e) in g.value(y).data().iter().zip(&r) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_gradients() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![
        rand_tensor(&mut rng, &[1, 3, 4, 4]),
        rand_tensor(&mut rng, &[2, 3, 3, 3]),
        rand_tensor(&mut rng, &[2]),
    ];
    for stride in [1, 2] {
        let r = check(&store, Mode::Eval, &inputs, 1e-6, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, 1)?;
            project(g, y, 9)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL, "{:?}", r.rel_errors);
    }
}

#[test]
fn conv_shape_mismatch() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
    let w = g.input(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[1])).unwrap();
    assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn maxpool_constant_and_routing() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(Tensor::full(&[1, 1, 4, 4], 3.0)).unwrap();
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.0));

    let mut data = vec![0.0; 16];
    data[5] = 2.0;
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input_with_grad(Tensor::from_vec(&[1, 1, 4, 4], data).unwrap()).unwrap();
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let s = g.sum_squares(y, 0.5).unwrap();
    g.backward(s).unwrap();
    let gx = g.grad(x).unwrap();
    assert_eq!(gx[5], 2.0);
    // ties in the other windows route to the first element, whose value is 0
    assert_eq!(gx.iter().filter(|v| **v != 0.0).count(), 1);
}

#[test]
fn maxpool_tie_goes_to_first_index() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input_with_grad(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 5.0, 5.0, 5.0]).unwrap()).unwrap();
    let y = g.maxpool2d(x, 2, 2).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn maxpool_matches_window_scan() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 1, 6, 6]);
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.input(x.clone()).unwrap();
    let y = g.maxpool2d(xv, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            let mut m = f64::NEG_INFINITY;
            for di in 0..2 {
                for dj in 0..2 {
                    m = m.max(x.data()[(2 * i + di) * 6 + 2 * j + dj]);
                }
            }
            assert_eq!(g.value(y).data()[i * 3 + j], m);
        }
    }
}

#[test]
fn maxpool_gradients() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![rand_tensor(&mut rng, &[2, 2, 5, 5])];
    for (k, s) in [(2, 2), (2, 1), (3, 2)] {
        let r = check(&store, Mode::Eval, &inputs, 1e-6, |g, v| {
            let y = g.maxpool2d(v[0], k, s)?;
            project(g, y, 11)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL);
    }
}

#[test]
fn linear_gradients() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        rand_tensor(&mut rng, &[3, 5]),
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[4]),
    ];
    let r = check(&store, Mode::Eval, &inputs, 1e-6, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        let y = g.tanh(y)?;
        project(g, y, 12)
    })
    .unwrap();
    assert!(r.max_rel_error() < TOL, "{:?}", r.rel_errors);
}

#[test]
fn gru_zero_weights() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(Tensor::from_vec(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap()).unwrap();
    let h = g.input(Tensor::full(&[1, 2], 1.0)).unwrap();
    let wx = g.input(Tensor::zeros(&[3, 6])).unwrap();
    let wh = g.input(Tensor::zeros(&[2, 6])).unwrap();
    let b = g.input(Tensor::zeros(&[6])).unwrap();
    let y = g.gru(x, h, wx, wh, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn gru_closed_update_gate_keeps_state() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new(&store, Mode::Eval);
    let hval = Tensor::from_vec(&[1, 2], vec![0.7, -0.4]).unwrap();
    let x = g.input(rand_tensor(&mut rng, &[1, 3])).unwrap();
    let h = g.input(hval.clone()).unwrap();
    let wx = g.input(rand_tensor(&mut rng, &[3, 6])).unwrap();
    let wh = g.input(rand_tensor(&mut rng, &[2, 6])).unwrap();
    let mut bias = vec![0.0; 6];
    bias[0] = -800.0;
    bias[1] = -800.0;
    let b = g.input(Tensor::from_vec(&[6], bias).unwrap()).unwrap();
    let y = g.gru(x, h, wx, wh, b).unwrap();
    assert_eq!(g.value(y), &hval);
}

#[test]
fn gru_gradients_through_two_steps() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[2, 4]),
        rand_tensor(&mut rng, &[3, 12]),
        rand_tensor(&mut rng, &[4, 12]),
        rand_tensor(&mut rng, &[12]),
    ];
    let r = check(&store, Mode::Eval, &inputs, 1e-6, |g, v| {
        let h1 = g.gru(v[0], v[1], v[2], v[3], v[4])?;
        let h2 = g.gru(v[0], h1, v[2], v[3], v[4])?;
        project(g, h2, 13)
    })
    .unwrap();
    assert!(r.max_rel_error() < TOL, "{:?}", r.rel_errors);
}

fn bn_store() -> (ParamStore, hpn_tensor::BufferId, hpn_tensor::BufferId) {
    let mut s = ParamStore::new();
    let m = s.add_buffer("m", Tensor::zeros(&[3]));
    let v = s.add_buffer("v", Tensor::full(&[3], 1.0));
    (s, m, v)
}

#[test]
fn batchnorm_standardizes() {
    let (store, m, v) = bn_store();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::new(&store, Mode::Train);
    // spread ≫ ε so the ε-shifted variance is within 1e-6 of one
    let x = rand_tensor(&mut rng, &[6, 3]);
    let x = Tensor::from_vec(&[6, 3], x.data().iter().map(|v| 20.0 * v).collect()).unwrap();
    let x = g.input(x).unwrap();
    let gamma = g.input(Tensor::full(&[3], 1.0)).unwrap();
    let beta = g.input(Tensor::zeros(&[3])).unwrap();
    let y = g.batchnorm(x, gamma, beta, (m, v)).unwrap();
    let d = g.value(y).data();
    for c in 0..3 {
        let col: Vec<f64> = (0..6).map(|i| d[i * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / 6.0;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batchnorm_zero_gamma_gives_beta() {
    let (store, m, v) = bn_store();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input(rand_tensor(&mut rng, &[4, 3])).unwrap();
    let gamma = g.input(Tensor::zeros(&[3])).unwrap();
    let beta = g.input(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let y = g.batchnorm(x, gamma, beta, (m, v)).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, [1.0, 2.0, 3.0][i % 3]);
    }
}

#[test]
fn batchnorm_rejects_single_sample_in_training() {
    let (store, m, v) = bn_store();
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input(Tensor::zeros(&[1, 3])).unwrap();
    let gamma = g.input(Tensor::full(&[3], 1.0)).unwrap();
    let beta = g.input(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(g.batchnorm(x, gamma, beta, (m, v)), Err(TensorError::BatchTooSmall(1))));
}

#[test]
fn batchnorm_running_stats_and_inference() {
    let (mut store, m, v) = bn_store();
    let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 3.0, 2.0, 5.0]).unwrap();
    let updates = {
        let mut g = Graph::new(&store, Mode::Train);
        let xv = g.input(x.clone()).unwrap();
        let gamma = g.input(Tensor::full(&[3], 1.0)).unwrap();
        let beta = g.input(Tensor::zeros(&[3])).unwrap();
        g.batchnorm(xv, gamma, beta, (m, v)).unwrap();
        g.take_bn_updates()
    };
    Graph::apply_bn_updates(updates, &mut store);
    for (a, e) in store.buffer(m).data().iter().zip([0.2, 0.2, 0.4]) {
        assert!((a - e).abs() < 1e-12);
    }
    let rv = store.buffer(v).data();
    assert!((rv[0] - 1.0).abs() < 1e-12 && (rv[1] - 0.9).abs() < 1e-12 && (rv[2] - 1.0).abs() < 1e-12);
    // batch of one is fine in inference mode
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.input(Tensor::from_vec(&[1, 3], vec![0.2, 0.2, 0.4]).unwrap()).unwrap();
    let gamma = g.input(Tensor::full(&[3], 1.0)).unwrap();
    let beta = g.input(Tensor::zeros(&[3])).unwrap();
    let y = g.batchnorm(xv, gamma, beta, (m, v)).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn batchnorm_gradients() {
    let (store, m, v) = bn_store();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![
        rand_tensor(&mut rng, &[3, 3, 2, 2]),
        rand_tensor(&mut rng, &[3]),
        rand_tensor(&mut rng, &[3]),
    ];
    for mode in [Mode::Train, Mode::Eval] {
        let r = check(&store, mode, &inputs, 1e-6, |g, vars| {
            let y = g.batchnorm(vars[0], vars[1], vars[2], (m, v))?;
            project(g, y, 14)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL, "{mode:?} {:?}", r.rel_errors);
    }
}

#[test]
fn softmax_nll_uniform_and_peaked() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(Tensor::zeros(&[1, 7])).unwrap();
    let l = g.softmax_nll(x, &[3], &[1.0]).unwrap();
    assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);

    let mut logits = vec![0.0; 5];
    logits[2] = 50.0;
    let x = g.input(Tensor::from_vec(&[1, 5], logits).unwrap()).unwrap();
    let l = g.softmax_nll(x, &[2], &[1.0]).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-10);
}

#[test]
fn softmax_nll_matches_direct_evaluation() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, &[3, 6]);
    let targets = [0, 5, 2];
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.input_with_grad(x.clone()).unwrap();
    let l = g.softmax_nll(xv, &targets, &[1.0; 3]).unwrap();
    g.backward(l).unwrap();
    let mut expected = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &x.data()[r * 6..(r + 1) * 6];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected -= (row[t].exp() / z).ln();
        for j in 0..6 {
            let p = row[j].exp() / z;
            let want = p - if j == t { 1.0 } else { 0.0 };
            assert!((g.grad(xv).unwrap()[r * 6 + j] - want).abs() < 1e-12);
        }
    }
    assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn softmax_family_gradients() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = vec![rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[2, 5])];
    let r = check(&store, Mode::Eval, &inputs, 1e-6, |g, v| {
        let nll = g.softmax_nll(v[0], &[1, 4, 0, 2], &[1.0, 0.5, 2.0, 1.0])?;
        let p = g.softmax(v[1])?;
        let lp = g.log_softmax(v[1])?;
        let a = project(g, p, 17)?;
        let b = project(g, lp, 18)?;
        let sq = g.sum_squares(p, 0.3)?;
        g.add_all(&[nll, a, b, sq])
    })
    .unwrap();
    assert!(r.max_rel_error() < TOL, "{:?}", r.rel_errors);
}

#[test]
fn hadamard_examples_and_gradients() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let mut g = Graph::new(&store, Mode::Eval);
    let av = g.input(a.clone()).unwrap();
    let ones = g.input(Tensor::full(&[2, 3], 1.0)).unwrap();
    let zeros = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let y = g.hadamard(av, ones).unwrap();
    assert_eq!(g.value(y), &a);
    let y = g.hadamard(zeros, av).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    let bad = g.input(Tensor::zeros(&[3, 2])).unwrap();
    assert!(g.hadamard(av, bad).is_err());

    let inputs = vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])];
    let r = check(&store, Mode::Eval, &inputs, 1e-6, |g, v| {
        let y = g.hadamard(v[0], v[1])?;
        project(g, y, 20)
    })
    .unwrap();
    assert!(r.max_rel_error() < TOL);
}

#[test]
fn log_hadamard_nll_is_log_of_product() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let raw = rand_tensor(&mut rng, &[2 * 3, 5]);
    let att = rand_tensor(&mut rng, &[2, 5]);
    let targets = [0, 1, 2, 3, 4, 0];
    let mut g = Graph::new(&store, Mode::Eval);
    let rv = g.input(raw.clone()).unwrap();
    let av = g.input(att.clone()).unwrap();
    let l = g.log_hadamard_nll(rv, av, 3, &targets, &[1.0; 6]).unwrap();
    let sm = |row: &[f64], j: usize| row[j].exp() / row.iter().map(|v| v.exp()).sum::<f64>();
    let mut expected = 0.0;
    for i in 0..2 {
        for h in 0..3 {
            let r = i * 3 + h;
            let p = sm(&raw.data()[r * 5..(r + 1) * 5], targets[r]);
            let a = sm(&att.data()[i * 5..(i + 1) * 5], targets[r]);
            expected -= (p * a).ln();
        }
    }
    assert!((g.value(l).data()[0] - expected).abs() < 1e-12);

    let r = check(&store, Mode::Eval, &[raw, att], 1e-6, |g, v| {
        g.log_hadamard_nll(v[0], v[1], 3, &targets, &[1.0, 0.5, 1.0, 1.0, 2.0, 1.0])
    })
    .unwrap();
    assert!(r.max_rel_error() < TOL);
}

#[test]
fn misc_op_gradients() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let inputs = vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 4])];
    let r = check(&store, Mode::Eval, &inputs, 1e-6, |g, v| {
        let c = g.concat(v[0], v[1])?;
        let s = g.sigmoid(c)?;
        let r = g.relu(c)?;
        let m = g.add(s, r)?;
        let m = g.scale(m, 1.7)?;
        let noise = Tensor::full(&[2, 7], 0.01);
        let m = g.add_const(m, &noise)?;
        project(g, m, 23)
    })
    .unwrap();
    assert!(r.max_rel_error() < TOL);
}

#[test]
fn gaussian_noise_modes() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = rand_tensor(&mut rng, &[3, 3]);
    let mut g = Graph::new(&store, Mode::Train);
    let xv = g.input(x.clone()).unwrap();
    assert_eq!(g.gaussian_noise(xv, 0.0, &mut rng).unwrap(), xv);
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.input(x.clone()).unwrap();
    assert_eq!(g.gaussian_noise(xv, 5.0, &mut rng).unwrap(), xv);

    // mean of 10⁶ draws within 5σ/√n of zero
    let n = 1_000_000;
    let sigma = 1e-3;
    let mut g = Graph::new(&store, Mode::Train);
    let zv = g.input_with_grad(Tensor::zeros(&[n])).unwrap();
    let y = g.gaussian_noise(zv, sigma, &mut rng).unwrap();
    let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
    assert!(mean.abs() < 5.0 * sigma / (n as f64).sqrt());
    let s = g.sum_squares(y, 0.0).unwrap();
    let s2 = g.add(s, s).unwrap();
    g.backward(s2).unwrap();
    assert!(g.grad(zv).is_some());
}

#[test]
fn non_finite_values_trip_an_error() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    assert!(matches!(
        g.input(Tensor::from_vec(&[1], vec![f64::NAN]).unwrap()),
        Err(TensorError::NonFinite { .. })
    ));
    let x = g.input(Tensor::from_vec(&[1], vec![1e300]).unwrap()).unwrap();
    assert!(g.hadamard(x, x).is_err());
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", 0, Tensor::full(&[2, 2], 0.5));
    let w2 = store.add("w2", 1, Tensor::full(&[2, 2], 0.5));
    store.set_trainable_groups(&[1]);
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input(Tensor::full(&[1, 2], 1.0)).unwrap();
    let wv = g.param(w);
    let w2v = g.param(w2);
    let h = g.linear(x, wv, None).unwrap();
    let y = g.linear(h, w2v, None).unwrap();
    let s = g.sum_squares(y, 1.0).unwrap();
    g.backward(s).unwrap();
    let grads = g.take_param_grads();
    assert!(grads[0].is_none());
    assert!(grads[1].is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_on_the_simplex(seed in any::<u64>(), rows in 1usize..5, k in 1usize..40, scale in 0.1f64..60.0) {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * k).map(|_| rng.gen_range(-scale..scale)).collect();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::from_vec(&[rows, k], data).unwrap()).unwrap();
        let p = g.softmax(x).unwrap();
        for row in g.value(p).data().chunks(k) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_pool_stack_gradients(seed in any::<u64>(), h in 4usize..7, w in 4usize..7, stride in 1usize..3) {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 2, h, w]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let r = check(&store, Mode::Eval, &inputs, 1e-6, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, 1)?;
            let y = g.tanh(y)?;
            let y = g.maxpool2d(y, 2, 1)?;
            project(g, y, seed ^ 1)
        }).unwrap();
        prop_assert!(r.max_rel_error() < TOL, "{:?}", r.rel_errors);
    }
}
