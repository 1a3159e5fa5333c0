use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unept::numerics::{
    central_difference, nearest_sample, relative_error, upsample_bilinear, GridLevel, NumericsError, Tape, Tensor, Var,
};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Compares tape gradients of `Σ r ⊙ f(inputs)` against central differences
/// for every input element.
fn check_gradients(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let weights = rand_tensor(&mut rng, &probe_shape);
    let scalar = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[idx].numel()]);
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.to_vec();
                vals[idx] = Tensor::new(inputs[idx].shape().to_vec(), x.to_vec()).unwrap();
                scalar(&vals)
            },
            inputs[idx].data(),
            1e-5,
        );
        for (j, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = relative_error(*a, *n, 1e-6);
            assert!(err < tol, "input {idx} element {j}: analytic {a} vs numeric {n} (rel {err})");
        }
    }
}

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var, NumericsError>) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).clone()
}

#[test]
fn matmul_examples() {
    let id = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let r = eval(|t| {
        let (x, y) = (t.constant(id.clone())?, t.constant(b.clone())?);
        t.matmul(x, y)
    });
    assert_eq!(r, b);
    let p = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
    let q = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
    let r = eval(|t| {
        let (x, y) = (t.constant(p.clone())?, t.constant(q.clone())?);
        t.matmul(x, y)
    });
    assert_eq!(r, Tensor::from_rows(&[&[5.0, 6.0], &[0.0, 0.0]]));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let r = eval(|t| {
        let (x, y) = (t.constant(a.clone())?, t.constant(b.clone())?);
        t.matmul(x, y)
    });
    assert!(r.max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn matmul_rejects_mismatch() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(t.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
}

#[test]
fn softmax_examples() {
    let sm = |v: &[f64]| eval(|t| {
        let x = t.constant(Tensor::new(vec![v.len()], v.to_vec())?)?;
        t.softmax(x)
    });
    assert_eq!(sm(&[0.0; 4]).data(), &[0.25; 4]);
    let r = sm(&[0.0, 2f64.ln()]);
    assert!((r.data()[0] - 1.0 / 3.0).abs() < 1e-15 && (r.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    let big = sm(&[1000.0, 1001.0]);
    assert!(big.is_finite());
    assert!(big.max_abs_diff(&sm(&[0.0, 1.0])) < 1e-15);
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3, 0])).unwrap();
    assert!(matches!(t.softmax(x), Err(NumericsError::EmptyAxis { .. })));
}

#[test]
fn layer_norm_examples() {
    let ln = |v: &[f64], eps: f64| {
        eval(|t| {
            let d = v.len();
            let x = t.constant(Tensor::new(vec![d], v.to_vec())?)?;
            let g = t.constant(Tensor::full(&[d], 1.0))?;
            let b = t.constant(Tensor::zeros(&[d]))?;
            t.layer_norm(x, g, b, eps)
        })
    };
    assert_eq!(ln(&[5.0, 5.0, 5.0], 1e-5).data(), &[0.0; 3]);
    let r = ln(&[1.0, 3.0], 1e-14);
    assert!((r.data()[0] + 1.0).abs() < 1e-12 && (r.data()[1] - 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(&[6, 32], |_| rng.gen_range(-30.0..50.0));
    let r = eval(|t| {
        let x = t.constant(x.clone())?;
        let g = t.constant(Tensor::full(&[32], 1.0))?;
        let b = t.constant(Tensor::zeros(&[32]))?;
        t.layer_norm(x, g, b, 1e-5)
    });
    for row in r.data().chunks(32) {
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.at(&[ci, iy as usize, ix as usize]) * k.at(&[o, ci, ky, kx]);
                            }
                        }
                    }
                }
                out.data_mut()[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

fn conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor, NumericsError> {
    let mut t = Tape::new();
    let (a, b) = (t.constant(x.clone())?, t.constant(k.clone())?);
    let v = t.conv2d(a, b, stride, pad)?;
    Ok(t.value(v).clone())
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 5, 6]);
    let ident = Tensor::from_fn(&[2, 2, 1, 1], |i| if i == 0 || i == 3 { 1.0 } else { 0.0 });
    assert_eq!(conv(&x, &ident, 1, 0).unwrap(), x);

    let flat = Tensor::full(&[1, 6, 6], 2.5);
    let avg = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
    let r = conv(&flat, &avg, 1, 1).unwrap();
    for y in 1..5 {
        for xx in 1..5 {
            assert!((r.at(&[0, y, xx]) - 2.5).abs() < 1e-14);
        }
    }

    for &(stride, pad) in &[(1, 1), (2, 1), (2, 0), (3, 2)] {
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let r = conv(&x, &k, stride, pad).unwrap();
        assert!(r.max_abs_diff(&conv_oracle(&x, &k, stride, pad)) < 1e-12);
    }

    let tiny = Tensor::zeros(&[1, 2, 2]);
    let k5 = Tensor::zeros(&[1, 1, 5, 5]);
    assert!(matches!(conv(&tiny, &k5, 1, 0), Err(NumericsError::InvalidArgument { .. })));
}

fn sample(map: &Tensor, coords: &[(f64, f64)]) -> Tensor {
    let c = Tensor::new(vec![coords.len(), 2], coords.iter().flat_map(|&(y, x)| [y, x]).collect()).unwrap();
    unept::numerics::bilinear_sample(map, &c).unwrap()
}

#[test]
fn bilinear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = rand_tensor(&mut rng, &[3, 4, 5]);
    let r = sample(&map, &[(1.0, 2.0)]);
    for c in 0..3 {
        assert_eq!(r.at(&[0, c]).to_bits(), map.at(&[c, 1, 2]).to_bits());
    }
    let sq = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    assert_eq!(sample(&sq, &[(0.5, 0.5)]).data(), &[1.5]);
    // clamped
    assert_eq!(sample(&sq, &[(-4.0, 9.0)]).data(), &[1.0]);
}

#[test]
fn bilinear_coordinate_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = rand_tensor(&mut rng, &[2, 5, 6]);
    let coords = Tensor::from_fn(&[7, 2], |i| {
        let v: f64 = rng.gen_range(0.2..3.8);
        if v.fract() < 0.05 || v.fract() > 0.95 {
            v + 0.3
        } else if i % 2 == 1 {
            v + 0.7
        } else {
            v
        }
    });
    check_gradients(&[map, coords], |t, v| t.bilinear_sample(v[0], v[1]), 1e-6);
}

#[test]
fn nearest_examples() {
    let map: Vec<u8> = (0..20).collect();
    assert_eq!(nearest_sample(&map, 4, 5, &[(1.4, 2.6)]).unwrap(), vec![8]);
    assert_eq!(nearest_sample(&map, 4, 5, &[(0.5, 1.5)]).unwrap(), vec![7]);
    let ident: Vec<(f64, f64)> = (0..4).flat_map(|y| (0..5).map(move |x| (y as f64, x as f64))).collect();
    assert_eq!(nearest_sample(&map, 4, 5, &ident).unwrap(), map);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let coords: Vec<(f64, f64)> = (0..200).map(|_| (rng.gen_range(-2.0..6.0), rng.gen_range(-2.0..7.0))).collect();
    let got = nearest_sample(&map, 4, 5, &coords).unwrap();
    for (&(y, x), g) in coords.iter().zip(got) {
        let r = ((y + 0.5).floor().max(0.0) as usize).min(3);
        let c = ((x + 0.5).floor().max(0.0) as usize).min(4);
        assert_eq!(g, map[r * 5 + c]);
    }
}

#[test]
fn upsample_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    assert_eq!(upsample_bilinear(&x, 1).unwrap(), x);
    let flat = Tensor::full(&[1, 3, 3], -0.75);
    assert!(upsample_bilinear(&flat, 4).unwrap().data().iter().all(|&v| (v + 0.75).abs() < 1e-15));

    let small = rand_tensor(&mut rng, &[1, 2, 2]);
    let up = upsample_bilinear(&small, 2).unwrap();
    let coords: Vec<(f64, f64)> =
        (0..4).flat_map(|i| (0..4).map(move |j| ((i as f64 + 0.5) / 2.0 - 0.5, (j as f64 + 0.5) / 2.0 - 0.5))).collect();
    let oracle = sample(&small, &coords);
    for (a, b) in up.data().iter().zip(oracle.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 4.0]])).unwrap();
    let s = t.sum(x).unwrap();
    assert_eq!(t.backward(s).unwrap().wrt(x).unwrap(), &[1.0; 4]);

    let mut t = Tape::new();
    let x = t.input(Tensor::scalar(3.0)).unwrap();
    let sq = t.mul(x, x).unwrap();
    assert_eq!(t.backward(sq).unwrap().wrt(x).unwrap(), &[6.0]);

    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(t.backward(x), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut t = Tape::new();
    let x = t.input(Tensor::scalar(1e200)).unwrap();
    let y = t.mul(x, x);
    assert!(matches!(y, Err(NumericsError::NonFinite { op: "mul" })));
    assert!(Tape::new().constant(Tensor::scalar(f64::NAN)).is_err());
}

#[test]
fn adjoints_are_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[4, 2]);
    let mut t = Tape::new();
    let av = t.input(a).unwrap();
    let wv = t.input(w).unwrap();
    let h = t.matmul(av, wv).unwrap();
    let r = t.relu(h).unwrap();
    let l1 = t.sum(r).unwrap();
    let sm = t.softmax(h).unwrap();
    let sq = t.mul(sm, h).unwrap();
    let l2 = t.sum(sq).unwrap();
    let both = t.add(l1, l2).unwrap();
    let (g1, g2, g12) = (t.backward(l1).unwrap(), t.backward(l2).unwrap(), t.backward(both).unwrap());
    for v in [av, wv] {
        for ((x, y), z) in g1.wrt(v).unwrap().iter().zip(g2.wrt(v).unwrap()).zip(g12.wrt(v).unwrap()) {
            assert!((x + y - z).abs() < 1e-12);
        }
    }
}

#[test]
fn op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s);
    check_gradients(&[r(&[3, 4]), r(&[4, 2])], |t, v| t.matmul(v[0], v[1]), 1e-4);
    check_gradients(&[r(&[3, 4]), r(&[2, 4])], |t, v| t.matmul_nt(v[0], v[1]), 1e-4);
    check_gradients(&[r(&[3, 4])], |t, v| t.transpose(v[0]), 1e-4);
    check_gradients(&[r(&[3, 4]), r(&[3, 4])], |t, v| t.sub(v[0], v[1]), 1e-4);
    check_gradients(&[r(&[3, 4]), r(&[3, 4])], |t, v| t.mul(v[0], v[1]), 1e-4);
    check_gradients(&[r(&[3, 4]), r(&[4])], |t, v| t.add_row(v[0], v[1]), 1e-4);
    check_gradients(&[r(&[3, 2, 2]), r(&[3])], |t, v| t.add_channel(v[0], v[1]), 1e-4);
    check_gradients(&[r(&[3, 2, 2]), r(&[2, 2])], |t, v| t.mul_plane(v[0], v[1]), 1e-4);
    check_gradients(&[r(&[3, 5])], |t, v| t.sigmoid(v[0]), 1e-4);
    check_gradients(&[r(&[3, 5])], |t, v| t.relu(v[0]), 1e-4);
    check_gradients(&[r(&[3, 5])], |t, v| t.softmax(v[0]), 1e-4);
    check_gradients(&[r(&[3, 6]), r(&[6]), r(&[6])], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), 1e-4);
    check_gradients(&[r(&[2, 5, 5]), r(&[3, 2, 3, 3])], |t, v| t.conv2d(v[0], v[1], 2, 1), 1e-4);
    check_gradients(&[r(&[2, 4, 4])], |t, v| t.avg_pool(v[0], 2), 1e-4);
    check_gradients(&[r(&[2, 3, 2])], |t, v| t.upsample(v[0], 4), 1e-4);
    check_gradients(&[r(&[5, 6]), r(&[2, 3, 4])], |t, v| t.head_matmul(v[0], v[1]), 1e-4);
    check_gradients(&[r(&[4, 3])], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]), 1e-4);
    check_gradients(&[r(&[3, 5])], |t, v| t.slice_cols(v[0], 1, 3), 1e-4);
    check_gradients(&[r(&[3, 2]), r(&[3, 1])], |t, v| t.concat_cols(&[v[0], v[1]]), 1e-4);
    check_gradients(&[r(&[4, 2])], |t, v| t.slice_rows(v[0], 1, 2), 1e-4);
    check_gradients(&[r(&[1, 2]), r(&[3, 2])], |t, v| t.concat_rows(&[v[0], v[1]]), 1e-4);
    check_gradients(&[r(&[2, 6])], |t, v| t.reshape(v[0], &[3, 4]), 1e-4);
    let targets = [Some(0), None, Some(2), Some(1)];
    check_gradients(&[r(&[3, 2, 2])], |t, v| t.cross_entropy(v[0], &targets), 1e-4);
    let soft = [Some(1.0), Some(0.0), None, Some(1.0)];
    check_gradients(&[r(&[2, 2])], |t, v| t.bce_with_logits(v[0], &soft), 1e-4);
}

#[test]
fn sample_aggregate_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let levels = [GridLevel { start: 0, height: 4, width: 5 }, GridLevel { start: 20, height: 2, width: 3 }];
    let (heads, points, nq, d) = (2, 3, 4, 6);
    let values = rand_tensor(&mut rng, &[26, d]);
    let coords = Tensor::from_fn(&[nq, heads * 2 * points * 2], |_| rng.gen_range(0.1..1.9) + 0.013);
    let weights = rand_tensor(&mut rng, &[nq, heads * 2 * points]);
    check_gradients(&[values, coords, weights], |t, v| t.sample_aggregate(v[0], &levels, v[1], v[2], heads), 1e-4);
}

#[test]
fn cross_entropy_without_targets_is_zero() {
    let mut t = Tape::new();
    let x = t.input(Tensor::full(&[3, 4], 0.3)).unwrap();
    let l = t.cross_entropy(x, &[None; 4]).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    assert!(t.backward(l).unwrap().wrt(x).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn custom_op_uses_supplied_adjoint() {
    let mut t = Tape::new();
    let x = t.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let y = t
        .custom(&[x], Tensor::new(vec![2], vec![2.0, 4.0]).unwrap(), |_, _, g| vec![g.iter().map(|v| 3.0 * v).collect()])
        .unwrap();
    let l = t.sum(y).unwrap();
    assert_eq!(t.backward(l).unwrap().wrt(x).unwrap(), &[3.0, 3.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-700.0f64..700.0, 1..40)) {
        let r = eval(|t| {
            let x = t.constant(Tensor::new(vec![v.len()], v.clone())?)?;
            t.softmax(x)
        });
        let s: f64 = r.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(r.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn lattice_sampling_is_exact_gather(seed in 0u64..1000, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-1e3..1e3));
        let y = rng.gen_range(0..h);
        let x = rng.gen_range(0..w);
        let r = sample(&map, &[(y as f64, x as f64)]);
        for c in 0..2 {
            prop_assert_eq!(r.at(&[0, c]).to_bits(), map.at(&[c, y, x]).to_bits());
        }
    }

    #[test]
    fn identity_pointwise_conv(seed in 0u64..1000, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[c, h, w]);
        let k = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        prop_assert_eq!(conv(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn random_op_chains_match_finite_differences(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let g = Tensor::from_fn(&[4], |_| rng.gen_range(0.5..1.5));
        let b = rand_tensor(&mut rng, &[4]);
        check_gradients(&[a, w, g, b], |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let n = t.layer_norm(h, v[2], v[3], 1e-5)?;
            let s = t.sigmoid(n)?;
            t.softmax(s)
        }, 1e-4);
    }
}
