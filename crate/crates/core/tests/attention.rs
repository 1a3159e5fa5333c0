mod common;

use common::{dense_oracle, sparse_oracle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unept::attention::*;
use unept::numerics::{central_difference, relative_error, GridLevel, Tape, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn geometry(d_model: usize, heads: usize, points: usize, levels: usize) -> SparseGeometry {
    SparseGeometry { d_model, heads, head_dim: d_model / heads, points, levels }
}

fn pixel_refs(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[n, 2], |i| if i % 2 == 0 { rng.gen_range(0.0..h as f64 - 1.0) } else { rng.gen_range(0.0..w as f64 - 1.0) })
}

fn random_pyramid(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)], d: usize) -> PyramidFeatures {
    let maps = shapes.iter().map(|&(h, w)| rand_tensor(rng, &[h * w, d])).collect();
    let strides = (0..shapes.len()).map(|l| 8 << l).collect();
    PyramidFeatures::new(maps, shapes.to_vec(), strides).unwrap()
}

#[test]
fn dense_single_token_passes_value_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = DenseAttentionParams::random(8, 2, 4, &mut rng);
    let x = rand_tensor(&mut rng, &[1, 8]);
    let out = dense_mha(&x, &p).unwrap();
    let mut expect = Tensor::zeros(&[1, 8]);
    for c in 0..8 {
        let mut acc = 0.0;
        for r in 0..8 {
            let v: f64 = (0..8).map(|j| x.at(&[0, j]) * p.wv.at(&[j, r])).sum();
            acc += v * p.wo.at(&[r, c]);
        }
        expect.data_mut()[c] = acc;
    }
    assert!(out.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn dense_identical_tokens_give_identical_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = DenseAttentionParams::random(8, 2, 4, &mut rng);
    let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![5, 8], row.repeat(5)).unwrap();
    let out = dense_mha(&x, &p).unwrap();
    for r in 1..5 {
        assert_eq!(&out.data()[r * 8..(r + 1) * 8], &out.data()[..8]);
    }
}

#[test]
fn dense_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = DenseAttentionParams::random(8, 2, 4, &mut rng);
    let x = rand_tensor(&mut rng, &[7, 8]);
    assert!(dense_mha(&x, &p).unwrap().max_abs_diff(&dense_oracle(&x, &p)) < 1e-10);
}

#[test]
fn sparse_single_point_reads_one_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = geometry(8, 2, 1, 1);
    let p = SparseAttentionParams::random(g, &mut rng).unwrap();
    let (h, w) = (4, 5);
    let values = rand_tensor(&mut rng, &[h * w, 8]);
    let queries = rand_tensor(&mut rng, &[3, 8]);
    let refs = pixel_refs(&mut rng, 3, h, w);
    let out = sparse_attention(&queries, &values, h, w, &refs, &p).unwrap();
    // The oracle's softmax over a single logit is 1 regardless of u_wts.
    let mut flat = p.clone();
    flat.u_wts.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let again = sparse_attention(&queries, &values, h, w, &refs, &flat).unwrap();
    assert!(out.max_abs_diff(&again) < 1e-14);
    let oracle = sparse_oracle(&queries, &values, &[(h, w)], |q, _| (refs.at(&[q, 0]), refs.at(&[q, 1])), &p);
    assert!(out.max_abs_diff(&oracle) < 1e-10);
}

#[test]
fn sparse_zero_weight_projection_averages_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = geometry(8, 2, 4, 1);
    let mut p = SparseAttentionParams::random(g, &mut rng).unwrap();
    p.u_wts.data_mut().iter_mut().for_each(|v| *v = 0.0);
    p.b_wts.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let (h, w) = (6, 6);
    let values = rand_tensor(&mut rng, &[h * w, 8]);
    let queries = rand_tensor(&mut rng, &[2, 8]);
    let refs = pixel_refs(&mut rng, 2, h, w);
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape).unwrap();
    let q = tape.constant(queries).unwrap();
    let v = tape.constant(values).unwrap();
    let base = pixel_reference_grid(&refs, &g).unwrap();
    let out = sparse_attention_tape(&mut tape, &vars, q, v, &[GridLevel { start: 0, height: h, width: w }], base).unwrap();
    assert!(tape.value(out.weights).data().iter().all(|&x| x == 0.25));
}

#[test]
fn sparse_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let g = geometry(8, 2, 3, 1);
        let p = SparseAttentionParams::random(g, &mut rng).unwrap();
        let (h, w) = (5, 7);
        let values = rand_tensor(&mut rng, &[h * w, 8]);
        let queries = rand_tensor(&mut rng, &[4, 8]);
        let refs = pixel_refs(&mut rng, 4, h, w);
        let out = sparse_attention(&queries, &values, h, w, &refs, &p).unwrap();
        let oracle = sparse_oracle(&queries, &values, &[(h, w)], |q, _| (refs.at(&[q, 0]), refs.at(&[q, 1])), &p);
        assert!(out.max_abs_diff(&oracle) < 1e-10);
    }
}

#[test]
fn pyramid_with_one_scale_is_bitwise_sparse() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = geometry(8, 2, 4, 1);
    let p = SparseAttentionParams::random(g, &mut rng).unwrap();
    let (h, w) = (8, 4);
    let pyramid = random_pyramid(&mut rng, &[(h, w)], 8);
    let queries = rand_tensor(&mut rng, &[6, 8]);
    // Dyadic pixel centres convert between the two conventions exactly.
    let pix: Vec<(usize, usize)> = (0..6).map(|i| (i % h, (3 * i) % w)).collect();
    let refs_px = Tensor::from_fn(&[6, 2], |i| if i % 2 == 0 { pix[i / 2].0 as f64 } else { pix[i / 2].1 as f64 });
    let refs_n = Tensor::from_fn(&[6, 2], |i| {
        if i % 2 == 0 {
            (pix[i / 2].0 as f64 + 0.5) / h as f64
        } else {
            (pix[i / 2].1 as f64 + 0.5) / w as f64
        }
    });
    let a = sparse_attention(&queries, &pyramid.maps[0], h, w, &refs_px, &p).unwrap();
    let b = pyramid_attention(&queries, &pyramid, &refs_n, &p).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn pyramid_zero_weight_projection_is_uniform_over_all_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = geometry(8, 2, 2, 3);
    let mut p = SparseAttentionParams::random(g, &mut rng).unwrap();
    p.u_wts.data_mut().iter_mut().for_each(|v| *v = 0.0);
    p.b_wts.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let shapes = [(8, 8), (4, 4), (2, 2)];
    let pyramid = random_pyramid(&mut rng, &shapes, 8);
    let queries = rand_tensor(&mut rng, &[3, 8]);
    let refs = Tensor::from_fn(&[3, 2], |_| rng.gen_range(0.0..1.0));
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape).unwrap();
    let q = tape.constant(queries).unwrap();
    let v = tape.constant(pyramid.concat().unwrap()).unwrap();
    let grid = pyramid.levels();
    let base = normalized_reference_grid(&refs, &grid, &g).unwrap();
    let out = sparse_attention_tape(&mut tape, &vars, q, v, &grid, base).unwrap();
    assert!(tape.value(out.weights).data().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn pyramid_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = geometry(8, 2, 2, 2);
    let p = SparseAttentionParams::random(g, &mut rng).unwrap();
    let shapes = [(6, 4), (3, 2)];
    let pyramid = random_pyramid(&mut rng, &shapes, 8);
    let queries = rand_tensor(&mut rng, &[3, 8]);
    let refs = Tensor::from_fn(&[3, 2], |_| rng.gen_range(0.0..1.0));
    let out = pyramid_attention(&queries, &pyramid, &refs, &p).unwrap();
    let oracle = sparse_oracle(
        &queries,
        &pyramid.concat().unwrap(),
        &shapes,
        |q, l| (refs.at(&[q, 0]) * shapes[l].0 as f64 - 0.5, refs.at(&[q, 1]) * shapes[l].1 as f64 - 0.5),
        &p,
    );
    assert!(out.max_abs_diff(&oracle) < 1e-10);
}

#[test]
fn ring_initialisation_spreads_samples() {
    let g = geometry(16, 4, 16, 2);
    let offsets = g.ring_offsets();
    assert_eq!(offsets.len(), 4 * 16 * 2 * 2);
    for (k, pair) in offsets.chunks(2).enumerate() {
        let n = k % 16;
        let r = (pair[0] * pair[0] + pair[1] * pair[1]).sqrt();
        assert!((r - (n / 8 + 1) as f64).abs() < 1e-12);
    }
    // heads are rotated copies of each other
    assert!((offsets[0] - offsets[64]).abs() > 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = SparseAttentionParams::init(g, &mut rng).unwrap();
    assert!(p.u_pos.data().iter().all(|&v| v == 0.0) && p.u_wts.data().iter().all(|&v| v == 0.0));
}

#[test]
fn positional_encoding_properties() {
    let d = 32;
    let pe = sine_positional_encoding(64, 64, d).unwrap();
    for row in pe.data().chunks(d) {
        for pair in row.chunks(2) {
            assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
        }
    }
    for (c, &v) in pe.data()[..d].iter().enumerate() {
        assert_eq!(v, if c % 2 == 0 { 0.0 } else { 1.0 });
    }
    let rows: Vec<&[f64]> = pe.data().chunks(d).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let dist: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(dist > 1e-12, "positions {i} and {j} collide");
        }
    }
    assert!(sine_positional_encoding(2, 2, 6).is_err());
}

#[test]
fn scale_encoding_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pyramid = random_pyramid(&mut rng, &[(2, 3), (2, 3)], 8);
    let zero = add_scale_encoding(&pyramid, &Encodings::zeros(2, 8)).unwrap();
    let pe = sine_positional_encoding(2, 3, 8).unwrap();
    for l in 0..2 {
        for (i, v) in zero.maps[l].data().iter().enumerate() {
            assert_eq!(*v, pyramid.maps[l].data()[i] + pe.data()[i]);
        }
    }
    let emb = Encodings { scale_embedding: rand_tensor(&mut rng, &[2, 8]) };
    let same = PyramidFeatures::new(vec![pyramid.maps[0].clone(); 2], pyramid.shapes.clone(), pyramid.strides.clone()).unwrap();
    let enc = add_scale_encoding(&same, &emb).unwrap();
    for i in 0..6 * 8 {
        let delta = enc.maps[1].data()[i] - enc.maps[0].data()[i];
        let want = emb.scale_embedding.data()[8 + i % 8] - emb.scale_embedding.data()[i % 8];
        assert!((delta - want).abs() < 1e-12);
    }
    assert!(add_scale_encoding(&pyramid, &Encodings::zeros(3, 8)).is_err());

    let mut tape = Tape::new();
    let x = tape.constant(pyramid.concat().unwrap()).unwrap();
    let table = tape.input(emb.scale_embedding.clone()).unwrap();
    let q = encode_queries_tape(&mut tape, x, &pyramid.shapes, table).unwrap();
    assert_eq!(tape.value(q).data(), add_scale_encoding(&pyramid, &emb).unwrap().concat().unwrap().data());
    let loss = tape.sum(q).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(table).unwrap().iter().all(|&v| v == 6.0));
}

#[test]
fn sparse_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = geometry(4, 2, 2, 2);
    let mut p = SparseAttentionParams::random(g, &mut rng).unwrap();
    p.u_pos.data_mut().iter_mut().for_each(|v| *v *= 0.3);
    let shapes = [(4, 4), (2, 2)];
    let grid = level_rows(&shapes);
    let values = rand_tensor(&mut rng, &[20, 4]);
    let queries = rand_tensor(&mut rng, &[3, 4]);
    let refs = Tensor::from_fn(&[3, 2], |_| rng.gen_range(0.2..0.8));
    let r = rand_tensor(&mut rng, &[3, 4]);

    let eval = |p: &SparseAttentionParams, q: &Tensor, v: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let vars = p.on_tape(&mut tape).unwrap();
        let qv = tape.constant(q.clone()).unwrap();
        let vv = tape.constant(v.clone()).unwrap();
        let base = normalized_reference_grid(&refs, &grid, &g).unwrap();
        let out = sparse_attention_tape(&mut tape, &vars, qv, vv, &grid, base).unwrap();
        tape.value(out.out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape).unwrap();
    let qv = tape.input(queries.clone()).unwrap();
    let vv = tape.input(values.clone()).unwrap();
    let base = normalized_reference_grid(&refs, &grid, &g).unwrap();
    let out = sparse_attention_tape(&mut tape, &vars, qv, vv, &grid, base).unwrap();
    let rv = tape.constant(r.clone()).unwrap();
    let prod = tape.mul(out.out, rv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let check = |name: &str, analytic: &[f64], numeric: Vec<f64>| {
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, n.to_owned(), 1e-6) < 1e-4, "{name}: {a} vs {n}");
        }
    };
    let fields: [(&str, fn(&mut SparseAttentionParams) -> &mut Tensor, _); 7] = [
        ("wq", |p| &mut p.wq, vars.wq),
        ("wv", |p| &mut p.wv, vars.wv),
        ("u_wts", |p| &mut p.u_wts, vars.u_wts),
        ("b_wts", |p| &mut p.b_wts, vars.b_wts),
        ("u_pos", |p| &mut p.u_pos, vars.u_pos),
        ("b_pos", |p| &mut p.b_pos, vars.b_pos),
        ("wo", |p| &mut p.wo, vars.wo),
    ];
    for (name, field, var) in fields {
        let mut probe = p.clone();
        let x0 = field(&mut probe).data().to_vec();
        let numeric = central_difference(
            |x| {
                field(&mut probe).data_mut().copy_from_slice(x);
                eval(&probe, &queries, &values)
            },
            &x0,
            1e-5,
        );
        check(name, grads.wrt(var).unwrap(), numeric);
    }
    let numeric = central_difference(
        |x| eval(&p, &Tensor::new(queries.shape().to_vec(), x.to_vec()).unwrap(), &values),
        queries.data(),
        1e-5,
    );
    check("queries", grads.wrt(qv).unwrap(), numeric);
    let numeric = central_difference(
        |x| eval(&p, &queries, &Tensor::new(values.shape().to_vec(), x.to_vec()).unwrap()),
        values.data(),
        1e-5,
    );
    check("values", grads.wrt(vv).unwrap(), numeric);
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = DenseAttentionParams::random(4, 2, 2, &mut rng);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape).unwrap();
    let xv = tape.input(x.clone()).unwrap();
    let out = dense_mha_tape(&mut tape, xv, &vars).unwrap();
    let loss = tape.sum(out).unwrap();
    let grads = tape.backward(loss).unwrap();
    let numeric = central_difference(
        |d| dense_mha(&Tensor::new(vec![3, 4], d.to_vec()).unwrap(), &p).unwrap().data().iter().sum(),
        x.data(),
        1e-5,
    );
    for (a, n) in grads.wrt(xv).unwrap().iter().zip(&numeric) {
        assert!(relative_error(*a, *n, 1e-6) < 1e-4);
    }
}

#[test]
fn fast_kernels_match_tape_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let dense = DenseAttentionParams::random(8, 2, 4, &mut rng);
    let x = rand_tensor(&mut rng, &[150, 8]);
    assert!(dense_mha_fast(&x, &dense).unwrap().max_abs_diff(&dense_mha(&x, &dense).unwrap()) < 1e-12);

    let g = geometry(8, 2, 3, 3);
    let p = SparseAttentionParams::random(g, &mut rng).unwrap();
    let shapes = [(16, 20), (8, 10), (4, 5)];
    let pyramid = random_pyramid(&mut rng, &shapes, 8);
    let queries = rand_tensor(&mut rng, &[300, 8]);
    let refs = Tensor::from_fn(&[300, 2], |_| rng.gen_range(0.0..1.0));
    let (fast, stats) = pyramid_attention_fast(&queries, &pyramid.concat().unwrap(), &pyramid.levels(), &refs, &p).unwrap();
    let slow = pyramid_attention(&queries, &pyramid, &refs, &p).unwrap();
    assert!(fast.max_abs_diff(&slow) < 1e-12);
    assert_eq!(stats.queries, 300);
    assert!(stats.total_bytes() <= sparse_bytes_estimate(300, pyramid.len(), &g));
}

#[test]
fn byte_estimates_scale_as_claimed() {
    let g = geometry(32, 4, 16, 3);
    let per_token: Vec<f64> = [4096usize, 8192, 16384]
        .iter()
        .map(|&n| {
            let l_ms: usize = bench::pyramid_shapes(n, 3).unwrap().iter().map(|(h, w)| h * w).sum();
            sparse_bytes_estimate(n, l_ms, &g) as f64 / n as f64
        })
        .collect();
    assert!(per_token.windows(2).all(|w| (w[1] / w[0] - 1.0).abs() < 0.01));
    let ratio = dense_bytes_estimate(8192, 32, 4, 8) as f64 / dense_bytes_estimate(4096, 32, 4, 8) as f64;
    assert!(ratio > 3.9 && ratio < 4.0);
}

#[test]
fn bench_rows_are_well_formed() {
    let s = bench::BenchSettings { repeats: 1, ..Default::default() };
    let rows = bench::run(&s, &[256, 1024]).unwrap();
    let csv = bench::to_csv(&rows);
    assert!(csv.starts_with("n,dense_ms,sparse_ms,dense_bytes,sparse_bytes\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(bench::run(&s, &[1024, 256]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weights_form_a_distribution(seed in 0u64..10_000, levels in 1usize..4, points in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = geometry(8, 2, points, levels);
        let p = SparseAttentionParams::random(g, &mut rng).unwrap();
        let shapes: Vec<(usize, usize)> = (0..levels).map(|l| (8 >> l, 6 >> l)).collect();
        let grid = level_rows(&shapes);
        let rows: usize = shapes.iter().map(|(h, w)| h * w).sum();
        let mut tape = Tape::new();
        let vars = p.on_tape(&mut tape).unwrap();
        let q = tape.constant(rand_tensor(&mut rng, &[5, 8])).unwrap();
        let v = tape.constant(rand_tensor(&mut rng, &[rows, 8])).unwrap();
        let refs = Tensor::from_fn(&[5, 2], |_| rng.gen_range(0.0..1.0));
        let base = normalized_reference_grid(&refs, &grid, &g).unwrap();
        let out = sparse_attention_tape(&mut tape, &vars, q, v, &grid, base).unwrap();
        for chunk in tape.value(out.weights).data().chunks(points * levels) {
            prop_assert!(chunk.iter().all(|&w| w > 0.0));
            prop_assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_is_permutation_equivariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = geometry(8, 2, 3, 1);
        let p = SparseAttentionParams::random(g, &mut rng).unwrap();
        let values = rand_tensor(&mut rng, &[30, 8]);
        let queries = rand_tensor(&mut rng, &[6, 8]);
        let refs = pixel_refs(&mut rng, 6, 5, 6);
        let mut perm: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pq = Tensor::from_fn(&[6, 8], |i| queries.data()[perm[i / 8] * 8 + i % 8]);
        let pr = Tensor::from_fn(&[6, 2], |i| refs.data()[perm[i / 2] * 2 + i % 2]);
        let a = sparse_attention(&queries, &values, 5, 6, &refs, &p).unwrap();
        let b = sparse_attention(&pq, &values, 5, 6, &pr, &p).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&b.data()[i * 8..(i + 1) * 8], &a.data()[src * 8..(src + 1) * 8]);
        }
    }
}
