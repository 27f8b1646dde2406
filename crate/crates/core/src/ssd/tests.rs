#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Tape;

fn dims(t: usize, h: usize, p: usize, n: usize) -> SsdDims {
    SsdDims { t, h, p, n }
}

fn bundle<F: Real>(d: SsdDims, seed: u64) -> SsdTensorBundle<F> {
    SsdTensorBundle::random(d, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Direct double loop over `(j, i)` in f64 with the decay product rebuilt
/// from scratch for every entry.
fn double_loop_oracle(b: &SsdTensorBundle<f64>, segments: &SegmentBoundaries) -> Vec<f64> {
    let SsdDims { t, h, p, n } = b.dims();
    let mut y = vec![0.0; t * h * p];
    for seg in segments.ranges() {
        for j in seg.clone() {
            for i in seg.start..=j {
                let cb: f64 = (0..n).map(|k| b.c.data()[j * n + k] * b.b.data()[i * n + k]).sum();
                for head in 0..h {
                    let mut prod = 1.0;
                    for k in i + 1..=j {
                        prod *= b.a.data()[k * h + head];
                    }
                    let m = cb * b.delta.data()[i * h + head] * prod;
                    for q in 0..p {
                        y[(j * h + head) * p + q] += m * b.x.data()[(i * h + head) * p + q];
                    }
                }
            }
        }
    }
    y
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_segments(t: usize, k: usize, rng: &mut impl Rng) -> SegmentBoundaries {
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < k - 1 {
        let c = rng.gen_range(1..t);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut offsets = vec![0];
    offsets.extend(cuts);
    offsets.push(t);
    SegmentBoundaries::new(offsets).unwrap()
}

#[test]
fn boundaries_validation() {
    assert!(SegmentBoundaries::new(vec![0]).is_err());
    assert!(SegmentBoundaries::new(vec![1, 3]).is_err());
    assert!(SegmentBoundaries::new(vec![0, 3, 3]).is_err());
    let s = SegmentBoundaries::from_lengths(&[3, 2]).unwrap();
    assert_eq!(s.offsets(), &[0, 3, 5]);
    assert_eq!(s.flip_permutation(), vec![2, 1, 0, 4, 3]);
    assert_eq!(s.last_positions(), vec![2, 4]);
    assert_eq!(s.segment_starts(), vec![0, 0, 0, 3, 3]);
    assert!(s.check_total(6).is_err());
}

#[test]
fn bundle_validation() {
    let mut b = bundle::<f64>(dims(4, 2, 3, 5), 0);
    assert!(b.validate().is_ok());
    b.a.data_mut()[3] = 0.0;
    assert!(matches!(b.validate(), Err(Error::Parameter(_))));
    let mut b = bundle::<f64>(dims(4, 2, 3, 5), 0);
    b.delta.data_mut()[0] = -1.0;
    assert!(b.validate().is_err());
    let b = bundle::<f64>(dims(4, 2, 3, 5), 0);
    assert!(SsdTensorBundle::new(b.x, b.a, b.c.slice_leading(0..3), b.c, b.delta).is_err());
}

#[test]
fn naive_with_unit_decay_is_prefix_sum() {
    let (t, h, p, n) = (9, 2, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn([t, h, p], 1.0, &mut rng);
    let basis = Tensor::from_fn([t, n], |i| if i % n == 0 { 1.0 } else { 0.0 });
    let ones = Tensor::full([t, h], 1.0);
    let b = SsdTensorBundle::without_discretization(x.clone(), ones, basis.clone(), basis).unwrap();
    let y = ssd_naive(&b).unwrap();
    let mut run = vec![0.0; h * p];
    for j in 0..t {
        for (r, v) in run.iter_mut().zip(&x.data()[j * h * p..(j + 1) * h * p]) {
            *r += v;
        }
        assert!(max_diff(&y.data()[j * h * p..(j + 1) * h * p], &run) < 1e-12);
    }
}

#[test]
fn vanishing_decay_leaves_only_the_diagonal() {
    let mut b = bundle::<f64>(dims(12, 2, 3, 4), 2);
    b.a = Tensor::full([12, 2], 1e-12);
    let y = ssd_naive(&b).unwrap();
    let SsdDims { t, h, p, n } = b.dims();
    for j in 0..t {
        let cb: f64 = (0..n).map(|k| b.c.data()[j * n + k] * b.b.data()[j * n + k]).sum();
        for head in 0..h {
            for q in 0..p {
                let want = cb * b.delta.data()[j * h + head] * b.x.data()[(j * h + head) * p + q];
                let got = y.data()[(j * h + head) * p + q];
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
        }
    }
}

#[test]
fn naive_matches_double_loop_oracle() {
    let b = bundle::<f64>(dims(37, 2, 4, 8), 3);
    let want = double_loop_oracle(&b, &SegmentBoundaries::single(37).unwrap());
    assert!(max_diff(ssd_naive(&b).unwrap().data(), &want) <= 1e-6);
}

#[test]
fn naive_enforces_capacity_limit() {
    let b = bundle::<f64>(dims(10, 1, 2, 2), 4);
    assert!(matches!(ssd_naive_with_limit(&b, 9), Err(Error::Capacity { len: 10, limit: 9 })));
    assert!(ssd_naive_with_limit(&b, 10).is_ok());
}

#[test]
fn recurrent_single_step_and_zero_input() {
    let b = bundle::<f64>(dims(1, 3, 2, 5), 5);
    let y = ssd_recurrent(&b);
    let cb: f64 = b.c.data().iter().zip(b.b.data()).map(|(c, b)| c * b).sum();
    for head in 0..3 {
        for q in 0..2 {
            let want = cb * b.delta.data()[head] * b.x.data()[head * 2 + q];
            assert!((y.data()[head * 2 + q] - want).abs() < 1e-12);
        }
    }

    let mut z = bundle::<f64>(dims(20, 2, 3, 4), 6);
    z.x = Tensor::zeros([20, 2, 3]);
    assert!(ssd_recurrent(&z).data().iter().all(|v| *v == 0.0));
}

#[test]
fn recurrent_matches_naive() {
    for seed in 0..5 {
        let b = bundle::<f64>(dims(50, 2, 5, 6), 10 + seed);
        let diff = ssd_recurrent(&b).max_abs_diff(&ssd_naive(&b).unwrap());
        assert!(diff <= 1e-10, "diff {diff}");
    }
}

#[test]
fn chunked_degenerate_block_sizes() {
    let b = bundle::<f64>(dims(41, 2, 3, 4), 7);
    let naive = ssd_naive(&b).unwrap();
    assert!(ssd_chunked(&b, 41).unwrap().max_abs_diff(&naive) <= 1e-6);
    assert!(ssd_chunked(&b, 100).unwrap().max_abs_diff(&naive) <= 1e-6);
    assert!(ssd_chunked(&b, 1).unwrap().max_abs_diff(&ssd_recurrent(&b)) <= 1e-6);
    assert!(ssd_chunked(&b, 0).is_err());
}

#[test]
fn chunked_matches_naive_in_f32() {
    let b = bundle::<f32>(dims(300, 2, 8, 16), 8);
    let naive = ssd_naive(&b).unwrap();
    for q in [16, 64, 128] {
        let diff = ssd_chunked(&b, q).unwrap().max_abs_diff(&naive);
        assert!(diff <= 1e-4, "Q={q}: {diff}");
    }
}

#[test]
fn packed_single_segment_equals_chunked() {
    let b = bundle::<f64>(dims(70, 2, 3, 4), 9);
    let seg = SegmentBoundaries::single(70).unwrap();
    assert_eq!(ssd_packed(&b, &seg, 16).unwrap(), ssd_chunked(&b, 16).unwrap());
}

#[test]
fn packed_segments_are_isolated() {
    let d = dims(40, 2, 3, 4);
    let b = bundle::<f64>(d, 10);
    let seg = SegmentBoundaries::new(vec![0, 17, 40]).unwrap();
    let y = ssd_packed(&b, &seg, 8).unwrap();

    let mut scrambled = b.clone();
    let noise = bundle::<f64>(d, 99);
    for (dst, src) in [
        (&mut scrambled.x, &noise.x),
        (&mut scrambled.a, &noise.a),
        (&mut scrambled.b, &noise.b),
        (&mut scrambled.c, &noise.c),
        (&mut scrambled.delta, &noise.delta),
    ] {
        let inner = dst.numel() / 40;
        dst.data_mut()[..17 * inner].copy_from_slice(&src.data()[..17 * inner]);
    }
    let y2 = ssd_packed(&scrambled, &seg, 8).unwrap();
    assert_eq!(y.slice_leading(17..40), y2.slice_leading(17..40));
    assert_ne!(y.slice_leading(0..17), y2.slice_leading(0..17));
}

#[test]
fn packed_matches_per_segment_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let b = bundle::<f64>(dims(120, 2, 3, 5), 100 + trial);
        let seg = random_segments(120, 5, &mut rng);
        let got = ssd_packed(&b, &seg, 16).unwrap();
        let want = double_loop_oracle(&b, &seg);
        assert!(max_diff(got.data(), &want) <= 1e-5);
        for r in seg.ranges() {
            let alone = ssd_chunked(&b.slice(r.clone()), 16).unwrap();
            assert!(got.slice_leading(r).max_abs_diff(&alone) <= 1e-5);
        }
    }
    let b = bundle::<f64>(dims(10, 1, 2, 2), 1);
    assert!(ssd_packed(&b, &SegmentBoundaries::single(9).unwrap(), 4).is_err());
}

fn perturb_at(b: &SsdTensorBundle<f64>, j: usize, rng: &mut impl Rng) -> SsdTensorBundle<f64> {
    let mut out = b.clone();
    let t = b.dims().t;
    for tensor in [&mut out.x, &mut out.b, &mut out.c] {
        let inner = tensor.numel() / t;
        for v in &mut tensor.data_mut()[j * inner..(j + 1) * inner] {
            *v += rng.gen_range(-1.0..1.0);
        }
    }
    for tensor in [&mut out.a, &mut out.delta] {
        let inner = tensor.numel() / t;
        for v in &mut tensor.data_mut()[j * inner..(j + 1) * inner] {
            *v = rng.gen_range(0.1..1.0);
        }
    }
    out
}

#[test]
fn all_kernels_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seg = SegmentBoundaries::new(vec![0, 13, 30]).unwrap();
    for _ in 0..5 {
        let b = bundle::<f64>(dims(30, 2, 3, 4), rng.gen());
        let j = rng.gen_range(1..30);
        let moved = perturb_at(&b, j, &mut rng);
        let runs: [(&str, Box<dyn Fn(&SsdTensorBundle<f64>) -> Tensor<f64>>); 4] = [
            ("naive", Box::new(|b| ssd_naive(b).unwrap())),
            ("recurrent", Box::new(ssd_recurrent)),
            ("chunked", Box::new(|b| ssd_chunked(b, 7).unwrap())),
            ("packed", Box::new(|b| ssd_packed(b, &seg, 7).unwrap())),
        ];
        for (name, run) in runs {
            let (y0, y1) = (run(&b), run(&moved));
            assert_eq!(y0.slice_leading(0..j), y1.slice_leading(0..j), "{name} leaked from {j}");
        }
    }
}

#[test]
fn linear_in_x() {
    let b1 = bundle::<f64>(dims(33, 2, 3, 4), 13);
    let mut b2 = b1.clone();
    b2.x = bundle::<f64>(dims(33, 2, 3, 4), 14).x;
    let mut sum = b1.clone();
    sum.x = Tensor::new(
        [33, 2, 3],
        b1.x.data().iter().zip(b2.x.data()).map(|(a, b)| a + b).collect(),
    )
    .unwrap();
    let y1 = ssd_chunked(&b1, 8).unwrap();
    let y2 = ssd_chunked(&b2, 8).unwrap();
    let ys = ssd_chunked(&sum, 8).unwrap();
    let added: Vec<f64> = y1.data().iter().zip(y2.data()).map(|(a, b)| a + b).collect();
    assert!(max_diff(ys.data(), &added) <= 1e-5);
}

/// Weighted-sum loss through the tape with a given kernel; returns the
/// gradients of all five inputs.
fn tape_grads(b: &SsdTensorBundle<f64>, seg: &SegmentBoundaries, kernel: SsdKernel) -> Vec<Vec<f64>> {
    let SsdDims { t, h, p, .. } = b.dims();
    let mut tape = Tape::new();
    let x = tape.leaf(b.x.detached().reshape([t, h * p]).unwrap().with_requires_grad(true));
    let a = tape.leaf(b.a.clone().with_requires_grad(true));
    let bb = tape.leaf(b.b.clone().with_requires_grad(true));
    let c = tape.leaf(b.c.clone().with_requires_grad(true));
    let delta = tape.leaf(b.delta.clone().with_requires_grad(true));
    let y = tape.ssd(x, a, bb, c, delta, h, seg, kernel).unwrap();
    let w = tape.constant(Tensor::from_fn([t, h * p], |i| ((i * 13 % 7) as f64 - 3.0) * 0.25));
    let prod = tape.mul(y, w).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    [x, a, bb, c, delta].iter().map(|v| g.get(*v).unwrap().to_vec()).collect()
}

fn weighted_loss(b: &SsdTensorBundle<f64>, seg: &SegmentBoundaries) -> f64 {
    let SsdDims { t, h, p, .. } = b.dims();
    let y = ssd_packed(b, seg, 5).unwrap();
    let w = Tensor::<f64>::from_fn([t, h * p], |i| ((i * 13 % 7) as f64 - 3.0) * 0.25);
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn backward_routes_agree_and_match_finite_differences() {
    let b = bundle::<f64>(dims(23, 2, 3, 4), 15);
    let seg = SegmentBoundaries::new(vec![0, 9, 10, 23]).unwrap();
    let naive = tape_grads(&b, &seg, SsdKernel::Naive);
    let recurrent = tape_grads(&b, &seg, SsdKernel::Recurrent);
    let chunked = tape_grads(&b, &seg, SsdKernel::Chunked(4));
    for k in 0..5 {
        for i in 0..naive[k].len() {
            let scale = naive[k][i].abs().max(1e-6);
            assert!((naive[k][i] - chunked[k][i]).abs() / scale <= 1e-8, "input {k} coord {i}");
            assert!((naive[k][i] - recurrent[k][i]).abs() / scale <= 1e-8);
        }
    }

    let h = 1e-6;
    let fields: [fn(&mut SsdTensorBundle<f64>) -> &mut Tensor<f64>; 5] = [
        |b| &mut b.x,
        |b| &mut b.a,
        |b| &mut b.b,
        |b| &mut b.c,
        |b| &mut b.delta,
    ];
    for (k, field) in fields.iter().enumerate() {
        for i in 0..naive[k].len() {
            let mut plus = b.clone();
            field(&mut plus).data_mut()[i] += h;
            let mut minus = b.clone();
            field(&mut minus).data_mut()[i] -= h;
            let fd = (weighted_loss(&plus, &seg) - weighted_loss(&minus, &seg)) / (2.0 * h);
            let err = (fd - chunked[k][i]).abs() / fd.abs().max(1e-4);
            assert!(err < 1e-5, "input {k} coord {i}: fd {fd} vs {}", chunked[k][i]);
        }
    }
}

#[test]
fn zero_hidden_gives_softplus_of_zero_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut params = SsdProjectionParams::<Tensor<f64>>::init(6, 2, 4, 3, &mut rng);
    params.b_dt = Tensor::zeros([2]);
    let out = project_inputs(&Tensor::zeros([5, 6]), &params).unwrap();
    let ln2 = std::f64::consts::LN_2;
    for t in 0..5 {
        for head in 0..2 {
            assert!((out.delta.data()[t * 2 + head] - ln2).abs() < 1e-12);
            let want = (-ln2 * params.log_decay.data()[head].exp()).exp();
            assert!((out.a.data()[t * 2 + head] - want).abs() < 1e-12);
        }
    }
    assert_eq!(out.x.shape(), &[5, 2, 4]);
}

#[test]
fn projected_step_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = SsdProjectionParams::<Tensor<f64>>::init(5, 3, 2, 4, &mut rng);
    let hidden = Tensor::<f64>::randn([4, 5], 1.0, &mut rng);
    let (t, d, heads) = (4, 5, 3);
    for out_idx in 0..t * heads {
        let mut tape = Tape::new();
        let hv = tape.leaf(hidden.clone().with_requires_grad(true));
        let bound = params.map("ssd", &mut |_, p| tape.constant(p.clone()));
        let v = projection::project_on_tape(&mut tape, hv, &bound).unwrap();
        let sel = tape.constant(Tensor::from_fn([t, heads], |i| if i == out_idx { 1.0 } else { 0.0 }));
        let picked = tape.mul(v.delta, sel).unwrap();
        let s = tape.sum(picked);
        let g = tape.backward(s).unwrap();
        let row = g.get(hv).unwrap();
        for i in 0..t * d {
            let eps = 1e-6;
            let mut hp = hidden.clone();
            hp.data_mut()[i] += eps;
            let mut hm = hidden.clone();
            hm.data_mut()[i] -= eps;
            let fd = (project_inputs(&hp, &params).unwrap().delta.data()[out_idx]
                - project_inputs(&hm, &params).unwrap().delta.data()[out_idx])
                / (2.0 * eps);
            assert!((fd - row[i]).abs() <= 1e-3 * fd.abs().max(1e-3));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn three_routes_agree(t in 1usize..90, h in 1usize..4, p in 1usize..9, n in 1usize..9, q in 1usize..40, seed in any::<u64>()) {
        let b = bundle::<f64>(dims(t, h, p, n), seed);
        let naive = ssd_naive(&b).unwrap();
        prop_assert!(ssd_recurrent(&b).max_abs_diff(&naive) <= 1e-10);
        prop_assert!(ssd_chunked(&b, q).unwrap().max_abs_diff(&naive) <= 1e-10);
    }

    #[test]
    fn hidden_projection_keeps_decay_in_unit_interval(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SsdProjectionParams::<Tensor<f64>>::init(4, 2, 2, 3, &mut rng);
        let hidden = Tensor::<f64>::randn([6, 4], scale, &mut rng);
        let out = project_inputs(&hidden, &params).unwrap();
        prop_assert!(out.a.data().iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(out.delta.data().iter().all(|&d| d > 0.0));
    }
}
