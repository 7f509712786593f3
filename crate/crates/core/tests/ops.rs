use cvcs::gradcheck;
use cvcs::{SamplingGrid, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> cvcs::Result<Var> {
    let r = Tensor::randn(tape.value(y).shape(), 1.0, &mut rng(seed ^ 0xabc));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, pad: usize, stride: usize) -> Tensor {
    let (cin, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = b.data()[co];
                for c in 0..cin {
                    for a in 0..kh {
                        for bb in 0..kw {
                            let ii = (i * stride + a) as isize - pad as isize;
                            let jj = (j * stride + bb) as isize - pad as isize;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                s += k.data()[((co * cin + c) * kh + a) * kw + bb]
                                    * x.data()[(c * h + ii as usize) * w + jj as usize];
                            }
                        }
                    }
                }
                out[(co * ho + i) * wo + j] = s;
            }
        }
    }
    Tensor::new(&[1, cout, ho, wo], out).unwrap()
}

fn conv_value(x: &Tensor, k: &Tensor, b: &Tensor, pad: usize, stride: usize) -> Tensor {
    let mut t = Tape::new();
    let (x, k, b) = (
        t.constant(x.clone()),
        t.constant(k.clone()),
        t.constant(b.clone()),
    );
    let y = t.conv2d(x, k, b, pad, stride).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::randn(&[1, 1, 5, 7], 1.0, &mut rng(1));
    let y = conv_value(&x, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1]), 0, 1);
    assert_eq!(y, x);
}

#[test]
fn conv_zero_kernel_gives_bias() {
    let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng(2));
    let y = conv_value(
        &x,
        &Tensor::zeros(&[3, 2, 3, 3]),
        &Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(),
        1,
        1,
    );
    for (c, plane) in y.data().chunks(36).enumerate() {
        assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
    }
}

#[test]
fn conv_matches_direct_sum() {
    let mut r = rng(3);
    for (pad, stride, h, w) in [
        (0, 1, 5, 5),
        (1, 1, 6, 4),
        (1, 2, 7, 9),
        (2, 3, 8, 5),
        (0, 2, 3, 3),
    ] {
        let x = Tensor::randn(&[1, 3, h, w], 1.0, &mut r);
        let k = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[2], 1.0, &mut r);
        let got = conv_value(&x, &k, &b, pad, stride);
        let want = naive_conv(&x, &k, &b, pad, stride);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12, "pad {pad} stride {stride}");
    }
}

#[test]
fn conv_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert!(t.conv2d(x, k, b, 1, 1).is_err());
    let k2 = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(t.conv2d(x, k2, b, 1, 1).is_err());
    let bad = t.constant(Tensor::full(&[1, 2, 4, 4], f64::NAN));
    let k3 = t.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(
        t.conv2d(bad, k3, b, 1, 1),
        Err(cvcs::Error::NonFinite(_))
    ));
}

#[test]
fn conv_gradcheck_random_instances() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let pad = r.random_range(0..2);
        let stride = r.random_range(1..3);
        let inputs = [
            Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r),
            Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r),
            Tensor::randn(&[2], 1.0, &mut r),
        ];
        let rep = gradcheck::check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], pad, stride)?;
                probe(t, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn relu_examples_and_grad() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let pos = t.constant(Tensor::new(&[2], vec![0.5, 3.0]).unwrap());
    let y = t.relu(pos);
    assert_eq!(t.value(y).data(), &[0.5, 3.0]);
    for seed in 0..20 {
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng(seed));
        let rep = gradcheck::check(
            |t, v| {
                let y = t.relu(v[0]);
                probe(t, y, seed)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }
}

#[test]
fn max_pool_examples_and_grad() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(&[1, 2, 4, 6], 1.5));
    let y = t.max_pool2d(c, 2, 2).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 1.5));
    for seed in 0..20 {
        let x = Tensor::randn(&[1, 2, 6, 5], 1.0, &mut rng(seed));
        let rep = gradcheck::check(
            |t, v| {
                let y = t.max_pool2d(v[0], 2, 2)?;
                probe(t, y, seed)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}

#[test]
fn bilinear_identity_and_out_of_range() {
    let x = Tensor::randn(&[1, 2, 4, 5], 1.0, &mut rng(4));
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let (y, m) = t
        .bilinear_sample(xv, &SamplingGrid::identity(4, 5))
        .unwrap();
    assert!(t.value(y).max_abs_diff(&x) < 1e-15);
    assert!(m.data().iter().all(|&v| v == 1.0));

    let far = SamplingGrid::new(3, 3, vec![[-10.0, -10.0]; 9]).unwrap();
    let (y, m) = t.bilinear_sample(xv, &far).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    assert!(m.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bilinear_half_pixel_shift_of_ramp() {
    // f(u, v) = 2u + 3v is reproduced exactly by bilinear interpolation
    let (h, w) = (5, 6);
    let ramp: Vec<f64> = (0..h)
        .flat_map(|i| (0..w).map(move |j| 2.0 * j as f64 + 3.0 * i as f64))
        .collect();
    let x = Tensor::new(&[1, 1, h, w], ramp).unwrap();
    let coords: Vec<[f64; 2]> = (0..h - 1)
        .flat_map(|i| (0..w - 1).map(move |j| [j as f64 + 0.5, i as f64 + 0.5]))
        .collect();
    let grid = SamplingGrid::new(h - 1, w - 1, coords.clone()).unwrap();
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let (y, _) = t.bilinear_sample(xv, &grid).unwrap();
    for (v, [u, vv]) in t.value(y).data().iter().zip(&coords) {
        assert!((v - (2.0 * u + 3.0 * vv)).abs() < 1e-12);
    }
    for seed in 0..20 {
        let mut r = rng(seed);
        let coords: Vec<[f64; 2]> = (0..12)
            .map(|_| [r.random_range(-0.5..5.5), r.random_range(-0.5..4.5)])
            .collect();
        let grid = SamplingGrid::new(3, 4, coords).unwrap();
        let x = Tensor::randn(&[1, 2, h, w], 1.0, &mut r);
        let rep = gradcheck::check(
            |t, v| {
                let (y, _) = t.bilinear_sample(v[0], &grid)?;
                probe(t, y, seed)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}

#[test]
fn stack_max_oracle_and_grad() {
    let mut r = rng(5);
    let a = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let single = t.stack_max(&[va]).unwrap();
    assert_eq!(t.value(single), &a);
    let m = t.stack_max(&[va, vb]).unwrap();
    for ((&o, &x), &y) in t.value(m).data().iter().zip(a.data()).zip(b.data()) {
        assert_eq!(o, x.max(y));
    }
    for seed in 0..20 {
        let mut r = rng(seed);
        let xs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[2, 3, 3], 1.0, &mut r))
            .collect();
        let rep = gradcheck::check(
            |t, v| {
                let y = t.stack_max(v)?;
                probe(t, y, seed)
            },
            &xs,
            EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}

#[test]
fn elementwise_and_reductions() {
    let mut r = rng(6);
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let ones = t.constant(Tensor::ones(&[2, 3, 4]));
    let y = t.mul(xv, ones).unwrap();
    assert_eq!(t.value(y), &x);
    let o = t.constant(Tensor::ones(&[2, 3]));
    let s = t.sum(o);
    assert_eq!(t.value(s).item(), 6.0);

    for seed in 0..20 {
        let mut r = rng(seed);
        let inputs = [
            Tensor::randn(&[2, 3, 4], 1.0, &mut r),
            Tensor::randn(&[3, 1], 1.0, &mut r),
            Tensor::randn(&[2, 3, 4], 1.0, &mut r).map(|v| v.abs() + 0.5),
        ];
        let rep = gradcheck::check(
            |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.mul(a, v[1])?;
                let c = t.sub(b, v[0])?;
                let d = t.div(c, v[2])?;
                let e = t.scale(d, 0.3);
                let e = t.exp(e);
                let f = t.square(e);
                let g = t.mean(f);
                let h = t.reshape(v[2], &[4, 6])?;
                let h = t.sum(h);
                t.add(g, h)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}

#[test]
fn conv_relu_sum_composed() {
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let inputs = [
            Tensor::randn(&[1, 1, 6, 6], 1.0, &mut r),
            Tensor::randn(&[3, 1, 3, 3], 1.0, &mut r),
            Tensor::randn(&[3], 0.1, &mut r),
            Tensor::randn(&[1, 3, 3, 3], 1.0, &mut r),
            Tensor::randn(&[1], 0.1, &mut r),
        ];
        let rep = gradcheck::check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let y = t.relu(y);
                let y = t.max_pool2d(y, 2, 2)?;
                let y = t.conv2d(y, v[3], v[4], 1, 1)?;
                let y = t.global_avg_pool(y)?;
                t.bce_with_logits(y, 1.0)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn grad_reverse_scales_by_minus_lambda() {
    let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng(11));
    let grad_of = |lambda: Option<f64>| {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let y = match lambda {
            Some(l) => t.grad_reverse(v, l),
            None => v,
        };
        let y = t.square(y);
        let y = t.global_avg_pool(y).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        t.grad(v).unwrap().clone()
    };
    let plain = grad_of(None);
    let rev = grad_of(Some(0.1));
    assert!(rev.max_abs_diff(&plain.map(|g| -0.1 * g)) < 1e-15);
}

#[test]
fn masked_min_grad() {
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let xs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[3, 4], 1.0, &mut r))
            .collect();
        let masks: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(
                    &[3, 4],
                    (0..12).map(|_| r.random_range(0..2) as f64).collect(),
                )
                .unwrap()
            })
            .collect();
        let rep = gradcheck::check(
            |t, v| {
                let (m, _) = t.masked_min(v, &masks)?;
                probe(t, m, seed)
            },
            &xs,
            EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(9);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[1, 2, 8, 8], 1.0, &mut r));
        let k = t.leaf(Tensor::randn(&[4, 2, 3, 3], 1.0, &mut r));
        let b = t.leaf(Tensor::zeros(&[4]));
        let y = t.conv2d(x, k, b, 1, 1).unwrap();
        let y = t.relu(y);
        let s = t.sum(y);
        t.backward(s).unwrap();
        (t.value(y).clone(), t.grad(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stack_max_is_bitwise_permutation_invariant(seed in 0u64..1000, n in 1usize..6, rot in 0usize..6) {
        let mut r = rng(seed);
        let xs: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[2, 3, 3], 1.0, &mut r)).collect();
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let a = t.stack_max(&vs).unwrap();
        let mut perm = vs.clone();
        perm.rotate_left(rot % n);
        perm.reverse();
        let b = t.stack_max(&perm).unwrap();
        prop_assert_eq!(t.value(a).data(), t.value(b).data());
    }

    #[test]
    fn grads_match_value_shapes(seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r));
        let k = t.leaf(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r));
        let b = t.leaf(Tensor::randn(&[3], 1.0, &mut r));
        let y = t.conv2d(x, k, b, 1, 1).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        for v in [x, k, b] {
            prop_assert_eq!(t.grad(v).unwrap().shape(), t.value(v).shape());
        }
    }
}
