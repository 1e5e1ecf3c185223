use puyun_core::tensor::{finite_difference_check, project, Tape, Tensor};
use puyun_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn eval<F>(f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Tape<f64>) -> puyun_core::Result<puyun_core::Var>,
{
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).clone()
}

// --- depthwise convolution -------------------------------------------------

/// Direct evaluation of the padded cross-correlation, one output at a time.
fn dwconv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, dilation: usize) -> Tensor<f64> {
    let (c, h, w) = x.dims3().unwrap();
    let ks = k.shape()[1];
    let r = (ks / 2) as isize;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for a in 0..ks {
                    for b in 0..ks {
                        let si = (i as isize + (a as isize - r) * dilation as isize)
                            .clamp(0, h as isize - 1) as usize;
                        let sj = (j as isize + (b as isize - r) * dilation as isize)
                            .rem_euclid(w as isize) as usize;
                        s += k.data()[(ch * ks + a) * ks + b] * x.data()[(ch * h + si) * w + sj];
                    }
                }
                out.data_mut()[(ch * h + i) * w + j] = s;
            }
        }
    }
    out
}

fn dwconv(x: &Tensor<f64>, k: &Tensor<f64>, d: usize) -> Tensor<f64> {
    eval(|t| {
        let xv = t.constant(x.clone());
        let kv = t.constant(k.clone());
        t.conv2d_depthwise(xv, kv, d)
    })
}

#[test]
fn dwconv_zero_input_gives_zero() {
    let x = Tensor::zeros(vec![2, 4, 5]);
    let k = random(&[2, 3, 3], 1);
    assert!(dwconv(&x, &k, 1).data().iter().all(|&v| v == 0.0));
}

#[test]
fn dwconv_impulse_returns_flipped_kernel() {
    let mut x = Tensor::zeros(vec![1, 3, 3]);
    x.data_mut()[4] = 1.0;
    let k = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let out = dwconv(&x, &k, 1);
    // hand-enumerated: out[i][j] = k[2-i][2-j]
    assert_eq!(out.data(), &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    assert_eq!(out.data()[4], k.data()[4]);
}

#[test]
fn dwconv_dilation_two_taps() {
    let mut x = Tensor::zeros(vec![1, 5, 5]);
    x.data_mut()[12] = 1.0;
    let k = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let out = dwconv(&x, &k, 2);
    // Nonzero only where a tap at offset {-2,0,+2} hits the centre.
    let nonzero: Vec<(usize, usize)> = (0..25)
        .filter(|&p| out.data()[p] != 0.0)
        .map(|p| (p / 5, p % 5))
        .collect();
    let expected: Vec<(usize, usize)> = [0, 2, 4]
        .iter()
        .flat_map(|&i| [0, 2, 4].iter().map(move |&j| (i, j)))
        .collect();
    assert_eq!(nonzero, expected);
    assert_eq!(out.data()[0], 9.0);
    assert_eq!(out.data()[12], 5.0);
    assert_eq!(out.data()[24], 1.0);
}

#[test]
fn dwconv_matches_oracle() {
    for (seed, (shape, ks, d)) in [
        ([2, 5, 7], 3, 1),
        ([3, 6, 4], 5, 2),
        ([1, 4, 9], 3, 3),
        ([2, 3, 3], 7, 1),
    ]
    .into_iter()
    .enumerate()
    {
        let x = random(&shape, seed as u64);
        let k = random(&[shape[0], ks, ks], 100 + seed as u64);
        let got = dwconv(&x, &k, d);
        let want = dwconv_oracle(&x, &k, d);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dwconv_identity_kernel_is_identity() {
    let x = random(&[3, 6, 8], 7);
    let mut k = Tensor::zeros(vec![3, 5, 5]);
    for c in 0..3 {
        k.data_mut()[c * 25 + 12] = 1.0;
    }
    for d in 1..=3 {
        assert_eq!(dwconv(&x, &k, d), x);
    }
}

#[test]
fn dwconv_rejects_even_kernel_and_nan() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random(&[1, 4, 4], 0));
    let k = t.constant(Tensor::zeros(vec![1, 2, 2]));
    assert!(matches!(t.conv2d_depthwise(x, k, 1), Err(Error::Config(_))));

    let mut bad = random(&[1, 4, 4], 0);
    bad.data_mut()[3] = f64::NAN;
    let x = t.constant(bad);
    let k = t.constant(Tensor::ones(vec![1, 3, 3]));
    assert!(matches!(t.conv2d_depthwise(x, k, 1), Err(Error::Numeric { .. })));
}

// --- pointwise -------------------------------------------------------------

fn pointwise(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    eval(|t| {
        let (x, w, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        t.conv2d_pointwise(x, w, b)
    })
}

#[test]
fn pointwise_identity_and_sum() {
    let x = random(&[3, 2, 4], 3);
    let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    assert_eq!(pointwise(&x, &eye, &Tensor::zeros(vec![3])), x);

    let uv = random(&[2, 3, 3], 4);
    let out = pointwise(&uv, &Tensor::ones(vec![1, 2]), &Tensor::zeros(vec![1]));
    for p in 0..9 {
        assert_eq!(out.data()[p], uv.data()[p] + uv.data()[9 + p]);
    }
}

#[test]
fn pointwise_matches_triple_loop() {
    // Cout=2, Cin=3, 2x2 pixels
    let x = random(&[3, 2, 2], 11);
    let w = random(&[2, 3], 12);
    let b = random(&[2], 13);
    let got = pointwise(&x, &w, &b);
    for o in 0..2 {
        for p in 0..4 {
            let mut s = b.data()[o];
            for i in 0..3 {
                s += w.data()[o * 3 + i] * x.data()[i * 4 + p];
            }
            assert!((got.data()[o * 4 + p] - s).abs() < 1e-6);
        }
    }
}

#[test]
fn pointwise_shape_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random(&[3, 2, 2], 0));
    let w = t.constant(random(&[2, 4], 0));
    let b = t.constant(random(&[2], 0));
    assert!(matches!(t.conv2d_pointwise(x, w, b), Err(Error::Shape(_))));
}

// --- elementwise -------------------------------------------------------------

#[test]
fn hadamard_cases() {
    let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
    let prod = eval(|t| {
        let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
        t.hadamard(a, b)
    });
    assert_eq!(prod.data(), &[3.0, 8.0]);
    let x = random(&[2, 3, 4], 1);
    let ones = eval(|t| {
        let (a, b) = (t.constant(x.clone()), t.constant(Tensor::ones(vec![2, 3, 4])));
        t.hadamard(a, b)
    });
    assert_eq!(ones, x);
    let zeros = eval(|t| {
        let (a, b) = (t.constant(x.clone()), t.constant(Tensor::zeros(vec![2, 3, 4])));
        t.hadamard(a, b)
    });
    assert!(zeros.data().iter().all(|&v| v == 0.0));

    let mut t = Tape::<f64>::new();
    let (a, b) = (t.constant(random(&[2, 2], 0)), t.constant(random(&[4], 0)));
    assert!(matches!(t.hadamard(a, b), Err(Error::Shape(_))));
    assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
}

#[test]
fn gelu_values() {
    let out = eval(|t| {
        let x = t.constant(Tensor::new(vec![2], vec![0.0, 3.0]).unwrap());
        t.gelu(x)
    });
    assert_eq!(out.data()[0], 0.0);
    // 0.5 * 3 * (1 + tanh(0.7978845608 * (3 + 0.044715 * 27)))
    let oracle = 1.5 * (1.0 + (0.797_884_560_8_f64 * (3.0 + 0.044_715 * 27.0)).tanh());
    assert!((out.data()[1] - oracle).abs() < 1e-15);
    assert!((out.data()[1] - 2.9964).abs() < 1e-4);

    let x = random(&[5], 2);
    let sum = eval(|t| {
        let (a, z) = (t.constant(x.clone()), t.constant(Tensor::zeros(vec![5])));
        t.add(a, z)
    });
    assert_eq!(sum, x);
}

// --- layer norm ------------------------------------------------------------

fn layer_norm(x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    eval(|t| {
        let (x, g, b) = (t.constant(x.clone()), t.constant(g.clone()), t.constant(b.clone()));
        t.layer_norm(x, g, b, eps)
    })
}

#[test]
fn layer_norm_constant_channels_gives_zero() {
    let x = Tensor::from_fn(vec![4, 2, 3], |i| (i % 6) as f64);
    let out = layer_norm(&x, &Tensor::ones(vec![4]), &Tensor::zeros(vec![4]), 1e-5);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let (c, p) = (5, 6);
    let x = random(&[c, 2, 3], 21);
    let g = random(&[c], 22);
    let b = random(&[c], 23);
    let eps = 1e-5;
    let out = layer_norm(&x, &g, &b, eps);
    let raw = layer_norm(&x, &Tensor::ones(vec![c]), &Tensor::zeros(vec![c]), eps);
    for px in 0..p {
        let vals: Vec<f64> = (0..c).map(|ch| x.data()[ch * p + px]).collect();
        let mean = vals.iter().sum::<f64>() / c as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let mut m2 = 0.0;
        let mut v2 = 0.0;
        for ch in 0..c {
            let n = (vals[ch] - mean) / (var + eps).sqrt();
            let want = g.data()[ch] * n + b.data()[ch];
            assert!((out.data()[ch * p + px] - want).abs() < 1e-6);
            m2 += raw.data()[ch * p + px];
            v2 += raw.data()[ch * p + px].powi(2);
        }
        assert!((m2 / c as f64).abs() < 1e-12);
        assert!((v2 / c as f64 - 1.0).abs() < 1e-3);
    }
}

// --- pixel shuffle, resize, concat -----------------------------------------

#[test]
fn pixel_shuffle_block_layout() {
    let x = Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = eval(|t| {
        let v = t.constant(x.clone());
        t.pixel_shuffle(v, 2)
    });
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);

    let y = random(&[3, 2, 4], 5);
    let same = eval(|t| {
        let v = t.constant(y.clone());
        t.pixel_shuffle(v, 1)
    });
    assert_eq!(same, y);

    let mut t = Tape::<f64>::new();
    let v = t.constant(random(&[3, 2, 2], 0));
    assert!(matches!(t.pixel_shuffle(v, 2), Err(Error::Shape(_))));
}

#[test]
fn pixel_shuffle_roundtrip_exhaustive() {
    for r in 1..=3 {
        for c in 1..=2 {
            for h in 1..=3 {
                for w in 1..=3 {
                    let x = random(&[c * r * r, h, w], (r * 100 + c * 10 + h + w) as u64);
                    let back = eval(|t| {
                        let v = t.constant(x.clone());
                        let s = t.pixel_shuffle(v, r)?;
                        t.pixel_unshuffle(s, r)
                    });
                    assert_eq!(back, x);
                    let y = random(&[c, h * r, w * r], 7);
                    let back = eval(|t| {
                        let v = t.constant(y.clone());
                        let s = t.pixel_unshuffle(v, r)?;
                        t.pixel_shuffle(s, r)
                    });
                    assert_eq!(back, y);
                }
            }
        }
    }
}

#[test]
fn resize_cases() {
    let ramp = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
    let out = eval(|t| {
        let v = t.constant(ramp.clone());
        t.resize_bilinear(v, 1, 3)
    });
    assert_eq!(out.data(), &[0.0, 0.5, 1.0]);

    let x = random(&[2, 3, 4], 9);
    let same = eval(|t| {
        let v = t.constant(x.clone());
        t.resize_bilinear(v, 3, 4)
    });
    assert_eq!(same, x);

    let constant = Tensor::full(vec![2, 3, 5], 2.5);
    let big = eval(|t| {
        let v = t.constant(constant.clone());
        t.resize_bilinear(v, 7, 11)
    });
    assert!(big.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
}

#[test]
fn concat_cases() {
    let a = random(&[1, 2, 2], 1);
    let b = random(&[1, 2, 2], 2);
    let single = eval(|t| {
        let v = t.constant(a.clone());
        t.concat_channels(&[v])
    });
    assert_eq!(single, a);
    let both = eval(|t| {
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        t.concat_channels(&[va, vb])
    });
    assert_eq!(both.shape(), &[2, 2, 2]);
    assert_eq!(&both.data()[..4], a.data());
    assert_eq!(&both.data()[4..], b.data());

    let mut t = Tape::<f64>::new();
    let (va, vb) = (t.constant(a), t.constant(random(&[1, 3, 2], 3)));
    assert!(matches!(t.concat_channels(&[va, vb]), Err(Error::Shape(_))));
}

// --- backward --------------------------------------------------------------

#[test]
fn backward_simple_cases() {
    let x = random(&[2, 3], 4);
    let mut t = Tape::new();
    let v = t.leaf(x.clone(), true);
    let s = t.sum(v).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut t = Tape::new();
    let v = t.leaf(x.clone(), true);
    let sq = t.hadamard(v, v).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s).unwrap();
    for (gv, xv) in g.get(v).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
    assert!(matches!(t.backward(sq), Err(Error::Usage(_))));
}

#[test]
fn backward_is_repeatable_bitwise() {
    let x = random(&[4, 5, 6], 30);
    let k = random(&[4, 3, 3], 31);
    let mut t = Tape::new();
    let xv = t.leaf(x, true);
    let kv = t.leaf(k, true);
    let c = t.conv2d_depthwise(xv, kv, 2).unwrap();
    let g = t.gelu(c).unwrap();
    let m = t.hadamard(g, xv).unwrap();
    let s = t.sum(m).unwrap();
    let a = t.backward(s).unwrap();
    let b = t.backward(s).unwrap();
    assert_eq!(a.get(xv), b.get(xv));
    assert_eq!(a.get(kv), b.get(kv));
}

// --- finite-difference checks on every primitive ----------------------------

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn assert_fd<F>(f: F, x: &Tensor<f64>, what: &str)
where
    F: Fn(&mut Tape<f64>, puyun_core::Var) -> puyun_core::Result<puyun_core::Var>,
{
    let report = finite_difference_check(f, x, H).unwrap();
    assert!(
        report.max_rel_error <= TOL,
        "{what}: rel error {} at {}",
        report.max_rel_error,
        report.worst_index
    );
}

#[test]
fn linear_function_checks_exactly() {
    let x = random(&[3, 4], 0);
    let w = random(&[3, 4], 1);
    let r = finite_difference_check(|t, v| project(t, v, &w), &x, H).unwrap();
    assert!(r.max_rel_error < 1e-9);
    let r = finite_difference_check(
        |t, v| {
            let sq = t.hadamard(v, v)?;
            t.sum(sq)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn fd_depthwise() {
    for (s, (shape, ks, d)) in [([2, 5, 6], 3, 1), ([3, 4, 7], 5, 2), ([1, 6, 5], 3, 3)]
        .into_iter()
        .enumerate()
    {
        let s = s as u64;
        let x = random(&shape, s);
        let k = random(&[shape[0], ks, ks], s + 10);
        let w = random(&shape, s + 20);
        assert_fd(
            |t, v| {
                let kv = t.constant(k.clone());
                let o = t.conv2d_depthwise(v, kv, d)?;
                project(t, o, &w)
            },
            &x,
            "dwconv/x",
        );
        assert_fd(
            |t, kv| {
                let xv = t.constant(x.clone());
                let o = t.conv2d_depthwise(xv, kv, d)?;
                project(t, o, &w)
            },
            &k,
            "dwconv/kernel",
        );
    }
}

#[test]
fn fd_pointwise() {
    for (s, (cin, cout, h, w)) in [(2, 3, 2, 2), (4, 2, 3, 5), (1, 5, 4, 1)].into_iter().enumerate() {
        let s = s as u64;
        let x = random(&[cin, h, w], s);
        let wt = random(&[cout, cin], s + 1);
        let b = random(&[cout], s + 2);
        let r = random(&[cout, h, w], s + 3);
        assert_fd(
            |t, v| {
                let (wv, bv) = (t.constant(wt.clone()), t.constant(b.clone()));
                let o = t.conv2d_pointwise(v, wv, bv)?;
                project(t, o, &r)
            },
            &x,
            "pointwise/x",
        );
        assert_fd(
            |t, wv| {
                let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
                let o = t.conv2d_pointwise(xv, wv, bv)?;
                project(t, o, &r)
            },
            &wt,
            "pointwise/w",
        );
        assert_fd(
            |t, bv| {
                let (xv, wv) = (t.constant(x.clone()), t.constant(wt.clone()));
                let o = t.conv2d_pointwise(xv, wv, bv)?;
                project(t, o, &r)
            },
            &b,
            "pointwise/b",
        );
    }
}

#[test]
fn fd_layer_norm() {
    // C=2 is degenerate: normalized outputs are ±1 up to eps, so the input
    // gradient is O(eps) and central differences lose relative accuracy.
    for (s, shape) in [[3, 2, 2], [5, 3, 1], [4, 4, 3]].into_iter().enumerate() {
        let s = s as u64;
        let c = shape[0];
        let x = random(&shape, s);
        let g = random(&[c], s + 1);
        let b = random(&[c], s + 2);
        let r = random(&shape, s + 3);
        assert_fd(
            |t, v| {
                let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
                let o = t.layer_norm(v, gv, bv, 1e-5)?;
                project(t, o, &r)
            },
            &x,
            "layer_norm/x",
        );
        assert_fd(
            |t, gv| {
                let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
                let o = t.layer_norm(xv, gv, bv, 1e-5)?;
                project(t, o, &r)
            },
            &g,
            "layer_norm/gamma",
        );
        assert_fd(
            |t, bv| {
                let (xv, gv) = (t.constant(x.clone()), t.constant(g.clone()));
                let o = t.layer_norm(xv, gv, bv, 1e-5)?;
                project(t, o, &r)
            },
            &b,
            "layer_norm/beta",
        );
    }
}

#[test]
fn fd_rearrangements_and_resize() {
    for (s, (c, h, w)) in [(1, 2, 3), (2, 3, 3), (3, 4, 2)].into_iter().enumerate() {
        let s = s as u64;
        let x = random(&[c * 4, h, w], s);
        let r = random(&[c, 2 * h, 2 * w], s + 1);
        assert_fd(|t, v| {
            let o = t.pixel_shuffle(v, 2)?;
            project(t, o, &r)
        }, &x, "pixel_shuffle");
        let y = random(&[c, 2 * h, 2 * w], s + 2);
        let r2 = random(&[c * 4, h, w], s + 3);
        assert_fd(|t, v| {
            let o = t.pixel_unshuffle(v, 2)?;
            project(t, o, &r2)
        }, &y, "pixel_unshuffle");
        let r3 = random(&[c, 2 * h + 1, 3 * w], s + 4);
        let x3 = random(&[c, h, w], s + 5);
        assert_fd(|t, v| {
            let o = t.resize_bilinear(v, 2 * h + 1, 3 * w)?;
            project(t, o, &r3)
        }, &x3, "resize");
        let r4 = random(&[c, 1, w], s + 6);
        assert_fd(|t, v| {
            let o = t.crop_rows(v, 1)?;
            project(t, o, &r4)
        }, &x3, "crop_rows");
        let other = random(&[2, h, w], s + 7);
        let r5 = random(&[c + 2, h, w], s + 8);
        assert_fd(|t, v| {
            let ov = t.constant(other.clone());
            let o = t.concat_channels(&[v, ov])?;
            project(t, o, &r5)
        }, &x3, "concat/first");
        assert_fd(|t, v| {
            let ov = t.constant(x3.clone());
            let o = t.concat_channels(&[ov, v])?;
            let r5b = random(&[c + 2, h, w], 99);
            project(t, o, &r5b)
        }, &other, "concat/second");
    }
}

#[test]
fn fd_elementwise_and_losses() {
    for (s, shape) in [[2, 3, 4], [1, 5, 2], [3, 2, 2]].into_iter().enumerate() {
        let s = s as u64;
        let x = random(&shape, s).map(|v| 2.0 * v);
        let y = random(&shape, s + 1);
        let r = random(&shape, s + 2);
        assert_fd(|t, v| {
            let o = t.gelu(v)?;
            project(t, o, &r)
        }, &x, "gelu");
        assert_fd(|t, v| {
            let yv = t.constant(y.clone());
            let o = t.hadamard(v, yv)?;
            project(t, o, &r)
        }, &x, "hadamard");
        assert_fd(|t, v| {
            let yv = t.constant(y.clone());
            let a = t.add(v, yv)?;
            let o = t.scale(a, 0.37)?;
            let o = t.sub(o, yv)?;
            project(t, o, &r)
        }, &x, "add/scale/sub");
        let rows: Vec<f64> = (0..shape[1]).map(|i| 0.5 + i as f64 * 0.25).collect();
        // keep residuals away from the |.| kink
        let target = x.zip_map(&y, |a, b| a + if b >= 0.0 { 0.5 + b } else { b - 0.5 }).unwrap();
        assert_fd(|t, v| {
            let tv = t.constant(target.clone());
            t.weighted_abs_mean(v, tv, &rows)
        }, &x, "weighted_abs_mean");
        assert_fd(|t, v| {
            let tv = t.constant(y.clone());
            t.weighted_sq_mean(v, tv, &rows)
        }, &x, "weighted_sq_mean");
        assert_fd(|t, v| t.mean(v), &x, "mean");
    }
}
