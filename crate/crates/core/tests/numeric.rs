use glassnorm::autodiff::{grad_check, Tape};
use glassnorm::wavelet::{wavelet_loss_var, WaveletMode};
use glassnorm::{SeededRng, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.matmul(a, b).unwrap();
    tape.value(y).clone()
}

fn conv(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let mut tape = Tape::new();
    let (x, w) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(x, w, None, stride).unwrap();
    tape.value(y).clone()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let o = w.shape()[0];
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = Tensor::zeros(&[o, ho, wo]);
    for oc in 0..o {
        for y in 0..ho {
            for xx in 0..wo {
                let mut s = 0.0;
                for ic in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (y * stride + ky) as isize - 1;
                            let ix = (xx * stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += x.at(&[ic, iy as usize, ix as usize]) * w.at(&[oc, ic, ky, kx]);
                        }
                    }
                }
                out.set(&[oc, y, xx], s);
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
    assert_eq!(matmul(&Tensor::eye(2), &b), b);
    assert_eq!(matmul(&t(&[1, 1], &[2.0]), &t(&[1, 1], &[7.0])).data(), &[14.0]);
    let mut rng = SeededRng::new(1);
    let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
    assert!(matmul(&a, &b).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn conv2d_examples() {
    let mut rng = SeededRng::new(2);
    let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    assert!(conv(&x, &Tensor::zeros(&[4, 2, 3, 3]), 1).data().iter().all(|&v| v == 0.0));

    let x1 = Tensor::randn(&[1, 3, 3], 1.0, &mut rng);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.set(&[0, 0, 1, 1], 1.0);
    assert_eq!(conv(&x1, &k, 1), x1);

    let w = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut rng);
    assert!(conv(&x, &w, 1).max_abs_diff(&naive_conv(&x, &w, 1)) < 1e-12);
    assert!(conv(&x, &w, 2).max_abs_diff(&naive_conv(&x, &w, 2)) < 1e-12);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
    let y = tape.softmax_rows(x);
    let v = tape.value(y).data();
    for &p in &v[..3] {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v[3] - 1.0).abs() < 1e-15 && v[4] < 1e-300 && v[4] >= 0.0);
    assert!(v.iter().all(|p| p.is_finite()));

    let x = Tensor::randn(&[4, 6], 2.0, &mut SeededRng::new(3));
    let r = grad_check(
        |tape, v| {
            let s = tape.softmax_rows(v);
            let w = tape.constant(Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.37).sin()));
            let p = tape.mul(s, w)?;
            Ok(tape.sum(p))
        },
        &x,
        1e-5,
        1e-4,
    );
    assert!(r.passed, "{r:?}");
}

#[test]
fn groupnorm_examples() {
    let gn = |x: &Tensor, gamma: f64, beta: f64| {
        let c = x.shape()[0];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::full(&[c], gamma));
        let b = tape.constant(Tensor::full(&[c], beta));
        let y = tape.groupnorm(xv, 2, g, b, 1e-9).unwrap();
        tape.value(y).clone()
    };
    assert!(gn(&Tensor::full(&[4, 3, 3], 2.5), 1.0, 0.0).data().iter().all(|&v| v == 0.0));
    let x = Tensor::randn(&[4, 5, 5], 3.0, &mut SeededRng::new(4));
    assert!(gn(&x, 0.0, 0.7).data().iter().all(|&v| v == 0.7));

    let y = gn(&x, 1.0, 0.0);
    let group = 2 * 25;
    for g in 0..2 {
        let vals = &y.data()[g * group..(g + 1) * group];
        let mean = vals.iter().sum::<f64>() / group as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group as f64;
        assert!(mean.abs() < 1e-10, "{mean}");
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
}

#[test]
fn silu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 40.0]));
    let y = tape.silu(x);
    assert_eq!(tape.value(y).data()[0], 0.0);
    assert!((tape.value(y).data()[1] - 40.0).abs() < 1e-12);

    let x = Tensor::randn(&[20], 2.0, &mut SeededRng::new(5));
    let r = grad_check(
        |tape, v| {
            let s = tape.silu(v);
            Ok(tape.sum(s))
        },
        &x,
        1e-5,
        1e-6,
    );
    assert!(r.passed, "{r:?}");
}

#[test]
fn backward_examples() {
    let x0 = Tensor::randn(&[3, 4], 1.0, &mut SeededRng::new(6));
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let y = tape.sum(x);
    tape.backward(y).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let y = tape.sum(sq);
    tape.backward(y).unwrap();
    for (g, v) in tape.grad(x).unwrap().iter().zip(x0.data()) {
        assert_eq!(*g, 2.0 * v);
    }

    let mut tape = Tape::new();
    let x = tape.param(x0);
    assert!(tape.backward(x).is_err());
}

#[test]
fn grad_check_examples() {
    let x = Tensor::randn(&[3, 5], 1.0, &mut SeededRng::new(7));
    // Exact up to the rounding of the difference quotient.
    let r = grad_check(|tape, v| Ok(tape.sum(v)), &x, 1e-5, 1e-4);
    assert!(r.passed && r.max_rel_error < 1e-9, "{r:?}");

    // Row sums are constant, so every gradient entry is zero.
    let r = grad_check(
        |tape, v| {
            let s = tape.softmax_rows(v);
            Ok(tape.sum(s))
        },
        &x,
        1e-5,
        1e-4,
    );
    assert!(r.passed, "{r:?}");
    assert_eq!(r.max_rel_error, 0.0);
    assert!(r.max_abs_error < 1e-9);

    let mut rng = SeededRng::new(8);
    let gt = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
    let pred = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
    let mask = glassnorm::wavelet::edge_mask_tensor(&gt, Default::default()).unwrap();
    let r = grad_check(
        |tape, v| {
            let l = wavelet_loss_var(tape, v, &gt, std::slice::from_ref(&mask), WaveletMode::Edge)?;
            Ok(l.total)
        },
        &pred,
        1e-5,
        1e-4,
    );
    assert!(r.passed, "{r:?}");
}

fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop((a, b) in (1usize..=16, 1usize..=16, 1usize..=16)
        .prop_flat_map(|(m, k, n)| (tensor_strategy(vec![m, k]), tensor_strategy(vec![k, n])))) {
        prop_assert!(matmul(&a, &b).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn conv_matches_sliding_window((x, w, stride) in (1usize..=4, 1usize..=4, 1usize..=16, 1usize..=16, 1usize..=2)
        .prop_flat_map(|(c, o, h, wd, s)| (tensor_strategy(vec![c, h, wd]), tensor_strategy(vec![o, c, 3, 3]), Just(s)))) {
        prop_assert!(conv(&x, &w, stride).max_abs_diff(&naive_conv(&x, &w, stride)) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..=8, 1usize..=16)
        .prop_flat_map(|(r, c)| prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap()))) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.softmax_rows(v);
        let c = x.shape()[1];
        for row in tape.value(y).data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn ops_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = SeededRng::new(seed);
            let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.param(x);
            let wv = tape.param(w);
            let y = tape.conv2d(xv, wv, None, 1).unwrap();
            let y = tape.silu(y);
            let y = tape.reshape(y, &[4, 36]).unwrap();
            let y = tape.softmax_rows(y);
            let y = tape.square(y);
            let y = tape.sum(y);
            tape.backward(y).unwrap();
            (tape.value(y).clone(), tape.grad_tensor(xv), tape.grad_tensor(wv))
        };
        prop_assert_eq!(run(), run());
    }
}
