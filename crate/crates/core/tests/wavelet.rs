use glassnorm::autodiff::grad_check;
use glassnorm::normal::NormalMap;
use glassnorm::wavelet::{
    edge_mask, edge_mask_tensor, haar_dwt2, haar_idwt2, wavelet_loss, wavelet_loss_var, MaskNormalization,
    WaveletBands, WaveletMode,
};
use glassnorm::{SeededRng, Tensor};
use proptest::prelude::*;

fn random_map(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::uniform(&[c, h, w], -1.0, 1.0, rng)
}

fn unit_map(rng: &mut SeededRng, h: usize, w: usize) -> Tensor {
    NormalMap::normalized(Tensor::randn(&[3, h, w], 1.0, rng)).unwrap().into_tensor()
}

#[test]
fn thousand_maps_reconstruct_and_preserve_energy() {
    let mut rng = SeededRng::new(1000);
    for _ in 0..1000 {
        let h = 2 * (1 + rng.below(16));
        let w = 2 * (1 + rng.below(16));
        let x = random_map(&mut rng, 3, h, w);
        let b = haar_dwt2(&x).unwrap();
        assert!(haar_idwt2(&b).unwrap().max_abs_diff(&x) <= 1e-12);
        let e = b.ll.sum_sq() + b.hf.sum_sq();
        assert!((e - x.sum_sq()).abs() <= 1e-9 * x.sum_sq());
    }
}

#[test]
fn analysis_of_synthesis_is_identity() {
    let mut rng = SeededRng::new(2);
    let b = WaveletBands {
        ll: Tensor::randn(&[3, 5, 4], 1.0, &mut rng),
        hf: Tensor::randn(&[9, 5, 4], 1.0, &mut rng),
    };
    let back = haar_dwt2(&haar_idwt2(&b).unwrap()).unwrap();
    assert!(back.ll.max_abs_diff(&b.ll) < 1e-12);
    assert!(back.hf.max_abs_diff(&b.hf) < 1e-12);
}

#[test]
fn dwt_energy_on_random_16() {
    let x = random_map(&mut SeededRng::new(3), 3, 16, 16);
    let b = haar_dwt2(&x).unwrap();
    assert!((b.ll.sum_sq() + b.hf.sum_sq() - x.sum_sq()).abs() < 1e-12);
}

/// Per-pixel restatement of the mask: forward differences with edge
/// replication, 2×2 mean pool, divide by the max.
fn mask_oracle(n: &Tensor) -> Vec<f64> {
    let (c, h, w) = (n.shape()[0], n.shape()[1], n.shape()[2]);
    let mut mag = vec![vec![0.0; w]; h];
    for (y, row) in mag.iter_mut().enumerate() {
        for (x, out) in row.iter_mut().enumerate() {
            let (mut gx, mut gy) = (0.0f64, 0.0f64);
            for ch in 0..c {
                let v = n.at(&[ch, y, x]);
                let dx = if x + 1 < w { n.at(&[ch, y, x + 1]) - v } else { 0.0 };
                let dy = if y + 1 < h { n.at(&[ch, y + 1, x]) - v } else { 0.0 };
                gx += dx * dx;
                gy += dy * dy;
            }
            *out = (gx.sqrt() + gy.sqrt()) / 2.0;
        }
    }
    let mut pooled = Vec::new();
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            pooled.push((mag[2 * i][2 * j] + mag[2 * i][2 * j + 1] + mag[2 * i + 1][2 * j] + mag[2 * i + 1][2 * j + 1]) / 4.0);
        }
    }
    let max = pooled.iter().cloned().fold(0.0, f64::max);
    pooled.iter().map(|v| v / max).collect()
}

#[test]
fn edge_mask_matches_pixel_loop() {
    let mut rng = SeededRng::new(4);
    for _ in 0..5 {
        let n = unit_map(&mut rng, 10, 14);
        let m = edge_mask(&NormalMap::new(n.clone()).unwrap()).unwrap();
        let oracle = mask_oracle(&n);
        for (a, b) in m.values.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn edge_mask_examples() {
    let flat = NormalMap::constant(8, 8, [0.0, 0.0, 1.0]);
    assert!(edge_mask(&flat).unwrap().values.data().iter().all(|&v| v == 0.0));

    let mut step = NormalMap::constant(8, 8, [0.0, 0.0, 1.0]);
    for y in 0..8 {
        for x in 4..8 {
            step.set(y, x, [1.0, 0.0, 0.0]);
        }
    }
    let m = edge_mask(&step).unwrap().values;
    for i in 0..4 {
        assert_eq!(m.at(&[i, 1]), 1.0);
        assert_eq!(m.at(&[i, 3]), 0.0);
    }

    let fixed = edge_mask_tensor(step.tensor(), MaskNormalization::Fixed(0.1)).unwrap();
    assert!(fixed.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

/// Hand expansion of the loss on one 3×4×4 pair: every sub-band coefficient
/// written out from its 2×2 block.
fn expanded_loss(pred: &Tensor, gt: &Tensor, mode: WaveletMode) -> (f64, f64) {
    let m = mask_oracle(gt);
    let (mut ll, mut hf) = (0.0, 0.0);
    for c in 0..3 {
        for i in 0..2 {
            for j in 0..2 {
                let d = |y: usize, x: usize| pred.at(&[c, 2 * i + y, 2 * j + x]) - gt.at(&[c, 2 * i + y, 2 * j + x]);
                let (a, b, cc, dd) = (d(0, 0), d(0, 1), d(1, 0), d(1, 1));
                ll += ((a + b + cc + dd) / 2.0).abs();
                let wgt = match mode {
                    WaveletMode::Edge => m[i * 2 + j],
                    WaveletMode::Interior => 1.0 - m[i * 2 + j],
                    WaveletMode::LlOnly => 0.0,
                };
                hf += wgt * (((a + b - cc - dd) / 2.0).abs() + ((a - b + cc - dd) / 2.0).abs() + ((a - b - cc + dd) / 2.0).abs());
            }
        }
    }
    (ll / 12.0, hf / 36.0)
}

#[test]
fn loss_matches_expansion_and_finite_differences() {
    let mut rng = SeededRng::new(5);
    let gt = unit_map(&mut rng, 4, 4);
    let pred = random_map(&mut rng, 3, 4, 4);
    for mode in [WaveletMode::Edge, WaveletMode::Interior, WaveletMode::LlOnly] {
        let (ll, hf, total) = wavelet_loss(&pred, &gt, mode).unwrap();
        let (oll, ohf) = expanded_loss(&pred, &gt, mode);
        assert!((ll - oll).abs() < 1e-12 && (hf - ohf).abs() < 1e-12, "{mode:?}");
        assert_eq!(total, ll + hf);

        let mask = edge_mask_tensor(&gt, MaskNormalization::PerImage).unwrap();
        let r = grad_check(
            |tape, v| Ok(wavelet_loss_var(tape, v, &gt, std::slice::from_ref(&mask), mode)?.total),
            &pred,
            1e-5,
            1e-4,
        );
        assert!(r.passed, "{mode:?} {r:?}");
    }
}

#[test]
fn loss_examples() {
    let mut rng = SeededRng::new(6);
    let gt = unit_map(&mut rng, 8, 8);
    for mode in [WaveletMode::Edge, WaveletMode::Interior, WaveletMode::LlOnly] {
        assert_eq!(wavelet_loss(&gt, &gt, mode).unwrap(), (0.0, 0.0, 0.0));
    }
    let flat = NormalMap::constant(8, 8, [0.0, 0.0, 1.0]).into_tensor();
    let pred = random_map(&mut rng, 3, 8, 8);
    assert_eq!(wavelet_loss(&pred, &flat, WaveletMode::Edge).unwrap().1, 0.0);
    assert!(wavelet_loss(&pred, &random_map(&mut rng, 3, 8, 6), WaveletMode::Edge).is_err());
    assert!(wavelet_loss(&random_map(&mut rng, 3, 7, 8), &random_map(&mut rng, 3, 7, 8), WaveletMode::Edge).is_err());
}

fn map_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=6, 1usize..=6, any::<u64>()).prop_map(|(h, w, seed)| {
        let mut rng = SeededRng::new(seed);
        (random_map(&mut rng, 3, 2 * h, 2 * w), unit_map(&mut rng, 2 * h, 2 * w))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn modes_partition_the_unmasked_hf((pred, gt) in map_pair()) {
        let (_, edge, _) = wavelet_loss(&pred, &gt, WaveletMode::Edge).unwrap();
        let (_, interior, _) = wavelet_loss(&pred, &gt, WaveletMode::Interior).unwrap();
        let diff = Tensor::from_fn(pred.shape(), |i| pred.data()[i] - gt.data()[i]);
        let hf = haar_dwt2(&diff).unwrap().hf;
        let unmasked = hf.data().iter().map(|v| v.abs()).sum::<f64>() / hf.numel() as f64;
        prop_assert!((edge + interior - unmasked).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative((pred, gt) in map_pair()) {
        for mode in [WaveletMode::Edge, WaveletMode::Interior, WaveletMode::LlOnly] {
            let (ll, hf, total) = wavelet_loss(&pred, &gt, mode).unwrap();
            prop_assert!(ll >= 0.0 && hf >= 0.0 && total >= 0.0);
        }
    }

    /// A prediction that differs from GT only in HF coefficients where the
    /// mask is zero costs nothing in edge mode.
    #[test]
    fn edge_loss_ignores_hf_off_the_mask((_, gt) in map_pair(), noise_seed in any::<u64>()) {
        let mask = edge_mask_tensor(&gt, MaskNormalization::PerImage).unwrap();
        let mut b = haar_dwt2(&gt).unwrap();
        let mut rng = SeededRng::new(noise_seed);
        let plane = mask.values.numel();
        for (k, v) in b.hf.data_mut().iter_mut().enumerate() {
            if mask.values.data()[k % plane] == 0.0 {
                *v += rng.range(-1.0, 1.0);
            }
        }
        let pred = haar_idwt2(&b).unwrap();
        let (ll, hf, _) = wavelet_loss(&pred, &gt, WaveletMode::Edge).unwrap();
        prop_assert!(ll < 1e-12 && hf < 1e-12, "{ll} {hf}");
    }
}
