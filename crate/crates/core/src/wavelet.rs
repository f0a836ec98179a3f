//! One-level orthonormal 2-D Haar transform, ground-truth edge masks, and the
//! edge-aware wavelet loss.
//!
//! For each 2×2 block `[a b; c d]` the analysis step produces
//!
//! ```text
//! LL = (a + b + c + d) / 2      LH = (a + b − c − d) / 2
//! HL = (a − b + c − d) / 2      HH = (a − b − c + d) / 2
//! ```
//!
//! The 4×4 block matrix is symmetric and orthogonal, so synthesis applies the
//! same matrix and `‖x‖² = ‖LL‖² + ‖HF‖²` holds exactly up to rounding.

use crate::autodiff::{bchw, Tape, Var};
use crate::error::{Error, Result};
use crate::normal::NormalMap;
use crate::tensor::Tensor;

/// `{LL, HF}` where `HF = [LH; HL; HH]` stacked along channels.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub ll: Tensor,
    pub hf: Tensor,
}

/// Forward transform of one plane set. `data` holds `planes` planes of
/// `h×w`; the output holds `4·planes` planes of `h/2×w/2`, ordered
/// `[LL(planes); LH(planes); HL(planes); HH(planes)]`.
fn analysis(data: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let hw2 = h2 * w2;
    let mut out = vec![0.0; 4 * planes * hw2];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = src[(2 * i) * w + 2 * j];
                let b = src[(2 * i) * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                let o = i * w2 + j;
                out[p * hw2 + o] = 0.5 * (a + b + c + d);
                out[(planes + p) * hw2 + o] = 0.5 * (a + b - c - d);
                out[(2 * planes + p) * hw2 + o] = 0.5 * (a - b + c - d);
                out[(3 * planes + p) * hw2 + o] = 0.5 * (a - b - c + d);
            }
        }
    }
    out
}

/// Inverse (and adjoint) of [`analysis`].
fn synthesis(bands: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let hw2 = h2 * w2;
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let o = i * w2 + j;
                let ll = bands[p * hw2 + o];
                let lh = bands[(planes + p) * hw2 + o];
                let hl = bands[(2 * planes + p) * hw2 + o];
                let hh = bands[(3 * planes + p) * hw2 + o];
                dst[(2 * i) * w + 2 * j] = 0.5 * (ll + lh + hl + hh);
                dst[(2 * i) * w + 2 * j + 1] = 0.5 * (ll + lh - hl - hh);
                dst[(2 * i + 1) * w + 2 * j] = 0.5 * (ll - lh + hl - hh);
                dst[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (ll - lh - hl + hh);
            }
        }
    }
    out
}

fn check_even(op: &'static str, shape: &[usize], h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::shape(op, shape, "spatial extents must be even"));
    }
    Ok(())
}

/// Analysis of a `[C,H,W]` map.
pub fn haar_dwt2(x: &Tensor) -> Result<WaveletBands> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape("haar_dwt2", x.shape(), "expected [C,H,W]"));
    };
    check_even("haar_dwt2", x.shape(), h, w)?;
    let mut out = analysis(x.data(), c, h, w);
    let hf = out.split_off(c * (h / 2) * (w / 2));
    Ok(WaveletBands {
        ll: Tensor::new(&[c, h / 2, w / 2], out)?,
        hf: Tensor::new(&[3 * c, h / 2, w / 2], hf)?,
    })
}

/// Synthesis; exact inverse of [`haar_dwt2`].
pub fn haar_idwt2(bands: &WaveletBands) -> Result<Tensor> {
    let (ls, hs) = (bands.ll.shape(), bands.hf.shape());
    let (&[c, h2, w2], &[c3, h2b, w2b]) = (ls, hs) else {
        return Err(Error::mismatch("haar_idwt2", ls, hs));
    };
    if c3 != 3 * c || h2 != h2b || w2 != w2b {
        return Err(Error::mismatch("haar_idwt2", ls, hs));
    }
    let mut all = bands.ll.data().to_vec();
    all.extend_from_slice(bands.hf.data());
    Tensor::new(&[c, 2 * h2, 2 * w2], synthesis(&all, c, 2 * h2, 2 * w2))
}

/// Differentiable analysis on the tape. `[C,H,W]` or `[B,C,H,W]` in,
/// `[.., 4C, H/2, W/2]` out with channel blocks `[LL; LH; HL; HH]`.
pub fn haar_dwt2_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, c, h, w) = bchw("haar_dwt2", &shape)?;
    check_even("haar_dwt2", &shape, h, w)?;
    let per = c * h * w;
    let xv = tape.value(x).data();
    let mut out = Vec::with_capacity(b * per);
    for bi in 0..b {
        out.extend(analysis(&xv[bi * per..(bi + 1) * per], c, h, w));
    }
    let mut oshape = shape.clone();
    let r = oshape.len();
    oshape[r - 3] = 4 * c;
    oshape[r - 2] = h / 2;
    oshape[r - 1] = w / 2;
    let value = Tensor::new(&oshape, out)?;
    Ok(tape.custom(
        &[x],
        value,
        Box::new(move |_, _, g| {
            let mut dx = Vec::with_capacity(b * per);
            for bi in 0..b {
                dx.extend(synthesis(&g[bi * per..(bi + 1) * per], c, h, w));
            }
            vec![Some(dx)]
        }),
    ))
}

/// How the raw gradient magnitude is scaled into `[0,1]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum MaskNormalization {
    /// Divide by this image's maximum.
    #[default]
    PerImage,
    /// Divide by a fixed (e.g. dataset-wide) maximum, then clamp to 1.
    Fixed(f64),
}

/// Edge weights at sub-band resolution, `[H/2, W/2]`, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMask {
    pub values: Tensor,
}

/// Unnormalized `½(‖∇x N‖₂ + ‖∇y N‖₂)` at full resolution, `[H,W]`.
///
/// Forward differences; the last row/column repeat their neighbour (edge
/// replication), so the difference there is zero.
pub fn edge_magnitude(n: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = n.shape() else {
        return Err(Error::shape("edge_mask", n.shape(), "expected [C,H,W]"));
    };
    let d = n.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xn, yn) = ((x + 1).min(w - 1), (y + 1).min(h - 1));
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let p = &d[ch * h * w..(ch + 1) * h * w];
                let v = p[y * w + x];
                gx += (p[y * w + xn] - v).powi(2);
                gy += (p[yn * w + x] - v).powi(2);
            }
            out[y * w + x] = 0.5 * (gx.sqrt() + gy.sqrt());
        }
    }
    Tensor::new(&[h, w], out)
}

/// Edge mask of a `[C,H,W]` ground-truth map: magnitude, 2×2 mean pool,
/// then scaling into `[0,1]` (all zeros when the maximum is below 1e-12).
pub fn edge_mask_tensor(n: &Tensor, norm: MaskNormalization) -> Result<EdgeMask> {
    let &[_, h, w] = n.shape() else {
        return Err(Error::shape("edge_mask", n.shape(), "expected [C,H,W]"));
    };
    check_even("edge_mask", n.shape(), h, w)?;
    let mag = edge_magnitude(n)?;
    let (h2, w2) = (h / 2, w / 2);
    let m = mag.data();
    let pooled = Tensor::from_fn(&[h2, w2], |k| {
        let (i, j) = (k / w2, k % w2);
        0.25 * (m[2 * i * w + 2 * j]
            + m[2 * i * w + 2 * j + 1]
            + m[(2 * i + 1) * w + 2 * j]
            + m[(2 * i + 1) * w + 2 * j + 1])
    });
    let scale = match norm {
        MaskNormalization::PerImage => pooled.data().iter().copied().fold(0.0, f64::max),
        MaskNormalization::Fixed(s) => s,
    };
    let values = if scale < 1e-12 {
        Tensor::zeros(&[h2, w2])
    } else {
        pooled.map(|e| (e / scale).min(1.0))
    };
    Ok(EdgeMask { values })
}

pub fn edge_mask(n_gt: &NormalMap) -> Result<EdgeMask> {
    edge_mask_tensor(n_gt.tensor(), MaskNormalization::PerImage)
}

/// Which high-frequency coefficients the loss supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WaveletMode {
    /// HF weighted by `M_edge`.
    Edge,
    /// HF weighted by `1 − M_edge`.
    Interior,
    /// No HF term.
    LlOnly,
}

/// Loss terms as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct WaveletLossVars {
    pub ll: Var,
    pub hf: Var,
    pub total: Var,
}

/// `L_LL = mean|ΔLL|`, `L_HF = mean|W ⊙ ΔHF|`, `L_wavelet = L_LL + L_HF`.
///
/// `pred` is `[3,H,W]` or `[B,3,H,W]`; `gt` has the same shape and is
/// treated as a constant. `masks` holds one `[H/2,W/2]` edge mask per sample.
pub fn wavelet_loss_var(
    tape: &mut Tape,
    pred: Var,
    gt: &Tensor,
    masks: &[EdgeMask],
    mode: WaveletMode,
) -> Result<WaveletLossVars> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::mismatch("wavelet_loss", tape.shape(pred), gt.shape()));
    }
    let (b, c, h, w) = bchw("wavelet_loss", gt.shape())?;
    check_even("wavelet_loss", gt.shape(), h, w)?;
    if masks.len() != b {
        return Err(Error::arg("masks", format!("{} masks for batch of {b}", masks.len())));
    }
    let gt_var = tape.constant(gt.clone());
    let diff = tape.sub(pred, gt_var)?;
    let bands = haar_dwt2_var(tape, diff)?;
    let ll = tape.slice_channels(bands, 0, c)?;
    let ll_abs = tape.abs(ll);
    let l_ll = tape.mean(ll_abs);
    let l_hf = match mode {
        WaveletMode::LlOnly => tape.constant(Tensor::scalar(0.0)),
        WaveletMode::Edge | WaveletMode::Interior => {
            let hf = tape.slice_channels(bands, c, 4 * c)?;
            let (h2, w2) = (h / 2, w / 2);
            let mut weights = Vec::with_capacity(b * 3 * c * h2 * w2);
            for m in masks {
                if m.values.shape() != [h2, w2] {
                    return Err(Error::mismatch("wavelet_loss mask", m.values.shape(), &[h2, w2]));
                }
                for _ in 0..3 * c {
                    weights.extend(m.values.data().iter().map(|&e| match mode {
                        WaveletMode::Edge => e,
                        _ => 1.0 - e,
                    }));
                }
            }
            let wt = tape.constant(Tensor::new(tape.shape(hf), weights)?);
            let hf_abs = tape.abs(hf);
            let weighted = tape.mul(wt, hf_abs)?;
            tape.mean(weighted)
        }
    };
    let total = tape.add(l_ll, l_hf)?;
    Ok(WaveletLossVars {
        ll: l_ll,
        hf: l_hf,
        total,
    })
}

/// `(L_LL, L_HF, L_wavelet)` for a prediction/ground-truth pair of `[3,H,W]`
/// maps, with the edge mask derived from `gt`.
pub fn wavelet_loss(pred: &Tensor, gt: &Tensor, mode: WaveletMode) -> Result<(f64, f64, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::mismatch("wavelet_loss", pred.shape(), gt.shape()));
    }
    let mask = edge_mask_tensor(gt, MaskNormalization::PerImage)?;
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = wavelet_loss_var(&mut tape, p, gt, &[mask], mode)?;
    Ok((
        tape.value(l.ll).item(),
        tape.value(l.hf).item(),
        tape.value(l.total).item(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn constant_image_has_only_ll() {
        let x = Tensor::full(&[3, 4, 6], 0.7);
        let b = haar_dwt2(&x).unwrap();
        assert!(b.ll.data().iter().all(|&e| (e - 1.4).abs() < 1e-15));
        assert!(b.hf.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn single_block_formula() {
        let x = Tensor::new(&[1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = haar_dwt2(&x).unwrap();
        assert_eq!(b.ll.data(), &[1.0]);
        assert_eq!(b.hf.data(), &[-1.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(haar_dwt2(&Tensor::zeros(&[3, 5, 4])).is_err());
        assert!(edge_mask_tensor(&Tensor::zeros(&[3, 4, 3]), MaskNormalization::PerImage).is_err());
    }

    #[test]
    fn idwt_zero_bands_and_shape_errors() {
        let b = WaveletBands {
            ll: Tensor::zeros(&[3, 2, 2]),
            hf: Tensor::zeros(&[9, 2, 2]),
        };
        assert!(haar_idwt2(&b).unwrap().data().iter().all(|&e| e == 0.0));
        let bad = WaveletBands {
            ll: Tensor::zeros(&[3, 2, 2]),
            hf: Tensor::zeros(&[6, 2, 2]),
        };
        assert!(haar_idwt2(&bad).is_err());
    }

    #[test]
    fn constant_map_gives_zero_mask() {
        let n = NormalMap::constant(8, 8, [0.0, 0.0, 1.0]);
        let m = edge_mask(&n).unwrap();
        assert!(m.values.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn step_edge_mask_peaks_on_edge_column() {
        let mut n = NormalMap::constant(8, 8, [0.0, 0.0, 1.0]);
        for y in 0..8 {
            for x in 4..8 {
                n.set(y, x, [1.0, 0.0, 0.0]);
            }
        }
        let m = edge_mask(&n).unwrap();
        // the forward difference fires at column 3, i.e. sub-band column 1
        for i in 0..4 {
            assert_eq!(m.values.at(&[i, 0]), 0.0);
            assert_eq!(m.values.at(&[i, 3]), 0.0);
            assert!(m.values.at(&[i, 1]) > 0.0);
        }
        for i in 0..4 {
            assert_eq!(m.values.at(&[i, 1]), 1.0);
        }
        let mag = edge_magnitude(n.tensor()).unwrap();
        let peak = mag.data().iter().copied().fold(0.0, f64::max);
        assert_eq!(mag.at(&[0, 3]), peak);
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
        for mode in [WaveletMode::Edge, WaveletMode::Interior, WaveletMode::LlOnly] {
            assert_eq!(wavelet_loss(&x, &x, mode).unwrap(), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn constant_gt_kills_edge_hf() {
        let mut rng = SeededRng::new(5);
        let gt = NormalMap::constant(8, 8, [0.0, 0.0, 1.0]).into_tensor();
        let pred = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
        let (ll, hf, total) = wavelet_loss(&pred, &gt, WaveletMode::Edge).unwrap();
        assert_eq!(hf, 0.0);
        assert!(ll > 0.0 && total == ll);
    }
}
