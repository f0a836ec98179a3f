//! Single-head cross-attention from spatial features to semantic tokens.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Tape handles for one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `[d_l, d_k]`
    pub w_q: Var,
    /// `[d_unet, d_k]`
    pub w_k: Var,
    /// `[d_unet, d_k]`
    pub w_v: Var,
    /// `[d_k, d_l]`
    pub w_o: Var,
}

/// Output and attention weights of one block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    /// Pre-residual output `softmax(QKᵀ/√d_k)·V·W_O`, `[B,n,d_l]`.
    pub update: Var,
    /// `[B,n,N]`, rows sum to one.
    pub weights: Var,
}

fn flat_matmul(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let &[b, n, d] = tape.shape(x) else {
        return Err(Error::shape("attention", tape.shape(x), "expected [B,n,d]"));
    };
    let flat = tape.reshape(x, &[b * n, d])?;
    let y = tape.matmul(flat, w)?;
    let out = tape.shape(y)[1];
    tape.reshape(y, &[b, n, out])
}

/// `h + softmax(h W_Q (c W_K)ᵀ / √d_k) c W_V W_O` for `h: [B,n,d_l]`,
/// `c: [B,N,d_unet]`.
pub fn cross_attention_traced(
    tape: &mut Tape,
    h: Var,
    c: Var,
    w: &AttentionVars,
) -> Result<AttentionTrace> {
    let (hs, cs) = (tape.shape(h).to_vec(), tape.shape(c).to_vec());
    let (&[b, _, _], &[bc, _, _]) = (hs.as_slice(), cs.as_slice()) else {
        return Err(Error::mismatch("cross_attention", &hs, &cs));
    };
    if b != bc {
        return Err(Error::mismatch("cross_attention", &hs, &cs));
    }
    let q = flat_matmul(tape, h, w.w_q)?;
    let k = flat_matmul(tape, c, w.w_k)?;
    let v = flat_matmul(tape, c, w.w_v)?;
    let d_k = tape.shape(q)[2];
    if tape.shape(k)[2] != d_k || tape.shape(v)[2] != d_k {
        return Err(Error::mismatch("cross_attention", tape.shape(q), tape.shape(k)));
    }
    let scores = tape.bmm(q, k, true)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    let mixed = tape.bmm(weights, v, false)?;
    let update = flat_matmul(tape, mixed, w.w_o)?;
    if tape.shape(update) != hs.as_slice() {
        return Err(Error::mismatch("cross_attention output", tape.shape(update), &hs));
    }
    let output = tape.add(h, update)?;
    Ok(AttentionTrace {
        output,
        update,
        weights,
    })
}

pub fn cross_attention(tape: &mut Tape, h: Var, c: Var, w: &AttentionVars) -> Result<Var> {
    Ok(cross_attention_traced(tape, h, c, w)?.output)
}

/// Applies [`cross_attention`] to a `[B,C,H,W]` feature map.
pub fn spatial_cross_attention(tape: &mut Tape, x: Var, c: Var, w: &AttentionVars) -> Result<Var> {
    let &[b, ch, hh, ww] = tape.shape(x) else {
        return Err(Error::shape("spatial attention", tape.shape(x), "expected [B,C,H,W]"));
    };
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    let tokens = tape.reshape(t, &[b, hh * ww, ch])?;
    let out = cross_attention(tape, tokens, c, w)?;
    let grid = tape.reshape(out, &[b, hh, ww, ch])?;
    tape.permute(grid, &[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Tensor;

    fn vars(tape: &mut Tape, dl: usize, du: usize, dk: usize, rng: &mut SeededRng) -> AttentionVars {
        AttentionVars {
            w_q: tape.param(Tensor::randn(&[dl, dk], 0.5, rng)),
            w_k: tape.param(Tensor::randn(&[du, dk], 0.5, rng)),
            w_v: tape.param(Tensor::randn(&[du, dk], 0.5, rng)),
            w_o: tape.param(Tensor::randn(&[dk, dl], 0.5, rng)),
        }
    }

    #[test]
    fn single_token_returns_its_value_row() {
        let mut rng = SeededRng::new(1);
        let mut tape = Tape::new();
        let w = vars(&mut tape, 6, 4, 3, &mut rng);
        let h = tape.constant(Tensor::randn(&[1, 5, 6], 1.0, &mut rng));
        let c = tape.constant(Tensor::randn(&[1, 1, 4], 1.0, &mut rng));
        let tr = cross_attention_traced(&mut tape, h, c, &w).unwrap();
        // V·W_O of the single token, computed directly
        let (cv, wv, wo) = (tape.value(c), tape.value(w.w_v), tape.value(w.w_o));
        let vrow: Vec<f64> = (0..3).map(|j| (0..4).map(|i| cv.data()[i] * wv.at(&[i, j])).sum()).collect();
        let expect: Vec<f64> = (0..6).map(|o| (0..3).map(|j| vrow[j] * wo.at(&[j, o])).sum()).collect();
        for row in tape.value(tr.update).data().chunks(6) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_weights_leave_residual() {
        let mut rng = SeededRng::new(2);
        let mut tape = Tape::new();
        let mut w = vars(&mut tape, 4, 4, 2, &mut rng);
        w.w_v = tape.constant(Tensor::zeros(&[4, 2]));
        let hv = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let h = tape.constant(hv.clone());
        let c = tape.constant(Tensor::randn(&[2, 7, 4], 1.0, &mut rng));
        let out = cross_attention(&mut tape, h, c, &w).unwrap();
        assert_eq!(tape.value(out), &hv);
    }

    #[test]
    fn rejects_width_mismatch() {
        let mut rng = SeededRng::new(3);
        let mut tape = Tape::new();
        let w = vars(&mut tape, 4, 4, 2, &mut rng);
        let h = tape.constant(Tensor::zeros(&[1, 3, 5]));
        let c = tape.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(cross_attention(&mut tape, h, c, &w).is_err());
    }
}
