use serde::{Deserialize, Serialize};

use super::data::Batch;
use super::{LossMode, LossWeights};
use crate::autodiff::{Tape, Var};
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::predictor::{Predictor, Task};
use crate::tensor::Tensor;
use crate::wavelet::wavelet_loss_var;

/// Scalar values of every term of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_normal: f64,
    pub l_rgb: f64,
    pub l_ll: f64,
    pub l_hf: f64,
    pub l_wavelet: f64,
    pub l_total: f64,
}

impl LossReport {
    /// `|L_total − (L_normal + λ_rgb L_rgb + λ_wv L_wavelet)|`.
    pub fn identity_residual(&self, w: &LossWeights) -> f64 {
        (self.l_total - (self.l_normal + w.lambda_rgb * self.l_rgb + w.lambda_wv * self.l_wavelet)).abs()
    }

    pub fn is_finite(&self) -> bool {
        [self.l_normal, self.l_rgb, self.l_ll, self.l_hf, self.l_wavelet, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean squared latent reconstruction errors `(L_normal, L_rgb)` on the tape.
pub fn latent_losses_var(tape: &mut Tape, zn_hat: Var, zn: Var, zrgb_hat: Var, zrgb: Var) -> Result<(Var, Var)> {
    Ok((mse(tape, zn_hat, zn)?, mse(tape, zrgb_hat, zrgb)?))
}

/// Mean squared latent reconstruction errors `(L_normal, L_rgb)`.
pub fn latent_losses(zn_hat: &Tensor, zn: &Tensor, zrgb_hat: &Tensor, zrgb: &Tensor) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let [a, b, c, d] = [zn_hat, zn, zrgb_hat, zrgb].map(|t| tape.constant(t.clone()));
    let (ln, lr) = latent_losses_var(&mut tape, a, b, c, d)?;
    Ok((tape.value(ln).item(), tape.value(lr).item()))
}

/// Combines predicted latents into `L_total` and its report. The wavelet
/// term decodes `zn_hat` through the codec, so it backpropagates into the
/// prediction.
pub fn assemble_loss(
    tape: &mut Tape,
    zn_hat: Var,
    zrgb_hat: Var,
    batch: &Batch,
    codec: &Codec,
    mode: LossMode,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let zn = tape.constant(batch.z_normal.clone());
    let zrgb = tape.constant(batch.z_rgb.clone());
    let (l_normal, l_rgb) = latent_losses_var(tape, zn_hat, zn, zrgb_hat, zrgb)?;
    let scaled_rgb = tape.scale(l_rgb, weights.lambda_rgb);
    let mut total = tape.add(l_normal, scaled_rgb)?;
    let mut report = LossReport {
        l_normal: tape.value(l_normal).item(),
        l_rgb: tape.value(l_rgb).item(),
        ..Default::default()
    };
    if let Some(wmode) = mode.wavelet() {
        let n_pred = codec.decode_var(tape, zn_hat)?;
        let wl = wavelet_loss_var(tape, n_pred, &batch.normals, &batch.edge_masks, wmode)?;
        let scaled = tape.scale(wl.total, weights.lambda_wv);
        total = tape.add(total, scaled)?;
        report.l_ll = tape.value(wl.ll).item();
        report.l_hf = tape.value(wl.hf).item();
        report.l_wavelet = tape.value(wl.total).item();
    }
    report.l_total = tape.value(total).item();
    Ok((total, report))
}

/// Runs both task branches of the predictor on `batch` and assembles the
/// objective.
pub fn total_loss(
    tape: &mut Tape,
    predictor: &Predictor,
    bound: &Bound,
    batch: &Batch,
    codec: &Codec,
    mode: LossMode,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    if batch.z_rgb.shape()[1] != codec.latent_channels() {
        return Err(Error::shape("total_loss", batch.z_rgb.shape(), "latent channels differ from codec"));
    }
    let tokens = tape.constant(batch.tokens.clone());
    let c_sem = predictor.condition(tape, bound, tokens)?;
    let z = tape.constant(batch.z_rgb.clone());
    let zn_hat = predictor.forward(tape, bound, z, c_sem, Task::Normal)?;
    let zrgb_hat = predictor.forward(tape, bound, z, c_sem, Task::Rgb)?;
    assemble_loss(tape, zn_hat, zrgb_hat, batch, codec, mode, weights)
}
