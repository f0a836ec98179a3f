//! Frozen dense patch tokenizer and the trainable linear projector.
//!
//! The tokenizer is a fixed two-layer random map: each non-overlapping
//! `p×p×3` patch is flattened, sent through a seeded semi-orthogonal
//! projection, a `tanh`, and a seeded orthogonal mixing matrix, then fixed
//! 2-D sinusoidal position features are added. Nothing in here is ever
//! updated by an optimizer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_PATCH: usize = 16;
pub const DEFAULT_D_SEM: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    Default,
    /// Half the token width of the default encoder.
    LowDim,
    /// Mean patch colour only; a deliberately weak encoder.
    PatchMean,
    /// All-zero tokens: semantic conditioning switched off.
    Off,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "low-dim" => Ok(Self::LowDim),
            "patch-mean" => Ok(Self::PatchMean),
            "off" => Ok(Self::Off),
            other => Err(Error::arg(
                "encoder kind",
                format!("unknown kind {other:?} (default | low-dim | patch-mean | off)"),
            )),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::LowDim => "low-dim",
            Self::PatchMean => "patch-mean",
            Self::Off => "off",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub patch: usize,
    /// Token width of the default encoder; `LowDim` uses half.
    pub d_sem: usize,
    pub seed: u64,
    /// Which backbone layer would supply tokens for a real pretrained
    /// encoder. The stand-in has a single output and ignores it.
    pub layer: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Default,
            patch: DEFAULT_PATCH,
            d_sem: DEFAULT_D_SEM,
            seed: 0x5E3A,
            layer: None,
        }
    }
}

impl EncoderConfig {
    /// Width of the tokens this configuration produces.
    pub fn token_dim(&self) -> usize {
        match self.kind {
            EncoderKind::LowDim => self.d_sem / 2,
            _ => self.d_sem,
        }
    }
}

/// Dense patch tokens `[N_p, d_sem]`, row-major over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTokens {
    grid: (usize, usize),
    values: Tensor,
}

impl SemanticTokens {
    pub fn new(grid: (usize, usize), values: Tensor) -> Result<Self> {
        match *values.shape() {
            [n, _] if n == grid.0 * grid.1 => Ok(Self { grid, values }),
            _ => Err(Error::shape(
                "semantic tokens",
                values.shape(),
                format!("expected [{}, d]", grid.0 * grid.1),
            )),
        }
    }

    pub fn count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    /// Patch rows and columns.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Projected conditioning `[N_p, d_unet]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticConditioning {
    values: Tensor,
}

impl SemanticConditioning {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Columns of a seeded Gaussian matrix, orthonormalized (modified Gram-Schmidt).
fn semi_orthogonal(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    assert!(cols <= rows);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    Tensor::from_fn(&[rows, cols], |i| q[i % cols][i / cols])
}

/// Fixed 2-D sinusoidal features: the first half of the width encodes the
/// patch row, the second half the column.
pub fn position_features(rows: usize, cols: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs = half / 2;
    let mut out = Tensor::zeros(&[rows * cols, dim]);
    let enc = |pos: usize, slot: &mut [f64]| {
        for k in 0..freqs {
            let omega = 1.0 / 10_000f64.powf(k as f64 / freqs.max(1) as f64);
            slot[2 * k] = (pos as f64 * omega).sin();
            slot[2 * k + 1] = (pos as f64 * omega).cos();
        }
    };
    for (t, row) in out.data_mut().chunks_mut(dim).enumerate() {
        let (r, c) = (t / cols, t % cols);
        let (a, b) = row.split_at_mut(half);
        enc(r, a);
        enc(c, b);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEncoder {
    config: EncoderConfig,
    proj: Option<Tensor>,
    mix: Option<Tensor>,
}

impl SemanticEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.patch == 0 {
            return Err(Error::arg("patch", "must be positive"));
        }
        let dim = config.token_dim();
        if dim < 4 {
            return Err(Error::arg("d_sem", format!("token width {dim} too small")));
        }
        let input = 3 * config.patch * config.patch;
        let (proj, mix) = match config.kind {
            EncoderKind::PatchMean | EncoderKind::Off => (None, None),
            _ => {
                if dim > input {
                    return Err(Error::arg("d_sem", format!("{dim} exceeds patch size {input}")));
                }
                let mut rng = SeededRng::fork(config.seed, dim as u64);
                let proj = semi_orthogonal(input, dim, &mut rng);
                let mix = semi_orthogonal(dim, dim, &mut rng);
                (Some(proj), Some(mix))
            }
        };
        Ok(Self { config, proj, mix })
    }

    /// Builds a frozen encoder of the given kind with otherwise default settings.
    pub fn stand_in(kind: EncoderKind) -> Result<Self> {
        Self::new(EncoderConfig {
            kind,
            ..Default::default()
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim()
    }

    /// Frozen weight tensors (empty for the patch-mean encoder).
    pub fn weights(&self) -> Vec<&Tensor> {
        self.proj.iter().chain(self.mix.iter()).collect()
    }

    /// Patch grid for an `H×W` image (floor semantics).
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.config.patch;
        if h < p || w < p {
            return Err(Error::arg(
                "image",
                format!("{h}x{w} is smaller than one {p}x{p} patch"),
            ));
        }
        Ok((h / p, w / p))
    }

    /// Tokens for a `[3,H,W]` image.
    pub fn tokenize(&self, image: &Tensor) -> Result<SemanticTokens> {
        let &[3, h, w] = image.shape() else {
            return Err(Error::shape("tokenize", image.shape(), "expected [3,H,W]"));
        };
        let (gh, gw) = self.grid(h, w)?;
        let p = self.config.patch;
        let dim = self.token_dim();
        if self.config.kind == EncoderKind::Off {
            return SemanticTokens::new((gh, gw), Tensor::zeros(&[gh * gw, dim]));
        }
        let x = image.data();
        let n = gh * gw;
        let mut tokens = position_features(gh, gw, dim);
        let mut patch = vec![0.0; 3 * p * p];
        for t in 0..n {
            let (r, c) = (t / gw, t % gw);
            for ch in 0..3 {
                for dy in 0..p {
                    let src = (ch * h + r * p + dy) * w + c * p;
                    patch[(ch * p + dy) * p..][..p].copy_from_slice(&x[src..src + p]);
                }
            }
            let row = &mut tokens.data_mut()[t * dim..(t + 1) * dim];
            match (&self.proj, &self.mix) {
                (Some(proj), Some(mix)) => {
                    let mut hidden = vec![0.0; dim];
                    for (i, &v) in patch.iter().enumerate() {
                        let pr = &proj.data()[i * dim..(i + 1) * dim];
                        hidden.iter_mut().zip(pr).for_each(|(hd, &q)| *hd += v * q);
                    }
                    hidden.iter_mut().for_each(|e| *e = e.tanh());
                    for (i, &hv) in hidden.iter().enumerate() {
                        let mr = &mix.data()[i * dim..(i + 1) * dim];
                        row.iter_mut().zip(mr).for_each(|(o, &m)| *o += hv * m);
                    }
                }
                _ => {
                    let area = (p * p) as f64;
                    for ch in 0..3 {
                        row[ch] += patch[ch * p * p..(ch + 1) * p * p].iter().sum::<f64>() / area;
                    }
                }
            }
        }
        SemanticTokens::new((gh, gw), tokens)
    }
}

/// `c_sem = F_sem · W_proj` on the tape. `tokens` is `[N,d]` or `[B,N,d]`.
pub fn project_var(tape: &mut Tape, tokens: Var, w_proj: Var) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    match *shape.as_slice() {
        [_, _] => tape.matmul(tokens, w_proj),
        [b, n, d] => {
            let flat = tape.reshape(tokens, &[b * n, d])?;
            let y = tape.matmul(flat, w_proj)?;
            let out = tape.shape(y)[1];
            tape.reshape(y, &[b, n, out])
        }
        _ => Err(Error::shape("project", &shape, "expected [N,d] or [B,N,d]")),
    }
}

/// Non-differentiable projection.
pub fn project(tokens: &SemanticTokens, w_proj: &Tensor) -> Result<SemanticConditioning> {
    let mut tape = Tape::new();
    let t = tape.constant(tokens.values.clone());
    let w = tape.constant(w_proj.clone());
    let c = project_var(&mut tape, t, w)?;
    Ok(SemanticConditioning {
        values: tape.value(c).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[3, h, w], -1.0, 1.0, &mut SeededRng::new(seed))
    }

    #[test]
    fn token_counts_use_floor() {
        let enc = SemanticEncoder::stand_in(EncoderKind::Default).unwrap();
        assert_eq!(enc.tokenize(&image(64, 64, 1)).unwrap().count(), 16);
        assert_eq!(enc.tokenize(&image(72, 64, 1)).unwrap().count(), 16);
        assert!(enc.tokenize(&image(8, 64, 1)).is_err());
    }

    #[test]
    fn deterministic_tokens() {
        let a = SemanticEncoder::stand_in(EncoderKind::Default).unwrap();
        let b = SemanticEncoder::stand_in(EncoderKind::Default).unwrap();
        let img = image(32, 48, 7);
        assert_eq!(a.tokenize(&img).unwrap(), b.tokenize(&img).unwrap());
    }

    #[test]
    fn kinds_and_widths() {
        assert_eq!("low-dim".parse::<EncoderKind>().unwrap(), EncoderKind::LowDim);
        assert!("dino".parse::<EncoderKind>().is_err());
        let d = SemanticEncoder::stand_in(EncoderKind::Default).unwrap();
        let l = SemanticEncoder::stand_in(EncoderKind::LowDim).unwrap();
        let img = image(32, 32, 2);
        assert_eq!(d.tokenize(&img).unwrap().dim(), DEFAULT_D_SEM);
        assert_eq!(l.tokenize(&img).unwrap().dim(), DEFAULT_D_SEM / 2);
        assert_eq!(l.tokenize(&img).unwrap().count(), 4);
        let off = SemanticEncoder::stand_in(EncoderKind::Off).unwrap();
        assert!(off.tokenize(&img).unwrap().values().data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn projection_is_semi_orthogonal() {
        let enc = SemanticEncoder::stand_in(EncoderKind::Default).unwrap();
        let p = enc.weights()[0];
        let (rows, cols) = (p.shape()[0], p.shape()[1]);
        for a in 0..cols {
            for b in 0..cols {
                let d: f64 = (0..rows).map(|r| p.at(&[r, a]) * p.at(&[r, b])).sum();
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn patch_mean_constant_image() {
        let enc = SemanticEncoder::stand_in(EncoderKind::PatchMean).unwrap();
        let img = Tensor::full(&[3, 32, 48], 0.25);
        let tok = enc.tokenize(&img).unwrap();
        let pos = position_features(2, 3, DEFAULT_D_SEM);
        for t in 0..tok.count() {
            for k in 0..tok.dim() {
                let base = if k < 3 { 0.25 } else { 0.0 };
                assert!((tok.values().at(&[t, k]) - pos.at(&[t, k]) - base).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn projector_zero_and_identity() {
        let enc = SemanticEncoder::stand_in(EncoderKind::Default).unwrap();
        let tok = enc.tokenize(&image(32, 32, 3)).unwrap();
        let zero = project(&tok, &Tensor::zeros(&[64, 64])).unwrap();
        assert!(zero.values().data().iter().all(|&e| e == 0.0));
        let id = project(&tok, &Tensor::eye(64)).unwrap();
        assert_eq!(id.values(), tok.values());
        assert!(project(&tok, &Tensor::zeros(&[32, 64])).is_err());
    }
}
