//! Frozen image/normal-map codec between pixel space and latent grids.
//!
//! The default codec is a lossless space-to-depth rearrangement: every
//! `f×f×3` block becomes one latent pixel with `3f²` channels. It is linear
//! and exactly invertible, so latent-space losses keep an exact pixel-space
//! meaning and pixel-space losses backpropagate through `decode` unchanged.
//! (The pretrained autoencoder this replaces used factor 8 with 4 channels.)

use crate::autodiff::{bchw, Tape, Var};
use crate::error::{Error, Result};
use crate::normal::{NormalMap, UNIT_TOLERANCE};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::training::optim::{AdamW, AdamWConfig};

pub const DEFAULT_FACTOR: usize = 4;

/// Minimum reconstruction quality before a learned codec may be used.
pub const LEARNED_MIN_PSNR_DB: f64 = 35.0;

/// Latent representation `[c, h, w]` of an image or normal map.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    values: Tensor,
}

impl LatentGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape("latent", values.shape(), "expected [c,h,w]"));
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Space-to-depth on `planes` planes of `h×w`; channel `ch·f² + dy·f + dx`.
fn space_to_depth(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (lh, lw) = (h / f, w / f);
    let mut out = vec![0.0; x.len()];
    for ch in 0..planes {
        for dy in 0..f {
            for dx in 0..f {
                let k = (ch * f + dy) * f + dx;
                let dst = &mut out[k * lh * lw..(k + 1) * lh * lw];
                for i in 0..lh {
                    for j in 0..lw {
                        dst[i * lw + j] = x[(ch * h + i * f + dy) * w + j * f + dx];
                    }
                }
            }
        }
    }
    out
}

fn depth_to_space(z: &[f64], planes: usize, lh: usize, lw: usize, f: usize) -> Vec<f64> {
    let (h, w) = (lh * f, lw * f);
    let mut out = vec![0.0; z.len()];
    for ch in 0..planes {
        for dy in 0..f {
            for dx in 0..f {
                let k = (ch * f + dy) * f + dx;
                let src = &z[k * lh * lw..(k + 1) * lh * lw];
                for i in 0..lh {
                    for j in 0..lw {
                        out[(ch * h + i * f + dy) * w + j * f + dx] = src[i * lw + j];
                    }
                }
            }
        }
    }
    out
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::arg("factor", "must be positive"));
    }
    Ok(())
}

/// Lossless encode of a `[3,H,W]` image with values in `[−1,1]`.
pub fn encode(image: &Tensor, factor: usize) -> Result<LatentGrid> {
    check_factor(factor)?;
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("encode", image.shape(), "expected [3,H,W]"));
    };
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "encode",
            image.shape(),
            format!("H and W must be divisible by {factor}"),
        ));
    }
    let data = space_to_depth(image.data(), 3, h, w, factor);
    LatentGrid::new(Tensor::new(&[3 * factor * factor, h / factor, w / factor], data)?)
}

/// Exact inverse of [`encode`].
pub fn decode(z: &LatentGrid, factor: usize) -> Result<Tensor> {
    check_factor(factor)?;
    if z.channels() != 3 * factor * factor {
        return Err(Error::shape(
            "decode",
            z.values.shape(),
            format!("expected {} channels for factor {factor}", 3 * factor * factor),
        ));
    }
    let (lh, lw) = (z.height(), z.width());
    let data = depth_to_space(z.values.data(), 3, lh, lw, factor);
    Tensor::new(&[3, lh * factor, lw * factor], data)
}

/// Encodes a normal map, rejecting vectors off the unit sphere.
pub fn encode_normal(n: &NormalMap, factor: usize) -> Result<LatentGrid> {
    let t = n.tensor();
    let hw = n.height() * n.width();
    let d = t.data();
    for i in 0..hw {
        let len = (d[i] * d[i] + d[hw + i] * d[hw + i] + d[2 * hw + i] * d[2 * hw + i]).sqrt();
        if (len - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::arg(
                "normal map",
                format!("pixel {i} has length {len:.6}"),
            ));
        }
    }
    encode(t, factor)
}

/// Differentiable decode of `[C,h,w]` or `[B,C,h,w]` latents (`C = 3f²`).
pub fn decode_var(tape: &mut Tape, z: Var, factor: usize) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let (b, c, lh, lw) = bchw("decode", &shape)?;
    if c != 3 * factor * factor {
        return Err(Error::shape("decode", &shape, format!("expected {} channels", 3 * factor * factor)));
    }
    let per = c * lh * lw;
    let zv = tape.value(z).data();
    let mut out = Vec::with_capacity(b * per);
    for bi in 0..b {
        out.extend(depth_to_space(&zv[bi * per..(bi + 1) * per], 3, lh, lw, factor));
    }
    let mut oshape = shape.clone();
    let r = oshape.len();
    oshape[r - 3] = 3;
    oshape[r - 2] = lh * factor;
    oshape[r - 1] = lw * factor;
    let value = Tensor::new(&oshape, out)?;
    Ok(tape.custom(
        &[z],
        value,
        Box::new(move |_, _, g| {
            let mut dz = Vec::with_capacity(b * per);
            for bi in 0..b {
                dz.extend(space_to_depth(&g[bi * per..(bi + 1) * per], 3, lh * factor, lw * factor, factor));
            }
            vec![Some(dz)]
        }),
    ))
}

/// Peak signal-to-noise ratio for signals spanning `[−1,1]`.
pub fn psnr_db(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    10.0 * (4.0 / mse.max(1e-300)).log10()
}

/// Tiny convolutional autoencoder with the same latent geometry as the
/// space-to-depth codec (`log2 f` stride-2 stages, `3f²` latent channels).
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedCodec {
    factor: usize,
    params: ParamSet,
    enc: Vec<(ParamId, ParamId)>,
    dec: Vec<(ParamId, ParamId)>,
    /// Held-out reconstruction PSNR measured after training.
    pub psnr_db: f64,
}

impl LearnedCodec {
    const HIDDEN: usize = 24;

    pub fn new(factor: usize, seed: u64) -> Result<Self> {
        if !factor.is_power_of_two() || factor < 2 {
            return Err(Error::arg("factor", "learned codec needs a power of two >= 2"));
        }
        let stages = factor.trailing_zeros() as usize;
        let mut rng = SeededRng::fork(seed, 0xC0DE);
        let mut params = ParamSet::new();
        let latent = 3 * factor * factor;
        let widths: Vec<usize> = (0..=stages)
            .map(|s| match s {
                0 => 3,
                s if s == stages => latent,
                _ => Self::HIDDEN,
            })
            .collect();
        let mut conv = |params: &mut ParamSet, name: String, cin: usize, cout: usize| {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = params.push(format!("{name}.weight"), Tensor::randn(&[cout, cin, 3, 3], std, &mut rng));
            let b = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
            (w, b)
        };
        let enc = (0..stages)
            .map(|s| conv(&mut params, format!("codec.enc{s}"), widths[s], widths[s + 1]))
            .collect();
        let dec = (0..stages)
            .map(|s| conv(&mut params, format!("codec.dec{s}"), widths[stages - s], widths[stages - s - 1]))
            .collect();
        Ok(Self {
            factor,
            params,
            enc,
            dec,
            psnr_db: f64::NEG_INFINITY,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn encode_on(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.enc.iter().enumerate() {
            h = tape.conv2d(h, bound.var(w), Some(bound.var(b)), 2)?;
            if i + 1 < self.enc.len() {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    fn decode_on(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        for (i, &(w, b)) in self.dec.iter().enumerate() {
            h = tape.upsample2x(h)?;
            h = tape.conv2d(h, bound.var(w), Some(bound.var(b)), 1)?;
            if i + 1 < self.dec.len() {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    /// Fits the autoencoder to `images` (`[3,H,W]`, values in `[−1,1]`) and
    /// records the reconstruction PSNR on `holdout`.
    pub fn fit(&mut self, images: &[Tensor], holdout: &[Tensor], steps: usize, lr: f64) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::arg("images", "empty training set"));
        }
        let mut opt = AdamW::new(
            AdamWConfig {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
            self.params.tensors(),
        );
        for step in 0..steps {
            let img = &images[step % images.len()];
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, true);
            let x = tape.constant(img.clone());
            let z = self.encode_on(&mut tape, &bound, x)?;
            let y = self.decode_on(&mut tape, &bound, z)?;
            let d = tape.sub(y, x)?;
            let sq = tape.square(d);
            let loss = tape.mean(sq);
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            opt.step(self.params.tensors_mut(), &grads)?;
        }
        let eval = if holdout.is_empty() { images } else { holdout };
        let mut total = 0.0;
        for img in eval {
            let z = self.encode(img)?;
            let y = self.decode(&z)?;
            total += psnr_db(&y, img);
        }
        self.psnr_db = total / eval.len() as f64;
        Ok(self.psnr_db)
    }

    pub fn encode(&self, image: &Tensor) -> Result<LatentGrid> {
        let (_, _, h, w) = bchw("encode", image.shape())?;
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::shape("encode", image.shape(), format!("H and W must be divisible by {}", self.factor)));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let z = self.encode_on(&mut tape, &bound, x)?;
        LatentGrid::new(tape.value(z).clone())
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.values.clone());
        let y = self.decode_on(&mut tape, &bound, zv)?;
        Ok(tape.value(y).clone())
    }
}

/// Codec selection. The learned variant is only constructible once it has
/// cleared [`LEARNED_MIN_PSNR_DB`].
#[derive(Clone, Debug, PartialEq)]
pub enum Codec {
    SpaceToDepth { factor: usize },
    Learned(Box<LearnedCodec>),
}

impl Default for Codec {
    fn default() -> Self {
        Codec::SpaceToDepth {
            factor: DEFAULT_FACTOR,
        }
    }
}

impl Codec {
    pub fn learned(codec: LearnedCodec) -> Result<Self> {
        if codec.psnr_db < LEARNED_MIN_PSNR_DB {
            return Err(Error::arg(
                "codec",
                format!(
                    "learned codec PSNR {:.2} dB is below the {LEARNED_MIN_PSNR_DB} dB gate",
                    codec.psnr_db
                ),
            ));
        }
        Ok(Codec::Learned(Box::new(codec)))
    }

    pub fn factor(&self) -> usize {
        match self {
            Codec::SpaceToDepth { factor } => *factor,
            Codec::Learned(c) => c.factor,
        }
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.factor() * self.factor()
    }

    pub fn encode(&self, image: &Tensor) -> Result<LatentGrid> {
        match self {
            Codec::SpaceToDepth { factor } => encode(image, *factor),
            Codec::Learned(c) => c.encode(image),
        }
    }

    pub fn encode_normal(&self, n: &NormalMap) -> Result<LatentGrid> {
        match self {
            Codec::SpaceToDepth { factor } => encode_normal(n, *factor),
            Codec::Learned(c) => c.encode(n.tensor()),
        }
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<Tensor> {
        match self {
            Codec::SpaceToDepth { factor } => decode(z, *factor),
            Codec::Learned(c) => c.decode(z),
        }
    }

    /// Differentiable decode; the codec's own weights stay constant.
    pub fn decode_var(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match self {
            Codec::SpaceToDepth { factor } => decode_var(tape, z, *factor),
            Codec::Learned(c) => {
                let bound = c.params.bind(tape, false);
                c.decode_on(tape, &bound, z)
            }
        }
    }
}
