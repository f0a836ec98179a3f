//! Differentiable operations and their backward rules.

use super::{gemm, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits a `[C,H,W]` or `[B,C,H,W]` shape into `(B, C, H, W)`.
pub(crate) fn bchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(op, shape, "expected [C,H,W] or [B,C,H,W]")),
    }
}

fn with_spatial(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    let r = out.len();
    out[r - 3] = c;
    out[r - 2] = h;
    out[r - 1] = w;
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const KSIZE: usize = 3;

fn conv_out(extent: usize, stride: usize) -> usize {
    (extent + 2 - KSIZE) / stride + 1
}

/// Unfolds one `[C,H,W]` sample into `[C·9, Ho·Wo]` patch columns (padding 1).
fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize, cols: &mut [f64]) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let npix = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = &mut cols[((ci * KSIZE + ky) * KSIZE + kx) * npix..][..npix];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, stride: usize, dx: &mut [f64]) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let npix = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = &cols[((ci * KSIZE + ky) * KSIZE + kx) * npix..][..npix];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(x);
        self.push(value, rg, op)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_values(a, b, |x, y| x + y);
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_values(a, b, |x, y| x - y);
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_values(a, b, |x, y| x * y);
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.unary(x, v, Op::Scale(x, factor))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.unary(x, v, Op::Square(x))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.unary(x, v, Op::Abs(x))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        self.unary(x, v, Op::Silu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.unary(x, v, Op::Mean(x))
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::mismatch("matmul", sa, sb));
        };
        if k != k2 {
            return Err(Error::mismatch("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    /// Batched product: `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when
    /// `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[ba, m, k], &[bb, r1, r2]) = (sa, sb) else {
            return Err(Error::mismatch("bmm", sa, sb));
        };
        let (kb, n) = if transpose_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || k != kb {
            return Err(Error::mismatch("bmm", sa, sb));
        }
        let bstride = if transpose_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; ba * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                1.0,
                &va[i * m * k..],
                (k, 1),
                &vb[i * k * n..],
                bstride,
                0.0,
                &mut out[i * m * n..],
                (n, 1),
            );
        }
        let v = Tensor::new(&[ba, m, n], out)?;
        Ok(self.binary(a, b, v, Op::Bmm { a, b, transpose_b }))
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = *t.shape().last().expect("rank >= 1");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        let v = Tensor::new(t.shape(), out).expect("same shape");
        self.unary(x, v, Op::SoftmaxRows(x))
    }

    /// 3×3 convolution, padding 1, stride 1 or 2. `x` is `[C,H,W]` or
    /// `[B,C,H,W]`; `w` is `[O,C,3,3]`; optional `bias` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::arg("stride", format!("{stride} unsupported (1 or 2)")));
        }
        let (b, c, h, wd) = bchw("conv2d", self.shape(x))?;
        let ws = self.shape(w);
        let &[o, wc, 3, 3] = ws else {
            return Err(Error::shape("conv2d", ws, "kernel must be [O,C,3,3]"));
        };
        if wc != c {
            return Err(Error::mismatch("conv2d", self.shape(x), ws));
        }
        if h == 0 || wd == 0 {
            return Err(Error::shape("conv2d", self.shape(x), "empty spatial extent"));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::mismatch("conv2d bias", self.shape(bv), &[o]));
            }
        }
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let (npix, ck) = (ho * wo, c * KSIZE * KSIZE);
        let mut cols = vec![0.0; ck * npix];
        let mut out = vec![0.0; b * o * npix];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..b {
            im2col(&xv[bi * c * h * wd..], c, h, wd, stride, &mut cols);
            gemm(
                o,
                ck,
                npix,
                1.0,
                wv,
                (ck, 1),
                &cols,
                (npix, 1),
                0.0,
                &mut out[bi * o * npix..],
                (npix, 1),
            );
        }
        if let Some(bv) = bias {
            let bias_v = self.value(bv).data();
            for plane in out.chunks_mut(npix).enumerate() {
                let add = bias_v[plane.0 % o];
                plane.1.iter_mut().for_each(|e| *e += add);
            }
        }
        let shape = with_spatial(self.shape(x), o, ho, wo);
        let v = Tensor::new(&shape, out)?;
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || bias.is_some_and(|bv| self.requires_grad(bv));
        Ok(self.push(v, rg, Op::Conv2d { x, w, bias, stride }))
    }

    /// Group normalization over `[C,H,W]` or `[B,C,H,W]` with per-channel
    /// affine `gamma`, `beta` of shape `[C]`.
    pub fn groupnorm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = bchw("groupnorm", self.shape(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::arg(
                "groups",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::mismatch("groupnorm affine", self.shape(gamma), &[c]));
        }
        let gsize = (c / groups) * h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(b * groups);
        let mut rstds = Vec::with_capacity(b * groups);
        for (gi, chunk) in xv.chunks(gsize).enumerate() {
            let mean = chunk.iter().sum::<f64>() / gsize as f64;
            let var = chunk.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / gsize as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let dst = &mut out[gi * gsize..(gi + 1) * gsize];
            let c0 = (gi % groups) * (c / groups);
            for (j, (d, &e)) in dst.iter_mut().zip(chunk).enumerate() {
                let ch = c0 + j / (h * w);
                *d = gv[ch] * (e - mean) * rstd + bv[ch];
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            v,
            rg,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Adds a per-channel vector to a feature map. `x` is `[C,H,W]` or
    /// `[B,C,H,W]`; `v` is `[C]`, `[1,C]` (shared across the batch) or `[B,C]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (b, c, h, w) = bchw("add_channel", self.shape(x))?;
        let vs = self.shape(v);
        let per_sample = match *vs {
            [vc] | [1, vc] if vc == c => false,
            [vb, vc] if vb == b && vc == c => true,
            _ => return Err(Error::mismatch("add_channel", self.shape(x), vs)),
        };
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for (pi, plane) in out.chunks_mut(h * w).enumerate() {
            let (bi, ci) = (pi / c, pi % c);
            let add = if per_sample { vv[bi * c + ci] } else { vv[ci] };
            plane.iter_mut().for_each(|e| *e += add);
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.binary(x, v, t, Op::AddChannel { x, v }))
    }

    /// `[N,D] + [D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        let (&[_, d], &[bd]) = (xs, bs) else {
            return Err(Error::mismatch("add_row_bias", xs, bs));
        };
        if d != bd {
            return Err(Error::mismatch("add_row_bias", xs, bs));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(bv).for_each(|(e, &a)| *e += a);
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.binary(x, b, t, Op::AddRowBias { x, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.unary(x, t, Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::arg("axes", format!("{axes:?} is not a permutation of rank {}", shape.len())));
        }
        let out = permute_data(self.value(x).data(), &shape, axes);
        let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let t = Tensor::new(&new_shape, out)?;
        Ok(self.unary(
            x,
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (_, c, h, w) = bchw("upsample2x", self.shape(x))?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; xv.len() * 4];
        for (pi, plane) in xv.chunks(h * w).enumerate() {
            let dst = &mut out[pi * h2 * w2..(pi + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&with_spatial(self.shape(x), c, h2, w2), out)?;
        Ok(self.unary(x, t, Op::Upsample2x(x)))
    }

    /// Channel-axis concatenation of two maps with equal batch and spatial extents.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = bchw("concat_channels", self.shape(a))?;
        let (bb, cb, hb, wb) = bchw("concat_channels", self.shape(b))?;
        if (ba, ha, wa) != (bb, hb, wb) || self.shape(a).len() != self.shape(b).len() {
            return Err(Error::mismatch("concat_channels", self.shape(a), self.shape(b)));
        }
        let hw = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for bi in 0..ba {
            out.extend_from_slice(&av[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&bv[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let t = Tensor::new(&with_spatial(self.shape(a), ca + cb, ha, wa), out)?;
        Ok(self.binary(a, b, t, Op::ConcatChannels(a, b)))
    }

    /// Channels `start..end` of a `[C,H,W]` or `[B,C,H,W]` map.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (b, c, h, w) = bchw("slice_channels", self.shape(x))?;
        if start >= end || end > c {
            return Err(Error::arg("channels", format!("{start}..{end} out of 0..{c}")));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * (end - start) * hw);
        for bi in 0..b {
            out.extend_from_slice(&xv[(bi * c + start) * hw..(bi * c + end) * hw]);
        }
        let t = Tensor::new(&with_spatial(self.shape(x), end - start, h, w), out)?;
        Ok(self.unary(x, t, Op::SliceChannels { x, start }))
    }

    /// `x · w + b` for `x: [N,Din]`, `w: [Din,Dout]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub(super) fn backward_op(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|e| -e).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut res = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    res.push((*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()));
                }
                if self.requires_grad(*b) {
                    res.push((*b, g.iter().zip(va).map(|(x, y)| x * y).collect()));
                }
                res
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|e| e * f).collect())],
            Op::Square(x) => {
                let xv = self.value(*x).data();
                vec![(*x, g.iter().zip(xv).map(|(d, e)| 2.0 * d * e).collect())]
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let sg = |e: f64| {
                    if e > 0.0 {
                        1.0
                    } else if e < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                vec![(*x, g.iter().zip(xv).map(|(d, &e)| d * sg(e)).collect())]
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(d, &e)| {
                        let s = sigmoid(e);
                        d * (s + e * s * (1.0 - s))
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut res = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, (n, 1), self.value(*b).data(), (1, n), 0.0, &mut da, (k, 1));
                    res.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(*a).data(), (1, k), g, (n, 1), 0.0, &mut db, (n, 1));
                    res.push((*b, db));
                }
                res
            }
            Op::Bmm { a, b, transpose_b } => self.bmm_backward(*a, *b, *transpose_b, g),
            Op::SoftmaxRows(x) => {
                let cols = *out.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((dr, yr), gr) in dx
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, d)| y * d).sum();
                    for ((o, y), d) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = y * (d - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Conv2d { x, w, bias, stride } => self.conv_backward(*x, *w, *bias, *stride, g),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => self.groupnorm_backward(*x, *gamma, *beta, *groups, mean, rstd, g),
            Op::AddChannel { x, v } => {
                let (b, c, h, w) = bchw("add_channel", self.shape(*x)).unwrap();
                let per_sample = self.value(*v).numel() == b * c && b > 1;
                let mut dv = vec![0.0; self.value(*v).numel()];
                for (pi, plane) in g.chunks(h * w).enumerate() {
                    let idx = if per_sample { pi } else { pi % c };
                    dv[idx] += plane.iter().sum::<f64>();
                }
                vec![(*x, g.to_vec()), (*v, dv)]
            }
            Op::AddRowBias { x, b } => {
                let d = self.shape(*b)[0];
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, e)| *a += e);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, permute_data(g, out.shape(), &inverse))]
            }
            Op::Upsample2x(x) => {
                let (_, _, h, w) = bchw("upsample2x", self.shape(*x)).unwrap();
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (pi, plane) in g.chunks(h2 * w2).enumerate() {
                    let dst = &mut dx[pi * h * w..(pi + 1) * h * w];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += plane[y * w2 + xx];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::ConcatChannels(a, b) => {
                let (bn, ca, h, w) = bchw("concat", self.shape(*a)).unwrap();
                let cb = self.shape(*b)[self.shape(*b).len() - 3];
                let hw = h * w;
                let mut da = Vec::with_capacity(bn * ca * hw);
                let mut db = Vec::with_capacity(bn * cb * hw);
                for bi in 0..bn {
                    let base = bi * (ca + cb) * hw;
                    da.extend_from_slice(&g[base..base + ca * hw]);
                    db.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::SliceChannels { x, start } => {
                let (b, c, h, w) = bchw("slice", self.shape(*x)).unwrap();
                let width = out.shape()[out.rank() - 3];
                let hw = h * w;
                let mut dx = vec![0.0; b * c * hw];
                for bi in 0..b {
                    dx[(bi * c + start) * hw..(bi * c + start + width) * hw]
                        .copy_from_slice(&g[bi * width * hw..(bi + 1) * width * hw]);
                }
                vec![(*x, dx)]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                backward(&vals, out, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &v)| gi.map(|gi| (v, gi)))
                    .collect()
            }
        }
    }

    fn bmm_backward(&self, a: Var, b: Var, transpose_b: bool, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let &[bn, m, k] = self.shape(a) else { unreachable!() };
        let sb = self.shape(b);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut res = Vec::with_capacity(2);
        if self.requires_grad(a) {
            // dA = dC · B'ᵀ where B' is the effective [k,n] right operand
            let bt = if transpose_b { (k, 1) } else { (1, n) };
            let mut da = vec![0.0; bn * m * k];
            for i in 0..bn {
                gemm(m, n, k, 1.0, &g[i * m * n..], (n, 1), &vb[i * k * n..], bt, 0.0, &mut da[i * m * k..], (k, 1));
            }
            res.push((a, da));
        }
        if self.requires_grad(b) {
            let mut db = vec![0.0; bn * k * n];
            for i in 0..bn {
                if transpose_b {
                    // db [n,k] = dCᵀ · A
                    gemm(n, m, k, 1.0, &g[i * m * n..], (1, n), &va[i * m * k..], (k, 1), 0.0, &mut db[i * k * n..], (k, 1));
                } else {
                    gemm(k, m, n, 1.0, &va[i * m * k..], (1, k), &g[i * m * n..], (n, 1), 0.0, &mut db[i * k * n..], (n, 1));
                }
            }
            res.push((b, db));
        }
        res
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (b, c, h, wd) = bchw("conv2d", self.shape(x)).unwrap();
        let o = self.shape(w)[0];
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let (npix, ck) = (ho * wo, c * KSIZE * KSIZE);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut res = Vec::with_capacity(3);
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut cols = vec![0.0; ck * npix];
        let mut dw = if need_w { vec![0.0; o * ck] } else { vec![] };
        let mut dx = if need_x { vec![0.0; xv.len()] } else { vec![] };
        for bi in 0..b {
            let gb = &g[bi * o * npix..(bi + 1) * o * npix];
            if need_w {
                im2col(&xv[bi * c * h * wd..], c, h, wd, stride, &mut cols);
                gemm(o, npix, ck, 1.0, gb, (npix, 1), &cols, (1, npix), 1.0, &mut dw, (ck, 1));
            }
            if need_x {
                gemm(ck, o, npix, 1.0, wv, (1, ck), gb, (npix, 1), 0.0, &mut cols, (npix, 1));
                col2im(&cols, c, h, wd, stride, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
            }
        }
        if need_x {
            res.push((x, dx));
        }
        if need_w {
            res.push((w, dw));
        }
        if let Some(bv) = bias {
            if self.requires_grad(bv) {
                let mut db = vec![0.0; o];
                for (pi, plane) in g.chunks(npix).enumerate() {
                    db[pi % o] += plane.iter().sum::<f64>();
                }
                res.push((bv, db));
            }
        }
        res
    }

    #[allow(clippy::too_many_arguments)]
    fn groupnorm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[f64],
        rstd: &[f64],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (_, c, h, w) = bchw("groupnorm", self.shape(x)).unwrap();
        let cg = c / groups;
        let gsize = cg * h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let mut dx = vec![0.0; xv.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for gi in 0..mean.len() {
            let (mu, rs) = (mean[gi], rstd[gi]);
            let c0 = (gi % groups) * cg;
            let xs = &xv[gi * gsize..(gi + 1) * gsize];
            let gs = &g[gi * gsize..(gi + 1) * gsize];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for (j, (&e, &d)) in xs.iter().zip(gs).enumerate() {
                let ch = c0 + j / (h * w);
                let xhat = (e - mu) * rs;
                dgamma[ch] += d * xhat;
                dbeta[ch] += d;
                let dxhat = d * gv[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            let n = gsize as f64;
            let (m1, m2) = (sum_dxhat / n, sum_dxhat_xhat / n);
            let dst = &mut dx[gi * gsize..(gi + 1) * gsize];
            for (j, ((o, &e), &d)) in dst.iter_mut().zip(xs).zip(gs).enumerate() {
                let ch = c0 + j / (h * w);
                let xhat = (e - mu) * rs;
                *o = rs * (d * gv[ch] - m1 - xhat * m2);
            }
        }
        vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
    }
}

/// Row-major permutation: output axis `i` is input axis `axes[i]`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::eye(2));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
        let a = tape.constant(t(&[1, 1], &[2.0]));
        let b = tape.constant(t(&[1, 1], &[7.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[14.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn conv_zero_kernel_and_identity_center() {
        let mut rng = SeededRng::new(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 3, 3], 1.0, &mut rng));
        let zero = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = tape.conv2d(x, zero, None, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&e| e == 0.0));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 1, 1], 1.0);
        let k = tape.constant(k);
        let y = tape.conv2d(x, k, None, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_rejects_unsupported_stride() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, k, None, 3).is_err());
    }

    #[test]
    fn conv_stride_two_output_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 7, 8]));
        let k = tape.constant(Tensor::zeros(&[5, 1, 3, 3]));
        let y = tape.conv2d(x, k, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 4, 4]);
    }

    #[test]
    fn softmax_constant_and_large_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y).data();
        for e in &v[..3] {
            assert!((e - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-15 && v[4] < 1e-300 && v[4] >= 0.0);
        assert!(v.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn groupnorm_constant_input_and_zero_gamma() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 3, 3], 2.5));
        let ones = tape.constant(Tensor::full(&[4], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[4]));
        let y = tape.groupnorm(x, 2, ones, zeros, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&e| e == 0.0));

        let mut rng = SeededRng::new(1);
        let x = tape.constant(Tensor::randn(&[4, 3, 3], 1.0, &mut rng));
        let beta = tape.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = tape.groupnorm(x, 2, zeros, beta, 1e-5).unwrap();
        for (j, &e) in tape.value(y).data().iter().enumerate() {
            assert_eq!(e, [0.1, 0.2, 0.3, 0.4][j / 9]);
        }
        assert!(tape.groupnorm(x, 3, ones, zeros, 1e-5).is_err());
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 50.0]));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        assert_eq!(tape.value(y).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn upsample_and_concat_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let u = tape.upsample2x(x).unwrap();
        assert_eq!(tape.shape(u), &[1, 2, 4, 4]);
        assert_eq!(tape.value(u).at(&[0, 1, 3, 2]), tape.value(x).at(&[0, 1, 1, 1]));
        let c = tape.concat_channels(x, x).unwrap();
        assert_eq!(tape.shape(c), &[1, 4, 2, 2]);
        let s = tape.slice_channels(c, 2, 4).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(x).data());
    }
}
