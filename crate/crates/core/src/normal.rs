//! Per-pixel camera-space unit normals and binary masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on `|‖n‖ − 1|` accepted by validating constructors.
pub const UNIT_TOLERANCE: f64 = 1e-3;

/// H×W grid of camera-space unit 3-vectors, stored channel-first `[3,H,W]`.
///
/// Camera convention: x right, y up, the camera looks down −z, so surfaces
/// facing the viewer have normals pointing towards +z.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    values: Tensor,
}

impl NormalMap {
    /// Wraps a `[3,H,W]` tensor, rejecting vectors off the unit sphere.
    pub fn new(values: Tensor) -> Result<Self> {
        let map = Self::unchecked(values)?;
        let (h, w) = (map.height(), map.width());
        for y in 0..h {
            for x in 0..w {
                let n = map.get(y, x);
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (len - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::arg(
                        "normal map",
                        format!("vector at ({y},{x}) has length {len:.6}"),
                    ));
                }
            }
        }
        Ok(map)
    }

    /// Projects every vector onto the unit sphere; zero vectors become (0,0,1).
    pub fn normalized(values: Tensor) -> Result<Self> {
        let mut map = Self::unchecked(values)?;
        let (h, w) = (map.height(), map.width());
        for y in 0..h {
            for x in 0..w {
                let n = map.get(y, x);
                map.set(y, x, unit_or_forward(n));
            }
        }
        Ok(map)
    }

    pub fn constant(height: usize, width: usize, n: [f64; 3]) -> Self {
        let hw = height * width;
        let values = Tensor::from_fn(&[3, height, width], |i| n[i / hw]);
        Self { values }
    }

    fn unchecked(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.shape()[0] != 3 {
            return Err(Error::shape("normal map", values.shape(), "expected [3,H,W]"));
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let d = self.values.data();
        let i = y * w + x;
        [d[i], d[h * w + i], d[2 * h * w + i]]
    }

    pub fn set(&mut self, y: usize, x: usize, n: [f64; 3]) {
        let (h, w) = (self.height(), self.width());
        let i = y * w + x;
        let d = self.values.data_mut();
        d[i] = n[0];
        d[h * w + i] = n[1];
        d[2 * h * w + i] = n[2];
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// Horizontal mirror of the vector field: columns reversed and the
    /// x-component negated.
    pub fn flip_horizontal(&self) -> Self {
        let mut values = flip_planes(&self.values);
        let hw = self.height() * self.width();
        values.data_mut()[..hw].iter_mut().for_each(|e| *e = -*e);
        Self { values }
    }
}

pub(crate) fn unit_or_forward(n: [f64; 3]) -> [f64; 3] {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 1e-12 && len.is_finite() {
        [n[0] / len, n[1] / len, n[2] / len]
    } else {
        [0.0, 0.0, 1.0]
    }
}

/// Reverses columns of every `H×W` plane of a `[..,H,W]` tensor.
pub(crate) fn flip_planes(t: &Tensor) -> Tensor {
    let w = *t.shape().last().unwrap();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape("mask", &[height, width], format!("{} values", data.len())));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }
}
