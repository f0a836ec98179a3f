//! Procedural scenes of analytic primitives with exact camera-space normals.
//!
//! Camera at the origin looking down −z, y up, vertical field of view 50°.
//! Each sample is rendered three times from one geometry: standard
//! materials, re-drawn transparent materials, and background only.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::{Mask, NormalMap};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use io::{generate_dataset, load_sample, load_split, write_sample, Manifest, ManifestEntry, Split};

pub const FOV_Y_DEG: f64 = 50.0;
/// Backdrop distance; depth is normalized by it.
pub const FAR: f64 = 10.0;

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn unit(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

fn light() -> V3 {
    unit([-0.4, 0.6, 0.7])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fov_y_deg: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(width: usize, height: usize) -> Self {
        let f = (height as f64 / 2.0) / (FOV_Y_DEG.to_radians() / 2.0).tan();
        Self {
            width,
            height,
            fov_y_deg: FOV_Y_DEG,
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            far: FAR,
        }
    }

    /// Unit ray direction through image point `(u, v)` (pixel centres sit at
    /// half-integers).
    pub fn ray(&self, u: f64, v: f64) -> V3 {
        unit([(u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0])
    }

    /// Image coordinates of a camera-space point in front of the camera.
    pub fn project(&self, p: V3) -> Option<(f64, f64)> {
        (p[2] < 0.0).then(|| (self.cx + self.fx * p[0] / -p[2], self.cy - self.fy * p[1] / -p[2]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: V3, radius: f64 },
    /// Axis along camera-space y, capped at `center.y ± half_height`.
    Cylinder { center: V3, radius: f64, half_height: f64 },
    Cuboid { center: V3, half: V3 },
    /// Infinite plane; `normal` must face the camera.
    Plane { point: V3, normal: V3 },
}

impl Shape {
    fn center(&self) -> V3 {
        match self {
            Shape::Sphere { center, .. } | Shape::Cylinder { center, .. } | Shape::Cuboid { center, .. } => *center,
            Shape::Plane { point, .. } => *point,
        }
    }

    /// Nearest front-facing hit `(t, normal)` for a ray from the origin.
    fn intersect(&self, d: V3) -> Option<(f64, V3)> {
        match *self {
            Shape::Sphere { center, radius } => {
                let b = dot(d, center);
                let disc = b * b - dot(center, center) + radius * radius;
                if disc <= 0.0 {
                    return None;
                }
                let t = b - disc.sqrt();
                (t > 0.0).then(|| (t, scale(sub(scale(d, t), center), 1.0 / radius)))
            }
            Shape::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let mut best: Option<(f64, V3)> = None;
                let a = d[0] * d[0] + d[2] * d[2];
                if a > 0.0 {
                    let b = d[0] * center[0] + d[2] * center[2];
                    let c = center[0] * center[0] + center[2] * center[2] - radius * radius;
                    let disc = b * b - a * c;
                    if disc > 0.0 {
                        let t = (b - disc.sqrt()) / a;
                        let y = t * d[1];
                        if t > 0.0 && (y - center[1]).abs() <= half_height {
                            let n = [(t * d[0] - center[0]) / radius, 0.0, (t * d[2] - center[2]) / radius];
                            best = Some((t, n));
                        }
                    }
                }
                for (cap_y, ny) in [(center[1] + half_height, 1.0), (center[1] - half_height, -1.0)] {
                    if d[1] * ny >= 0.0 {
                        continue;
                    }
                    let t = cap_y / d[1];
                    let (x, z) = (t * d[0] - center[0], t * d[2] - center[2]);
                    if t > 0.0 && x * x + z * z <= radius * radius && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, [0.0, ny, 0.0]));
                    }
                }
                best
            }
            Shape::Cuboid { center, half } => {
                let (mut t_near, mut t_far, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
                for k in 0..3 {
                    let (lo, hi) = (center[k] - half[k], center[k] + half[k]);
                    if d[k] == 0.0 {
                        if 0.0 < lo || 0.0 > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = (lo / d[k], hi / d[k]);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis = k;
                    }
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || t_near <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = -d[axis].signum();
                Some((t_near, n))
            }
            Shape::Plane { point, normal } => {
                let dn = dot(d, normal);
                if dn >= 0.0 {
                    return None;
                }
                let t = dot(point, normal) / dn;
                (t > 0.0).then_some((t, normal))
            }
        }
    }
}

/// Transparent-material parameters: the pixel shows the background, tinted,
/// plus a rim term that grows as the surface turns away from the viewer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glass {
    pub tint: V3,
    pub rim_color: V3,
    pub rim_strength: f64,
    pub rim_power: f64,
}

impl Glass {
    fn draw(rng: &mut SeededRng) -> Self {
        let tint = [rng.range(0.6, 0.9), rng.range(0.6, 0.9), rng.range(0.6, 0.9)];
        let g = rng.range(0.75, 1.0);
        Self {
            tint,
            rim_color: [g, g, rng.range(0.8, 1.0)],
            rim_strength: rng.range(0.6, 0.95),
            rim_power: rng.range(1.5, 3.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Appearance {
    Opaque { albedo: V3 },
    Transparent(Glass),
    /// Transparent, with parameters drawn from `seed`.
    Randomized { seed: u64 },
}

impl Appearance {
    fn is_transparent(&self) -> bool {
        !matches!(self, Appearance::Opaque { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub appearance: Appearance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Object>,
    /// Optional support surface (rendered as background).
    pub ground: Option<Shape>,
    pub background_seed: u64,
}

/// Render of one scene with geometry and masks shared across the triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3,H,W]` in `[0,1]`.
    pub rgb: Tensor,
    pub rgb_randomized_material: Tensor,
    pub rgb_background_only: Tensor,
    pub normal_gt: NormalMap,
    /// Camera-space depth `−z / far`, row-major `H×W`.
    pub depth: Vec<f64>,
    pub mask_fg: Mask,
    pub mask_transparent: Mask,
    pub camera: Camera,
}

impl SceneSample {
    /// `rgb` rescaled to `[−1,1]`.
    pub fn input(&self) -> Tensor {
        self.rgb.map(|v| 2.0 * v - 1.0)
    }
}

/// Smooth seeded value noise in `[0,1]`, two octaves.
fn value_noise(seed: u64, u: f64, v: f64, channel: usize) -> f64 {
    fn lattice(seed: u64, x: i64, y: i64, c: usize) -> f64 {
        let mut h = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        h ^= (c as u64 + 1).wrapping_mul(0x1656_67B1_9E37_79F9);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut total = 0.0;
    let mut amp = 0.55;
    let mut norm = 0.0;
    let mut cell = 20.0;
    for octave in 0..2 {
        let (x, y) = (u / cell, v / cell);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (smooth(x - x0), smooth(y - y0));
        let s = seed.wrapping_add(octave * 7919);
        let (xi, yi) = (x0 as i64, y0 as i64);
        let a = lattice(s, xi, yi, channel);
        let b = lattice(s, xi + 1, yi, channel);
        let c = lattice(s, xi, yi + 1, channel);
        let d = lattice(s, xi + 1, yi + 1, channel);
        total += amp * ((a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy);
        norm += amp;
        amp *= 0.5;
        cell /= 2.0;
    }
    total / norm
}

fn background_color(seed: u64, u: f64, v: f64) -> V3 {
    std::array::from_fn(|c| 0.2 + 0.6 * value_noise(seed, u, v, c))
}

impl SceneSpec {
    /// A random scene: 1–3 objects, at least one transparent, optional ground.
    pub fn random(seed: u64, width: usize, height: usize) -> Self {
        let mut rng = SeededRng::fork(seed, 0x5CE4E);
        let camera = Camera::new(width, height);
        let n_objects = 1 + rng.below(3);
        let mut objects: Vec<Object> = Vec::with_capacity(n_objects);
        let mut attempts = 0;
        while objects.len() < n_objects && attempts < 200 {
            attempts += 1;
            let z = -rng.range(3.8, 5.5);
            let half_h = -z * (FOV_Y_DEG.to_radians() / 2.0).tan();
            let half_w = half_h * width as f64 / height as f64;
            let center = [rng.range(-0.55, 0.55) * half_w, rng.range(-0.5, 0.5) * half_h, z];
            let size = rng.range(0.6, 1.15);
            let shape = match rng.below(3) {
                0 => Shape::Sphere { center, radius: size },
                1 => Shape::Cylinder {
                    center,
                    radius: size * rng.range(0.5, 0.85),
                    half_height: size * rng.range(0.8, 1.4),
                },
                _ => Shape::Cuboid {
                    center,
                    half: [size * rng.range(0.5, 0.9), size * rng.range(0.5, 0.9), size * rng.range(0.5, 0.9)],
                },
            };
            let clear = objects.iter().all(|o| {
                let c = o.shape.center();
                let dd = sub(c, center);
                dot(dd, dd).sqrt() > 1.6 * size
            });
            if !clear || camera.project(center).is_none() {
                continue;
            }
            let appearance = if objects.is_empty() || rng.bernoulli(0.7) {
                if rng.bernoulli(0.5) {
                    Appearance::Transparent(Glass::draw(&mut rng))
                } else {
                    Appearance::Randomized { seed: rng.next_u64() }
                }
            } else {
                let base = rng.range(0.3, 0.9);
                Appearance::Opaque {
                    albedo: [base, rng.range(0.2, 0.9), rng.range(0.2, 0.9)],
                }
            };
            objects.push(Object { shape, appearance });
        }
        let ground = rng.bernoulli(0.6).then(|| {
            let tilt = rng.range(0.05, 0.2);
            Shape::Plane {
                point: [0.0, -rng.range(2.3, 3.0), 0.0],
                normal: unit([0.0, 1.0, tilt]),
            }
        });
        Self {
            seed,
            width,
            height,
            objects,
            ground,
            background_seed: rng.next_u64(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) {
            return Err(Error::arg("width/height", format!("{}x{} must be positive and even", self.width, self.height)));
        }
        if self.objects.is_empty() {
            return Err(Error::arg("objects", "at least one primitive is required"));
        }
        let camera = Camera::new(self.width, self.height);
        for (i, o) in self.objects.iter().enumerate() {
            let inside = camera
                .project(o.shape.center())
                .is_some_and(|(u, v)| (0.0..=self.width as f64).contains(&u) && (0.0..=self.height as f64).contains(&v));
            if !inside {
                return Err(Error::arg(format!("objects[{i}].center"), "outside the camera frustum"));
            }
            let ok = match &o.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Cylinder { radius, half_height, .. } => *radius > 0.0 && *half_height > 0.0,
                Shape::Cuboid { half, .. } => half.iter().all(|&h| h > 0.0),
                Shape::Plane { .. } => false,
            };
            if !ok {
                return Err(Error::arg(format!("objects[{i}].shape"), "non-positive size or plane used as object"));
            }
            for (j, p) in self.objects[..i].iter().enumerate() {
                if p.shape.center() == o.shape.center() {
                    return Err(Error::arg(format!("objects[{i}].center"), format!("coincides with objects[{j}]")));
                }
            }
        }
        if let Some(Shape::Plane { point, normal }) = &self.ground {
            if (dot(*normal, *normal) - 1.0).abs() > 1e-9 || dot(*point, *normal) >= 0.0 {
                return Err(Error::arg("ground", "normal must be unit and the plane must face the camera"));
            }
        } else if self.ground.is_some() {
            return Err(Error::arg("ground", "must be a plane"));
        }
        Ok(())
    }
}

struct Hit {
    t: f64,
    normal: V3,
    object: Option<usize>,
    ground: bool,
}

fn trace(spec: &SceneSpec, d: V3, with_objects: bool) -> Hit {
    let mut best = Hit {
        t: FAR / -d[2],
        normal: [0.0, 0.0, 1.0],
        object: None,
        ground: false,
    };
    if let Some((t, n)) = spec.ground.as_ref().and_then(|g| g.intersect(d)) {
        if t < best.t {
            best = Hit {
                t,
                normal: n,
                object: None,
                ground: true,
            };
        }
    }
    if with_objects {
        for (i, o) in spec.objects.iter().enumerate() {
            if let Some((t, n)) = o.shape.intersect(d) {
                if t < best.t {
                    best = Hit {
                        t,
                        normal: n,
                        object: Some(i),
                        ground: false,
                    };
                }
            }
        }
    }
    best
}

/// Normal at image point `(u, v)` (any real coordinates).
pub fn normal_at(spec: &SceneSpec, u: f64, v: f64) -> V3 {
    let camera = Camera::new(spec.width, spec.height);
    trace(spec, camera.ray(u, v), true).normal
}

fn glass_for(app: &Appearance, spec_seed: u64, index: usize, randomized: bool) -> Option<Glass> {
    match app {
        Appearance::Opaque { .. } => None,
        Appearance::Transparent(g) if !randomized => Some(*g),
        Appearance::Randomized { seed } if !randomized => Some(Glass::draw(&mut SeededRng::fork(*seed, 1))),
        _ => Some(Glass::draw(&mut SeededRng::fork(spec_seed ^ 0xA11CE, index as u64))),
    }
}

pub fn render(spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let camera = Camera::new(w, h);
    let hw = w * h;
    let mut rgb = vec![0.0; 3 * hw];
    let mut rand_rgb = vec![0.0; 3 * hw];
    let mut bg_rgb = vec![0.0; 3 * hw];
    let mut normals = vec![0.0; 3 * hw];
    let mut depth = vec![0.0; hw];
    let mut fg = vec![false; hw];
    let mut transparent = vec![false; hw];
    let glass: Vec<[Option<Glass>; 2]> = spec
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| [false, true].map(|r| glass_for(&o.appearance, spec.seed, i, r)))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = camera.ray(u, v);
            let p = y * w + x;
            let back = trace(spec, d, false);
            let tex = background_color(spec.background_seed, u, v);
            let bg: V3 = if back.ground {
                let shade = 0.45 + 0.55 * dot(back.normal, light()).max(0.0);
                std::array::from_fn(|c| tex[c] * shade)
            } else {
                tex
            };
            let hit = trace(spec, d, true);
            let view = scale(d, -1.0);
            let (c_std, c_rand) = match hit.object {
                None => (bg, bg),
                Some(i) => {
                    fg[p] = true;
                    match &spec.objects[i].appearance {
                        app if !app.is_transparent() => {
                            let Appearance::Opaque { albedo } = app else { unreachable!() };
                            let shade = 0.25 + 0.75 * dot(hit.normal, light()).max(0.0);
                            let c = std::array::from_fn(|k| albedo[k] * shade);
                            (c, c)
                        }
                        _ => {
                            transparent[p] = true;
                            let facing = dot(hit.normal, view).clamp(0.0, 1.0);
                            let shade = |g: &Glass| -> V3 {
                                let rim = g.rim_strength * (1.0 - facing).powf(g.rim_power);
                                std::array::from_fn(|k| (1.0 - rim) * bg[k] * g.tint[k] + rim * g.rim_color[k])
                            };
                            let [a, b] = &glass[i];
                            (shade(a.as_ref().expect("glass")), shade(b.as_ref().expect("glass")))
                        }
                    }
                }
            };
            for c in 0..3 {
                rgb[c * hw + p] = c_std[c].clamp(0.0, 1.0);
                rand_rgb[c * hw + p] = c_rand[c].clamp(0.0, 1.0);
                bg_rgb[c * hw + p] = bg[c].clamp(0.0, 1.0);
                normals[c * hw + p] = hit.normal[c];
            }
            depth[p] = (hit.t * -d[2] / FAR).clamp(0.0, 1.0);
        }
    }
    let normal_gt = NormalMap::new(Tensor::new(&[3, h, w], normals)?)?;
    Ok(SceneSample {
        rgb: Tensor::new(&[3, h, w], rgb)?,
        rgb_randomized_material: Tensor::new(&[3, h, w], rand_rgb)?,
        rgb_background_only: Tensor::new(&[3, h, w], bg_rgb)?,
        normal_gt,
        depth,
        mask_fg: Mask::new(h, w, fg)?,
        mask_transparent: Mask::new(h, w, transparent)?,
        camera,
    })
}

/// Checks one rendered sample against the generator's guarantees: unit
/// normals (to 1e-9), camera-facing normals, `mask_transparent ⊆ mask_fg`,
/// and renders that differ from the background only on the foreground (and
/// between materials only on transparent pixels). Returns one message per
/// broken guarantee.
pub fn integrity_violations(s: &SceneSample) -> Vec<String> {
    let mut out = Vec::new();
    let (h, w) = (s.normal_gt.height(), s.normal_gt.width());
    let hw = h * w;
    let mut non_unit = 0;
    let mut back_facing = 0;
    for y in 0..h {
        for x in 0..w {
            let n = s.normal_gt.get(y, x);
            if (dot(n, n).sqrt() - 1.0).abs() > 1e-9 {
                non_unit += 1;
            }
            if dot(n, s.camera.ray(x as f64 + 0.5, y as f64 + 0.5)) >= 0.0 {
                back_facing += 1;
            }
        }
    }
    if non_unit > 0 {
        out.push(format!("{non_unit} non-unit normals"));
    }
    if back_facing > 0 {
        out.push(format!("{back_facing} normals facing away from the camera"));
    }
    if !s.mask_transparent.is_subset_of(&s.mask_fg) {
        out.push("mask_transparent is not contained in mask_fg".into());
    }
    let differs_outside = |a: &Tensor, b: &Tensor, m: &Mask| {
        (0..hw).any(|p| !m.data()[p] && (0..3).any(|c| a.data()[c * hw + p] != b.data()[c * hw + p]))
    };
    if differs_outside(&s.rgb, &s.rgb_randomized_material, &s.mask_transparent) {
        out.push("material re-draw changed non-transparent pixels".into());
    }
    if differs_outside(&s.rgb, &s.rgb_background_only, &s.mask_fg) {
        out.push("background-only render differs off the foreground".into());
    }
    if s.depth.len() != hw || s.depth.iter().any(|d| !(0.0..=1.0).contains(d)) {
        out.push("depth outside [0,1] or wrong size".into());
    }
    out
}

/// Per-sample seed derived from a dataset seed and sample index.
pub fn sample_seed(base_seed: u64, index: usize) -> u64 {
    SeededRng::fork(base_seed, index as u64).next_u64()
}

/// Renders `count` random scenes in memory.
pub fn generate_samples(count: usize, base_seed: u64, size: usize) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| render(&SceneSpec::random(sample_seed(base_seed, i), size, size)))
        .collect()
}

/// Normals reconstructed from the depth map by central differences
/// (interior pixels only; borders are `None`).
pub fn normals_from_depth(sample: &SceneSample) -> Vec<Option<V3>> {
    let cam = &sample.camera;
    let (w, h) = (cam.width, cam.height);
    let point = |x: usize, y: usize| -> V3 {
        let z = sample.depth[y * w + x] * cam.far;
        let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
        [(u - cam.cx) / cam.fx * z, -(v - cam.cy) / cam.fy * z, -z]
    };
    let mut out = vec![None; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let dx = sub(point(x + 1, y), point(x - 1, y));
            let dy = sub(point(x, y - 1), point(x, y + 1));
            let n = [
                dx[1] * dy[2] - dx[2] * dy[1],
                dx[2] * dy[0] - dx[0] * dy[2],
                dx[0] * dy[1] - dx[1] * dy[0],
            ];
            let len = dot(n, n).sqrt();
            if len > 0.0 {
                out[y * w + x] = Some(scale(n, 1.0 / len));
            }
        }
    }
    out
}
