//! On-disk sample layout and dataset manifests.
//!
//! ```text
//! <out>/manifest.json
//! <out>/<sample>/input.png  input_randmat.png  input_bg.png
//!                gt_normal.png  mask.png  mask_transparent.png
//!                depth.png (16-bit)  camera.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{render, sample_seed, Camera, SceneSample, SceneSpec};
use crate::error::{Error, Result};
use crate::normal::{Mask, NormalMap};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub const SAMPLE_FILES: [&str; 8] = [
    "input.png",
    "input_randmat.png",
    "input_bg.png",
    "gt_normal.png",
    "mask.png",
    "mask_transparent.png",
    "depth.png",
    "camera.json",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub base_seed: u64,
    pub image_size: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    /// Sample names in manifest order, with the train split first.
    pub fn build(count: usize, train_fraction: f64, base_seed: u64, image_size: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::arg("train_fraction", format!("{train_fraction} outside [0,1]")));
        }
        let n_train = (count as f64 * train_fraction).round() as usize;
        let samples = (0..count)
            .map(|i| ManifestEntry {
                name: format!("{i:05}"),
                seed: sample_seed(base_seed, i),
                split: if i < n_train { Split::Train } else { Split::Test },
            })
            .collect();
        Ok(Self {
            format_version: DATASET_FORMAT_VERSION,
            base_seed,
            image_size,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn spec(&self, entry: &ManifestEntry) -> SceneSpec {
        SceneSpec::random(entry.seed, self.image_size, self.image_size)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `round((n + 1)/2 · 255)` per channel.
pub fn encode_normal_component(n: f64) -> u8 {
    to_u8((n + 1.0) / 2.0)
}

pub fn decode_normal_component(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

fn save_png<P, C>(path: &Path, img: ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes a `[3,H,W]` tensor through `f` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, t: &Tensor, f: impl Fn(f64) -> u8) -> Result<()> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::shape("write_rgb_png", t.shape(), "expected [3,H,W]"));
    };
    let d = t.data();
    let hw = h * w;
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([f(d[p]), f(d[hw + p]), f(d[2 * hw + p])])
    });
    save_png(path, img)
}

pub fn write_mask_png(path: &Path, m: &Mask) -> Result<()> {
    let img = ImageBuffer::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([if m.get(y as usize, x as usize) { 255u8 } else { 0 }])
    });
    save_png(path, img)
}

pub fn write_normal_png(path: &Path, n: &NormalMap) -> Result<()> {
    write_rgb_png(path, n.tensor(), encode_normal_component)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads an 8-bit RGB PNG as `[3,H,W]`, mapping bytes through `f`.
pub fn read_rgb_png(path: &Path, f: impl Fn(u8) -> f64) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * hw + p] = f(px[c]);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Raw decoded normal components, without renormalization.
pub fn read_normal_png_raw(path: &Path) -> Result<Tensor> {
    read_rgb_png(path, decode_normal_component)
}

pub fn read_normal_png(path: &Path) -> Result<NormalMap> {
    NormalMap::normalized(read_normal_png_raw(path)?)
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(h, w, img.pixels().map(|p| p[0] > 127).collect())
}

pub fn write_sample(dir: &Path, s: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rgb_png(&dir.join("input.png"), &s.rgb, to_u8)?;
    write_rgb_png(&dir.join("input_randmat.png"), &s.rgb_randomized_material, to_u8)?;
    write_rgb_png(&dir.join("input_bg.png"), &s.rgb_background_only, to_u8)?;
    write_normal_png(&dir.join("gt_normal.png"), &s.normal_gt)?;
    write_mask_png(&dir.join("mask.png"), &s.mask_fg)?;
    write_mask_png(&dir.join("mask_transparent.png"), &s.mask_transparent)?;
    let (w, h) = (s.camera.width, s.camera.height);
    let depth = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = s.depth[y as usize * w + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    save_png(&dir.join("depth.png"), depth)?;
    let cam = dir.join("camera.json");
    fs::write(&cam, serde_json::to_string_pretty(&s.camera).expect("camera serializes"))
        .map_err(|e| Error::io(&cam, e))
}

/// Files of `SAMPLE_FILES` absent from `dir`.
pub fn missing_files(dir: &Path) -> Vec<PathBuf> {
    SAMPLE_FILES
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| !p.is_file())
        .collect()
}

/// Loads a sample written by [`write_sample`]. Normals are renormalized
/// after 8-bit quantization.
pub fn load_sample(dir: &Path) -> Result<SceneSample> {
    let missing = missing_files(dir);
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let cam_path = dir.join("camera.json");
    let text = fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
    let camera: Camera = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: cam_path,
        source: e,
    })?;
    let depth_img = open(&dir.join("depth.png"))?.to_luma16();
    Ok(SceneSample {
        rgb: read_rgb_png(&dir.join("input.png"), |b| b as f64 / 255.0)?,
        rgb_randomized_material: read_rgb_png(&dir.join("input_randmat.png"), |b| b as f64 / 255.0)?,
        rgb_background_only: read_rgb_png(&dir.join("input_bg.png"), |b| b as f64 / 255.0)?,
        normal_gt: read_normal_png(&dir.join("gt_normal.png"))?,
        depth: depth_img.pixels().map(|p| p[0] as f64 / 65535.0).collect(),
        mask_fg: read_mask_png(&dir.join("mask.png"))?,
        mask_transparent: read_mask_png(&dir.join("mask_transparent.png"))?,
        camera,
    })
}

/// Renders every manifest entry into `out_dir/<name>/` and writes the manifest.
pub fn generate_dataset(
    count: usize,
    train_fraction: f64,
    out_dir: &Path,
    base_seed: u64,
    image_size: usize,
) -> Result<Manifest> {
    let manifest = Manifest::build(count, train_fraction, base_seed, image_size)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for entry in &manifest.samples {
        let sample = render(&manifest.spec(entry))?;
        write_sample(&out_dir.join(&entry.name), &sample)?;
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Loads every sample of one split.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<SceneSample>> {
    manifest.split(split).map(|e| load_sample(&dir.join(&e.name))).collect()
}
