//! Masked angular-error metrics, rank aggregation and error-map rendering.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::normal::{Mask, NormalMap};
use crate::predictor::Predictor;
use crate::scenegen::io::{read_mask_png, read_normal_png, read_rgb_png};
use crate::scenegen::{Manifest, SceneSample};
use crate::semantic::SemanticEncoder;

/// Accuracy thresholds in degrees.
pub const THRESHOLDS: [f64; 5] = [5.0, 7.5, 11.25, 22.5, 30.0];

/// Per-pixel angular error in degrees; `NaN` outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ErrorMap {
    /// Finite entries, in row-major order.
    pub fn valid(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|v| !v.is_nan())
    }
}

fn unit3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        return [0.0, 0.0, 1.0];
    }
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn angular_error_deg(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    let (a, b) = (unit3(pred), unit3(gt));
    let d = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    d.acos().to_degrees()
}

pub fn angular_error_map(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<ErrorMap> {
    let (h, w) = (gt.height(), gt.width());
    if (pred.height(), pred.width()) != (h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::mismatch(
            "angular_error_map",
            &[pred.height(), pred.width()],
            &[h, w],
        ));
    }
    if mask.count() == 0 {
        return Err(Error::arg("mask", "empty evaluation mask"));
    }
    let mut values = vec![f64::NAN; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                values[y * w + x] = angular_error_deg(pred.get(y, x), gt.get(y, x));
            }
        }
    }
    Ok(ErrorMap {
        height: h,
        width: w,
        values,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    #[serde(rename = "5")]
    pub a5: f64,
    #[serde(rename = "7.5")]
    pub a7_5: f64,
    #[serde(rename = "11.25")]
    pub a11_25: f64,
    #[serde(rename = "22.5")]
    pub a22_5: f64,
    #[serde(rename = "30")]
    pub a30: f64,
}

impl Accuracies {
    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            a5: a[0],
            a7_5: a[1],
            a11_25: a[2],
            a22_5: a[3],
            a30: a[4],
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.a5, self.a7_5, self.a11_25, self.a22_5, self.a30]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_deg: f64,
    /// Percent of pixels at or below each threshold.
    pub acc: Accuracies,
    pub n_pixels: usize,
}

impl MetricsReport {
    fn from_errors(errors: impl Iterator<Item = f64>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut within = [0usize; 5];
        for e in errors {
            n += 1;
            sum += e;
            for (k, t) in THRESHOLDS.iter().enumerate() {
                if e <= *t {
                    within[k] += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::arg("mask", "no pixels to aggregate"));
        }
        Ok(Self {
            mean_deg: sum / n as f64,
            acc: Accuracies::from_array(within.map(|c| 100.0 * c as f64 / n as f64)),
            n_pixels: n,
        })
    }

    /// Accuracies are non-decreasing in the threshold and within `[0, 100]`.
    pub fn is_consistent(&self) -> bool {
        let a = self.acc.to_array();
        self.mean_deg >= 0.0
            && a.iter().all(|v| (0.0..=100.0).contains(v))
            && a.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Mean and threshold accuracies over the masked pixels of `map`.
pub fn aggregate(map: &ErrorMap, mask: &Mask) -> Result<MetricsReport> {
    if (mask.height(), mask.width()) != (map.height, map.width) {
        return Err(Error::mismatch("aggregate", &[mask.height(), mask.width()], &[map.height, map.width]));
    }
    let mut errors = Vec::with_capacity(mask.count());
    for (i, &m) in mask.data().iter().enumerate() {
        if m {
            let e = map.values[i];
            if e.is_nan() {
                return Err(Error::arg("error map", format!("pixel {i} is inside the mask but has no error")));
            }
            errors.push(e);
        }
    }
    MetricsReport::from_errors(errors.into_iter())
}

/// Pixel-weighted combination of per-sample reports.
pub fn pool(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let n: usize = reports.iter().map(|r| r.n_pixels).sum();
    if n == 0 {
        return Err(Error::arg("reports", "nothing to pool"));
    }
    let wmean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r) * r.n_pixels as f64).sum::<f64>() / n as f64;
    let acc = std::array::from_fn(|k| wmean(&|r| r.acc.to_array()[k]));
    Ok(MetricsReport {
        mean_deg: wmean(&|r| r.mean_deg),
        acc: Accuracies::from_array(acc),
        n_pixels: n,
    })
}

// ---------------------------------------------------------------------------
// Rank aggregation

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Tied entries share the mean of the positions they occupy.
    #[default]
    Fractional,
    /// Tied entries share the best position.
    Min,
    /// Ties broken by table row order.
    Ordinal,
}

impl std::str::FromStr for TiePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fractional" => Ok(Self::Fractional),
            "min" => Ok(Self::Min),
            "ordinal" => Ok(Self::Ordinal),
            other => Err(Error::arg("tie policy", format!("unknown policy {other:?} (fractional | min | ordinal)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankColumn {
    pub name: String,
    pub higher_better: bool,
}

/// Methods × metrics score table.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub columns: Vec<RankColumn>,
    /// `scores[method][column]`.
    pub scores: Vec<Vec<f64>>,
}

impl RankTable {
    pub fn new(methods: Vec<String>, columns: Vec<RankColumn>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if scores.len() != methods.len() {
            return Err(Error::arg("scores", format!("{} rows for {} methods", scores.len(), methods.len())));
        }
        for (m, row) in methods.iter().zip(&scores) {
            if row.len() != columns.len() {
                return Err(Error::arg(
                    "scores",
                    format!("{m}: {} cells for {} columns", row.len(), columns.len()),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::arg("scores", format!("{m}: missing or non-finite cell")));
            }
        }
        Ok(Self {
            methods,
            columns,
            scores,
        })
    }

    /// Parses `method,<metric> ^|v,...` CSV: `^` marks higher-better
    /// columns, `v` lower-better ones.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let mut columns = Vec::new();
        for cell in header.iter().skip(1) {
            let (name, higher_better) = if let Some(n) = cell.strip_suffix('^') {
                (n, true)
            } else if let Some(n) = cell.strip_suffix('v') {
                (n, false)
            } else {
                return Err(Error::arg("header", format!("column {cell:?} lacks a ^ or v direction marker")));
            };
            columns.push(RankColumn {
                name: name.trim().to_string(),
                higher_better,
            });
        }
        let mut methods = Vec::new();
        let mut scores = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != columns.len() + 1 {
                return Err(Error::arg(
                    "row",
                    format!("line {}: {} cells, expected {}", i + 2, rec.len(), columns.len() + 1),
                ));
            }
            methods.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| Error::arg("cell", format!("line {}: {c:?} is not a number", i + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            scores.push(row);
        }
        Self::new(methods, columns, scores)
    }

    /// Per-column ranks, `ranks[method][column]`.
    pub fn ranks(&self, policy: TiePolicy) -> Vec<Vec<f64>> {
        let m = self.methods.len();
        let mut out = vec![vec![0.0; self.columns.len()]; m];
        for (j, col) in self.columns.iter().enumerate() {
            let key = |i: usize| if col.higher_better { -self.scores[i][j] } else { self.scores[i][j] };
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
            let mut pos = 0;
            while pos < m {
                let mut end = pos + 1;
                while end < m && key(order[end]) == key(order[pos]) {
                    end += 1;
                }
                for (k, &i) in order[pos..end].iter().enumerate() {
                    out[i][j] = match policy {
                        TiePolicy::Fractional => (pos + 1 + end) as f64 / 2.0,
                        TiePolicy::Min => (pos + 1) as f64,
                        TiePolicy::Ordinal => (pos + 1 + k) as f64,
                    };
                }
                pos = end;
            }
        }
        out
    }

    /// Mean rank per method.
    pub fn avg_rank(&self, policy: TiePolicy) -> Vec<f64> {
        self.ranks(policy)
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64)
            .collect()
    }

    /// Input table plus one rank column per metric and the average rank
    /// (one decimal).
    pub fn write_ranked_csv(&self, policy: TiePolicy, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method".to_string()];
        header.extend(self.columns.iter().map(|c| format!("rank {}", c.name)));
        header.push("avg_rank".into());
        w.write_record(&header)?;
        let ranks = self.ranks(policy);
        let avg = self.avg_rank(policy);
        for (i, (m, r)) in self.methods.iter().zip(&ranks).enumerate() {
            let mut rec = vec![m.clone()];
            rec.extend(r.iter().map(|v| format!("{v}")));
            rec.push(format!("{:.1}", avg[i]));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv output>", e))
    }
}

/// `avg_rank` as a free function over a table.
pub fn avg_rank(table: &RankTable, policy: TiePolicy) -> Vec<f64> {
    table.avg_rank(policy)
}

// ---------------------------------------------------------------------------
// Error-map rendering

pub const DEFAULT_MAX_DEGREES: f64 = 60.0;
const OUTSIDE: Rgb<u8> = Rgb([128, 128, 128]);

/// Linear blue (0°) to red (`max_degrees`) colormap; grey outside the mask.
pub fn render_error_map(map: &ErrorMap, mask: &Mask, max_degrees: f64) -> RgbImage {
    RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let p = y as usize * map.width + x as usize;
        let e = map.values[p];
        if !mask.data()[p] || e.is_nan() {
            return OUTSIDE;
        }
        let t = (e / max_degrees).clamp(0.0, 1.0);
        Rgb([(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8])
    })
}

pub fn write_error_map(path: &Path, map: &ErrorMap, mask: &Mask, max_degrees: f64) -> Result<()> {
    render_error_map(map, mask, max_degrees)
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

// ---------------------------------------------------------------------------
// Dataset evaluation

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    #[default]
    Transparent,
    Foreground,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transparent" => Ok(Self::Transparent),
            "foreground" | "fg" => Ok(Self::Foreground),
            other => Err(Error::arg("mask kind", format!("unknown {other:?} (transparent | foreground)"))),
        }
    }
}

impl MaskKind {
    pub fn file_name(self) -> &'static str {
        match self {
            MaskKind::Transparent => "mask_transparent.png",
            MaskKind::Foreground => "mask.png",
        }
    }

    pub fn select(self, s: &SceneSample) -> &Mask {
        match self {
            MaskKind::Transparent => &s.mask_transparent,
            MaskKind::Foreground => &s.mask_fg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub name: String,
    pub n_pixels: usize,
    pub mean_deg: f64,
    pub acc: Accuracies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub mask_kind: MaskKind,
    pub n_samples: usize,
    pub n_pixels: usize,
    pub mean_deg: f64,
    pub acc: Accuracies,
    pub per_sample: Vec<SampleReport>,
}

impl DatasetReport {
    pub fn pooled(&self) -> MetricsReport {
        MetricsReport {
            mean_deg: self.mean_deg,
            acc: self.acc,
            n_pixels: self.n_pixels,
        }
    }
}

/// Where predicted normal maps come from.
pub enum Predictions<'a> {
    /// `<dir>/<sample>.png` or `<dir>/<sample>/pred_normal.png`.
    Dir(&'a Path),
    Model {
        predictor: &'a Predictor,
        codec: &'a Codec,
        encoder: &'a SemanticEncoder,
    },
}

/// Pools every pixel of every sample directly; samples whose mask is empty
/// are skipped and reported with zero pixels.
fn assemble(dataset: String, mask_kind: MaskKind, items: Vec<(String, ErrorMap, Mask)>) -> Result<DatasetReport> {
    let mut per_sample = Vec::with_capacity(items.len());
    let mut all = Vec::new();
    for (name, map, mask) in &items {
        if mask.count() == 0 {
            per_sample.push(SampleReport {
                name: name.clone(),
                n_pixels: 0,
                mean_deg: f64::NAN,
                acc: Accuracies::default(),
            });
            continue;
        }
        let r = aggregate(map, mask)?;
        all.extend(map.valid());
        per_sample.push(SampleReport {
            name: name.clone(),
            n_pixels: r.n_pixels,
            mean_deg: r.mean_deg,
            acc: r.acc,
        });
    }
    let pooled = MetricsReport::from_errors(all.into_iter())?;
    Ok(DatasetReport {
        dataset,
        mask_kind,
        n_samples: items.len(),
        n_pixels: pooled.n_pixels,
        mean_deg: pooled.mean_deg,
        acc: pooled.acc,
        per_sample,
    })
}

fn error_map_or_skip(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<ErrorMap> {
    if mask.count() == 0 {
        return Ok(ErrorMap {
            height: gt.height(),
            width: gt.width(),
            values: vec![f64::NAN; gt.height() * gt.width()],
        });
    }
    angular_error_map(pred, gt, mask)
}

/// Evaluates in-memory predictions against samples.
pub fn evaluate_samples(
    names: &[String],
    preds: &[NormalMap],
    samples: &[SceneSample],
    mask_kind: MaskKind,
) -> Result<DatasetReport> {
    if preds.len() != samples.len() || names.len() != samples.len() {
        return Err(Error::arg("predictions", format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let items = names
        .iter()
        .zip(preds)
        .zip(samples)
        .map(|((n, p), s)| {
            let m = mask_kind.select(s).clone();
            Ok((n.clone(), error_map_or_skip(p, &s.normal_gt, &m)?, m))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble("<memory>".into(), mask_kind, items)
}

/// `<dir>/<name>.png`, falling back to `<dir>/<name>/pred_normal.png`.
pub fn prediction_path(dir: &Path, name: &str) -> PathBuf {
    let flat = dir.join(format!("{name}.png"));
    if flat.is_file() {
        flat
    } else {
        dir.join(name).join("pred_normal.png")
    }
}

/// Evaluates every sample listed in `dataset_dir/manifest.json`.
///
/// All missing inputs are collected and reported together before any
/// metric is computed.
pub fn evaluate_dataset(preds: &Predictions, dataset_dir: &Path, mask_kind: MaskKind) -> Result<DatasetReport> {
    let manifest = Manifest::load(dataset_dir)?;
    let mut missing = Vec::new();
    for e in &manifest.samples {
        let dir = dataset_dir.join(&e.name);
        let mut need = vec![dir.join("gt_normal.png"), dir.join(mask_kind.file_name())];
        match preds {
            Predictions::Dir(p) => need.push(prediction_path(p, &e.name)),
            Predictions::Model { .. } => need.push(dir.join("input.png")),
        }
        missing.extend(need.into_iter().filter(|p| !p.is_file()));
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let mut items = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let dir = dataset_dir.join(&e.name);
        let gt = read_normal_png(&dir.join("gt_normal.png"))?;
        let mask = read_mask_png(&dir.join(mask_kind.file_name()))?;
        let pred = match preds {
            Predictions::Dir(p) => read_normal_png(&prediction_path(p, &e.name))?,
            Predictions::Model {
                predictor,
                codec,
                encoder,
            } => {
                let img = read_rgb_png(&dir.join("input.png"), |b| b as f64 / 255.0 * 2.0 - 1.0)?;
                predictor.predict_normal(codec, encoder, &img)?
            }
        };
        items.push((e.name.clone(), error_map_or_skip(&pred, &gt, &mask)?, mask));
    }
    assemble(dataset_dir.display().to_string(), mask_kind, items)
}
