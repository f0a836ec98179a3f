use std::path::{Path, PathBuf};

use clap::Args;
use glassnorm::eval::{angular_error_map, evaluate_dataset, prediction_path, write_error_map, MaskKind, Predictions, DEFAULT_MAX_DEGREES};
use glassnorm::scenegen::io::{read_mask_png, read_normal_png, read_rgb_png};
use glassnorm::scenegen::Manifest;

use super::{check_out_dir, create_out_dir, load_model, print_json, require_dataset, require_file, Model};
use crate::{usage, CmdResult, Global};

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset directory with ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Directory of predicted normal PNGs (`<sample>.png`).
    #[arg(long, conflicts_with = "checkpoint")]
    pred: Option<PathBuf>,
    /// Predict with this checkpoint instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// transparent | foreground
    #[arg(long, default_value = "transparent")]
    mask: String,
    /// Write `report.json` (and error maps) here.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Also render per-sample error maps into the output directory.
    #[arg(long, requires = "out")]
    error_maps: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_DEGREES)]
    max_degrees: f64,
}

fn write_maps(dir: &Path, data: &Path, preds: &Predictions, mask_kind: MaskKind, max_deg: f64) -> anyhow::Result<()> {
    let manifest = Manifest::load(data)?;
    for e in &manifest.samples {
        let sdir = data.join(&e.name);
        let gt = read_normal_png(&sdir.join("gt_normal.png"))?;
        let mask = read_mask_png(&sdir.join(mask_kind.file_name()))?;
        if mask.count() == 0 {
            continue;
        }
        let pred = match preds {
            Predictions::Dir(p) => read_normal_png(&prediction_path(p, &e.name))?,
            Predictions::Model {
                predictor,
                codec,
                encoder,
            } => {
                let img = read_rgb_png(&sdir.join("input.png"), |b| b as f64 / 255.0 * 2.0 - 1.0)?;
                predictor.predict_normal(codec, encoder, &img)?
            }
        };
        let map = angular_error_map(&pred, &gt, &mask)?;
        write_error_map(&dir.join(format!("{}_error.png", e.name)), &map, &mask, max_deg)?;
    }
    Ok(())
}

pub fn run(_g: &Global, a: EvalArgs) -> CmdResult {
    let mask_kind: MaskKind = a.mask.parse().map_err(|e: glassnorm::Error| usage(e.to_string()))?;
    require_dataset(&a.data)?;
    if let Some(o) = &a.out {
        check_out_dir(o)?;
    }
    if !(a.max_degrees > 0.0) {
        return Err(usage("max_degrees must be positive"));
    }
    let model: Option<Model> = match (&a.pred, &a.checkpoint) {
        (Some(p), None) => {
            if !p.is_dir() {
                return Err(usage(format!("{}: not a directory", p.display())));
            }
            None
        }
        (None, Some(c)) => {
            require_file(c)?;
            Some(load_model(c)?)
        }
        _ => return Err(usage("give exactly one of --pred or --checkpoint")),
    };
    let preds = match (&model, &a.pred) {
        (Some(m), _) => Predictions::Model {
            predictor: &m.predictor,
            codec: &m.codec,
            encoder: &m.encoder,
        },
        (None, Some(p)) => Predictions::Dir(p),
        (None, None) => unreachable!("checked above"),
    };
    let report = evaluate_dataset(&preds, &a.data, mask_kind)?;
    if let Some(o) = &a.out {
        create_out_dir(o)?;
        let path = o.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        if a.error_maps {
            write_maps(o, &a.data, &preds, mask_kind, a.max_degrees)?;
        }
    }
    print_json(&serde_json::json!({
        "dataset": report.dataset,
        "mask": report.mask_kind,
        "n_samples": report.n_samples,
        "n_pixels": report.n_pixels,
        "mean_deg": report.mean_deg,
        "acc": report.acc,
    }));
    Ok(())
}
