use std::path::PathBuf;

use clap::Args;
use glassnorm::scenegen::io::{read_rgb_png, write_normal_png};
use glassnorm::scenegen::Manifest;

use super::{check_out_dir, create_out_dir, load_model, require_dataset, require_file};
use crate::{usage, CmdResult, Global};

#[derive(Args)]
pub struct InferArgs {
    /// Input RGB image.
    image: Option<PathBuf>,
    /// Predict every sample of this dataset instead of one image.
    #[arg(long, conflicts_with = "image")]
    dataset: Option<PathBuf>,
    /// Output PNG (single image) or directory of `<sample>.png` (dataset).
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

fn to_input(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

pub fn run(_g: &Global, a: InferArgs) -> CmdResult {
    require_file(&a.checkpoint)?;
    match (&a.image, &a.dataset) {
        (Some(img), None) => {
            require_file(img)?;
            if a.out.is_dir() {
                return Err(usage(format!("{}: is a directory", a.out.display())));
            }
            let model = load_model(&a.checkpoint)?;
            let image = read_rgb_png(img, to_input)?;
            let n = model.predictor.predict_normal(&model.codec, &model.encoder, &image)?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_out_dir(parent)?;
            }
            write_normal_png(&a.out, &n)?;
        }
        (None, Some(ds)) => {
            require_dataset(ds)?;
            check_out_dir(&a.out)?;
            let model = load_model(&a.checkpoint)?;
            let manifest = Manifest::load(ds)?;
            create_out_dir(&a.out)?;
            for e in &manifest.samples {
                let image = read_rgb_png(&ds.join(&e.name).join("input.png"), to_input)?;
                let n = model.predictor.predict_normal(&model.codec, &model.encoder, &image)?;
                write_normal_png(&a.out.join(format!("{}.png", e.name)), &n)?;
            }
        }
        _ => return Err(usage("give either an image or --dataset")),
    }
    Ok(())
}
