use std::path::PathBuf;

use clap::Args;
use glassnorm::scenegen::io::{decode_normal_component, read_rgb_png, to_u8, write_rgb_png};
use glassnorm::tensor::Tensor;
use glassnorm::wavelet::{haar_dwt2, haar_idwt2};
use serde_json::json;

use super::{check_out_dir, create_out_dir, print_json, require_file};
use crate::{usage, CmdResult, Global};

#[derive(Args)]
pub struct WaveletArgs {
    image: PathBuf,
    /// Decode pixels as a normal map (`[−1,1]`) instead of intensities in `[0,1]`.
    #[arg(long)]
    normal: bool,
    /// Write `bands.json` and band images here.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn band_json(t: &Tensor) -> serde_json::Value {
    json!({ "shape": t.shape(), "data": t.data() })
}

pub fn run(_g: &Global, a: WaveletArgs) -> CmdResult {
    require_file(&a.image)?;
    if let Some(o) = &a.out {
        check_out_dir(o)?;
    }
    let x = if a.normal {
        read_rgb_png(&a.image, decode_normal_component)?
    } else {
        read_rgb_png(&a.image, |b| b as f64 / 255.0)?
    };
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(usage(format!("{}: {w}×{h} is not even-sized", a.image.display())));
    }
    let bands = haar_dwt2(&x)?;
    let back = haar_idwt2(&bands)?;
    let (h2, w2) = (h / 2, w / 2);
    let plane = 3 * h2 * w2;
    let hf: Vec<Tensor> = (0..3)
        .map(|k| Tensor::new(&[3, h2, w2], bands.hf.data()[k * plane..(k + 1) * plane].to_vec()))
        .collect::<Result<_, _>>()?;
    let energy_in = x.sum_sq();
    let energy_bands = bands.ll.sum_sq() + bands.hf.sum_sq();
    if let Some(o) = &a.out {
        create_out_dir(o)?;
        let doc = json!({
            "ll": band_json(&bands.ll),
            "lh": band_json(&hf[0]),
            "hl": band_json(&hf[1]),
            "hh": band_json(&hf[2]),
        });
        let path = o.join("bands.json");
        std::fs::write(&path, serde_json::to_string(&doc)? + "\n")
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        // LL spans [0,2] for intensities; details are shown as |·| scaled by 2.
        let scale = if a.normal { 0.25 } else { 0.5 };
        write_rgb_png(&o.join("ll.png"), &bands.ll, |v| to_u8(v.abs() * scale))?;
        for (name, t) in ["lh", "hl", "hh"].iter().zip(&hf) {
            write_rgb_png(&o.join(format!("{name}.png")), t, |v| to_u8(v.abs() * 2.0))?;
        }
    }
    print_json(&json!({
        "height": h,
        "width": w,
        "energy": {
            "input": energy_in,
            "ll": bands.ll.sum_sq(),
            "lh": hf[0].sum_sq(),
            "hl": hf[1].sum_sq(),
            "hh": hf[2].sum_sq(),
        },
        "energy_relative_error": (energy_bands - energy_in).abs() / energy_in.max(f64::MIN_POSITIVE),
        "reconstruction_max_error": back.max_abs_diff(&x),
    }));
    Ok(())
}
