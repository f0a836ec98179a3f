use std::path::PathBuf;

use clap::Args;
use glassnorm::scenegen::generate_dataset;
use serde::{Deserialize, Serialize};

use super::{check_out_dir, config_file, create_out_dir, print_json};
use crate::config::{resolve, write_resolved, Overrides};
use crate::{usage, CmdResult, Global};

#[derive(Args)]
pub struct GenArgs {
    /// Output dataset directory.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub count: usize,
    pub train_fraction: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 80,
            train_fraction: 0.8,
            image_size: 64,
            seed: 0,
        }
    }
}

pub fn run(g: &Global, a: GenArgs) -> CmdResult {
    let mut o = Overrides::default();
    o.set("count", a.count)
        .set("train_fraction", a.train_fraction)
        .set("image_size", a.size)
        .set("seed", g.seed);
    let (cfg, flat) = resolve(&GenConfig::default(), &config_file(g)?, &o.0).map_err(usage)?;
    if cfg.count == 0 {
        return Err(usage("count must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(usage(format!("train_fraction {} outside [0,1]", cfg.train_fraction)));
    }
    if cfg.image_size < 8 || cfg.image_size % 2 != 0 {
        return Err(usage(format!("image_size {} must be even and at least 8", cfg.image_size)));
    }
    check_out_dir(&a.out)?;
    create_out_dir(&a.out)?;
    let manifest = generate_dataset(cfg.count, cfg.train_fraction, &a.out, cfg.seed, cfg.image_size)?;
    write_resolved(&a.out, &flat)?;
    print_json(&serde_json::json!({
        "out": a.out,
        "samples": manifest.samples.len(),
        "train": manifest.split(glassnorm::scenegen::Split::Train).count(),
        "test": manifest.split(glassnorm::scenegen::Split::Test).count(),
    }));
    Ok(())
}
