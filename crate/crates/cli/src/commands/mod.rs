pub mod bench;
pub mod eval;
pub mod gen;
pub mod gradcheck;
pub mod infer;
pub mod rank;
pub mod train;
pub mod wavelet;

use std::fs;
use std::path::Path;

use crate::config::{self, Flat};
use crate::{usage, Failure, Global};

pub fn config_file(g: &Global) -> Result<Flat, Failure> {
    match &g.config {
        Some(p) => config::read_file(p).map_err(Failure::Usage),
        None => Ok(Flat::new()),
    }
}

/// Rejects an output path that exists and is not a directory.
pub fn check_out_dir(path: &Path) -> Result<(), Failure> {
    if path.exists() && !path.is_dir() {
        return Err(usage(format!("{}: exists and is not a directory", path.display())));
    }
    Ok(())
}

pub fn create_out_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn require_file(path: &Path) -> Result<(), Failure> {
    if !path.is_file() {
        return Err(usage(format!("{}: no such file", path.display())));
    }
    Ok(())
}

pub fn require_dataset(dir: &Path) -> Result<(), Failure> {
    require_file(&dir.join("manifest.json"))
}

pub fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

/// A trained model and the frozen components it was trained with.
pub struct Model {
    pub predictor: glassnorm::predictor::Predictor,
    pub codec: glassnorm::codec::Codec,
    pub encoder: glassnorm::semantic::SemanticEncoder,
}

/// Loads a checkpoint. The encoder choice comes from the training run's
/// resolved config beside it, when present.
pub fn load_model(checkpoint: &Path) -> anyhow::Result<Model> {
    use glassnorm::semantic::{EncoderConfig, SemanticEncoder};
    use glassnorm::training::TrainConfig;

    let predictor = glassnorm::predictor::Predictor::load(checkpoint)?;
    let resolved = checkpoint.parent().unwrap_or(Path::new(".")).join(config::RESOLVED_NAME);
    let train_cfg = if resolved.is_file() {
        let flat = config::read_file(&resolved).map_err(anyhow::Error::msg)?;
        config::resolve(&TrainConfig::default(), &flat, &Flat::new())
            .map_err(anyhow::Error::msg)?
            .0
    } else {
        TrainConfig::default()
    };
    let encoder = SemanticEncoder::new(EncoderConfig {
        kind: train_cfg.effective_encoder(),
        ..EncoderConfig::default()
    })?;
    if encoder.token_dim() != predictor.config().d_sem {
        anyhow::bail!(
            "{}: encoder width {} does not match the checkpoint's {}",
            checkpoint.display(),
            encoder.token_dim(),
            predictor.config().d_sem
        );
    }
    Ok(Model {
        predictor,
        codec: glassnorm::codec::Codec::default(),
        encoder,
    })
}
