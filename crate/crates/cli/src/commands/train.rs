use std::path::PathBuf;

use clap::Args;
use glassnorm::predictor::PredictorConfig;
use glassnorm::scenegen::{load_split, Manifest, SceneSample, Split};
use glassnorm::training::{train, TrainConfig};

use super::{check_out_dir, config_file, create_out_dir, print_json, require_dataset};
use crate::config::{resolve, write_resolved, Overrides};
use crate::{usage, CmdResult, Global};

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directories; the train split of each is one mixture source.
    /// The test split of the first is the held-out set.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// edge | interior | ll_only | no_wavelet
    #[arg(long)]
    loss_mode: Option<String>,
    /// default | low-dim | patch-mean | off
    #[arg(long)]
    encoder: Option<String>,
    /// Zero the semantic tokens.
    #[arg(long)]
    no_semantic: bool,
    /// Comma-separated sampling weights, one per `--data`.
    #[arg(long, value_delimiter = ',')]
    mixture: Option<Vec<f64>>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Use the small test-sized predictor.
    #[arg(long)]
    tiny: bool,
}

pub fn run(g: &Global, a: TrainArgs) -> CmdResult {
    let mut o = Overrides::default();
    let loss_mode = a
        .loss_mode
        .as_deref()
        .map(str::parse::<glassnorm::training::LossMode>)
        .transpose()
        .map_err(|e| usage(e.to_string()))?;
    let encoder = a
        .encoder
        .as_deref()
        .map(str::parse::<glassnorm::semantic::EncoderKind>)
        .transpose()
        .map_err(|e| usage(e.to_string()))?;
    let mixture = match a.mixture {
        Some(m) => Some(m),
        None if a.data.len() > 1 => Some(vec![1.0; a.data.len()]),
        None => None,
    };
    o.set("steps", a.steps)
        .set("lr", a.lr)
        .set("batch_size", a.batch_size)
        .set("loss_mode", loss_mode)
        .set("encoder", encoder)
        .set("semantic", a.no_semantic.then_some(false))
        .set("mixture", mixture)
        .set("eval_every", a.eval_every)
        .set("checkpoint_every", a.checkpoint_every)
        .set("seed", g.seed)
        .set("deterministic", g.deterministic.then_some(true));
    if a.tiny {
        for (k, v) in crate::config::flatten(&serde_json::to_value(PredictorConfig::tiny()).expect("config serializes")) {
            o.0.entry(format!("predictor.{k}")).or_insert(v);
        }
    }
    let (cfg, flat) = resolve(&TrainConfig::default(), &config_file(g)?, &o.0).map_err(usage)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.mixture.len() != a.data.len() {
        return Err(usage(format!("{} mixture weights for {} data directories", cfg.mixture.len(), a.data.len())));
    }
    for d in &a.data {
        require_dataset(d)?;
    }
    check_out_dir(&a.out)?;

    let mut sources: Vec<Vec<SceneSample>> = Vec::new();
    let mut held_out = Vec::new();
    for (i, d) in a.data.iter().enumerate() {
        let m = Manifest::load(d)?;
        sources.push(load_split(d, &m, Split::Train)?);
        if i == 0 {
            held_out = load_split(d, &m, Split::Test)?;
        }
    }
    if let Some(i) = (0..sources.len()).find(|&i| sources[i].is_empty() && cfg.mixture[i] > 0.0) {
        return Err(usage(format!("{}: train split is empty", a.data[i].display())));
    }
    create_out_dir(&a.out)?;
    write_resolved(&a.out, &flat)?;
    let refs: Vec<&[SceneSample]> = sources.iter().map(Vec::as_slice).collect();
    let outcome = train(&cfg, &refs, &held_out, Some(&a.out))?;
    let last = outcome.log.last();
    print_json(&serde_json::json!({
        "checkpoint": outcome.checkpoint,
        "steps": outcome.log.len(),
        "skipped_steps": outcome.skipped_steps,
        "final_loss": last.map(|r| r.loss.l_total),
        "held_out_mean_deg": outcome.evals.last().map(|e| e.mean_deg),
    }));
    Ok(())
}
