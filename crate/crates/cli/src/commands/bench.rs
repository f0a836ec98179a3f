use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use glassnorm::autodiff::Tape;
use glassnorm::codec::Codec;
use glassnorm::predictor::{Predictor, PredictorConfig};
use glassnorm::scenegen::generate_samples;
use glassnorm::semantic::SemanticEncoder;
use glassnorm::training::{total_loss, Batch, LossMode, LossWeights};
use serde_json::json;

use super::{check_out_dir, create_out_dir, print_json};
use crate::{usage, CmdResult, Global};

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn median_ms(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub fn run(g: &Global, a: BenchArgs) -> CmdResult {
    if a.iters == 0 || a.batch_size == 0 {
        return Err(usage("iters and batch_size must be positive"));
    }
    if !a.size.is_multiple_of(16) || a.size < 48 {
        return Err(usage(format!("size {} must be a multiple of 16, at least 48", a.size)));
    }
    if let Some(o) = &a.out {
        check_out_dir(o)?;
    }
    let seed = g.seed.unwrap_or(0);
    let codec = Codec::default();
    let encoder = SemanticEncoder::stand_in(Default::default())?;
    let predictor = Predictor::new(PredictorConfig {
        seed,
        ..PredictorConfig::default()
    })?;
    let samples = generate_samples(a.batch_size, seed, a.size)?;
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, &codec, &encoder)?;

    let mut infer = Vec::with_capacity(a.iters);
    for _ in 0..a.iters {
        let t = Instant::now();
        predictor.predict_normal(&codec, &encoder, &samples[0].input())?;
        infer.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut step = Vec::with_capacity(a.iters);
    for _ in 0..a.iters {
        let t = Instant::now();
        let mut tape = Tape::new();
        let bound = predictor.params().bind(&mut tape, true);
        let (loss, _) = total_loss(&mut tape, &predictor, &bound, &batch, &codec, LossMode::Edge, &LossWeights::default())?;
        tape.backward(loss)?;
        std::hint::black_box(bound.grads(&tape));
        step.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let infer_ms = median_ms(infer);
    let step_ms = median_ms(step);
    let report = json!({
        "parameters": predictor.num_parameters(),
        "image_size": a.size,
        "batch_size": a.batch_size,
        "iters": a.iters,
        "infer_ms_median": infer_ms,
        "infer_images_per_s": 1e3 / infer_ms,
        "train_step_ms_median": step_ms,
        "train_samples_per_s": a.batch_size as f64 * 1e3 / step_ms,
    });
    if let Some(o) = &a.out {
        create_out_dir(o)?;
        let path = o.join("bench.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    }
    print_json(&report);
    Ok(())
}
