use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::data::{augment_flip, sample_batch, validate_sources, Batch};
use super::loss::{total_loss, LossReport};
use super::optim::AdamW;
use super::TrainConfig;
use crate::autodiff::Tape;
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, DatasetReport, MaskKind};
use crate::predictor::{Predictor, PredictorConfig};
use crate::rng::SeededRng;
use crate::scenegen::SceneSample;
use crate::semantic::{EncoderConfig, SemanticEncoder};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub grad_norm: f64,
    /// `None` in deterministic mode.
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub mean_deg: f64,
    pub n_pixels: usize,
}

pub struct TrainOutcome {
    pub predictor: Predictor,
    pub codec: Codec,
    pub encoder: SemanticEncoder,
    pub log: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub skipped_steps: usize,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Predicts every sample's normals and scores them inside `mask_kind`.
pub fn evaluate_model(
    predictor: &Predictor,
    codec: &Codec,
    encoder: &SemanticEncoder,
    samples: &[SceneSample],
    mask_kind: MaskKind,
) -> Result<DatasetReport> {
    let preds = samples
        .iter()
        .map(|s| predictor.predict_normal(codec, encoder, &s.input()))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = (0..samples.len()).map(|i| format!("{i:05}")).collect();
    evaluate_samples(&names, &preds, samples, mask_kind)
}

fn build_models(cfg: &TrainConfig) -> Result<(Predictor, Codec, SemanticEncoder)> {
    let encoder = SemanticEncoder::new(EncoderConfig {
        kind: cfg.effective_encoder(),
        ..EncoderConfig::default()
    })?;
    let codec = Codec::default();
    let predictor = Predictor::new(PredictorConfig {
        latent_channels: codec.latent_channels(),
        d_sem: encoder.token_dim(),
        seed: cfg.seed,
        ..cfg.predictor.clone()
    })?;
    Ok((predictor, codec, encoder))
}

fn write_json_line<W: Write, T: Serialize>(out: &mut W, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs the dual-task training loop.
///
/// With `out_dir`, writes `metrics.jsonl`, `eval.jsonl`, periodic
/// `checkpoint_<step>.tnrm` files and a final `checkpoint.tnrm`.
pub fn train(
    cfg: &TrainConfig,
    sources: &[&[SceneSample]],
    held_out: &[SceneSample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    validate_sources(sources, &cfg.mixture)?;
    let (mut predictor, codec, encoder) = build_models(cfg)?;
    let mut optimizer = AdamW::new(cfg.optimizer(), predictor.params().tensors());
    let mut rng = SeededRng::fork(cfg.seed, 0xDA7A);

    let mut writers = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let open = |name: &str| -> Result<(PathBuf, BufWriter<fs::File>)> {
                let p = dir.join(name);
                let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                Ok((p, BufWriter::new(f)))
            };
            Some((open("metrics.jsonl")?, open("eval.jsonl")?))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let run_eval = |predictor: &Predictor, step: usize, evals: &mut Vec<EvalRecord>| -> Result<Option<EvalRecord>> {
        if held_out.is_empty() {
            return Ok(None);
        }
        let r = evaluate_model(predictor, &codec, &encoder, held_out, MaskKind::Transparent)?;
        let rec = EvalRecord {
            step,
            mean_deg: r.mean_deg,
            n_pixels: r.n_pixels,
        };
        info!("step {step}: held-out mean angular error {:.2}°", rec.mean_deg);
        evals.push(rec.clone());
        Ok(Some(rec))
    };

    for step in 1..=cfg.steps {
        let start = Instant::now();
        let picked = sample_batch(sources, &cfg.mixture, cfg.batch_size, &mut rng)?;
        let augmented: Vec<SceneSample> = picked.iter().map(|s| augment_flip(s, &mut rng, cfg.flip_prob)).collect();
        let refs: Vec<&SceneSample> = augmented.iter().collect();
        let batch = Batch::from_samples(&refs, &codec, &encoder)?;

        let mut tape = Tape::new();
        let bound = predictor.params().bind(&mut tape, true);
        let (loss, report) = total_loss(&mut tape, &predictor, &bound, &batch, &codec, cfg.loss_mode, &cfg.weights)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let residual = report.identity_residual(&cfg.weights);
        assert!(residual <= 1e-12, "loss identity violated at step {step}: {residual:e}");
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        drop(tape);
        let grad_norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
        if grad_norm > cfg.grad_warn_norm {
            warn!("step {step}: gradient norm {grad_norm:.3e} above {:.3e}", cfg.grad_warn_norm);
        }
        optimizer.step(predictor.params_mut().tensors_mut(), &grads)?;

        let rec = StepRecord {
            step,
            loss: report,
            grad_norm,
            wall_ms: (!cfg.deterministic).then(|| start.elapsed().as_secs_f64() * 1e3),
        };
        if let Some(((p, w), _)) = writers.as_mut() {
            write_json_line(w, p, &rec)?;
        }
        log.push(rec);

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps {
            if let Some(rec) = run_eval(&predictor, step, &mut evals)? {
                if let Some((_, (p, w))) = writers.as_mut() {
                    write_json_line(w, p, &rec)?;
                }
            }
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                predictor.save(&dir.join(format!("checkpoint_{step:06}.tnrm")))?;
            }
        }
    }

    if let Some(rec) = run_eval(&predictor, cfg.steps, &mut evals)? {
        if let Some((_, (p, w))) = writers.as_mut() {
            write_json_line(w, p, &rec)?;
        }
    }
    if let Some(((mp, mw), (ep, ew))) = writers.as_mut() {
        mw.flush().map_err(|e| Error::io(&*mp, e))?;
        ew.flush().map_err(|e| Error::io(&*ep, e))?;
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            let p = dir.join("checkpoint.tnrm");
            predictor.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        predictor,
        codec,
        encoder,
        log,
        evals,
        skipped_steps: optimizer.skipped(),
        checkpoint,
    })
}
