//! Finite-difference checks over every differentiable operation and the
//! composed training objective.
//!
//! Non-scalar outputs are contracted with a fixed random weight tensor so
//! that every output coordinate contributes to the checked scalar.

use serde::Serialize;

use crate::autodiff::{grad_check_coords, Tape, Var};
use crate::codec::Codec;
use crate::error::Result;
use crate::predictor::{cross_attention, AttentionVars, Predictor, PredictorConfig};
use crate::rng::SeededRng;
use crate::scenegen::generate_samples;
use crate::semantic::{project_var, EncoderConfig, SemanticEncoder};
use crate::tensor::Tensor;
use crate::training::{latent_losses_var, total_loss, Batch, LossMode, LossWeights};
use crate::wavelet::{edge_mask_tensor, haar_dwt2_var, haar_idwt2, WaveletBands, wavelet_loss_var, MaskNormalization, WaveletMode};

pub const DEFAULT_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Coordinates probed per input tensor; larger tensors are subsampled.
const MAX_COORDS: usize = 24;

#[derive(Clone, Debug, Serialize)]
pub struct OpResult {
    pub name: String,
    pub instances: usize,
    pub checks: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub first_failure: Option<String>,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checks > 0
    }
}

type Forward = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: Box<dyn Fn(&mut SeededRng) -> Vec<Tensor>>,
    f: Box<Forward>,
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.range(0.1, 1.5);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut SeededRng) -> Vec<Tensor> + 'static,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs: Box::new(inputs),
        f: Box::new(f),
    }
}

fn cases() -> Vec<Case> {
    vec![
        case("add", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| t.add(v[0], v[1])),
        case("sub", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| t.sub(v[0], v[1])),
        case("mul", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| t.mul(v[0], v[1])),
        case("scale", |r| vec![randn(&[5], r)], |t, v| Ok(t.scale(v[0], -1.7))),
        case("square", |r| vec![randn(&[2, 5], r)], |t, v| Ok(t.square(v[0]))),
        case("abs", |r| vec![away_from_zero(&[2, 5], r)], |t, v| Ok(t.abs(v[0]))),
        case("silu", |r| vec![randn(&[2, 5], r)], |t, v| Ok(t.silu(v[0]))),
        case("sum", |r| vec![randn(&[2, 3, 2], r)], |t, v| Ok(t.sum(v[0]))),
        case("mean", |r| vec![randn(&[2, 3, 2], r)], |t, v| Ok(t.mean(v[0]))),
        case("matmul", |r| vec![randn(&[3, 4], r), randn(&[4, 2], r)], |t, v| t.matmul(v[0], v[1])),
        case(
            "bmm",
            |r| vec![randn(&[2, 3, 4], r), randn(&[2, 4, 2], r)],
            |t, v| t.bmm(v[0], v[1], false),
        ),
        case(
            "bmm_transposed",
            |r| vec![randn(&[2, 3, 4], r), randn(&[2, 5, 4], r)],
            |t, v| t.bmm(v[0], v[1], true),
        ),
        case("softmax_rows", |r| vec![randn(&[2, 3, 4], r)], |t, v| Ok(t.softmax_rows(v[0]))),
        case(
            "conv2d",
            |r| vec![randn(&[2, 3, 5, 4], r), randn(&[2, 3, 3, 3], r), randn(&[2], r)],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1),
        ),
        case(
            "conv2d_stride2",
            |r| vec![randn(&[1, 2, 6, 5], r), randn(&[3, 2, 3, 3], r)],
            |t, v| t.conv2d(v[0], v[1], None, 2),
        ),
        case(
            "groupnorm",
            |r| vec![randn(&[2, 4, 3, 3], r), randn(&[4], r), randn(&[4], r)],
            |t, v| t.groupnorm(v[0], 2, v[1], v[2], 1e-5),
        ),
        case(
            "add_channel",
            |r| vec![randn(&[2, 3, 2, 2], r), randn(&[2, 3], r)],
            |t, v| t.add_channel(v[0], v[1]),
        ),
        case(
            "add_channel_shared",
            |r| vec![randn(&[2, 3, 2, 2], r), randn(&[3], r)],
            |t, v| t.add_channel(v[0], v[1]),
        ),
        case("add_row_bias", |r| vec![randn(&[4, 3], r), randn(&[3], r)], |t, v| t.add_row_bias(v[0], v[1])),
        case("reshape", |r| vec![randn(&[2, 6], r)], |t, v| t.reshape(v[0], &[3, 4])),
        case("permute", |r| vec![randn(&[2, 3, 4], r)], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("upsample2x", |r| vec![randn(&[2, 2, 2, 3], r)], |t, v| t.upsample2x(v[0])),
        case(
            "concat_channels",
            |r| vec![randn(&[2, 2, 3, 3], r), randn(&[2, 1, 3, 3], r)],
            |t, v| t.concat_channels(v[0], v[1]),
        ),
        case("slice_channels", |r| vec![randn(&[2, 5, 2, 2], r)], |t, v| t.slice_channels(v[0], 1, 4)),
        case(
            "linear",
            |r| vec![randn(&[4, 3], r), randn(&[3, 2], r), randn(&[2], r)],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        case("haar_dwt2", |r| vec![randn(&[2, 3, 4, 6], r)], |t, v| haar_dwt2_var(t, v[0])),
        case("codec_decode", |r| vec![randn(&[2, 12, 2, 3], r)], |t, v| {
            Codec::SpaceToDepth { factor: 2 }.decode_var(t, v[0])
        }),
        case(
            "semantic_projection",
            |r| vec![randn(&[2, 3, 4], r), randn(&[4, 5], r)],
            |t, v| project_var(t, v[0], v[1]),
        ),
        case(
            "cross_attention",
            |r| {
                vec![
                    randn(&[2, 3, 4], r),
                    randn(&[2, 5, 6], r),
                    randn(&[4, 3], r),
                    randn(&[6, 3], r),
                    randn(&[6, 3], r),
                    randn(&[3, 4], r),
                ]
            },
            |t, v| {
                let w = AttentionVars {
                    w_q: v[2],
                    w_k: v[3],
                    w_v: v[4],
                    w_o: v[5],
                };
                cross_attention(t, v[0], v[1], &w)
            },
        ),
        case(
            "latent_losses",
            |r| (0..4).map(|_| randn(&[2, 3, 2, 2], r)).collect(),
            |t, v| {
                let (a, b) = latent_losses_var(t, v[0], v[1], v[2], v[3])?;
                let b = t.scale(b, 0.6);
                t.add(a, b)
            },
        ),
        wavelet_case("wavelet_loss_edge", WaveletMode::Edge),
        wavelet_case("wavelet_loss_interior", WaveletMode::Interior),
        wavelet_case("wavelet_loss_ll_only", WaveletMode::LlOnly),
    ]
}

/// The ground-truth map and its mask are fixed per instance; only the
/// prediction is checked.
fn wavelet_case(name: &'static str, mode: WaveletMode) -> Case {
    case(
        name,
        |r| {
            let gt = randn(&[2, 3, 4, 6], r);
            // Sub-band differences clear of the kink of |·| at zero.
            let diff = haar_idwt2(&WaveletBands {
                ll: away_from_zero(&[6, 2, 3], r),
                hf: away_from_zero(&[18, 2, 3], r),
            })
            .expect("even bands");
            let pred = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + diff.data()[i]);
            vec![pred, gt]
        },
        move |t, v| {
            let gt = t.value(v[1]).clone();
            let per = 3 * 4 * 6;
            let masks = (0..2)
                .map(|b| {
                    let one = Tensor::new(&[3, 4, 6], gt.data()[b * per..(b + 1) * per].to_vec())?;
                    edge_mask_tensor(&one, MaskNormalization::PerImage)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(wavelet_loss_var(t, v[0], &gt, &masks, mode)?.total)
        },
    )
}

fn pick_coords(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    if n <= MAX_COORDS {
        return (0..n).collect();
    }
    let mut c: Vec<usize> = (0..MAX_COORDS).map(|_| rng.below(n)).collect();
    c.sort_unstable();
    c.dedup();
    c
}

struct Tally {
    result: OpResult,
}

impl Tally {
    fn new(name: &str, instances: usize) -> Self {
        Self {
            result: OpResult {
                name: name.to_string(),
                instances,
                checks: 0,
                failures: 0,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                first_failure: None,
            },
        }
    }

    fn add(&mut self, r: &crate::autodiff::GradCheckReport, what: String) {
        let o = &mut self.result;
        o.checks += 1;
        o.max_rel_error = o.max_rel_error.max(r.max_rel_error);
        o.max_abs_error = o.max_abs_error.max(r.max_abs_error);
        if !r.passed {
            o.failures += 1;
            if o.first_failure.is_none() {
                o.first_failure = Some(match &r.failure {
                    Some(msg) => format!("{what}: {msg}"),
                    None => format!(
                        "{what}: rel {:.3e}, abs {:.3e} at coord {:?}",
                        r.max_rel_error, r.max_abs_error, r.worst_coord
                    ),
                });
            }
        }
    }
}

fn run_case(c: &Case, instances: usize, rng: &mut SeededRng, tol: f64) -> OpResult {
    let mut tally = Tally::new(c.name, instances);
    for inst in 0..instances {
        let inputs = (c.inputs)(rng);
        // Output shape from a dry run, for the contraction weights.
        let mut probe = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let out_shape = match (c.f)(&mut probe, &vars) {
            Ok(y) => probe.shape(y).to_vec(),
            Err(e) => {
                tally.result.checks += 1;
                tally.result.failures += 1;
                tally.result.first_failure.get_or_insert(format!("instance {inst}: {e}"));
                continue;
            }
        };
        let weights = randn(&out_shape, rng);
        // The ground truth of the wavelet cases is data, not an input.
        let checked = if c.name.starts_with("wavelet_loss") { 1 } else { inputs.len() };
        for j in 0..checked {
            let coords = pick_coords(inputs[j].numel(), rng);
            let f = |tape: &mut Tape, x: Var| -> Result<Var> {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| if k == j { x } else { tape.constant(t.clone()) })
                    .collect();
                let y = (c.f)(tape, &vars)?;
                let w = tape.constant(weights.clone());
                let yw = tape.mul(y, w)?;
                Ok(tape.sum(yw))
            };
            let r = grad_check_coords(f, &inputs[j], &coords, STEP, tol);
            tally.add(&r, format!("instance {inst} input {j}"));
        }
    }
    tally.result
}

/// `total_loss` of a tiny predictor on rendered samples; each instance
/// checks one parameter tensor.
fn run_total_loss(instances: usize, rng: &mut SeededRng, tol: f64) -> Result<OpResult> {
    let mut tally = Tally::new("total_loss", instances);
    let cfg = PredictorConfig::tiny();
    let codec = Codec::SpaceToDepth { factor: 2 };
    let encoder = SemanticEncoder::new(EncoderConfig {
        d_sem: cfg.d_sem,
        ..EncoderConfig::default()
    })?;
    let predictor = Predictor::new(PredictorConfig {
        seed: rng.next_u64(),
        ..cfg
    })?;
    let ids: Vec<_> = predictor.params().ids().collect();
    let weights = LossWeights {
        lambda_rgb: 0.7,
        lambda_wv: 0.4,
    };
    for inst in 0..instances {
        let samples = generate_samples(2, rng.next_u64(), 16)?;
        let refs: Vec<_> = samples.iter().collect();
        let batch = Batch::from_samples(&refs, &codec, &encoder)?;
        let id = ids[(inst * 7 + rng.below(7)) % ids.len()];
        let x = predictor.params().get(id).clone();
        let coords = pick_coords(x.numel(), rng);
        let mode = [LossMode::Edge, LossMode::Interior, LossMode::LlOnly, LossMode::NoWavelet][inst % 4];
        let f = |tape: &mut Tape, v: Var| -> Result<Var> {
            let mut bound = predictor.params().bind(tape, false);
            bound.replace(id, v);
            Ok(total_loss(tape, &predictor, &bound, &batch, &codec, mode, &weights)?.0)
        };
        let r = grad_check_coords(f, &x, &coords, STEP, tol);
        tally.add(&r, format!("instance {inst} ({mode:?})"));
    }
    Ok(tally.result)
}

/// Runs every case on `instances` random inputs each.
pub fn run_suite(instances: usize, seed: u64, tol: f64) -> Result<Vec<OpResult>> {
    let mut rng = SeededRng::new(seed);
    let mut out: Vec<OpResult> = cases().iter().map(|c| run_case(c, instances, &mut rng, tol)).collect();
    out.push(run_total_loss(instances, &mut rng, tol)?);
    Ok(out)
}

pub fn case_names() -> Vec<&'static str> {
    let mut v: Vec<_> = cases().iter().map(|c| c.name).collect();
    v.push("total_loss");
    v
}
