//! Acceptance criteria A1–A8, one status line each.
//!
//! A6 and A7 train the default model for minutes to hours, so they only run
//! with `GLASSNORM_ACCEPTANCE=full` (use a release build). Criteria listed in
//! `KNOWN_FAILURES` still print FAIL but do not fail the target; if one starts
//! passing the target fails so the list gets updated.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use glassnorm::codec;
use glassnorm::eval::{aggregate, angular_error_map, MaskKind, THRESHOLDS};
use glassnorm::gradsuite::run_suite;
use glassnorm::normal::{Mask, NormalMap};
use glassnorm::scenegen::io::read_normal_png_raw;
use glassnorm::scenegen::{generate_samples, integrity_violations, load_sample, render, Manifest, SceneSample};
use glassnorm::training::{evaluate_model, train, LossMode, TrainConfig};
use glassnorm::wavelet::{haar_dwt2, haar_idwt2};
use glassnorm::{SeededRng, Tensor};

// A1: two published ranks are unreachable from the published scores.
// A7: with three seeds the ablation gaps are smaller than the seed spread.
const KNOWN_FAILURES: &[&str] = &["A1", "A7"];

const PERFECT_RECONSTRUCTION_TOL: f64 = 1e-12;
const ENERGY_REL_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 10;
const METRIC_TOL: f64 = 1e-9;
const PNG_STEP: f64 = 1.0 / 255.0;
const TRAIN_TARGET_DEG: f64 = 10.0;
const TEST_TARGET_DEG: f64 = 25.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const TOY_DATA_SEED: u64 = 2024;

/// Published Avg. Rank column.
const PUBLISHED_RANKS: [(&str, f64); 13] = [
    ("Omnidata", 12.3),
    ("Omnidata V2", 10.9),
    ("GeoWizard", 10.1),
    ("StableNormal", 8.9),
    ("Marigold", 6.3),
    ("DSINE", 9.6),
    ("Diff-E2E-FT", 3.3),
    ("GenPercept", 4.2),
    ("Lotus-G", 5.2),
    ("Lotus-D", 5.3),
    ("MoGe-2", 7.8),
    ("Diception", 5.0),
    ("Ours", 1.0),
];

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<Outcome, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glassnorm"))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn a1() -> Check {
    let table = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/published_scores.csv");
    let out = run_cli(&["rank", table.to_str().unwrap(), "--tie-policy", "ordinal"])?;
    let mut mismatches = Vec::new();
    for line in out.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let got: f64 = cells.last().unwrap().parse().map_err(|e| format!("{line}: {e}"))?;
        let (_, want) = PUBLISHED_RANKS
            .iter()
            .find(|(m, _)| *m == cells[0])
            .ok_or_else(|| format!("unexpected method {}", cells[0]))?;
        if format!("{got:.1}") != format!("{want:.1}") {
            mismatches.push(format!("{} {got:.1} vs {want:.1}", cells[0]));
        }
    }
    let matched = PUBLISHED_RANKS.len() - mismatches.len();
    Ok(verdict(
        mismatches.is_empty(),
        format!("{matched}/13 rows match under ordinal ties; mismatched: {}", mismatches.join(", ")),
    ))
}

fn a2() -> Check {
    let mut rng = SeededRng::new(0xA2);
    let (mut worst_pr, mut worst_energy) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (c, h, w) = (1 + rng.below(3), 2 * (1 + rng.below(16)), 2 * (1 + rng.below(16)));
        let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let bands = haar_dwt2(&x).map_err(|e| e.to_string())?;
        worst_pr = worst_pr.max(haar_idwt2(&bands).map_err(|e| e.to_string())?.max_abs_diff(&x));
        let e = x.sum_sq();
        worst_energy = worst_energy.max((bands.ll.sum_sq() + bands.hf.sum_sq() - e).abs() / e);
    }
    Ok(verdict(
        worst_pr <= PERFECT_RECONSTRUCTION_TOL && worst_energy <= ENERGY_REL_TOL,
        format!("1000 maps, max reconstruction error {worst_pr:.1e}, max energy rel error {worst_energy:.1e}"),
    ))
}

fn a3() -> Check {
    let results = run_suite(GRAD_INSTANCES, 0xA3, GRAD_REL_TOL).map_err(|e| e.to_string())?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed() || r.instances < GRAD_INSTANCES)
        .map(|r| r.name.as_str())
        .collect();
    let has_total = results.iter().any(|r| r.name == "total_loss");
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(verdict(
        failed.is_empty() && has_total,
        format!(
            "{} operations × {GRAD_INSTANCES} instances, max rel error {worst:.1e}{}",
            results.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
        ),
    ))
}

fn scalar_mean_and_acc(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> (f64, [f64; 5]) {
    let (mut sum, mut n, mut hits) = (0.0, 0.0, [0.0; 5]);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if !mask.get(y, x) {
                continue;
            }
            let (p, g) = (pred.get(y, x), gt.get(y, x));
            let dot = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
            let norms = (p.iter().map(|v| v * v).sum::<f64>() * g.iter().map(|v| v * v).sum::<f64>()).sqrt();
            let deg = (dot / norms).clamp(-1.0, 1.0).acos().to_degrees();
            sum += deg;
            n += 1.0;
            for (k, t) in THRESHOLDS.iter().enumerate() {
                hits[k] += f64::from(u8::from(deg <= *t));
            }
        }
    }
    (sum / n, hits.map(|h| 100.0 * h / n))
}

fn a4() -> Check {
    let mut rng = SeededRng::new(0xA4);
    let mut codec_ok = 0;
    for _ in 0..200 {
        let f = 1 + rng.below(4);
        let (h, w) = (f * (1 + rng.below(8)), f * (1 + rng.below(8)));
        let x = Tensor::randn(&[3, h, w], 1.0, &mut rng);
        let back = codec::decode(&codec::encode(&x, f).map_err(|e| e.to_string())?, f).map_err(|e| e.to_string())?;
        let n = NormalMap::normalized(x.clone()).map_err(|e| e.to_string())?;
        let nback = codec::decode(&codec::encode_normal(&n, f).map_err(|e| e.to_string())?, f).map_err(|e| e.to_string())?;
        codec_ok += usize::from(back == x && nback == *n.tensor());
    }
    let (mut worst, mut monotone) = (0.0f64, true);
    for _ in 0..50 {
        let (h, w) = (4 + rng.below(28), 4 + rng.below(28));
        let gt = NormalMap::normalized(Tensor::randn(&[3, h, w], 1.0, &mut rng)).map_err(|e| e.to_string())?;
        let noise = Tensor::randn(&[3, h, w], 0.3, &mut rng);
        let pred = NormalMap::normalized(Tensor::from_fn(&[3, h, w], |i| gt.tensor().data()[i] + noise.data()[i]))
            .map_err(|e| e.to_string())?;
        let mut mask = Mask::new(h, w, (0..h * w).map(|_| rng.bernoulli(0.7)).collect()).map_err(|e| e.to_string())?;
        mask.set(0, 0, true);
        let r = aggregate(&angular_error_map(&pred, &gt, &mask).map_err(|e| e.to_string())?, &mask).map_err(|e| e.to_string())?;
        let (mean, acc) = scalar_mean_and_acc(&pred, &gt, &mask);
        worst = worst.max((r.mean_deg - mean).abs());
        for (a, b) in r.acc.to_array().iter().zip(acc) {
            worst = worst.max((a - b).abs());
        }
        monotone &= r.is_consistent() && r.acc.to_array().windows(2).all(|p| p[0] <= p[1]);
    }
    Ok(verdict(
        codec_ok == 200 && worst <= METRIC_TOL && monotone,
        format!("codec {codec_ok}/200 bit-exact, metric max deviation {worst:.1e} on 50 pairs, monotone {monotone}"),
    ))
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).map_err(|e| e.to_string())?));
    }
    out.sort();
    Ok(out)
}

fn a5() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    let d = data.to_str().unwrap();
    run_cli(&["gen", "-o", d, "--count", "8", "--size", "32", "--seed", "5"])?;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        run_cli(&[
            "train",
            "--data",
            d,
            "-o",
            out.to_str().unwrap(),
            "--tiny",
            "--steps",
            "20",
            "--batch-size",
            "2",
            "--eval-every",
            "10",
            "--seed",
            "17",
            "--deterministic",
        ])?;
        runs.push(dir_bytes(&out)?);
    }
    let differing: Vec<&str> = runs[0].iter().zip(&runs[1]).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
    let same_names = runs[0].len() == runs[1].len();
    Ok(verdict(
        same_names && differing.is_empty() && runs[0].iter().any(|(n, _)| n.ends_with(".tnrm")),
        format!(
            "{} files compared across two 20-step runs{}",
            runs[0].len(),
            if differing.is_empty() { String::new() } else { format!(", differing: {}", differing.join(", ")) }
        ),
    ))
}

fn a8() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    run_cli(&["gen", "-o", data.to_str().unwrap(), "--count", "40", "--size", "64", "--seed", "8"])?;
    let manifest = Manifest::load(&data).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    let mut worst_png = 0.0f64;
    for e in &manifest.samples {
        let fresh = render(&manifest.spec(e)).map_err(|e| e.to_string())?;
        problems.extend(integrity_violations(&fresh).into_iter().map(|v| format!("{}: {v}", e.name)));
        let dir = data.join(&e.name);
        let loaded = load_sample(&dir).map_err(|e| e.to_string())?;
        if loaded.mask_fg != fresh.mask_fg || loaded.mask_transparent != fresh.mask_transparent {
            problems.push(format!("{}: stored masks differ from the scene", e.name));
        }
        let stored = read_normal_png_raw(&dir.join("gt_normal.png")).map_err(|e| e.to_string())?;
        worst_png = worst_png.max(stored.max_abs_diff(fresh.normal_gt.tensor()));
    }
    if worst_png > PNG_STEP {
        problems.push(format!("normal PNG round trip error {worst_png:.2e}"));
    }
    Ok(verdict(
        problems.is_empty(),
        format!(
            "{} samples, PNG round trip max {worst_png:.2e}{}",
            manifest.samples.len(),
            problems.first().map(|p| format!(", first problem: {p}")).unwrap_or_default()
        ),
    ))
}

struct ToyResult {
    train_deg: f64,
    test_deg: f64,
    secs: f64,
}

fn toy_data() -> Result<(Vec<SceneSample>, Vec<SceneSample>), String> {
    let mut all = generate_samples(80, TOY_DATA_SEED, 64).map_err(|e| e.to_string())?;
    let test = all.split_off(64);
    Ok((all, test))
}

fn toy_run(train_set: &[SceneSample], test_set: &[SceneSample], cfg: &TrainConfig) -> Result<ToyResult, String> {
    let t = Instant::now();
    let out = train(cfg, &[train_set], test_set, None).map_err(|e| e.to_string())?;
    let score = |s: &[SceneSample]| {
        evaluate_model(&out.predictor, &out.codec, &out.encoder, s, MaskKind::Transparent)
            .map(|r| r.mean_deg)
            .map_err(|e| e.to_string())
    };
    Ok(ToyResult {
        train_deg: score(train_set)?,
        test_deg: score(test_set)?,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Heavy {
    train: Vec<SceneSample>,
    test: Vec<SceneSample>,
    edge: Vec<ToyResult>,
}

impl Heavy {
    fn new() -> Result<Self, String> {
        let (train, test) = toy_data()?;
        Ok(Self {
            train,
            test,
            edge: Vec::new(),
        })
    }

    fn edge_run(&mut self, i: usize) -> Result<&ToyResult, String> {
        while self.edge.len() <= i {
            let cfg = TrainConfig {
                seed: ABLATION_SEEDS[self.edge.len()],
                ..TrainConfig::default()
            };
            let r = toy_run(&self.train, &self.test, &cfg)?;
            eprintln!("  edge seed {}: test {:.2}° ({:.0} s)", cfg.seed, r.test_deg, r.secs);
            self.edge.push(r);
        }
        Ok(&self.edge[i])
    }

    fn a6(&mut self) -> Check {
        let r = self.edge_run(0)?;
        Ok(verdict(
            r.train_deg < TRAIN_TARGET_DEG && r.test_deg < TEST_TARGET_DEG,
            format!(
                "train {:.2}° (< {TRAIN_TARGET_DEG}), held-out {:.2}° (< {TEST_TARGET_DEG}) in {:.0} s",
                r.train_deg, r.test_deg, r.secs
            ),
        ))
    }

    fn a7(&mut self) -> Check {
        let mut edge = Vec::new();
        for i in 0..ABLATION_SEEDS.len() {
            edge.push(self.edge_run(i)?.test_deg);
        }
        let variant = |label: &str, f: &dyn Fn(&mut TrainConfig)| -> Result<Vec<f64>, String> {
            let mut out = Vec::new();
            for seed in ABLATION_SEEDS {
                let mut cfg = TrainConfig {
                    seed,
                    ..TrainConfig::default()
                };
                f(&mut cfg);
                let r = toy_run(&self.train, &self.test, &cfg)?;
                eprintln!("  {label} seed {seed}: test {:.2}° ({:.0} s)", r.test_deg, r.secs);
                out.push(r.test_deg);
            }
            Ok(out)
        };
        let no_wavelet = variant("no_wavelet", &|c| c.loss_mode = LossMode::NoWavelet)?;
        let sem_off = variant("semantic off", &|c| c.semantic = false)?;
        let (me, mn, ms) = (median(edge), median(no_wavelet), median(sem_off));
        Ok(verdict(
            me < mn && me < ms,
            format!("median held-out: edge {me:.2}° vs no_wavelet {mn:.2}°, semantic on {me:.2}° vs off {ms:.2}°"),
        ))
    }
}

fn main() {
    // Under `cargo test` the harness flags arrive here; only `--list` matters.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let full = std::env::var("GLASSNORM_ACCEPTANCE").is_ok_and(|v| v == "full");
    let mut heavy = if full { Heavy::new().map_err(|e| eprintln!("toy data: {e}")).ok() } else { None };
    let skip = || Ok(Outcome::Skip("set GLASSNORM_ACCEPTANCE=full to run".into()));

    let mut unexpected = Vec::new();
    let mut run = |id: &str, name: &str, check: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.contains(&id);
        let (tag, detail) = match outcome {
            Ok(Outcome::Pass(d)) => {
                if known {
                    unexpected.push(format!("{id} passes but is listed as a known failure"));
                }
                ("PASS", d)
            }
            Ok(Outcome::Fail(d)) => {
                if !known {
                    unexpected.push(id.to_string());
                }
                (if known { "FAIL (known)" } else { "FAIL" }, d)
            }
            Ok(Outcome::Skip(d)) => ("SKIP", d),
            Err(e) => {
                unexpected.push(id.to_string());
                ("ERROR", e)
            }
        };
        println!("{id} {tag:<12} {name}: {detail} [{secs:.1} s]");
    };
    run("A1", "published rank reproduction", &mut a1);
    run("A2", "wavelet exactness", &mut a2);
    run("A3", "gradient suite", &mut a3);
    run("A4", "codec/metric oracles", &mut a4);
    run("A5", "determinism", &mut a5);
    run("A6", "toy learning", &mut || heavy.as_mut().map_or_else(skip, Heavy::a6));
    run("A7", "ablation directions", &mut || heavy.as_mut().map_or_else(skip, Heavy::a7));
    run("A8", "dataset integrity", &mut a8);

    if !unexpected.is_empty() {
        println!("unexpected: {}", unexpected.join("; "));
        std::process::exit(1);
    }
}
