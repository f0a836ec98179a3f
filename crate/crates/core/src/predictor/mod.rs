//! Latent U-Net with per-level semantic cross-attention and a fixed
//! timestep plus task embedding. One forward pass per prediction.

pub mod attention;
pub mod checkpoint;
pub mod embedding;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::{Codec, LatentGrid};
use crate::error::{Error, Result};
use crate::normal::NormalMap;
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::SeededRng;
use crate::semantic::{project_var, SemanticEncoder, SemanticTokens};
use crate::tensor::Tensor;

pub use attention::{cross_attention, cross_attention_traced, AttentionTrace, AttentionVars};
pub use embedding::{timestep_embedding, Task, TaskEmbedding, DEFAULT_TIMESTEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub latent_channels: usize,
    /// Width of level 0; each deeper level doubles it.
    pub base_width: usize,
    pub levels: usize,
    /// Incoming semantic token width (projector input).
    pub d_sem: usize,
    /// Cross-attention key/value source width (projector output).
    pub d_unet: usize,
    pub d_k: usize,
    pub time_dim: usize,
    pub temb_dim: usize,
    pub groups: usize,
    /// Per-level switch for the attention block.
    pub attention: Vec<bool>,
    pub timestep: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            latent_channels: 48,
            base_width: 32,
            levels: 3,
            d_sem: 64,
            d_unet: 64,
            d_k: 32,
            time_dim: 64,
            temb_dim: 128,
            groups: 8,
            attention: vec![true; 3],
            timestep: DEFAULT_TIMESTEP,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    /// A few-thousand-parameter network with the same topology, for
    /// exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            latent_channels: 12,
            base_width: 4,
            levels: 2,
            d_sem: 6,
            d_unet: 5,
            d_k: 3,
            time_dim: 4,
            temb_dim: 6,
            groups: 2,
            attention: vec![true; 2],
            timestep: DEFAULT_TIMESTEP,
            seed: 0,
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_width == 0 || self.latent_channels == 0 {
            return Err(Error::arg("predictor", "levels, base_width and latent_channels must be positive"));
        }
        if self.attention.len() != self.levels {
            return Err(Error::arg(
                "predictor.attention",
                format!("mask has {} entries for {} levels", self.attention.len(), self.levels),
            ));
        }
        if self.groups == 0 || !self.base_width.is_multiple_of(self.groups) {
            return Err(Error::arg("predictor.groups", "must divide base_width"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::arg("predictor.time_dim", "must be even"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb_w: ParamId,
    temb_b: ParamId,
    norm2: Norm,
    conv2: Conv,
}

#[derive(Clone, Debug)]
struct Attn {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
}

#[derive(Clone, Debug)]
struct DownLevel {
    down: Option<Conv>,
    res: ResBlock,
    attn: Option<Attn>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    merge: Conv,
    res: ResBlock,
}

#[derive(Clone, Debug)]
struct Layout {
    w_proj: ParamId,
    time1: (ParamId, ParamId),
    time2: (ParamId, ParamId),
    conv_in: Conv,
    down: Vec<DownLevel>,
    up: Vec<UpLevel>,
    norm_out: Norm,
    conv_out: Conv,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: SeededRng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, gain: f64) -> Conv {
        let std = gain * (2.0 / (cin * 9) as f64).sqrt();
        Conv {
            w: self
                .params
                .push(format!("{name}.weight"), Tensor::randn(&[cout, cin, 3, 3], std, &mut self.rng)),
            b: self
                .params
                .push(format!("{name}.bias"), Tensor::randn(&[cout], 0.01, &mut self.rng)),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.params.push(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize, gain: f64) -> ParamId {
        let std = gain / (rows as f64).sqrt();
        self.params
            .push(name.to_string(), Tensor::randn(&[rows, cols], std, &mut self.rng))
    }

    fn vector(&mut self, name: &str, n: usize) -> ParamId {
        self.params
            .push(name.to_string(), Tensor::randn(&[n], 0.01, &mut self.rng))
    }

    fn res(&mut self, name: &str, c: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), c),
            conv1: self.conv(&format!("{name}.conv1"), c, c, 1.0),
            temb_w: self.matrix(&format!("{name}.temb.weight"), temb, c, 1.0),
            temb_b: self.vector(&format!("{name}.temb.bias"), c),
            norm2: self.norm(&format!("{name}.norm2"), c),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 0.3),
        }
    }

    fn attn(&mut self, name: &str, c: usize, d_unet: usize, d_k: usize) -> Attn {
        Attn {
            w_q: self.matrix(&format!("{name}.w_q"), c, d_k, 1.0),
            w_k: self.matrix(&format!("{name}.w_k"), d_unet, d_k, 1.0),
            w_v: self.matrix(&format!("{name}.w_v"), d_unet, d_k, 1.0),
            w_o: self.matrix(&format!("{name}.w_o"), d_k, c, 0.3),
        }
    }
}

/// The latent predictor `f_θ`.
#[derive(Debug)]
pub struct Predictor {
    config: PredictorConfig,
    params: ParamSet,
    layout: Layout,
    tasks: TaskEmbedding,
    calls: AtomicUsize,
}

impl Clone for Predictor {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            tasks: self.tasks.clone(),
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

impl Predictor {
    pub fn new(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = Builder {
            params: &mut params,
            rng: SeededRng::fork(config.seed, 0x0E7),
        };
        let c = &config;
        let w_proj = b.matrix("semantic.proj", c.d_sem, c.d_unet, 1.0);
        let time1 = (
            b.matrix("time.fc1.weight", c.time_dim, c.temb_dim, 1.0),
            b.vector("time.fc1.bias", c.temb_dim),
        );
        let time2 = (
            b.matrix("time.fc2.weight", c.temb_dim, c.temb_dim, 1.0),
            b.vector("time.fc2.bias", c.temb_dim),
        );
        let conv_in = b.conv("conv_in", c.latent_channels, c.width(0), 1.0);
        let down = (0..c.levels)
            .map(|l| DownLevel {
                down: (l > 0).then(|| b.conv(&format!("down{l}.downsample"), c.width(l - 1), c.width(l), 1.0)),
                res: b.res(&format!("down{l}.res"), c.width(l), c.temb_dim),
                attn: c.attention[l].then(|| b.attn(&format!("down{l}.attn"), c.width(l), c.d_unet, c.d_k)),
            })
            .collect();
        let up = (0..c.levels.saturating_sub(1))
            .rev()
            .map(|l| UpLevel {
                merge: b.conv(&format!("up{l}.merge"), c.width(l + 1) + c.width(l), c.width(l), 1.0),
                res: b.res(&format!("up{l}.res"), c.width(l), c.temb_dim),
            })
            .collect();
        let norm_out = b.norm("norm_out", c.width(0));
        let conv_out = b.conv("conv_out", c.width(0), c.latent_channels, 0.3);
        let layout = Layout {
            w_proj,
            time1,
            time2,
            conv_in,
            down,
            up,
            norm_out,
            conv_out,
        };
        let tasks = TaskEmbedding::seeded(config.time_dim, config.seed);
        Ok(Self {
            config,
            params,
            layout,
            tasks,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn task_embedding(&self) -> &TaskEmbedding {
        &self.tasks
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Network evaluations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn w_proj_id(&self) -> ParamId {
        self.layout.w_proj
    }

    /// Replaces every parameter with the same-named tensor from `loaded`.
    pub fn load_params(&mut self, loaded: ParamSet) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters, model has {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for ((name, t), (lname, lt)) in self.params.iter().zip(loaded.iter()) {
            if name != lname || t.shape() != lt.shape() {
                return Err(Error::Checkpoint(format!(
                    "record {lname} {:?} does not match {name} {:?}",
                    lt.shape(),
                    t.shape()
                )));
            }
        }
        self.params = loaded;
        Ok(())
    }

    /// Writes `path` (binary) and `path.json` (model config).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: PredictorConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: side.clone(),
            source: e,
        })?;
        let mut p = Self::new(config)?;
        p.load_params(checkpoint::load(path)?)?;
        Ok(p)
    }

    /// `[1, temb_dim]` conditioning vector for a task.
    fn time_embedding(&self, tape: &mut Tape, bound: &Bound, task: Task) -> Result<Var> {
        let mut e = timestep_embedding(self.config.timestep, self.config.time_dim);
        e.data_mut()
            .iter_mut()
            .zip(self.tasks.get(task).data())
            .for_each(|(a, &s)| *a += s);
        let e = tape.constant(e.reshape(&[1, self.config.time_dim])?);
        let l = &self.layout;
        let h = tape.linear(e, bound.var(l.time1.0), Some(bound.var(l.time1.1)))?;
        let h = tape.silu(h);
        let h = tape.linear(h, bound.var(l.time2.0), Some(bound.var(l.time2.1)))?;
        Ok(tape.silu(h))
    }

    fn norm_act(&self, tape: &mut Tape, bound: &Bound, x: Var, n: &Norm) -> Result<Var> {
        let h = tape.groupnorm(x, self.config.groups, bound.var(n.gamma), bound.var(n.beta), 1e-5)?;
        Ok(tape.silu(h))
    }

    fn conv(&self, tape: &mut Tape, bound: &Bound, x: Var, c: &Conv, stride: usize) -> Result<Var> {
        tape.conv2d(x, bound.var(c.w), Some(bound.var(c.b)), stride)
    }

    fn res(&self, tape: &mut Tape, bound: &Bound, x: Var, temb: Var, r: &ResBlock) -> Result<Var> {
        let h = self.norm_act(tape, bound, x, &r.norm1)?;
        let h = self.conv(tape, bound, h, &r.conv1, 1)?;
        let t = tape.linear(temb, bound.var(r.temb_w), Some(bound.var(r.temb_b)))?;
        let h = tape.add_channel(h, t)?;
        let h = self.norm_act(tape, bound, h, &r.norm2)?;
        let h = self.conv(tape, bound, h, &r.conv2, 1)?;
        tape.add(x, h)
    }

    fn attn_vars(bound: &Bound, a: &Attn) -> AttentionVars {
        AttentionVars {
            w_q: bound.var(a.w_q),
            w_k: bound.var(a.w_k),
            w_v: bound.var(a.w_v),
            w_o: bound.var(a.w_o),
        }
    }

    /// `c_sem = F_sem · W_proj` for tokens `[B,N,d_sem]` or `[N,d_sem]`.
    pub fn condition(&self, tape: &mut Tape, bound: &Bound, tokens: Var) -> Result<Var> {
        project_var(tape, tokens, bound.var(self.layout.w_proj))
    }

    /// One evaluation of the network on latents `[B,C,h,w]` with
    /// conditioning `c_sem: [B,N,d_unet]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, c_sem: Var, task: Task) -> Result<Var> {
        let cfg = &self.config;
        let zs = tape.shape(z).to_vec();
        let &[b, c, h, w] = zs.as_slice() else {
            return Err(Error::shape("unet_forward", &zs, "expected [B,C,h,w]"));
        };
        if c != cfg.latent_channels {
            return Err(Error::shape(
                "unet_forward",
                &zs,
                format!("expected {} latent channels", cfg.latent_channels),
            ));
        }
        let div = 1 << (cfg.levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape("unet_forward", &zs, format!("latent extents must be divisible by {div}")));
        }
        match *tape.shape(c_sem) {
            [cb, _, d] if cb == b && d == cfg.d_unet => {}
            _ => {
                return Err(Error::mismatch("unet_forward conditioning", tape.shape(c_sem), &[b, 0, cfg.d_unet]));
            }
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let l = &self.layout;
        let temb = self.time_embedding(tape, bound, task)?;
        let mut x = self.conv(tape, bound, z, &l.conv_in, 1)?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for level in &l.down {
            if let Some(d) = &level.down {
                x = self.conv(tape, bound, x, d, 2)?;
            }
            x = self.res(tape, bound, x, temb, &level.res)?;
            if let Some(a) = &level.attn {
                x = attention::spatial_cross_attention(tape, x, c_sem, &Self::attn_vars(bound, a))?;
            }
            skips.push(x);
        }
        skips.pop();
        for level in &l.up {
            let skip = skips.pop().expect("one skip per up level");
            let u = tape.upsample2x(x)?;
            let cat = tape.concat_channels(u, skip)?;
            x = self.conv(tape, bound, cat, &level.merge, 1)?;
            x = self.res(tape, bound, x, temb, &level.res)?;
        }
        let x = self.norm_act(tape, bound, x, &l.norm_out)?;
        self.conv(tape, bound, x, &l.conv_out, 1)
    }

    /// Tape-free forward pass for one latent.
    pub fn unet_forward(&self, z: &LatentGrid, tokens: &SemanticTokens, task: Task) -> Result<LatentGrid> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zs = z.values().shape();
        let zv = tape.constant(z.values().reshape(&[1, zs[0], zs[1], zs[2]])?);
        let ts = tokens.values().shape();
        let tv = tape.constant(tokens.values().reshape(&[1, ts[0], ts[1]])?);
        let c = self.condition(&mut tape, &bound, tv)?;
        let out = self.forward(&mut tape, &bound, zv, c, task)?;
        LatentGrid::new(tape.value(out).reshape(zs)?)
    }

    /// Image `[3,H,W]` in `[−1,1]` to a unit normal map: encode, one
    /// forward pass with the normal task, decode, renormalize.
    pub fn predict_normal(&self, codec: &Codec, encoder: &SemanticEncoder, image: &Tensor) -> Result<NormalMap> {
        let &[3, h, w] = image.shape() else {
            return Err(Error::shape("predict_normal", image.shape(), "expected [3,H,W]"));
        };
        let div = codec.factor() << (self.config.levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "predict_normal",
                image.shape(),
                format!("H and W must be divisible by {div}"),
            ));
        }
        let z = codec.encode(image)?;
        let tokens = encoder.tokenize(image)?;
        let zn = self.unet_forward(&z, &tokens, Task::Normal)?;
        NormalMap::normalized(codec.decode(&zn)?)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(cfg: &PredictorConfig, seed: u64) -> (LatentGrid, SemanticTokens) {
        let mut rng = SeededRng::new(seed);
        let z = LatentGrid::new(Tensor::randn(&[cfg.latent_channels, 6, 8], 1.0, &mut rng)).unwrap();
        let t = SemanticTokens::new((1, 3), Tensor::randn(&[3, cfg.d_sem], 1.0, &mut rng)).unwrap();
        (z, t)
    }

    #[test]
    fn default_size_in_range() {
        let p = Predictor::new(PredictorConfig::default()).unwrap();
        let n = p.num_parameters();
        assert!((500_000..=1_000_000).contains(&n), "{n}");
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let cfg = PredictorConfig::tiny();
        let p = Predictor::new(cfg.clone()).unwrap();
        let (z, t) = inputs(&cfg, 1);
        let a = p.unet_forward(&z, &t, Task::Normal).unwrap();
        let b = p.unet_forward(&z, &t, Task::Normal).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values().shape(), z.values().shape());
        let r = p.unet_forward(&z, &t, Task::Rgb).unwrap();
        assert_ne!(a, r);
        assert_eq!(p.calls(), 3);
    }

    #[test]
    fn rejects_bad_latents() {
        let cfg = PredictorConfig::tiny();
        let p = Predictor::new(cfg.clone()).unwrap();
        let (_, t) = inputs(&cfg, 2);
        let z = LatentGrid::new(Tensor::zeros(&[5, 4, 4])).unwrap();
        assert!(p.unet_forward(&z, &t, Task::Normal).is_err());
        let z = LatentGrid::new(Tensor::zeros(&[12, 3, 4])).unwrap();
        assert!(p.unet_forward(&z, &t, Task::Normal).is_err());
        assert_eq!(p.calls(), 0);
    }

    #[test]
    fn attention_mask_controls_blocks() {
        let mut cfg = PredictorConfig::tiny();
        cfg.attention = vec![false, true];
        let p = Predictor::new(cfg).unwrap();
        assert!(p.params().find("down0.attn.w_q").is_none());
        assert!(p.params().find("down1.attn.w_q").is_some());
        let mut bad = PredictorConfig::tiny();
        bad.attention = vec![true];
        assert!(Predictor::new(bad).is_err());
    }

    #[test]
    fn predict_normal_is_unit_length() {
        let cfg = PredictorConfig {
            latent_channels: 48,
            d_sem: 64,
            ..PredictorConfig::tiny()
        };
        let p = Predictor::new(cfg).unwrap();
        let enc = SemanticEncoder::stand_in(crate::semantic::EncoderKind::Default).unwrap();
        let img = Tensor::uniform(&[3, 32, 32], -1.0, 1.0, &mut SeededRng::new(4));
        let n = p.predict_normal(&Codec::default(), &enc, &img).unwrap();
        let hw = 32 * 32;
        let d = n.tensor().data();
        for i in 0..hw {
            let len = (d[i] * d[i] + d[hw + i] * d[hw + i] + d[2 * hw + i] * d[2 * hw + i]).sqrt();
            assert!((len - 1.0).abs() < 1e-9);
        }
        assert_eq!(p.calls(), 1);
        assert!(p.predict_normal(&Codec::default(), &enc, &Tensor::zeros(&[3, 36, 32])).is_err());
    }
}
