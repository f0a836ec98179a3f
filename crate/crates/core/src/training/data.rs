use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::normal::flip_planes;
use crate::rng::SeededRng;
use crate::scenegen::SceneSample;
use crate::semantic::SemanticEncoder;
use crate::tensor::Tensor;
use crate::wavelet::{edge_mask, EdgeMask};

/// Checks a weighted source list; returns the normalized weights.
pub fn validate_sources(sources: &[&[SceneSample]], weights: &[f64]) -> Result<Vec<f64>> {
    if sources.len() != weights.len() {
        return Err(Error::arg(
            "mixture",
            format!("{} weights for {} sources", weights.len(), sources.len()),
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::arg("mixture", "weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::arg("mixture", "weights must have a positive sum"));
    }
    if let Some(i) = (0..sources.len()).find(|&i| weights[i] > 0.0 && sources[i].is_empty()) {
        return Err(Error::arg("mixture", format!("source {i} is empty but has weight {}", weights[i])));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Draws `size` `(source, index)` pairs: a source by normalized weight, then
/// a uniform element of it.
pub fn sample_indices(
    sources: &[&[SceneSample]],
    weights: &[f64],
    size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<(usize, usize)>> {
    let probs = validate_sources(sources, weights)?;
    Ok((0..size)
        .map(|_| {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut src = probs.iter().rposition(|&p| p > 0.0).expect("positive weight exists");
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc && p > 0.0 {
                    src = i;
                    break;
                }
            }
            (src, rng.below(sources[src].len()))
        })
        .collect())
}

/// [`sample_indices`] resolved to sample references.
pub fn sample_batch<'a>(
    sources: &[&'a [SceneSample]],
    weights: &[f64],
    size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<&'a SceneSample>> {
    Ok(sample_indices(sources, weights, size, rng)?
        .into_iter()
        .map(|(s, i)| &sources[s][i])
        .collect())
}

/// Horizontally mirrors every image plane, mask and the depth map of a
/// sample; normals also get their x-component negated.
pub fn flip_sample(s: &SceneSample) -> SceneSample {
    let w = s.camera.width;
    let mut depth = s.depth.clone();
    for row in depth.chunks_mut(w) {
        row.reverse();
    }
    SceneSample {
        rgb: flip_planes(&s.rgb),
        rgb_randomized_material: flip_planes(&s.rgb_randomized_material),
        rgb_background_only: flip_planes(&s.rgb_background_only),
        normal_gt: s.normal_gt.flip_horizontal(),
        depth,
        mask_fg: s.mask_fg.flip_horizontal(),
        mask_transparent: s.mask_transparent.flip_horizontal(),
        camera: s.camera,
    }
}

/// Returns a flipped copy with probability `prob`, otherwise a clone.
pub fn augment_flip(s: &SceneSample, rng: &mut SeededRng, prob: f64) -> SceneSample {
    if rng.bernoulli(prob) {
        flip_sample(s)
    } else {
        s.clone()
    }
}

/// Stacks equally-shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::arg("stack", "empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::mismatch("stack", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// Model-ready tensors for one minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Input images in `[−1,1]`, `[B,3,H,W]`.
    pub rgb: Tensor,
    /// Ground-truth normals, `[B,3,H,W]`.
    pub normals: Tensor,
    pub edge_masks: Vec<EdgeMask>,
    pub z_rgb: Tensor,
    pub z_normal: Tensor,
    /// Frozen semantic tokens, `[B,N,d_sem]`.
    pub tokens: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&SceneSample], codec: &Codec, encoder: &SemanticEncoder) -> Result<Self> {
        let mut rgb = Vec::with_capacity(samples.len());
        let mut normals = Vec::with_capacity(samples.len());
        let mut edge_masks = Vec::with_capacity(samples.len());
        let mut z_rgb = Vec::with_capacity(samples.len());
        let mut z_normal = Vec::with_capacity(samples.len());
        let mut tokens = Vec::with_capacity(samples.len());
        for s in samples {
            let input = s.input();
            z_rgb.push(codec.encode(&input)?.into_values());
            z_normal.push(codec.encode_normal(&s.normal_gt)?.into_values());
            tokens.push(encoder.tokenize(&input)?.values().clone());
            edge_masks.push(edge_mask(&s.normal_gt)?);
            normals.push(s.normal_gt.tensor().clone());
            rgb.push(input);
        }
        Ok(Self {
            rgb: stack(&rgb)?,
            normals: stack(&normals)?,
            edge_masks,
            z_rgb: stack(&z_rgb)?,
            z_normal: stack(&z_normal)?,
            tokens: stack(&tokens)?,
        })
    }

    pub fn len(&self) -> usize {
        self.edge_masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge_masks.is_empty()
    }
}
