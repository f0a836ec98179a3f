//! Shared inputs for the criterion benches in `benches/`.

use glassnorm::codec::Codec;
use glassnorm::scenegen::{generate_samples, SceneSample};
use glassnorm::semantic::SemanticEncoder;
use glassnorm::training::Batch;
use glassnorm::{SeededRng, Tensor};

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut SeededRng::new(seed))
}

/// A rendered batch at the default codec and encoder.
pub fn toy_batch(batch: usize, size: usize) -> (Vec<SceneSample>, Batch) {
    let samples = generate_samples(batch, 17, size).expect("scenes render");
    let refs: Vec<&SceneSample> = samples.iter().collect();
    let encoder = SemanticEncoder::stand_in(Default::default()).expect("default encoder");
    let b = Batch::from_samples(&refs, &Codec::default(), &encoder).expect("batch builds");
    (samples, b)
}
