use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Timestep index every forward pass uses.
pub const DEFAULT_TIMESTEP: usize = 999;

/// Sinusoidal embedding `[sin(t·ω_k) …, cos(t·ω_k) …]` with
/// `ω_k = 10000^(−k/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[dim]);
    for k in 0..half {
        let omega = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * omega;
        out.data_mut()[k] = arg.sin();
        out.data_mut()[half + k] = arg.cos();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Normal,
    Rgb,
}

/// The two fixed task vectors added to the timestep embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub s_n: Tensor,
    pub s_rgb: Tensor,
}

impl TaskEmbedding {
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = SeededRng::fork(seed, 0x7A5C);
        let s_n = Tensor::randn(&[dim], 1.0, &mut rng);
        let s_rgb = Tensor::randn(&[dim], 1.0, &mut rng);
        assert_ne!(s_n, s_rgb);
        Self { s_n, s_rgb }
    }

    pub fn get(&self, task: Task) -> &Tensor {
        match task {
            Task::Normal => &self.s_n,
            Task::Rgb => &self.s_rgb,
        }
    }
}
