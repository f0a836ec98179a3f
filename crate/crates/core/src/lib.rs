pub mod autodiff;
pub mod codec;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod normal;
pub mod params;
pub mod predictor;
pub mod rng;
pub mod scenegen;
pub mod semantic;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
