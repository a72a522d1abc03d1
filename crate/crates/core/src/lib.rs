pub mod autograd;
pub mod scalar;

pub use scalar::Scalar;
pub mod arch;
pub mod nn;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod feature_encoder;
pub mod model;
pub mod training;
pub mod evaluation;

/// Single precision, used for training and serving.
pub type Tape32 = autograd::Tape<f32>;
pub type Params32 = nn::ParamStore<f32>;
pub type Adam32 = nn::Adam<f32>;
/// Double precision, used for gradient checks.
pub type Tape64 = autograd::Tape<f64>;
pub type Params64 = nn::ParamStore<f64>;
pub type Adam64 = nn::Adam<f64>;
