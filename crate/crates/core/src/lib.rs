pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod featurize;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod survival;
pub mod tensor;

pub use config::{AblationMode, EncoderConfig, GeneratorParams, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tensor::{Real, Shape, Tape, Tensor, Var};
