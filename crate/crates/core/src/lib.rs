//! Variational knowledge distillation from a privileged text view into an
//! image-only multi-label classifier.
//!
//! During training the model sees paired image features, token sequences
//! and labels. A conditional prior `p(z_I | x_I)` is pulled toward a
//! text-conditioned posterior `q(z_T | x_T)` by a KL term inside the
//! training objective, while both branches learn to predict the labels. At
//! inference only the image branch runs: latents are drawn from the
//! conditional prior and the head's probabilities are averaged.
//!
//! Everything runs on a small dense `f64` reverse-mode engine in [`tensor`].

pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use data::{Batch, Dataset, GenSpec, PairedSample};
pub use distributions::{DiagonalGaussian, LatentSample};
pub use error::{Error, Result};
pub use eval::{EvalReport, Predictions};
pub use model::{ModelConfig, VkdModel};
pub use objectives::{AnnealSchedule, LossBreakdown, Objective};
pub use tensor::{Graph, Tensor, Var};
pub use trainer::{TrainConfig, TrainLogRow};

