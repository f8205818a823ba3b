//! Semi-supervised domain adaptation with an incomplete target domain.
//!
//! Target instances may have missing features. A generator imputes them,
//! domain-specific autoencoders and a shared extractor map both domains into
//! a common space, and a discriminator plus a contrastive term align the
//! domains while a classifier is trained on labeled rows from both.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use autodiff::{GradientSet, Matrix, Tape, Var};
pub use data::{Batch, Domain, DomainDataset, Instance};
pub use error::{IdianError, Result};
pub use losses::{LossReport, PairMode};
pub use metrics::{evaluate, EvalReport};
pub use model::{build_model, ArchSpec, IdianModel};
pub use nn::{Activation, DenseLayer, Direction, Mlp, NetId, ParamKey, ParamKind};
pub use trainer::{build_variant, train, TrainConfig, TrainHistory, Variant};
