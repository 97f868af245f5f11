//! Learning the panoramic-to-volume mapping.
//!
//! A small reverse-mode autodiff tape ([`tape`]) drives a 2D encoder–decoder
//! whose output channels are read as depth ([`net`]), a 3D patch
//! discriminator, least-squares adversarial plus voxel and projection losses
//! ([`loss`]), Adam, and a seeded batch-1 training loop ([`train`]).
//! Everything runs on one thread and is bit-reproducible for a fixed seed.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model_io;
pub mod net;
pub mod patches;
pub mod reconstruct;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use error::{Error, Result};
pub use loss::LossWeights;
pub use model_io::{load_model, save_model};
pub use net::{ArchDescriptor, NetParams, ParamSet};
pub use reconstruct::{reconstruct_curved, smear_baseline, FlatGenerator, Smear};
pub use scalar::Scalar;
pub use tape::{ConvGeom, Tape, Var};
pub use tensor::Tensor;
pub use train::{train, train_from, EpochRecord, TrainConfig, TrainOutcome, TrainingPair};
