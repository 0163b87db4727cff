//! Learning switching port-Hamiltonian systems from trajectory data with
//! Gaussian processes.
//!
//! Training ([`pipeline::train`]) estimates states and derivatives with
//! per-trajectory time GPs, reconstructs `∇H` targets through the known
//! `J_s − R_s`, fits one GP per gradient component, and learns the switching
//! policy with a Laplace GP classifier. Prediction ([`simulate`]) draws
//! pathwise samples of both and integrates them; every sample is passive by
//! construction.

pub mod bench;
pub mod classification;
pub mod error;
pub mod features;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod pipeline;
pub mod registry;
pub mod regression;
pub mod seed;
pub mod simulate;
pub mod sphs;
pub mod structures;

pub use error::{Error, Result};
pub use kernel::KernelParams;
pub use pipeline::{train, TrainConfig, TrainedModel, TrajectoryDataset};
pub use sphs::{GradientField, SphsStructure, SwitchingPolicy};
pub use structures::StructureDef;
