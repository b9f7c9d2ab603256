//! Adversarial diffusion learning over graphs.
//!
//! A network of `K` agents cooperates through the adapt-then-combine (ATC)
//! diffusion strategy to minimize an aggregate worst-case (minimax) risk.
//! Every agent perturbs its incoming sample with the worst-case `ℓ2`-bounded
//! perturbation at its current model, takes a local gradient step on the
//! perturbed sample, and then convexly combines its neighbours' intermediate
//! states with the weights of a left-stochastic combination matrix.
//!
//! The crate is organised bottom-up:
//!
//! - [`topology`]: random graphs, combination matrices and Perron vectors.
//! - [`model`]: the logistic loss, its gradients and robust risks.
//! - [`attacks`]: exact worst-case perturbation, FGM and DeepFool.
//! - [`diffusion`]: the adversarial ATC engine and its instrumentation.
//! - [`analysis`]: the robust minimizer oracle, MSD curves, Lipschitz and
//!   gradient-noise checks, robustness sweeps.
//! - [`data`]: synthetic data, IDX/CSV ingestion and per-agent streams.
//! - [`config`], [`experiment`] and [`verify`]: the experiment layer used by
//!   the command-line runner.

pub mod analysis;
pub mod attacks;
pub mod config;
pub mod data;
pub mod diffusion;
mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod topology;
pub mod verify;

pub use analysis::{ConvergenceReport, SweepRow};
pub use attacks::{AttackKind, AttackSpec};
pub use config::RunConfig;
pub use data::{Dataset, DatasetSpec, StreamMode, SyntheticSpec};
pub use diffusion::{NetworkState, RoundTrace, StepParams, TrainConfig};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{EmpiricalConstants, Label, LabeledSample, RobustLogistic};
pub use topology::{CombinationMatrix, CombinationRule, Graph};
