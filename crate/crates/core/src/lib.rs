//! Federated test-time adaptation simulator.
//!
//! Reverse-mode autodiff with second-order support ([`tensor`]), MLP models
//! ([`models`]), synthetic federated tasks ([`data`]), the round engine
//! ([`federation`]), meta-trained adaptation ([`fedtta`]), baselines
//! ([`baselines`]), logit-sharing heterogeneous federation ([`hetero`]) and a
//! config-driven experiment harness ([`harness`]).

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod fedtta;
pub mod harness;
pub mod hetero;
mod io;
pub mod models;
pub mod seed;
pub mod tensor;

pub use data::{
    ClientDataset, LabeledDataset, PartitionScheme, PartitionSpec, TaskSpec, TestClient,
    UnlabeledDataset,
};
pub use error::{Error, Result};
pub use federation::{Checkpoint, FederationConfig, GlobalModel, Method, Schedule};
pub use fedtta::{Patience, TestAdaptConfig};
pub use harness::ExperimentConfig;
pub use hetero::{EnsembleKnowledge, FamilyName, ModelFamily};
pub use models::{MlpSpec, ModelParams};
pub use tensor::{Graph, Tensor};
