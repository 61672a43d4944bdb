//! Decentralized federated learning over random walks on a device graph.
//!
//! The crate simulates DFedRW (multiple local updates spread along Markov-chain
//! walks over neighboring devices), its quantized variant QDFedRW, and the
//! FedAvg, DSGD and DFedAvg baselines, together with the topology, data, model
//! and bound-evaluation machinery they need.

pub mod analysis;
pub mod datasets;
pub mod error;
pub mod fedsim;
pub mod model;
pub mod quantizer;
pub mod scalar;
pub mod seed;
pub mod topology;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ParamVector = model::Params<f64>;
pub type ParamVector32 = model::Params<f32>;
pub type Dataset64 = datasets::Dataset<f64>;
pub type Dataset32 = datasets::Dataset<f32>;
pub type Simulation64 = fedsim::Simulation<f64>;
pub type Simulation32 = fedsim::Simulation<f32>;
