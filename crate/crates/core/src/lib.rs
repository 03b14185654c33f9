//! Privacy-preserving multi-party learning with an encrypted reliability check.
//!
//! Participants train local models, upload Paillier-encrypted weights, and the
//! server drops participants whose weights are not similar enough to the model
//! initiator's before averaging. Similarity is computed under encryption with
//! a server-held blinding factor.

pub mod data;
pub mod fixed_point;
pub mod harness;
pub mod linalg;
pub mod ml;
pub mod paillier;
pub mod protocol;
pub mod similarity;
pub mod wire;

pub use data::{Dataset, PartitionPlan, ShardMap};
pub use fixed_point::FixedPointCodec;
pub use harness::{Mode, RunOutcome, TrainingRunConfig};
pub use ml::{Evaluation, ModelParams, ModelSpec, TrainConfig};
pub use paillier::{Ciphertext, PrivateKey, PublicKey};
pub use protocol::{Aggregation, RunReport, RunSetup, ThresholdSchedule};
pub use similarity::{BlindingFactor, SimilarityScore};
