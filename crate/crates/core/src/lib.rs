//! Shared latent space for trajectories and comparative language, with
//! iterative improvement and reward learning on top of it.

pub mod diff;
pub mod error;
pub mod harness;
pub mod improve;
pub mod lang;
pub mod latent;
pub mod reward;
pub mod seed;
pub mod simhuman;
pub mod world;

pub use error::{Error, Result};
pub use improve::{improve_loop, improve_step, ImproveConfig, ImprovementTrace, Objective};
pub use lang::{Catalog, Direction, Triplet, TripletDataset, Utterance, Vocabulary};
pub use latent::{EncoderPair, LatentConfig, PoolEmbeddings};
pub use reward::{auc, bt_prob, LearningCurve, LossMode, RewardConfig, RewardModel, RewardRun};
pub use simhuman::{ChoiceSource, Feedback, FeedbackSource, HumanSpec, SimulatedHuman, SimulatedSource};
pub use world::{Features, TrajId, Trajectory, TrajectoryPool, WorldConfig};
