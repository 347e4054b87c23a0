//! Episodic meta-learning harness: model assembly, episode sampling,
//! training phases, evaluation and checkpoints.

pub mod checkpoint;
pub mod episode;
pub mod eval;
pub mod model;
pub mod train;

pub use checkpoint::{Checkpoint, Phase, RngState};
pub use episode::{sample_episode, Episode};
pub use eval::{evaluate_model, evaluate_with, EvalProtocol, EvalReport};
pub use model::{argmax, nll_loss, prototype_probabilities, AlignNet, AlignTrace, DistanceOn, EpisodeForward, ModelConfig, PairAlignment, Stage};
pub use train::{meta_train, pretrain, LogRecord, PhaseConfig, RunSetup, TrainOutcome};
