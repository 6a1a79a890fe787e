//! Client side of a federation: balanced sampling, augmentation, one-epoch
//! local training, candidate history, model selection and fine-tuning.

mod augment;
mod history;
mod sampler;
mod session;
mod train;

pub use augment::{augment, rotate, AugmentConfig, AugmentDraw};
pub use history::{select_best_model, CandidateSource, CheckpointStore, HistoryRecord, TrainHistory};
pub(crate) use history::append_jsonl;
pub use sampler::balanced_batches;
pub use session::{client_seed, ClientOutcome, FedClient};
pub use train::{
    fine_tune, local_training, record_candidate, train_local, validation_kappa, LocalUpdate, TrainConfig,
};
