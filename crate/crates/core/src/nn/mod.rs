//! Lesion classifier: E2E on signal channels or F2E on parameter maps.

mod input;
mod network;
mod serialize;
mod split;
mod train;

pub use input::{maps_input, predict_case, predict_prepared, signal_scale, stack_input, CaseInput, Example, Scorer};
pub use network::{ArchitectureConfig, Layer, LayerKind, MaskedInput, Network, Pooling, TrainingMeta, CLASSES};
pub use serialize::{load_network, network_from_bytes, network_to_bytes, save_network, NETWORK_MAGIC, NETWORK_VERSION};
pub use split::{make_splits, Fold, SplitPlan, FOLDS, MIN_CASES};
pub use train::{backward_check, gradient_pair, train, train_steps, validation_error, TrainConfig, GRADIENT_CHECK_FLOOR, REVIVE_ROUNDS};
