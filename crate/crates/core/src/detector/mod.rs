//! Toy point-set map detector: patch encoder over the BEV raster, query
//! generation and fusion, the decoder stack, class/point heads, Hungarian
//! set loss and a deterministic training loop.

mod config;
mod encoder;
mod loss;
mod model;
mod train;

pub use config::DetectorConfig;
pub use encoder::{sinusoidal_2d, BevEncoder, EncodedBev};
pub use loss::{
    hungarian, instance_cost, match_instances, orderings, point_term, set_loss, slot_points, targets_for, FrozenMatch,
    GtTarget, LossParts, NO_OBJECT,
};
pub use model::{derived_rng, Detector, ForwardPass, HeadOutput, PredictionSet, SlotPrediction};
pub use train::{
    evaluate_model, load_checkpoint, load_trained, metric_config, prepare, save_checkpoint, scene_loss, split, train,
    EpochLog, LayerMatches, LogHeader, PreparedScene, TrainState, TrainSummary, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE,
};
