//! The one-stream tracker: model, loss, training and sequence inference.

pub mod checkpoint;
mod config;
mod crop;
mod decode;
mod loss;
mod model;
mod track;
mod train;

pub use config::TrackerConfig;
pub use crop::CropWindow;
pub use decode::{argmax_cell, decode_box, HeadMaps};
pub use loss::{gt_cell, target_heatmap, tracking_loss, HEATMAP_SIGMA, IOU_WEIGHT, L1_WEIGHT};
pub use model::{Backbone, Head, HeadOutput, Tracker, CENTER_BIAS_INIT, CHANNELS};
pub use track::{predict, track_sequence, Variant, MIN_SIDE};
pub use train::{draw_sample, loss_csv, make_sample, stack, train, train_model, train_step, LossRecord, Sample};

#[cfg(test)]
mod tests;
