//! Synthetic sequences, PPM images and JSON-lines annotations.

mod annotations;
mod layout;
mod ppm;
mod scene;

pub use annotations::{load_annotations, save_annotations};
pub use layout::{
    frame_name, list_sequences, read_dataset, read_sequence, sequence_dir, write_dataset, write_sequence, GT_FILE,
};
pub use ppm::{load_ppm, save_ppm};
pub use scene::{gen_sequence, SceneConfig, Sequence, TargetShape};

/// `count` sequences whose seeds are `seed, seed + 1, ...`.
pub fn gen_dataset(cfg: &SceneConfig, count: usize) -> crate::Result<Vec<Sequence>> {
    (0..count as u64)
        .map(|k| gen_sequence(&SceneConfig { seed: cfg.seed.wrapping_add(k), ..cfg.clone() }))
        .collect()
}
