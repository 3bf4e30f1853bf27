//! On-disk dataset layout: `seq_<k>/frame_<nnnn>.ppm` plus `seq_<k>/gt.jsonl`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{load_annotations, load_ppm, save_annotations, save_ppm, Sequence};
use crate::error::{Error, Result};

pub const GT_FILE: &str = "gt.jsonl";

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.ppm")
}

pub fn sequence_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("seq_{k}"))
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        fs::write(dir.join(frame_name(i)), save_ppm(f)?)?;
    }
    fs::write(dir.join(GT_FILE), save_annotations(&seq.boxes))?;
    Ok(())
}

/// Frames are read in index order until the first missing file.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(frame_name(frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(load_ppm(&fs::read(&p)?)?);
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument(format!("no frames found in {}", dir.display())));
    }
    let gt = dir.join(GT_FILE);
    let boxes = if gt.exists() { load_annotations(&fs::read_to_string(gt)?)? } else { Vec::new() };
    if !boxes.is_empty() && boxes.len() != frames.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: {} frames but {} annotations",
            dir.display(),
            frames.len(),
            boxes.len()
        )));
    }
    Ok(Sequence { frames, boxes })
}

/// `seq_<k>` directories under `root`, ordered by `k`.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(usize, PathBuf)> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k = name.strip_prefix("seq_")?.parse().ok()?;
            e.path().is_dir().then(|| (k, e.path()))
        })
        .collect();
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

pub fn write_dataset(root: &Path, seqs: &[Sequence]) -> Result<()> {
    for (k, s) in seqs.iter().enumerate() {
        write_sequence(&sequence_dir(root, k), s)?;
    }
    Ok(())
}

pub fn read_dataset(root: &Path) -> Result<Vec<Sequence>> {
    list_sequences(root)?.iter().map(|p| read_sequence(p)).collect()
}
