//! Video dataset layout, splitting, window sampling and a synthetic
//! vessel-video generator.
//!
//! Layout: `root/<video_id>/frames/<n>.png` (RGB) with a mask of the same
//! file name under `root/<video_id>/masks/` holding labels 0, 1, 2.

pub mod io;
mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub use synth::{class_color_bytes, render_video, synth_generate, SynthConfig, SynthFrame, SynthVideo, CLASS_COLORS};

pub const MAX_LABEL: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
    pub height: usize,
    pub width: usize,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `i` resampled to `height x width`.
    pub fn load_frame(&self, i: usize, height: usize, width: usize) -> Result<Tensor> {
        let f = io::read_frame(&self.frames[i])?;
        let (h, w) = (f.shape()[1], f.shape()[2]);
        Ok(if (h, w) == (height, width) { f } else { f.resize_bilinear(height, width) })
    }

    /// Labels of frame `i`, nearest-resampled to `height x width`.
    pub fn load_mask(&self, i: usize, height: usize, width: usize) -> Result<Vec<u8>> {
        let (h, w, labels) = io::read_mask(&self.masks[i])?;
        check_labels(&self.masks[i], &labels)?;
        Ok(if (h, w) == (height, width) {
            labels
        } else {
            io::resize_labels(&labels, h, w, height, width)
        })
    }
}

fn check_labels(path: &Path, labels: &[u8]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&v| v > MAX_LABEL) {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!("mask value {bad} outside 0..={MAX_LABEL}"),
        });
    }
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Discover every video under `root`, validating frame/mask pairing and
/// mask values. Videos are ordered by id.
pub fn load_dataset(root: &Path) -> Result<Vec<VideoRecord>> {
    ensure!(root.is_dir(), Contract, "dataset root {} is not a directory", root.display());
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join("frames").is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    let mut records = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let frames = sorted_pngs(&dir.join("frames"))?;
        let mut masks = Vec::with_capacity(frames.len());
        let (mut height, mut width) = (0, 0);
        for (i, f) in frames.iter().enumerate() {
            let name = f.file_name().expect("file path");
            let m = dir.join("masks").join(name);
            if !m.is_file() {
                return Err(Error::Ingestion {
                    path: f.clone(),
                    reason: "frame has no mask".into(),
                });
            }
            let (mh, mw, labels) = io::read_mask(&m)?;
            check_labels(&m, &labels)?;
            if i == 0 {
                let (w, h) = image::image_dimensions(f).map_err(|e| Error::Image {
                    path: f.clone(),
                    reason: e.to_string(),
                })?;
                (height, width) = (h as usize, w as usize);
            }
            if (mh, mw) != (height, width) {
                return Err(Error::Ingestion {
                    path: m,
                    reason: format!("mask is {mh}x{mw}, frames are {height}x{width}"),
                });
            }
            masks.push(m);
        }
        records.push(VideoRecord {
            id,
            frames,
            masks,
            height,
            width,
        });
    }
    Ok(records)
}

/// Video ids per split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }
}

/// Sizes for a 7:1:2 split of `n` videos: `floor(n/10)` validation,
/// `floor(n/5)` test, the remainder training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 5;
    (n - val - test, val, test)
}

/// Seeded video-level 7:1:2 split. Ids inside each split are sorted.
pub fn split(records: &[VideoRecord], seed: u64) -> Result<Split> {
    ensure!(!records.is_empty(), Contract, "cannot split an empty dataset");
    let mut ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, va, _) = split_sizes(ids.len());
    let mut train = ids[..tr].to_vec();
    let mut val = ids[tr..tr + va].to_vec();
    let mut test = ids[tr + va..].to_vec();
    train.sort();
    val.sort();
    test.sort();
    Ok(Split { train, val, test })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipWindow {
    pub video: String,
    pub start: usize,
    pub len: usize,
}

impl ClipWindow {
    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Consecutive windows `[s, s + t_clip)` for `s = 0, stride, ...`; empty
/// when the video is shorter than `t_clip`.
pub fn sample_windows(record: &VideoRecord, t_clip: usize, stride: usize) -> Result<Vec<ClipWindow>> {
    ensure!(t_clip >= 1 && stride >= 1, Contract, "window length and stride must be >= 1");
    let n = record.len();
    if t_clip > n {
        return Ok(Vec::new());
    }
    Ok((0..=n - t_clip)
        .step_by(stride)
        .map(|start| ClipWindow {
            video: record.id.clone(),
            start,
            len: t_clip,
        })
        .collect())
}

#[cfg(test)]
mod tests;
