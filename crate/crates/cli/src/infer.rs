//! Masks and contour overlays for a directory of frames.

use std::path::{Path, PathBuf};

use hrvvs_core::autograd::{Graph, Trainable};
use hrvvs_core::datasets::io::{self, PALETTE};
use hrvvs_core::model::{argmax_labels, probabilities};
use hrvvs_core::{Error, Model, ParamStore, Result};

#[derive(Debug, Default)]
pub struct InferSummary {
    pub written: Vec<PathBuf>,
    /// Frames that could not be read or written, with the reason.
    pub failed: Vec<(PathBuf, String)>,
}

/// Input copy with class-coloured contours; pixels labeled 0 are untouched.
pub fn overlay(rgb: &[u8], labels: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = rgb.to_vec();
    for y in 0..height {
        for x in 0..width {
            let l = labels[y * width + x];
            if l == 0 {
                continue;
            }
            let differs = |dy: isize, dx: isize| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize || labels[ny as usize * width + nx as usize] != l
            };
            if differs(-1, 0) || differs(1, 0) || differs(0, -1) || differs(0, 1) {
                let c = PALETTE[(l as usize).min(PALETTE.len() - 1)];
                out[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&c);
            }
        }
    }
    out
}

/// Stream every PNG in `frames_dir` (file-name order) through the model as
/// one video; writes `masks/<name>` and `overlays/<name>` under `out`.
/// Unreadable frames are reported and skipped.
pub fn infer(model: &Model, store: &ParamStore, frames_dir: &Path, out: &Path) -> Result<InferSummary> {
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(frames_dir)
        .map_err(|e| Error::Io { path: frames_dir.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    inputs.sort();
    let (mdir, odir) = (out.join("masks"), out.join("overlays"));
    for d in [&mdir, &odir] {
        std::fs::create_dir_all(d).map_err(|e| Error::Io { path: d.clone(), source: e })?;
    }
    let cfg = model.config();
    let mut state = model.new_stream();
    let mut summary = InferSummary::default();
    for path in inputs {
        let (h, w, rgb) = match io::read_rgb(&path) {
            Ok(v) => v,
            Err(e) => {
                summary.failed.push((path, e.to_string()));
                continue;
            }
        };
        let frame = io::rgb_to_tensor(h, w, &rgb).resize_bilinear(cfg.height, cfg.width);
        let mut g = Graph::new(store).with_trainable(Trainable::Nothing);
        let fwd = model.forward_frame(&mut g, &frame, &state)?;
        let probs = probabilities(g.value(fwd.logits)).resize_bilinear(h, w);
        model.commit(&g, &fwd, &mut state)?;
        let labels = argmax_labels(&probs);
        let name = path.file_name().expect("file path").to_owned();
        let written = io::write_mask(&mdir.join(&name), h, w, &labels)
            .and_then(|_| io::write_rgb(&odir.join(&name), h, w, &overlay(&rgb, &labels, h, w)));
        match written {
            Ok(()) => summary.written.push(path),
            Err(e) => summary.failed.push((path, e.to_string())),
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_marks_only_contours() {
        let (h, w) = (5, 5);
        let mut labels = vec![0u8; 25];
        for y in 1..4 {
            for x in 1..4 {
                labels[y * w + x] = 2;
            }
        }
        let rgb: Vec<u8> = (0..75).map(|i| i as u8).collect();
        let o = overlay(&rgb, &labels, h, w);
        for p in 0..25 {
            let px = &o[p * 3..p * 3 + 3];
            if labels[p] == 0 || p == 12 {
                assert_eq!(px, &rgb[p * 3..p * 3 + 3]);
            } else {
                assert_eq!(px, &PALETTE[2]);
            }
        }
    }
}
