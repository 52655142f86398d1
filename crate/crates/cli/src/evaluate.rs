//! Streaming evaluation: each video runs frame by frame with a fresh
//! memory, predictions are brought back to the source resolution and
//! quantized to 8 bits, then scored.

use std::path::Path;

use hrvvs_core::datasets::{io, VideoRecord};
use hrvvs_core::metrics::{aggregate, class_scores, EvalMode, FrameRecord, MetricsReport};
use hrvvs_core::model::argmax_labels;
use hrvvs_core::{Error, Model, ParamStore, Result, Tensor};

use crate::data::LoadedVideo;

/// 8-bit probabilities `[K, H, W]` at the source resolution, the form in
/// which predictions are scored and dumped.
pub fn quantized_probs(probs: &Tensor, height: usize, width: usize) -> Vec<u8> {
    probs
        .resize_bilinear(height, width)
        .data()
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn score_frame(video: &str, frame: usize, q: &[u8], labels: &[u8], k: usize, (h, w): (usize, usize), mode: EvalMode) -> Result<FrameRecord> {
    let probs: Vec<f64> = q.iter().map(|&v| v as f64 / 255.0).collect();
    Ok(FrameRecord {
        video: video.to_string(),
        frame,
        per_class: class_scores(&probs, labels, k, h, w, mode)?,
    })
}

fn dump_paths(dir: &Path, video: &str, frame: usize, class: usize) -> std::path::PathBuf {
    dir.join(video).join(format!("{frame:05}_c{class}.png"))
}

/// Per-frame quantized predictions of one video.
pub fn predict_quantized(model: &Model, store: &ParamStore, video: &LoadedVideo) -> Result<Vec<Vec<u8>>> {
    let (h, w) = (video.record.height, video.record.width);
    Ok(model
        .predict_video(store, &video.frames)?
        .iter()
        .map(|p| quantized_probs(p, h, w))
        .collect())
}

/// Score every video. With `dump`, per-class probability maps are written
/// as grayscale PNGs and argmax masks as palette PNGs under `dump/<video>/`.
pub fn evaluate(model: &Model, store: &ParamStore, videos: &[LoadedVideo], mode: EvalMode, dump: Option<&Path>) -> Result<MetricsReport> {
    if videos.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let k = model.config().num_classes;
    let mut records = Vec::new();
    for v in videos {
        let (h, w) = (v.record.height, v.record.width);
        let preds = predict_quantized(model, store, v)?;
        if let Some(dir) = dump {
            let vdir = dir.join(v.id());
            std::fs::create_dir_all(&vdir).map_err(|e| Error::Io { path: vdir.clone(), source: e })?;
        }
        for (f, q) in preds.iter().enumerate() {
            let labels = v.record.load_mask(f, h, w)?;
            records.push(score_frame(v.id(), f, q, &labels, k, (h, w), mode)?);
            if let Some(dir) = dump {
                for c in 1..k {
                    io::write_gray(&dump_paths(dir, v.id(), f, c), h, w, &q[c * h * w..(c + 1) * h * w])?;
                }
                let scores = Tensor::new(&[k, h, w], q.iter().map(|&b| b as f64).collect());
                io::write_mask(&dir.join(v.id()).join(format!("{f:05}.png")), h, w, &argmax_labels(&scores))?;
            }
        }
    }
    aggregate(&records)
}

/// Recompute a report from dumped probability maps. The background map is
/// not needed by the vessel-class metrics and is left at zero.
pub fn evaluate_dumps(dump: &Path, records: &[&VideoRecord], num_classes: usize, mode: EvalMode) -> Result<MetricsReport> {
    let mut out = Vec::new();
    for r in records {
        let (h, w) = (r.height, r.width);
        for f in 0..r.len() {
            let mut q = vec![0u8; num_classes * h * w];
            for c in 1..num_classes {
                let path = dump_paths(dump, &r.id, f, c);
                let (dh, dw, values) = io::read_mask(&path)?;
                if (dh, dw) != (h, w) {
                    return Err(Error::Ingestion {
                        path,
                        reason: format!("dump is {dh}x{dw}, expected {h}x{w}"),
                    });
                }
                q[c * h * w..(c + 1) * h * w].copy_from_slice(&values);
            }
            let labels = r.load_mask(f, h, w)?;
            out.push(score_frame(&r.id, f, &q, &labels, num_classes, (h, w), mode)?);
        }
    }
    aggregate(&out)
}

pub fn write_report(report: &MetricsReport, out: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    for (ext, body) in [("csv", report.to_csv()), ("json", report.to_json())] {
        let p = out.join(format!("{stem}.{ext}"));
        std::fs::write(&p, body).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    Ok(())
}
