//! Per-frame scoring per class and aggregation into per-video and
//! dataset means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{dice, e_measure_mean, jaccard, s_measure, weighted_f, MaskPair};
use crate::error::{ensure, Result};

pub const METRIC_COLUMNS: [&str; 5] = ["Jaccard", "Dice", "S_alpha", "F_beta_w", "E_phi_mn"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "Jaccard")]
    pub jaccard: f64,
    #[serde(rename = "Dice")]
    pub dice: f64,
    #[serde(rename = "S_alpha")]
    pub s_alpha: f64,
    #[serde(rename = "F_beta_w")]
    pub f_beta_w: f64,
    #[serde(rename = "E_phi_mn")]
    pub e_phi_mn: f64,
}

impl Scores {
    pub fn of(pair: &MaskPair) -> Self {
        Self {
            jaccard: jaccard(pair),
            dice: dice(pair),
            s_alpha: s_measure(pair, 0.5),
            f_beta_w: weighted_f(pair, 1.0),
            e_phi_mn: e_measure_mean(pair),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.jaccard, self.dice, self.s_alpha, self.f_beta_w, self.e_phi_mn]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self {
            jaccard: v[0],
            dice: v[1],
            s_alpha: v[2],
            f_beta_w: v[3],
            e_phi_mn: v[4],
        }
    }

    pub fn mean(items: &[Scores]) -> Scores {
        let n = items.len().max(1) as f64;
        let mut acc = [0.0; 5];
        for s in items {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        Self::from_values(acc.map(|a| a / n))
    }
}

/// How multi-class masks are reduced to binary pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Each vessel class separately, then macro-averaged.
    #[default]
    PerClass,
    /// All vessel classes merged into one foreground.
    Union,
}

/// Scores of one frame from class probabilities `[K, H, W]` (flat,
/// class-major) and labels. Returns one entry per vessel class (or a
/// single entry in union mode).
pub fn class_scores(probs: &[f64], labels: &[u8], num_classes: usize, height: usize, width: usize, mode: EvalMode) -> Result<Vec<Scores>> {
    let n = height * width;
    ensure!(
        probs.len() == num_classes * n && labels.len() == n,
        Contract,
        "scores need {num_classes} x {height} x {width} probabilities and matching labels"
    );
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    match mode {
        EvalMode::PerClass => (1..num_classes)
            .map(|c| {
                let pred: Vec<f64> = probs[c * n..(c + 1) * n].iter().copied().map(clamp).collect();
                let gt: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
                Ok(Scores::of(&MaskPair::new(&pred, &gt, height, width)?))
            })
            .collect(),
        EvalMode::Union => {
            let pred: Vec<f64> = (0..n).map(|i| clamp(1.0 - probs[i])).collect();
            let gt: Vec<bool> = labels.iter().map(|&l| l > 0).collect();
            Ok(vec![Scores::of(&MaskPair::new(&pred, &gt, height, width)?)])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video: String,
    pub frame: usize,
    pub per_class: Vec<Scores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRow {
    pub video: String,
    pub frames: usize,
    pub per_class: Vec<Scores>,
    pub mean: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub videos: Vec<VideoRow>,
    pub per_class: Vec<Scores>,
    pub mean: Scores,
}

/// Per-video means (frames averaged), then the dataset mean over videos.
/// Videos are ordered by id, so input order does not matter.
pub fn aggregate(records: &[FrameRecord]) -> Result<MetricsReport> {
    ensure!(!records.is_empty(), Contract, "no frames to aggregate");
    let k = records[0].per_class.len();
    ensure!(
        k > 0 && records.iter().all(|r| r.per_class.len() == k),
        Contract,
        "frames disagree on the number of classes"
    );
    let mut by_video: BTreeMap<&str, Vec<&FrameRecord>> = BTreeMap::new();
    for r in records {
        by_video.entry(&r.video).or_default().push(r);
    }
    let videos: Vec<VideoRow> = by_video
        .into_iter()
        .map(|(video, mut frames)| {
            frames.sort_by_key(|f| f.frame);
            let per_class: Vec<Scores> = (0..k)
                .map(|c| Scores::mean(&frames.iter().map(|f| f.per_class[c]).collect::<Vec<_>>()))
                .collect();
            VideoRow {
                video: video.to_string(),
                frames: frames.len(),
                mean: Scores::mean(&per_class),
                per_class,
            }
        })
        .collect();
    let per_class: Vec<Scores> = (0..k)
        .map(|c| Scores::mean(&videos.iter().map(|v| v.per_class[c]).collect::<Vec<_>>()))
        .collect();
    Ok(MetricsReport {
        mean: Scores::mean(&videos.iter().map(|v| v.mean).collect::<Vec<_>>()),
        per_class,
        videos,
    })
}

impl MetricsReport {
    /// One row per video plus a final `mean` row, class-averaged.
    pub fn to_csv(&self) -> String {
        let mut out = format!("video,{}\n", METRIC_COLUMNS.join(","));
        let row = |name: &str, s: &Scores| {
            let vals: Vec<String> = s.values().iter().map(|v| format!("{v:.6}")).collect();
            format!("{name},{}\n", vals.join(","))
        };
        for v in &self.videos {
            out.push_str(&row(&v.video, &v.mean));
        }
        out.push_str(&row("mean", &self.mean));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
