//! Videos loaded into memory at model resolution.

use hrvvs_core::datasets::{split, Split, VideoRecord};
use hrvvs_core::{Error, ModelConfig, Result, Tensor};

#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub record: VideoRecord,
    /// `[3, H, W]` at model resolution.
    pub frames: Vec<Tensor>,
    /// Labels at model resolution.
    pub labels: Vec<Vec<u8>>,
}

impl LoadedVideo {
    pub fn load(record: &VideoRecord, model: &ModelConfig) -> Result<Self> {
        let (h, w) = (model.height, model.width);
        let mut frames = Vec::with_capacity(record.len());
        let mut labels = Vec::with_capacity(record.len());
        for i in 0..record.len() {
            frames.push(record.load_frame(i, h, w)?);
            labels.push(record.load_mask(i, h, w)?);
        }
        Ok(Self {
            record: record.clone(),
            frames,
            labels,
        })
    }

    pub fn id(&self) -> &str {
        &self.record.id
    }
}

/// Records whose ids are listed in split `name`.
pub fn select<'a>(records: &'a [VideoRecord], split: &Split, name: &str) -> Result<Vec<&'a VideoRecord>> {
    let ids = split
        .get(name)
        .ok_or_else(|| Error::Contract(format!("unknown split {name:?} (expected train, val or test)")))?;
    if ids.is_empty() {
        return Err(Error::Contract(format!("split {name:?} is empty")));
    }
    Ok(records.iter().filter(|r| ids.contains(&r.id)).collect())
}

pub fn load_split(records: &[VideoRecord], seed: u64, name: &str, model: &ModelConfig) -> Result<(Split, Vec<LoadedVideo>)> {
    let s = split(records, seed)?;
    let videos = select(records, &s, name)?
        .into_iter()
        .map(|r| LoadedVideo::load(r, model))
        .collect::<Result<Vec<_>>>()?;
    Ok((s, videos))
}
