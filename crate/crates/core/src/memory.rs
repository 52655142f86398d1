//! Per-video memory of past global features.
//!
//! Entries are kept oldest first. Once the bank holds more than
//! `capacity` frames the oldest is dropped and every remaining entry of
//! age `a` (0 = newest) is average-pooled so that it has been reduced by
//! `2^min(a, max_age_exponent)` in each spatial direction, clamped to the
//! map side.

use std::collections::VecDeque;

use crate::config::{MemoryConfig, NUM_STAGES};
use crate::error::{ensure, Result};
use crate::nn::sinusoid;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub frame_index: usize,
    /// Stored global features per stage, `[C_i, h_i / f, w_i / f]`.
    pub features: Vec<Tensor>,
    /// Current pooling factor per stage (a power of two).
    pub factors: Vec<usize>,
}

impl MemoryEntry {
    pub fn tokens_in(&self, stage: usize) -> usize {
        let s = self.features[stage - 1].shape();
        s[1] * s[2]
    }
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    cfg: MemoryConfig,
    entries: VecDeque<MemoryEntry>,
    reference: Option<(usize, Tensor)>,
}

impl MemoryBank {
    pub fn new(cfg: MemoryConfig) -> Self {
        Self {
            cfg,
            entries: VecDeque::new(),
            reference: None,
        }
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    /// Append frame `t`; `features` holds the global map of every stage and
    /// `reference` the decoder-level global feature of the same frame.
    pub fn push(&mut self, t: usize, features: Vec<Tensor>, reference: Tensor) -> Result<()> {
        if let Some(last) = self.entries.back() {
            ensure!(
                t > last.frame_index,
                Contract,
                "frame index {t} is not after stored index {}",
                last.frame_index
            );
        }
        ensure!(
            features.len() == NUM_STAGES && features.iter().all(|f| f.rank() == 3),
            Contract,
            "expected {NUM_STAGES} [C, h, w] stage maps"
        );
        self.entries.push_back(MemoryEntry {
            frame_index: t,
            factors: vec![1; features.len()],
            features,
        });
        self.reference = Some((t, reference));
        if self.entries.len() > self.cfg.capacity {
            self.compress();
        }
        Ok(())
    }

    /// Evict down to capacity and bring every entry to its age's pooling factor.
    pub fn compress(&mut self) {
        while self.entries.len() > self.cfg.capacity {
            self.entries.pop_front();
        }
        let n = self.entries.len();
        for (pos, e) in self.entries.iter_mut().enumerate() {
            let age = (n - 1 - pos) as u32;
            let want = 1usize << age.min(self.cfg.max_age_exponent);
            for (f, factor) in e.features.iter_mut().zip(e.factors.iter_mut()) {
                let side = f.shape()[1].min(f.shape()[2]) * *factor;
                let target = want.min(side.max(1)).max(*factor);
                if target > *factor {
                    *f = f.avg_pool(target / *factor);
                    *factor = target;
                }
            }
        }
    }

    /// Decoder-level global feature of the newest stored frame.
    pub fn previous_global(&self) -> Option<&Tensor> {
        self.reference.as_ref().map(|(_, p)| p)
    }

    pub fn reset(&mut self) {
        self.entries.clear();
        self.reference = None;
    }

    /// Width of one memory token: widest configured stage plus encodings.
    pub fn token_dim(&self, stage_channels: &[usize; NUM_STAGES]) -> usize {
        self.cfg.stages.iter().map(|&s| stage_channels[s - 1]).max().unwrap_or(0) + self.cfg.pos_dim
    }

    pub fn token_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| self.cfg.stages.iter().map(|&s| e.tokens_in(s)).sum::<usize>())
            .sum()
    }

    /// Concatenated tokens `[n, token_dim]`, oldest entry first, row-major
    /// within each map. Each token is the feature vector (zero-padded to the
    /// widest stage) followed by a sinusoidal code of (age, row, column).
    pub fn tokens(&self, stage_channels: &[usize; NUM_STAGES]) -> Tensor {
        let dim = self.token_dim(stage_channels);
        let feat_dim = dim - self.cfg.pos_dim;
        let (age_dim, row_dim) = (self.cfg.pos_dim - 2 * (self.cfg.pos_dim / 3), self.cfg.pos_dim / 3);
        let n = self.entries.len();
        let mut data = Vec::with_capacity(self.token_count() * dim);
        for (pos, e) in self.entries.iter().enumerate() {
            let age = sinusoid((n - 1 - pos) as f64, age_dim);
            for &s in &self.cfg.stages {
                let f = &e.features[s - 1];
                let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
                let scale = e.factors[s - 1] as f64;
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..feat_dim {
                            data.push(if ch < c { f.data()[(ch * h + y) * w + x] } else { 0.0 });
                        }
                        data.extend_from_slice(&age);
                        data.extend(sinusoid((y as f64 + 0.5) * scale, row_dim));
                        data.extend(sinusoid((x as f64 + 0.5) * scale, row_dim));
                    }
                }
            }
        }
        Tensor::new(&[data.len() / dim.max(1), dim], data)
    }
}
