//! Deterministic synthetic vessel videos: curved tubes of two labeled
//! classes moving over a textured background, with unlabeled distractor
//! tubes, opaque occluders, brightness drift and occasional jumps.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io, VideoRecord};
use crate::error::{ensure, Error, Result};

/// Flat RGB colours of class 1 and class 2 tubes before brightness drift.
pub const CLASS_COLORS: [[f64; 3]; 2] = [[0.92, 0.86, 0.62], [0.25, 0.22, 0.58]];
const DISTRACTOR_COLOR: [f64; 3] = [0.52, 0.16, 0.18];
const OCCLUDER_COLOR: [f64; 3] = [0.62, 0.64, 0.68];
const TISSUE_COLOR: [f64; 3] = [0.80, 0.48, 0.44];
const CURVE_SAMPLES: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub videos: usize,
    pub frames: usize,
    /// Square frame side, divisible by 64.
    pub resolution: usize,
    /// Labeled tubes per class.
    pub tubes: usize,
    pub distractors: usize,
    pub occluders: usize,
    pub jump_probability: f64,
    /// Relative amplitude of the sinusoidal global gain.
    pub brightness_drift: f64,
    /// Upper bound on per-frame displacement of smooth motion, in pixels.
    pub motion_step: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            videos: 4,
            frames: 16,
            resolution: 128,
            tubes: 1,
            distractors: 1,
            occluders: 1,
            jump_probability: 0.1,
            brightness_drift: 0.15,
            motion_step: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.resolution >= 64 && self.resolution.is_multiple_of(64),
            Config,
            "synthetic resolution {} must be a positive multiple of 64",
            self.resolution
        );
        ensure!(self.videos >= 1 && self.frames >= 1, Config, "need at least one video and one frame");
        ensure!(
            (0.0..=1.0).contains(&self.jump_probability),
            Config,
            "jump probability {} outside [0, 1]",
            self.jump_probability
        );
        ensure!(
            (0.0..1.0).contains(&self.brightness_drift),
            Config,
            "brightness drift {} outside [0, 1)",
            self.brightness_drift
        );
        ensure!(
            self.motion_step >= 0.0 && self.motion_step.is_finite(),
            Config,
            "motion step must be finite and non-negative"
        );
        Ok(())
    }
}

/// One rendered frame: interleaved RGB bytes and per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub resolution: usize,
    pub frames: Vec<SynthFrame>,
}

/// A rigid tube translated over time.
struct Tube {
    /// Curve points relative to the tube's anchor.
    curve: Vec<(f64, f64)>,
    radius: f64,
    /// Anchor range keeping the whole tube inside the frame.
    lo: (f64, f64),
    hi: (f64, f64),
    pos: (f64, f64),
    vel: (f64, f64),
}

impl Tube {
    fn random(rng: &mut ChaCha8Rng, res: f64, radius: f64, length: f64, step: f64) -> Self {
        let theta = rng.gen_range(0.0..PI);
        let (dx, dy) = (theta.cos() * length / 2.0, theta.sin() * length / 2.0);
        let bend = rng.gen_range(-0.5..0.5) * length;
        let p0 = (-dx, -dy);
        let p2 = (dx, dy);
        let p1 = (-theta.sin() * bend, theta.cos() * bend);
        let curve: Vec<(f64, f64)> = (0..CURVE_SAMPLES)
            .map(|i| {
                let s = i as f64 / (CURVE_SAMPLES - 1) as f64;
                let (a, b, c) = ((1.0 - s) * (1.0 - s), 2.0 * s * (1.0 - s), s * s);
                (a * p0.0 + b * p1.0 + c * p2.0, a * p0.1 + b * p1.1 + c * p2.1)
            })
            .collect();
        let margin = radius + 1.0;
        let min_x = curve.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = curve.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = curve.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = curve.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let lo = (margin - min_x, margin - min_y);
        let hi = ((res - margin - max_x).max(lo.0), (res - margin - max_y).max(lo.1));
        let pos = (sample(rng, lo.0, hi.0), sample(rng, lo.1, hi.1));
        let angle = rng.gen_range(0.0..2.0 * PI);
        let speed = step * rng.gen_range(0.5..=1.0);
        Self {
            curve,
            radius,
            lo,
            hi,
            pos,
            vel: (angle.cos() * speed, angle.sin() * speed),
        }
    }

    fn advance(&mut self, rng: &mut ChaCha8Rng, jump_probability: f64) {
        if jump_probability > 0.0 && rng.gen_bool(jump_probability) {
            self.pos = (sample(rng, self.lo.0, self.hi.0), sample(rng, self.lo.1, self.hi.1));
            return;
        }
        let (x, vx) = reflect(self.pos.0 + self.vel.0, self.vel.0, self.lo.0, self.hi.0);
        let (y, vy) = reflect(self.pos.1 + self.vel.1, self.vel.1, self.lo.1, self.hi.1);
        self.pos = (x, y);
        self.vel = (vx, vy);
    }

    /// Calls `paint` for every pixel within `radius` of the curve.
    fn raster(&self, res: usize, mut paint: impl FnMut(usize)) {
        let pts: Vec<(f64, f64)> = self.curve.iter().map(|p| (p.0 + self.pos.0, p.1 + self.pos.1)).collect();
        let r = self.radius;
        let bound = |f: fn(&(f64, f64)) -> f64, min: bool| {
            let it = pts.iter().map(f);
            if min {
                it.fold(f64::INFINITY, f64::min) - r
            } else {
                it.fold(f64::NEG_INFINITY, f64::max) + r
            }
        };
        let x0 = bound(|p| p.0, true).floor().max(0.0) as usize;
        let x1 = (bound(|p| p.0, false).ceil().max(0.0) as usize).min(res - 1);
        let y0 = bound(|p| p.1, true).floor().max(0.0) as usize;
        let y1 = (bound(|p| p.1, false).ceil().max(0.0) as usize).min(res - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let c = (x as f64 + 0.5, y as f64 + 0.5);
                if pts.windows(2).any(|s| segment_dist2(c, s[0], s[1]) <= r * r) {
                    paint(y * res + x);
                }
            }
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn reflect(x: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if x < lo {
        ((2.0 * lo - x).min(hi), -v)
    } else if x > hi {
        ((2.0 * hi - x).max(lo), -v)
    } else {
        (x, v)
    }
}

fn segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (a.0 + t * abx - p.0, a.1 + t * aby - p.1);
    dx * dx + dy * dy
}

/// Smooth tissue texture: base colour plus a few low-frequency waves.
fn texture(rng: &mut ChaCha8Rng, res: usize) -> Vec<[f64; 3]> {
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let freq = rng.gen_range(1.0..4.0) * 2.0 * PI / res as f64;
            let dir = rng.gen_range(0.0..2.0 * PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = [rng.gen_range(0.02..0.05), rng.gen_range(0.02..0.05), rng.gen_range(0.02..0.05)];
            (freq * dir.cos(), freq * dir.sin(), phase, amp)
        })
        .collect();
    (0..res * res)
        .map(|i| {
            let (x, y) = ((i % res) as f64, (i / res) as f64);
            let mut c = TISSUE_COLOR;
            for (fx, fy, ph, amp) in &waves {
                let s = (fx * x + fy * y + ph).sin();
                for k in 0..3 {
                    c[k] += amp[k] * s;
                }
            }
            c
        })
        .collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render video `index` of `config` in memory.
pub fn render_video(config: &SynthConfig, index: usize) -> Result<SynthVideo> {
    config.validate()?;
    let res = config.resolution;
    let scale = res as f64 / 128.0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let background = texture(&mut rng, res);
    let tube = |rng: &mut ChaCha8Rng, radius: (f64, f64), length: (f64, f64)| {
        let r = rng.gen_range(radius.0..radius.1) * scale;
        let l = rng.gen_range(length.0..length.1) * scale;
        Tube::random(rng, res as f64, r, l, config.motion_step)
    };
    let mut distractors: Vec<Tube> = (0..config.distractors).map(|_| tube(&mut rng, (2.5, 4.5), (50.0, 90.0))).collect();
    let mut labeled: Vec<(u8, Tube)> = (0..config.tubes)
        .flat_map(|_| [1u8, 2])
        .map(|c| (c, tube(&mut rng, (3.0, 5.5), (50.0, 90.0))))
        .collect();
    let mut occluders: Vec<Tube> = (0..config.occluders).map(|_| tube(&mut rng, (6.0, 9.0), (25.0, 45.0))).collect();
    let gain_phase = rng.gen_range(0.0..2.0 * PI);
    let gain_cycles = rng.gen_range(0.5..1.5);

    let mut frames = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        if t > 0 {
            for d in distractors.iter_mut().chain(labeled.iter_mut().map(|(_, s)| s)).chain(occluders.iter_mut()) {
                d.advance(&mut rng, config.jump_probability);
            }
        }
        let gain = 1.0 + config.brightness_drift * (2.0 * PI * gain_cycles * t as f64 / config.frames as f64 + gain_phase).sin();
        let mut color = background.clone();
        let mut labels = vec![0u8; res * res];
        for d in &distractors {
            d.raster(res, |p| {
                color[p] = DISTRACTOR_COLOR;
                labels[p] = 0;
            });
        }
        for (c, s) in &labeled {
            s.raster(res, |p| {
                color[p] = CLASS_COLORS[*c as usize - 1];
                labels[p] = *c;
            });
        }
        for o in &occluders {
            o.raster(res, |p| {
                color[p] = OCCLUDER_COLOR;
                labels[p] = 0;
            });
        }
        let rgb = color.iter().flat_map(|c| c.map(|v| to_byte(v * gain))).collect();
        frames.push(SynthFrame { rgb, labels });
    }
    Ok(SynthVideo {
        id: format!("synth_{index:03}"),
        resolution: res,
        frames,
    })
}

/// Write the synthetic dataset under `out` in the ingestion layout.
pub fn synth_generate(config: &SynthConfig, out: &Path) -> Result<Vec<VideoRecord>> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.videos);
    for v in 0..config.videos {
        let video = render_video(config, v)?;
        let dir = out.join(&video.id);
        let (fdir, mdir) = (dir.join("frames"), dir.join("masks"));
        for d in [&fdir, &mdir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let res = video.resolution;
        let mut record = VideoRecord {
            id: video.id.clone(),
            frames: Vec::new(),
            masks: Vec::new(),
            height: res,
            width: res,
        };
        for (t, f) in video.frames.iter().enumerate() {
            let name = format!("{t:05}.png");
            io::write_rgb(&fdir.join(&name), res, res, &f.rgb)?;
            io::write_mask(&mdir.join(&name), res, res, &f.labels)?;
            record.frames.push(fdir.join(&name));
            record.masks.push(mdir.join(&name));
        }
        records.push(record);
    }
    Ok(records)
}

/// Expected byte colour of class `c` tube pixels at brightness `gain`.
pub fn class_color_bytes(class: u8, gain: f64) -> [u8; 3] {
    CLASS_COLORS[class as usize - 1].map(|v| to_byte(v * gain))
}
