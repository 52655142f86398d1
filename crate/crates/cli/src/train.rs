//! End-to-end training over sliding windows of consecutive frames.

use std::collections::BTreeMap;

use hrvvs_core::autograd::Graph;
use hrvvs_core::datasets::{sample_windows, ClipWindow};
use hrvvs_core::params::{poly_lr, Adam};
use hrvvs_core::toyvar::{PretrainOptions, PretrainReport};
use hrvvs_core::{Error, Model, ParamStore, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::LoadedVideo;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Mean per-frame loss over the batch.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub pretrain: Option<PretrainReport>,
}

/// Schedule length: `max_steps` if nonzero, otherwise `epochs` passes over the windows.
pub fn total_steps(cfg: &RunConfig, windows: usize) -> usize {
    let per_epoch = windows.div_ceil(cfg.train.batch_size).max(1);
    match cfg.train.max_steps {
        0 => cfg.train.epochs * per_epoch,
        n => n,
    }
}

pub fn all_windows(cfg: &RunConfig, videos: &[LoadedVideo]) -> Result<Vec<(usize, ClipWindow)>> {
    let mut out = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        for w in sample_windows(&v.record, cfg.train.t_clip, cfg.train.stride)? {
            out.push((i, w));
        }
    }
    Ok(out)
}

/// Phase-0 prior pretraining on every training frame.
pub fn pretrain_var(cfg: &RunConfig, model: &Model, store: &mut ParamStore, videos: &[LoadedVideo]) -> Result<PretrainReport> {
    let frames: Vec<Tensor> = videos.iter().flat_map(|v| v.frames.iter().cloned()).collect();
    model.toyvar().pretrain(
        store,
        &frames,
        &PretrainOptions {
            steps: cfg.pretrain.steps,
            batch: cfg.pretrain.batch,
            lr: cfg.pretrain.lr,
            seed: cfg.train.seed,
        },
    )
}

pub fn train(cfg: &RunConfig, videos: &[LoadedVideo], init: Option<Checkpoint>) -> Result<TrainOutcome> {
    train_with(cfg, videos, init, |_| {})
}

/// Train from `init` (or fresh weights with phase-0 pretraining when the
/// prior branch is enabled). `on_step` sees every log record as it is made.
pub fn train_with(
    cfg: &RunConfig,
    videos: &[LoadedVideo],
    init: Option<Checkpoint>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if videos.is_empty() || videos.iter().all(|v| v.frames.is_empty()) {
        return Err(Error::Contract("training set is empty".into()));
    }
    let model = Model::new(cfg.model.clone())?;
    let (mut store, mut adam, start, pretrain) = match init {
        Some(ck) => (ck.params, ck.adam, ck.step as usize, None),
        None => {
            let mut store = model.init_params(cfg.train.seed);
            let report = if cfg.model.modules.var && cfg.pretrain.steps > 0 {
                Some(pretrain_var(cfg, &model, &mut store, videos)?)
            } else {
                None
            };
            (store, Adam::default(), 0, report)
        }
    };

    let windows = all_windows(cfg, videos)?;
    if windows.is_empty() {
        return Err(Error::Contract(format!(
            "no video has {} frames for a training window",
            cfg.train.t_clip
        )));
    }
    let batch = cfg.train.batch_size;
    let per_epoch = windows.len().div_ceil(batch);
    let total = total_steps(cfg, windows.len());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    dropout_rng.set_stream(2);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    // replay the shuffles of completed epochs so resumed runs see the same order
    for _ in 0..start / per_epoch {
        order.shuffle(&mut order_rng);
    }
    if start % per_epoch != 0 {
        order.shuffle(&mut order_rng);
    }

    let trainable = model.trainable();
    let mut log = Vec::with_capacity(total.saturating_sub(start));
    for step in start..total {
        if step % per_epoch == 0 {
            order.shuffle(&mut order_rng);
        }
        let first = (step % per_epoch) * batch;
        let chosen = &order[first..(first + batch).min(order.len())];
        let frames_in_batch: usize = chosen.iter().map(|&i| windows[i].1.len).sum();
        let scale = 1.0 / frames_in_batch as f64;
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for &wi in chosen {
            let (vi, window) = &windows[wi];
            let video = &videos[*vi];
            let mut state = model.new_stream();
            for f in window.frames() {
                let rng = ChaCha8Rng::seed_from_u64(dropout_rng.gen());
                let mut g = Graph::new(&store).with_trainable(trainable.clone()).training(rng);
                let fwd = model.forward_frame(&mut g, &video.frames[f], &state)?;
                let loss = model.frame_loss(&mut g, &fwd, &video.labels[f])?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Training {
                        step,
                        reason: format!("loss {value} on video {} frame {f}", video.id()),
                    });
                }
                loss_sum += value;
                for (name, grad) in g.backward(loss).into_params() {
                    match acc.get_mut(&name) {
                        Some(a) => {
                            for (x, y) in a.data_mut().iter_mut().zip(grad.data()) {
                                *x += scale * y;
                            }
                        }
                        None => {
                            acc.insert(name, grad.map(|v| v * scale));
                        }
                    }
                }
                model.commit(&g, &fwd, &mut state)?;
            }
        }
        let lr = poly_lr(cfg.train.lr, step, total, cfg.train.decay_power);
        adam.update(&mut store, &acc, lr, |_, _| true);
        store.snap_to_f32();
        let record = StepLog {
            step,
            lr,
            loss: loss_sum * scale,
        };
        on_step(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            step: total.max(start) as u64,
            params: store,
            adam,
        },
        log,
        pretrain,
    })
}
