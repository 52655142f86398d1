//! The full per-frame network and its per-video streaming state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_last, permute, Graph, Trainable, Var};
use crate::config::{ModelConfig, NUM_STAGES};
use crate::decoder::{segmentation_loss, Decoder, DecoderPyramid};
use crate::dwfm::{tensor_to_weights, Dwfm, WeightState};
use crate::encoder::{global_features, Encoder, FeaturePyramid};
use crate::error::{ensure, Result};
use crate::memory::MemoryBank;
use crate::msim::{restack, Msim, MsimOutput};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::toyvar::{ToyVar, BACKBONE_PREFIX};
use crate::views::{self, FullFrame, NUM_LOCALS, PATCHES_PER_LOCAL};

/// Per-video state threaded through consecutive frames.
#[derive(Clone, Debug)]
pub struct StreamState {
    pub memory: MemoryBank,
    pub weights: WeightState,
}

impl StreamState {
    pub fn t(&self) -> usize {
        self.weights.t
    }

    pub fn reset(&mut self) {
        self.memory.reset();
        self.weights.reset();
    }
}

/// Graph handles produced by one frame's forward pass.
#[derive(Clone, Debug)]
pub struct FrameForward {
    pub t: usize,
    pub priors: Vec<Option<Var>>,
    pub pyramid: FeaturePyramid,
    pub msim: Option<MsimOutput>,
    pub decoded: DecoderPyramid,
    /// Current reference feature `P_t`.
    pub p_t: Var,
    pub w_final: Var,
    /// `[K, H, W]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    toyvar: ToyVar,
    encoder: Encoder,
    msim: Msim,
    dwfm: Dwfm,
    decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let toyvar = ToyVar::new(cfg.var.clone(), cfg.stage_channels)?;
        let encoder = Encoder::new(&cfg);
        let mem_dim = MemoryBank::new(cfg.memory.clone()).token_dim(&cfg.stage_channels);
        let msim = Msim::new(cfg.msim.clone(), cfg.stage_channels[NUM_STAGES - 1], mem_dim);
        let dwfm = Dwfm::new(cfg.dwfm.clone(), cfg.stage_channels[0]);
        let decoder = Decoder::new(cfg.stage_channels, cfg.num_classes);
        Ok(Self {
            cfg,
            toyvar,
            encoder,
            msim,
            dwfm,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn toyvar(&self) -> &ToyVar {
        &self.toyvar
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn msim(&self) -> &Msim {
        &self.msim
    }

    pub fn dwfm(&self) -> &Dwfm {
        &self.dwfm
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Fresh parameters for every module. Parameters of disabled modules
    /// are still created so checkpoints share one layout.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        self.toyvar.init_params(&mut store, &mut init);
        self.encoder.init_params(&mut store, &mut init);
        self.msim.init_params(&mut store, &mut init);
        self.dwfm.init_params(&mut store, &mut init);
        self.decoder.init_params(&mut store, &mut init);
        store.snap_to_f32();
        store
    }

    /// Parameters updated by end-to-end training.
    pub fn trainable(&self) -> Trainable {
        Trainable::Except(vec![BACKBONE_PREFIX.to_string()])
    }

    pub fn new_stream(&self) -> StreamState {
        StreamState {
            memory: MemoryBank::new(self.cfg.memory.clone()),
            weights: WeightState::default(),
        }
    }

    fn stage_sizes(&self) -> [(usize, usize); NUM_STAGES] {
        std::array::from_fn(|i| self.cfg.stage_size(i + 1))
    }

    /// One frame `[C, H, W]` through the whole network. `state` is read
    /// only; call [`Model::commit`] afterwards to advance it.
    pub fn forward_frame(&self, g: &mut Graph, frame: &Tensor, state: &StreamState) -> Result<FrameForward> {
        let frame = FullFrame::new(frame.clone(), state.t())?;
        let (c, h, w) = (frame.data().shape()[0], frame.data().shape()[1], frame.data().shape()[2]);
        ensure!(
            c == self.cfg.in_channels && h == self.cfg.height && w == self.cfg.width,
            RejectedInput,
            "frame {c}x{h}x{w} does not match the configured {}x{}x{}",
            self.cfg.in_channels,
            self.cfg.height,
            self.cfg.width
        );
        let t = state.t();
        let views = views::decompose(frame.data())?.stacked();
        let priors = if self.cfg.modules.var {
            self.toyvar.extract_priors(g, &views, &self.stage_sizes())?
        } else {
            vec![None; NUM_STAGES]
        };
        let vv = g.constant(views);
        let pyramid = self.encoder.encode_views(g, vv, Some(&priors))?;
        let deepest = pyramid.stages[NUM_STAGES - 1];
        let (msim, entry) = if self.cfg.modules.msim {
            let mem = state.memory.tokens(&self.cfg.stage_channels);
            let out = self.msim.forward(g, deepest, &mem)?;
            let entry = restack(g, &out);
            (Some(out), entry)
        } else {
            (None, deepest)
        };
        let decoded = self.decoder.decode(g, &pyramid, entry)?;
        let p_t = decoded.global(g);
        let w_final = if self.cfg.modules.dwfm {
            let locals = decoded.locals(g);
            let w_g = self.dwfm.patch_weights(g, locals, Some(p_t))?;
            if t == 0 {
                self.dwfm.fuse(g, None, w_g, None, 0)?
            } else {
                let prev = state
                    .memory
                    .previous_global()
                    .ok_or_else(|| crate::Error::Contract(format!("frame {t} has no previous reference")))?;
                let prev = g.constant(prev.clone());
                let w_l = self.dwfm.patch_weights(g, locals, Some(prev))?;
                self.dwfm.fuse(g, Some(w_l), w_g, state.weights.history.as_ref(), t)?
            }
        } else {
            g.constant(Tensor::full(&[NUM_LOCALS, PATCHES_PER_LOCAL], 1.0))
        };
        let logits = self.decoder.predict(g, &decoded, Some(w_final), h, w)?;
        Ok(FrameForward {
            t,
            priors,
            pyramid,
            msim,
            decoded,
            p_t,
            w_final,
            logits,
        })
    }

    /// Push this frame into memory and advance the fusion state.
    pub fn commit(&self, g: &Graph, fwd: &FrameForward, state: &mut StreamState) -> Result<()> {
        ensure!(fwd.t == state.t(), Contract, "forward of frame {} committed at {}", fwd.t, state.t());
        state
            .memory
            .push(fwd.t, global_features(g, &fwd.pyramid), g.value(fwd.p_t).clone())?;
        let w = tensor_to_weights(g.value(fwd.w_final));
        state.weights.advance(&w, self.cfg.dwfm.delta)
    }

    pub fn frame_loss(&self, g: &mut Graph, fwd: &FrameForward, labels: &[u8]) -> Result<Var> {
        segmentation_loss(g, fwd.logits, labels)
    }

    /// Class probabilities `[K, H, W]` for every frame of one video.
    pub fn predict_video(&self, store: &ParamStore, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut state = self.new_stream();
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            let mut g = Graph::new(store).with_trainable(Trainable::Nothing);
            let fwd = self.forward_frame(&mut g, f, &state)?;
            out.push(probabilities(g.value(fwd.logits)));
            self.commit(&g, &fwd, &mut state)?;
        }
        Ok(out)
    }
}

/// Softmax over the class axis of `[K, H, W]` logits.
pub fn probabilities(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let (k, n) = (s[0], s[1] * s[2]);
    let p = softmax_last(&permute(&logits.clone().reshape(&[k, n]), &[1, 0]));
    permute(&p, &[1, 0]).reshape(s)
}

/// Per-pixel argmax label of `[K, H, W]` scores.
pub fn argmax_labels(scores: &Tensor) -> Vec<u8> {
    let s = scores.shape();
    let (k, n) = (s[0], s[1] * s[2]);
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if scores.data()[c * n + p] > scores.data()[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
