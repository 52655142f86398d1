//! Upsampling decoder with additive encoder skips, view stitching and the
//! segmentation head.

use crate::autograd::{Graph, Var};
use crate::config::NUM_STAGES;
use crate::encoder::FeaturePyramid;
use crate::error::{ensure, Result};
use crate::nn;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::views::{stitch_var, NUM_LOCALS, NUM_VIEWS, PATCHES_PER_LOCAL};

/// Decoded features for all views, `stages[i]` mirrors encoder stage `i + 1`.
#[derive(Clone, Debug)]
pub struct DecoderPyramid {
    pub stages: [Var; NUM_STAGES],
}

impl DecoderPyramid {
    /// Decoded stage-1 locals `[4, C_1, h, w]`.
    pub fn locals(&self, g: &mut Graph) -> Var {
        g.slice(self.stages[0], 0, 0, NUM_LOCALS)
    }

    /// Decoded stage-1 global `[C_1, h, w]` (the reference feature `P_t`).
    pub fn global(&self, g: &mut Graph) -> Var {
        let v = g.slice(self.stages[0], 0, NUM_LOCALS, 1);
        let s = g.shape(v).to_vec();
        g.reshape(v, &s[1..])
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    channels: [usize; NUM_STAGES],
    num_classes: usize,
}

impl Decoder {
    pub fn new(channels: [usize; NUM_STAGES], num_classes: usize) -> Self {
        Self { channels, num_classes }
    }

    pub fn init_params(&self, store: &mut ParamStore, init: &mut Init) {
        for i in 1..NUM_STAGES {
            let (cin, c) = (self.channels[i], self.channels[i - 1]);
            nn::init_conv(store, init, &format!("decoder.up{i}.a"), cin, c, 3);
            nn::init_conv(store, init, &format!("decoder.up{i}.b"), c, c, 3);
        }
        let c1 = self.channels[0];
        nn::init_conv(store, init, "decoder.refine", c1, c1, 3);
        nn::init_conv(store, init, "decoder.head", c1, self.num_classes, 1);
    }

    /// Decode from `entry` (the deepest-stage map after interaction) with
    /// encoder skips added at every up-stage.
    pub fn decode(&self, g: &mut Graph, pyramid: &FeaturePyramid, entry: Var) -> Result<DecoderPyramid> {
        self.decode_inner(g, pyramid, entry, true)
    }

    /// Same as [`Decoder::decode`] with every skip dropped.
    pub fn decode_without_skips(&self, g: &mut Graph, pyramid: &FeaturePyramid, entry: Var) -> Result<DecoderPyramid> {
        self.decode_inner(g, pyramid, entry, false)
    }

    fn decode_inner(&self, g: &mut Graph, pyramid: &FeaturePyramid, entry: Var, skips: bool) -> Result<DecoderPyramid> {
        ensure!(
            g.shape(entry) == g.shape(pyramid.stages[NUM_STAGES - 1]),
            Config,
            "decoder entry {:?} does not match deepest stage {:?}",
            g.shape(entry),
            g.shape(pyramid.stages[NUM_STAGES - 1])
        );
        let mut out = vec![entry; NUM_STAGES];
        let mut x = entry;
        for i in (1..NUM_STAGES).rev() {
            let up = g.upsample_nearest(x, 2);
            let mut h = nn::conv_relu(g, &format!("decoder.up{i}.a"), up, 1);
            let skip = pyramid.stages[i - 1];
            ensure!(
                g.shape(skip) == g.shape(h),
                Config,
                "skip {i} shape {:?} does not match decoder {:?}",
                g.shape(skip),
                g.shape(h)
            );
            if skips {
                h = g.add(h, skip);
            }
            x = nn::conv_relu(g, &format!("decoder.up{i}.b"), h, 1);
            out[i - 1] = x;
        }
        Ok(DecoderPyramid {
            stages: out.try_into().expect("five stages"),
        })
    }

    /// Stitch decoded locals with the global using `w_final` (`[4, 16]`),
    /// then predict class logits upsampled to `height x width`.
    pub fn predict(&self, g: &mut Graph, decoded: &DecoderPyramid, w_final: Option<Var>, height: usize, width: usize) -> Result<Var> {
        let Some(w) = w_final else {
            return Err(crate::Error::Contract("prediction needs fusion weights".into()));
        };
        ensure!(
            g.shape(w) == [NUM_LOCALS, PATCHES_PER_LOCAL],
            Contract,
            "fusion weights {:?} are not 4 x 16",
            g.shape(w)
        );
        ensure!(
            g.shape(decoded.stages[0])[0] == NUM_VIEWS,
            Contract,
            "decoded pyramid has {} views",
            g.shape(decoded.stages[0])[0]
        );
        let locals = decoded.locals(g);
        let global = decoded.global(g);
        let fused = stitch_var(g, locals, global, w);
        let s = g.shape(fused).to_vec();
        let fused = g.reshape(fused, &[1, s[0], s[1], s[2]]);
        let h = nn::conv_relu(g, "decoder.refine", fused, 1);
        let logits = nn::conv(g, "decoder.head", h, 1);
        let logits = if (s[1], s[2]) == (height, width) {
            logits
        } else {
            g.resize_bilinear(logits, height, width)
        };
        Ok(g.reshape(logits, &[self.num_classes, height, width]))
    }
}

/// Cross-entropy plus soft Dice over the vessel classes, for logits
/// `[K, H, W]` and labels in `0..K` (row-major `H x W`).
pub fn segmentation_loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let (k, n) = (s[0], s[1] * s[2]);
    ensure!(labels.len() == n, Contract, "{} labels for {n} pixels", labels.len());
    ensure!(
        labels.iter().all(|&l| (l as usize) < k),
        Contract,
        "label outside 0..{k}"
    );
    let x = g.reshape(logits, &[k, n]);
    let x = g.permute(x, &[1, 0]);
    let cols: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let lp = g.log_softmax(x);
    let picked = g.pick(lp, &cols);
    let nll = g.mean(picked);
    let ce = g.scale(nll, -1.0);

    let probs = g.softmax(x);
    let onehot = Tensor::from_fn(&[n, k], |i| if cols[i / k] == i % k { 1.0 } else { 0.0 });
    let counts = crate::autograd::sum_axis(&onehot, 0);
    let onehot = g.constant(onehot);
    let inter = g.mul(probs, onehot);
    let inter = g.sum_axis(inter, 0);
    let psum = g.sum_axis(probs, 0);
    let counts = g.constant(counts);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, 1.0);
    let den = g.add(psum, counts);
    let den = g.add_scalar(den, 1.0);
    let dice = g.div(num, den);
    let vessels = g.slice(dice, 0, 1, k - 1);
    let mean_dice = g.mean(vessels);
    let dice_loss = g.scale(mean_dice, -1.0);
    let dice_loss = g.add_scalar(dice_loss, 1.0);
    Ok(g.add(ce, dice_loss))
}
