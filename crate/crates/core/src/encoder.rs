//! Five-stage strided convolutional encoder shared by all views, with
//! additive prior injection after every stage.

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, NUM_STAGES};
use crate::error::{ensure, Result};
use crate::memory::MemoryBank;
use crate::nn;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Per-stage features for all five views, `[5, C_i, h / 2^i, w / 2^i]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: [Var; NUM_STAGES],
}

#[derive(Clone, Debug)]
pub struct Encoder {
    in_channels: usize,
    channels: [usize; NUM_STAGES],
}

impl Encoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            in_channels: cfg.in_channels,
            channels: cfg.stage_channels,
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, init: &mut Init) {
        let mut cin = self.in_channels;
        for (i, &c) in self.channels.iter().enumerate() {
            nn::init_conv(store, init, &format!("encoder.stage{}.a", i + 1), cin, c, 3);
            nn::init_conv(store, init, &format!("encoder.stage{}.b", i + 1), c, c, 3);
            cin = c;
        }
    }

    /// `views[N, C, h, w]`; `priors[i]`, when present, is added to stage
    /// `i + 1` and must match its shape.
    pub fn encode_views(&self, g: &mut Graph, views: Var, priors: Option<&[Option<Var>]>) -> Result<FeaturePyramid> {
        let vs = g.shape(views).to_vec();
        ensure!(
            vs.len() == 4 && vs[1] == self.in_channels,
            Config,
            "views {:?} do not have {} channels",
            vs,
            self.in_channels
        );
        ensure!(
            vs[2].is_multiple_of(1 << NUM_STAGES) && vs[3].is_multiple_of(1 << NUM_STAGES),
            RejectedInput,
            "view {}x{} is not divisible by {}",
            vs[2],
            vs[3],
            1 << NUM_STAGES
        );
        let mut x = views;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let h = nn::conv_relu(g, &format!("encoder.stage{}.a", i + 1), x, 2);
            let mut h = nn::conv_relu(g, &format!("encoder.stage{}.b", i + 1), h, 1);
            if let Some(p) = priors.and_then(|p| p.get(i).copied().flatten()) {
                ensure!(
                    g.shape(p) == g.shape(h),
                    Config,
                    "prior {} shape {:?} does not match stage shape {:?}",
                    i + 1,
                    g.shape(p),
                    g.shape(h)
                );
                h = g.add(h, p);
            }
            stages.push(h);
            x = h;
        }
        Ok(FeaturePyramid {
            stages: stages.try_into().expect("five stages"),
        })
    }

    pub fn channels(&self) -> &[usize; NUM_STAGES] {
        &self.channels
    }
}

/// Global-view features of every stage, `[C_i, h_i, w_i]`.
pub fn global_features(g: &Graph, pyramid: &FeaturePyramid) -> Vec<Tensor> {
    pyramid
        .stages
        .iter()
        .map(|&s| {
            let v = g.value(s);
            v.index0(v.shape()[0] - 1)
        })
        .collect()
}

/// Push the current frame's global pyramid into `memory`, together with
/// the decoder-level reference feature `reference`.
pub fn store_current_global(
    g: &Graph,
    pyramid: &FeaturePyramid,
    reference: Tensor,
    t: usize,
    memory: &mut MemoryBank,
) -> Result<()> {
    memory.push(t, global_features(g, pyramid), reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> (Encoder, ParamStore) {
        let enc = Encoder::new(cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        enc.init_params(&mut store, &mut Init { rng: &mut rng });
        (enc, store)
    }

    #[test]
    fn default_stage_five_shape() {
        let cfg = ModelConfig {
            height: 256,
            width: 256,
            ..ModelConfig::default()
        };
        let (enc, store) = setup(&cfg);
        let mut g = Graph::new(&store);
        let v = g.constant(Tensor::full(&[5, 3, 128, 128], 0.2));
        let p = enc.encode_views(&mut g, v, None).unwrap();
        assert_eq!(g.shape(p.stages[4]), &[5, 256, 4, 4]);
        assert_eq!(g.shape(p.stages[0]), &[5, 16, 64, 64]);
    }

    #[test]
    fn zero_priors_match_no_priors() {
        let cfg = ModelConfig::desk();
        let (enc, store) = setup(&cfg);
        let mut g = Graph::new(&store);
        let x = Tensor::from_fn(&[5, 3, 64, 64], |i| ((i * 37) % 101) as f64 / 101.0);
        let v = g.constant(x);
        let plain = enc.encode_views(&mut g, v, None).unwrap();
        let zeros: Vec<Option<Var>> = (1..=5)
            .map(|i| {
                let (h, w) = cfg.stage_size(i);
                Some(g.constant(Tensor::zeros(&[5, cfg.stage_channels[i - 1], h, w])))
            })
            .collect();
        let with = enc.encode_views(&mut g, v, Some(&zeros)).unwrap();
        for i in 0..5 {
            assert_eq!(g.value(plain.stages[i]), g.value(with.stages[i]));
        }
    }

    #[test]
    fn mismatched_prior_is_config_error() {
        let cfg = ModelConfig::desk();
        let (enc, store) = setup(&cfg);
        let mut g = Graph::new(&store);
        let v = g.constant(Tensor::zeros(&[5, 3, 64, 64]));
        let bad = vec![Some(g.constant(Tensor::zeros(&[5, 3, 32, 32])))];
        assert!(matches!(
            enc.encode_views(&mut g, v, Some(&bad)),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn local_permutation_is_equivariant() {
        let cfg = ModelConfig::desk();
        let (enc, store) = setup(&cfg);
        let views: Vec<Tensor> = (0..5)
            .map(|m| Tensor::from_fn(&[3, 64, 64], |i| (((i + 17 * m) * 31) % 97) as f64 / 97.0))
            .collect();
        let perm = [2, 0, 3, 1, 4];
        let permuted: Vec<Tensor> = perm.iter().map(|&p| views[p].clone()).collect();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::stack(&views));
        let b = g.constant(Tensor::stack(&permuted));
        let pa = enc.encode_views(&mut g, a, None).unwrap();
        let pb = enc.encode_views(&mut g, b, None).unwrap();
        for i in 0..5 {
            for (slot, &src) in perm.iter().enumerate() {
                assert_eq!(g.value(pb.stages[i]).index0(slot), g.value(pa.stages[i]).index0(src));
            }
        }
        // distinct views give distinct features
        assert_ne!(g.value(pa.stages[4]).index0(0), g.value(pa.stages[4]).index0(1));
    }
}
