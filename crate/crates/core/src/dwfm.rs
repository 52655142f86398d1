//! Per-patch fusion weights between each local view and the global view.
//!
//! Every local's decoded stage-1 map is cut into a 4x4 grid of patches.
//! Patch pixels attend to a pooled reference global map; the attention
//! output is averaged per patch and squashed to a scalar in `[0, 1]`.
//! Weights from the current and previous references are blended with a
//! decaying history of past fused weights.

use crate::autograd::{softmax_last, Graph, Var};
use crate::config::DwfmConfig;
use crate::error::{ensure, Result};
use crate::nn::{self, Mhca};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::views::{check_weights, PatchWeights, NUM_LOCALS, PATCHES_PER_LOCAL, PATCH_GRID};

pub const MIX: &str = "dwfm.mix";

/// Convex mixing coefficients of the fused weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl FusionParams {
    pub fn uniform() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
        }
    }

    /// Softmax of the three stored logits.
    pub fn from_store(store: &ParamStore) -> Self {
        let p = softmax_last(store.get(MIX).expect("dwfm mixing logits"));
        Self {
            alpha: p.data()[0],
            beta: p.data()[1],
            gamma: p.data()[2],
        }
    }
}

/// Fused weight of frame `t`: `W_g` at `t = 0`, otherwise
/// `alpha W_l + beta W_g + gamma W_h`.
pub fn fuse_weights(
    w_l: Option<&PatchWeights>,
    w_g: &PatchWeights,
    w_h: Option<&PatchWeights>,
    t: usize,
    p: FusionParams,
) -> Result<PatchWeights> {
    check_weights(w_g)?;
    if t == 0 {
        return Ok(*w_g);
    }
    let (Some(w_l), Some(w_h)) = (w_l, w_h) else {
        return Err(crate::Error::Contract(format!("frame {t} needs local and historical weights")));
    };
    check_weights(w_l)?;
    check_weights(w_h)?;
    Ok(std::array::from_fn(|m| {
        std::array::from_fn(|i| (p.alpha * w_l[m][i] + p.beta * w_g[m][i] + p.gamma * w_h[m][i]).clamp(0.0, 1.0))
    }))
}

/// `W_h <- delta W_h + (1 - delta) W_final`.
pub fn update_history(w_h: &PatchWeights, w_final: &PatchWeights, delta: f64) -> Result<PatchWeights> {
    ensure!(delta > 0.0 && delta < 1.0, Config, "delta {delta} must lie in (0, 1)");
    Ok(std::array::from_fn(|m| {
        std::array::from_fn(|i| delta * w_h[m][i] + (1.0 - delta) * w_final[m][i])
    }))
}

pub fn weights_to_tensor(w: &PatchWeights) -> Tensor {
    Tensor::new(&[NUM_LOCALS, PATCHES_PER_LOCAL], w.iter().flatten().copied().collect())
}

pub fn tensor_to_weights(t: &Tensor) -> PatchWeights {
    assert_eq!(t.shape(), [NUM_LOCALS, PATCHES_PER_LOCAL]);
    std::array::from_fn(|m| std::array::from_fn(|i| t.data()[m * PATCHES_PER_LOCAL + i]))
}

/// Per-video fusion state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightState {
    pub history: Option<PatchWeights>,
    pub last_final: Option<PatchWeights>,
    pub t: usize,
}

impl WeightState {
    /// Record this frame's fused weight and advance `t`. At `t = 0` the
    /// history starts as the fused (= current global) weight.
    pub fn advance(&mut self, w_final: &PatchWeights, delta: f64) -> Result<()> {
        check_weights(w_final)?;
        self.history = Some(match &self.history {
            Some(h) if self.t > 0 => update_history(h, w_final, delta)?,
            _ => *w_final,
        });
        self.last_final = Some(*w_final);
        self.t += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

#[derive(Clone, Debug)]
pub struct Dwfm {
    cfg: DwfmConfig,
    channels: usize,
}

impl Dwfm {
    pub fn new(cfg: DwfmConfig, channels: usize) -> Self {
        Self { cfg, channels }
    }

    pub fn config(&self) -> &DwfmConfig {
        &self.cfg
    }

    fn attn(&self) -> Mhca {
        Mhca::new("dwfm.attn", self.channels, self.channels, self.channels, self.cfg.heads)
    }

    pub fn init_params(&self, store: &mut ParamStore, init: &mut Init) {
        self.attn().init(store, init, false);
        nn::init_linear(store, init, "dwfm.head", self.channels, 1);
        let total: f64 = self.cfg.mix_init.iter().sum();
        store.insert(MIX, Tensor::new(&[3], self.cfg.mix_init.iter().map(|v| (v / total).ln()).collect()));
    }

    /// Patch weights `[4, 16]` for decoded locals `[4, C, h, w]` against a
    /// reference map `[C, h', w']`.
    pub fn patch_weights(&self, g: &mut Graph, locals: Var, reference: Option<Var>) -> Result<Var> {
        let Some(reference) = reference else {
            return Err(crate::Error::Contract("patch weights need a reference feature".into()));
        };
        let ls = g.shape(locals).to_vec();
        ensure!(
            ls.len() == 4 && ls[0] == NUM_LOCALS && ls[1] == self.channels,
            Config,
            "decoded locals {:?} do not have {} channels",
            ls,
            self.channels
        );
        let (c, h, w) = (ls[1], ls[2], ls[3]);
        ensure!(
            h % PATCH_GRID == 0 && w % PATCH_GRID == 0,
            RejectedInput,
            "local {h}x{w} is not divisible into patches"
        );
        let rs = g.shape(reference).to_vec();
        ensure!(rs.len() == 3 && rs[0] == c, Config, "reference {:?} does not match locals {:?}", rs, ls);
        let (ph, pw) = (h / PATCH_GRID, w / PATCH_GRID);
        let x = g.reshape(locals, &[NUM_LOCALS, c, PATCH_GRID, ph, PATCH_GRID, pw]);
        let x = g.permute(x, &[0, 2, 4, 3, 5, 1]);
        let q = g.reshape(x, &[NUM_LOCALS * PATCHES_PER_LOCAL * ph * pw, c]);
        let side = self.cfg.reference_side.min(rs[1]).min(rs[2]).max(1);
        let r = g.avg_pool(reference, rs[1] / side);
        let rshape = g.shape(r).to_vec();
        let r = g.reshape(r, &[c, rshape[1] * rshape[2]]);
        let kv = g.permute(r, &[1, 0]);
        let att = self.attn().forward(g, q, kv, None);
        let out = g.reshape(att.out, &[NUM_LOCALS * PATCHES_PER_LOCAL, ph * pw, c]);
        let pooled = g.mean_axis(out, 1);
        let logit = nn::linear(g, "dwfm.head", pooled);
        let wts = g.sigmoid(logit);
        Ok(g.reshape(wts, &[NUM_LOCALS, PATCHES_PER_LOCAL]))
    }

    /// Graph version of [`fuse_weights`] with the learnable mixing logits.
    pub fn fuse(&self, g: &mut Graph, w_l: Option<Var>, w_g: Var, w_h: Option<&PatchWeights>, t: usize) -> Result<Var> {
        if t == 0 {
            return Ok(w_g);
        }
        let (Some(w_l), Some(w_h)) = (w_l, w_h) else {
            return Err(crate::Error::Contract(format!("frame {t} needs local and historical weights")));
        };
        let mix = g.param(MIX);
        let mix = g.softmax(mix);
        let shape = [NUM_LOCALS, PATCHES_PER_LOCAL];
        let coef = |g: &mut Graph, i: usize| {
            let c = g.slice(mix, 0, i, 1);
            let c = g.reshape(c, &[1, 1]);
            g.broadcast(c, &shape)
        };
        let (a, b, c) = (coef(g, 0), coef(g, 1), coef(g, 2));
        let wh = g.constant(weights_to_tensor(w_h));
        let x = g.mul(a, w_l);
        let y = g.mul(b, w_g);
        let z = g.mul(c, wh);
        let s = g.add(x, y);
        Ok(g.add(s, z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::worst_rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fill(v: f64) -> PatchWeights {
        [[v; 16]; 4]
    }

    #[test]
    fn first_frame_uses_global_weight() {
        let w = fuse_weights(None, &fill(0.7), None, 0, FusionParams::uniform()).unwrap();
        assert_eq!(w, fill(0.7));
        // placeholders are ignored at t = 0
        let w2 = fuse_weights(Some(&fill(0.1)), &fill(0.7), Some(&fill(0.9)), 0, FusionParams::uniform()).unwrap();
        assert_eq!(w2, w);
    }

    #[test]
    fn convex_combination() {
        let p = FusionParams::uniform();
        let w = fuse_weights(Some(&fill(0.3)), &fill(0.3), Some(&fill(0.3)), 2, p).unwrap();
        assert!(w.iter().flatten().all(|&v| (v - 0.3).abs() < 1e-15));
        let p = FusionParams { alpha: 0.5, beta: 0.3, gamma: 0.2 };
        let w = fuse_weights(Some(&fill(1.0)), &fill(0.0), Some(&fill(0.5)), 1, p).unwrap();
        assert!(w.iter().flatten().all(|&v| (v - 0.6).abs() < 1e-15));
        assert!(matches!(
            fuse_weights(None, &fill(0.0), Some(&fill(0.5)), 1, p),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn history_update() {
        let h = update_history(&fill(0.2), &fill(0.6), 0.5).unwrap();
        assert!(h.iter().flatten().all(|&v| (v - 0.4).abs() < 1e-15));
        assert_eq!(update_history(&fill(0.3), &fill(0.3), 0.9).unwrap(), fill(0.3));
        assert!(matches!(update_history(&fill(0.3), &fill(0.3), 1.0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn state_starts_history_from_first_weight() {
        let mut s = WeightState::default();
        s.advance(&fill(0.8), 0.9).unwrap();
        assert_eq!(s.history, Some(fill(0.8)));
        s.advance(&fill(0.0), 0.9).unwrap();
        assert!((s.history.unwrap()[0][0] - 0.72).abs() < 1e-15);
        assert_eq!(s.t, 2);
        s.reset();
        assert_eq!(s, WeightState::default());
    }

    fn setup() -> (Dwfm, ParamStore) {
        let d = Dwfm::new(DwfmConfig { heads: 2, delta: 0.9, reference_side: 4, ..DwfmConfig::default() }, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        d.init_params(&mut store, &mut Init { rng: &mut rng });
        (d, store)
    }

    #[test]
    fn weights_in_range_and_symmetric() {
        let (d, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init { rng: &mut rng };
        let mut g = Graph::new(&store);
        let l = g.constant(init.normal(&[4, 4, 8, 8], 2.0));
        let r = g.constant(init.normal(&[4, 8, 8], 2.0));
        let w = d.patch_weights(&mut g, l, Some(r)).unwrap();
        assert_eq!(g.shape(w), &[4, 16]);
        assert!(g.value(w).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let same = g.constant(Tensor::from_fn(&[4, 4, 8, 8], |i| (((i / 64) % 4) * 3 + (i % 4)) as f64 * 0.1));
        let w = d.patch_weights(&mut g, same, Some(r)).unwrap();
        let v = g.value(w).data();
        assert!(v.iter().all(|&x| (x - v[0]).abs() < 1e-12));
        assert!(matches!(d.patch_weights(&mut g, l, None), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let (d, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut init = Init { rng: &mut rng };
        let l = init.normal(&[4, 4, 8, 8], 1.0);
        let r = init.normal(&[4, 8, 8], 1.0);
        let wl = init.uniform(&[4, 16], 0.0, 1.0);
        let wh = tensor_to_weights(&init.uniform(&[4, 16], 0.0, 1.0));
        let names = ["dwfm.head.w", "dwfm.head.b", "dwfm.attn.q.w", "dwfm.attn.o.w", MIX];
        let (worst, s) = worst_rel_err(&store, &names, 4, 1e-6, 1e-8, |g| {
            let lv = g.constant(l.clone());
            let rv = g.constant(r.clone());
            let wg = d.patch_weights(g, lv, Some(rv)).unwrap();
            let wl = g.constant(wl.clone());
            let f = d.fuse(g, Some(wl), wg, Some(&wh), 1).unwrap();
            let sq = g.mul(f, f);
            g.sum(sq)
        });
        assert!(worst < 1e-4, "{worst} {s:?}");
    }

    #[test]
    fn graph_fuse_matches_plain() {
        let (d, store) = setup();
        let mut g = Graph::new(&store);
        let wl = fill(0.9);
        let wg = fill(0.1);
        let wh = fill(0.5);
        let lv = g.constant(weights_to_tensor(&wl));
        let gv = g.constant(weights_to_tensor(&wg));
        let f = d.fuse(&mut g, Some(lv), gv, Some(&wh), 3).unwrap();
        let plain = fuse_weights(Some(&wl), &wg, Some(&wh), 3, FusionParams::from_store(&store)).unwrap();
        assert!(g.value(f).max_abs_diff(&weights_to_tensor(&plain)) < 1e-15);
    }
}
