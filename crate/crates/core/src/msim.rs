//! Cross-attention interaction between the memory, the global view and
//! the four local views at the deepest stage.
//!
//! Three residual updates run in order:
//! 1. the global map attends to the memory tokens,
//! 2. the result attends to pooled local tokens,
//! 3. every local attends to the updated global map (with positional keys).

use crate::autograd::{Graph, Var};
use crate::config::MsimConfig;
use crate::error::{ensure, Result};
use crate::nn::{self, Mhca};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::views::NUM_LOCALS;

#[derive(Clone, Copy, Debug)]
pub struct MsimOutput {
    /// History-updated global `[C, h, w]`.
    pub g_h: Var,
    /// Local-updated global `[C, h, w]`.
    pub g_msim: Var,
    /// Updated locals `[4, C, h, w]`.
    pub l_msim: Var,
}

#[derive(Clone, Debug)]
pub struct Msim {
    cfg: MsimConfig,
    channels: usize,
    memory_dim: usize,
}

impl Msim {
    pub fn new(cfg: MsimConfig, channels: usize, memory_dim: usize) -> Self {
        Self {
            cfg,
            channels,
            memory_dim,
        }
    }

    fn history(&self) -> Mhca {
        Mhca::new("msim.history", self.channels, self.memory_dim, self.channels, self.cfg.heads)
    }

    fn locals(&self) -> Mhca {
        Mhca::new("msim.locals", self.channels, self.channels, self.channels, self.cfg.heads)
    }

    fn global(&self) -> Mhca {
        Mhca::new("msim.global", self.channels, self.channels, self.channels, self.cfg.heads)
    }

    /// Output projections start at zero so every update is an identity.
    pub fn init_params(&self, store: &mut ParamStore, init: &mut Init) {
        self.history().init(store, init, true);
        self.locals().init(store, init, true);
        self.global().init(store, init, true);
    }

    fn tokens(g: &mut Graph, map: Var) -> (Var, usize, usize) {
        let s = g.shape(map).to_vec();
        let x = g.reshape(map, &[s[0], s[1] * s[2]]);
        (g.permute(x, &[1, 0]), s[1], s[2])
    }

    fn untokens(g: &mut Graph, tokens: Var, c: usize, h: usize, w: usize) -> Var {
        let x = g.permute(tokens, &[1, 0]);
        g.reshape(x, &[c, h, w])
    }

    /// `G_h = G + Dropout(MHCA(G, H))`; identity when `memory` is empty.
    pub fn update_global_with_history(&self, g: &mut Graph, global: Var, memory: &Tensor) -> Result<Var> {
        if memory.numel() == 0 {
            return Ok(global);
        }
        ensure!(
            memory.rank() == 2 && memory.shape()[1] == self.memory_dim,
            Config,
            "memory tokens of width {:?} do not match {}",
            memory.shape(),
            self.memory_dim
        );
        let c = g.shape(global)[0];
        ensure!(c == self.channels, Config, "global has {c} channels, expected {}", self.channels);
        let (q, h, w) = Self::tokens(g, global);
        let kv = g.constant(memory.clone());
        let att = self.history().forward(g, q, kv, None);
        let upd = g.dropout(att.out, self.cfg.dropout);
        let out = g.add(q, upd);
        Ok(Self::untokens(g, out, c, h, w))
    }

    /// Local tokens pooled by each configured factor (clamped to the map).
    pub fn pooled_local_tokens(&self, g: &mut Graph, locals: Var) -> Var {
        let s = g.shape(locals).to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut parts = Vec::new();
        for &f in &self.cfg.local_pool_factors {
            let f = f.min(h).min(w).max(1);
            let p = g.avg_pool(locals, f);
            let t = nn::to_tokens(g, p);
            let n = (h / f) * (w / f);
            let t = if self.cfg.local_view_encoding {
                let enc = Tensor::from_fn(&[NUM_LOCALS, n, c], |i| nn::sinusoid((i / (n * c)) as f64, c)[i % c]);
                let enc = g.constant(enc);
                g.add(t, enc)
            } else {
                t
            };
            parts.push(g.reshape(t, &[NUM_LOCALS * n, c]));
        }
        g.concat(&parts, 0)
    }

    /// `G_msim = G_h + Dropout(MHCA(G_h, pooled locals))`.
    pub fn update_global_with_locals(&self, g: &mut Graph, g_h: Var, locals: Var) -> Result<Var> {
        let ls = g.shape(locals).to_vec();
        ensure!(
            ls.len() == 4 && ls[0] == NUM_LOCALS && ls[1..] == *g.shape(g_h),
            Config,
            "locals {:?} do not match global {:?}",
            ls,
            g.shape(g_h)
        );
        let (q, h, w) = Self::tokens(g, g_h);
        let kv = self.pooled_local_tokens(g, locals);
        let att = self.locals().forward(g, q, kv, None);
        let upd = g.dropout(att.out, self.cfg.dropout);
        let out = g.add(q, upd);
        Ok(Self::untokens(g, out, ls[1], h, w))
    }

    /// `L_m = L_m + Dropout(MHCA(L_m, G_msim + p))` for all four locals,
    /// queried together.
    pub fn update_locals(&self, g: &mut Graph, locals: Var, g_msim: Var) -> Result<Var> {
        let ls = g.shape(locals).to_vec();
        ensure!(
            ls.len() == 4 && ls[0] == NUM_LOCALS && ls[1..] == *g.shape(g_msim),
            Config,
            "locals {:?} do not match global {:?}",
            ls,
            g.shape(g_msim)
        );
        let (c, h, w) = (ls[1], ls[2], ls[3]);
        let q = nn::to_tokens(g, locals);
        let q = g.reshape(q, &[NUM_LOCALS * h * w, c]);
        let (kv, _, _) = Self::tokens(g, g_msim);
        let pos = g.constant(nn::sinusoid_2d(h, w, c));
        let att = self.global().forward(g, q, kv, Some(pos));
        let upd = g.dropout(att.out, self.cfg.dropout);
        let out = g.add(q, upd);
        let out = g.reshape(out, &[NUM_LOCALS, h * w, c]);
        Ok(nn::from_tokens(g, out, h, w))
    }

    /// All three updates on a deepest-stage map `[5, C, h, w]` (global last).
    pub fn forward(&self, g: &mut Graph, stage: Var, memory: &Tensor) -> Result<MsimOutput> {
        let locals = g.slice(stage, 0, 0, NUM_LOCALS);
        let global = g.slice(stage, 0, NUM_LOCALS, 1);
        let s = g.shape(global).to_vec();
        let global = g.reshape(global, &s[1..]);
        let g_h = self.update_global_with_history(g, global, memory)?;
        let g_msim = self.update_global_with_locals(g, g_h, locals)?;
        let l_msim = self.update_locals(g, locals, g_msim)?;
        Ok(MsimOutput { g_h, g_msim, l_msim })
    }
}

/// `[4, C, h, w]` locals and `[C, h, w]` global back into `[5, C, h, w]`.
pub fn restack(g: &mut Graph, out: &MsimOutput) -> Var {
    let s = g.shape(out.g_msim).to_vec();
    let gl = g.reshape(out.g_msim, &[1, s[0], s[1], s[2]]);
    g.concat(&[out.l_msim, gl], 0)
}
