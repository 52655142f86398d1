//! Tiny visual autoregressive prior.
//!
//! A small VQ-VAE maps a view to a `d x L x L` latent that is quantized
//! scale by scale: scale `k` quantizes the average-pooled residual left
//! after subtracting the dequantized (nearest-upsampled) scales `1..k-1`.
//! Codebook row 0 is pinned to the zero vector, which makes every
//! quantization step non-increasing in latent error.
//!
//! A one-block transformer predicts the token map of scale `k` from a
//! start token and the maps of scales `< k`. Its logits pass through a
//! residual bottleneck adapter whose up-projection starts at zero. The
//! adapter and the prior projections are the only parts trained once the
//! backbone is frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Trainable, Var};
use crate::config::{ToyVarConfig, NUM_STAGES};
use crate::error::{ensure, Error, Result};
use crate::nn::{self, Mhca};
use crate::params::{Adam, Init, ParamStore};
use crate::tensor::Tensor;
use crate::views;

pub const BACKBONE_PREFIX: &str = "var.backbone.";
pub const ADAPTER_PREFIX: &str = "var.adapter.";
pub const PROJ_PREFIX: &str = "var.proj.";
const CODEBOOK: &str = "var.backbone.codebook";

/// Token map of one scale: `side x side` codebook indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    pub side: usize,
    pub indices: Vec<usize>,
}

/// Result of quantizing one latent.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub tokens: Vec<TokenMap>,
    /// `cumulative[k]` is the dequantized sum of scales `1..=k` at full
    /// latent resolution; `cumulative[0]` is zero.
    pub cumulative: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ToyVar {
    cfg: ToyVarConfig,
    stage_channels: [usize; NUM_STAGES],
}

impl ToyVar {
    pub fn new(cfg: ToyVarConfig, stage_channels: [usize; NUM_STAGES]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, stage_channels })
    }

    pub fn config(&self) -> &ToyVarConfig {
        &self.cfg
    }

    fn attn(&self) -> Mhca {
        let d = self.cfg.code_dim;
        Mhca::new("var.backbone.t.attn", d, d, d, self.cfg.heads)
    }

    pub fn init_params(&self, store: &mut ParamStore, init: &mut Init) {
        let c = &self.cfg;
        let (e, d, dc, k) = (c.enc_channels, c.code_dim, c.dec_channels, c.codebook_size);
        nn::init_conv(store, init, "var.backbone.enc.c1", 3, e, 3);
        nn::init_conv(store, init, "var.backbone.enc.c2", e, e, 3);
        nn::init_conv(store, init, "var.backbone.enc.c3", e, d, 1);
        let mut cb = init.uniform(&[k, d], -1.0, 1.0);
        cb.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
        store.insert(CODEBOOK, cb);
        nn::init_conv(store, init, "var.backbone.dec.c1", d, dc, 3);
        nn::init_conv(store, init, "var.backbone.dec.c2", dc, dc, 3);
        nn::init_conv(store, init, "var.backbone.dec.c3", dc, dc, 3);
        nn::init_conv(store, init, "var.backbone.dec.out", dc, 3, 3);

        store.insert("var.backbone.t.start", init.normal(&[1, d], 0.5));
        store.insert("var.backbone.t.level", init.normal(&[NUM_STAGES + 1, d], 0.5));
        nn::init_linear(store, init, "var.backbone.t.in", d, d);
        self.attn().init(store, init, false);
        nn::init_linear(store, init, "var.backbone.t.mlp1", d, c.mlp_hidden);
        nn::init_linear(store, init, "var.backbone.t.mlp2", c.mlp_hidden, d);
        nn::init_linear(store, init, "var.backbone.t.head", d, k);

        nn::init_linear(store, init, "var.adapter.down", k, c.adapter_bottleneck);
        nn::init_linear_zero(store, "var.adapter.up", c.adapter_bottleneck, k);
        for (i, &ch) in self.stage_channels.iter().enumerate() {
            nn::init_conv_zero(store, &format!("var.proj.{}", i + 1), dc, ch, 1);
        }
    }

    fn codebook<'a>(&self, store: &'a ParamStore) -> Result<&'a Tensor> {
        let cb = store
            .get(CODEBOOK)
            .ok_or_else(|| Error::Config("toyvar codebook missing".into()))?;
        ensure!(
            cb.rank() == 2 && cb.shape()[0] > 0 && cb.shape()[1] == self.cfg.code_dim,
            Config,
            "codebook shape {:?} is empty or does not match code_dim {}",
            cb.shape(),
            self.cfg.code_dim
        );
        Ok(cb)
    }

    /// Resample `[.., 3, h, w]` images to the quantizer input size.
    pub fn prepare(&self, images: &Tensor) -> Tensor {
        let s = self.cfg.input_size;
        images.resize_bilinear(s, s)
    }

    /// `x[N, 3, S, S] -> z[N, d, L, L]`.
    fn encode_graph(&self, g: &mut Graph, x: Var) -> Var {
        let h = nn::conv_relu(g, "var.backbone.enc.c1", x, 2);
        let h = nn::conv_relu(g, "var.backbone.enc.c2", h, 2);
        nn::conv(g, "var.backbone.enc.c3", h, 1)
    }

    /// Decoder trunk shared by reconstruction and prior extraction:
    /// `[N, d, s, s] -> [N, dec, 2s, 2s]`.
    fn decode_features_graph(&self, g: &mut Graph, latent: Var) -> Var {
        let h = nn::conv_relu(g, "var.backbone.dec.c1", latent, 1);
        let h = g.upsample_nearest(h, 2);
        nn::conv_relu(g, "var.backbone.dec.c2", h, 1)
    }

    /// Reconstruction head: `[N, dec, 2L, 2L] -> [N, 3, 4L, 4L]`.
    fn decode_image_graph(&self, g: &mut Graph, feat: Var) -> Var {
        let h = g.upsample_nearest(feat, 2);
        let h = nn::conv_relu(g, "var.backbone.dec.c3", h, 1);
        nn::conv(g, "var.backbone.dec.out", h, 1)
    }

    /// Continuous latents of `[N, 3, h, w]` images.
    pub fn latents(&self, store: &ParamStore, images: &Tensor) -> Tensor {
        let mut g = Graph::new(store).with_trainable(Trainable::Nothing);
        let x = g.constant(self.prepare(images));
        let z = self.encode_graph(&mut g, x);
        g.value(z).clone()
    }

    /// Multi-scale residual quantization of one `[d, L, L]` latent.
    pub fn quantize(&self, codebook: &Tensor, latent: &Tensor) -> Quantized {
        let l = self.cfg.latent_side();
        let d = self.cfg.code_dim;
        assert_eq!(latent.shape(), [d, l, l]);
        let mut residual = latent.clone();
        let mut acc = Tensor::zeros(&[d, l, l]);
        let mut tokens = Vec::with_capacity(NUM_STAGES);
        let mut cumulative = vec![acc.clone()];
        for &s in &self.cfg.scales {
            let pooled = residual.avg_pool(l / s);
            let indices = nearest_codes(codebook, &pooled);
            let map = TokenMap { side: s, indices };
            let up = embed(codebook, &map).upsample_nearest(l / s);
            residual = residual.zip_map(&up, |r, u| r - u);
            acc = acc.zip_map(&up, |a, u| a + u);
            tokens.push(map);
            cumulative.push(acc.clone());
        }
        Quantized { tokens, cumulative }
    }

    /// Token maps for one `[3, h, w]` image, coarse to fine.
    pub fn vq_encode(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<TokenMap>> {
        ensure!(image.rank() == 3 && image.shape()[0] == 3, RejectedInput, "expected 3 x h x w image, got {:?}", image.shape());
        let cb = self.codebook(store)?;
        let z = self.latents(store, &image.clone().reshape(&[1, 3, image.shape()[1], image.shape()[2]]));
        Ok(self.quantize(cb, &z.index0(0)).tokens)
    }

    fn check_tokens(&self, cb: &Tensor, tokens: &[TokenMap]) -> Result<()> {
        ensure!(tokens.len() <= NUM_STAGES, Contract, "{} token maps exceed the schedule", tokens.len());
        for (k, t) in tokens.iter().enumerate() {
            ensure!(
                t.side == self.cfg.scales[k] && t.indices.len() == t.side * t.side,
                Contract,
                "token map {k} has side {} but the schedule expects {}",
                t.side,
                self.cfg.scales[k]
            );
            ensure!(
                t.indices.iter().all(|&i| i < cb.shape()[0]),
                Contract,
                "token map {k} holds an index outside [0, {})",
                cb.shape()[0]
            );
        }
        Ok(())
    }

    /// Sum of the dequantized maps at full latent resolution.
    pub fn dequantize(&self, codebook: &Tensor, tokens: &[TokenMap]) -> Tensor {
        let l = self.cfg.latent_side();
        let mut acc = Tensor::zeros(&[self.cfg.code_dim, l, l]);
        for t in tokens {
            let up = embed(codebook, t).upsample_nearest(l / t.side);
            acc = acc.zip_map(&up, |a, u| a + u);
        }
        acc
    }

    /// Reconstruction `[3, S, S]` plus one decoder feature map per scale;
    /// map `k` decodes the cumulative latent of scales `1..=k` pooled to
    /// side `s_k`, giving `[dec, 2 s_k, 2 s_k]`.
    pub fn vq_decode(&self, store: &ParamStore, tokens: &[TokenMap]) -> Result<(Tensor, Vec<Tensor>)> {
        let cb = self.codebook(store)?;
        ensure!(tokens.len() == NUM_STAGES, Contract, "expected {NUM_STAGES} token maps, got {}", tokens.len());
        self.check_tokens(cb, tokens)?;
        let l = self.cfg.latent_side();
        let d = self.cfg.code_dim;
        let mut g = Graph::new(store).with_trainable(Trainable::Nothing);
        let mut features = Vec::with_capacity(NUM_STAGES);
        let mut full_feat = None;
        for k in 1..=NUM_STAGES {
            let s = self.cfg.scales[k - 1];
            let lat = self.dequantize(cb, &tokens[..k]).avg_pool(l / s).reshape(&[1, d, s, s]);
            let lv = g.constant(lat);
            let f = self.decode_features_graph(&mut g, lv);
            features.push(g.value(f).index0(0));
            if k == NUM_STAGES {
                full_feat = Some(f);
            }
        }
        let img = self.decode_image_graph(&mut g, full_feat.expect("five scales"));
        Ok((g.value(img).index0(0), features))
    }

    /// `‖z − ĉ_k‖` for `k = 0..=5`, where `ĉ_k` is the cumulative
    /// dequantization after `k` scales.
    pub fn residual_norms(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<f64>> {
        let cb = self.codebook(store)?;
        let z = self
            .latents(store, &image.clone().reshape(&[1, 3, image.shape()[1], image.shape()[2]]))
            .index0(0);
        let q = self.quantize(cb, &z);
        Ok(q.cumulative
            .iter()
            .map(|c| z.zip_map(c, |a, b| (a - b).powi(2)).sum().sqrt())
            .collect())
    }

    fn token_position(&self, side: usize, y: usize, x: usize) -> Vec<f64> {
        let l = self.cfg.latent_side() as f64;
        let d = self.cfg.code_dim;
        let scale = l / side as f64;
        let mut p = nn::sinusoid((y as f64 + 0.5) * scale, d / 2);
        p.extend(nn::sinusoid((x as f64 + 0.5) * scale, d - d / 2));
        p
    }

    /// `[d, s, s]` map to `[s*s, d]` tokens with level and position terms,
    /// passed through the input projection.
    fn scale_tokens(&self, g: &mut Graph, map: &Tensor, level: usize) -> Var {
        let (d, s) = (map.shape()[0], map.shape()[1]);
        let rows = crate::autograd::permute(&map.clone().reshape(&[d, s * s]), &[1, 0]);
        let rv = g.constant(rows);
        let x = nn::linear(g, "var.backbone.t.in", rv);
        let table = g.param("var.backbone.t.level");
        let lvl = g.slice(table, 0, level, 1);
        let x = g.add_bcast(x, lvl);
        let mut pos = Vec::with_capacity(s * s * d);
        for y in 0..s {
            for xx in 0..s {
                pos.extend(self.token_position(s, y, xx));
            }
        }
        let pos = g.constant(Tensor::new(&[s * s, d], pos));
        g.add(x, pos)
    }

    /// Next-scale logits for scale `k` (1-based) given the token maps of
    /// scales `1..k`, adapter applied: `[s_k * s_k, K]`.
    pub fn predict_next_scale(&self, g: &mut Graph, context: &[TokenMap], k: usize) -> Result<Var> {
        ensure!((1..=NUM_STAGES).contains(&k), Contract, "scale {k} outside 1..={NUM_STAGES}");
        ensure!(context.len() >= k - 1, Contract, "scale {k} needs {} context maps, got {}", k - 1, context.len());
        let store = g.store();
        let cb = self.codebook(store)?.clone();
        let ctx_maps = &context[..k - 1];
        self.check_tokens(&cb, ctx_maps)?;
        let raw = self.backbone_logits(g, &cb, ctx_maps, k);
        Ok(self.adapt(g, raw))
    }

    /// Transformer logits before the adapter.
    fn backbone_logits(&self, g: &mut Graph, cb: &Tensor, ctx_maps: &[TokenMap], k: usize) -> Var {
        let d = self.cfg.code_dim;
        let l = self.cfg.latent_side();
        let start = g.param("var.backbone.t.start");
        let table = g.param("var.backbone.t.level");
        let lvl0 = g.slice(table, 0, 0, 1);
        let start_tok = g.add(start, lvl0);
        let mut ctx = vec![start_tok];
        for (j, t) in ctx_maps.iter().enumerate() {
            let map = embed(cb, t);
            ctx.push(self.scale_tokens(g, &map, j + 1));
        }
        let ctx = g.concat(&ctx, 0);
        let s = self.cfg.scales[k - 1];
        let query = if k == 1 {
            let lvl = g.slice(table, 0, 1, 1);
            g.add(start, lvl)
        } else {
            let coarse = self.dequantize(cb, ctx_maps).avg_pool(l / s);
            self.scale_tokens(g, &coarse, k)
        };
        let att = self.attn().forward(g, query, ctx, None);
        let h = g.add(query, att.out);
        let hn = g.layer_norm(h, 1e-5);
        let m = nn::linear(g, "var.backbone.t.mlp1", hn);
        let m = g.relu(m);
        let m = nn::linear(g, "var.backbone.t.mlp2", m);
        let h = g.add(h, m);
        debug_assert_eq!(g.shape(h), &[s * s, d]);
        let hn = g.layer_norm(h, 1e-5);
        nn::linear(g, "var.backbone.t.head", hn)
    }

    /// Residual bottleneck adapter on the logits.
    fn adapt(&self, g: &mut Graph, logits: Var) -> Var {
        let a = nn::linear(g, "var.adapter.down", logits);
        let a = g.relu(a);
        let a = nn::linear(g, "var.adapter.up", a);
        g.add(logits, a)
    }

    /// Raw backbone logits without the adapter (for comparisons).
    pub fn predict_next_scale_raw(&self, g: &mut Graph, context: &[TokenMap], k: usize) -> Result<Var> {
        ensure!((1..=NUM_STAGES).contains(&k), Contract, "scale {k} outside 1..={NUM_STAGES}");
        let cb = self.codebook(g.store())?.clone();
        self.check_tokens(&cb, &context[..k - 1])?;
        Ok(self.backbone_logits(g, &cb, &context[..k - 1], k))
    }

    /// Greedy (argmax) generation of all five token maps.
    pub fn generate_greedy(&self, store: &ParamStore) -> Result<Vec<TokenMap>> {
        let mut maps: Vec<TokenMap> = Vec::new();
        for k in 1..=NUM_STAGES {
            let mut g = Graph::new(store).with_trainable(Trainable::Nothing);
            let logits = self.predict_next_scale(&mut g, &maps, k)?;
            let lv = g.value(logits);
            let kk = lv.shape()[1];
            let indices = lv
                .data()
                .chunks(kk)
                .map(argmax)
                .collect();
            maps.push(TokenMap { side: self.cfg.scales[k - 1], indices });
        }
        Ok(maps)
    }

    /// Prior feature maps for a batch of views `[N, 3, h, w]`, one entry
    /// per encoder stage (1-based order), channel-projected to the stage
    /// width and resampled to `stage_sizes[i]`. Disabled stages are `None`.
    pub fn extract_priors(
        &self,
        g: &mut Graph,
        views: &Tensor,
        stage_sizes: &[(usize, usize); NUM_STAGES],
    ) -> Result<Vec<Option<Var>>> {
        let store = g.store();
        let cb = self.codebook(store)?.clone();
        let n = views.shape()[0];
        let (d, l) = (self.cfg.code_dim, self.cfg.latent_side());
        let z = self.latents(store, views);
        let quantized: Vec<Quantized> = (0..n).map(|i| self.quantize(&cb, &z.index0(i))).collect();
        let cbv = g.constant(cb.clone());
        let mut per_scale = Vec::with_capacity(NUM_STAGES);
        for k in 1..=NUM_STAGES {
            let stage = NUM_STAGES + 1 - k;
            if !self.cfg.prior_stages[stage - 1] {
                per_scale.push(None);
                continue;
            }
            let s = self.cfg.scales[k - 1];
            let mut latents = Vec::with_capacity(n);
            for q in &quantized {
                let raw = self.backbone_logits(g, &cb, &q.tokens[..k - 1], k);
                let logits = self.adapt(g, raw);
                let probs = g.softmax(logits);
                let soft = g.matmul(probs, cbv);
                let soft = g.permute(soft, &[1, 0]);
                let soft = g.reshape(soft, &[1, d, s, s]);
                let coarse = q.cumulative[k - 1].avg_pool(l / s).reshape(&[1, d, s, s]);
                let coarse = g.constant(coarse);
                latents.push(g.add(coarse, soft));
            }
            let lat = g.concat(&latents, 0);
            per_scale.push(Some(self.decode_features_graph(g, lat)));
        }
        let mut priors = vec![None; NUM_STAGES];
        for (k, feat) in per_scale.into_iter().enumerate() {
            let stage = NUM_STAGES - k;
            let Some(feat) = feat else { continue };
            let p = nn::conv(g, &format!("var.proj.{stage}"), feat, 1);
            ensure!(
                g.shape(p)[1] == self.stage_channels[stage - 1],
                Config,
                "prior {stage} has {} channels, stage expects {}",
                g.shape(p)[1],
                self.stage_channels[stage - 1]
            );
            let (th, tw) = stage_sizes[stage - 1];
            let ps = g.shape(p).to_vec();
            let p = if (ps[2], ps[3]) == (th, tw) { p } else { g.resize_bilinear(p, th, tw) };
            priors[stage - 1] = Some(p);
        }
        Ok(priors)
    }

    /// Pretrain the backbone on views of `frames` (each `[3, H, W]`).
    /// Adapters and prior projections are left untouched.
    pub fn pretrain(
        &self,
        store: &mut ParamStore,
        frames: &[Tensor],
        opts: &PretrainOptions,
    ) -> Result<PretrainReport> {
        ensure!(!frames.is_empty(), Contract, "pretraining corpus is empty");
        self.codebook(store)?;
        let mut pool = Vec::with_capacity(frames.len() * views::NUM_VIEWS);
        for f in frames {
            let v = views::decompose(f)?;
            for t in v.stacked().data().chunks(v.global_view.numel()) {
                let view = Tensor::new(v.global_view.shape(), t.to_vec());
                pool.push(self.prepare(&view));
            }
        }
        let eval: Vec<usize> = (0..pool.len()).step_by((pool.len() / 8).max(1)).take(8).collect();
        let initial = self.pretrain_losses(store, &pool, &eval, false)?.0;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = Adam::default();
        let d = self.cfg.code_dim;
        let mut history = Vec::with_capacity(opts.steps);
        for step in 0..opts.steps {
            let batch: Vec<usize> = (0..opts.batch).map(|_| rng.gen_range(0..pool.len())).collect();
            let (losses, grads) = self.pretrain_losses(store, &pool, &batch, true)?;
            let total = losses.total();
            if !total.is_finite() {
                return Err(Error::Training { step, reason: format!("non-finite pretraining loss {total}") });
            }
            history.push(losses);
            let grads = grads.expect("gradients requested");
            adam.update(store, &grads, opts.lr, |name, i| !(name == CODEBOOK && i < d));
            store.snap_to_f32();
        }
        let last = self.pretrain_losses(store, &pool, &eval, false)?.0;
        Ok(PretrainReport { initial, last, history })
    }

    fn pretrain_losses(
        &self,
        store: &ParamStore,
        pool: &[Tensor],
        batch: &[usize],
        want_grads: bool,
    ) -> Result<(PretrainLosses, Option<std::collections::BTreeMap<String, Tensor>>)> {
        let cb = self.codebook(store)?.clone();
        let (d, l) = (self.cfg.code_dim, self.cfg.latent_side());
        let trainable = Trainable::Except(vec![ADAPTER_PREFIX.into(), PROJ_PREFIX.into()]);
        let mut g = Graph::new(store).with_trainable(trainable);
        let images: Vec<Tensor> = batch.iter().map(|&i| pool[i].clone()).collect();
        let x = Tensor::stack(&images);
        let xv = g.constant(x);
        let z = self.encode_graph(&mut g, xv);
        let zval = g.value(z).clone();
        let cbv = g.param(CODEBOOK);
        let mut fhat_parts = Vec::with_capacity(batch.len());
        let mut ce_terms = Vec::new();
        for b in 0..batch.len() {
            let q = self.quantize(&cb, &zval.index0(b));
            let mut acc: Option<Var> = None;
            for t in &q.tokens {
                let e = g.gather_rows(cbv, &t.indices);
                let e = g.permute(e, &[1, 0]);
                let e = g.reshape(e, &[1, d, t.side, t.side]);
                let e = g.upsample_nearest(e, l / t.side);
                acc = Some(match acc {
                    Some(a) => g.add(a, e),
                    None => e,
                });
            }
            fhat_parts.push(acc.expect("five scales"));
            for k in 1..=NUM_STAGES {
                let logits = self.backbone_logits(&mut g, &cb, &q.tokens[..k - 1], k);
                let lp = g.log_softmax(logits);
                let picked = g.pick(lp, &q.tokens[k - 1].indices);
                let mean_lp = g.mean(picked);
                let nll = g.scale(mean_lp, -1.0);
                ce_terms.push(nll);
            }
        }
        let fhat = g.concat(&fhat_parts, 0);
        let fval = g.value(fhat).clone();
        // codebook term pulls codes toward the (fixed) encoder output,
        // commitment term pulls the encoder toward the (fixed) codes
        let zc = g.constant(zval.clone());
        let diff_cb = g.sub(zc, fhat);
        let sq_cb = g.mul(diff_cb, diff_cb);
        let codebook_loss = g.mean(sq_cb);
        let fc = g.constant(fval.clone());
        let diff_cm = g.sub(z, fc);
        let sq_cm = g.mul(diff_cm, diff_cm);
        let commit = g.mean(sq_cm);
        let vq = g.add(codebook_loss, commit);
        let st = g.constant(fval.zip_map(&zval, |f, z| f - z));
        let zq = g.add(z, st);
        let feat = self.decode_features_graph(&mut g, zq);
        let recon = self.decode_image_graph(&mut g, feat);
        let err = g.sub(recon, xv);
        let sq = g.mul(err, err);
        let mse = g.mean(sq);
        let ce_sum = ce_terms.iter().skip(1).fold(ce_terms[0], |a, &b| g.add(a, b));
        let ce = g.scale(ce_sum, 1.0 / ce_terms.len() as f64);
        let t1 = g.add(mse, vq);
        let total = g.add(t1, ce);
        let losses = PretrainLosses {
            reconstruction: g.value(mse).item(),
            vq: g.value(vq).item(),
            cross_entropy: g.value(ce).item(),
        };
        let grads = want_grads.then(|| g.backward(total).into_params());
        Ok((losses, grads))
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainLosses {
    pub reconstruction: f64,
    pub vq: f64,
    pub cross_entropy: f64,
}

impl PretrainLosses {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.vq + self.cross_entropy
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Losses on a fixed evaluation subset before the first step.
    pub initial: PretrainLosses,
    /// Same subset after the last step.
    pub last: PretrainLosses,
    pub history: Vec<PretrainLosses>,
}

/// Nearest codebook row for every spatial position of `[d, s, s]`;
/// ties resolve to the lowest index.
pub fn nearest_codes(codebook: &Tensor, map: &Tensor) -> Vec<usize> {
    let (k, d) = (codebook.shape()[0], codebook.shape()[1]);
    let hw = map.numel() / d;
    let m = map.data();
    (0..hw)
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for j in 0..k {
                let c = &codebook.data()[j * d..(j + 1) * d];
                let dist: f64 = (0..d).map(|ch| (m[ch * hw + p] - c[ch]).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            best.1
        })
        .collect()
}

/// Code vectors of a token map as a `[d, s, s]` tensor.
pub fn embed(codebook: &Tensor, map: &TokenMap) -> Tensor {
    let d = codebook.shape()[1];
    let n = map.side * map.side;
    Tensor::from_fn(&[d, map.side, map.side], |i| {
        let (ch, p) = (i / n, i % n);
        codebook.data()[map.indices[p] * d + ch]
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
