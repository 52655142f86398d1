//! Layer building blocks shared by the model modules.
//!
//! Each helper registers its parameters under a name prefix at init time and
//! looks them up by the same prefix when building a forward graph.

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub fn init_conv(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{name}.w"), init.he(&[cout, cin, k, k], cin * k * k));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub fn init_conv_zero(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Square convolution with "same" padding for odd kernels at stride 1.
pub fn conv(g: &mut Graph, name: &str, x: Var, stride: usize) -> Var {
    let w = g.param(&format!("{name}.w"));
    let b = g.param(&format!("{name}.b"));
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

pub fn conv_relu(g: &mut Graph, name: &str, x: Var, stride: usize) -> Var {
    let y = conv(g, name, x, stride);
    g.relu(y)
}

pub fn init_linear(store: &mut ParamStore, init: &mut Init, name: &str, din: usize, dout: usize) {
    store.insert(format!("{name}.w"), init.xavier(&[din, dout], din, dout));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
}

pub fn init_linear_zero(store: &mut ParamStore, name: &str, din: usize, dout: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(&[din, dout]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
}

/// `x[.., din] -> [.., dout]`.
pub fn linear(g: &mut Graph, name: &str, x: Var) -> Var {
    let w = g.param(&format!("{name}.w"));
    let b = g.param(&format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_bcast(y, b)
}

/// `[N, C, H, W] -> [N, H*W, C]` row-major tokens.
pub fn to_tokens(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let y = g.reshape(x, &[s[0], s[1], s[2] * s[3]]);
    g.permute(y, &[0, 2, 1])
}

/// `[N, H*W, C] -> [N, C, H, W]`.
pub fn from_tokens(g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x).to_vec();
    let y = g.permute(x, &[0, 2, 1]);
    g.reshape(y, &[s[0], s[2], h, w])
}

/// Standard sinusoidal encoding of a scalar position into `dim` values
/// (`sin` on even slots, `cos` on odd slots).
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim.max(1) as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// 2-D sinusoidal table `[h*w, dim]`: first half encodes the row, second the column.
pub fn sinusoid_2d(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            data.extend(sinusoid(y as f64, half));
            data.extend(sinusoid(x as f64, dim - half));
        }
    }
    Tensor::new(&[h * w, dim], data)
}

/// Multi-head cross-attention with pre-projection layer normalization:
/// `out = W_o · softmax(Q Kᵀ / √d_h) V`, where queries come from one token
/// set and keys/values from another.
#[derive(Clone, Debug)]
pub struct Mhca {
    pub name: String,
    pub query_dim: usize,
    pub kv_dim: usize,
    pub model_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
}

/// Forward result; `attention` is `[heads, Nq, Nk]` after softmax.
pub struct MhcaOutput {
    pub out: Var,
    pub attention: Var,
}

impl Mhca {
    pub fn new(name: impl Into<String>, query_dim: usize, kv_dim: usize, model_dim: usize, heads: usize) -> Self {
        Self {
            name: name.into(),
            query_dim,
            kv_dim,
            model_dim,
            out_dim: query_dim,
            heads,
        }
    }

    pub fn with_out_dim(mut self, out_dim: usize) -> Self {
        self.out_dim = out_dim;
        self
    }

    /// Registers Q/K/V/output projections; the output projection is
    /// zero-initialized when `zero_out` is set.
    pub fn init(&self, store: &mut ParamStore, init: &mut Init, zero_out: bool) {
        assert!(
            self.model_dim.is_multiple_of(self.heads),
            "{}: {} heads do not divide model dim {}",
            self.name,
            self.heads,
            self.model_dim
        );
        let n = &self.name;
        init_linear(store, init, &format!("{n}.q"), self.query_dim, self.model_dim);
        init_linear(store, init, &format!("{n}.k"), self.kv_dim, self.model_dim);
        init_linear(store, init, &format!("{n}.v"), self.kv_dim, self.model_dim);
        if zero_out {
            init_linear_zero(store, &format!("{n}.o"), self.model_dim, self.out_dim);
        } else {
            init_linear(store, init, &format!("{n}.o"), self.model_dim, self.out_dim);
        }
    }

    /// `queries[Nq, query_dim]`, `kv[Nk, kv_dim]`; `key_bias[Nk, model_dim]`
    /// is added to the projected keys only.
    pub fn forward(&self, g: &mut Graph, queries: Var, kv: Var, key_bias: Option<Var>) -> MhcaOutput {
        let n = &self.name;
        let (nq, nk) = (g.shape(queries)[0], g.shape(kv)[0]);
        let (h, dh) = (self.heads, self.model_dim / self.heads);
        let qn = g.layer_norm(queries, 1e-5);
        let kn = g.layer_norm(kv, 1e-5);
        let q = linear(g, &format!("{n}.q"), qn);
        let mut k = linear(g, &format!("{n}.k"), kn);
        if let Some(bias) = key_bias {
            k = g.add(k, bias);
        }
        let v = linear(g, &format!("{n}.v"), kn);
        let split = |g: &mut Graph, t: Var, len: usize| {
            let t = g.reshape(t, &[len, h, dh]);
            g.permute(t, &[1, 0, 2])
        };
        let q = split(g, q, nq);
        let k = split(g, k, nk);
        let v = split(g, v, nk);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attention = g.softmax(scores);
        let ctx = g.bmm(attention, v, false);
        let ctx = g.permute(ctx, &[1, 0, 2]);
        let ctx = g.reshape(ctx, &[nq, self.model_dim]);
        let out = linear(g, &format!("{n}.o"), ctx);
        MhcaOutput { out, attention }
    }
}
