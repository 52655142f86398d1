//! Multi-view geometry: quadrant/global decomposition of a frame, the 4x4
//! patch grid inside each quadrant, and weighted recomposition.
//!
//! Quadrants are ordered top-left, top-right, bottom-left, bottom-right.
//! Patches inside a quadrant are ordered row-major over a 4x4 grid.

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const NUM_LOCALS: usize = 4;
/// Local views plus the global view.
pub const NUM_VIEWS: usize = 5;
pub const PATCH_GRID: usize = 4;
pub const PATCHES_PER_LOCAL: usize = PATCH_GRID * PATCH_GRID;
/// Frame sides must be multiples of this: one halving for the quadrant
/// split and five stride-2 encoder stages.
pub const FRAME_MULTIPLE: usize = 64;

/// A model-ready frame `C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullFrame {
    data: Tensor,
    index: usize,
}

impl FullFrame {
    pub fn new(data: Tensor, index: usize) -> Result<Self> {
        ensure!(data.rank() == 3, RejectedInput, "frame must be C x H x W, got {:?}", data.shape());
        let (c, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
        ensure!(c >= 1, RejectedInput, "frame has no channels");
        ensure!(
            h > 0 && w > 0 && h % FRAME_MULTIPLE == 0 && w % FRAME_MULTIPLE == 0,
            RejectedInput,
            "frame {h}x{w} is not divisible by {FRAME_MULTIPLE}"
        );
        Ok(Self { data, index })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub locals: [Tensor; NUM_LOCALS],
    pub global_view: Tensor,
}

impl ViewSet {
    /// All five views stacked as `[5, C, h, w]`, global last.
    pub fn stacked(&self) -> Tensor {
        let mut parts: Vec<Tensor> = self.locals.to_vec();
        parts.push(self.global_view.clone());
        Tensor::stack(&parts)
    }
}

/// Top-left corner of quadrant `m` for a local of size `h x w`.
pub fn quadrant_origin(m: usize, h: usize, w: usize) -> (usize, usize) {
    ((m / 2) * h, (m % 2) * w)
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    ensure!(t.rank() == 3, RejectedInput, "expected C x H x W, got {:?}", t.shape());
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Split a `C x H x W` frame into its four exact quadrants and a bilinear
/// `H/2 x W/2` global view.
pub fn decompose(frame: &Tensor) -> Result<ViewSet> {
    let (_, hh, ww) = chw(frame)?;
    ensure!(
        hh >= 2 && ww >= 2 && hh % 2 == 0 && ww % 2 == 0,
        RejectedInput,
        "frame {hh}x{ww} cannot be quartered"
    );
    let (h, w) = (hh / 2, ww / 2);
    let locals = std::array::from_fn(|m| {
        let (y, x) = quadrant_origin(m, h, w);
        frame.crop(y, x, h, w)
    });
    Ok(ViewSet {
        locals,
        global_view: frame.resize_bilinear(h, w),
    })
}

/// Place the four locals back at their quadrants.
pub fn assemble_quadrants(locals: &[Tensor; NUM_LOCALS]) -> Result<Tensor> {
    let (c, h, w) = chw(&locals[0])?;
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for (m, l) in locals.iter().enumerate() {
        ensure!(l.shape() == [c, h, w], RejectedInput, "local {m} shape {:?}", l.shape());
        let (y, x) = quadrant_origin(m, h, w);
        out.paste(l, y, x);
    }
    Ok(out)
}

/// 16 non-overlapping patches of a `C x h x w` local, row-major over a 4x4 grid.
pub fn split_patches(local: &Tensor) -> Result<Vec<Tensor>> {
    let (_, h, w) = chw(local)?;
    ensure!(
        h % PATCH_GRID == 0 && w % PATCH_GRID == 0 && h > 0 && w > 0,
        RejectedInput,
        "local {h}x{w} is not divisible into a {PATCH_GRID}x{PATCH_GRID} grid"
    );
    let (ph, pw) = (h / PATCH_GRID, w / PATCH_GRID);
    Ok((0..PATCHES_PER_LOCAL)
        .map(|p| local.crop((p / PATCH_GRID) * ph, (p % PATCH_GRID) * pw, ph, pw))
        .collect())
}

/// Inverse of [`split_patches`].
pub fn assemble_patches(patches: &[Tensor]) -> Result<Tensor> {
    ensure!(
        patches.len() == PATCHES_PER_LOCAL,
        RejectedInput,
        "expected {PATCHES_PER_LOCAL} patches, got {}",
        patches.len()
    );
    let (c, ph, pw) = chw(&patches[0])?;
    let mut out = Tensor::zeros(&[c, ph * PATCH_GRID, pw * PATCH_GRID]);
    for (p, t) in patches.iter().enumerate() {
        ensure!(t.shape() == [c, ph, pw], RejectedInput, "patch {p} shape {:?}", t.shape());
        out.paste(t, (p / PATCH_GRID) * ph, (p % PATCH_GRID) * pw);
    }
    Ok(out)
}

/// Per-patch fusion weights, `[quadrant][patch]`.
pub type PatchWeights = [[f64; PATCHES_PER_LOCAL]; NUM_LOCALS];

pub fn check_weights(weights: &PatchWeights) -> Result<()> {
    for (m, row) in weights.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!(
                    "fusion weight [{m}][{p}] = {v} outside [0, 1]"
                )));
            }
        }
    }
    Ok(())
}

/// Blend each local with the bilinearly upsampled global view:
/// `out = w * local + (1 - w) * global_up`, with `w` constant per patch.
pub fn stitch_fused(
    locals: &[Tensor; NUM_LOCALS],
    global_view: &Tensor,
    weights: &PatchWeights,
) -> Result<Tensor> {
    check_weights(weights)?;
    let (c, h, w) = chw(&locals[0])?;
    ensure!(
        global_view.shape() == [c, h, w],
        RejectedInput,
        "global view {:?} does not match locals {:?}",
        global_view.shape(),
        locals[0].shape()
    );
    ensure!(
        h % PATCH_GRID == 0 && w % PATCH_GRID == 0,
        RejectedInput,
        "local {h}x{w} is not divisible into a {PATCH_GRID}x{PATCH_GRID} grid"
    );
    let up = global_view.resize_bilinear(2 * h, 2 * w);
    let (ph, pw) = (h / PATCH_GRID, w / PATCH_GRID);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for (m, local) in locals.iter().enumerate() {
        ensure!(local.shape() == [c, h, w], RejectedInput, "local {m} shape {:?}", local.shape());
        let (oy, ox) = quadrant_origin(m, h, w);
        let g = up.crop(oy, ox, h, w);
        let blended = Tensor::from_fn(&[c, h, w], |i| {
            let (y, x) = ((i / w) % h, i % w);
            let wt = weights[m][(y / ph) * PATCH_GRID + x / pw];
            wt * local.data()[i] + (1.0 - wt) * g.data()[i]
        });
        out.paste(&blended, oy, ox);
    }
    Ok(out)
}

/// Graph version of [`decompose`]: `[C, H, W] -> [5, C, H/2, W/2]`.
pub fn decompose_var(g: &mut Graph, frame: Var) -> Var {
    let s = g.shape(frame).to_vec();
    let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
    let locals = quadrants_var(g, frame);
    let global = g.resize_bilinear(frame, h, w);
    let global = g.reshape(global, &[1, c, h, w]);
    g.concat(&[locals, global], 0)
}

/// `[C, 2h, 2w] -> [4, C, h, w]` in quadrant order.
pub fn quadrants_var(g: &mut Graph, full: Var) -> Var {
    let s = g.shape(full).to_vec();
    let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
    let x = g.reshape(full, &[c, 2, h, 2, w]);
    let x = g.permute(x, &[1, 3, 0, 2, 4]);
    g.reshape(x, &[4, c, h, w])
}

/// `[4, C, h, w] -> [C, 2h, 2w]`, inverse of [`quadrants_var`].
pub fn assemble_var(g: &mut Graph, locals: Var) -> Var {
    let s = g.shape(locals).to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let x = g.reshape(locals, &[2, 2, c, h, w]);
    let x = g.permute(x, &[2, 0, 3, 1, 4]);
    g.reshape(x, &[c, 2 * h, 2 * w])
}

/// `[4, 16]` patch weights expanded to per-pixel maps `[4, 1, h, w]`.
pub fn weight_maps_var(g: &mut Graph, weights: Var, h: usize, w: usize) -> Var {
    let (ph, pw) = (h / PATCH_GRID, w / PATCH_GRID);
    let x = g.reshape(weights, &[NUM_LOCALS, PATCH_GRID, 1, PATCH_GRID, 1]);
    let x = g.broadcast(x, &[NUM_LOCALS, PATCH_GRID, ph, PATCH_GRID, pw]);
    g.reshape(x, &[NUM_LOCALS, 1, h, w])
}

/// Graph version of [`stitch_fused`]: locals `[4, C, h, w]`, global
/// `[C, h, w]`, weights `[4, 16]` -> `[C, 2h, 2w]`.
pub fn stitch_var(g: &mut Graph, locals: Var, global: Var, weights: Var) -> Var {
    let s = g.shape(locals).to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let up = g.resize_bilinear(global, 2 * h, 2 * w);
    let gq = quadrants_var(g, up);
    let wmap = weight_maps_var(g, weights, h, w);
    let wmap = g.broadcast(wmap, &[NUM_LOCALS, c, h, w]);
    let one_minus = g.scale(wmap, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let a = g.mul(wmap, locals);
    let b = g.mul(one_minus, gq);
    let blended = g.add(a, b);
    assemble_var(g, blended)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use proptest::prelude::*;

    fn quadrant_frame() -> Tensor {
        Tensor::from_fn(&[3, 4, 4], |i| {
            let (y, x) = ((i / 4) % 4, i % 4);
            (1 + (y / 2) * 2 + x / 2) as f64
        })
    }

    #[test]
    fn quadrants_of_constant_blocks() {
        let v = decompose(&quadrant_frame()).unwrap();
        for (m, l) in v.locals.iter().enumerate() {
            assert_eq!(l, &Tensor::full(&[3, 2, 2], (m + 1) as f64));
        }
    }

    #[test]
    fn decompose_then_assemble_is_identity() {
        let f = Tensor::from_fn(&[2, 8, 12], |i| (i as f64).sin());
        let v = decompose(&f).unwrap();
        assert_eq!(assemble_quadrants(&v.locals).unwrap(), f);
    }

    #[test]
    fn constant_frame_gives_constant_global() {
        let f = Tensor::full(&[3, 8, 8], 0.375);
        let v = decompose(&f).unwrap();
        assert_eq!(v.global_view, Tensor::full(&[3, 4, 4], 0.375));
    }

    #[test]
    fn odd_frame_is_rejected() {
        assert!(matches!(
            decompose(&Tensor::zeros(&[1, 5, 4])),
            Err(Error::RejectedInput(_))
        ));
        assert!(FullFrame::new(Tensor::zeros(&[3, 96, 128]), 0).is_err());
        assert!(FullFrame::new(Tensor::zeros(&[3, 128, 192]), 0).is_ok());
    }

    #[test]
    fn patches_of_eight_by_eight() {
        let l = Tensor::from_fn(&[1, 8, 8], |i| i as f64);
        let p = split_patches(&l).unwrap();
        assert_eq!(p.len(), 16);
        assert!(p.iter().all(|t| t.shape() == [1, 2, 2]));
        assert_eq!(p[0], l.crop(0, 0, 2, 2));
        assert_eq!(p[5], l.crop(2, 2, 2, 2));
        assert_eq!(assemble_patches(&p).unwrap(), l);
        assert!(split_patches(&Tensor::zeros(&[1, 6, 8])).is_err());
    }

    #[test]
    fn stitch_weight_extremes() {
        let f = Tensor::from_fn(&[2, 16, 16], |i| (i % 7) as f64);
        let v = decompose(&f).unwrap();
        let noise = Tensor::from_fn(&[2, 8, 8], |i| -(i as f64));
        assert_eq!(stitch_fused(&v.locals, &noise, &[[1.0; 16]; 4]).unwrap(), f);
        let zero = stitch_fused(&v.locals, &noise, &[[0.0; 16]; 4]).unwrap();
        assert_eq!(zero, noise.resize_bilinear(16, 16));
    }

    #[test]
    fn stitch_half_weight_patch() {
        let locals = std::array::from_fn(|_| Tensor::full(&[1, 8, 8], 2.0));
        let global = Tensor::zeros(&[1, 8, 8]);
        let mut w = [[1.0; 16]; 4];
        w[1][6] = 0.5;
        let out = stitch_fused(&locals, &global, &w).unwrap();
        // quadrant 1 starts at column 8; patch 6 is grid row 1, col 2
        let patch = out.crop(2, 8 + 4, 2, 2);
        assert_eq!(patch, Tensor::full(&[1, 2, 2], 1.0));
        assert_eq!(out.crop(0, 0, 8, 8), Tensor::full(&[1, 8, 8], 2.0));
    }

    #[test]
    fn stitch_rejects_out_of_range_weight() {
        let locals = std::array::from_fn(|_| Tensor::zeros(&[1, 4, 4]));
        let mut w = [[0.5; 16]; 4];
        w[3][15] = 1.5;
        assert!(matches!(
            stitch_fused(&locals, &Tensor::zeros(&[1, 4, 4]), &w),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn graph_variants_match_plain() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let f = Tensor::from_fn(&[3, 16, 16], |i| ((i * 31) % 17) as f64 / 17.0);
        let fv = g.constant(f.clone());
        let views = decompose_var(&mut g, fv);
        let plain = decompose(&f).unwrap();
        assert_eq!(g.value(views), &plain.stacked());

        let w: PatchWeights = std::array::from_fn(|m| std::array::from_fn(|p| ((m * 16 + p) % 5) as f64 / 4.0));
        let wv = g.constant(Tensor::new(&[4, 16], w.iter().flatten().copied().collect()));
        let locals = g.slice(views, 0, 0, 4);
        let global = g.slice(views, 0, 4, 1);
        let global = g.reshape(global, &[3, 8, 8]);
        let out = stitch_var(&mut g, locals, global, wv);
        let expect = stitch_fused(&plain.locals, &plain.global_view, &w).unwrap();
        assert!(g.value(out).max_abs_diff(&expect) < 1e-12);
    }

    proptest! {
        #[test]
        fn stitch_is_convex(
            local_vals in prop::collection::vec(-2.0f64..2.0, 64),
            global_vals in prop::collection::vec(-2.0f64..2.0, 16),
            wts in prop::collection::vec(0.0f64..=1.0, 64),
        ) {
            let locals: [Tensor; 4] = std::array::from_fn(|m| Tensor::new(&[1, 4, 4], local_vals[m * 16..(m + 1) * 16].to_vec()));
            let global = Tensor::new(&[1, 4, 4], global_vals);
            let w: PatchWeights = std::array::from_fn(|m| std::array::from_fn(|p| wts[m * 16 + p]));
            let out = stitch_fused(&locals, &global, &w).unwrap();
            let up = global.resize_bilinear(8, 8);
            let full = assemble_quadrants(&locals).unwrap();
            for i in 0..out.numel() {
                let (a, b) = (full.data()[i], up.data()[i]);
                prop_assert!(out.data()[i] >= a.min(b) - 1e-12 && out.data()[i] <= a.max(b) + 1e-12);
            }
        }
    }
}
