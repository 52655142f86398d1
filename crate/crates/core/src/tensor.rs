//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff graph and plain inference code.
//!
//! Spatial kernels (`resize_bilinear`, `avg_pool`, `upsample_nearest`) treat
//! the last two axes as height and width and every leading axis as an
//! independent plane.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index0(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor::new(
            &self.shape[1..],
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let inner = parts[0].shape.clone();
        let mut data = Vec::with_capacity(inner.iter().product::<usize>() * parts.len());
        for p in parts {
            assert_eq!(p.shape, inner, "stack of mismatched shapes");
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Tensor::new(&shape, data)
    }

    pub(crate) fn planes_hw(&self) -> (usize, usize, usize) {
        let r = self.shape.len();
        assert!(r >= 2, "spatial op on rank-{r} tensor");
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        (self.data.len() / (h * w).max(1), h, w)
    }

    fn with_hw(&self, h: usize, w: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        let r = s.len();
        s[r - 2] = h;
        s[r - 1] = w;
        s
    }

    /// Bilinear resampling with half-pixel centers (no corner alignment).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor {
        let (planes, h, w) = self.planes_hw();
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let ty = linear_taps(h, out_h);
        let tx = linear_taps(w, out_w);
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        Tensor::new(&self.with_hw(out_h, out_w), out)
    }

    /// Adjoint of [`Tensor::resize_bilinear`]: maps a gradient at the output
    /// size back onto an `in_h x in_w` grid.
    pub(crate) fn resize_bilinear_adjoint(&self, in_h: usize, in_w: usize) -> Tensor {
        let (planes, out_h, out_w) = self.planes_hw();
        if (in_h, in_w) == (out_h, out_w) {
            return self.clone();
        }
        let ty = linear_taps(in_h, out_h);
        let tx = linear_taps(in_w, out_w);
        let mut out = vec![0.0; planes * in_h * in_w];
        for p in 0..planes {
            let g = &self.data[p * out_h * out_w..(p + 1) * out_h * out_w];
            let dst = &mut out[p * in_h * in_w..(p + 1) * in_h * in_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let v = g[oy * out_w + ox];
                    dst[y0 * in_w + x0] += v * (1.0 - ly) * (1.0 - lx);
                    dst[y0 * in_w + x1] += v * (1.0 - ly) * lx;
                    dst[y1 * in_w + x0] += v * ly * (1.0 - lx);
                    dst[y1 * in_w + x1] += v * ly * lx;
                }
            }
        }
        Tensor::new(&self.with_hw(in_h, in_w), out)
    }

    /// Non-overlapping average pooling over `factor x factor` windows.
    /// A factor larger than a side is clamped to that side.
    pub fn avg_pool(&self, factor: usize) -> Tensor {
        let (planes, h, w) = self.planes_hw();
        let (fy, fx) = (factor.min(h).max(1), factor.min(w).max(1));
        assert!(h % fy == 0 && w % fx == 0, "avg_pool {factor} on {h}x{w}");
        let (oh, ow) = (h / fy, w / fx);
        let norm = 1.0 / (fy * fx) as f64;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / fy) * ow + x / fx] += src[y * w + x];
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        Tensor::new(&self.with_hw(oh, ow), out)
    }

    /// Replicate every pixel into a `factor x factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor {
        let (planes, h, w) = self.planes_hw();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / factor) * w + x / factor];
                }
            }
        }
        Tensor::new(&self.with_hw(oh, ow), out)
    }

    /// Copy out rows `[y0, y0+h)` and columns `[x0, x0+w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
        let (planes, sh, sw) = self.planes_hw();
        assert!(y0 + h <= sh && x0 + w <= sw, "crop out of bounds");
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for y in y0..y0 + h {
                let row = p * sh * sw + y * sw;
                out.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Tensor::new(&self.with_hw(h, w), out)
    }

    /// Write `src` into this tensor with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Tensor, y0: usize, x0: usize) {
        let (planes, sh, sw) = self.planes_hw();
        let (sp, h, w) = src.planes_hw();
        assert_eq!(planes, sp);
        assert!(y0 + h <= sh && x0 + w <= sw, "paste out of bounds");
        for p in 0..planes {
            for y in 0..h {
                let dst = p * sh * sw + (y0 + y) * sw + x0;
                let s = p * h * w + y * w;
                self.data[dst..dst + w].copy_from_slice(&src.data[s..s + w]);
            }
        }
    }
}

/// Per-output-index `(i0, i1, weight of i1)` for half-pixel linear
/// interpolation from `in_len` samples to `out_len` samples.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit row/column strides, so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices that cover the addressed extents; the
    // strides describe dense row- or column-major views of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_halving_is_two_by_two_mean() {
        let t = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let r = t.resize_bilinear(2, 2);
        assert_eq!(r, t.avg_pool(2));
    }

    #[test]
    fn bilinear_preserves_constants() {
        let t = Tensor::full(&[2, 6, 10], 3.25);
        let up = t.resize_bilinear(13, 7);
        assert!(up.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn bilinear_adjoint_matches_inner_product() {
        let x = Tensor::from_fn(&[1, 3, 5], |i| ((i * 7) % 11) as f64 - 4.0);
        let y = Tensor::from_fn(&[1, 8, 4], |i| ((i * 5) % 13) as f64 * 0.5);
        let ax = x.resize_bilinear(8, 4);
        let aty = y.resize_bilinear_adjoint(3, 5);
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn crop_paste_round_trip() {
        let t = Tensor::from_fn(&[2, 6, 6], |i| i as f64);
        let mut z = Tensor::zeros(&[2, 6, 6]);
        for (y, x) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
            z.paste(&t.crop(y, x, 3, 3), y, x);
        }
        assert_eq!(z, t);
    }

    #[test]
    fn gemm_transposed_operand() {
        // a = [[1,2],[3,4]], b^T stored row-major as [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let bt = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &bt, (1, 2), &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
