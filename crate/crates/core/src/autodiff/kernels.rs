//! Forward and backward kernels on raw NCHW buffers.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Geometry of one 2-D convolution.
///
/// Kernel taps that never touch the un-padded input for any output position
/// are dropped from the im2col matrix: they only ever multiply zeros. This
/// matters for large dilations on small feature maps.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub oh: usize,
    pub ow: usize,
    /// Live taps as (ky, kx).
    pub taps: Vec<(usize, usize)>,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects NCHW input and OIkk kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 || dil == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride ({stride}) and dilation ({dil}) must be positive"
            )));
        }
        let [n, cin, h, w] = [input[0], input[1], input[2], input[3]];
        let [cout, kin, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        if kin != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kin} input channels, input has {cin}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Shape(format!(
                "conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}"
            )));
        }
        let span = dil * (kh - 1) + 1;
        if h + 2 * pad < span || w + 2 * pad < span {
            return Err(Error::Shape(format!(
                "conv2d receptive span {span} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - span) / stride + 1;
        let ow = (w + 2 * pad - span) / stride + 1;
        let reaches = |tap: usize, extent: usize, out: usize| {
            (0..out).any(|o| {
                let pos = (o * stride + tap * dil) as isize - pad as isize;
                pos >= 0 && (pos as usize) < extent
            })
        };
        let mut taps = Vec::with_capacity(kh * kw);
        for ky in 0..kh {
            if !reaches(ky, h, oh) {
                continue;
            }
            for kx in 0..kw {
                if reaches(kx, w, ow) {
                    taps.push((ky, kx));
                }
            }
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            dil,
            oh,
            ow,
            taps,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.taps.len()
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn in_coord(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + tap * self.dil) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Unfold one image (cin x h x w) into `col_rows x out_pixels`.
    pub fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let np = self.out_pixels();
        let nt = self.taps.len();
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for (t, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = &mut cols[(ci * nt + t) * np..(ci * nt + t + 1) * np];
                for oy in 0..self.oh {
                    let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                    match self.in_coord(oy, ky, self.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match self.in_coord(ox, kx, self.w) {
                                    Some(ix) => plane[iy * self.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold a `col_rows x out_pixels` gradient back onto one image, accumulating.
    pub fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let np = self.out_pixels();
        let nt = self.taps.len();
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for (t, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = &cols[(ci * nt + t) * np..(ci * nt + t + 1) * np];
                for oy in 0..self.oh {
                    let Some(iy) = self.in_coord(oy, ky, self.h) else {
                        continue;
                    };
                    for ox in 0..self.ow {
                        if let Some(ix) = self.in_coord(ox, kx, self.w) {
                            let p = &mut plane[iy * self.w + ix];
                            *p = *p + row[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }

    /// Kernel (cout x cin x k x k) restricted to live taps: `cout x col_rows`.
    pub fn gather_kernel<T: Real>(&self, kernel: &[T]) -> Vec<T> {
        let kk = self.k * self.k;
        let nt = self.taps.len();
        let mut out = Vec::with_capacity(self.cout * self.col_rows());
        for co in 0..self.cout {
            for ci in 0..self.cin {
                let base = (co * self.cin + ci) * kk;
                out.extend(self.taps.iter().map(|&(ky, kx)| kernel[base + ky * self.k + kx]));
            }
        }
        debug_assert_eq!(out.len(), self.cout * self.cin * nt);
        out
    }

    /// Inverse of [`gather_kernel`](Self::gather_kernel); dead taps get zero.
    pub fn scatter_kernel<T: Real>(&self, gathered: &[T]) -> Vec<T> {
        let kk = self.k * self.k;
        let nt = self.taps.len();
        let mut out = vec![T::zero(); self.cout * self.cin * kk];
        for co in 0..self.cout {
            for ci in 0..self.cin {
                let base = (co * self.cin + ci) * kk;
                let src = (co * self.cin + ci) * nt;
                for (t, &(ky, kx)) in self.taps.iter().enumerate() {
                    out[base + ky * self.k + kx] = gathered[src + t];
                }
            }
        }
        out
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let np = g.out_pixels();
    let rows = g.col_rows();
    let wk = g.gather_kernel(kernel);
    let mut cols = vec![T::zero(); rows * np];
    let mut out = vec![T::zero(); g.n * g.cout * np];
    let in_stride = g.cin * g.h * g.w;
    for b in 0..g.n {
        let dst = &mut out[b * g.cout * np..(b + 1) * g.cout * np];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_exact_mut(np).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        if rows == 0 {
            continue;
        }
        g.im2col(&input[b * in_stride..(b + 1) * in_stride], &mut cols);
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(false, false, g.cout, rows, np, T::one(), &wk, &cols, beta, dst);
    }
    out
}

/// Returns (grad_input, grad_kernel, grad_bias), each only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let np = g.out_pixels();
    let rows = g.col_rows();
    let in_stride = g.cin * g.h * g.w;
    let wk = g.gather_kernel(kernel);
    let mut cols = vec![T::zero(); rows * np];
    let mut dcols = vec![T::zero(); rows * np];
    let mut gin = want[0].then(|| vec![T::zero(); g.n * in_stride]);
    let mut gwk = want[1].then(|| vec![T::zero(); g.cout * rows]);
    for b in 0..g.n {
        if rows == 0 {
            break;
        }
        let dy = &grad_out[b * g.cout * np..(b + 1) * g.cout * np];
        if let Some(gwk) = gwk.as_mut() {
            g.im2col(&input[b * in_stride..(b + 1) * in_stride], &mut cols);
            T::gemm(false, true, g.cout, np, rows, T::one(), dy, &cols, T::one(), gwk);
        }
        if let Some(gin) = gin.as_mut() {
            T::gemm(true, false, rows, g.cout, np, T::one(), &wk, dy, T::zero(), &mut dcols);
            g.col2im(&dcols, &mut gin[b * in_stride..(b + 1) * in_stride]);
        }
    }
    let gbias = want[2].then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for b in 0..g.n {
            for (co, acc) in gb.iter_mut().enumerate() {
                let base = (b * g.cout + co) * np;
                *acc = *acc + grad_out[base..base + np].iter().copied().sum::<T>();
            }
        }
        gb
    });
    (gin, gwk.map(|gw| g.scatter_kernel(&gw)), gbias)
}

/// 2x2/stride-2 max pooling. Odd extents are padded right/bottom with -inf.
/// Returns the output and, per output element, the flat input index of the max.
pub(crate) fn maxpool2x2_forward<T: Real>(
    shape: &[usize],
    input: &[T],
) -> (Vec<usize>, Vec<T>, Vec<usize>) {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (y, x) = (2 * oy + dy, 2 * ox + dx);
                    if y >= h || x >= w {
                        continue;
                    }
                    let idx = base + y * w + x;
                    // strict comparison keeps the first index on ties
                    if best_idx == usize::MAX || input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (vec![n, c, oh, ow], out, arg)
}

/// Bilinear resize with half-pixel centers (align_corners = false).
/// Each output pixel is a weighted sum of at most four input pixels; the
/// returned table lists (y0, y1, wy1, x0, x1, wx1) per output row/column.
#[derive(Debug, Clone)]
pub(crate) struct BilinearPlan {
    pub rows: Vec<(usize, usize, f64)>,
    pub cols: Vec<(usize, usize, f64)>,
}

impl BilinearPlan {
    pub fn new(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        fn axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
            let scale = src as f64 / dst as f64;
            (0..dst)
                .map(|o| {
                    let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (pos.floor() as usize).min(src - 1);
                    let i1 = (i0 + 1).min(src - 1);
                    let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
                    (i0, i1, frac)
                })
                .collect()
        }
        Self {
            rows: axis(h, oh),
            cols: axis(w, ow),
        }
    }

    pub fn forward<T: Real>(&self, planes: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let src = &input[p * h * w..(p + 1) * h * w];
            for &(y0, y1, fy) in &self.rows {
                let fy = T::from_f64(fy);
                for &(x0, x1, fx) in &self.cols {
                    let fx = T::from_f64(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(&self, planes: usize, h: usize, w: usize, grad_out: &[T]) -> Vec<T> {
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut gin = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let dst = &mut gin[p * h * w..(p + 1) * h * w];
            let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                let fy = T::from_f64(fy);
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let v = g[oy * ow + ox];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - fx);
                    dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                    dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - fx);
                    dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
                }
            }
        }
        gin
    }
}

/// NCHW -> (N*H*W) x C, rows image-major then row-major pixels.
pub(crate) fn nchw_to_rows<T: Real>(shape: &[usize], input: &[T]) -> Vec<T> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let hw = h * w;
    let mut out = vec![T::zero(); n * hw * c];
    for b in 0..n {
        for ch in 0..c {
            let plane = &input[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                out[(b * hw + p) * c + ch] = v;
            }
        }
    }
    out
}

/// Inverse of [`nchw_to_rows`].
pub(crate) fn rows_to_nchw<T: Real>(shape: &[usize], rows: &[T]) -> Vec<T> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        for p in 0..hw {
            let row = &rows[(b * hw + p) * c..(b * hw + p + 1) * c];
            for (ch, &v) in row.iter().enumerate() {
                out[(b * c + ch) * hw + p] = v;
            }
        }
    }
    out
}

/// Cholesky factor (lower, row-major) of the symmetric part of `a`.
pub(crate) fn cholesky<T: Real>(m: usize, a: &[T]) -> Result<Vec<T>> {
    let half = T::from_f64(0.5);
    let mut l = vec![T::zero(); m * m];
    for i in 0..m {
        for j in 0..=i {
            let sym = (a[i * m + j] + a[j * m + i]) * half;
            let dot: T = (0..j).map(|k| l[i * m + k] * l[j * m + k]).sum();
            let s = sym - dot;
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite {
                        pivot: i,
                        value: s.as_f64(),
                    });
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    Ok(l)
}

/// Solve `L L^T X = B` in place, B being `m x k` row-major.
pub(crate) fn cholesky_solve<T: Real>(m: usize, k: usize, l: &[T], b: &mut [T]) {
    // forward: L Z = B
    for i in 0..m {
        for j in 0..i {
            let lij = l[i * m + j];
            if lij == T::zero() {
                continue;
            }
            for c in 0..k {
                b[i * k + c] = b[i * k + c] - lij * b[j * k + c];
            }
        }
        let d = l[i * m + i];
        for c in 0..k {
            b[i * k + c] = b[i * k + c] / d;
        }
    }
    // backward: L^T X = Z
    for i in (0..m).rev() {
        for j in i + 1..m {
            let lji = l[j * m + i];
            if lji == T::zero() {
                continue;
            }
            for c in 0..k {
                b[i * k + c] = b[i * k + c] - lji * b[j * k + c];
            }
        }
        let d = l[i * m + i];
        for c in 0..k {
            b[i * k + c] = b[i * k + c] / d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dead_taps_are_dropped_for_large_dilation() {
        let g = ConvGeom::new(&[1, 2, 8, 8], &[4, 2, 3, 3], 1, 16, 16).unwrap();
        assert_eq!(g.taps, vec![(1, 1)]);
        assert_eq!((g.oh, g.ow), (8, 8));
        let g = ConvGeom::new(&[1, 2, 8, 8], &[4, 2, 3, 3], 1, 1, 1).unwrap();
        assert_eq!(g.taps.len(), 9);
    }

    #[test]
    fn output_extent_formula() {
        // floor((H + 2p - d(k-1) - 1)/s) + 1
        let g = ConvGeom::new(&[1, 1, 9, 7], &[1, 1, 3, 3], 2, 1, 2).unwrap();
        assert_eq!(g.oh, (9 + 2 - 2 * 2 - 1) / 2 + 1);
        assert_eq!(g.ow, (7 + 2 - 2 * 2 - 1) / 2 + 1);
    }

    #[test]
    fn maxpool_odd_extent_pads_with_neg_inf() {
        let x: Vec<f64> = vec![-5.0, -4.0, -3.0, -2.0, -1.0, -6.0, -7.0, -8.0, -9.0];
        let (shape, out, arg) = maxpool2x2_forward(&[1, 1, 3, 3], &x);
        assert_eq!(shape, vec![1, 1, 2, 2]);
        assert_eq!(out, vec![-1.0, -3.0, -7.0, -9.0]);
        assert_eq!(arg, vec![4, 2, 6, 8]);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let a = [1.0f64, 2.0, 2.0, 1.0];
        match cholesky(2, &a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let plan = BilinearPlan::new(3, 3, 3, 3);
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        assert_eq!(plan.forward(1, 3, 3, &x), x);
    }
}
