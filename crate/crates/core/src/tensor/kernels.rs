//! Raw compute kernels over flat row-major buffers.
//!
//! These know nothing about the autodiff tape; [`super::Graph`] validates
//! shapes and calls into them. Convolutions go through im2col + GEMM.

use super::Element;

/// Geometry of a 2-D convolution over `[N, C, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// For stride 1, the output columns `lo..hi` whose input column
/// `ox + kx - pad` lies inside `0..in_w`.
fn valid_span(kx: usize, pad: usize, in_w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (in_w + pad).saturating_sub(kx).min(ow).max(lo);
    (lo, hi)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let src = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, g.in_w, ow);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            line[lo..hi].copy_from_slice(&src_row[lo + kx - g.pad..hi + kx - g.pad]);
                        }
                        continue;
                    }
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let dst = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, g.in_w, ow);
                        if lo < hi {
                            let d = &mut dst_row[lo + kx - g.pad..hi + kx - g.pad];
                            for (a, &b) in d.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                                *a = *a + b;
                            }
                        }
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation forward pass. Returns the `[N, Cout, H', W']` buffer.
pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let k = g.patch_len();
    let in_item = g.in_channels * g.in_h * g.in_w;
    let out_item = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_item];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
    for n in 0..g.batch {
        let xn = &x[n * in_item..(n + 1) * in_item];
        let yn = &mut out[n * out_item..(n + 1) * out_item];
        for (co, chunk) in yn.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        let patches = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols[..]
        };
        T::gemm(false, false, g.out_channels, k, plane, weight, patches, T::one(), yn);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each requested buffer is freshly allocated.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeometry,
    want: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let [want_dx, want_dw, want_db] = want;
    let plane = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_item = g.in_channels * g.in_h * g.in_w;
    let out_item = g.out_channels * plane;

    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); weight.len()]);
    let mut db = want_db.then(|| vec![T::zero(); g.out_channels]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };

    for n in 0..g.batch {
        let xn = &x[n * in_item..(n + 1) * in_item];
        let dyn_ = &dy[n * out_item..(n + 1) * out_item];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dyn_.chunks(plane).enumerate() {
                db[co] = chunk.iter().fold(db[co], |acc, &v| acc + v);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let patches = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols[..]
            };
            // dW[Cout, K] += dY[Cout, P] * cols[K, P]^T
            T::gemm(false, true, g.out_channels, plane, k, dyn_, patches, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_item..(n + 1) * in_item];
            if pointwise {
                T::gemm(true, false, k, g.out_channels, plane, weight, dyn_, T::zero(), dxn);
            } else {
                // dcols[K, P] = W[Cout, K]^T * dY[Cout, P]
                T::gemm(true, false, k, g.out_channels, plane, weight, dyn_, T::zero(), &mut cols);
                col2im_add(&cols, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of a transposed convolution whose kernel equals its stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl UpGeometry {
    fn stamp(&self) -> usize {
        self.out_channels * self.stride * self.stride
    }
}

/// Transposed convolution with `kernel == stride`: every input pixel stamps
/// the kernel, scaled by its value, onto its own disjoint output block.
/// `weight` is laid out `[Cin, Cout, s, s]`.
pub fn conv_transpose_forward<T: Element>(x: &[T], weight: &[T], bias: &[T], g: &UpGeometry) -> Vec<T> {
    let s = g.stride;
    let (oh, ow) = (g.in_h * s, g.in_w * s);
    let plane = g.in_h * g.in_w;
    let rows = g.stamp();
    let in_item = g.in_channels * plane;
    let out_item = g.out_channels * oh * ow;
    let mut out = vec![T::zero(); g.batch * out_item];
    let mut stamps = vec![T::zero(); rows * plane];
    for n in 0..g.batch {
        let xn = &x[n * in_item..(n + 1) * in_item];
        // stamps[(co, a, b), (i, j)] = sum_ci W[ci, (co, a, b)] * x[ci, (i, j)]
        T::gemm(true, false, rows, g.in_channels, plane, weight, xn, T::zero(), &mut stamps);
        let yn = &mut out[n * out_item..(n + 1) * out_item];
        for co in 0..g.out_channels {
            for a in 0..s {
                for b in 0..s {
                    let row = &stamps[((co * s + a) * s + b) * plane..][..plane];
                    for i in 0..g.in_h {
                        for j in 0..g.in_w {
                            yn[(co * oh + i * s + a) * ow + j * s + b] = row[i * g.in_w + j] + bias[co];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn conv_transpose_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &UpGeometry,
    want: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let [want_dx, want_dw, want_db] = want;
    let s = g.stride;
    let (oh, ow) = (g.in_h * s, g.in_w * s);
    let plane = g.in_h * g.in_w;
    let rows = g.stamp();
    let in_item = g.in_channels * plane;
    let out_item = g.out_channels * oh * ow;

    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); weight.len()]);
    let mut db = want_db.then(|| vec![T::zero(); g.out_channels]);
    let mut dstamps = vec![T::zero(); rows * plane];
    for n in 0..g.batch {
        let dyn_ = &dy[n * out_item..(n + 1) * out_item];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dyn_.chunks(oh * ow).enumerate() {
                db[co] = chunk.iter().fold(db[co], |acc, &v| acc + v);
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        for co in 0..g.out_channels {
            for a in 0..s {
                for b in 0..s {
                    let row = &mut dstamps[((co * s + a) * s + b) * plane..][..plane];
                    for i in 0..g.in_h {
                        for j in 0..g.in_w {
                            row[i * g.in_w + j] = dyn_[(co * oh + i * s + a) * ow + j * s + b];
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dx[Cin, P] = W[Cin, R] * dstamps[R, P]
            let dxn = &mut dx[n * in_item..(n + 1) * in_item];
            T::gemm(false, false, g.in_channels, rows, plane, weight, &dstamps, T::zero(), dxn);
        }
        if let Some(dw) = dw.as_mut() {
            // dW[Cin, R] += x[Cin, P] * dstamps[R, P]^T
            let xn = &x[n * in_item..(n + 1) * in_item];
            T::gemm(false, true, g.in_channels, plane, rows, xn, &dstamps, T::one(), dw);
        }
    }
    (dx, dw, db)
}

/// 2x2 / stride-2 max pooling over `planes` independent `h x w` planes.
/// Returns the pooled values and, per output, the argmax's flat offset inside
/// its input plane. Ties go to the first position in row-major order.
pub fn maxpool2x2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut best_pos = (2 * i) * w + 2 * j;
                let mut best = src[best_pos];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let pos = (2 * i + dy) * w + 2 * j + dx;
                    if src[pos] > best {
                        best = src[pos];
                        best_pos = pos;
                    }
                }
                out.push(best);
                idx.push(best_pos as u32);
            }
        }
    }
    (out, idx)
}

/// Scatters `x` (planes of `in_plane` values) into zeroed planes of
/// `out_plane` values at the recorded offsets.
pub fn scatter_planes<T: Element>(x: &[T], indices: &[u32], in_plane: usize, out_plane: usize) -> Vec<T> {
    let planes = x.len() / in_plane.max(1);
    let mut out = vec![T::zero(); planes * out_plane];
    for p in 0..planes {
        let dst = &mut out[p * out_plane..(p + 1) * out_plane];
        for k in 0..in_plane {
            let pos = indices[p * in_plane + k] as usize;
            dst[pos] = dst[pos] + x[p * in_plane + k];
        }
    }
    out
}

/// Inverse of [`scatter_planes`]: reads each recorded offset back out.
pub fn gather_planes<T: Element>(src: &[T], indices: &[u32], in_plane: usize, out_plane: usize) -> Vec<T> {
    let planes = indices.len() / in_plane.max(1);
    let mut out = Vec::with_capacity(indices.len());
    for p in 0..planes {
        let plane = &src[p * out_plane..(p + 1) * out_plane];
        out.extend(indices[p * in_plane..(p + 1) * in_plane].iter().map(|&i| plane[i as usize]));
    }
    out
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
