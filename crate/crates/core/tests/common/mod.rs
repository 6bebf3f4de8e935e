//! Brute-force reference implementations shared by the integration tests.
//! Deliberately naive: direct loops over the defining formulas, accumulated
//! in f64.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Cross-correlation by six nested loops (plus batch), zero padding `pad`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    x: &[f32],
    [n, cin, h, w]: [usize; 4],
    weight: &[f32],
    [cout, _, kh, kw]: [usize; 4],
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> (Vec<f32>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co] as f64;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

/// Transposed convolution by explicit stamping; `weight` is `[Cin, Cout, s, s]`.
pub fn conv_transpose_oracle(
    x: &[f32],
    [n, cin, h, w]: [usize; 4],
    weight: &[f32],
    cout: usize,
    bias: &[f32],
    s: usize,
) -> Vec<f32> {
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0f64; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for i in 0..oh * ow {
                out[(b * cout + co) * oh * ow + i] = bias[co] as f64;
            }
        }
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[((b * cin + ci) * h + y) * w + xx] as f64;
                    for co in 0..cout {
                        for ky in 0..s {
                            for kx in 0..s {
                                let wv = weight[((ci * cout + co) * s + ky) * s + kx] as f64;
                                out[((b * cout + co) * oh + y * s + ky) * ow + xx * s + kx] += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// 2x2 stride-2 max pool by window scan; ties keep the first position in
/// row-major order. Indices are flat positions within each `H x W` plane.
pub fn maxpool_oracle(x: &[f32], planes: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut vals = Vec::new();
    let mut idx = Vec::new();
    for p in 0..planes {
        for y in 0..ph {
            for xx in 0..pw {
                let mut best = (f32::NEG_INFINITY, 0u32);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let pos = (2 * y + dy) * w + 2 * xx + dx;
                        let v = x[p * h * w + pos];
                        if v > best.0 {
                            best = (v, pos as u32);
                        }
                    }
                }
                vals.push(best.0);
                idx.push(best.1);
            }
        }
    }
    (vals, idx)
}

/// Scatter each pooled value to its recorded position; zeros elsewhere.
pub fn unpool_oracle(y: &[f32], idx: &[u32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let per = y.len() / planes;
    let mut out = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        for i in 0..per {
            out[p * h * w + idx[p * per + i] as usize] = y[p * per + i];
        }
    }
    out
}

pub fn bce_oracle(p: &[f32], t: &[f32]) -> f64 {
    let eps = 1e-7f64;
    let mut total = 0.0;
    for i in 0..p.len() {
        let pi = (p[i] as f64).max(eps).min(1.0 - eps);
        let ti = t[i] as f64;
        total += -(ti * pi.ln() + (1.0 - ti) * (1.0 - pi).ln());
    }
    total / p.len() as f64
}

fn positives(m: &[f32]) -> HashSet<usize> {
    m.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
}

/// IoU through explicit index sets; both empty scores 1.
pub fn iou_oracle(a: &[f32], b: &[f32]) -> f64 {
    let (sa, sb) = (positives(a), positives(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

pub fn dice_oracle(a: &[f32], b: &[f32]) -> f64 {
    let (sa, sb) = (positives(a), positives(b));
    if sa.len() + sb.len() == 0 {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

pub fn random_mask(r: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<f32> {
    (0..n).map(|_| if r.random_bool(density) { 1.0 } else { 0.0 }).collect()
}

/// Parameter count of a conv layer with bias.
pub fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Parameter count of the U-Net family walked level by level.
pub fn unet_param_oracle(k: usize, depth: usize, base: usize, residual: bool) -> usize {
    let width = |l: usize| base << l;
    let block = |cin: usize, cout: usize| {
        conv_params(cin, cout, k)
            + conv_params(cout, cout, k)
            + if residual && cin != cout { conv_params(cin, cout, 1) } else { 0 }
    };
    let mut total = 0;
    let mut cin = 1;
    for l in 0..depth {
        total += block(cin, width(l));
        cin = width(l);
    }
    total += block(width(depth - 1), width(depth));
    for l in (0..depth).rev() {
        total += width(l + 1) * width(l) * 4 + width(l);
        total += block(2 * width(l), width(l));
    }
    total + conv_params(base, 1, 1)
}

/// SegNet: plain encoder blocks; each decoder stage keeps its width through
/// the first conv and halves it in the second. No skips, no transposed convs.
pub fn segnet_param_oracle(k: usize, depth: usize, base: usize) -> usize {
    let width = |l: usize| base << l;
    let block = |cin: usize, cout: usize| conv_params(cin, cout, k) + conv_params(cout, cout, k);
    let mut total = 0;
    let mut cin = 1;
    for l in 0..depth {
        total += block(cin, width(l));
        cin = width(l);
    }
    for l in (0..depth).rev() {
        let out = if l == 0 { base } else { width(l - 1) };
        total += conv_params(width(l), width(l), k) + conv_params(width(l), out, k);
    }
    total + conv_params(base, 1, 1)
}
