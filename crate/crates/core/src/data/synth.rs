//! Synthetic crack images: a smooth light background crossed by one dark
//! polyline, with the stroke footprint as an exactly binary mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Grid, Sample, SplitTag};
use crate::error::{Error, Result};

/// Mean intensity of crack pixels.
pub const CRACK_LEVEL: f32 = 0.15;
const BACKGROUND_LEVEL: f64 = 0.7;

/// `n` samples of `size x size`. Sample `i` depends only on `(seed, i, size)`.
pub fn gen_synthetic(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    let samples = (0..n)
        .map(|i| synthetic_sample(seed, i, size))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, SplitTag::All)
}

pub fn synthetic_sample(seed: u64, index: usize, size: usize) -> Result<Sample> {
    if size < 4 {
        return Err(Error::Config(format!("synthetic size must be at least 4, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let coarse = value_noise(&mut rng, size, 4);
    let fine = value_noise(&mut rng, size, 9);
    let mut image: Vec<f32> = (0..size * size)
        .map(|i| {
            let grain = rng.random_range(-1.0..1.0);
            (BACKGROUND_LEVEL + 0.08 * coarse[i] + 0.04 * fine[i] + 0.02 * grain).clamp(0.0, 1.0) as f32
        })
        .collect();

    let vertices = polyline(&mut rng, size);
    let horizontal = rng.random_bool(0.5);
    let half_width = rng.random_range(1.0..3.0) / 2.0;
    let mut mask = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (mut px, mut py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !horizontal {
                std::mem::swap(&mut px, &mut py);
            }
            if distance_to_polyline(&vertices, px, py) <= half_width {
                let i = y * size + x;
                mask[i] = 1.0;
                image[i] = CRACK_LEVEL + 0.03 * rng.random_range(-1.0f32..1.0);
            }
        }
    }
    Sample::new(
        format!("synth_{index:05}"),
        Grid::new(size, size, image)?,
        Grid::new(size, size, mask)?,
    )
}

/// Lattice noise in `[-1, 1]` with `cells` smoothstep-interpolated cells per side.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let coord = |p: usize| {
        let u = (p as f64 + 0.5) / size as f64 * cells as f64;
        let i = (u.floor() as usize).min(cells - 1);
        let t = u - i as f64;
        (i, t * t * (3.0 - 2.0 * t))
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (i, ty) = coord(y);
        for x in 0..size {
            let (j, tx) = coord(x);
            let top = at(i, j) + (at(i, j + 1) - at(i, j)) * tx;
            let bottom = at(i + 1, j) + (at(i + 1, j + 1) - at(i + 1, j)) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    out
}

/// Vertices `(along, across)` running from just before one edge to just past
/// the opposite one.
fn polyline(rng: &mut ChaCha8Rng, size: usize) -> Vec<(f64, f64)> {
    let s = size as f64;
    let k = rng.random_range(4..=6usize);
    let mut across = rng.random_range(0.2..0.8) * s;
    (0..k)
        .map(|j| {
            let along = -2.0 + j as f64 * (s + 4.0) / (k - 1) as f64;
            if j > 0 {
                across = (across + rng.random_range(-0.25..0.25) * s).clamp(0.1 * s, 0.9 * s);
            }
            (along, across)
        })
        .collect()
}

fn distance_to_polyline(v: &[(f64, f64)], px: f64, py: f64) -> f64 {
    v.windows(2)
        .map(|w| {
            let ((ax, ay), (bx, by)) = (w[0], w[1]);
            let (dx, dy) = (bx - ax, by - ay);
            let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            (px - ax - t * dx).hypot(py - ay - t * dy)
        })
        .fold(f64::INFINITY, f64::min)
}
