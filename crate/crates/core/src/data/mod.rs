//! Paired image/mask datasets: loading, splitting, batching and a synthetic
//! crack generator.
//!
//! On disk a dataset is `<root>/images/<stem>.{png,pgm}` paired by stem with
//! `<root>/masks/<stem>.{png,pgm}`.

pub mod image;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use image::{decode_image, load_image_grayscale, resize_bilinear, Grid};
pub use synth::{gen_synthetic, synthetic_sample, CRACK_LEVEL};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Grid,
    pub mask: Grid,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Grid, mask: Grid) -> Result<Self> {
        let id = id.into();
        if image.dims() != mask.dims() {
            return Err(Error::Data(format!(
                "sample {id}: image {:?} and mask {:?} differ in shape",
                image.dims(),
                mask.dims()
            )));
        }
        if !image.in_unit_range() || !mask.in_unit_range() {
            return Err(Error::Data(format!("sample {id}: values outside [0, 1]")));
        }
        Ok(Sample { id, image, mask })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    All,
    Train,
    Val,
    Test,
}

/// Ordered samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    tag: SplitTag,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, tag: SplitTag) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {:?}", s.id)));
            }
            if !s.image.in_unit_range() || !s.mask.in_unit_range() {
                return Err(Error::Data(format!("sample {}: values outside [0, 1]", s.id)));
            }
        }
        Ok(Dataset { samples, tag })
    }

    pub fn empty(tag: SplitTag) -> Self {
        Dataset {
            samples: Vec::new(),
            tag,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tag(&self) -> SplitTag {
        self.tag
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Common `(height, width)` of every sample, or an error if they differ.
    pub fn dims(&self) -> Result<Option<(usize, usize)>> {
        let Some(first) = self.samples.first() else {
            return Ok(None);
        };
        let d = first.image.dims();
        if let Some(s) = self.samples.iter().find(|s| s.image.dims() != d) {
            return Err(Error::Data(format!(
                "sample {} is {:?}, expected {:?}",
                s.id,
                s.image.dims(),
                d
            )));
        }
        Ok(Some(d))
    }

    /// Writes every sample as 8-bit grayscale PNGs under `root/images` and
    /// `root/masks`.
    pub fn export(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
        for dir in [&img_dir, &mask_dir] {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for s in &self.samples {
            for (dir, grid) in [(&img_dir, &s.image), (&mask_dir, &s.mask)] {
                let path = dir.join(format!("{}.png", s.id));
                std::fs::write(&path, image::encode_png(grid)).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "pgm")) || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        if let Some(prev) = stems.insert(stem.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "stem {stem:?} is ambiguous: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(stems)
}

/// Loads every image in `image_dir` with its same-stem mask from `mask_dir`,
/// converted to grayscale and resized to `size x size`. Masks keep their
/// continuous values. Samples are ordered by stem.
pub fn load_dataset(image_dir: impl AsRef<Path>, mask_dir: impl AsRef<Path>, size: usize) -> Result<Dataset> {
    let (image_dir, mask_dir) = (image_dir.as_ref(), mask_dir.as_ref());
    if size == 0 {
        return Err(Error::Data("target size must be positive".into()));
    }
    let images = list_stems(image_dir)?;
    if images.is_empty() {
        return Err(Error::Data(format!("no PNG or PGM images in {}", image_dir.display())));
    }
    let masks = list_stems(mask_dir)?;
    let missing: Vec<&str> = images
        .keys()
        .filter(|s| !masks.contains_key(*s))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no mask in {} for: {}",
            mask_dir.display(),
            missing.join(", ")
        )));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let image = resize_bilinear(&load_image_grayscale(img_path)?, size, size)?;
        let mask = resize_bilinear(&load_image_grayscale(&masks[stem])?, size, size)?;
        samples.push(Sample::new(stem.clone(), image, mask)?);
    }
    Dataset::new(samples, SplitTag::All)
}

/// [`load_dataset`] on the `<root>/images`, `<root>/masks` layout.
pub fn load_dataset_root(root: impl AsRef<Path>, size: usize) -> Result<Dataset> {
    let root = root.as_ref();
    load_dataset(root.join("images"), root.join("masks"), size)
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Seeded shuffle followed by a contiguous train/val/test partition.
///
/// Part sizes use largest-remainder rounding; every nonzero ratio receives
/// at least one sample.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let n = ds.len();
    let nonzero = r.iter().filter(|v| **v > 0.0).count();
    if n < nonzero {
        return Err(Error::Data(format!(
            "cannot split {n} samples into {nonzero} nonempty parts"
        )));
    }
    let mut counts = [0usize; 3];
    let mut rema = [0f64; 3];
    for i in 0..3 {
        let exact = r[i] * n as f64;
        counts[i] = exact.floor() as usize;
        rema[i] = exact - counts[i] as f64;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rema[b].total_cmp(&rema[a]));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if r[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if r[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).expect("three parts");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = idx.into_iter();
    let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let mut out = tags.map(|tag| Dataset::empty(tag));
    for (i, part) in out.iter_mut().enumerate() {
        part.samples = parts.by_ref().take(counts[i]).map(|j| ds.samples[j].clone()).collect();
    }
    let [a, b, c] = out;
    Ok((a, b, c))
}

/// One minibatch, `[N, 1, H, W]` images and masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
}

/// Lazily assembled minibatches in a per-epoch shuffled order.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    dims: (usize, usize),
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked = &self.order[self.pos..end];
        self.pos = end;
        Some(assemble(self.ds, picked, self.dims))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

fn assemble(ds: &Dataset, picked: &[usize], (h, w): (usize, usize)) -> Batch {
    let mut images = Vec::with_capacity(picked.len() * h * w);
    let mut masks = Vec::with_capacity(picked.len() * h * w);
    let mut ids = Vec::with_capacity(picked.len());
    for &i in picked {
        let s = &ds.samples[i];
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
        ids.push(s.id.clone());
    }
    let shape = [picked.len(), 1, h, w];
    Batch {
        ids,
        images: Tensor::new(shape, images).expect("sizes agree by construction"),
        masks: Tensor::new(shape, masks).expect("sizes agree by construction"),
    }
}

/// Minibatches over `ds`, shuffled with seed `seed ^ epoch`; the last batch
/// may be short.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let dims = ds.dims()?.unwrap_or((1, 1));
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
        dims,
    })
}

/// The whole dataset, in order, as fixed-size chunks (no shuffling).
pub fn sequential_batches(ds: &Dataset, batch_size: usize) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let dims = ds.dims()?.unwrap_or((1, 1));
    Ok(Batches {
        ds,
        order: (0..ds.len()).collect(),
        batch_size,
        pos: 0,
        dims,
    })
}
