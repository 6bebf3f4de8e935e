//! Overlap metrics and dataset-level evaluation.
//!
//! IoU and DICE are computed per sample on binarized prediction and ground
//! truth, then averaged over samples. When both masks are empty both scores
//! are 1.

use std::fmt::Write as _;

use crate::data::{sequential_batches, Dataset, Grid};
use crate::error::{shape_err, Error, Result};
use crate::nn::Model;
use crate::tensor::Graph;

pub const DEFAULT_THRESHOLD: f32 = 0.5;
/// Ground-truth masks are always binarized here, whatever the prediction
/// threshold.
pub const MASK_THRESHOLD: f32 = 0.5;

/// `1` where `v >= threshold`, else `0`.
pub fn binarize(grid: &Grid, threshold: f32) -> Grid {
    let data = binarize_values(grid.data(), threshold);
    Grid::new(grid.height(), grid.width(), data).expect("same dimensions")
}

pub fn binarize_values(values: &[f32], threshold: f32) -> Vec<f32> {
    values.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect()
}

/// Pixel counts `(|pred ∩ gt|, |pred|, |gt|)`; nonzero values count as set.
pub fn overlap(pred: &[f32], gt: &[f32]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(shape_err!("masks have {} and {} pixels", pred.len(), gt.len()));
    }
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0.0, b != 0.0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok((inter, p, g))
}

pub fn iou_values(pred: &[f32], gt: &[f32]) -> Result<f64> {
    let (inter, p, g) = overlap(pred, gt)?;
    let union = p + g - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn dice_values(pred: &[f32], gt: &[f32]) -> Result<f64> {
    let (inter, p, g) = overlap(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

fn same_dims(a: &Grid, b: &Grid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("mask shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

pub fn iou(pred: &Grid, gt: &Grid) -> Result<f64> {
    same_dims(pred, gt)?;
    iou_values(pred.data(), gt.data())
}

pub fn dice(pred: &Grid, gt: &Grid) -> Result<f64> {
    same_dims(pred, gt)?;
    dice_values(pred.data(), gt.data())
}

/// Mean binary cross-entropy with the same clamping as the training loss.
pub fn bce(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err!("bce over {} predictions and {} targets", pred.len(), target.len()));
    }
    let eps = crate::tensor::BCE_EPSILON;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let (p, t) = ((p as f64).clamp(eps, 1.0 - eps), t as f64);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub loss: f64,
    pub iou: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_loss: f64,
    pub mean_iou: f64,
    pub mean_dice: f64,
    pub rows: Vec<EvalRow>,
    pub threshold: f32,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, threshold: f32) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot summarize an empty evaluation".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            mean_loss: mean(|r| r.loss),
            mean_iou: mean(|r| r.iou),
            mean_dice: mean(|r| r.dice),
            threshold,
            rows,
        })
    }

    /// Per-sample CSV: `id,loss,iou,dice`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,loss,iou,dice\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.8},{:.8},{:.8}", r.id, r.loss, r.iou, r.dice);
        }
        out
    }
}

/// Text table with the columns `Model | Test Loss | IoU | DICE Coeff`;
/// overlap scores are shown as percentages.
pub fn format_table(entries: &[(&str, &EvalReport)]) -> String {
    let width = entries.iter().map(|(n, _)| n.len()).chain([5]).max().unwrap_or(5);
    let mut out = format!("{:<width$} | {:>9} | {:>7} | {:>10}\n", "Model", "Test Loss", "IoU", "DICE Coeff");
    let _ = writeln!(out, "{}", "-".repeat(width + 37));
    for (name, r) in entries {
        let _ = writeln!(
            out,
            "{:<width$} | {:>9.4} | {:>6.2}% | {:>9.2}%",
            name,
            r.mean_loss,
            100.0 * r.mean_iou,
            100.0 * r.mean_dice
        );
    }
    out
}

const EVAL_BATCH: usize = 8;

/// Runs `model` in inference mode over `ds`. Loss uses the continuous mask;
/// IoU and DICE binarize the prediction at `threshold` and the mask at
/// [`MASK_THRESHOLD`].
pub fn evaluate(model: &Model, ds: &Dataset, threshold: f32) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(ds.len());
    for batch in sequential_batches(ds, EVAL_BATCH)? {
        let mut g = Graph::<f32>::inference();
        let x = g.leaf(&batch.images);
        let y = model.forward(&mut g, x)?;
        if g.shape(y) != batch.masks.shape() {
            return Err(shape_err!(
                "model output {:?} does not match masks {:?}",
                g.shape(y),
                batch.masks.shape()
            ));
        }
        let pixels = batch.masks.len() / batch.ids.len();
        let preds = g.value(y).chunks(pixels);
        for ((id, p), m) in batch.ids.into_iter().zip(preds).zip(batch.masks.data().chunks(pixels)) {
            let (pb, mb) = (binarize_values(p, threshold), binarize_values(m, MASK_THRESHOLD));
            rows.push(EvalRow {
                id,
                loss: bce(p, m)?,
                iou: iou_values(&pb, &mb)?,
                dice: dice_values(&pb, &mb)?,
            });
        }
    }
    EvalReport::from_rows(rows, threshold)
}
