//! Accuracy, [cls]-attention maps, attention-derived segmentation scored by
//! Jaccard index, drift of attention logits away from a source model, and
//! overlay images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_ppm_bytes, Dataset, Mask};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tape, Tensor};
use crate::vit::{cls_row_values, forward_batch, FrozenTrace, ViTConfig, ViTModel};

/// Default cumulative attention mass kept when thresholding a map.
pub const DEFAULT_MASS_FRACTION: f64 = 0.6;
/// Blend weight of the overlay.
pub const OVERLAY_ALPHA: f64 = 0.5;
pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMode {
    FinalBlock,
    AllBlocksMax,
}

impl MapMode {
    pub fn name(self) -> &'static str {
        match self {
            MapMode::FinalBlock => "final-block",
            MapMode::AllBlocksMax => "all-blocks-max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "final-block" => Ok(MapMode::FinalBlock),
            "all-blocks-max" => Ok(MapMode::AllBlocksMax),
            _ => Err(Error::Usage(format!(
                "unknown map mode `{s}` (expected final-block or all-blocks-max)"
            ))),
        }
    }
}

/// Per-pixel attention, upsampled from the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Patch-grid values the map was upsampled from.
    pub grid: Vec<f64>,
    pub mode: MapMode,
}

/// Softmax of a head's [cls] row over the `N` patch entries.
pub fn softmaxed_cls_row(logits: &Tensor) -> Result<Vec<f64>> {
    let mut row = cls_row_values(logits)?.to_vec();
    softmax_in_place(&mut row);
    Ok(row)
}

/// Elementwise max over heads (and blocks, for `AllBlocksMax`) of the
/// softmaxed [cls] rows of one sample.
pub fn attention_grid(trace: &FrozenTrace, sample: usize, mode: MapMode) -> Result<Vec<f64>> {
    if sample >= trace.batch || trace.depth() == 0 {
        return Err(Error::Contract(format!(
            "sample {sample} outside a trace of batch {}",
            trace.batch
        )));
    }
    let blocks = match mode {
        MapMode::FinalBlock => &trace.logits[trace.depth() - 1..],
        MapMode::AllBlocksMax => &trace.logits[..],
    };
    let mut grid: Vec<f64> = Vec::new();
    for heads in blocks {
        for per_sample in heads {
            let row = softmaxed_cls_row(&per_sample[sample])?;
            if grid.is_empty() {
                grid = row;
            } else {
                grid.iter_mut().zip(&row).for_each(|(g, r)| *g = g.max(*r));
            }
        }
    }
    Ok(grid)
}

/// Nearest-neighbour upsampling of a `g×g` grid to `H×W`.
pub fn upsample(grid: &[f64], config: &ViTConfig) -> Vec<f64> {
    let (g, p, s) = (config.grid(), config.patch_size, config.image_size);
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            out[y * s + x] = grid[(y / p).min(g - 1) * g + (x / p).min(g - 1)];
        }
    }
    out
}

pub fn attention_map(trace: &FrozenTrace, config: &ViTConfig, sample: usize, mode: MapMode) -> Result<AttentionMap> {
    let grid = attention_grid(trace, sample, mode)?;
    if grid.len() != config.num_patches() {
        return Err(Error::shape("attention_map", &[grid.len()], &[config.num_patches()]));
    }
    Ok(AttentionMap {
        height: config.image_size,
        width: config.image_size,
        values: upsample(&grid, config),
        grid,
        mode,
    })
}

/// Keeps cells in descending order of value until the kept share of the
/// total reaches `mass_fraction`. Equal values keep row-major order.
pub fn threshold_mask(values: &[f64], mass_fraction: f64) -> Result<Vec<bool>> {
    if !(mass_fraction > 0.0 && mass_fraction <= 1.0) {
        return Err(Error::Contract(format!(
            "mass fraction must lie in (0, 1], got {mass_fraction}"
        )));
    }
    let total: f64 = values.iter().sum();
    let mut keep = vec![false; values.len()];
    if !(total > 0.0) {
        return Ok(keep);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    for i in order {
        if mass / total >= mass_fraction || values[i] <= 0.0 {
            break;
        }
        keep[i] = true;
        mass += values[i];
    }
    Ok(keep)
}

/// `|pred ∩ truth| / |pred ∪ truth|`, 0 when `pred` is empty.
pub fn jaccard(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("jaccard", &[pred.len()], &[truth.len()]));
    }
    let inter = pred.iter().zip(truth).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(truth).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 || !pred.iter().any(|&p| p) {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Per-patch share of foreground pixels.
pub fn patch_coverage(mask: &Mask, config: &ViTConfig) -> Result<Vec<f64>> {
    let (g, p) = (config.grid(), config.patch_size);
    if mask.height != config.image_size || mask.width != config.image_size {
        return Err(Error::shape(
            "patch_coverage",
            &[mask.height, mask.width],
            &[config.image_size, config.image_size],
        ));
    }
    let mut cov = vec![0.0; g * g];
    for y in 0..g * p {
        for x in 0..g * p {
            if mask.get(y, x) {
                cov[(y / p) * g + x / p] += 1.0;
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (p * p) as f64);
    Ok(cov)
}

/// Ground truth at patch resolution: patches at least half foreground.
pub fn downsample_mask(mask: &Mask, config: &ViTConfig) -> Result<Vec<bool>> {
    Ok(patch_coverage(mask, config)?.iter().map(|&c| c >= 0.5).collect())
}

/// Jaccard between the thresholded attention grid and the downsampled
/// ground truth.
pub fn patch_jaccard(grid: &[f64], mask: &Mask, config: &ViTConfig, mass_fraction: f64) -> Result<f64> {
    let pred = threshold_mask(grid, mass_fraction)?;
    jaccard(&pred, &downsample_mask(mask, config)?)
}

/// Share of the (normalized) attention grid falling on foreground pixels.
pub fn foreground_mass(grid: &[f64], mask: &Mask, config: &ViTConfig) -> Result<f64> {
    let cov = patch_coverage(mask, config)?;
    let total: f64 = grid.iter().sum();
    if !(total > 0.0) {
        return Ok(0.0);
    }
    Ok(grid.iter().zip(&cov).map(|(a, c)| a * c).sum::<f64>() / total)
}

/// `per_head[m][l]`: batch-mean L2 distance between the two traces' [cls]
/// logit rows (self logit excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitDistance {
    pub per_head: Vec<Vec<f64>>,
    pub mean: f64,
    pub max: f64,
}

pub fn logit_distance_stats(src: &FrozenTrace, tgt: &FrozenTrace) -> Result<LogitDistance> {
    if src.depth() != tgt.depth() || src.heads() != tgt.heads() || src.batch != tgt.batch {
        return Err(Error::Config(format!(
            "trace layouts differ: {}×{}×{} vs {}×{}×{}",
            src.depth(),
            src.heads(),
            src.batch,
            tgt.depth(),
            tgt.heads(),
            tgt.batch
        )));
    }
    let mut per_head = Vec::with_capacity(src.depth());
    for (sh, th) in src.logits.iter().zip(&tgt.logits) {
        let mut row = Vec::with_capacity(sh.len());
        for (ss, ts) in sh.iter().zip(th) {
            let mut d = 0.0;
            for (s, t) in ss.iter().zip(ts) {
                let (a, b) = (cls_row_values(s)?, cls_row_values(t)?);
                if a.len() != b.len() {
                    return Err(Error::shape("logit_distance_stats", s.shape(), t.shape()));
                }
                d += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            }
            row.push(d / src.batch as f64);
        }
        per_head.push(row);
    }
    let flat: Vec<f64> = per_head.iter().flatten().copied().collect();
    Ok(LogitDistance {
        mean: flat.iter().sum::<f64>() / flat.len().max(1) as f64,
        max: flat.iter().copied().fold(0.0, f64::max),
        per_head,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class logits and captured trace for `images`, with no gradients.
pub fn infer(model: &ViTModel, images: &[&Tensor]) -> Result<(Tensor, FrozenTrace)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let (logits, trace) = forward_batch(images, &bound, true)?;
    let trace = trace.expect("capture requested").freeze();
    Ok(((*logits.value()).clone(), trace))
}

pub fn predict(model: &ViTModel, images: &[&Tensor]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let tape = Tape::new();
        let (logits, _) = forward_batch(chunk, &model.bind(&tape, false), false)?;
        let v = logits.value();
        let (rows, _) = v.dims2().expect("matrix");
        out.extend((0..rows).map(|r| argmax(v.row(r))));
    }
    Ok(out)
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset("no samples to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape("accuracy", &[predictions.len()], &[labels.len()]));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

pub fn accuracy(model: &ViTModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("accuracy of an empty dataset".into()));
    }
    let images: Vec<&Tensor> = dataset.samples.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    accuracy_of(&predict(model, &images)?, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mass_fraction: f64,
    pub mode: MapMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mass_fraction: DEFAULT_MASS_FRACTION,
            mode: MapMode::FinalBlock,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean patch-grid Jaccard over samples with a mask.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jaccard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub foreground_mass: Option<f64>,
    /// Mean [cls]-logit distance to the source model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logit_distance: Option<f64>,
    pub mass_fraction: f64,
    pub map_mode: MapMode,
}

/// Accuracy, attention quality and, given a source, attention drift, in
/// one pass over the dataset.
pub fn evaluate(model: &ViTModel, source: Option<&ViTModel>, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalRecord> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    let cfg = model.config;
    let (mut hits, mut jac, mut fg, mut masked, mut drift) = (0usize, 0.0, 0.0, 0usize, 0.0);
    for chunk in dataset.samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let (logits, trace) = infer(model, &images)?;
        for (i, s) in chunk.iter().enumerate() {
            if argmax(logits.row(i)) == s.label {
                hits += 1;
            }
            if let Some(mask) = &s.mask {
                let grid = attention_grid(&trace, i, opts.mode)?;
                jac += patch_jaccard(&grid, mask, &cfg, opts.mass_fraction)?;
                fg += foreground_mass(&grid, mask, &cfg)?;
                masked += 1;
            }
        }
        if let Some(src) = source {
            let (_, src_trace) = infer(src, &images)?;
            drift += logit_distance_stats(&src_trace, &trace)?.mean * chunk.len() as f64;
        }
    }
    let n = dataset.len();
    Ok(EvalRecord {
        samples: n,
        accuracy: hits as f64 / n as f64,
        jaccard: (masked > 0).then(|| jac / masked as f64),
        foreground_mass: (masked > 0).then(|| fg / masked as f64),
        logit_distance: source.map(|_| drift / n as f64),
        mass_fraction: opts.mass_fraction,
        map_mode: opts.mode,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Interleaved RGB overlay: luminance in all channels, the max-normalized
/// map pushing red towards full and dimming green and blue by `α·map`.
pub fn overlay_bytes(image: &Tensor, map: &AttentionMap) -> Result<Vec<u8>> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::shape("overlay", image.shape(), &[3]));
    };
    if (h, w) != (map.height, map.width) {
        return Err(Error::shape("overlay", &[h, w], &[map.height, map.width]));
    }
    let peak = map.values.iter().copied().fold(0.0, f64::max);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        let gray = 0.299 * d[p] + 0.587 * d[h * w + p] + 0.114 * d[2 * h * w + p];
        let m = if peak > 0.0 { map.values[p] / peak } else { 0.0 };
        out.push(to_byte(gray * (1.0 - m) + m));
        let gb = to_byte(gray * (1.0 - OVERLAY_ALPHA * m));
        out.push(gb);
        out.push(gb);
    }
    Ok(out)
}

pub fn emit_overlay(image: &Tensor, map: &AttentionMap, path: &Path) -> Result<()> {
    let bytes = overlay_bytes(image, map)?;
    write_ppm_bytes(path, map.width, map.height, &bytes)
}
