//! Flip/crop augmentation, CutMix-style box mixing, and the TransMix label
//! coefficient read off the model's own [cls] attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};
use crate::vit::{cls_row_values, ViTConfig};

/// Padding used by the random crop.
pub const CROP_PAD: usize = 4;

/// Half-open pixel box `[x0, x1) × [y0, y1)`, clipped to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// Two labels and the weight of the second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixedLabel {
    pub label_a: usize,
    pub label_b: usize,
    pub coefficient: f64,
}

impl MixedLabel {
    /// Soft target `(1 − c)·e_a + c·e_b`.
    pub fn target(&self, num_classes: usize) -> Vec<f64> {
        let mut t = vec![0.0; num_classes];
        t[self.label_a] += 1.0 - self.coefficient;
        t[self.label_b] += self.coefficient;
        t
    }
}

/// CutMix box sampling: uniform centre, sides `√f·(W, H)`, then clipped.
pub fn sample_cut_box<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, fraction: f64) -> CutBox {
    let f = fraction.clamp(0.0, 1.0);
    let cut_w = f.sqrt() * width as f64;
    let cut_h = f.sqrt() * height as f64;
    let cx = rng.gen::<f64>() * width as f64;
    let cy = rng.gen::<f64>() * height as f64;
    let clip = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
    if f >= 1.0 {
        return CutBox {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        };
    }
    CutBox {
        x0: clip(cx - cut_w / 2.0, width),
        y0: clip(cy - cut_h / 2.0, height),
        x1: clip(cx + cut_w / 2.0, width),
        y1: clip(cy + cut_h / 2.0, height),
    }
}

/// Pixels inside `cut` come from `b`, the rest from `a`.
pub fn mix_images(a: &Tensor, b: &Tensor, cut: &CutBox) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mix_images", a.shape(), b.shape()));
    }
    let [c, h, w] = *a.shape() else {
        return Err(Error::shape("mix_images", a.shape(), &[3]));
    };
    if cut.x1 > w || cut.y1 > h || cut.x0 > cut.x1 || cut.y0 > cut.y1 {
        return Err(Error::Contract(format!("box {cut:?} outside a {h}×{w} image")));
    }
    let mut out = a.clone();
    let (src, dst) = (b.data(), out.data_mut());
    for ch in 0..c {
        for y in cut.y0..cut.y1 {
            let row = ch * h * w + y * w;
            dst[row + cut.x0..row + cut.x1].copy_from_slice(&src[row + cut.x0..row + cut.x1]);
        }
    }
    Ok(out)
}

/// Patches whose pixel majority lies inside the box; exactly half counts
/// as inside.
pub fn box_patch_mask(cut: &CutBox, config: &ViTConfig) -> Vec<bool> {
    let (g, p) = (config.grid(), config.patch_size);
    let overlap = |lo: usize, hi: usize, start: usize| {
        let (a, b) = (lo.max(start), hi.min(start + p));
        b.saturating_sub(a)
    };
    let mut mask = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let inside = overlap(cut.x0, cut.x1, gx * p) * overlap(cut.y0, cut.y1, gy * p);
            mask.push(2 * inside >= p * p);
        }
    }
    mask
}

/// Head-averaged [cls] attention over the `N` patches from one sample's
/// per-head logit matrices: softmax over the full row, drop the [cls]
/// entry, renormalize.
pub fn cls_patch_attention(head_logits: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = head_logits.first() else {
        return Err(Error::Contract("no attention heads".into()));
    };
    let n = cls_row_values(first)?.len();
    let mut avg = vec![0.0; n];
    for l in head_logits {
        let (_, cols) = l.dims2().unwrap_or((0, 0));
        let mut row = l.row(0)[..cols].to_vec();
        softmax_in_place(&mut row);
        let mass: f64 = row[1..].iter().sum();
        for (a, r) in avg.iter_mut().zip(&row[1..]) {
            *a += r / mass;
        }
    }
    let h = head_logits.len() as f64;
    avg.iter_mut().for_each(|a| *a /= h);
    Ok(Tensor::vector(&avg))
}

/// Attention mass on the masked patches.
pub fn transmix_coefficient(cls_attention: &Tensor, box_patch_mask: &[bool]) -> Result<f64> {
    let a = cls_attention.data();
    if a.len() != box_patch_mask.len() {
        return Err(Error::shape("transmix_coefficient", &[a.len()], &[box_patch_mask.len()]));
    }
    let total: f64 = a.iter().sum();
    if a.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "attention must be a distribution over patches (sum {total})"
        )));
    }
    let c = a.iter().zip(box_patch_mask).filter(|(_, &m)| m).fold(0.0, |s, (v, _)| s + v);
    Ok(c.clamp(0.0, 1.0))
}

/// One draw of the flip/crop augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Crop offsets into the padded image, in `[0, 2·CROP_PAD]`.
    pub dx: usize,
    pub dy: usize,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        dx: CROP_PAD,
        dy: CROP_PAD,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            flip: rng.gen_bool(0.5),
            dx: rng.gen_range(0..=2 * CROP_PAD),
            dy: rng.gen_range(0..=2 * CROP_PAD),
        }
    }
}

/// Horizontal flip then zero-pad-and-crop back to `H×W`.
pub fn apply_augment(image: &Tensor, draw: AugmentDraw) -> Tensor {
    let [c, h, w] = *image.shape() else {
        panic!("apply_augment expects a 3-D image, got {:?}", image.shape());
    };
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + draw.dy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + draw.dx) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let sx = if draw.flip { w - 1 - sx as usize } else { sx as usize };
                out[ch * h * w + y * w + x] = src[ch * h * w + sy as usize * w + sx];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

pub fn basic_augment<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Tensor {
    apply_augment(image, AugmentDraw::sample(rng))
}
