//! Training-time augmentations: box jittering, local distortion of the
//! reference inputs, and mild cropping of object references.

use rand::seq::SliceRandom;
use rand::Rng;

use super::annotate::AnnotationBundle;
use crate::geometry::NormBox;
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Lowest IoU between a box and its jittered version.
    pub min_iou: f64,
    /// Largest offset of each box edge, as a fraction of the box side.
    pub max_shift: f64,
    /// Largest fraction of an object reference removed by cropping.
    pub max_crop_removed: f64,
    /// Side range of the distorted square region, in pixels.
    pub region_min: usize,
    pub region_max: usize,
    pub jitter_attempts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_iou: 0.6,
            max_shift: 0.2,
            max_crop_removed: 0.15,
            region_min: 6,
            region_max: 12,
            jitter_attempts: 100,
        }
    }
}

/// Moves each edge by a uniform offset; resamples until the IoU with the
/// original is at least `min_iou` and the box stays inside the canvas, and
/// falls back to the original box if no draw qualifies.
pub fn jitter_box(b: &NormBox, rng: &mut impl Rng, cfg: &AugmentConfig) -> NormBox {
    let (w, h) = (b.width(), b.height());
    for _ in 0..cfg.jitter_attempts {
        let mut d = || rng.random_range(-cfg.max_shift..=cfg.max_shift);
        let j = NormBox {
            x0: b.x0 + d() * w,
            y0: b.y0 + d() * h,
            x1: b.x1 + d() * w,
            y1: b.y1 + d() * h,
        };
        if j.validate().is_ok() && j.iou(b) >= cfg.min_iou {
            return j;
        }
    }
    *b
}

/// Crops a random window keeping at least `1 - max_removed` of the area and
/// resizes it back. Returns the image and the removed fraction.
pub fn random_crop(img: &Image, rng: &mut impl Rng, max_removed: f64) -> (Image, f64) {
    let (w, h) = (img.width, img.height);
    let total = (w * h) as f64;
    let keep = 1.0 - max_removed;
    let min_w = ((keep * w as f64).ceil() as usize).max(1);
    let cw = rng.random_range(min_w..=w);
    let min_h = ((keep * total / cw as f64).ceil() as usize).clamp(1, h);
    let ch = rng.random_range(min_h..=h);
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    let removed = 1.0 - (cw * ch) as f64 / total;
    (img.crop_resize(x0, y0, cw, ch, w, h), removed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Blur,
    Shuffle,
}

/// Square region `(x0, y0, side)` inside a `size` canvas.
pub fn random_region(size: usize, rng: &mut impl Rng, cfg: &AugmentConfig) -> (usize, usize, usize) {
    let side = rng.random_range(cfg.region_min.min(size)..=cfg.region_max.min(size));
    (rng.random_range(0..=size - side), rng.random_range(0..=size - side), side)
}

/// 3x3 box blur (clamped at the region border) or a random permutation of
/// the region's pixels, given the permutation `order`.
pub fn distort(img: &Image, region: (usize, usize, usize), kind: Distortion, order: &[usize]) -> Image {
    let (x0, y0, side) = region;
    let mut out = img.clone();
    match kind {
        Distortion::Blur => {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let mut acc = [0.0; 3];
                    let mut n = 0.0;
                    for yy in y.saturating_sub(1).max(y0)..=(y + 1).min(y0 + side - 1) {
                        for xx in x.saturating_sub(1).max(x0)..=(x + 1).min(x0 + side - 1) {
                            let p = img.get(xx, yy);
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                            n += 1.0;
                        }
                    }
                    out.set(x, y, acc.map(|v| v / n));
                }
            }
        }
        Distortion::Shuffle => {
            for (k, &src) in order.iter().enumerate() {
                let (sx, sy) = (x0 + src % side, y0 + src / side);
                out.set(x0 + k % side, y0 + k / side, img.get(sx, sy));
            }
        }
    }
    out.quantized()
}

/// Applies all three augmentations. The same distortion (region, kind and
/// permutation) hits `rendered` and the structure reference.
pub fn augment(bundle: &AnnotationBundle, rendered: &Image, rng: &mut impl Rng, cfg: &AugmentConfig) -> (AnnotationBundle, Image) {
    let boxes = bundle.boxes.iter().map(|b| jitter_box(b, rng, cfg)).collect();
    let region = random_region(rendered.width.min(rendered.height), rng, cfg);
    let kind = if rng.random_bool(0.5) { Distortion::Blur } else { Distortion::Shuffle };
    let mut order: Vec<usize> = (0..region.2 * region.2).collect();
    order.shuffle(rng);
    let rendered2 = distort(rendered, region, kind, &order);
    let structure_ref = distort(&bundle.structure_ref, region, kind, &order);
    let object_refs = bundle
        .object_refs
        .iter()
        .map(|o| random_crop(o, rng, cfg.max_crop_removed).0)
        .collect();
    (
        AnnotationBundle {
            text: bundle.text.clone(),
            structure_ref,
            object_refs,
            boxes,
        },
        rendered2,
    )
}
