//! Oracle detection and the metric suite: numerical accuracy, box
//! agreement, appearance similarity and image similarity.

use std::path::Path;

use crate::amg::{SignalConfig, SignalSet};
use crate::error::{Error, Result};
use crate::geometry::NormBox;
use crate::image::Image;
use crate::moca::annotate::{tight_rect, GRAY};
use crate::moca::scene::{Color, SceneSpec};
use crate::moca::{item_seed, DataItem};
use crate::model::{Mode, Model};
use crate::schedule::NoiseSchedule;
use crate::train::signals_for;

/// Largest RGB distance at which a pixel counts as a palette color.
pub const COLOR_THRESHOLD: f64 = 0.25;
/// Smallest component area, in pixels, reported as an object.
pub const MIN_AREA: usize = 4;
/// Bins per channel of the appearance histogram.
pub const HIST_BINS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub color: Color,
    pub bbox: NormBox,
    pub pixels: Vec<(usize, usize)>,
}

fn palette_index(p: [f64; 3]) -> Option<usize> {
    Color::ALL.iter().position(|c| {
        let q = c.rgb();
        let d2: f64 = (0..3).map(|i| (p[i] - q[i]).powi(2)).sum();
        d2.sqrt() < COLOR_THRESHOLD
    })
}

/// 4-connected components of each palette color with at least
/// [`MIN_AREA`] pixels, in scan order of their first pixel.
pub fn detect(img: &Image) -> Vec<Detection> {
    let (w, h) = (img.width, img.height);
    let labels: Vec<Option<usize>> = (0..w * h).map(|i| palette_index(img.get(i % w, i / w))).collect();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let Some(c) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            let mut visit = |j: usize| {
                if !seen[j] && labels[j] == Some(c) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if pixels.len() >= MIN_AREA {
            pixels.sort_by_key(|&(x, y)| (y, x));
            let (x0, y0, x1, y1) = tight_rect(&pixels).expect("non-empty component");
            let bbox = NormBox {
                x0: x0 as f64 / w as f64,
                y0: y0 as f64 / h as f64,
                x1: x1 as f64 / w as f64,
                y1: y1 as f64 / h as f64,
            };
            out.push(Detection { color: Color::ALL[c], bbox, pixels });
        }
    }
    out
}

pub fn count_objects(img: &Image) -> usize {
    detect(img).len()
}

/// Percentage of items whose detected object count equals the scene's.
pub fn numerical_accuracy(images: &[Image], specs: &[SceneSpec]) -> Result<f64> {
    if images.len() != specs.len() {
        return Err(Error::dim(format!("{} images for {} scenes", images.len(), specs.len())));
    }
    if images.is_empty() {
        return Ok(0.0);
    }
    let hits = images.iter().zip(specs).filter(|(i, s)| count_objects(i) == s.objects.len()).count();
    Ok(100.0 * hits as f64 / images.len() as f64)
}

/// Greedy one-to-one matching by descending IoU. Returns the matched
/// detection of every target (pairs with zero overlap stay unmatched).
pub fn greedy_match(detections: &[NormBox], targets: &[NormBox]) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (t, tb) in targets.iter().enumerate() {
        for (d, db) in detections.iter().enumerate() {
            let iou = tb.iou(db);
            if iou > 0.0 {
                pairs.push((iou, t, d));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched = vec![None; targets.len()];
    let mut used = vec![false; detections.len()];
    for (_, t, d) in pairs {
        if matched[t].is_none() && !used[d] {
            matched[t] = Some(d);
            used[d] = true;
        }
    }
    matched
}

/// Mean IoU over targets after greedy matching; unmatched targets count 0.
/// An empty target list scores 1 when nothing is detected, else 0.
pub fn spatial_sim_boxes(detections: &[NormBox], targets: &[NormBox]) -> f64 {
    if targets.is_empty() {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    let m = greedy_match(detections, targets);
    let total: f64 = m.iter().zip(targets).map(|(d, t)| d.map_or(0.0, |d| t.iou(&detections[d]))).sum();
    total / targets.len() as f64
}

pub fn spatial_sim(img: &Image, targets: &[NormBox]) -> f64 {
    let boxes: Vec<NormBox> = detect(img).into_iter().map(|d| d.bbox).collect();
    spatial_sim_boxes(&boxes, targets)
}

/// Normalized `HIST_BINS^3` RGB histogram.
pub fn color_histogram(img: &Image) -> Vec<f64> {
    let bin = |v: f64| ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
    let mut h = vec![0.0; HIST_BINS.pow(3)];
    for p in img.data.chunks(3) {
        h[(bin(p[0]) * HIST_BINS + bin(p[1])) * HIST_BINS + bin(p[2])] += 1.0;
    }
    h
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn histogram_similarity(a: &Image, b: &Image) -> f64 {
    cosine(&color_histogram(a), &color_histogram(b))
}

/// A detection cut out the way object references are made: its pixels on
/// gray, resized to `ref_size`.
pub fn detection_crop(img: &Image, det: &Detection, ref_size: usize) -> Image {
    let (x0, y0, x1, y1) = tight_rect(&det.pixels).expect("non-empty detection");
    let mut crop = Image::filled(x1 - x0, y1 - y0, [GRAY; 3]);
    for &(x, y) in &det.pixels {
        crop.set(x - x0, y - y0, img.get(x, y));
    }
    crop.crop_resize(0, 0, crop.width, crop.height, ref_size, ref_size)
}

/// Mean histogram similarity between each object reference and the crop of
/// the detection matched to its box; unmatched references count 0.
pub fn appearance_sim(img: &Image, object_refs: &[Image], targets: &[NormBox]) -> Result<f64> {
    if object_refs.len() != targets.len() {
        return Err(Error::dim(format!("{} references for {} boxes", object_refs.len(), targets.len())));
    }
    if targets.is_empty() {
        return Ok(1.0);
    }
    let dets = detect(img);
    let boxes: Vec<NormBox> = dets.iter().map(|d| d.bbox).collect();
    let m = greedy_match(&boxes, targets);
    let total: f64 = m
        .iter()
        .zip(object_refs)
        .map(|(d, r)| d.map_or(0.0, |d| histogram_similarity(&detection_crop(img, &dets[d], r.width), r)))
        .sum();
    Ok(total / targets.len() as f64)
}

/// `1 - RMSE` over all channels of two same-sized images in `[0, 1]`.
pub fn img_sim(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::dim("img_sim needs images of equal size"));
    }
    let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    Ok(1.0 - mse.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemMetrics {
    pub index: usize,
    pub target_count: usize,
    pub detected: usize,
    pub spatial_sim: f64,
    pub appearance_sim: f64,
    pub img_sim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Percentage in `[0, 100]`.
    pub numerical: f64,
    pub spatial_sim: f64,
    pub appearance_sim: f64,
    pub img_sim: f64,
    pub rows: Vec<ItemMetrics>,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<ItemMetrics>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ItemMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        MetricReport {
            numerical: 100.0 * mean(&|r| f64::from(u8::from(r.detected == r.target_count))),
            spatial_sim: mean(&|r| r.spatial_sim),
            appearance_sim: mean(&|r| r.appearance_sim),
            img_sim: mean(&|r| r.img_sim),
            rows,
        }
    }

    pub fn write_items_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "target_count", "detected", "spatial_sim", "appearance_sim", "img_sim"])?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.target_count.to_string(),
                r.detected.to_string(),
                format!("{:.6}", r.spatial_sim),
                format!("{:.6}", r.appearance_sim),
                format!("{:.6}", r.img_sim),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Metrics of one generated image against its dataset item.
pub fn score_item(index: usize, generated: &Image, item: &DataItem) -> Result<ItemMetrics> {
    let a = &item.annotation;
    Ok(ItemMetrics {
        index,
        target_count: item.spec.objects.len(),
        detected: count_objects(generated),
        spatial_sim: spatial_sim(generated, &a.boxes),
        appearance_sim: appearance_sim(generated, &a.object_refs, &a.boxes)?,
        img_sim: img_sim(generated, &item.image)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Worker threads; batches are fixed before they are distributed, so
    /// results do not depend on this.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { n_steps: 25, batch: 16, seed: 0, threads: 1 }
    }
}

/// Samples one image per item, prompted by its text and the signals of
/// `config`. Item `i` uses noise seed `item_seed(seed, i)`.
pub fn generate(model: &Model, mode: Mode, items: &[DataItem], config: SignalConfig, opts: &EvalOptions) -> Result<Vec<Image>> {
    if opts.batch == 0 || opts.n_steps == 0 {
        return Err(Error::validation("batch and step count must be positive"));
    }
    let sched = NoiseSchedule::linear(model.cfg.timesteps)?;
    let signals: Vec<SignalSet> = items.iter().map(|it| signals_for(it, config)).collect();
    let batches: Vec<Vec<usize>> = (0..items.len()).collect::<Vec<_>>().chunks(opts.batch).map(<[usize]>::to_vec).collect();
    let run = |idx: &[usize]| -> Result<Vec<Image>> {
        let prompts: Vec<&str> = idx.iter().map(|&i| items[i].annotation.text.as_str()).collect();
        let sigs: Vec<&SignalSet> = idx.iter().map(|&i| &signals[i]).collect();
        let seeds: Vec<u64> = idx.iter().map(|&i| item_seed(opts.seed, i as u64)).collect();
        model.sample(&prompts, &sigs, mode, &seeds, opts.n_steps, &sched)
    };
    let threads = opts.threads.clamp(1, batches.len().max(1));
    let results: Vec<Result<Vec<Image>>> = if threads == 1 {
        batches.iter().map(|b| run(b)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<Image>>>> = (0..batches.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let batches = &batches;
                    let run = &run;
                    s.spawn(move || {
                        (t..batches.len()).step_by(threads).map(|b| (b, run(&batches[b]))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (b, r) in h.join().expect("evaluation worker panicked") {
                    slots[b] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every batch evaluated")).collect()
    };
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model,
    mode: Mode,
    items: &[DataItem],
    config: SignalConfig,
    opts: &EvalOptions,
) -> Result<(MetricReport, Vec<Image>)> {
    let images = generate(model, mode, items, config, opts)?;
    let rows = images.iter().zip(items).enumerate().map(|(i, (g, it))| score_item(i, g, it)).collect::<Result<Vec<_>>>()?;
    Ok((MetricReport::from_rows(rows), images))
}

/// One row of an ablation: a named model evaluated in a mode.
pub struct AblationEntry<'a> {
    pub name: String,
    pub model: &'a Model,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub signals: SignalConfig,
    pub report: MetricReport,
}

pub fn run_ablation(
    entries: &[AblationEntry<'_>],
    items: &[DataItem],
    config: SignalConfig,
    opts: &EvalOptions,
) -> Result<Vec<AblationRow>> {
    entries
        .iter()
        .map(|e| {
            let (report, _) = evaluate(e.model, e.mode, items, config, opts)?;
            Ok(AblationRow { name: e.name.clone(), signals: config, report })
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["config", "signals", "items", "numerical", "spatial_sim", "appearance_sim", "img_sim"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.signals.to_string(),
            r.report.rows.len().to_string(),
            format!("{:.2}", r.report.numerical),
            format!("{:.6}", r.report.spatial_sim),
            format!("{:.6}", r.report.appearance_sim),
            format!("{:.6}", r.report.img_sim),
        ])?;
    }
    w.flush()?;
    Ok(())
}
