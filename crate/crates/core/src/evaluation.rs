//! Segmentation mIoU (all classes and movable objects), disparity AbsRel and
//! delta-1, the Copy-Last baseline, split-level evaluation and reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{AbsRelDenominator, DEPTH, SEGMENTATION};
use crate::datasets::{self, Horizon, ManifestEntry};
use crate::error::{Error, Result};
use crate::inference::{self, FramePrediction};
use crate::layout::TokenLayout;
use crate::modality::{LabelMap, ModalitySpec, SequenceRecord};
use crate::model::Futurist;
use crate::tensor::Scalar;

/// Disparity floor applied before any ratio.
pub const DISPARITY_FLOOR: f64 = 1.0 / 512.0;
pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Global confusion counts, rows indexed by ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore: Option<u16>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore: Option<u16>) -> Self {
        ConfusionMatrix {
            num_classes,
            ignore,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::shape(
                "miou",
                format!("prediction {}x{} vs truth {}x{}", pred.height, pred.width, gt.height, gt.width),
            ));
        }
        let k = self.num_classes;
        for (p, g) in pred.labels.iter().zip(gt.labels.iter()) {
            if Some(g) == self.ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::range("label", format!("{} >= {k} classes", p.max(g))));
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes || other.ignore != self.ignore {
            return Err(Error::shape("confusion merge", "class count or ignore id differs"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU of `class`, or `None` when it never occurs in the ground truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let k = self.num_classes;
        let gt_total: u64 = self.counts[class * k..(class + 1) * k].iter().sum();
        if gt_total == 0 {
            return None;
        }
        let pred_total: u64 = (0..k).map(|g| self.counts[g * k + class]).sum();
        let inter = self.count(class, class);
        Some(inter as f64 / (gt_total + pred_total - inter) as f64)
    }

    /// Mean IoU x 100 over ground-truth classes (restricted to `subset`);
    /// `None` when no class qualifies.
    pub fn miou(&self, subset: Option<&BTreeSet<u32>>) -> Option<f64> {
        let ious: Vec<f64> = (0..self.num_classes)
            .filter(|&c| subset.is_none_or(|s| s.contains(&(c as u32))))
            .filter_map(|c| self.iou(c))
            .collect();
        if ious.is_empty() {
            None
        } else {
            Some(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
        }
    }
}

/// mIoU x 100 for one map pair; `Ok(None)` when no class is evaluable.
pub fn miou(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    ignore: Option<u16>,
    subset: Option<&BTreeSet<u32>>,
) -> Result<Option<f64>> {
    let mut cm = ConfusionMatrix::new(num_classes, ignore);
    cm.add(pred, gt)?;
    Ok(cm.miou(subset))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    /// Mean absolute relative error x 100.
    pub abs_rel: f64,
    /// Percentage of pixels with `max(a/b, b/a) < 1.25`.
    pub delta1: f64,
}

/// Pixel pool for disparity metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthAccumulator {
    pub denominator: AbsRelDenominator,
    abs_rel_sum: f64,
    delta_hits: u64,
    pixels: u64,
}

impl DepthAccumulator {
    pub fn new(denominator: AbsRelDenominator) -> Self {
        DepthAccumulator {
            denominator,
            abs_rel_sum: 0.0,
            delta_hits: 0,
            pixels: 0,
        }
    }

    /// Adds one pixel with predicted and true disparity.
    #[inline]
    pub fn push(&mut self, pred: f64, gt: f64) {
        let (a, b) = (gt.max(DISPARITY_FLOOR), pred.max(DISPARITY_FLOOR));
        let (a_over_b, b_over_a) = (a / b, b / a);
        // |a - b| / b written as |a / b - 1| (and likewise for the gt variant).
        self.abs_rel_sum += match self.denominator {
            AbsRelDenominator::Pred => (a_over_b - 1.0).abs(),
            AbsRelDenominator::Gt => (1.0 - b_over_a).abs(),
        };
        if a_over_b.max(b_over_a) < DELTA1_THRESHOLD {
            self.delta_hits += 1;
        }
        self.pixels += 1;
    }

    pub fn add_values(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("depth metrics", format!("{} vs {} pixels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.push(p, g);
        }
        Ok(())
    }

    pub fn add_bins(&mut self, pred: &LabelMap, gt: &LabelMap, num_bins: usize) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::shape("depth metrics", "prediction and truth sizes differ"));
        }
        let centres: Vec<f64> = (0..num_bins).map(|b| datasets::dequantize_depth(b as u16, num_bins)).collect();
        for (p, g) in pred.labels.iter().zip(gt.labels.iter()) {
            let (p, g) = (p as usize, g as usize);
            if p >= num_bins || g >= num_bins {
                return Err(Error::range("depth bin", format!("{} >= {num_bins}", p.max(g))));
            }
            self.push(centres[p], centres[g]);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DepthAccumulator) {
        self.abs_rel_sum += other.abs_rel_sum;
        self.delta_hits += other.delta_hits;
        self.pixels += other.pixels;
    }

    pub fn pixels(&self) -> u64 {
        self.pixels
    }

    pub fn metrics(&self) -> Option<DepthMetrics> {
        (self.pixels > 0).then(|| DepthMetrics {
            abs_rel: 100.0 * self.abs_rel_sum / self.pixels as f64,
            delta1: 100.0 * self.delta_hits as f64 / self.pixels as f64,
        })
    }
}

pub fn depth_metrics_values(pred: &[f64], gt: &[f64], denominator: AbsRelDenominator) -> Result<Option<DepthMetrics>> {
    let mut acc = DepthAccumulator::new(denominator);
    acc.add_values(pred, gt)?;
    Ok(acc.metrics())
}

pub fn depth_metrics(
    pred_bins: &LabelMap,
    gt_bins: &LabelMap,
    num_bins: usize,
    denominator: AbsRelDenominator,
) -> Result<Option<DepthMetrics>> {
    let mut acc = DepthAccumulator::new(denominator);
    acc.add_bins(pred_bins, gt_bins, num_bins)?;
    Ok(acc.metrics())
}

/// The last context frame repeated for every step.
pub fn copy_last_baseline(context: &SequenceRecord, steps: usize) -> Result<Vec<FramePrediction>> {
    if context.num_frames() == 0 {
        return Err(Error::Contract("copy-last needs at least one context frame".into()));
    }
    let indices = context.frame_indices();
    let last = *indices.last().expect("non-empty");
    let stride = if indices.len() > 1 { indices[1] - indices[0] } else { context.subsample.max(1) };
    let modalities: Vec<String> = context.modalities.iter().map(|m| m.modality.name.clone()).collect();
    let maps: Vec<LabelMap> = context
        .modalities
        .iter()
        .map(|m| m.frames.last().expect("non-empty").clone())
        .collect();
    Ok((1..=steps as u32)
        .map(|k| FramePrediction {
            frame_index: last + k * stride,
            modalities: modalities.clone(),
            maps: maps.clone(),
        })
        .collect())
}

/// What produces the forecasts being scored.
#[derive(Clone, Copy)]
pub enum Method<'a, T: Scalar> {
    Model(&'a Futurist<T>),
    CopyLast,
}

impl<T: Scalar> Method<'_, T> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Model(_) => "model",
            Method::CopyLast => "copy-last",
        }
    }
}

/// Where and how to evaluate.
#[derive(Clone, Debug)]
pub struct EvalSetup {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub horizon: Horizon,
    pub layout: TokenLayout,
    /// Modalities to score; the model may cover a subset.
    pub modalities: Vec<ModalitySpec>,
    pub denominator: AbsRelDenominator,
    pub ignore_label: Option<u16>,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub horizon: Horizon,
    pub miou_all: Option<f64>,
    pub miou_movable: Option<f64>,
    pub delta1: Option<f64>,
    pub abs_rel: Option<f64>,
    pub items: usize,
    /// Per-item failures (item label and message); evaluation continued past them.
    pub failures: Vec<String>,
}

impl MetricRow {
    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Partial {
    seg: Option<ConfusionMatrix>,
    depth: Option<DepthAccumulator>,
    failure: Option<String>,
}

fn score_item<T: Scalar>(method: Method<'_, T>, setup: &EvalSetup, entry: &ManifestEntry) -> Result<Partial> {
    let (root, layout) = (&setup.root, &setup.layout);
    let contexts = datasets::context_frame_indices(entry.target, setup.horizon, layout.context_frames)?;
    let preds = match method {
        Method::Model(model) => {
            let ctx = datasets::load_frames(root, &entry.city, &entry.sequence, &contexts, &model.config().modalities)?
                .resized(layout.height, layout.width);
            inference::forecast(model, &ctx, setup.horizon)?
        }
        Method::CopyLast => {
            let ctx = datasets::load_frames(root, &entry.city, &entry.sequence, &contexts, &setup.modalities)?;
            copy_last_baseline(&ctx, setup.horizon.steps())?
        }
    };
    let pred = preds.last().expect("at least one step");
    if pred.frame_index != entry.target {
        return Err(Error::Contract(format!(
            "forecast reached frame {} instead of {}",
            pred.frame_index, entry.target
        )));
    }
    let mut partial = Partial {
        seg: None,
        depth: None,
        failure: None,
    };
    for m in &setup.modalities {
        let Some(p) = pred.get(&m.name) else { continue };
        let limit = setup.ignore_label.map_or(m.num_labels, |i| m.num_labels.max(i as usize + 1));
        let gt = datasets::read_label_png(
            &datasets::label_path(root, &entry.city, &entry.sequence, entry.target, &m.name),
            limit,
        )?;
        let p = p.resize_nearest(gt.height, gt.width);
        if m.name == SEGMENTATION {
            let mut cm = ConfusionMatrix::new(m.num_labels, setup.ignore_label);
            cm.add(&p, &gt)?;
            partial.seg = Some(cm);
        } else if m.name == DEPTH {
            let mut acc = DepthAccumulator::new(setup.denominator);
            acc.add_bins(&p, &gt, m.num_labels)?;
            partial.depth = Some(acc);
        }
    }
    Ok(partial)
}

/// Scores `method` on every manifest entry. Items whose files are missing
/// are listed in `failures` and skipped.
pub fn evaluate<T: Scalar>(method: Method<'_, T>, setup: &EvalSetup) -> Result<MetricRow> {
    if setup.entries.is_empty() {
        return Err(Error::Contract("evaluation manifest is empty".into()));
    }
    let run = |e: &ManifestEntry| {
        score_item(method, setup, e).unwrap_or_else(|err| Partial {
            seg: None,
            depth: None,
            failure: Some(format!("{} {} {}: {err}", e.city, e.sequence, e.target)),
        })
    };
    let partials: Vec<Partial> = if setup.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(setup.workers)
            .build()
            .map_err(|e| Error::Contract(e.to_string()))?;
        pool.install(|| setup.entries.par_iter().map(run).collect())
    } else {
        setup.entries.iter().map(run).collect()
    };

    let seg_spec = setup.modalities.iter().find(|m| m.name == SEGMENTATION);
    let mut seg = seg_spec.map(|m| ConfusionMatrix::new(m.num_labels, setup.ignore_label));
    let mut depth = DepthAccumulator::new(setup.denominator);
    let mut failures = Vec::new();
    let mut items = 0;
    for p in partials {
        if let Some(f) = p.failure {
            failures.push(f);
            continue;
        }
        items += 1;
        if let (Some(total), Some(cm)) = (seg.as_mut(), p.seg.as_ref()) {
            total.merge(cm)?;
        }
        if let Some(d) = &p.depth {
            depth.merge(d);
        }
    }
    let movable = seg_spec
        .and_then(|m| m.movable_label_ids.clone())
        .unwrap_or_else(|| crate::config::CITYSCAPES_MOVABLE.into_iter().collect());
    let dm = depth.metrics();
    Ok(MetricRow {
        method: method.name().to_string(),
        horizon: setup.horizon,
        miou_all: seg.as_ref().and_then(|c| c.miou(None)),
        miou_movable: seg.as_ref().and_then(|c| c.miou(Some(&movable))),
        delta1: dm.map(|d| d.delta1),
        abs_rel: dm.map(|d| d.abs_rel),
        items,
        failures,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,horizon,ALL,MO,delta1,AbsRel,items,failed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.method,
                r.horizon,
                cell(r.miou_all),
                cell(r.miou_movable),
                cell(r.delta1),
                cell(r.abs_rel),
                r.items,
                r.failures.len()
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<7} {:>8} {:>8} {:>8} {:>8} {:>7}",
            "method", "horizon", "ALL", "MO", "delta1", "AbsRel", "items"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:<7} {:>8} {:>8} {:>8} {:>8} {:>7}",
                r.method,
                r.horizon.as_str(),
                cell(r.miou_all),
                cell(r.miou_movable),
                cell(r.delta1),
                cell(r.abs_rel),
                r.items
            );
            for f in &r.failures {
                let _ = writeln!(s, "  incomplete: {f}");
            }
        }
        s
    }
}

/// Cityscapes train-id colours.
pub const CITYSCAPES_PALETTE: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

pub fn palette_color(label: u16) -> [u8; 3] {
    CITYSCAPES_PALETTE.get(label as usize).copied().unwrap_or([0, 0, 0])
}

/// Polynomial fit of the turbo colormap, `x` in [0, 1].
pub fn turbo(x: f64) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0);
    let p = [1.0, x, x * x, x * x * x, x.powi(4), x.powi(5)];
    let dot = |c: [f64; 6]| -> u8 {
        let v: f64 = c.iter().zip(&p).map(|(a, b)| a * b).sum();
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    [
        dot([0.135_721_38, 4.615_392_6, -42.660_322_58, 132.131_082_34, -152.942_393_96, 59.286_379_43]),
        dot([0.091_402_61, 2.194_188_39, 4.842_966_58, -14.185_033_33, 4.277_298_57, 2.829_566_04]),
        dot([0.106_673_3, 12.641_946_08, -60.582_048_36, 110.362_767_71, -89.903_109_12, 27.348_249_73]),
    ]
}

pub fn colorize_segmentation(map: &LabelMap) -> Vec<u8> {
    map.labels.iter().flat_map(palette_color).collect()
}

pub fn colorize_depth(map: &LabelMap, num_bins: usize) -> Vec<u8> {
    let top = (num_bins.max(2) - 1) as f64;
    map.labels.iter().flat_map(|b| turbo(b as f64 / top)).collect()
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::load(path, e.to_string());
    let mut w = enc.write_header().map_err(err)?;
    w.write_image_data(rgb).map_err(err)?;
    w.finish().map_err(err)?;
    Ok(())
}

/// Colour image for a predicted map: palette for segmentation, turbo otherwise.
pub fn write_colorized(path: &Path, spec: &ModalitySpec, map: &LabelMap) -> Result<()> {
    let rgb = if spec.name == SEGMENTATION {
        colorize_segmentation(map)
    } else {
        colorize_depth(map, spec.num_labels)
    };
    write_rgb_png(path, map.width, map.height, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[u16]) -> LabelMap {
        LabelMap::from_values(h, w, v, 255).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let v = miou(&map(2, 2, &[0, 0, 1, 1]), &map(2, 2, &[0, 1, 1, 1]), 2, None, None)
            .unwrap()
            .unwrap();
        assert!((v - 100.0 * (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(format!("{v:.2}"), "58.33");
    }

    #[test]
    fn absent_prediction_class_scores_zero() {
        let subset: BTreeSet<u32> = [3, 5].into();
        let v = miou(&map(2, 2, &[3; 4]), &map(2, 2, &[5; 4]), 8, None, Some(&subset)).unwrap();
        assert_eq!(v, Some(0.0));
    }

    #[test]
    fn no_evaluable_class_is_none() {
        let subset: BTreeSet<u32> = [7].into();
        assert_eq!(miou(&map(1, 2, &[0, 1]), &map(1, 2, &[0, 1]), 8, None, Some(&subset)).unwrap(), None);
        assert_eq!(miou(&map(1, 2, &[0, 1]), &map(1, 2, &[4, 4]), 8, Some(4), None).unwrap(), None);
    }

    #[test]
    fn depth_hand_cases() {
        let m = depth_metrics_values(&[0.4], &[0.5], AbsRelDenominator::Pred).unwrap().unwrap();
        assert_eq!(m.abs_rel, 25.0);
        assert_eq!(m.delta1, 0.0);
        let same = depth_metrics(&map(1, 3, &[3, 90, 255]), &map(1, 3, &[3, 90, 255]), 256, AbsRelDenominator::Pred)
            .unwrap()
            .unwrap();
        assert_eq!((same.abs_rel, same.delta1), (0.0, 100.0));
        let doubled = depth_metrics_values(&[0.2, 0.6], &[0.1, 0.3], AbsRelDenominator::Gt).unwrap().unwrap();
        assert_eq!(doubled.delta1, 0.0);
    }

    #[test]
    fn zero_disparity_is_floored() {
        let m = depth_metrics_values(&[0.0], &[0.0], AbsRelDenominator::Pred).unwrap().unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert!(depth_metrics_values(&[0.0], &[1.0], AbsRelDenominator::Pred).unwrap().unwrap().abs_rel.is_finite());
    }

    #[test]
    fn palette_and_turbo_endpoints() {
        assert_eq!(palette_color(13), [0, 0, 142]);
        let lo = turbo(0.15);
        let hi = turbo(0.9);
        assert!(lo[2] > lo[0], "turbo starts blue-ish: {lo:?}");
        assert!(hi[0] > hi[2], "turbo ends red-ish: {hi:?}");
    }
}
