//! COCO-style AP/AR with size buckets.
//!
//! Per category, area range and IoU threshold, detections are matched
//! greedily by descending score to the unmatched ground truth of highest
//! IoU. Precision is interpolated at 101 recall points and AR is the final
//! recall, both with at most 100 detections per image and category.
//! Metrics with no ground truth behind them are reported as `None`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::boxes::{iou, BBox};
use crate::detect::Detection;
use crate::error::{Result, SfaError};
use crate::hsi::{AnnotatedSample, Category, LabelAccess, Object};

pub const SMALL_MAX_AREA: f32 = 1024.0;
pub const MEDIUM_MAX_AREA: f32 = 9216.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

/// `small` below 32², `medium` up to but excluding 96², `large` from 96².
pub fn size_bucket(b: &BBox) -> SizeBucket {
    let a = b.area();
    if a < SMALL_MAX_AREA {
        SizeBucket::Small
    } else if a < MEDIUM_MAX_AREA {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AreaRange {
    All,
    Only(SizeBucket),
}

impl AreaRange {
    fn contains(self, b: &BBox) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Only(s) => size_bucket(b) == s,
        }
    }
}

const AREA_RANGES: [AreaRange; 4] = [
    AreaRange::All,
    AreaRange::Only(SizeBucket::Small),
    AreaRange::Only(SizeBucket::Medium),
    AreaRange::Only(SizeBucket::Large),
];

/// Ground truth of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub objects: Vec<Object>,
}

impl GroundTruth {
    pub fn from_sample(s: &AnnotatedSample) -> Result<Self> {
        Ok(GroundTruth {
            image_id: s.id,
            objects: s.labels(LabelAccess::Evaluation)?.to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_points: 101,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub category_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
    pub ar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar: Option<f64>,
    pub ar_small: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ar_large: Option<f64>,
    pub per_class: Vec<ClassReport>,
}

/// Matching outcome of one image at one threshold: per kept detection
/// (score, matched, ignored), plus the count of non-ignored gt.
struct ImageMatch {
    dets: Vec<(f32, bool, bool)>,
    num_gt: usize,
}

fn match_image(dets: &[&Detection], gts: &[BBox], range: AreaRange, thresholds: &[f64]) -> Vec<ImageMatch> {
    // Non-ignored gt first, otherwise in input order.
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| !range.contains(&gts[g]));
    let gts: Vec<BBox> = order.iter().map(|&g| gts[g]).collect();
    let gt_ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g)).collect();
    let num_gt = gt_ignored.iter().filter(|&&i| !i).count();
    let ious: Vec<Vec<f64>> = dets.iter().map(|d| gts.iter().map(|g| iou(&d.bbox, g)).collect()).collect();
    thresholds
        .iter()
        .map(|&t| {
            let mut gt_taken = vec![false; gts.len()];
            let out = dets
                .iter()
                .enumerate()
                .map(|(di, d)| {
                    let mut best = t.min(1.0 - 1e-10);
                    let mut m: Option<usize> = None;
                    for g in 0..gts.len() {
                        if gt_taken[g] {
                            continue;
                        }
                        // Once a real match exists, ignored gt cannot replace it.
                        if matches!(m, Some(mm) if !gt_ignored[mm]) && gt_ignored[g] {
                            break;
                        }
                        if ious[di][g] < best {
                            continue;
                        }
                        best = ious[di][g];
                        m = Some(g);
                    }
                    match m {
                        Some(g) => {
                            gt_taken[g] = true;
                            (d.score, true, gt_ignored[g])
                        }
                        None => (d.score, false, !range.contains(&d.bbox)),
                    }
                })
                .collect();
            ImageMatch { dets: out, num_gt }
        })
        .collect()
}

/// Interpolated precision at each recall point and final recall, or `None`
/// when there is no non-ignored gt.
fn accumulate(images: &[&ImageMatch], recall_points: usize) -> Option<(Vec<f64>, f64)> {
    let num_gt: usize = images.iter().map(|m| m.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut all: Vec<(f32, bool, bool)> = images.iter().flat_map(|m| m.dets.iter().copied()).collect();
    // Stable, so ties keep image then rank order.
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for &(_, matched, ignored) in &all {
        if ignored {
            continue;
        }
        if matched {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let q = (0..recall_points)
        .map(|ri| {
            let r = ri as f64 / (recall_points - 1).max(1) as f64;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    Some((q, recall.last().copied().unwrap_or(0.0)))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn validate(dets: &[Detection], gt: &[GroundTruth]) -> Result<()> {
    let mut ids = HashSet::new();
    for g in gt {
        if !ids.insert(g.image_id) {
            return Err(SfaError::Eval(format!("duplicate ground-truth image id {}", g.image_id)));
        }
    }
    let mut seen = HashSet::new();
    for d in dets {
        if !ids.contains(&d.image_id) {
            return Err(SfaError::Eval(format!("detection for unknown image id {}", d.image_id)));
        }
        if !d.score.is_finite() || !d.bbox.is_finite() {
            return Err(SfaError::Eval(format!("non-finite detection on image {}", d.image_id)));
        }
        let key = (d.image_id, d.category_id, d.score.to_bits(), d.bbox.to_array().map(f32::to_bits));
        if !seen.insert(key) {
            return Err(SfaError::Eval(format!(
                "duplicate detection on image {} (category {}, score {})",
                d.image_id, d.category_id, d.score
            )));
        }
    }
    Ok(())
}

/// Per category and area range: precision table `[t][r]` and recall `[t]`.
type CategoryStats = Vec<Option<(Vec<f64>, f64)>>;

pub fn evaluate(dets: &[Detection], gt: &[GroundTruth], categories: &[Category], cfg: &EvalConfig) -> Result<EvalReport> {
    validate(dets, gt)?;
    let mut by_image: BTreeMap<(u64, usize), Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry((d.image_id, d.category_id)).or_default().push(d);
    }
    for v in by_image.values_mut() {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v.truncate(cfg.max_detections);
    }
    let mut cat_ids: Vec<usize> = categories.iter().map(|c| c.id).collect();
    for g in gt {
        cat_ids.extend(g.objects.iter().map(|o| o.class));
    }
    cat_ids.extend(dets.iter().map(|d| d.category_id));
    cat_ids.sort_unstable();
    cat_ids.dedup();

    let empty = Vec::new();
    // stats[c][a][t]
    let stats: Vec<Vec<CategoryStats>> = cat_ids
        .iter()
        .map(|&c| {
            AREA_RANGES
                .iter()
                .map(|&range| {
                    let per_image: Vec<Vec<ImageMatch>> = gt
                        .par_iter()
                        .map(|g| {
                            let boxes: Vec<BBox> = g.objects.iter().filter(|o| o.class == c).map(|o| o.bbox).collect();
                            let d = by_image.get(&(g.image_id, c)).unwrap_or(&empty);
                            match_image(d, &boxes, range, &cfg.iou_thresholds)
                        })
                        .collect();
                    (0..cfg.iou_thresholds.len())
                        .map(|t| {
                            let at_t: Vec<&ImageMatch> = per_image.iter().map(|m| &m[t]).collect();
                            accumulate(&at_t, cfg.recall_points)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let stats = &stats;
    let ap_over = |a: usize, classes: &[usize], ts: &[usize]| {
        let mut values = Vec::new();
        for &c in classes {
            for &t in ts {
                if let Some((q, _)) = &stats[c][a][t] {
                    values.extend_from_slice(q);
                }
            }
        }
        mean(values.into_iter())
    };
    let ar_over = |a: usize, classes: &[usize]| {
        mean(classes.iter().flat_map(|&c| stats[c][a].iter().filter_map(|s| s.as_ref().map(|(_, r)| *r))))
    };
    let all_t: Vec<usize> = (0..cfg.iou_thresholds.len()).collect();
    let t50: Vec<usize> = cfg
        .iou_thresholds
        .iter()
        .position(|&t| (t - 0.5).abs() < 1e-9)
        .into_iter()
        .collect();
    let all_c: Vec<usize> = (0..cat_ids.len()).collect();

    let per_class = cat_ids
        .iter()
        .enumerate()
        .map(|(ci, &id)| ClassReport {
            category_id: id,
            name: categories.iter().find(|c| c.id == id).map(|c| c.name.clone()).unwrap_or_default(),
            num_gt: gt.iter().flat_map(|g| &g.objects).filter(|o| o.class == id).count(),
            ap50: ap_over(0, &[ci], &t50),
            ap: ap_over(0, &[ci], &all_t),
            ar: ar_over(0, &[ci]),
        })
        .collect();

    Ok(EvalReport {
        ap50: ap_over(0, &all_c, &t50),
        ap: ap_over(0, &all_c, &all_t),
        ap_small: ap_over(1, &all_c, &all_t),
        ap_medium: ap_over(2, &all_c, &all_t),
        ap_large: ap_over(3, &all_c, &all_t),
        ar: ar_over(0, &all_c),
        ar_small: ar_over(1, &all_c),
        ar_medium: ar_over(2, &all_c),
        ar_large: ar_over(3, &all_c),
        per_class,
    })
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}%", 100.0 * x),
        None => "N/A".to_string(),
    }
}

impl EvalReport {
    pub fn headline(&self) -> [(&'static str, Option<f64>); 9] {
        [
            ("AP50", self.ap50),
            ("AP", self.ap),
            ("AP_small", self.ap_small),
            ("AP_medium", self.ap_medium),
            ("AP_large", self.ap_large),
            ("AR", self.ar),
            ("AR_small", self.ar_small),
            ("AR_medium", self.ar_medium),
            ("AR_large", self.ar_large),
        ]
    }

    /// Aligned text table with one header row and one value row, followed
    /// by a per-class block.
    pub fn to_table(&self, label: &str) -> String {
        let cols = self.headline();
        let first = label.len().max(5);
        let mut out = format!("{:first$}", "");
        for (name, _) in &cols {
            let _ = write!(out, "  {name:>10}");
        }
        out.push('\n');
        let _ = write!(out, "{label:first$}");
        for (_, v) in &cols {
            let _ = write!(out, "  {:>10}", cell(*v));
        }
        out.push('\n');
        if !self.per_class.is_empty() {
            let _ = writeln!(out, "\n{:>8}  {:<12}  {:>6}  {:>10}  {:>10}  {:>10}", "class", "name", "gt", "AP50", "AP", "AR");
            for c in &self.per_class {
                let _ = writeln!(
                    out,
                    "{:>8}  {:<12}  {:>6}  {:>10}  {:>10}  {:>10}",
                    c.category_id,
                    c.name,
                    c.num_gt,
                    cell(c.ap50),
                    cell(c.ap),
                    cell(c.ar)
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }
}
