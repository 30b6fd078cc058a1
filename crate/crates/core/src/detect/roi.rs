use rand::seq::SliceRandom;
use rand::Rng;

use super::anchors::{decode, encode, fpn_level_for, Anchor, LEVEL_STRIDES};
use super::{nms, DetectConfig, Detection};
use crate::autodiff::{BoundParams, Graph, RoiRegion, Var};
use crate::boxes::{iou, BBox};
use crate::error::{Result, SfaError};
use crate::nn;

/// Usual second-stage regression scaling.
pub const ROI_DELTA_WEIGHTS: [f32; 4] = [10.0, 10.0, 5.0, 5.0];
const ROI_SMOOTH_L1_BETA: f32 = 1.0;

fn as_anchor(b: &BBox) -> Anchor {
    Anchor {
        cx: b.cx(),
        cy: b.cy(),
        w: b.w.max(1e-3),
        h: b.h.max(1e-3),
    }
}

/// One training RoI: a box, its class (0 for background) and, for
/// foreground, the regression target towards the matched gt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSample {
    pub batch: usize,
    pub bbox: BBox,
    pub label: usize,
    pub target: [f32; 4],
}

/// Samples training RoIs from proposals plus the gt boxes themselves.
///
/// Candidates with IoU ≥ `roi_fg_iou` to some gt take that gt's class,
/// the rest are background. At most `roi_batch` per image with foreground
/// capped at `roi_pos_fraction` of it.
pub fn sample_rois(
    proposals: &[Vec<(BBox, f32)>],
    gt: &[Vec<(BBox, usize)>],
    cfg: &DetectConfig,
    rng: &mut impl Rng,
) -> Vec<RoiSample> {
    let mut out = Vec::new();
    for (b, (props, objects)) in proposals.iter().zip(gt).enumerate() {
        let cands = objects.iter().map(|o| o.0).chain(props.iter().map(|p| p.0));
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for bbox in cands {
            let best = objects
                .iter()
                .map(|o| (iou(&bbox, &o.0), o))
                .fold(None, |acc: Option<(f64, &(BBox, usize))>, x| match acc {
                    Some(a) if a.0 >= x.0 => Some(a),
                    _ => Some(x),
                });
            match best {
                Some((v, &(gbox, class))) if v >= cfg.roi_fg_iou as f64 => fg.push(RoiSample {
                    batch: b,
                    bbox,
                    label: class,
                    target: encode(&gbox, &as_anchor(&bbox), ROI_DELTA_WEIGHTS),
                }),
                _ => bg.push(RoiSample {
                    batch: b,
                    bbox,
                    label: 0,
                    target: [0.0; 4],
                }),
            }
        }
        fg.shuffle(rng);
        bg.shuffle(rng);
        fg.truncate((cfg.roi_batch as f32 * cfg.roi_pos_fraction).floor().max(1.0) as usize);
        bg.truncate(cfg.roi_batch.saturating_sub(fg.len()));
        out.extend(fg);
        out.extend(bg);
    }
    out
}

/// Class logits R×(K+1) and per-class deltas R×4(K+1). Row `r` belongs to
/// input box `rows[r]`: boxes are grouped by FPN level for pooling.
#[derive(Clone, Debug)]
pub struct RoiOutput {
    pub rows: Vec<usize>,
    pub logits: Var,
    pub deltas: Var,
}

/// A list of `(batch index, box)` pairs in image pixels.
pub type RoiBatch = [(usize, BBox)];

pub fn roi_forward(g: &mut Graph, p: &BoundParams, fpn: &[Var; 3], rois: &RoiBatch, cfg: &DetectConfig) -> Result<RoiOutput> {
    if rois.is_empty() {
        return Err(SfaError::InvalidConfig("RoI head needs at least one box".into()));
    }
    let mut rows: Vec<usize> = (0..rois.len()).collect();
    rows.sort_by_key(|&i| fpn_level_for(&rois[i].1));
    let mut pooled = Vec::new();
    for level in 0..3 {
        let stride = LEVEL_STRIDES[level] as f32;
        let regions: Vec<RoiRegion> = rows
            .iter()
            .filter(|&&i| fpn_level_for(&rois[i].1) == level)
            .map(|&i| {
                let (batch, b) = rois[i];
                // Pixel centres sit half a cell into the feature map.
                RoiRegion {
                    batch,
                    x0: b.x / stride - 0.5,
                    y0: b.y / stride - 0.5,
                    x1: b.x1() / stride - 0.5,
                    y1: b.y1() / stride - 0.5,
                }
            })
            .collect();
        if !regions.is_empty() {
            pooled.push(g.roi_align(fpn[level], regions, cfg.roi_size, cfg.roi_samples)?);
        }
    }
    let feats = if pooled.len() == 1 { pooled[0] } else { g.concat0(&pooled)? };
    let shape = g.shape(feats).to_vec();
    let flat = g.reshape(feats, &[shape[0], shape[1..].iter().product()])?;
    let h1 = nn::linear(g, p, "roi.fc1", flat)?;
    let a1 = g.relu(h1);
    let h2 = nn::linear(g, p, "roi.fc2", a1)?;
    let a2 = g.relu(h2);
    let logits = nn::linear(g, p, "roi.cls", a2)?;
    let deltas = nn::linear(g, p, "roi.reg", a2)?;
    Ok(RoiOutput { rows, logits, deltas })
}

/// Mean cross-entropy over all RoIs plus smooth-L1 on foreground deltas of
/// the true class, normalized by the RoI count.
pub fn roi_loss(g: &mut Graph, out: &RoiOutput, samples: &[RoiSample]) -> Result<Var> {
    let k = g.shape(out.logits)[1];
    let r = out.rows.len();
    let ls = g.log_softmax(out.logits)?;
    let picks = out.rows.iter().enumerate().map(|(row, &i)| row * k + samples[i].label).collect();
    let picked = g.gather(ls, picks)?;
    let sum = g.sum(picked);
    let ce = g.scale(sum, -1.0 / r as f32);
    let mut idx = Vec::new();
    let mut target = Vec::new();
    for (row, &i) in out.rows.iter().enumerate() {
        let s = &samples[i];
        if s.label > 0 {
            idx.extend((0..4).map(|c| row * 4 * k + s.label * 4 + c));
            target.extend_from_slice(&s.target);
        }
    }
    if idx.is_empty() {
        return Ok(ce);
    }
    let d = g.gather(out.deltas, idx)?;
    let sl = g.smooth_l1(d, target, ROI_SMOOTH_L1_BETA)?;
    let reg_sum = g.sum(sl);
    let reg = g.scale(reg_sum, 1.0 / r as f32);
    Ok(g.add(ce, reg)?)
}

/// Turns RoI head outputs into final detections per image: softmax scores,
/// per-class box decoding, score floor, per-class NMS and a top-k cap.
pub fn postprocess(
    g: &Graph,
    out: &RoiOutput,
    rois: &RoiBatch,
    image_ids: &[u64],
    image: (usize, usize),
    cfg: &DetectConfig,
) -> Vec<Vec<Detection>> {
    let k = g.shape(out.logits)[1];
    let logits = g.value(out.logits).data();
    let deltas = g.value(out.deltas).data();
    let mut per_image: Vec<Vec<Vec<Detection>>> = vec![vec![Vec::new(); k]; image_ids.len()];
    for (row, &i) in out.rows.iter().enumerate() {
        let (batch, rbox) = rois[i];
        let z = &logits[row * k..(row + 1) * k];
        let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f64> = z.iter().map(|&v| ((v - m) as f64).exp()).collect();
        let total: f64 = e.iter().sum();
        for c in 1..k {
            let score = (e[c] / total) as f32;
            if score < cfg.score_floor {
                continue;
            }
            let d: [f32; 4] = std::array::from_fn(|j| deltas[row * 4 * k + c * 4 + j]);
            let bbox = decode(d, &as_anchor(&rbox), ROI_DELTA_WEIGHTS).clip(image.1 as f32, image.0 as f32);
            if bbox.w > 0.0 && bbox.h > 0.0 && bbox.is_finite() {
                per_image[batch][c].push(Detection {
                    image_id: image_ids[batch],
                    bbox,
                    score,
                    category_id: c,
                });
            }
        }
    }
    per_image
        .into_iter()
        .map(|classes| {
            let mut all: Vec<Detection> = classes.into_iter().flat_map(|d| nms(d, cfg.nms_iou)).collect();
            all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.category_id.cmp(&b.category_id)));
            all.truncate(cfg.max_detections);
            all
        })
        .collect()
}
