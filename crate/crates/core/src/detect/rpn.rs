use rand::seq::SliceRandom;
use rand::Rng;

use super::anchors::{decode, encode, AnchorSet, ANCHOR_RATIOS};
use super::{nms, DetectConfig, Detection};
use crate::autodiff::{BoundParams, Graph, Var};
use crate::boxes::{iou, BBox};
use crate::error::Result;
use crate::nn;

/// RPN regression targets are unscaled.
pub const RPN_DELTA_WEIGHTS: [f32; 4] = [1.0; 4];
const RPN_SMOOTH_L1_BETA: f32 = 1.0 / 9.0;

/// Per-level head outputs: objectness N×A×H×W and deltas N×4A×H×W, where
/// delta channel `4a + k` holds coordinate `k` of ratio `a`.
#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub logits: [Var; 3],
    pub deltas: [Var; 3],
}

pub fn rpn_forward(g: &mut Graph, p: &BoundParams, fpn: &[Var; 3]) -> Result<RpnOutput> {
    let mut logits = [fpn[0]; 3];
    let mut deltas = [fpn[0]; 3];
    for (l, &f) in fpn.iter().enumerate() {
        let c = nn::conv(g, p, "rpn.conv", f, 1, 1)?;
        let h = g.relu(c);
        logits[l] = nn::conv(g, p, "rpn.obj", h, 1, 0)?;
        deltas[l] = nn::conv(g, p, "rpn.delta", h, 1, 0)?;
    }
    Ok(RpnOutput { logits, deltas })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the given ground-truth box.
    Positive(usize),
    Negative,
    Ignore,
}

/// Labels every anchor (global order) against `gt`.
///
/// Positive at IoU ≥ `pos_iou`, negative at IoU ≤ `neg_iou`, ignored in
/// between. Every gt box also claims the anchors with its highest IoU so no
/// object goes unmatched. With no gt all anchors are negative.
pub fn rpn_labels(anchors: &AnchorSet, gt: &[BBox], pos_iou: f32, neg_iou: f32) -> Vec<AnchorLabel> {
    let boxes: Vec<BBox> = anchors.iter().map(|a| a.to_box()).collect();
    if gt.is_empty() {
        return vec![AnchorLabel::Negative; boxes.len()];
    }
    let ious: Vec<Vec<f64>> = boxes.iter().map(|a| gt.iter().map(|b| iou(a, b)).collect()).collect();
    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|row| {
            let (best, v) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            if v >= pos_iou as f64 {
                AnchorLabel::Positive(best)
            } else if v <= neg_iou as f64 {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for j in 0..gt.len() {
        let best = ious.iter().map(|r| r[j]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (i, row) in ious.iter().enumerate() {
            if row[j] == best && !matches!(labels[i], AnchorLabel::Positive(_)) {
                labels[i] = AnchorLabel::Positive(j);
            }
        }
    }
    labels
}

#[derive(Default)]
struct LevelPicks {
    obj_index: Vec<usize>,
    obj_target: Vec<f32>,
    delta_index: Vec<usize>,
    delta_target: Vec<f32>,
}

/// Objectness BCE over sampled anchors plus smooth-L1 on the positives'
/// deltas, both normalized by the number of sampled anchors in the batch.
pub fn rpn_loss(
    g: &mut Graph,
    out: &RpnOutput,
    anchors: &AnchorSet,
    gt: &[Vec<BBox>],
    cfg: &DetectConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let a = ANCHOR_RATIOS.len();
    let mut picks: Vec<LevelPicks> = (0..3).map(|_| LevelPicks::default()).collect();
    let mut sampled = 0usize;
    for (b, boxes) in gt.iter().enumerate() {
        let labels = rpn_labels(anchors, boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
        let mut pos: Vec<usize> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            match l {
                AnchorLabel::Positive(_) => pos.push(i),
                AnchorLabel::Negative => neg.push(i),
                AnchorLabel::Ignore => {}
            }
        }
        pos.shuffle(rng);
        neg.shuffle(rng);
        let max_pos = (cfg.rpn_batch as f32 * cfg.rpn_pos_fraction).floor() as usize;
        pos.truncate(max_pos);
        neg.truncate(cfg.rpn_batch.saturating_sub(pos.len()));
        let mut chosen: Vec<(usize, bool)> = pos.iter().map(|&i| (i, true)).chain(neg.iter().map(|&i| (i, false))).collect();
        chosen.sort_unstable();
        sampled += chosen.len();
        for (i, positive) in chosen {
            let (level, li) = anchors.locate(i);
            let (h, w) = anchors.sizes[level];
            let hw = h * w;
            let pk = &mut picks[level];
            pk.obj_index.push(b * a * hw + li);
            pk.obj_target.push(if positive { 1.0 } else { 0.0 });
            if let (true, AnchorLabel::Positive(j)) = (positive, labels[i]) {
                let target = encode(&boxes[j], &anchors.levels[level][li], RPN_DELTA_WEIGHTS);
                let (ai, cell) = (li / hw, li % hw);
                for (k, t) in target.iter().enumerate() {
                    pk.delta_index.push((b * 4 * a + ai * 4 + k) * hw + cell);
                    pk.delta_target.push(*t);
                }
            }
        }
    }
    if sampled == 0 {
        let z = g.constant(crate::autodiff::Tensor::scalar(0.0));
        return Ok(z);
    }
    let mut terms = Vec::new();
    for (l, pk) in picks.into_iter().enumerate() {
        if !pk.obj_index.is_empty() {
            let x = g.gather(out.logits[l], pk.obj_index)?;
            let bce = g.bce_with_logits(x, pk.obj_target)?;
            terms.push(g.sum(bce));
        }
        if !pk.delta_index.is_empty() {
            let d = g.gather(out.deltas[l], pk.delta_index)?;
            let s = g.smooth_l1(d, pk.delta_target, RPN_SMOOTH_L1_BETA)?;
            terms.push(g.sum(s));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / sampled as f32))
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Decodes the top-scoring anchors of each image, clips them to the image,
/// drops boxes under one pixel and applies NMS. Scores are objectness
/// probabilities; at most `keep` boxes per image, best first.
pub fn propose(
    g: &Graph,
    out: &RpnOutput,
    anchors: &AnchorSet,
    batch: usize,
    image: (usize, usize),
    cfg: &DetectConfig,
    keep: usize,
) -> Vec<Vec<(BBox, f32)>> {
    let a = ANCHOR_RATIOS.len();
    let (ih, iw) = (image.0 as f32, image.1 as f32);
    (0..batch)
        .map(|b| {
            let mut cands: Vec<(f32, usize, usize)> = Vec::new();
            for l in 0..3 {
                let (h, w) = anchors.sizes[l];
                let hw = h * w;
                let logits = &g.value(out.logits[l]).data()[b * a * hw..(b + 1) * a * hw];
                cands.extend(logits.iter().enumerate().map(|(i, &z)| (z, l, i)));
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
            cands.truncate(cfg.rpn_pre_nms);
            let mut dets = Vec::with_capacity(cands.len());
            for (z, l, i) in cands {
                let (h, w) = anchors.sizes[l];
                let hw = h * w;
                let deltas = g.value(out.deltas[l]).data();
                let (ai, cell) = (i / hw, i % hw);
                let d: [f32; 4] = std::array::from_fn(|k| deltas[(b * 4 * a + ai * 4 + k) * hw + cell]);
                let bbox = decode(d, &anchors.levels[l][i], RPN_DELTA_WEIGHTS).clip(iw, ih);
                if bbox.w >= 1.0 && bbox.h >= 1.0 && bbox.is_finite() {
                    dets.push(Detection {
                        image_id: b as u64,
                        bbox,
                        score: sigmoid(z),
                        category_id: 0,
                    });
                }
            }
            let mut kept = nms(dets, cfg.rpn_nms_iou);
            kept.truncate(keep);
            kept.into_iter().map(|d| (d.bbox, d.score)).collect()
        })
        .collect()
}
