//! Anchor-based detection heads on the FPN: a light RPN shared across levels
//! and an RoI head with per-class box refinement.

mod anchors;
mod nms;
mod roi;
mod rpn;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::boxes::BBox;
use crate::kv::kv_fields;
use crate::nn;

pub use anchors::{decode, encode, fpn_level_for, Anchor, AnchorSet, ANCHOR_RATIOS, LEVEL_STRIDES};
pub use nms::nms;
pub use roi::{postprocess, roi_forward, roi_loss, sample_rois, RoiBatch, RoiOutput, RoiSample, ROI_DELTA_WEIGHTS};
pub use rpn::{propose, rpn_forward, rpn_labels, rpn_loss, AnchorLabel, RpnOutput, RPN_DELTA_WEIGHTS};

/// Thresholds and sizes for both heads. Defaults follow the usual Faster
/// R-CNN settings scaled to small crops.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    pub num_classes: usize,
    pub rpn_pos_iou: f32,
    pub rpn_neg_iou: f32,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f32,
    pub rpn_pre_nms: usize,
    pub rpn_nms_iou: f32,
    pub rpn_post_nms_train: usize,
    pub rpn_post_nms_test: usize,
    pub roi_batch: usize,
    pub roi_pos_fraction: f32,
    pub roi_fg_iou: f32,
    pub roi_size: usize,
    pub roi_samples: usize,
    pub roi_hidden: usize,
    pub nms_iou: f32,
    pub score_floor: f32,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            num_classes: 1,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 32,
            rpn_pos_fraction: 0.5,
            rpn_pre_nms: 300,
            rpn_nms_iou: 0.7,
            rpn_post_nms_train: 64,
            rpn_post_nms_test: 100,
            roi_batch: 64,
            roi_pos_fraction: 0.25,
            roi_fg_iou: 0.5,
            roi_size: 4,
            roi_samples: 2,
            roi_hidden: 128,
            nms_iou: 0.5,
            score_floor: 0.05,
            max_detections: 100,
        }
    }
}

kv_fields!(DetectConfig {
    num_classes,
    rpn_pos_iou,
    rpn_neg_iou,
    rpn_batch,
    rpn_pos_fraction,
    rpn_pre_nms,
    rpn_nms_iou,
    rpn_post_nms_train,
    rpn_post_nms_test,
    roi_batch,
    roi_pos_fraction,
    roi_fg_iou,
    roi_size,
    roi_samples,
    roi_hidden,
    nms_iou,
    score_floor,
    max_detections,
});

impl DetectConfig {
    /// Recovers the structural fields from stored head parameters.
    pub fn with_params(mut self, params: &ParamSet) -> Self {
        if let Some(cls) = params.get("roi.cls.w") {
            self.num_classes = cls.shape()[1] - 1;
        }
        if let Some(fc) = params.get("roi.fc1.w") {
            self.roi_hidden = fc.shape()[1];
            if let Some(lat) = params.get("fpn.lat1.w") {
                let c = lat.shape()[0];
                let bins = fc.shape()[0] / c.max(1);
                self.roi_size = (bins as f64).sqrt().round() as usize;
            }
        }
        self
    }
}

/// Adds the RPN and RoI head parameters.
pub fn init_detect(params: &mut ParamSet, fpn_width: usize, cfg: &DetectConfig, rng: &mut impl Rng) {
    let a = ANCHOR_RATIOS.len();
    nn::init_conv(params, "rpn.conv", fpn_width, fpn_width, 3, nn::RELU_GAIN, rng);
    nn::init_conv(params, "rpn.obj", a, fpn_width, 1, 0.1, rng);
    nn::init_conv(params, "rpn.delta", 4 * a, fpn_width, 1, 0.1, rng);
    let k = cfg.num_classes + 1;
    let flat = fpn_width * cfg.roi_size * cfg.roi_size;
    nn::init_linear(params, "roi.fc1", flat, cfg.roi_hidden, nn::RELU_GAIN, rng);
    nn::init_linear(params, "roi.fc2", cfg.roi_hidden, cfg.roi_hidden, nn::RELU_GAIN, rng);
    nn::init_linear(params, "roi.cls", cfg.roi_hidden, k, 0.1, rng);
    nn::init_linear(params, "roi.reg", cfg.roi_hidden, 4 * k, 0.01, rng);
}

/// One scored box. `category_id` is 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    #[serde(with = "crate::boxes::as_array")]
    pub bbox: BBox,
    pub score: f32,
    pub category_id: usize,
}

/// Serializes detections as a JSON array of
/// `{"image_id", "bbox": [x,y,w,h], "score", "category_id"}`.
pub fn detections_to_json(dets: &[Detection]) -> String {
    serde_json::to_string_pretty(dets).expect("detections always serialize")
}

pub fn detections_from_json(text: &str) -> Result<Vec<Detection>, serde_json::Error> {
    serde_json::from_str(text)
}
