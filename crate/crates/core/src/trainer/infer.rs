use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{Graph, ParamSet};
use crate::detect::{postprocess, propose, roi_forward, rpn_forward, AnchorSet, DetectConfig, Detection};
use crate::error::{Result, SfaError};
use crate::hsi::{AnnotatedSample, HyperCube};
use crate::ssam::{read_checkpoint, ssam_forward, write_checkpoint, ForwardOptions, SsamConfig};

/// Trained parameters with the layer sizes and detection thresholds needed
/// to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParamSet,
    pub ssam: SsamConfig,
    pub detect: DetectConfig,
}

impl Model {
    /// Loads a checkpoint; layer sizes come from the stored tensors and the
    /// thresholds from `detect`.
    pub fn load(path: impl AsRef<Path>, detect: DetectConfig) -> Result<Self> {
        let params = read_checkpoint(path)?;
        let ssam = SsamConfig::from_params(&params)?;
        let detect = detect.with_params(&params);
        Ok(Model { params, ssam, detect })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(&self.params, path)
    }

    /// Encoder, FPN, RPN proposals, RoI head and NMS on one cube.
    pub fn detect_cube(&self, image_id: u64, cube: &HyperCube) -> Result<Vec<Detection>> {
        if cube.bands() != self.ssam.bands {
            return Err(SfaError::BandMismatch {
                expected: self.ssam.bands,
                found: cube.bands(),
            });
        }
        let (h, w) = (cube.height(), cube.width());
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(cube.standardized_tensor());
        let out = ssam_forward(&mut g, &p, x, &self.ssam, ForwardOptions::INFERENCE)?;
        let rpn = rpn_forward(&mut g, &p, &out.fpn)?;
        let anchors = AnchorSet::new(h, w);
        let proposals = propose(&g, &rpn, &anchors, 1, (h, w), &self.detect, self.detect.rpn_post_nms_test);
        let rois: Vec<_> = proposals[0].iter().map(|&(b, _)| (0, b)).collect();
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let roi = roi_forward(&mut g, &p, &out.fpn, &rois, &self.detect)?;
        Ok(postprocess(&g, &roi, &rois, &[image_id], (h, w), &self.detect).remove(0))
    }
}

/// Detections for each `(image id, cube)`, in input order. Images are
/// processed in parallel on the current rayon pool.
pub fn infer(model: &Model, cubes: &[(u64, &HyperCube)]) -> Result<Vec<Vec<Detection>>> {
    cubes.par_iter().map(|&(id, c)| model.detect_cube(id, c)).collect()
}

/// Runs [`infer`] on samples without touching their labels.
pub fn infer_samples(model: &Model, samples: &[AnnotatedSample]) -> Result<Vec<Vec<Detection>>> {
    let cubes: Vec<(u64, &HyperCube)> = samples.iter().map(|s| (s.id, s.cube())).collect();
    infer(model, &cubes)
}
