use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{HsiError, HyperCube};
use crate::boxes::BBox;

/// One labelled object: a box and a class index in `1..=N_c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: BBox,
    pub class: usize,
}

/// Who is asking for labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelAccess {
    /// Any code path that feeds an optimizer.
    Training,
    /// Scoring detections after training.
    Evaluation,
}

/// A cube with its objects.
///
/// Target-domain samples are marked held out: their labels exist for the
/// evaluator only, and [`AnnotatedSample::labels`] refuses them to training
/// code. An optional tripwire counts every label read regardless of outcome.
#[derive(Clone, Debug)]
pub struct AnnotatedSample {
    pub id: u64,
    cube: HyperCube,
    objects: Vec<Object>,
    held_out: bool,
    tripwire: Option<Arc<AtomicUsize>>,
}

impl AnnotatedSample {
    pub fn new(id: u64, cube: HyperCube, objects: Vec<Object>) -> Result<Self, HsiError> {
        for o in &objects {
            validate_box(id, &o.bbox, cube.width(), cube.height())?;
            if o.class == 0 {
                return Err(HsiError::BadCategory { image_id: id, category_id: 0 });
            }
        }
        Ok(AnnotatedSample {
            id,
            cube,
            objects,
            held_out: false,
            tripwire: None,
        })
    }

    pub fn cube(&self) -> &HyperCube {
        &self.cube
    }

    pub fn into_cube(self) -> HyperCube {
        self.cube
    }

    pub fn is_held_out(&self) -> bool {
        self.held_out
    }

    pub fn set_held_out(&mut self, held_out: bool) {
        self.held_out = held_out;
    }

    pub fn held_out(mut self) -> Self {
        self.held_out = true;
        self
    }

    /// Installs a counter bumped on every call to [`Self::labels`].
    pub fn set_tripwire(&mut self, wire: Arc<AtomicUsize>) {
        self.tripwire = Some(wire);
    }

    pub fn labels(&self, access: LabelAccess) -> Result<&[Object], HsiError> {
        if let Some(w) = &self.tripwire {
            w.fetch_add(1, Ordering::SeqCst);
        }
        if self.held_out && access == LabelAccess::Training {
            return Err(HsiError::HeldOutLabels(self.id));
        }
        Ok(&self.objects)
    }

    /// Same sample with the cube replaced (e.g. after band matching).
    pub fn with_cube(&self, cube: HyperCube) -> Result<Self, HsiError> {
        if cube.width() != self.cube.width() || cube.height() != self.cube.height() {
            return Err(HsiError::Mismatch(format!(
                "replacement cube is {}x{}, sample {} is {}x{}",
                cube.width(),
                cube.height(),
                self.id,
                self.cube.width(),
                self.cube.height()
            )));
        }
        Ok(AnnotatedSample {
            id: self.id,
            cube,
            objects: self.objects.clone(),
            held_out: self.held_out,
            tripwire: self.tripwire.clone(),
        })
    }
}

pub(crate) fn validate_box(image_id: u64, b: &BBox, width: usize, height: usize) -> Result<(), HsiError> {
    if !b.is_finite() || b.w <= 0.0 || b.h <= 0.0 {
        return Err(HsiError::DegenerateBox { image_id, bbox: b.to_array() });
    }
    if b.x < 0.0 || b.y < 0.0 || b.x1() > width as f32 || b.y1() > height as f32 {
        return Err(HsiError::BoxOutOfBounds {
            image_id,
            bbox: b.to_array(),
            width,
            height,
        });
    }
    Ok(())
}
