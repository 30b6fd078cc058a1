//! COCO-flavoured JSON annotations and on-disk dataset directories.
//!
//! A dataset directory holds one `.hsic` cube per image plus an
//! `annotations.json` listing images, boxes and categories.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sample::validate_box;
use super::{read_cube, write_cube, AnnotatedSample, HsiError, LabelAccess, Object};
use crate::boxes::BBox;

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub bands: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: u64,
    pub bbox: [f32; 4],
    pub category_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    pub categories: Vec<Category>,
}

impl AnnotationFile {
    /// Checks that every annotation points at a known image and category
    /// and that its box has positive size and lies inside the image.
    pub fn validate(&self) -> Result<(), HsiError> {
        let images: HashMap<u64, &ImageEntry> = self.images.iter().map(|i| (i.id, i)).collect();
        if images.len() != self.images.len() {
            return Err(HsiError::Mismatch("duplicate image ids".into()));
        }
        for a in &self.annotations {
            let img = images.get(&a.image_id).ok_or(HsiError::UnknownImage(a.image_id))?;
            if !self.categories.iter().any(|c| c.id == a.category_id) || a.category_id == 0 {
                return Err(HsiError::BadCategory {
                    image_id: a.image_id,
                    category_id: a.category_id,
                });
            }
            validate_box(a.image_id, &BBox::from_array(a.bbox), img.width, img.height)?;
        }
        Ok(())
    }

    /// Objects grouped per image id, in annotation order.
    pub fn objects_by_image(&self) -> BTreeMap<u64, Vec<Object>> {
        let mut map: BTreeMap<u64, Vec<Object>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(Object {
                bbox: BBox::from_array(a.bbox),
                class: a.category_id,
            });
        }
        map
    }
}

pub fn default_categories(num_classes: usize) -> Vec<Category> {
    (1..=num_classes)
        .map(|id| Category {
            id,
            name: if num_classes == 1 {
                "ship".to_string()
            } else {
                format!("class_{id}")
            },
        })
        .collect()
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationFile, HsiError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HsiError::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| HsiError::Json(e.to_string()))?;
    file.validate()?;
    Ok(file)
}

pub fn save_annotations(file: &AnnotationFile, path: impl AsRef<Path>) -> Result<(), HsiError> {
    file.validate()?;
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(file).map_err(|e| HsiError::Json(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| HsiError::io(path, e))
}

pub fn cube_file_name(id: u64) -> String {
    format!("img_{id:04}.hsic")
}

/// Builds the annotation record for samples, reading labels with `access`.
pub fn annotation_file_for(
    samples: &[AnnotatedSample],
    categories: Vec<Category>,
    access: LabelAccess,
) -> Result<AnnotationFile, HsiError> {
    let mut file = AnnotationFile {
        categories,
        ..Default::default()
    };
    for s in samples {
        let c = s.cube();
        file.images.push(ImageEntry {
            id: s.id,
            file: cube_file_name(s.id),
            width: c.width(),
            height: c.height(),
            bands: c.bands(),
        });
        for o in s.labels(access)? {
            file.annotations.push(AnnotationEntry {
                image_id: s.id,
                bbox: o.bbox.to_array(),
                category_id: o.class,
            });
        }
    }
    Ok(file)
}

/// Writes cubes and `annotations.json` into `dir` (created if missing).
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[AnnotatedSample], categories: Vec<Category>) -> Result<(), HsiError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| HsiError::io(dir, e))?;
    let file = annotation_file_for(samples, categories, LabelAccess::Evaluation)?;
    for s in samples {
        write_cube(s.cube(), dir.join(cube_file_name(s.id)))?;
    }
    save_annotations(&file, dir.join(ANNOTATION_FILE))
}

/// Reads a dataset directory. `held_out` marks every sample's labels as
/// evaluation-only.
pub fn load_dataset(dir: impl AsRef<Path>, held_out: bool) -> Result<(Vec<AnnotatedSample>, Vec<Category>), HsiError> {
    let dir = dir.as_ref();
    let file = load_annotations(dir.join(ANNOTATION_FILE))?;
    let mut objects = file.objects_by_image();
    let mut samples = Vec::with_capacity(file.images.len());
    for img in &file.images {
        let cube = read_cube(dir.join(&img.file))?;
        if (cube.width(), cube.height(), cube.bands()) != (img.width, img.height, img.bands) {
            return Err(HsiError::Mismatch(format!(
                "{} is {}x{}x{}, annotations say {}x{}x{}",
                img.file,
                cube.width(),
                cube.height(),
                cube.bands(),
                img.width,
                img.height,
                img.bands
            )));
        }
        let mut s = AnnotatedSample::new(img.id, cube, objects.remove(&img.id).unwrap_or_default())?;
        s.set_held_out(held_out);
        samples.push(s);
    }
    Ok((samples, file.categories))
}
