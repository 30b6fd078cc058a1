use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::boxes::BBox;
use crate::error::{Result, SfaError};
use crate::hsi::{match_bands, AnnotatedSample, LabelAccess};

/// A band-matched, standardized 1×L×H×W image with its boxes. Target
/// images carry no boxes.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub id: u64,
    pub tensor: Tensor,
    pub objects: Vec<(BBox, usize)>,
}

fn prepare(samples: &[AnnotatedSample], bands: usize, with_labels: bool) -> Result<Vec<PreparedImage>> {
    if samples.is_empty() {
        return Err(SfaError::InvalidConfig("empty dataset".into()));
    }
    samples
        .iter()
        .map(|s| {
            let cube = match_bands(s.cube(), bands);
            if cube.bands() != bands {
                return Err(SfaError::BandMismatch {
                    expected: bands,
                    found: cube.bands(),
                });
            }
            let objects = if with_labels {
                s.labels(LabelAccess::Training)?.iter().map(|o| (o.bbox, o.class)).collect()
            } else {
                Vec::new()
            };
            Ok(PreparedImage {
                id: s.id,
                tensor: cube.standardized_tensor(),
                objects,
            })
        })
        .collect()
}

/// Reads source labels through the training guard.
pub fn prepare_source(samples: &[AnnotatedSample], bands: usize) -> Result<Vec<PreparedImage>> {
    prepare(samples, bands, true)
}

/// Uses the cubes only; labels are never requested.
pub fn prepare_target(samples: &[AnnotatedSample], bands: usize) -> Result<Vec<PreparedImage>> {
    prepare(samples, bands, false)
}

/// Cuts a `crop`×`crop` window at a random offset. Boxes are clipped to the
/// window and kept when at least half of their area and a pixel per side
/// survive. `crop == 0` keeps the whole image.
pub fn crop_sample(img: &PreparedImage, crop: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<(BBox, usize)>)> {
    let [_, l, h, w] = img.tensor.dims4()?;
    if crop == 0 || (crop == h && crop == w) {
        return Ok((img.tensor.clone(), img.objects.clone()));
    }
    if crop > h || crop > w {
        return Err(SfaError::InvalidConfig(format!("crop {crop} exceeds image {h}x{w} (id {})", img.id)));
    }
    let y0 = rng.random_range(0..=h - crop);
    let x0 = rng.random_range(0..=w - crop);
    let src = img.tensor.data();
    let mut out = Vec::with_capacity(l * crop * crop);
    for b in 0..l {
        for y in y0..y0 + crop {
            let row = (b * h + y) * w;
            out.extend_from_slice(&src[row + x0..row + x0 + crop]);
        }
    }
    let objects = img
        .objects
        .iter()
        .filter_map(|&(b, c)| {
            let shifted = BBox::new(b.x - x0 as f32, b.y - y0 as f32, b.w, b.h);
            let clipped = shifted.clip(crop as f32, crop as f32);
            (clipped.w >= 1.0 && clipped.h >= 1.0 && clipped.area() >= 0.5 * b.area()).then_some((clipped, c))
        })
        .collect();
    Ok((Tensor::new([1, l, crop, crop], out)?, objects))
}

/// One step's worth of data.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub source: Tensor,
    pub source_gt: Vec<Vec<(BBox, usize)>>,
    pub target: Option<Tensor>,
}

/// Draws batches by walking reshuffled epochs of each domain.
pub struct BatchSampler {
    source: Vec<PreparedImage>,
    target: Vec<PreparedImage>,
    batch_size: usize,
    crop: usize,
    rng: ChaCha8Rng,
    source_order: Vec<usize>,
    target_order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(source: Vec<PreparedImage>, target: Vec<PreparedImage>, batch_size: usize, crop: usize, seed: u64) -> Result<Self> {
        if source.is_empty() {
            return Err(SfaError::InvalidConfig("source dataset is empty".into()));
        }
        let bands = source[0].tensor.shape()[1];
        for img in source.iter().chain(&target) {
            let [_, l, h, w] = img.tensor.dims4()?;
            if l != bands {
                return Err(SfaError::BandMismatch { expected: bands, found: l });
            }
            if crop == 0 {
                crate::ssam::check_spatial(h, w)?;
                let [_, _, h0, w0] = source[0].tensor.dims4()?;
                if (h, w) != (h0, w0) {
                    return Err(SfaError::InvalidConfig(format!(
                        "image {} is {h}x{w} but {h0}x{w0} was expected; set crop to batch mixed sizes",
                        img.id
                    )));
                }
            } else if crop > h || crop > w {
                return Err(SfaError::InvalidConfig(format!("crop {crop} exceeds image {h}x{w} (id {})", img.id)));
            }
        }
        Ok(BatchSampler {
            source,
            target,
            batch_size,
            crop,
            rng: ChaCha8Rng::seed_from_u64(seed),
            source_order: Vec::new(),
            target_order: Vec::new(),
        })
    }

    fn draw(order: &mut Vec<usize>, len: usize, rng: &mut ChaCha8Rng) -> usize {
        if order.is_empty() {
            order.extend(0..len);
            order.shuffle(rng);
        }
        order.pop().expect("refilled above")
    }

    pub fn next_batch(&mut self) -> Result<TrainBatch> {
        let mut src = Vec::with_capacity(self.batch_size);
        let mut gt = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let i = Self::draw(&mut self.source_order, self.source.len(), &mut self.rng);
            let (t, o) = crop_sample(&self.source[i], self.crop, &mut self.rng)?;
            src.push(t);
            gt.push(o);
        }
        let target = if self.target.is_empty() {
            None
        } else {
            let mut tgt = Vec::with_capacity(self.batch_size);
            for _ in 0..self.batch_size {
                let i = Self::draw(&mut self.target_order, self.target.len(), &mut self.rng);
                tgt.push(crop_sample(&self.target[i], self.crop, &mut self.rng)?.0);
            }
            Some(Tensor::stack_batch(&tgt)?)
        };
        Ok(TrainBatch {
            source: Tensor::stack_batch(&src)?,
            source_gt: gt,
            target,
        })
    }
}
