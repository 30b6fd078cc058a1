//! Synthetic source/target scene pairs with a controlled domain shift.
//!
//! Both domains image the same materials over the same wavelength range but
//! with different band counts, object scales, background water types,
//! illumination and noise. Backgrounds are smooth blends of two water
//! spectra; objects are rectangles or ellipses painted with a class material.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{default_categories, AnnotatedSample, Category, HsiError, HyperCube, Object};
use crate::boxes::BBox;
use crate::kv::kv_fields;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub source_bands: usize,
    pub target_bands: usize,
    pub source_size: usize,
    pub target_size: usize,
    pub num_source: usize,
    pub num_target: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in source pixels.
    pub min_side: f32,
    pub max_side: f32,
    /// Spatial scale applied to object sides in each domain.
    pub source_scale: f32,
    pub target_scale: f32,
    pub source_noise: f32,
    pub target_noise: f32,
    /// Multiplier on target background reflectance.
    pub target_background_gain: f32,
    pub wavelength_min: f32,
    pub wavelength_max: f32,
    /// Minimum spectral angle (radians) between an object and the
    /// background right next to it.
    pub min_spectral_angle: f32,
    pub background_pool: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            source_bands: 30,
            target_bands: 60,
            source_size: 64,
            target_size: 64,
            num_source: 32,
            num_target: 32,
            num_classes: 1,
            min_objects: 1,
            max_objects: 3,
            min_side: 6.0,
            max_side: 26.0,
            source_scale: 1.0,
            target_scale: 1.5,
            source_noise: 0.01,
            target_noise: 0.02,
            target_background_gain: 1.4,
            wavelength_min: 400.0,
            wavelength_max: 1000.0,
            min_spectral_angle: 0.15,
            background_pool: 4,
        }
    }
}

kv_fields!(SynthConfig {
    seed,
    source_bands,
    target_bands,
    source_size,
    target_size,
    num_source,
    num_target,
    num_classes,
    min_objects,
    max_objects,
    min_side,
    max_side,
    source_scale,
    target_scale,
    source_noise,
    target_noise,
    target_background_gain,
    wavelength_min,
    wavelength_max,
    min_spectral_angle,
    background_pool,
});

impl SynthConfig {
    pub fn validate(&self) -> Result<(), HsiError> {
        let bad = |m: &str| Err(HsiError::Config(m.to_string()));
        if self.min_objects == 0 {
            return bad("min_objects must be at least 1 (scenes with zero objects are possible otherwise)");
        }
        if self.max_objects < self.min_objects {
            return bad("max_objects < min_objects");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.source_bands == 0 || self.target_bands == 0 {
            return bad("band counts must be positive");
        }
        if self.num_source == 0 || self.num_target == 0 {
            return bad("both domains need at least one image");
        }
        if !(self.min_side >= 1.0 && self.max_side >= self.min_side) {
            return bad("object side range must satisfy 1 <= min_side <= max_side");
        }
        for (scale, size) in [(self.source_scale, self.source_size), (self.target_scale, self.target_size)] {
            if !(scale > 0.0) {
                return bad("object scales must be positive");
            }
            if (self.max_side * scale).ceil() as usize + 2 > size {
                return bad("largest object does not fit inside the image");
            }
        }
        if !(self.wavelength_max > self.wavelength_min) {
            return bad("wavelength_max must exceed wavelength_min");
        }
        if self.source_noise < 0.0 || self.target_noise < 0.0 {
            return bad("noise must be non-negative");
        }
        if self.background_pool == 0 {
            return bad("background_pool must be positive");
        }
        Ok(())
    }
}

/// Smooth reflectance curve: a baseline plus Gaussian bumps.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    pub base: f32,
    pub slope: f32,
    pub bumps: Vec<(f32, f32, f32)>,
}

impl Signature {
    pub fn at(&self, wavelength: f32, range: (f32, f32)) -> f32 {
        let t = (wavelength - range.0) / (range.1 - range.0);
        let mut r = self.base * (1.0 + self.slope * (t - 0.5));
        for &(amp, center, width) in &self.bumps {
            let d = (wavelength - center) / width;
            r += amp * (-0.5 * d * d).exp();
        }
        r.max(0.0)
    }

    pub fn sample(&self, centers: &[f32], range: (f32, f32)) -> Vec<f32> {
        centers.iter().map(|&w| self.at(w, range)).collect()
    }
}

/// Spectral angle in radians between two spectra.
pub fn spectral_angle(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return std::f32::consts::FRAC_PI_2;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos() as f32
}

pub fn band_centers(bands: usize, range: (f32, f32)) -> Vec<f32> {
    let step = (range.1 - range.0) / bands as f32;
    (0..bands).map(|b| range.0 + (b as f32 + 0.5) * step).collect()
}

/// Generated data for both domains.
#[derive(Clone, Debug)]
pub struct DomainPair {
    pub source: Vec<AnnotatedSample>,
    /// Held out: labels are readable by the evaluator only.
    pub target: Vec<AnnotatedSample>,
    pub categories: Vec<Category>,
    pub materials: Vec<Signature>,
}

struct DomainSpec<'a> {
    bands: usize,
    size: usize,
    scale: f32,
    noise: f32,
    backgrounds: &'a [Signature],
    id_offset: u64,
    count: usize,
}

fn random_material(rng: &mut ChaCha8Rng, range: (f32, f32)) -> Signature {
    let span = range.1 - range.0;
    let bumps = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.12..0.22),
                range.0 + rng.random_range(0.0..1.0) * span,
                rng.random_range(0.08..0.3) * span,
            )
        })
        .collect();
    Signature {
        base: rng.random_range(0.22..0.4),
        slope: rng.random_range(-0.6..0.6),
        bumps,
    }
}

fn random_water(rng: &mut ChaCha8Rng, range: (f32, f32), gain: f32) -> Signature {
    let span = range.1 - range.0;
    Signature {
        base: rng.random_range(0.04..0.1) * gain,
        slope: rng.random_range(-1.2..-0.6),
        bumps: vec![(
            rng.random_range(0.0..0.05) * gain,
            range.0 + rng.random_range(0.12..0.3) * span,
            rng.random_range(0.06..0.12) * span,
        )],
    }
}

/// Generates a source/target pair. The same `cfg` always yields the same data.
pub fn generate_domain_pair(cfg: &SynthConfig) -> Result<DomainPair, HsiError> {
    cfg.validate()?;
    let range = (cfg.wavelength_min, cfg.wavelength_max);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fine = band_centers(cfg.source_bands.max(cfg.target_bands).max(64), range);

    let source_water: Vec<Signature> = (0..cfg.background_pool).map(|_| random_water(&mut rng, range, 1.0)).collect();
    let target_water: Vec<Signature> = (0..cfg.background_pool)
        .map(|_| random_water(&mut rng, range, cfg.target_background_gain))
        .collect();

    let mut materials = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let mut tries = 0;
        loop {
            let m = random_material(&mut rng, range);
            let ms = m.sample(&fine, range);
            let separated = source_water
                .iter()
                .chain(&target_water)
                .all(|w| spectral_angle(&ms, &w.sample(&fine, range)) >= cfg.min_spectral_angle);
            let distinct = materials
                .iter()
                .all(|o: &Signature| spectral_angle(&ms, &o.sample(&fine, range)) >= 0.5 * cfg.min_spectral_angle);
            if separated && distinct {
                materials.push(m);
                break;
            }
            tries += 1;
            if tries > 1000 {
                return Err(HsiError::Config(
                    "could not draw materials separated from the backgrounds by min_spectral_angle".into(),
                ));
            }
        }
    }

    let mut source_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    source_rng.set_stream(1);
    let mut target_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    target_rng.set_stream(2);

    let source = generate_domain(
        cfg,
        &DomainSpec {
            bands: cfg.source_bands,
            size: cfg.source_size,
            scale: cfg.source_scale,
            noise: cfg.source_noise,
            backgrounds: &source_water,
            id_offset: 0,
            count: cfg.num_source,
        },
        &materials,
        &mut source_rng,
    )?;
    let target = generate_domain(
        cfg,
        &DomainSpec {
            bands: cfg.target_bands,
            size: cfg.target_size,
            scale: cfg.target_scale,
            noise: cfg.target_noise,
            backgrounds: &target_water,
            id_offset: 100_000,
            count: cfg.num_target,
        },
        &materials,
        &mut target_rng,
    )?
    .into_iter()
    .map(AnnotatedSample::held_out)
    .collect();

    Ok(DomainPair {
        source,
        target,
        categories: default_categories(cfg.num_classes),
        materials,
    })
}

fn generate_domain(
    cfg: &SynthConfig,
    spec: &DomainSpec<'_>,
    materials: &[Signature],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AnnotatedSample>, HsiError> {
    let range = (cfg.wavelength_min, cfg.wavelength_max);
    let centers = band_centers(spec.bands, range);
    let resolution = (range.1 - range.0) / spec.bands as f32;
    let water: Vec<Vec<f32>> = spec.backgrounds.iter().map(|w| w.sample(&centers, range)).collect();
    let mats: Vec<Vec<f32>> = materials.iter().map(|m| m.sample(&centers, range)).collect();
    let (size, l) = (spec.size, spec.bands);
    let plane = size * size;
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| HsiError::Config(e.to_string()))?;

    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let a = rng.random_range(0..water.len());
        let b = rng.random_range(0..water.len());
        let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (dx, dy) = (theta.cos(), theta.sin());
        let off: f32 = rng.random_range(-0.3..0.3) * size as f32;
        let illum: f32 = rng.random_range(0.85..1.15);

        let mut clean = vec![0.0f32; plane * l];
        let mut mix = vec![0.0f32; plane];
        for y in 0..size {
            for x in 0..size {
                let u = (x as f32 - size as f32 / 2.0) * dx + (y as f32 - size as f32 / 2.0) * dy - off;
                mix[y * size + x] = 0.5 + 0.5 * (u / (size as f32 / 4.0)).tanh();
            }
        }
        for band in 0..l {
            let (wa, wb) = (water[a][band], water[b][band]);
            for p in 0..plane {
                clean[band * plane + p] = illum * ((1.0 - mix[p]) * wa + mix[p] * wb);
            }
        }

        let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut objects: Vec<Object> = Vec::new();
        let mut attempts = 0;
        while objects.len() < n_obj && attempts < 200 {
            attempts += 1;
            let side = |rng: &mut ChaCha8Rng| {
                ((rng.random_range(cfg.min_side..=cfg.max_side) * spec.scale).round() as usize).clamp(2, size - 2)
            };
            let (w, h) = (side(rng), side(rng));
            let x0 = rng.random_range(1..=size - 1 - w);
            let y0 = rng.random_range(1..=size - 1 - h);
            let bbox = BBox::new(x0 as f32, y0 as f32, w as f32, h as f32);
            let crowded = objects.iter().any(|o| {
                let g = BBox::new(o.bbox.x - 2.0, o.bbox.y - 2.0, o.bbox.w + 4.0, o.bbox.h + 4.0);
                crate::boxes::iou(&g, &bbox) > 0.0
            });
            if crowded {
                continue;
            }
            let class = rng.random_range(0..mats.len());
            let gain: f32 = illum * rng.random_range(0.9..1.1);
            let spectrum: Vec<f32> = mats[class].iter().map(|v| v * gain).collect();
            let ellipse = rng.random_bool(0.5);
            // The background on each side of the box must stay spectrally
            // distinct from the object.
            let neighbours = [
                (x0 - 1, y0 + h / 2),
                (x0 + w, y0 + h / 2),
                (x0 + w / 2, y0 - 1),
                (x0 + w / 2, y0 + h),
            ];
            let close = neighbours.iter().any(|&(nx, ny)| {
                let bg: Vec<f32> = (0..l).map(|band| clean[band * plane + ny * size + nx]).collect();
                spectral_angle(&spectrum, &bg) < cfg.min_spectral_angle
            });
            if close {
                continue;
            }
            let (cx, cy) = (x0 as f32 + w as f32 / 2.0, y0 as f32 + h as f32 / 2.0);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    if ellipse {
                        let ex = (x as f32 + 0.5 - cx) / (w as f32 / 2.0);
                        let ey = (y as f32 + 0.5 - cy) / (h as f32 / 2.0);
                        if ex * ex + ey * ey > 1.0 {
                            continue;
                        }
                    }
                    for band in 0..l {
                        clean[band * plane + y * size + x] = spectrum[band];
                    }
                }
            }
            objects.push(Object { bbox, class: class + 1 });
        }
        if objects.is_empty() {
            return Err(HsiError::Config("failed to place any object in a scene".into()));
        }
        if spec.noise > 0.0 {
            for v in &mut clean {
                *v += noise.sample(rng);
            }
        }
        let cube = HyperCube::new(size, size, l, resolution, clean)?;
        out.push(AnnotatedSample::new(spec.id_offset + i as u64, cube, objects)?);
    }
    Ok(out)
}
