use std::fs;
use std::io::Write;
use std::path::Path;

use super::HsiError;
use crate::autodiff::Tensor;

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const CUBE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 3 + 4;

/// A W×H×L hyperspectral image stored band-sequentially: all of band 0
/// (row-major), then band 1, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    width: usize,
    height: usize,
    bands: usize,
    spectral_resolution: f32,
    values: Vec<f32>,
}

impl HyperCube {
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        spectral_resolution: f32,
        values: Vec<f32>,
    ) -> Result<Self, HsiError> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(HsiError::EmptyDimension {
                width,
                height,
                bands,
            });
        }
        let expected = width * height * bands;
        if values.len() != expected {
            return Err(HsiError::Truncated {
                expected,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(HsiError::NonFinite { index: pos });
        }
        if !spectral_resolution.is_finite() {
            return Err(HsiError::NonFinite { index: usize::MAX });
        }
        Ok(HyperCube {
            width,
            height,
            bands,
            spectral_resolution,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, bands: usize) -> Result<Self, HsiError> {
        Self::new(width, height, bands, 0.0, vec![0.0; width * height * bands])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn spectral_resolution(&self) -> f32 {
        self.spectral_resolution
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    /// Row-major H×W plane of band `b`.
    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.plane_len();
        &self.values[b * n..(b + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, b: usize) -> f32 {
        self.values[b * self.plane_len() + y * self.width + x]
    }

    /// The L-vector at pixel (x, y).
    pub fn spectrum(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.get(x, y, b)).collect()
    }

    /// Builds a cube from band planes taken from `self` in the given order.
    pub fn select_bands(&self, order: &[usize], spectral_resolution: f32) -> HyperCube {
        let mut values = Vec::with_capacity(order.len() * self.plane_len());
        for &b in order {
            values.extend_from_slice(self.band(b));
        }
        HyperCube {
            width: self.width,
            height: self.height,
            bands: order.len(),
            spectral_resolution,
            values,
        }
    }

    /// 1×L×H×W tensor with every band standardized to zero mean and unit
    /// standard deviation (std floored at 1e-6).
    pub fn standardized_tensor(&self) -> Tensor {
        let n = self.plane_len();
        let mut data = Vec::with_capacity(self.values.len());
        for b in 0..self.bands {
            let plane = self.band(b);
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt().max(1e-6);
            data.extend(plane.iter().map(|&v| ((v as f64 - mean) / std) as f32));
        }
        Tensor::new([1, self.bands, self.height, self.width], data).expect("cube shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(CUBE_MAGIC);
        out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.bands as u32).to_le_bytes());
        out.extend_from_slice(&self.spectral_resolution.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HsiError> {
        if bytes.len() < 4 || &bytes[..4] != CUBE_MAGIC {
            return Err(HsiError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(HsiError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CUBE_VERSION {
            return Err(HsiError::UnsupportedVersion(version));
        }
        let (width, height, bands) = (u32_at(6), u32_at(10), u32_at(14));
        let res = f32::from_le_bytes(bytes[18..22].try_into().unwrap());
        let count = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(bands))
            .ok_or(HsiError::EmptyDimension {
                width,
                height,
                bands,
            })?;
        let payload = &bytes[HEADER_LEN..];
        let expected = count * 4;
        if payload.len() < expected {
            return Err(HsiError::Truncated {
                expected: HEADER_LEN + expected,
                found: bytes.len(),
            });
        }
        if payload.len() > expected {
            return Err(HsiError::TrailingBytes(payload.len() - expected));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        HyperCube::new(width, height, bands, res, values)
    }
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube, HsiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HsiError::io(path, e))?;
    HyperCube::from_bytes(&bytes)
}

pub fn write_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<(), HsiError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| HsiError::io(path, e))?;
    f.write_all(&cube.to_bytes()).map_err(|e| HsiError::io(path, e))
}
