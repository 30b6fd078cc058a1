//! Band-count matching between domains.
//!
//! Expansion replicates the first and last band; reduction picks evenly
//! spaced bands without interpolating.

use super::HyperCube;

/// Source band index for every output band when matching `bands` to `target`.
pub fn band_mapping(bands: usize, target: usize) -> Vec<usize> {
    assert!(bands >= 1 && target >= 1, "band counts must be positive");
    if bands == target {
        return (0..bands).collect();
    }
    if bands < target {
        let deficit = target - bands;
        let front = deficit / 2;
        let back = deficit - front;
        let mut order = vec![0; front];
        order.extend(0..bands);
        order.extend(std::iter::repeat(bands - 1).take(back));
        return order;
    }
    if target == 1 {
        return vec![0];
    }
    (0..target)
        .map(|i| ((i * (bands - 1)) as f64 / (target - 1) as f64).round() as usize)
        .collect()
}

/// Returns a cube with exactly `target_bands` bands.
///
/// The nominal spectral resolution is rescaled by `L / target_bands` when
/// reducing and kept when expanding.
pub fn match_bands(cube: &HyperCube, target_bands: usize) -> HyperCube {
    let l = cube.bands();
    if l == target_bands {
        return cube.clone();
    }
    let res = if l > target_bands {
        cube.spectral_resolution() * l as f32 / target_bands as f32
    } else {
        cube.spectral_resolution()
    };
    cube.select_bands(&band_mapping(l, target_bands), res)
}
