//! Discrete Laplacian on UV rasters and the smoothed-L1 penalty.

use std::ops::{Add, Mul, Sub};

use crate::geom::UvRaster;

/// Width of the smooth |x| ≈ sqrt(x² + ε²) approximation used wherever an
/// L1 penalty must be differentiated.
pub const SMOOTH_L1_EPS: f64 = 1e-3;

/// Smooth absolute value: sqrt(x² + ε²).
pub fn smooth_abs(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt()
}

/// Derivative of `smooth_abs`: x / sqrt(x² + ε²).
pub fn smooth_abs_grad(x: f64, eps: f64) -> f64 {
    x / (x * x + eps * eps).sqrt()
}

/// 5-point Laplacian stencil `4·c − N − S − E − W` with replicated-edge
/// boundary (out-of-grid neighbors clamp to the nearest texel). The
/// resulting linear operator is symmetric, so it serves as its own adjoint
/// when back-propagating through smoothness penalties.
pub fn raster_laplacian<T>(map: &UvRaster<T>) -> UvRaster<T>
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T>,
{
    assert!(
        map.width >= 3 && map.height >= 3,
        "laplacian needs at least a 3x3 raster, got {}x{}",
        map.width,
        map.height
    );
    let w = map.width as i64;
    let h = map.height as i64;
    let at = |x: i64, y: i64| -> T {
        let xc = x.clamp(0, w - 1) as u32;
        let yc = y.clamp(0, h - 1) as u32;
        map.get(xc, yc)
    };
    let mut out = Vec::with_capacity(map.data.len());
    for y in 0..h {
        for x in 0..w {
            let c = at(x, y);
            let sum = at(x, y - 1) + at(x, y + 1) + at(x - 1, y) + at(x + 1, y);
            out.push(c * 4.0 - sum);
        }
    }
    UvRaster {
        width: map.width,
        height: map.height,
        data: out,
    }
}
