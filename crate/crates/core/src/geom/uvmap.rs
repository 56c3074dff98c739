//! Rasters indexed by UV coordinates: texture maps with bilinear sampling
//! and UV-space triangle coverage for baking per-texel attributes.

use std::ops::{Add, Mul};

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::{Error, Result};

/// A `width x height` grid of values addressed by UV in `[0, 1]^2`.
/// Texel `(i, j)` is centered at `((i + 0.5) / width, (j + 0.5) / height)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UvRaster<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

impl<T: Copy> UvRaster<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        UvRaster {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn texel_index(&self, i: u32, j: u32) -> usize {
        (j * self.width + i) as usize
    }

    pub fn get(&self, i: u32, j: u32) -> T {
        self.data[self.texel_index(i, j)]
    }

    pub fn set(&mut self, i: u32, j: u32, value: T) {
        let idx = self.texel_index(i, j);
        self.data[idx] = value;
    }

    /// UV position of the center of texel `(i, j)`.
    pub fn texel_center(&self, i: u32, j: u32) -> Vector2<f64> {
        Vector2::new(
            (i as f64 + 0.5) / self.width as f64,
            (j as f64 + 0.5) / self.height as f64,
        )
    }

    /// Nearest-texel indices for a UV position (clamped to the grid).
    pub fn nearest_texel(&self, uv: Vector2<f64>) -> (u32, u32) {
        let i = ((uv.x * self.width as f64 - 0.5).round().max(0.0) as u32).min(self.width - 1);
        let j = ((uv.y * self.height as f64 - 0.5).round().max(0.0) as u32).min(self.height - 1);
        (i, j)
    }
}

impl<T> UvRaster<T>
where
    T: Copy + Add<Output = T> + Mul<f64, Output = T>,
{
    /// Bilinear sample at `uv`. Coordinates must lie in `[0, 1]^2`; the
    /// filtering footprint clamps to edge texels, so sampling exactly at a
    /// texel center returns that texel's value.
    pub fn sample(&self, uv: Vector2<f64>) -> Result<T> {
        if !(0.0..=1.0).contains(&uv.x) || !(0.0..=1.0).contains(&uv.y) {
            return Err(Error::UvOutOfRange(uv.x, uv.y));
        }
        let (i0, i1, fx) = bilinear_axis(uv.x, self.width);
        let (j0, j1, fy) = bilinear_axis(uv.y, self.height);
        let v00 = self.get(i0, j0);
        let v10 = self.get(i1, j0);
        let v01 = self.get(i0, j1);
        let v11 = self.get(i1, j1);
        let top = v00 * (1.0 - fx) + v10 * fx;
        let bottom = v01 * (1.0 - fx) + v11 * fx;
        Ok(top * (1.0 - fy) + bottom * fy)
    }

    /// The four texels and weights `sample` would blend at `uv`, in the
    /// order (i0,j0), (i1,j0), (i0,j1), (i1,j1). Lets adjoint accumulation
    /// scatter gradients to exactly the texels that influenced a sample.
    pub fn sample_footprint(&self, uv: Vector2<f64>) -> Result<[(u32, u32, f64); 4]> {
        if !(0.0..=1.0).contains(&uv.x) || !(0.0..=1.0).contains(&uv.y) {
            return Err(Error::UvOutOfRange(uv.x, uv.y));
        }
        let (i0, i1, fx) = bilinear_axis(uv.x, self.width);
        let (j0, j1, fy) = bilinear_axis(uv.y, self.height);
        Ok([
            (i0, j0, (1.0 - fx) * (1.0 - fy)),
            (i1, j0, fx * (1.0 - fy)),
            (i0, j1, (1.0 - fx) * fy),
            (i1, j1, fx * fy),
        ])
    }
}

/// Clamped bilinear footprint along one axis: returns the two texel indices
/// and the interpolation fraction toward the second one.
fn bilinear_axis(coord: f64, size: u32) -> (u32, u32, f64) {
    let x = (coord * size as f64 - 0.5).clamp(0.0, (size - 1) as f64);
    let i0 = x.floor();
    let fx = x - i0;
    let i0 = i0 as u32;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, fx)
}

/// Which mesh triangle covers each texel center in UV space.
///
/// `tri` is `u32::MAX` and `bary` is zero where no triangle covers the texel.
#[derive(Debug, Clone)]
pub struct UvCoverage {
    pub width: u32,
    pub height: u32,
    pub tri: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
}

impl UvCoverage {
    pub fn texel_index(&self, i: u32, j: u32) -> usize {
        (j * self.width + i) as usize
    }

    pub fn covered(&self, i: u32, j: u32) -> bool {
        self.tri[self.texel_index(i, j)] != u32::MAX
    }
}

/// Rasterizes a mesh UV layout onto a `width x height` texel grid.
///
/// Coverage uses the same pixel-center + top-left convention as the image
/// rasterizer (texel centers at `(i + 0.5, j + 0.5)` in scaled UV), so
/// triangles adjacent in UV space claim each boundary texel exactly once.
/// Overlapping charts resolve to the lowest triangle index deterministically.
pub fn rasterize_uv_topology(
    uvs: &[Vector2<f64>],
    triangles: &[[u32; 3]],
    width: u32,
    height: u32,
) -> UvCoverage {
    struct UvTri {
        s: [Vector2<f64>; 3],
        perm: [u8; 3],
        area2: f64,
        top_left: [bool; 3],
        index: u32,
    }

    fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
        a.x * b.y - a.y * b.x
    }
    fn edge_is_top_left(d: Vector2<f64>) -> bool {
        d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
    }

    let mut tris: Vec<UvTri> = Vec::new();
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height as usize];
    for (t, tri) in triangles.iter().enumerate() {
        let raw = [
            uvs[tri[0] as usize],
            uvs[tri[1] as usize],
            uvs[tri[2] as usize],
        ];
        let scaled = raw.map(|uv| Vector2::new(uv.x * width as f64, uv.y * height as f64));
        let mut order = [0usize, 1, 2];
        let mut area2 = cross2(scaled[1] - scaled[0], scaled[2] - scaled[0]);
        if area2 == 0.0 {
            continue;
        }
        if area2 < 0.0 {
            order = [0, 2, 1];
            area2 = -area2;
        }
        let s = [scaled[order[0]], scaled[order[1]], scaled[order[2]]];
        let min_y = s[0].y.min(s[1].y).min(s[2].y);
        let max_y = s[0].y.max(s[1].y).max(s[2].y);
        let y0 = ((min_y - 0.5).ceil().max(0.0)) as i64;
        let y1 = ((max_y - 0.5).floor().min(height as f64 - 1.0)) as i64;
        if y0 > y1 {
            continue;
        }
        let slot = tris.len() as u32;
        for y in y0..=y1 {
            rows[y as usize].push(slot);
        }
        tris.push(UvTri {
            s,
            perm: [order[0] as u8, order[1] as u8, order[2] as u8],
            area2,
            top_left: [
                edge_is_top_left(s[2] - s[1]),
                edge_is_top_left(s[0] - s[2]),
                edge_is_top_left(s[1] - s[0]),
            ],
            index: t as u32,
        });
    }

    let row_out: Vec<(Vec<u32>, Vec<[f64; 3]>)> = (0..height as usize)
        .into_par_iter()
        .map(|j| {
            let py = j as f64 + 0.5;
            let mut tri_row = vec![u32::MAX; width as usize];
            let mut bary_row = vec![[0.0; 3]; width as usize];
            for &slot in &rows[j] {
                let tri = &tris[slot as usize];
                let min_x = tri.s[0].x.min(tri.s[1].x).min(tri.s[2].x);
                let max_x = tri.s[0].x.max(tri.s[1].x).max(tri.s[2].x);
                let x0 = ((min_x - 0.5).ceil().max(0.0)) as i64;
                let x1 = ((max_x - 0.5).floor().min(width as f64 - 1.0)) as i64;
                for i in x0..=x1 {
                    if tri_row[i as usize] != u32::MAX {
                        continue; // first (lowest-index) triangle keeps the texel
                    }
                    let p = Vector2::new(i as f64 + 0.5, py);
                    let w = [
                        cross2(tri.s[2] - tri.s[1], p - tri.s[1]),
                        cross2(tri.s[0] - tri.s[2], p - tri.s[2]),
                        cross2(tri.s[1] - tri.s[0], p - tri.s[0]),
                    ];
                    let inside = (0..3).all(|k| w[k] > 0.0 || (w[k] == 0.0 && tri.top_left[k]));
                    if !inside {
                        continue;
                    }
                    let mut bary = [0.0; 3];
                    for k in 0..3 {
                        bary[tri.perm[k] as usize] = w[k] / tri.area2;
                    }
                    tri_row[i as usize] = tri.index;
                    bary_row[i as usize] = bary;
                }
            }
            (tri_row, bary_row)
        })
        .collect();

    let mut cov = UvCoverage {
        width,
        height,
        tri: Vec::with_capacity((width * height) as usize),
        bary: Vec::with_capacity((width * height) as usize),
    };
    for (tri_row, bary_row) in row_out {
        cov.tri.extend(tri_row);
        cov.bary.extend(bary_row);
    }
    cov
}

/// Bakes a per-vertex attribute into UV space: each covered texel gets the
/// barycentric blend of its triangle's vertex values; uncovered texels get
/// `fill`.
pub fn splat_vertex_attribute<T>(
    coverage: &UvCoverage,
    triangles: &[[u32; 3]],
    per_vertex: &[T],
    fill: T,
) -> UvRaster<T>
where
    T: Copy + Add<Output = T> + Mul<f64, Output = T>,
{
    let data = coverage
        .tri
        .iter()
        .zip(coverage.bary.iter())
        .map(|(&t, b)| {
            if t == u32::MAX {
                fill
            } else {
                let tri = triangles[t as usize];
                per_vertex[tri[0] as usize] * b[0]
                    + per_vertex[tri[1] as usize] * b[1]
                    + per_vertex[tri[2] as usize] * b[2]
            }
        })
        .collect();
    UvRaster {
        width: coverage.width,
        height: coverage.height,
        data,
    }
}
