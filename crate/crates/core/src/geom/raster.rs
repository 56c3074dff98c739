//! Software z-buffer rasterizer.
//!
//! Coverage follows pixel centers at `(x + 0.5, y + 0.5)` with the top-left
//! fill rule, so triangles sharing an edge cover each boundary pixel exactly
//! once. Attributes are interpolated with perspective-correct barycentric
//! weights. Depth ties go to the lower triangle index, and rows are processed
//! independently, so the output is identical for any thread count.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::{Camera, Mesh, RigidPose};

const NEAR_PLANE: f64 = 1e-9;

/// Per-pixel output of `rasterize`. All buffers are `width * height` in
/// row-major order; entries are meaningful only where `mask` is true.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    /// True where a front-facing triangle covers the pixel center.
    pub mask: Vec<bool>,
    /// Camera-frame depth of the visible surface (+inf where unmasked).
    pub depth: Vec<f64>,
    /// Interpolated UV coordinates.
    pub uv: Vec<Vector2<f64>>,
    /// Unit vector from the surface point toward the camera center.
    pub view_vec: Vec<Vector3<f64>>,
    /// Index of the visible triangle (`u32::MAX` where unmasked).
    pub tri_index: Vec<u32>,
    /// Perspective-correct barycentric weights in triangle vertex order.
    pub bary: Vec<[f64; 3]>,
    /// Interpolated world-space surface position.
    pub position: Vec<Vector3<f64>>,
}

impl RenderOutput {
    pub fn pixel_index(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    /// Depth buffer lookup; +inf where nothing was drawn, None off-image.
    pub fn depth_at(&self, x: i64, y: i64) -> Option<f64> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        Some(self.depth[(y as u32 * self.width + x as u32) as usize])
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

struct ScreenTri {
    /// Oriented screen vertices (positive signed area).
    s: [Vector2<f64>; 3],
    /// Reciprocal camera-frame depth per oriented vertex.
    inv_z: [f64; 3],
    /// World-space position per oriented vertex.
    world: [Vector3<f64>; 3],
    /// UV per oriented vertex.
    uv: [Vector2<f64>; 3],
    /// Maps oriented slots back to the original triangle vertex order.
    perm: [u8; 3],
    /// Twice the signed screen area (always positive after orientation).
    area2: f64,
    /// Top-left flags for the edges opposite each oriented vertex.
    top_left: [bool; 3],
    index: u32,
}

fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Top-left rule for an edge direction in y-down pixel coordinates:
/// "left" edges ascend the image, "top" edges run horizontally rightward.
fn edge_is_top_left(d: Vector2<f64>) -> bool {
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

struct Pixel {
    depth: f64,
    uv: Vector2<f64>,
    view_vec: Vector3<f64>,
    tri_index: u32,
    bary: [f64; 3],
    position: Vector3<f64>,
}

/// Renders `mesh` under the model-to-world `pose` as seen by `camera`.
pub fn rasterize(mesh: &Mesh, pose: &RigidPose, camera: &Camera) -> RenderOutput {
    let width = camera.width;
    let height = camera.height;
    let cam_center = camera.center();

    let world: Vec<Vector3<f64>> = mesh.vertices.iter().map(|&v| pose.apply(v)).collect();
    let cam: Vec<Vector3<f64>> = world.iter().map(|&w| camera.to_camera_frame(w)).collect();
    let screen: Vec<Option<Vector2<f64>>> = cam
        .iter()
        .map(|p| {
            (p.z > NEAR_PLANE)
                .then(|| camera.focal * Vector2::new(p.x / p.z, p.y / p.z) + camera.principal_point)
        })
        .collect();

    // Set up screen-space triangles and bucket them by the pixel rows they
    // may touch, preserving ascending triangle order within each row.
    let mut tris: Vec<ScreenTri> = Vec::new();
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height as usize];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let [i0, i1, i2] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        let (Some(s0), Some(s1), Some(s2)) = (screen[i0], screen[i1], screen[i2]) else {
            continue;
        };
        // Back-face cull: the camera sits at the origin of the camera frame,
        // so the centroid doubles as the view direction onto the face.
        let face_n = (cam[i1] - cam[i0]).cross(&(cam[i2] - cam[i0]));
        let centroid = (cam[i0] + cam[i1] + cam[i2]) / 3.0;
        if face_n.dot(&centroid) >= 0.0 {
            continue;
        }
        let mut order = [0usize, 1, 2];
        let mut area2 = cross2(s1 - s0, s2 - s0);
        if area2 == 0.0 {
            continue;
        }
        if area2 < 0.0 {
            order = [0, 2, 1];
            area2 = -area2;
        }
        let idx = [tri[order[0]] as usize, tri[order[1]] as usize, tri[order[2]] as usize];
        let s = [
            screen[idx[0]].unwrap(),
            screen[idx[1]].unwrap(),
            screen[idx[2]].unwrap(),
        ];
        let st = ScreenTri {
            s,
            inv_z: [1.0 / cam[idx[0]].z, 1.0 / cam[idx[1]].z, 1.0 / cam[idx[2]].z],
            world: [world[idx[0]], world[idx[1]], world[idx[2]]],
            uv: [mesh.uvs[idx[0]], mesh.uvs[idx[1]], mesh.uvs[idx[2]]],
            perm: [order[0] as u8, order[1] as u8, order[2] as u8],
            area2,
            top_left: [
                edge_is_top_left(s[2] - s[1]),
                edge_is_top_left(s[0] - s[2]),
                edge_is_top_left(s[1] - s[0]),
            ],
            index: t as u32,
        };
        let min_y = s[0].y.min(s[1].y).min(s[2].y);
        let max_y = s[0].y.max(s[1].y).max(s[2].y);
        let y0 = ((min_y - 0.5).ceil().max(0.0)) as i64;
        let y1 = ((max_y - 0.5).floor().min(height as f64 - 1.0)) as i64;
        let slot = tris.len() as u32;
        if y0 <= y1 && max_y >= 0.5 && min_y <= height as f64 - 0.5 {
            for y in y0..=y1 {
                rows[y as usize].push(slot);
            }
            tris.push(st);
        }
    }

    let row_pixels: Vec<Vec<Option<Pixel>>> = (0..height as usize)
        .into_par_iter()
        .map(|y| {
            let py = y as f64 + 0.5;
            let mut row: Vec<Option<Pixel>> = (0..width).map(|_| None).collect();
            for &slot in &rows[y] {
                let tri = &tris[slot as usize];
                let min_x = tri.s[0].x.min(tri.s[1].x).min(tri.s[2].x);
                let max_x = tri.s[0].x.max(tri.s[1].x).max(tri.s[2].x);
                let x0 = ((min_x - 0.5).ceil().max(0.0)) as i64;
                let x1 = ((max_x - 0.5).floor().min(width as f64 - 1.0)) as i64;
                for x in x0..=x1 {
                    let p = Vector2::new(x as f64 + 0.5, py);
                    let w = [
                        cross2(tri.s[2] - tri.s[1], p - tri.s[1]),
                        cross2(tri.s[0] - tri.s[2], p - tri.s[2]),
                        cross2(tri.s[1] - tri.s[0], p - tri.s[0]),
                    ];
                    let inside = (0..3).all(|k| w[k] > 0.0 || (w[k] == 0.0 && tri.top_left[k]));
                    if !inside {
                        continue;
                    }
                    let lam = [w[0] / tri.area2, w[1] / tri.area2, w[2] / tri.area2];
                    let denom =
                        lam[0] * tri.inv_z[0] + lam[1] * tri.inv_z[1] + lam[2] * tri.inv_z[2];
                    let depth = 1.0 / denom;
                    let cell = &mut row[x as usize];
                    if let Some(existing) = cell {
                        if existing.depth <= depth {
                            continue;
                        }
                    }
                    let mut b_oriented = [0.0; 3];
                    for k in 0..3 {
                        b_oriented[k] = lam[k] * tri.inv_z[k] / denom;
                    }
                    let mut bary = [0.0; 3];
                    for k in 0..3 {
                        bary[tri.perm[k] as usize] = b_oriented[k];
                    }
                    let position = b_oriented[0] * tri.world[0]
                        + b_oriented[1] * tri.world[1]
                        + b_oriented[2] * tri.world[2];
                    let uv = b_oriented[0] * tri.uv[0]
                        + b_oriented[1] * tri.uv[1]
                        + b_oriented[2] * tri.uv[2];
                    *cell = Some(Pixel {
                        depth,
                        uv,
                        view_vec: (cam_center - position).normalize(),
                        tri_index: tri.index,
                        bary,
                        position,
                    });
                }
            }
            row
        })
        .collect();

    let n = (width * height) as usize;
    let mut out = RenderOutput {
        width,
        height,
        mask: vec![false; n],
        depth: vec![f64::INFINITY; n],
        uv: vec![Vector2::zeros(); n],
        view_vec: vec![Vector3::zeros(); n],
        tri_index: vec![u32::MAX; n],
        bary: vec![[0.0; 3]; n],
        position: vec![Vector3::zeros(); n],
    };
    for (y, row) in row_pixels.into_iter().enumerate() {
        for (x, cell) in row.into_iter().enumerate() {
            if let Some(px) = cell {
                let i = y * width as usize + x;
                out.mask[i] = true;
                out.depth[i] = px.depth;
                out.uv[i] = px.uv;
                out.view_vec[i] = px.view_vec;
                out.tri_index[i] = px.tri_index;
                out.bary[i] = px.bary;
                out.position[i] = px.position;
            }
        }
    }
    out
}
