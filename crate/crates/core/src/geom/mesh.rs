//! Triangle mesh storage and similarity (scaled rigid) transforms.

use nalgebra::{Matrix3, Unit, Vector2, Vector3};

use crate::{Error, Result};

/// Rodrigues formula: rotation matrix for a rotation of `angle` radians about
/// the (not necessarily unit) `axis`. A zero axis yields the identity.
pub fn rotation_from_axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let norm = axis.norm();
    if norm == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    let unit = Unit::new_unchecked(axis / norm);
    nalgebra::Rotation3::from_axis_angle(&unit, angle).into_inner()
}

/// Rotation encoded as an axis-angle vector `w` (angle = |w|, axis = w/|w|).
pub fn rotation_about_axis(w: Vector3<f64>) -> Matrix3<f64> {
    rotation_from_axis_angle(w, w.norm())
}

/// Skew-symmetric cross-product matrix `[w]ₓ` with `[w]ₓ v = w × v`.
pub fn skew(w: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Left Jacobian of SO(3): relates an additive perturbation of the axis-angle
/// vector to a left-multiplied rotation increment,
/// `exp((w + δ)ₓ) ≈ exp((J_l(w) δ)ₓ) · exp(wₓ)`, so
/// `∂(exp(wₓ) y)/∂w = -[exp(wₓ) y]ₓ · J_l(w)`.
pub fn so3_left_jacobian(w: Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = skew(w);
    if theta < 1e-6 {
        // Series: I + wₓ/2 + wₓ²/6 (adequate below the threshold).
        Matrix3::identity() + wx * 0.5 + wx * wx / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity()
            + wx * ((1.0 - theta.cos()) / t2)
            + wx * wx * ((theta - theta.sin()) / (t2 * theta))
    }
}

/// Similarity transform `p -> scale * rotation * p + translation`.
///
/// The rotation must be a proper rotation (orthonormal, determinant +1) and
/// the scale strictly positive; `validate` checks both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    /// Applies the transform to a point.
    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Rotates a direction (no scale, no translation). Unit vectors stay unit.
    pub fn apply_direction(&self, d: Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// Composition: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    /// Inverse transform such that `inverse().apply(apply(p)) == p`.
    pub fn inverse(&self) -> RigidPose {
        let rot_inv = self.rotation.transpose();
        RigidPose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// Checks orthonormality (`R^T R = I` within `tol`), `det R = +1` and a
    /// strictly positive scale.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        let err = (gram - Matrix3::identity()).norm();
        if err > tol {
            return Err(Error::Parameter(format!(
                "rotation is not orthonormal (|R^T R - I| = {err:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::Parameter(format!(
                "rotation determinant is {det:.6}, expected +1"
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Parameter(format!(
                "pose scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Indexed triangle mesh with per-vertex normals and UV coordinates.
///
/// Invariants (see `validate`): every triangle index is a valid vertex index,
/// normals have unit length within 1e-6, and UVs lie in `[0, 1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub uvs: Vec<Vector2<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Checks the structural invariants listed on the type.
    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        if self.normals.len() != nv || self.uvs.len() != nv {
            return Err(Error::Dimension(format!(
                "mesh has {} vertices but {} normals and {} uvs",
                nv,
                self.normals.len(),
                self.uvs.len()
            )));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            for &i in tri {
                if i as usize >= nv {
                    return Err(Error::Dimension(format!(
                        "triangle {t} references vertex {i} but mesh has {nv} vertices"
                    )));
                }
            }
        }
        for (i, n) in self.normals.iter().enumerate() {
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Parameter(format!(
                    "normal {i} has length {:.8}, expected 1",
                    n.norm()
                )));
            }
        }
        for uv in self.uvs.iter() {
            if !(0.0..=1.0).contains(&uv.x) || !(0.0..=1.0).contains(&uv.y) {
                return Err(Error::UvOutOfRange(uv.x, uv.y));
            }
        }
        Ok(())
    }

    /// Recomputes per-vertex normals as the normalized sum of incident
    /// triangle area-weighted face normals. Vertices with no incident area
    /// get the +z axis so the unit-length invariant still holds.
    pub fn recompute_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for tri in &self.triangles {
            let a = self.vertices[tri[0] as usize];
            let b = self.vertices[tri[1] as usize];
            let c = self.vertices[tri[2] as usize];
            let face = (b - a).cross(&(c - a));
            for &i in tri {
                acc[i as usize] += face;
            }
        }
        self.normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 1e-12 {
                    n / len
                } else {
                    Vector3::z()
                }
            })
            .collect();
    }

    /// Returns the mesh with `pose` applied: vertices transformed, normals
    /// rotated (and re-normalized), topology and UVs unchanged.
    pub fn transformed(&self, pose: &RigidPose) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|&v| pose.apply(v)).collect(),
            normals: self
                .normals
                .iter()
                .map(|&n| {
                    let r = pose.apply_direction(n);
                    let len = r.norm();
                    if len > 1e-12 {
                        r / len
                    } else {
                        Vector3::z()
                    }
                })
                .collect(),
            uvs: self.uvs.clone(),
            triangles: self.triangles.clone(),
        }
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }
}
