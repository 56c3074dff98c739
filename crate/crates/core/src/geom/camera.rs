//! Pinhole camera model.

use nalgebra::{Vector2, Vector3};

use super::RigidPose;
use crate::{Error, Result};

/// Pinhole camera: an extrinsic world-to-camera transform plus intrinsics
/// (focal length in pixels, principal point, image resolution).
///
/// The camera looks down its local +z axis; points with non-positive depth
/// in the camera frame are not projectable.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World-to-camera transform (scale is always 1 for physical cameras).
    pub extrinsic: RigidPose,
    /// Focal length in pixels (same for x and y).
    pub focal: f64,
    /// Principal point in pixel coordinates.
    pub principal_point: Vector2<f64>,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Camera at `eye` looking toward `target`, with `up` fixing the roll.
    /// Image x points right, image y points down.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = nalgebra::Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let extrinsic = RigidPose {
            rotation,
            translation: -(rotation * eye),
            scale: 1.0,
        };
        Camera {
            extrinsic,
            focal,
            principal_point: Vector2::new(width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
        }
    }

    /// World-space position of the optical center.
    pub fn center(&self) -> Vector3<f64> {
        self.extrinsic.inverse().apply(Vector3::zeros())
    }

    /// Transforms a world point into the camera frame.
    pub fn to_camera_frame(&self, world: Vector3<f64>) -> Vector3<f64> {
        self.extrinsic.apply(world)
    }

    /// Projects a world point to pixel coordinates:
    /// `focal * (x/z, y/z) + principal_point` in the camera frame.
    /// Errors with the offending depth when `z <= 0`.
    pub fn project(&self, world: Vector3<f64>) -> Result<Vector2<f64>> {
        Ok(self.project_with_depth(world)?.0)
    }

    /// Like `project` but also returns the camera-frame depth.
    pub fn project_with_depth(&self, world: Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let p = self.to_camera_frame(world);
        if p.z <= 0.0 {
            return Err(Error::NonProjectable(p.z));
        }
        let pix = self.focal * Vector2::new(p.x / p.z, p.y / p.z) + self.principal_point;
        Ok((pix, p.z))
    }

    /// True if the pixel position lies inside the image rectangle.
    pub fn contains_pixel(&self, pix: Vector2<f64>) -> bool {
        pix.x >= 0.0 && pix.y >= 0.0 && pix.x < self.width as f64 && pix.y < self.height as f64
    }
}
