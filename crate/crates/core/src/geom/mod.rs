//! Triangle meshes, rigid transforms, pinhole cameras, a z-buffer software
//! rasterizer and UV-space raster maps.

mod camera;
mod img;
mod mesh;
mod raster;
mod uvmap;

pub use camera::Camera;
pub use img::ImageBuf;
pub use mesh::{
    rotation_about_axis, rotation_from_axis_angle, skew, so3_left_jacobian, Mesh, RigidPose,
};
pub use raster::{rasterize, RenderOutput};
pub use uvmap::{rasterize_uv_topology, splat_vertex_attribute, UvCoverage, UvRaster};
