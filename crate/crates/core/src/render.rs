//! Canonical forward render path.
//!
//! One render pass is: rasterize the posed mesh, look up the appearance maps
//! at every covered pixel's UV coordinate, and shade pointwise — ambient plus
//! SH-lit diffuse plus the Blinn-Phong lobe under the dominant light derived
//! from the SH environment. The same building blocks drive both the
//! synthetic-data generator and the model-fitting residuals, so a recovered
//! state reproduces its own renders exactly. Values stay linear `f64`
//! throughout; clamping and quantization happen only when an image is written.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::geom::{
    rasterize, splat_vertex_attribute, Camera, ImageBuf, Mesh, RenderOutput, RigidPose, UvCoverage,
    UvRaster,
};
use crate::shading::{shade_total_point, ShLighting};
use crate::Result;

/// Default Blinn-Phong shininess exponent.
pub const DEFAULT_SHININESS: f64 = 5.0;

/// Texture-space description of the surface appearance.
///
/// `diffuse` is the effective diffuse albedo (base plus any displacement)
/// and `specular` the scalar Blinn-Phong albedo, both in `[0, 255]`.
/// `normal` holds unit surface normals in the model frame; they are rotated
/// by the pose when shading.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub diffuse: UvRaster<Vector3<f64>>,
    pub specular: UvRaster<f64>,
    pub normal: UvRaster<Vector3<f64>>,
    pub shininess: f64,
}

impl Appearance {
    /// Purely diffuse appearance: zero specular map at the same resolution.
    pub fn lambertian(diffuse: UvRaster<Vector3<f64>>, normal: UvRaster<Vector3<f64>>) -> Self {
        let specular = UvRaster::filled(diffuse.width, diffuse.height, 0.0);
        Appearance {
            diffuse,
            specular,
            normal,
            shininess: DEFAULT_SHININESS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.diffuse.width, self.diffuse.height);
        if self.specular.width != w
            || self.specular.height != h
            || self.normal.width != w
            || self.normal.height != h
        {
            return Err(crate::Error::Dimension(format!(
                "appearance maps disagree on resolution: diffuse {w}x{h}, specular {}x{}, normal {}x{}",
                self.specular.width, self.specular.height, self.normal.width, self.normal.height
            )));
        }
        if !(self.shininess > 0.0) {
            return Err(crate::Error::Parameter(format!(
                "shininess must be positive, got {}",
                self.shininess
            )));
        }
        for n in &self.normal.data {
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(crate::Error::Parameter(format!(
                    "normal map texel has norm {:.6}, expected 1",
                    n.norm()
                )));
            }
        }
        Ok(())
    }
}

/// Interpolated UVs can leave `[0, 1]` by a rounding ulp at chart borders;
/// samples clamp back into range before the bilinear lookup.
fn clamp_uv(uv: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(uv.x.clamp(0.0, 1.0), uv.y.clamp(0.0, 1.0))
}

/// Shades every covered pixel of a rasterization against appearance maps.
///
/// `pose` must be the pose the rasterization was produced with; its rotation
/// carries the sampled model-frame normals into the world frame. Uncovered
/// pixels keep the `background` color.
pub fn shade_pixels(
    geom: &RenderOutput,
    pose: &RigidPose,
    appearance: &Appearance,
    lighting: &ShLighting,
    background: Vector3<f64>,
) -> Result<ImageBuf> {
    let data: Vec<Vector3<f64>> = (0..geom.mask.len())
        .into_par_iter()
        .map(|i| -> Result<Vector3<f64>> {
            if !geom.mask[i] {
                return Ok(background);
            }
            let uv = clamp_uv(geom.uv[i]);
            let albedo = appearance.diffuse.sample(uv)?;
            let c_s = appearance.specular.sample(uv)?;
            let n_model = appearance.normal.sample(uv)?;
            let norm = n_model.norm();
            let n_world = if norm > 1e-12 {
                pose.rotation * (n_model / norm)
            } else {
                pose.rotation * Vector3::z()
            };
            Ok(shade_total_point(
                albedo,
                c_s,
                n_world,
                geom.view_vec[i],
                lighting,
                appearance.shininess,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(ImageBuf {
        width: geom.width,
        height: geom.height,
        data,
    })
}

/// Full render of one view: rasterize, then shade. Returns the image together
/// with the per-pixel geometry for downstream consumers (masks, depths, UVs).
pub fn render_view(
    mesh: &Mesh,
    pose: &RigidPose,
    camera: &Camera,
    appearance: &Appearance,
    lighting: &ShLighting,
) -> Result<(ImageBuf, RenderOutput)> {
    let geom = rasterize(mesh, pose, camera);
    let image = shade_pixels(&geom, pose, appearance, lighting, Vector3::zeros())?;
    Ok((image, geom))
}

/// Bakes per-vertex unit normals into a UV-space normal map.
///
/// Covered texels interpolate the vertex normals of the covering triangle and
/// renormalize; uncovered texels receive the normalized mean of the covered
/// ones (or +z when nothing is covered), so bilinear samples near chart
/// borders stay well-conditioned.
pub fn bake_normal_map(
    coverage: &UvCoverage,
    triangles: &[[u32; 3]],
    normals: &[Vector3<f64>],
) -> UvRaster<Vector3<f64>> {
    let mut map = splat_vertex_attribute(coverage, triangles, normals, Vector3::zeros());
    let mut mean = Vector3::zeros();
    for (idx, value) in map.data.iter_mut().enumerate() {
        if coverage.tri[idx] != u32::MAX {
            let norm = value.norm();
            if norm > 1e-12 {
                *value /= norm;
            } else {
                *value = Vector3::z();
            }
            mean += *value;
        }
    }
    let fill = if mean.norm() > 1e-12 {
        mean.normalize()
    } else {
        Vector3::z()
    };
    for (idx, value) in map.data.iter_mut().enumerate() {
        if coverage.tri[idx] == u32::MAX {
            *value = fill;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facemodel::{generate_synthetic_model, FitCoefficients};
    use crate::shading::shade_diffuse;
    use approx::assert_relative_eq;

    fn test_scene() -> (Mesh, RigidPose, Camera, UvCoverage, Vec<[u32; 3]>) {
        let model = generate_synthetic_model(5, 661 * 2, 4, 3, 4).unwrap();
        let mesh = model
            .synthesize_shape(&FitCoefficients::zeros(&model))
            .unwrap();
        let pose = RigidPose::identity();
        let camera = Camera::look_at(
            Vector3::new(0.0, 0.0, 4.0),
            Vector3::zeros(),
            Vector3::y(),
            140.0,
            96,
            96,
        );
        let coverage = model.uv_coverage(48, 48);
        let triangles = model.triangles.clone();
        (mesh, pose, camera, coverage, triangles)
    }

    fn dc_lighting(r: f64, g: f64, b: f64, ambient: f64) -> ShLighting {
        let mut light = ShLighting::zero();
        light.coeffs[0][0] = r;
        light.coeffs[1][0] = g;
        light.coeffs[2][0] = b;
        light.ambient = Vector3::new(ambient, ambient, ambient);
        light
    }

    #[test]
    fn dc_lighting_with_constant_albedo_renders_flat() {
        let (mesh, pose, camera, coverage, triangles) = test_scene();
        let albedo = Vector3::new(120.0, 90.0, 60.0);
        let appearance = Appearance::lambertian(
            UvRaster::filled(48, 48, albedo),
            bake_normal_map(&coverage, &triangles, &mesh.normals),
        );
        let light = dc_lighting(1.5, 1.2, 0.9, 4.0);
        let (image, geom) = render_view(&mesh, &pose, &camera, &appearance, &light).unwrap();
        assert!(geom.coverage() > 500);
        // The DC irradiance is normal-independent, so every covered pixel has
        // the same analytic value.
        let expected = light.ambient + shade_diffuse(albedo, Vector3::z(), &light);
        for i in 0..geom.mask.len() {
            if geom.mask[i] {
                assert_relative_eq!(image.data[i], expected, epsilon = 1e-9);
            } else {
                assert_eq!(image.data[i], Vector3::zeros());
            }
        }
    }

    #[test]
    fn zero_specular_map_matches_pointwise_lambertian_shading_bitwise() {
        let (mesh, pose, camera, coverage, triangles) = test_scene();
        let normal_map = bake_normal_map(&coverage, &triangles, &mesh.normals);
        let mut diffuse = UvRaster::filled(48, 48, Vector3::zeros());
        for j in 0..48u32 {
            for i in 0..48u32 {
                let c = 60.0 + 3.0 * i as f64 + 1.5 * j as f64;
                diffuse.set(i, j, Vector3::new(c, 0.8 * c, 0.6 * c));
            }
        }
        let appearance = Appearance::lambertian(diffuse.clone(), normal_map.clone());
        let mut light = dc_lighting(1.4, 1.4, 1.4, 6.0);
        light.coeffs[0][1] = 0.4;
        light.coeffs[1][3] = -0.3;
        light.coeffs[2][6] = 0.2;
        let (image, geom) = render_view(&mesh, &pose, &camera, &appearance, &light).unwrap();
        for i in 0..geom.mask.len() {
            if !geom.mask[i] {
                continue;
            }
            let uv = clamp_uv(geom.uv[i]);
            let albedo = diffuse.sample(uv).unwrap();
            let n = (pose.rotation * normal_map.sample(uv).unwrap()).normalize();
            let expected = light.ambient + shade_diffuse(albedo, n, &light);
            assert_eq!(image.data[i], expected);
        }
    }

    #[test]
    fn specular_map_adds_energy_only_near_the_highlight() {
        let (mesh, pose, camera, coverage, triangles) = test_scene();
        let normal_map = bake_normal_map(&coverage, &triangles, &mesh.normals);
        let diffuse = UvRaster::filled(48, 48, Vector3::new(100.0, 100.0, 100.0));
        let matte = Appearance::lambertian(diffuse.clone(), normal_map.clone());
        let mut shiny = matte.clone();
        // Specular albedo confined to the left third of the texture: pixels
        // sampling the zero region must match the matte render bitwise.
        let mut spec = UvRaster::filled(48, 48, 0.0);
        for j in 0..48 {
            for i in 0..16 {
                spec.set(i, j, 80.0);
            }
        }
        shiny.specular = spec;
        // Strong directional component toward +z so the highlight faces the
        // camera.
        let mut light = dc_lighting(1.5, 1.5, 1.5, 2.0);
        light.coeffs[0][2] = 0.9;
        light.coeffs[1][2] = 0.9;
        light.coeffs[2][2] = 0.9;
        let (flat, geom) = render_view(&mesh, &pose, &camera, &matte, &light).unwrap();
        let (glossy, _) = render_view(&mesh, &pose, &camera, &shiny, &light).unwrap();
        let mut brighter = 0usize;
        let mut equal = 0usize;
        for i in 0..geom.mask.len() {
            if !geom.mask[i] {
                assert_eq!(glossy.data[i], flat.data[i]);
                continue;
            }
            let d = glossy.data[i] - flat.data[i];
            assert!(d.min() >= 0.0, "specular must only add energy");
            if d.norm() > 1e-9 {
                brighter += 1;
            } else {
                equal += 1;
            }
        }
        // The lobe is localized: some pixels catch the highlight, grazing
        // ones do not.
        assert!(brighter > 50, "highlight missing ({brighter} lit pixels)");
        assert!(equal > 0, "specular lobe should not cover the whole patch");
    }

    #[test]
    fn rendering_is_deterministic() {
        let (mesh, pose, camera, coverage, triangles) = test_scene();
        let appearance = Appearance {
            diffuse: UvRaster::filled(48, 48, Vector3::new(130.0, 110.0, 95.0)),
            specular: UvRaster::filled(48, 48, 35.0),
            normal: bake_normal_map(&coverage, &triangles, &mesh.normals),
            shininess: 5.0,
        };
        let mut light = dc_lighting(1.3, 1.2, 1.1, 5.0);
        light.coeffs[0][3] = 0.35;
        light.coeffs[1][3] = 0.35;
        light.coeffs[2][3] = 0.35;
        let (a, _) = render_view(&mesh, &pose, &camera, &appearance, &light).unwrap();
        let (b, _) = render_view(&mesh, &pose, &camera, &appearance, &light).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baked_normal_map_is_unit_and_close_to_vertex_normals() {
        let (mesh, _, _, coverage, triangles) = test_scene();
        let map = bake_normal_map(&coverage, &triangles, &mesh.normals);
        for n in &map.data {
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-12);
        }
        // At each covered texel the baked normal agrees with the bary
        // interpolation it came from.
        let mut checked = 0;
        for j in 0..coverage.height {
            for i in 0..coverage.width {
                let idx = coverage.texel_index(i, j);
                if coverage.tri[idx] == u32::MAX {
                    continue;
                }
                let tri = triangles[coverage.tri[idx] as usize];
                let b = coverage.bary[idx];
                let interp = (mesh.normals[tri[0] as usize] * b[0]
                    + mesh.normals[tri[1] as usize] * b[1]
                    + mesh.normals[tri[2] as usize] * b[2])
                    .normalize();
                assert_relative_eq!(map.data[idx], interp, epsilon = 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn mismatched_map_resolutions_fail_validation() {
        let appearance = Appearance {
            diffuse: UvRaster::filled(8, 8, Vector3::zeros()),
            specular: UvRaster::filled(4, 8, 0.0),
            normal: UvRaster::filled(8, 8, Vector3::z()),
            shininess: 5.0,
        };
        assert!(appearance.validate().is_err());
    }
}
