//! PCA parametric model of face shape and diffuse albedo, plus a synthetic
//! model generator used in place of proprietary scan-derived data.
//!
//! Shape: `S = S_mean + A_id x_id + A_exp x_exp`; albedo:
//! `C_d = C_mean + A_alb x_alb`, clamped to [0, 255] and baked into UV space.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::geom::{rasterize_uv_topology, splat_vertex_attribute, Mesh, UvCoverage, UvRaster};
use crate::rng::stream;
use crate::{Error, Result};

/// Linear face model: mean shape/albedo with orthonormal deformation bases
/// (`basis^T basis = I` columnwise) and per-component standard deviations
/// used by the fitting regularizer. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricModel {
    /// Interleaved (x, y, z) per vertex; length `3 * num_vertices`.
    pub mean_shape: DVector<f64>,
    /// Interleaved (r, g, b) per vertex in [0, 255].
    pub mean_albedo: DVector<f64>,
    pub basis_id: DMatrix<f64>,
    pub basis_exp: DMatrix<f64>,
    pub basis_alb: DMatrix<f64>,
    pub sigma_id: DVector<f64>,
    pub sigma_exp: DVector<f64>,
    pub sigma_alb: DVector<f64>,
    pub triangles: Vec<[u32; 3]>,
    pub uvs: Vec<Vector2<f64>>,
    /// Seed the synthetic generator was run with (0 for external models).
    pub seed: u64,
}

/// Coefficients for one fitted face.
#[derive(Debug, Clone, PartialEq)]
pub struct FitCoefficients {
    pub x_id: DVector<f64>,
    pub x_exp: DVector<f64>,
    pub x_alb: DVector<f64>,
}

impl FitCoefficients {
    pub fn zeros(model: &ParametricModel) -> Self {
        FitCoefficients {
            x_id: DVector::zeros(model.k_id()),
            x_exp: DVector::zeros(model.k_exp()),
            x_alb: DVector::zeros(model.k_alb()),
        }
    }
}

impl ParametricModel {
    pub fn num_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }
    pub fn k_id(&self) -> usize {
        self.basis_id.ncols()
    }
    pub fn k_exp(&self) -> usize {
        self.basis_exp.ncols()
    }
    pub fn k_alb(&self) -> usize {
        self.basis_alb.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n3 = self.mean_shape.len();
        if n3 % 3 != 0 || n3 == 0 {
            return Err(Error::Dimension(format!(
                "mean shape length {n3} is not a positive multiple of 3"
            )));
        }
        if self.mean_albedo.len() != n3 {
            return Err(Error::Dimension(
                "mean albedo length disagrees with mean shape".into(),
            ));
        }
        for (name, basis, sigma) in [
            ("id", &self.basis_id, &self.sigma_id),
            ("exp", &self.basis_exp, &self.sigma_exp),
            ("alb", &self.basis_alb, &self.sigma_alb),
        ] {
            if basis.nrows() != n3 {
                return Err(Error::Dimension(format!("basis_{name} row count mismatch")));
            }
            if basis.ncols() != sigma.len() {
                return Err(Error::Dimension(format!(
                    "basis_{name} has {} columns but {} sigmas",
                    basis.ncols(),
                    sigma.len()
                )));
            }
            if sigma.iter().any(|&s| s <= 0.0) {
                return Err(Error::Parameter(format!(
                    "sigma_{name} entries must be positive"
                )));
            }
        }
        if self.mean_albedo.iter().any(|&a| !(0.0..=255.0).contains(&a)) {
            return Err(Error::Parameter(
                "mean albedo entries must lie in [0, 255]".into(),
            ));
        }
        let nv = self.num_vertices();
        if self.uvs.len() != nv {
            return Err(Error::Dimension("uv count disagrees with vertex count".into()));
        }
        for tri in &self.triangles {
            if tri.iter().any(|&i| i as usize >= nv) {
                return Err(Error::Dimension("triangle index out of range".into()));
            }
        }
        Ok(())
    }

    /// Validates that a coefficient vector matches this model's basis sizes.
    pub fn check_coeffs(&self, c: &FitCoefficients) -> Result<()> {
        if c.x_id.len() != self.k_id()
            || c.x_exp.len() != self.k_exp()
            || c.x_alb.len() != self.k_alb()
        {
            return Err(Error::Dimension(format!(
                "coefficient lengths ({}, {}, {}) disagree with model ({}, {}, {})",
                c.x_id.len(),
                c.x_exp.len(),
                c.x_alb.len(),
                self.k_id(),
                self.k_exp(),
                self.k_alb()
            )));
        }
        Ok(())
    }

    /// Shape synthesis: mean plus identity and expression deformations, with
    /// vertex normals recomputed from the deformed surface.
    pub fn synthesize_shape(&self, c: &FitCoefficients) -> Result<Mesh> {
        self.check_coeffs(c)?;
        let flat = &self.mean_shape + &self.basis_id * &c.x_id + &self.basis_exp * &c.x_exp;
        let vertices: Vec<Vector3<f64>> = flat
            .as_slice()
            .chunks_exact(3)
            .map(|v| Vector3::new(v[0], v[1], v[2]))
            .collect();
        let mut mesh = Mesh {
            vertices,
            normals: Vec::new(),
            uvs: self.uvs.clone(),
            triangles: self.triangles.clone(),
        };
        mesh.recompute_normals();
        Ok(mesh)
    }

    /// Per-vertex albedo from the PCA combination, clamped to [0, 255].
    pub fn vertex_albedo(&self, c: &FitCoefficients) -> Result<Vec<Vector3<f64>>> {
        self.check_coeffs(c)?;
        let flat = &self.mean_albedo + &self.basis_alb * &c.x_alb;
        Ok(flat
            .as_slice()
            .chunks_exact(3)
            .map(|v| {
                Vector3::new(
                    v[0].clamp(0.0, 255.0),
                    v[1].clamp(0.0, 255.0),
                    v[2].clamp(0.0, 255.0),
                )
            })
            .collect())
    }

    /// UV coverage of the model topology at the given map resolution.
    pub fn uv_coverage(&self, width: u32, height: u32) -> UvCoverage {
        rasterize_uv_topology(&self.uvs, &self.triangles, width, height)
    }

    /// Albedo synthesis baked into a UV raster via the model topology.
    /// Uncovered texels receive the average vertex albedo.
    pub fn synthesize_albedo(
        &self,
        c: &FitCoefficients,
        coverage: &UvCoverage,
    ) -> Result<UvRaster<Vector3<f64>>> {
        let per_vertex = self.vertex_albedo(c)?;
        let fill = per_vertex.iter().sum::<Vector3<f64>>() / per_vertex.len() as f64;
        Ok(splat_vertex_attribute(
            coverage,
            &self.triangles,
            &per_vertex,
            fill,
        ))
    }

    /// Landmark vertex indices: per-axis extrema of the mean shape, the
    /// vertex farthest off the best-fit ellipsoid (the bump apex), and a
    /// fixed UV lattice of interior points. Deterministic for a model and
    /// independent of fit coefficients.
    pub fn landmark_vertices(&self) -> Vec<u32> {
        let nv = self.num_vertices();
        let vertex = |i: usize| {
            Vector3::new(
                self.mean_shape[3 * i],
                self.mean_shape[3 * i + 1],
                self.mean_shape[3 * i + 2],
            )
        };
        let mut picks: Vec<u32> = Vec::new();
        // Extrema along the coordinate axes.
        for axis in 0..3 {
            let mut lo = (0usize, f64::INFINITY);
            let mut hi = (0usize, f64::NEG_INFINITY);
            for i in 0..nv {
                let c = self.mean_shape[3 * i + axis];
                if c < lo.1 {
                    lo = (i, c);
                }
                if c > hi.1 {
                    hi = (i, c);
                }
            }
            picks.push(lo.0 as u32);
            picks.push(hi.0 as u32);
        }
        // Bump apex: largest residual against the best-fit quadric
        // w1 x^2 + w2 y^2 + w3 z^2 + w4 x + w5 y + w6 z = 1.
        let residuals = ellipsoid_residuals(&(0..nv).map(vertex).collect::<Vec<_>>());
        let apex = residuals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i as u32)
            .unwrap_or(0);
        picks.push(apex);
        // Interior lattice by nearest UV.
        for &u in &[0.25, 0.5, 0.75] {
            for &v in &[0.2, 0.4, 0.6, 0.8] {
                let target = Vector2::new(u, v);
                let mut best = (0usize, f64::INFINITY);
                for (i, uv) in self.uvs.iter().enumerate() {
                    let d = (uv - target).norm_squared();
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                picks.push(best.0 as u32);
            }
        }
        // Deduplicate preserving order.
        let mut seen = vec![false; nv];
        picks.retain(|&i| {
            let fresh = !seen[i as usize];
            seen[i as usize] = true;
            fresh
        });
        picks
    }
}

/// Algebraic residuals of each point against the least-squares axis-aligned
/// quadric `w1 x^2 + w2 y^2 + w3 z^2 + w4 x + w5 y + w6 z = 1`.
pub fn ellipsoid_residuals(points: &[Vector3<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut design = DMatrix::zeros(n, 6);
    for (i, p) in points.iter().enumerate() {
        design[(i, 0)] = p.x * p.x;
        design[(i, 1)] = p.y * p.y;
        design[(i, 2)] = p.z * p.z;
        design[(i, 3)] = p.x;
        design[(i, 4)] = p.y;
        design[(i, 5)] = p.z;
    }
    let rhs = DVector::repeat(n, 1.0);
    let normal = design.transpose() * &design;
    let w = normal
        .cholesky()
        .map(|ch| ch.solve(&(design.transpose() * &rhs)))
        .unwrap_or_else(|| DVector::zeros(6));
    (&design * w - rhs).iter().copied().collect()
}

/// Grid dimensions (rows, cols) for `z` vertices: the divisor pair of `z`
/// closest to square with at least 2 rows.
fn grid_dimensions(z: usize) -> Result<(usize, usize)> {
    let mut r = (z as f64).sqrt().floor() as usize;
    while r >= 2 {
        if z % r == 0 {
            return Ok((r, z / r));
        }
        r -= 1;
    }
    Err(Error::Parameter(format!(
        "vertex count {z} has no divisor pair with at least 2 rows"
    )))
}

const ELLIPSOID_RADII: Vector3<f64> = Vector3::new(0.9, 1.2, 1.0);
const BUMP_AMPLITUDE: f64 = 0.25;
const BUMP_SIGMA: f64 = 0.21; // radians in parameter space

/// Surface point of the synthetic face patch at grid parameters
/// `(u, v) ∈ [0,1]^2`: an ellipsoid patch facing +z (polar angle from +y)
/// with a nose-like Gaussian bump at the patch center.
fn patch_point(u: f64, v: f64) -> Vector3<f64> {
    let theta = (50.0 + 80.0 * v).to_radians();
    let phi = (-60.0 + 120.0 * u).to_radians();
    let dir = Vector3::new(
        theta.sin() * phi.sin(),
        theta.cos(),
        theta.sin() * phi.cos(),
    );
    let base = ELLIPSOID_RADII.component_mul(&dir);
    let center_theta = 90f64.to_radians();
    let d2 = (theta - center_theta).powi(2) + phi.powi(2);
    let bump = BUMP_AMPLITUDE * (-d2 / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp();
    base + bump * dir
}

/// Smooth low-frequency scalar field over the grid parameters.
struct SinusoidField {
    fu: f64,
    fv: f64,
    pu: f64,
    pv: f64,
}

impl SinusoidField {
    fn draw(rng: &mut impl Rng) -> Self {
        SinusoidField {
            fu: rng.gen_range(0.5..2.5),
            fv: rng.gen_range(0.5..2.5),
            pu: rng.gen_range(0.0..std::f64::consts::TAU),
            pv: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }
    fn eval(&self, u: f64, v: f64) -> f64 {
        (std::f64::consts::PI * self.fu * u + self.pu).sin()
            * (std::f64::consts::PI * self.fv * v + self.pv).sin()
    }
}

/// Modified Gram-Schmidt orthonormalization of the columns in place.
/// Errors if a column becomes numerically dependent on the previous ones.
fn orthonormalize_columns(m: &mut DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for prev in 0..j {
            let dot = m.column(j).dot(&m.column(prev));
            let prev_col = m.column(prev).clone_owned();
            let mut col = m.column_mut(j);
            col.axpy(-dot, &prev_col, 1.0);
        }
        let norm = m.column(j).norm();
        if norm < 1e-10 {
            return Err(Error::Parameter(format!(
                "basis column {j} is numerically dependent; choose a smaller basis"
            )));
        }
        m.column_mut(j).unscale_mut(norm);
    }
    Ok(())
}

/// Generates a synthetic parametric model. Deterministic in `seed`.
///
/// The mean shape is an open ellipsoid patch with a protruding center bump
/// (for view-dependent occlusion); identity/albedo bases are smooth global
/// sinusoid fields and the expression basis is windowed to the lower third
/// of the patch with per-axis zero mean; all bases are orthonormalized.
/// The mean albedo is a smooth color field with dark speckle features.
pub fn generate_synthetic_model(
    seed: u64,
    z: usize,
    k_id: usize,
    k_exp: usize,
    k_alb: usize,
) -> Result<ParametricModel> {
    if z < 4 {
        return Err(Error::Parameter(format!("vertex count {z} < 4")));
    }
    if k_id == 0 || k_exp == 0 || k_alb == 0 {
        return Err(Error::Parameter("basis sizes must be at least 1".into()));
    }
    let (rows, cols) = grid_dimensions(z)?;

    // Grid geometry, UVs, triangles.
    let mut params = Vec::with_capacity(z);
    let mut vertices = Vec::with_capacity(z);
    let mut uvs = Vec::with_capacity(z);
    for i in 0..rows {
        for j in 0..cols {
            let u = j as f64 / (cols - 1) as f64;
            let v = i as f64 / (rows - 1) as f64;
            params.push((u, v));
            vertices.push(patch_point(u, v));
            uvs.push(Vector2::new(u, v));
        }
    }
    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for i in 0..rows - 1 {
        for j in 0..cols - 1 {
            let v00 = (i * cols + j) as u32;
            let v10 = ((i + 1) * cols + j) as u32;
            let v01 = (i * cols + j + 1) as u32;
            let v11 = ((i + 1) * cols + j + 1) as u32;
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }

    let mut mean_shape = DVector::zeros(3 * z);
    for (i, p) in vertices.iter().enumerate() {
        mean_shape[3 * i] = p.x;
        mean_shape[3 * i + 1] = p.y;
        mean_shape[3 * i + 2] = p.z;
    }

    // Deformation bases: per-column random sinusoid field times a random
    // axis amplitude; expression columns additionally windowed to the lower
    // third (large v) and made zero-mean per axis.
    let build_basis = |rng: &mut rand_chacha::ChaCha12Rng,
                       k: usize,
                       window: &dyn Fn(f64) -> f64,
                       zero_mean: bool|
     -> Result<DMatrix<f64>> {
        let mut basis = DMatrix::zeros(3 * z, k);
        for col in 0..k {
            let field = SinusoidField::draw(rng);
            let amp: Vector3<f64> = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            for (i, &(u, v)) in params.iter().enumerate() {
                let f = field.eval(u, v) * window(v);
                for axis in 0..3 {
                    basis[(3 * i + axis, col)] = amp[axis] * f;
                }
            }
            if zero_mean {
                for axis in 0..3 {
                    let mean: f64 =
                        (0..z).map(|i| basis[(3 * i + axis, col)]).sum::<f64>() / z as f64;
                    for i in 0..z {
                        basis[(3 * i + axis, col)] -= mean;
                    }
                }
            }
        }
        orthonormalize_columns(&mut basis)?;
        Ok(basis)
    };

    let no_window = |_: f64| 1.0;
    let lower_third = |v: f64| {
        // Smoothstep from 0 at v=0.6 to 1 at v=0.75.
        let t = ((v - 0.6) / 0.15).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };
    let basis_id = build_basis(&mut stream(seed, "model-id-basis"), k_id, &no_window, false)?;
    let basis_exp = build_basis(
        &mut stream(seed, "model-exp-basis"),
        k_exp,
        &lower_third,
        true,
    )?;
    let basis_alb = build_basis(&mut stream(seed, "model-alb-basis"), k_alb, &no_window, false)?;

    // Mean albedo: smooth skin-like field plus dark speckles, clamped.
    let mut mean_albedo = DVector::zeros(3 * z);
    {
        let mut rng = stream(seed, "model-albedo-mean");
        let base = Vector3::new(205.0, 165.0, 140.0);
        let fields: Vec<(SinusoidField, Vector3<f64>)> = (0..3)
            .map(|_| {
                let f = SinusoidField::draw(&mut rng);
                let amp = Vector3::new(
                    rng.gen_range(8.0..25.0),
                    rng.gen_range(8.0..25.0),
                    rng.gen_range(8.0..25.0),
                );
                (f, amp)
            })
            .collect();
        for (i, &(u, v)) in params.iter().enumerate() {
            let mut color = base;
            for (field, amp) in &fields {
                color += *amp * field.eval(u, v);
            }
            for c in 0..3 {
                mean_albedo[3 * i + c] = color[c];
            }
        }
        // Speckles: localized dark features.
        let count = (z / 150).max(3);
        for _ in 0..count {
            let center = Vector2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let radius: f64 = rng.gen_range(0.015..0.04);
            let depth = rng.gen_range(30.0..80.0);
            let tint = Vector3::new(1.0, 0.9, 0.8);
            for (i, &(u, v)) in params.iter().enumerate() {
                let d2 = (Vector2::new(u, v) - center).norm_squared();
                if d2 < (3.0 * radius) * (3.0 * radius) {
                    let fall = (-d2 / (radius * radius)).exp();
                    for c in 0..3 {
                        mean_albedo[3 * i + c] -= depth * fall * tint[c];
                    }
                }
            }
        }
        for a in mean_albedo.iter_mut() {
            *a = a.clamp(0.0, 255.0);
        }
    }

    let mut sigma_rng = stream(seed, "model-sigmas");
    let mut draw_sigmas = |k: usize| {
        DVector::from_fn(k, |_, _| {
            let lo: f64 = 0.3;
            let hi: f64 = 3.0;
            (sigma_rng.gen_range(lo.ln()..hi.ln())).exp()
        })
    };
    let sigma_id = draw_sigmas(k_id);
    let sigma_exp = draw_sigmas(k_exp);
    let sigma_alb = draw_sigmas(k_alb);

    let model = ParametricModel {
        mean_shape,
        mean_albedo,
        basis_id,
        basis_exp,
        basis_alb,
        sigma_id,
        sigma_exp,
        sigma_alb,
        triangles,
        uvs,
        seed,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_model() -> ParametricModel {
        generate_synthetic_model(11, 600, 8, 4, 8).unwrap()
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_synthetic_model(42, 300, 4, 3, 4).unwrap();
        let b = generate_synthetic_model(42, 300, 4, 3, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_synthetic_model(1, 300, 4, 3, 4).unwrap();
        let b = generate_synthetic_model(2, 300, 4, 3, 4).unwrap();
        assert_ne!(a.mean_albedo, b.mean_albedo);
    }

    #[test]
    fn bases_are_orthonormal() {
        let model = small_model();
        for basis in [&model.basis_id, &model.basis_exp, &model.basis_alb] {
            let gram = basis.transpose() * basis;
            for r in 0..gram.nrows() {
                for c in 0..gram.ncols() {
                    let expected = if r == c { 1.0 } else { 0.0 };
                    assert!(
                        (gram[(r, c)] - expected).abs() < 1e-8,
                        "gram[{r},{c}] = {}",
                        gram[(r, c)]
                    );
                }
            }
        }
    }

    #[test]
    fn requested_dimensions_are_honored() {
        let model = generate_synthetic_model(3, 2562, 8, 4, 8).unwrap();
        assert_eq!(model.basis_id.nrows(), 7686);
        assert_eq!(model.basis_id.ncols(), 8);
        assert_eq!(model.num_vertices(), 2562);
        let mesh = model.synthesize_shape(&FitCoefficients::zeros(&model)).unwrap();
        mesh.validate().unwrap();
    }

    #[test]
    fn prime_vertex_count_is_rejected() {
        assert!(generate_synthetic_model(1, 601, 4, 3, 4).is_err());
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        assert!(generate_synthetic_model(1, 3, 4, 3, 4).is_err());
        assert!(generate_synthetic_model(1, 300, 0, 3, 4).is_err());
    }

    #[test]
    fn zero_coefficients_give_the_mean_shape() {
        let model = small_model();
        let mesh = model.synthesize_shape(&FitCoefficients::zeros(&model)).unwrap();
        for (i, v) in mesh.vertices.iter().enumerate() {
            assert_eq!(v.x, model.mean_shape[3 * i]);
            assert_eq!(v.y, model.mean_shape[3 * i + 1]);
            assert_eq!(v.z, model.mean_shape[3 * i + 2]);
        }
    }

    #[test]
    fn single_coefficient_adds_one_basis_column() {
        let model = small_model();
        let mut c = FitCoefficients::zeros(&model);
        let alpha = 0.37;
        c.x_id[1] = alpha;
        let mesh = model.synthesize_shape(&c).unwrap();
        for i in 0..model.num_vertices() {
            for axis in 0..3 {
                let expected =
                    model.mean_shape[3 * i + axis] + alpha * model.basis_id[(3 * i + axis, 1)];
                assert_relative_eq!(mesh.vertices[i][axis], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn shape_synthesis_is_affine_in_coefficients() {
        let model = small_model();
        let mut rng = crate::rng::stream(5, "affine-test");
        let draw = |rng: &mut rand_chacha::ChaCha12Rng, model: &ParametricModel| {
            let mut c = FitCoefficients::zeros(model);
            for v in c.x_id.iter_mut().chain(c.x_exp.iter_mut()).chain(c.x_alb.iter_mut()) {
                *v = rng.gen_range(-1.0..1.0);
            }
            c
        };
        let a = draw(&mut rng, &model);
        let b = draw(&mut rng, &model);
        let sum = FitCoefficients {
            x_id: &a.x_id + &b.x_id,
            x_exp: &a.x_exp + &b.x_exp,
            x_alb: &a.x_alb + &b.x_alb,
        };
        let zero = model.synthesize_shape(&FitCoefficients::zeros(&model)).unwrap();
        let ma = model.synthesize_shape(&a).unwrap();
        let mb = model.synthesize_shape(&b).unwrap();
        let msum = model.synthesize_shape(&sum).unwrap();
        for i in 0..model.num_vertices() {
            let lhs = ma.vertices[i] + mb.vertices[i] - zero.vertices[i];
            assert_relative_eq!(lhs, msum.vertices[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn coefficient_length_mismatch_is_an_error() {
        let model = small_model();
        let mut c = FitCoefficients::zeros(&model);
        c.x_exp = DVector::zeros(model.k_exp() + 1);
        assert!(model.synthesize_shape(&c).is_err());
    }

    #[test]
    fn zero_coefficients_bake_the_mean_albedo() {
        let model = small_model();
        let cov = model.uv_coverage(32, 32);
        let map = model
            .synthesize_albedo(&FitCoefficients::zeros(&model), &cov)
            .unwrap();
        // Compare a few covered texels against direct barycentric blending
        // of the mean albedo.
        let mut checked = 0;
        for j in 0..32 {
            for i in 0..32 {
                let idx = cov.texel_index(i, j);
                if cov.tri[idx] == u32::MAX {
                    continue;
                }
                let tri = model.triangles[cov.tri[idx] as usize];
                let b = cov.bary[idx];
                let mut expected = Vector3::zeros();
                for (k, &vi) in tri.iter().enumerate() {
                    let vi = vi as usize;
                    expected += b[k]
                        * Vector3::new(
                            model.mean_albedo[3 * vi],
                            model.mean_albedo[3 * vi + 1],
                            model.mean_albedo[3 * vi + 2],
                        );
                }
                assert_relative_eq!(map.get(i, j), expected, epsilon = 1e-10);
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn albedo_is_clamped_at_zero() {
        let model = small_model();
        let mut c = FitCoefficients::zeros(&model);
        // Rattle the albedo coefficients hard enough to push vertices
        // negative before the clamp.
        for v in c.x_alb.iter_mut() {
            *v = 1e6;
        }
        let per_vertex = model.vertex_albedo(&c).unwrap();
        assert!(per_vertex
            .iter()
            .all(|v| v.iter().all(|&ch| (0.0..=255.0).contains(&ch))));
        let flat = &model.mean_albedo + &model.basis_alb * &c.x_alb;
        assert!(
            flat.iter().any(|&v| v < 0.0) && flat.iter().any(|&v| v > 255.0),
            "perturbation should overflow the range before clamping"
        );
    }

    #[test]
    fn single_basis_albedo_matches_hand_computation() {
        let model = small_model();
        let mut c = FitCoefficients::zeros(&model);
        c.x_alb[2] = 5.0;
        let per_vertex = model.vertex_albedo(&c).unwrap();
        for i in (0..model.num_vertices()).step_by(97) {
            for ch in 0..3 {
                let expected = (model.mean_albedo[3 * i + ch]
                    + 5.0 * model.basis_alb[(3 * i + ch, 2)])
                .clamp(0.0, 255.0);
                assert_relative_eq!(per_vertex[i][ch], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn landmarks_are_valid_stable_and_plentiful() {
        let model = small_model();
        let first = model.landmark_vertices();
        let second = model.landmark_vertices();
        assert_eq!(first, second);
        assert!(first.len() >= 17, "only {} landmarks", first.len());
        assert!(first.iter().all(|&i| (i as usize) < model.num_vertices()));
        let unique: std::collections::BTreeSet<u32> = first.iter().copied().collect();
        assert_eq!(unique.len(), first.len());
    }

    #[test]
    fn bump_apex_is_a_landmark() {
        let model = small_model();
        // Independent apex scan: fit the quadric with a pseudoinverse
        // (different solve path than the production Cholesky) and take the
        // largest absolute residual.
        let nv = model.num_vertices();
        let points: Vec<Vector3<f64>> = (0..nv)
            .map(|i| {
                Vector3::new(
                    model.mean_shape[3 * i],
                    model.mean_shape[3 * i + 1],
                    model.mean_shape[3 * i + 2],
                )
            })
            .collect();
        let mut design = DMatrix::zeros(nv, 6);
        for (i, p) in points.iter().enumerate() {
            design[(i, 0)] = p.x * p.x;
            design[(i, 1)] = p.y * p.y;
            design[(i, 2)] = p.z * p.z;
            design[(i, 3)] = p.x;
            design[(i, 4)] = p.y;
            design[(i, 5)] = p.z;
        }
        let rhs = DVector::repeat(nv, 1.0);
        let w = design
            .clone()
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .unwrap();
        let residuals = &design * w - rhs;
        let apex = residuals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0 as u32;
        let landmarks = model.landmark_vertices();
        assert!(
            landmarks.contains(&apex),
            "apex {apex} missing from {landmarks:?}"
        );
    }

    #[test]
    fn mean_mesh_has_outward_normals() {
        // Outward means pointing away from the centroid for this patch.
        let model = small_model();
        let mesh = model.synthesize_shape(&FitCoefficients::zeros(&model)).unwrap();
        let centroid: Vector3<f64> =
            mesh.vertices.iter().sum::<Vector3<f64>>() / mesh.vertices.len() as f64;
        let mut outward = 0usize;
        for (v, n) in mesh.vertices.iter().zip(mesh.normals.iter()) {
            if n.dot(&(v - centroid)) > 0.0 {
                outward += 1;
            }
        }
        assert!(outward as f64 > 0.95 * mesh.vertices.len() as f64);
    }
}
