//! Stage 1 — multi-view model fitting.
//!
//! Estimates `X = {x_id, x_alb, x_exp, R, t, s, l, ambient}` from two
//! calibrated views by minimizing
//!
//! ```text
//! E = E_con + w_l · E_lan + w_r · E_reg
//! ```
//!
//! with photo-consistency `E_con` (per-view mean squared pixel difference
//! against the diffuse-only render), landmark reprojection `E_lan` and the
//! PCA coefficient penalty `E_reg`. The schedule is staged: (a) pose only
//! from landmarks, warm-started by a closed-form similarity alignment on
//! triangulated landmark pairs; (b) pose plus identity/expression from
//! landmarks and the regularizer; (c) lighting, ambient and albedo
//! coefficients against the photo term with geometry frozen. Each stage runs
//! the damped Gauss-Newton solver, so accepted energies never increase.
//! Specular reflection is deliberately excluded here; it is estimated later
//! from cross-view differences.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::facemodel::{FitCoefficients, ParametricModel};
use crate::geom::{
    rasterize, rotation_about_axis, skew, so3_left_jacobian, Camera, ImageBuf, Mesh, RenderOutput,
    RigidPose, UvCoverage, UvRaster,
};
use crate::optim::{gauss_newton, GaussNewtonOptions, LeastSquaresProblem};
use crate::render::{bake_normal_map, shade_pixels, Appearance};
use crate::shading::{sh_basis, ShLighting, SH_COUNT};
use crate::{Error, Result};

/// Energy contributed by a landmark whose vertex projects behind the camera;
/// keeps the objective finite instead of failing mid-solve.
pub const LANDMARK_MISS_PENALTY: f64 = 1e6;

/// Complete Stage-1 unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub coeffs: FitCoefficients,
    pub pose: RigidPose,
    pub lighting: ShLighting,
}

impl FitState {
    /// Zero coefficients, identity pose, zero lighting.
    pub fn neutral(model: &ParametricModel) -> FitState {
        FitState {
            coeffs: FitCoefficients::zeros(model),
            pose: RigidPose::identity(),
            lighting: ShLighting::zero(),
        }
    }
}

/// One calibrated input view: image plus 2D landmark observations
/// `(model vertex index, observed pixel)`.
#[derive(Debug, Clone)]
pub struct FitView {
    pub camera: Camera,
    pub image: ImageBuf,
    pub landmarks: Vec<(u32, Vector2<f64>)>,
}

/// Energy weights. `photo` scales the photo-consistency term; setting it to
/// zero skips the appearance stage entirely (landmark-only fitting).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitWeights {
    pub landmark: f64,
    pub regularization: f64,
    pub photo: f64,
}

impl Default for FitWeights {
    fn default() -> Self {
        FitWeights {
            landmark: 10.0,
            regularization: 5e-5,
            photo: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub weights: FitWeights,
    /// Resolution of the internal albedo/normal UV maps.
    pub uv_resolution: u32,
    pub solver: GaussNewtonOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            weights: FitWeights::default(),
            uv_resolution: 128,
            solver: GaussNewtonOptions::default(),
        }
    }
}

/// Solver diagnostics for one `fit_two_views` run.
#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub warnings: Vec<String>,
    /// `(stage name, accepted-cost trace)` per stage, in execution order.
    pub stage_traces: Vec<(String, Vec<f64>)>,
    pub landmark_energy_initial: f64,
    pub landmark_energy_final: f64,
    pub photo_energy_final: f64,
    pub total_energy_final: f64,
}

// ---------------------------------------------------------------------------
// Energies
// ---------------------------------------------------------------------------

/// Landmark reprojection energy: per-view mean squared pixel distance between
/// observations and projections of the posed synthesized vertices, summed
/// over views. Vertices behind a camera contribute `LANDMARK_MISS_PENALTY`.
pub fn landmark_energy(
    model: &ParametricModel,
    state: &FitState,
    views: &[FitView],
) -> Result<f64> {
    let mesh = model.synthesize_shape(&state.coeffs)?;
    let mut total = 0.0;
    for view in views {
        if view.landmarks.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for &(vertex, observed) in &view.landmarks {
            if vertex as usize >= mesh.vertices.len() {
                return Err(Error::Parameter(format!(
                    "landmark vertex index {vertex} out of range"
                )));
            }
            let world = state.pose.apply(mesh.vertices[vertex as usize]);
            sum += match view.camera.project(world) {
                Ok(p) => (p - observed).norm_squared(),
                Err(_) => LANDMARK_MISS_PENALTY,
            };
        }
        total += sum / view.landmarks.len() as f64;
    }
    Ok(total)
}

/// PCA coefficient penalty `Σ (x/σ)²` over identity, albedo and expression.
pub fn regularization_energy(model: &ParametricModel, coeffs: &FitCoefficients) -> Result<f64> {
    model.check_coeffs(coeffs)?;
    let term = |x: &DVector<f64>, sigma: &DVector<f64>| -> f64 {
        x.iter()
            .zip(sigma.iter())
            .map(|(v, s)| (v / s) * (v / s))
            .sum()
    };
    Ok(term(&coeffs.x_id, &model.sigma_id)
        + term(&coeffs.x_alb, &model.sigma_alb)
        + term(&coeffs.x_exp, &model.sigma_exp))
}

/// Diffuse-only UV maps synthesized from a coefficient vector: the canonical
/// appearance a Stage-1 state renders with.
pub fn stage1_appearance(
    model: &ParametricModel,
    coeffs: &FitCoefficients,
    mesh: &Mesh,
    uv_resolution: u32,
) -> Result<(Appearance, UvCoverage)> {
    let coverage = model.uv_coverage(uv_resolution, uv_resolution);
    let diffuse = model.synthesize_albedo(coeffs, &coverage)?;
    let normal = bake_normal_map(&coverage, &model.triangles, &mesh.normals);
    Ok((Appearance::lambertian(diffuse, normal), coverage))
}

/// Photo-consistency energy: for each view, the mean over covered pixels of
/// the squared RGB difference between the state's diffuse-only render and the
/// input image, summed over views.
pub fn photo_consistency(
    model: &ParametricModel,
    state: &FitState,
    views: &[FitView],
    uv_resolution: u32,
) -> Result<f64> {
    let mesh = model.synthesize_shape(&state.coeffs)?;
    let (appearance, _) = stage1_appearance(model, &state.coeffs, &mesh, uv_resolution)?;
    let mut total = 0.0;
    for (v, view) in views.iter().enumerate() {
        let geom = rasterize(&mesh, &state.pose, &view.camera);
        let rendered = shade_pixels(&geom, &state.pose, &appearance, &state.lighting, Vector3::zeros())?;
        if view.image.data.len() != rendered.data.len() {
            return Err(Error::Dimension(format!(
                "view {v}: image is {}x{}, camera expects {}x{}",
                view.image.width, view.image.height, geom.width, geom.height
            )));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..geom.mask.len() {
            if geom.mask[i] {
                sum += (rendered.data[i] - view.image.data[i]).norm_squared();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::FitDegenerate(format!(
                "view {v} has no visible face pixels"
            )));
        }
        total += sum / count as f64;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Geometry helpers
// ---------------------------------------------------------------------------

/// Projection of a world point and its 2×3 Jacobian in the world coordinates.
/// `None` when the point is not in front of the camera.
fn project_with_jacobian(camera: &Camera, world: Vector3<f64>) -> Option<(Vector2<f64>, Matrix2x3<f64>)> {
    let p = camera.to_camera_frame(world);
    if p.z <= 1e-9 {
        return None;
    }
    let pixel = camera.focal * Vector2::new(p.x / p.z, p.y / p.z) + camera.principal_point;
    let f = camera.focal;
    let d_cam = Matrix2x3::new(
        f / p.z,
        0.0,
        -f * p.x / (p.z * p.z),
        0.0,
        f / p.z,
        -f * p.y / (p.z * p.z),
    );
    Some((pixel, d_cam * camera.extrinsic.rotation))
}

/// World-space ray through a pixel: `(origin, unit direction)`.
fn pixel_ray(camera: &Camera, pixel: Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let dir_cam = Vector3::new(
        (pixel.x - camera.principal_point.x) / camera.focal,
        (pixel.y - camera.principal_point.y) / camera.focal,
        1.0,
    )
    .normalize();
    (
        camera.center(),
        camera.extrinsic.rotation.transpose() * dir_cam,
    )
}

/// Least-squares midpoint of two rays; `None` when they are near parallel.
fn triangulate_rays(
    o1: Vector3<f64>,
    d1: Vector3<f64>,
    o2: Vector3<f64>,
    d2: Vector3<f64>,
) -> Option<Vector3<f64>> {
    let b = d1.dot(&d2);
    let det = 1.0 - b * b;
    if det < 1e-10 {
        return None;
    }
    let w = o1 - o2;
    let e = d1.dot(&w);
    let f = d2.dot(&w);
    let t1 = (b * f - e) / det;
    let t2 = (f - b * e) / det;
    Some(0.5 * ((o1 + t1 * d1) + (o2 + t2 * d2)))
}

/// Closed-form similarity alignment (rotation, uniform scale, translation)
/// mapping `src` onto `dst` in least squares; `None` for degenerate inputs.
fn similarity_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<RigidPose> {
    if src.len() < 3 || src.len() != dst.len() {
        return None;
    }
    let n = src.len() as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst.iter()) {
        let cs = s - mu_s;
        let cd = d - mu_d;
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s < 1e-12 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = (svd.singular_values.dot(&sign.diagonal())) / var_s;
    if !(scale > 1e-9) || !scale.is_finite() {
        return None;
    }
    let translation = mu_d - scale * (rotation * mu_s);
    let pose = RigidPose {
        rotation,
        translation,
        scale,
    };
    pose.validate(1e-6).ok()?;
    Some(pose)
}

/// Nearest proper rotation to `m` (polar factor via SVD).
fn reorthonormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return m;
    };
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    u * sign * v_t
}

// ---------------------------------------------------------------------------
// Landmark least-squares problem (stages a and b)
// ---------------------------------------------------------------------------

/// Which shape coefficients a landmark stage optimizes on top of the fixed
/// `base` coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeDofs {
    /// Pose only; the shape is fully determined by `base`.
    PoseOnly,
    /// Identity and expression both free (the main two-view fit).
    IdAndExp,
    /// Expression free, identity frozen at `base` (new-frame tracking).
    ExpOnly,
}

/// Parameters `[ω(3), t(3), log s]` plus the shape coefficients selected by
/// `dofs`. The rotation is `exp(ωₓ) · R0` around a fixed stage anchor `R0`;
/// each stage re-centers `ω = 0` so the SO(3) left Jacobian starts exact.
struct LandmarkProblem<'a> {
    model: &'a ParametricModel,
    views: &'a [FitView],
    r0: Matrix3<f64>,
    dofs: ShapeDofs,
    /// Fixed coefficients underlying the free ones (zeros in the main fit,
    /// the warm-start coefficients when tracking new frames).
    base: FitCoefficients,
    /// √(weight) applied to landmark residuals (1 in stage a, √w_l in b).
    landmark_scale: f64,
    /// √(w_r) applied to the coefficient penalty rows (0 disables them).
    reg_scale: f64,
}

impl LandmarkProblem<'_> {
    fn unpack(&self, x: &DVector<f64>) -> (Vector3<f64>, Vector3<f64>, f64, FitCoefficients) {
        let omega = Vector3::new(x[0], x[1], x[2]);
        let t = Vector3::new(x[3], x[4], x[5]);
        let log_s = x[6];
        let mut coeffs = self.base.clone();
        let (k_id, k_exp) = (self.model.k_id(), self.model.k_exp());
        match self.dofs {
            ShapeDofs::PoseOnly => {}
            ShapeDofs::IdAndExp => {
                coeffs.x_id.copy_from(&x.rows(7, k_id));
                coeffs.x_exp.copy_from(&x.rows(7 + k_id, k_exp));
            }
            ShapeDofs::ExpOnly => {
                coeffs.x_exp.copy_from(&x.rows(7, k_exp));
            }
        }
        (omega, t, log_s, coeffs)
    }

    fn pose_at(&self, x: &DVector<f64>) -> RigidPose {
        let (omega, t, log_s, _) = self.unpack(x);
        RigidPose {
            rotation: reorthonormalize(rotation_about_axis(omega) * self.r0),
            translation: t,
            scale: log_s.exp(),
        }
    }

    fn vertex_position(&self, coeffs: &FitCoefficients, vertex: usize) -> Vector3<f64> {
        let mut p = Vector3::new(
            self.model.mean_shape[3 * vertex],
            self.model.mean_shape[3 * vertex + 1],
            self.model.mean_shape[3 * vertex + 2],
        );
        for k in 0..self.model.k_id() {
            for c in 0..3 {
                p[c] += self.model.basis_id[(3 * vertex + c, k)] * coeffs.x_id[k];
            }
        }
        for k in 0..self.model.k_exp() {
            for c in 0..3 {
                p[c] += self.model.basis_exp[(3 * vertex + c, k)] * coeffs.x_exp[k];
            }
        }
        p
    }

    fn shape_dim(&self) -> usize {
        match self.dofs {
            ShapeDofs::PoseOnly => 0,
            ShapeDofs::IdAndExp => self.model.k_id() + self.model.k_exp(),
            ShapeDofs::ExpOnly => self.model.k_exp(),
        }
    }
}

impl LeastSquaresProblem for LandmarkProblem<'_> {
    fn dim(&self) -> usize {
        7 + self.shape_dim()
    }

    fn eval(&mut self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (omega, t, log_s, coeffs) = self.unpack(x);
        let rot = rotation_about_axis(omega) * self.r0;
        let s = log_s.exp();
        let jl = so3_left_jacobian(omega);
        let (k_id, k_exp) = (self.model.k_id(), self.model.k_exp());

        let n_landmarks: usize = self.views.iter().map(|v| v.landmarks.len()).sum();
        let n_reg = if self.reg_scale > 0.0 {
            self.shape_dim()
        } else {
            0
        };
        let mut r = DVector::zeros(2 * n_landmarks + n_reg);
        let mut j = DMatrix::zeros(2 * n_landmarks + n_reg, self.dim());

        let mut row = 0;
        for view in self.views {
            if view.landmarks.is_empty() {
                continue;
            }
            let sigma = self.landmark_scale / (view.landmarks.len() as f64).sqrt();
            for &(vertex, observed) in &view.landmarks {
                let shape_pt = self.vertex_position(&coeffs, vertex as usize);
                let rotated = rot * shape_pt;
                let world = s * rotated + t;
                match project_with_jacobian(&view.camera, world) {
                    Some((pixel, d_world)) => {
                        let res = sigma * (pixel - observed);
                        r[row] = res.x;
                        r[row + 1] = res.y;
                        // ∂world/∂ω = s · (−[R S]ₓ · J_l)
                        let d_omega = -s * skew(rotated) * jl;
                        // ∂world/∂t = I, ∂world/∂log s = s·R·S
                        let block = sigma * d_world;
                        let j_omega = block * d_omega;
                        let j_logs = block * (s * rotated);
                        for c in 0..3 {
                            j[(row, c)] = j_omega[(0, c)];
                            j[(row + 1, c)] = j_omega[(1, c)];
                            j[(row, 3 + c)] = block[(0, c)];
                            j[(row + 1, 3 + c)] = block[(1, c)];
                        }
                        j[(row, 6)] = j_logs.x;
                        j[(row + 1, 6)] = j_logs.y;
                        let vr = 3 * vertex as usize;
                        if self.dofs == ShapeDofs::IdAndExp {
                            for k in 0..k_id {
                                let col = Vector3::new(
                                    self.model.basis_id[(vr, k)],
                                    self.model.basis_id[(vr + 1, k)],
                                    self.model.basis_id[(vr + 2, k)],
                                );
                                let d = block * (s * (rot * col));
                                j[(row, 7 + k)] = d.x;
                                j[(row + 1, 7 + k)] = d.y;
                            }
                        }
                        if self.dofs != ShapeDofs::PoseOnly {
                            let exp0 = 7 + if self.dofs == ShapeDofs::IdAndExp { k_id } else { 0 };
                            for k in 0..k_exp {
                                let col = Vector3::new(
                                    self.model.basis_exp[(vr, k)],
                                    self.model.basis_exp[(vr + 1, k)],
                                    self.model.basis_exp[(vr + 2, k)],
                                );
                                let d = block * (s * (rot * col));
                                j[(row, exp0 + k)] = d.x;
                                j[(row + 1, exp0 + k)] = d.y;
                            }
                        }
                    }
                    None => {
                        // Flat, finite penalty; no useful gradient direction.
                        let miss = sigma * (LANDMARK_MISS_PENALTY / 2.0).sqrt();
                        r[row] = miss;
                        r[row + 1] = miss;
                    }
                }
                row += 2;
            }
        }
        if n_reg > 0 {
            if self.dofs == ShapeDofs::IdAndExp {
                for k in 0..k_id {
                    r[row] = self.reg_scale * coeffs.x_id[k] / self.model.sigma_id[k];
                    j[(row, 7 + k)] = self.reg_scale / self.model.sigma_id[k];
                    row += 1;
                }
            }
            let exp0 = 7 + if self.dofs == ShapeDofs::IdAndExp { k_id } else { 0 };
            for k in 0..k_exp {
                r[row] = self.reg_scale * coeffs.x_exp[k] / self.model.sigma_exp[k];
                j[(row, exp0 + k)] = self.reg_scale / self.model.sigma_exp[k];
                row += 1;
            }
        }
        (r, j)
    }
}

// ---------------------------------------------------------------------------
// Appearance least-squares problem (stage c)
// ---------------------------------------------------------------------------

/// One covered pixel of one view, with the albedo affine map
/// `A(x_alb) = a0 + arow · x_alb` (rows per channel) and the SH basis of its
/// sampled normal precomputed. Geometry is frozen in stage (c), so these
/// never change during the solve.
struct PixelTerm {
    obs: Vector3<f64>,
    basis: [f64; SH_COUNT],
    a0: Vector3<f64>,
    /// Row-major `3 × k_alb`.
    arow: Vec<f64>,
    scale: f64,
}

struct AppearanceProblem<'a> {
    model: &'a ParametricModel,
    pixels: Vec<PixelTerm>,
    reg_scale: f64,
}

impl AppearanceProblem<'_> {
    /// Parameter layout: `[l_r(9), l_g(9), l_b(9), ambient(3), x_alb]`.
    fn k_alb(&self) -> usize {
        self.model.k_alb()
    }
}

impl LeastSquaresProblem for AppearanceProblem<'_> {
    fn dim(&self) -> usize {
        3 * SH_COUNT + 3 + self.k_alb()
    }

    fn eval(&mut self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let k_alb = self.k_alb();
        let n_rows = 3 * self.pixels.len() + if self.reg_scale > 0.0 { k_alb } else { 0 };
        let mut r = DVector::zeros(n_rows);
        let mut j = DMatrix::zeros(n_rows, self.dim());
        let ambient_at = 3 * SH_COUNT;
        let alb_at = ambient_at + 3;

        for (p, term) in self.pixels.iter().enumerate() {
            for c in 0..3 {
                let row = 3 * p + c;
                let mut irr = 0.0;
                for k in 0..SH_COUNT {
                    irr += x[c * SH_COUNT + k] * term.basis[k];
                }
                let mut albedo = term.a0[c];
                for k in 0..k_alb {
                    albedo += term.arow[c * k_alb + k] * x[alb_at + k];
                }
                r[row] = term.scale * (x[ambient_at + c] + albedo * irr - term.obs[c]);
                j[(row, ambient_at + c)] = term.scale;
                for k in 0..SH_COUNT {
                    j[(row, c * SH_COUNT + k)] = term.scale * albedo * term.basis[k];
                }
                for k in 0..k_alb {
                    j[(row, alb_at + k)] = term.scale * term.arow[c * k_alb + k] * irr;
                }
            }
        }
        if self.reg_scale > 0.0 {
            for k in 0..k_alb {
                let row = 3 * self.pixels.len() + k;
                r[row] = self.reg_scale * x[alb_at + k] / self.model.sigma_alb[k];
                j[(row, alb_at + k)] = self.reg_scale / self.model.sigma_alb[k];
            }
        }
        (r, j)
    }
}

/// Per-texel affine albedo maps: `texel = t0 + trow · x_alb` (unclamped),
/// mirroring `synthesize_albedo`'s splat-plus-average-fill arithmetic.
struct AlbedoAffine {
    width: u32,
    height: u32,
    /// Per texel: constant RGB offset.
    t0: Vec<Vector3<f64>>,
    /// Per texel: row-major `3 × k_alb` coefficient block.
    trow: Vec<Vec<f64>>,
}

fn albedo_affine(model: &ParametricModel, coverage: &UvCoverage) -> AlbedoAffine {
    let k_alb = model.k_alb();
    let nv = model.num_vertices();
    // Uncovered texels receive the mean vertex albedo, which is itself an
    // affine function of x_alb.
    let mut fill0 = Vector3::zeros();
    let mut fill_row = vec![0.0; 3 * k_alb];
    for v in 0..nv {
        for c in 0..3 {
            fill0[c] += model.mean_albedo[3 * v + c];
            for k in 0..k_alb {
                fill_row[c * k_alb + k] += model.basis_alb[(3 * v + c, k)];
            }
        }
    }
    fill0 /= nv as f64;
    for w in fill_row.iter_mut() {
        *w /= nv as f64;
    }

    let n = (coverage.width * coverage.height) as usize;
    let mut t0 = vec![Vector3::zeros(); n];
    let mut trow = vec![vec![0.0; 3 * k_alb]; n];
    for idx in 0..n {
        if coverage.tri[idx] == u32::MAX {
            t0[idx] = fill0;
            trow[idx].copy_from_slice(&fill_row);
            continue;
        }
        let tri = model.triangles[coverage.tri[idx] as usize];
        let bary = coverage.bary[idx];
        for (slot, &v) in tri.iter().enumerate() {
            let w = bary[slot];
            for c in 0..3 {
                t0[idx][c] += w * model.mean_albedo[3 * v as usize + c];
                for k in 0..k_alb {
                    trow[idx][c * k_alb + k] += w * model.basis_alb[(3 * v as usize + c, k)];
                }
            }
        }
    }
    AlbedoAffine {
        width: coverage.width,
        height: coverage.height,
        t0,
        trow,
    }
}

/// Gathers the pixel terms of one view for the appearance stage.
fn collect_pixel_terms(
    affine: &AlbedoAffine,
    normal_map: &UvRaster<Vector3<f64>>,
    pose: &RigidPose,
    geom: &RenderOutput,
    image: &ImageBuf,
    scale: f64,
    out: &mut Vec<PixelTerm>,
) -> Result<()> {
    let k_alb = affine.trow.first().map_or(0, |r| r.len() / 3);
    for i in 0..geom.mask.len() {
        if !geom.mask[i] {
            continue;
        }
        let uv = Vector2::new(geom.uv[i].x.clamp(0.0, 1.0), geom.uv[i].y.clamp(0.0, 1.0));
        let n_model = normal_map.sample(uv)?;
        let n_world = pose.rotation
            * if n_model.norm() > 1e-12 {
                n_model.normalize()
            } else {
                Vector3::z()
            };
        let footprint = {
            // Reuse the raster's bilinear footprint by sampling through a
            // probe map of matching dimensions.
            let probe = UvRaster::<f64> {
                width: affine.width,
                height: affine.height,
                data: Vec::new(),
            };
            probe.sample_footprint(uv)?
        };
        let mut a0 = Vector3::zeros();
        let mut arow = vec![0.0; 3 * k_alb];
        for (ti, tj, w) in footprint {
            let idx = (tj * affine.width + ti) as usize;
            a0 += w * affine.t0[idx];
            for (dst, src) in arow.iter_mut().zip(affine.trow[idx].iter()) {
                *dst += w * src;
            }
        }
        out.push(PixelTerm {
            obs: image.data[i],
            basis: sh_basis(n_world),
            a0,
            arow,
            scale,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Full staged fit
// ---------------------------------------------------------------------------

/// Runs the staged two-view fit. Returns the recovered state and a report
/// with warnings, per-stage cost traces, and final energies.
pub fn fit_two_views(
    model: &ParametricModel,
    views: &[FitView],
    opts: &FitOptions,
) -> Result<(FitState, FitReport)> {
    if views.len() != 2 {
        return Err(Error::Parameter(format!(
            "two-view fitting needs exactly 2 views, got {}",
            views.len()
        )));
    }
    for (i, view) in views.iter().enumerate() {
        if view.landmarks.len() < 6 {
            return Err(Error::Parameter(format!(
                "view {i} has {} landmarks; at least 6 are required",
                view.landmarks.len()
            )));
        }
    }
    let mut report = FitReport::default();

    let cam_gap = (views[0].camera.center() - views[1].camera.center()).norm();
    if cam_gap < 1e-9 {
        report
            .warnings
            .push("degenerate camera pair: identical viewpoints".to_string());
    }

    // Closed-form warm start from triangulated landmark pairs.
    let init_pose = initialize_pose(model, views).unwrap_or_else(|| {
        report.warnings.push(
            "landmark triangulation degenerate; starting from the identity pose".to_string(),
        );
        RigidPose::identity()
    });

    let mut state = FitState::neutral(model);
    state.pose = init_pose;
    report.landmark_energy_initial = landmark_energy(model, &state, views)?;

    // Stage (a): pose only, bare landmark energy.
    let mut problem_a = LandmarkProblem {
        model,
        views,
        r0: state.pose.rotation,
        dofs: ShapeDofs::PoseOnly,
        base: FitCoefficients::zeros(model),
        landmark_scale: 1.0,
        reg_scale: 0.0,
    };
    let mut x0 = DVector::zeros(7);
    x0.rows_mut(3, 3).copy_from(&state.pose.translation);
    x0[6] = state.pose.scale.ln();
    let run_a = gauss_newton(&mut problem_a, x0, &opts.solver)?;
    state.pose = problem_a.pose_at(&run_a.x);
    report
        .stage_traces
        .push(("pose".to_string(), run_a.cost_trace.clone()));

    // Stage (b): pose + identity + expression under w_l·E_lan + w_r·E_reg.
    let mut problem_b = LandmarkProblem {
        model,
        views,
        r0: state.pose.rotation,
        dofs: ShapeDofs::IdAndExp,
        base: FitCoefficients::zeros(model),
        landmark_scale: opts.weights.landmark.sqrt(),
        reg_scale: opts.weights.regularization.sqrt(),
    };
    let mut x0 = DVector::zeros(problem_b.dim());
    x0.rows_mut(3, 3).copy_from(&state.pose.translation);
    x0[6] = state.pose.scale.ln();
    let run_b = gauss_newton(&mut problem_b, x0, &opts.solver)?;
    state.pose = problem_b.pose_at(&run_b.x);
    let (_, _, _, coeffs_b) = problem_b.unpack(&run_b.x);
    state.coeffs.x_id = coeffs_b.x_id;
    state.coeffs.x_exp = coeffs_b.x_exp;
    report
        .stage_traces
        .push(("shape".to_string(), run_b.cost_trace.clone()));

    // Stage (c): lighting, ambient, albedo coefficients; geometry frozen.
    if opts.weights.photo > 0.0 {
        let mesh = model.synthesize_shape(&state.coeffs)?;
        let coverage = model.uv_coverage(opts.uv_resolution, opts.uv_resolution);
        let normal_map = bake_normal_map(&coverage, &model.triangles, &mesh.normals);
        let affine = albedo_affine(model, &coverage);
        let mut pixels = Vec::new();
        for (v, view) in views.iter().enumerate() {
            let geom = rasterize(&mesh, &state.pose, &view.camera);
            let covered = geom.coverage();
            if covered == 0 {
                return Err(Error::FitDegenerate(format!(
                    "view {v} has no visible face pixels"
                )));
            }
            if view.image.data.len() != geom.mask.len() {
                return Err(Error::Dimension(format!(
                    "view {v}: image size does not match the camera"
                )));
            }
            let scale = (opts.weights.photo / covered as f64).sqrt();
            collect_pixel_terms(
                &affine,
                &normal_map,
                &state.pose,
                &geom,
                &view.image,
                scale,
                &mut pixels,
            )?;
        }
        let mut problem_c = AppearanceProblem {
            model,
            pixels,
            reg_scale: opts.weights.regularization.sqrt(),
        };
        let x0 = DVector::zeros(problem_c.dim());
        let run_c = gauss_newton(&mut problem_c, x0, &opts.solver)?;
        for c in 0..3 {
            for k in 0..SH_COUNT {
                state.lighting.coeffs[c][k] = run_c.x[c * SH_COUNT + k];
            }
            state.lighting.ambient[c] = run_c.x[3 * SH_COUNT + c];
        }
        state
            .coeffs
            .x_alb
            .copy_from(&run_c.x.rows(3 * SH_COUNT + 3, model.k_alb()));
        report
            .stage_traces
            .push(("appearance".to_string(), run_c.cost_trace.clone()));
        report.photo_energy_final = photo_consistency(model, &state, views, opts.uv_resolution)?;
    }

    report.landmark_energy_final = landmark_energy(model, &state, views)?;
    report.total_energy_final = opts.weights.photo * report.photo_energy_final
        + opts.weights.landmark * report.landmark_energy_final
        + opts.weights.regularization * regularization_energy(model, &state.coeffs)?;
    Ok((state, report))
}

/// Fits a new frame pair against a warm-started state with the person-level
/// unknowns frozen: identity, albedo coefficients, and lighting stay at the
/// warm values, only pose and expression move. Runs a pose-only landmark
/// stage from the warm pose, then pose + expression under
/// `w_l·E_lan + w_r·E_reg` (expression rows only). No appearance stage runs,
/// so `photo_energy_final` stays 0 and the reported total is the landmark
/// plus coefficient energy.
pub fn fit_new_pair(
    model: &ParametricModel,
    warm: &FitState,
    views: &[FitView],
    opts: &FitOptions,
) -> Result<(FitState, FitReport)> {
    if views.len() != 2 {
        return Err(Error::Parameter(format!(
            "two-view fitting needs exactly 2 views, got {}",
            views.len()
        )));
    }
    for (i, view) in views.iter().enumerate() {
        if view.landmarks.len() < 6 {
            return Err(Error::Parameter(format!(
                "view {i} has {} landmarks; at least 6 are required",
                view.landmarks.len()
            )));
        }
    }
    let mut report = FitReport::default();
    let mut state = warm.clone();
    report.landmark_energy_initial = landmark_energy(model, &state, views)?;

    // Stage (a): pose only around the warm shape.
    let mut problem_a = LandmarkProblem {
        model,
        views,
        r0: state.pose.rotation,
        dofs: ShapeDofs::PoseOnly,
        base: warm.coeffs.clone(),
        landmark_scale: 1.0,
        reg_scale: 0.0,
    };
    let mut x0 = DVector::zeros(7);
    x0.rows_mut(3, 3).copy_from(&state.pose.translation);
    x0[6] = state.pose.scale.ln();
    let run_a = gauss_newton(&mut problem_a, x0, &opts.solver)?;
    state.pose = problem_a.pose_at(&run_a.x);
    report
        .stage_traces
        .push(("pose".to_string(), run_a.cost_trace.clone()));

    // Stage (b): pose + expression, identity frozen.
    let mut problem_b = LandmarkProblem {
        model,
        views,
        r0: state.pose.rotation,
        dofs: ShapeDofs::ExpOnly,
        base: warm.coeffs.clone(),
        landmark_scale: opts.weights.landmark.sqrt(),
        reg_scale: opts.weights.regularization.sqrt(),
    };
    let mut x0 = DVector::zeros(problem_b.dim());
    x0.rows_mut(3, 3).copy_from(&state.pose.translation);
    x0[6] = state.pose.scale.ln();
    x0.rows_mut(7, model.k_exp()).copy_from(&warm.coeffs.x_exp);
    let run_b = gauss_newton(&mut problem_b, x0, &opts.solver)?;
    state.pose = problem_b.pose_at(&run_b.x);
    let (_, _, _, coeffs_b) = problem_b.unpack(&run_b.x);
    state.coeffs.x_exp = coeffs_b.x_exp;
    report
        .stage_traces
        .push(("expression".to_string(), run_b.cost_trace.clone()));

    report.landmark_energy_final = landmark_energy(model, &state, views)?;
    report.total_energy_final = opts.weights.landmark * report.landmark_energy_final
        + opts.weights.regularization * regularization_energy(model, &state.coeffs)?;
    Ok((state, report))
}

fn initialize_pose(model: &ParametricModel, views: &[FitView]) -> Option<RigidPose> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for &(vertex, pixel_l) in &views[0].landmarks {
        let Some(&(_, pixel_r)) = views[1].landmarks.iter().find(|(v, _)| *v == vertex) else {
            continue;
        };
        let (o1, d1) = pixel_ray(&views[0].camera, pixel_l);
        let (o2, d2) = pixel_ray(&views[1].camera, pixel_r);
        let Some(world) = triangulate_rays(o1, d1, o2, d2) else {
            continue;
        };
        let v = vertex as usize;
        src.push(Vector3::new(
            model.mean_shape[3 * v],
            model.mean_shape[3 * v + 1],
            model.mean_shape[3 * v + 2],
        ));
        dst.push(world);
    }
    similarity_align(&src, &dst)
}

// ---------------------------------------------------------------------------
// Baking and UV visibility
// ---------------------------------------------------------------------------

/// UV-space outputs of Stage 1 consumed by the reflectance and refinement
/// stages. `diffuse` and `normal` live in the model frame; `coverage` marks
/// texels visible in **both** input views.
#[derive(Debug, Clone)]
pub struct BakedMaps {
    pub diffuse: UvRaster<Vector3<f64>>,
    pub normal: UvRaster<Vector3<f64>>,
    pub coverage: Vec<bool>,
    pub width: u32,
    pub height: u32,
}

/// Per-view, per-texel visibility data for one posed frame.
#[derive(Debug, Clone)]
pub struct ViewVisibility {
    /// Texel visible in this view: covered in UV, front-facing, passing the
    /// depth test, and projecting to a pixel whose bilinear footprint lies
    /// entirely on rasterized face pixels (so image samples at `pixel` never
    /// mix in background).
    pub mask: Vec<bool>,
    /// Projected pixel position (valid where `mask`).
    pub pixel: Vec<Vector2<f64>>,
    /// Unit world-space direction from the surface point toward the camera.
    pub view_dir: Vec<Vector3<f64>>,
}

/// Computes per-texel visibility of a posed mesh in one view, using the
/// view's depth buffer for occlusion.
pub fn uv_visibility(
    mesh: &Mesh,
    pose: &RigidPose,
    camera: &Camera,
    coverage: &UvCoverage,
    geom: &RenderOutput,
) -> ViewVisibility {
    let n = (coverage.width * coverage.height) as usize;
    let mut vis = ViewVisibility {
        mask: vec![false; n],
        pixel: vec![Vector2::zeros(); n],
        view_dir: vec![Vector3::zeros(); n],
    };
    let cam_center = camera.center();
    for idx in 0..n {
        if coverage.tri[idx] == u32::MAX {
            continue;
        }
        let tri = mesh.triangles[coverage.tri[idx] as usize];
        let b = coverage.bary[idx];
        let mut pos = Vector3::zeros();
        let mut normal = Vector3::zeros();
        for (slot, &v) in tri.iter().enumerate() {
            pos += b[slot] * pose.apply(mesh.vertices[v as usize]);
            normal += b[slot] * (pose.rotation * mesh.normals[v as usize]);
        }
        let to_cam = cam_center - pos;
        if normal.dot(&to_cam) <= 0.0 {
            continue;
        }
        let Ok(pixel) = camera.project(pos) else {
            continue;
        };
        if !camera.contains_pixel(pixel) {
            continue;
        }
        let depth = camera.to_camera_frame(pos).z;
        let Some(buffer_depth) = geom.depth_at(pixel.x.floor() as i64, pixel.y.floor() as i64)
        else {
            continue;
        };
        // Generous bias: texels on the visible surface sit at (or slightly
        // off) the rasterized depth; occluded ones are far behind it.
        if depth > buffer_depth * 1.02 + 1e-6 {
            continue;
        }
        // Image samples at `pixel` interpolate a 2x2 block; all of it must be
        // face, or background would bleed into cross-view comparisons.
        let x0 = (pixel.x - 0.5).floor();
        let y0 = (pixel.y - 0.5).floor();
        if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 > (geom.width - 1) as f64
            || y0 + 1.0 > (geom.height - 1) as f64
        {
            continue;
        }
        let (px, py) = (x0 as u32, y0 as u32);
        let footprint_on_face = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .all(|&(dx, dy)| geom.mask[geom.pixel_index(px + dx, py + dy)]);
        if !footprint_on_face {
            continue;
        }
        vis.mask[idx] = true;
        vis.pixel[idx] = pixel;
        vis.view_dir[idx] = to_cam.normalize();
    }
    vis
}

/// Bakes the Stage-1 UV maps: PCA diffuse albedo, interpolated mesh normals,
/// and the both-view visibility flags. Also returns the per-view visibility
/// tables reused by Stage 2.
pub fn bake_maps(
    model: &ParametricModel,
    state: &FitState,
    cameras: &[Camera],
    uv_resolution: u32,
) -> Result<(BakedMaps, Vec<ViewVisibility>)> {
    let mesh = model.synthesize_shape(&state.coeffs)?;
    let coverage = model.uv_coverage(uv_resolution, uv_resolution);
    let diffuse = model.synthesize_albedo(&state.coeffs, &coverage)?;
    let normal = bake_normal_map(&coverage, &model.triangles, &mesh.normals);
    let mut visibilities = Vec::new();
    for camera in cameras {
        let geom = rasterize(&mesh, &state.pose, camera);
        visibilities.push(uv_visibility(&mesh, &state.pose, camera, &coverage, &geom));
    }
    let n = (coverage.width * coverage.height) as usize;
    let mut both = vec![true; n];
    for vis in &visibilities {
        for idx in 0..n {
            both[idx] &= vis.mask[idx];
        }
    }
    if visibilities.is_empty() {
        both = vec![false; n];
    }
    Ok((
        BakedMaps {
            diffuse,
            normal,
            coverage: both,
            width: coverage.width,
            height: coverage.height,
        },
        visibilities,
    ))
}

/// Geodesic distance between two rotations, in radians.
pub fn rotation_geodesic(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let cos = ((a.transpose() * b).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facemodel::generate_synthetic_model;
    use crate::render::render_view;
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    const UV_RES: u32 = 64;

    struct TruthScene {
        model: ParametricModel,
        state: FitState,
        views: Vec<FitView>,
        diameter: f64,
    }

    /// Renders a two-view scene from a known ground-truth state with exact
    /// landmark projections; images stay in f64 (no quantization).
    fn make_scene(seed: u64, yaw: f64) -> TruthScene {
        let model = generate_synthetic_model(seed, 600, 6, 4, 5).unwrap();
        let mut rng = rng::stream(seed, "fitting-test-scene");
        let mut coeffs = FitCoefficients::zeros(&model);
        for k in 0..model.k_id() {
            coeffs.x_id[k] = model.sigma_id[k] * rng.gen_range(-0.8..0.8);
        }
        for k in 0..model.k_exp() {
            coeffs.x_exp[k] = model.sigma_exp[k] * rng.gen_range(-0.6..0.6);
        }
        for k in 0..model.k_alb() {
            coeffs.x_alb[k] = model.sigma_alb[k] * rng.gen_range(-0.8..0.8);
        }
        let pose = RigidPose {
            rotation: rotation_about_axis(Vector3::new(0.02, yaw, -0.015)),
            translation: Vector3::new(0.05, -0.03, 0.1),
            scale: 1.04,
        };
        let mut lighting = ShLighting::zero();
        lighting.coeffs[0] = [1.7, 0.2, 0.4, -0.1, 0.05, 0.1, -0.08, 0.12, 0.06];
        lighting.coeffs[1] = [1.5, 0.15, 0.38, -0.12, 0.04, 0.09, -0.07, 0.1, 0.05];
        lighting.coeffs[2] = [1.3, 0.1, 0.33, -0.09, 0.03, 0.08, -0.06, 0.09, 0.04];
        lighting.ambient = Vector3::new(9.0, 8.0, 7.5);
        let state = FitState {
            coeffs,
            pose,
            lighting,
        };

        let mesh = model.synthesize_shape(&state.coeffs).unwrap();
        let (appearance, _) =
            stage1_appearance(&model, &state.coeffs, &mesh, UV_RES).unwrap();
        let landmark_ids = model.landmark_vertices();
        let make_view = |angle: f64| -> FitView {
            let eye = Vector3::new(4.2 * angle.sin(), 0.25, 4.2 * angle.cos());
            let camera = Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 130.0, 88, 88);
            let (image, _) =
                render_view(&mesh, &state.pose, &camera, &appearance, &state.lighting).unwrap();
            let landmarks = landmark_ids
                .iter()
                .map(|&v| {
                    let world = state.pose.apply(mesh.vertices[v as usize]);
                    (v, camera.project(world).unwrap())
                })
                .collect();
            FitView {
                camera,
                image,
                landmarks,
            }
        };
        let views = vec![make_view(-0.21), make_view(0.21)];
        let (lo, hi) = mesh.bounding_box();
        TruthScene {
            model,
            state,
            views,
            diameter: (hi - lo).norm(),
        }
    }

    #[test]
    fn photo_energy_is_zero_on_self_rendered_views() {
        let scene = make_scene(31, 0.17);
        let e = photo_consistency(&scene.model, &scene.state, &scene.views, UV_RES).unwrap();
        assert!(e < 1e-10, "self-consistency energy {e}");
    }

    #[test]
    fn constant_shift_raises_photo_energy_by_exactly_300() {
        let scene = make_scene(32, 0.1);
        let base = photo_consistency(&scene.model, &scene.state, &scene.views, UV_RES).unwrap();
        let mut shifted = scene.views.clone();
        for px in shifted[1].image.data.iter_mut() {
            *px += Vector3::new(10.0, 10.0, 10.0);
        }
        let e = photo_consistency(&scene.model, &scene.state, &shifted, UV_RES).unwrap();
        assert_relative_eq!(e - base, 300.0, epsilon = 1e-8);
    }

    #[test]
    fn photo_energy_ignores_pixels_outside_the_mask() {
        let scene = make_scene(33, 0.12);
        let base = photo_consistency(&scene.model, &scene.state, &scene.views, UV_RES).unwrap();
        let mesh = scene.model.synthesize_shape(&scene.state.coeffs).unwrap();
        let geom = rasterize(&mesh, &scene.state.pose, &scene.views[0].camera);
        let mut scribbled = scene.views.clone();
        for i in 0..geom.mask.len() {
            if !geom.mask[i] {
                scribbled[0].image.data[i] = Vector3::new(999.0, -50.0, 123.0);
            }
        }
        let e = photo_consistency(&scene.model, &scene.state, &scribbled, UV_RES).unwrap();
        assert_eq!(e, base);
    }

    #[test]
    fn landmark_energy_examples() {
        let scene = make_scene(34, 0.15);
        // Self-consistency.
        let zero = landmark_energy(&scene.model, &scene.state, &scene.views).unwrap();
        assert!(zero < 1e-18, "self landmarks energy {zero}");
        // A (3,4) pixel displacement adds 25/|F| to that view's mean.
        let mut moved = scene.views.clone();
        let f = moved[0].landmarks.len() as f64;
        moved[0].landmarks[2].1 += Vector2::new(3.0, 4.0);
        let e = landmark_energy(&scene.model, &scene.state, &moved).unwrap();
        assert_relative_eq!(e - zero, 25.0 / f, epsilon = 1e-10);
        // Order independence.
        let mut shuffled = moved.clone();
        shuffled[0].landmarks.reverse();
        shuffled[1].landmarks.rotate_left(3);
        let e2 = landmark_energy(&scene.model, &scene.state, &shuffled).unwrap();
        assert_relative_eq!(e, e2, epsilon = 1e-12);
    }

    #[test]
    fn landmark_energy_penalizes_points_behind_the_camera() {
        let scene = make_scene(35, 0.1);
        let mut state = scene.state.clone();
        // Push the face far behind the cameras.
        state.pose.translation = Vector3::new(0.0, 0.0, 40.0);
        let e = landmark_energy(&scene.model, &state, &scene.views).unwrap();
        assert_relative_eq!(e, 2.0 * LANDMARK_MISS_PENALTY, epsilon = 1e-6);
    }

    #[test]
    fn regularization_energy_examples() {
        let model = generate_synthetic_model(36, 300, 4, 3, 5).unwrap();
        let mut coeffs = FitCoefficients::zeros(&model);
        assert_eq!(regularization_energy(&model, &coeffs).unwrap(), 0.0);
        coeffs.x_id.copy_from(&model.sigma_id);
        coeffs.x_exp.copy_from(&model.sigma_exp);
        coeffs.x_alb.copy_from(&model.sigma_alb);
        let full = regularization_energy(&model, &coeffs).unwrap();
        assert_relative_eq!(full, (4 + 3 + 5) as f64, epsilon = 1e-12);
        let single = full;
        coeffs.x_id[0] *= 2.0;
        let doubled = regularization_energy(&model, &coeffs).unwrap();
        assert_relative_eq!(doubled - single, 3.0, epsilon = 1e-12); // 4-1 extra
    }

    #[test]
    fn landmark_jacobian_matches_finite_differences() {
        let scene = make_scene(37, 0.14);
        let mut problem = LandmarkProblem {
            model: &scene.model,
            views: &scene.views,
            r0: rotation_about_axis(Vector3::new(0.05, 0.1, -0.02)),
            dofs: ShapeDofs::IdAndExp,
            base: FitCoefficients::zeros(&scene.model),
            landmark_scale: 10f64.sqrt(),
            reg_scale: 5e-5f64.sqrt(),
        };
        let mut rng = rng::stream(99, "landmark-jacobian");
        let mut x = DVector::zeros(problem.dim());
        for v in x.iter_mut() {
            *v = rng.gen_range(-0.08..0.08);
        }
        x[5] += 0.1; // keep the face in front of the cameras
        let (r0, j) = problem.eval(&x);
        let h = 1e-6;
        for col in 0..problem.dim() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let (rp, _) = problem.eval(&xp);
            let (rm, _) = problem.eval(&xm);
            let fd = (rp - rm) / (2.0 * h);
            for row in 0..r0.len() {
                let err = (j[(row, col)] - fd[row]).abs() / fd[row].abs().max(1.0);
                assert!(
                    err < 1e-5,
                    "Jacobian mismatch at ({row},{col}): {} vs {}",
                    j[(row, col)],
                    fd[row]
                );
            }
        }
    }

    #[test]
    fn expression_only_jacobian_matches_finite_differences() {
        // The tracking mode keeps identity at a nonzero base; its Jacobian
        // must stay consistent with the re-indexed expression columns.
        let scene = make_scene(38, 0.11);
        let mut problem = LandmarkProblem {
            model: &scene.model,
            views: &scene.views,
            r0: rotation_about_axis(Vector3::new(-0.03, 0.08, 0.01)),
            dofs: ShapeDofs::ExpOnly,
            base: scene.state.coeffs.clone(),
            landmark_scale: 10f64.sqrt(),
            reg_scale: 5e-5f64.sqrt(),
        };
        let mut rng = rng::stream(101, "exp-jacobian");
        let mut x = DVector::zeros(problem.dim());
        for v in x.iter_mut() {
            *v = rng.gen_range(-0.08..0.08);
        }
        x[5] += 0.1;
        let (r0, j) = problem.eval(&x);
        assert_eq!(problem.dim(), 7 + scene.model.k_exp());
        let h = 1e-6;
        for col in 0..problem.dim() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let (rp, _) = problem.eval(&xp);
            let (rm, _) = problem.eval(&xm);
            let fd = (rp - rm) / (2.0 * h);
            for row in 0..r0.len() {
                let err = (j[(row, col)] - fd[row]).abs() / fd[row].abs().max(1.0);
                assert!(
                    err < 1e-5,
                    "Jacobian mismatch at ({row},{col}): {} vs {}",
                    j[(row, col)],
                    fd[row]
                );
            }
        }
    }

    #[test]
    fn similarity_alignment_recovers_a_known_transform() {
        let mut rng = rng::stream(7, "umeyama");
        let src: Vec<Vector3<f64>> = (0..10)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let truth = RigidPose {
            rotation: rotation_about_axis(Vector3::new(0.4, -0.2, 0.7)),
            translation: Vector3::new(0.3, -1.2, 2.0),
            scale: 1.37,
        };
        let dst: Vec<Vector3<f64>> = src.iter().map(|&p| truth.apply(p)).collect();
        let rec = similarity_align(&src, &dst).unwrap();
        assert!(rotation_geodesic(&rec.rotation, &truth.rotation) < 1e-9);
        assert_relative_eq!(rec.scale, truth.scale, epsilon = 1e-9);
        assert_relative_eq!(rec.translation, truth.translation, epsilon = 1e-9);
    }

    #[test]
    fn triangulation_recovers_a_projected_point() {
        let cam_l = Camera::look_at(Vector3::new(-1.0, 0.2, 4.0), Vector3::zeros(), Vector3::y(), 120.0, 64, 64);
        let cam_r = Camera::look_at(Vector3::new(1.2, -0.1, 4.0), Vector3::zeros(), Vector3::y(), 120.0, 64, 64);
        let p = Vector3::new(0.21, -0.35, 0.4);
        let (o1, d1) = pixel_ray(&cam_l, cam_l.project(p).unwrap());
        let (o2, d2) = pixel_ray(&cam_r, cam_r.project(p).unwrap());
        let rec = triangulate_rays(o1, d1, o2, d2).unwrap();
        assert_relative_eq!(rec, p, epsilon = 1e-9);
    }

    #[test]
    fn closed_loop_fit_recovers_pose_lighting_and_photo_floor() {
        let scene = make_scene(41, 0.2);
        let opts = FitOptions {
            uv_resolution: UV_RES,
            ..FitOptions::default()
        };
        let (fit, report) = fit_two_views(&scene.model, &scene.views, &opts).unwrap();

        let rot_err = rotation_geodesic(&fit.pose.rotation, &scene.state.pose.rotation);
        assert!(rot_err < 1e-2, "rotation geodesic error {rot_err}");
        let t_err = (fit.pose.translation - scene.state.pose.translation).norm();
        assert!(
            t_err < 0.01 * scene.diameter,
            "translation error {t_err} vs diameter {}",
            scene.diameter
        );

        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..3 {
            for k in 0..SH_COUNT {
                num += (fit.lighting.coeffs[c][k] - scene.state.lighting.coeffs[c][k]).powi(2);
                den += scene.state.lighting.coeffs[c][k].powi(2);
            }
        }
        let light_err = (num / den).sqrt();
        assert!(light_err < 0.05, "lighting relative RMS {light_err}");

        assert!(
            report.photo_energy_final < 0.01,
            "photo energy {}",
            report.photo_energy_final
        );
        assert!(report.landmark_energy_final <= report.landmark_energy_initial + 1e-12);
        for (name, trace) in &report.stage_traces {
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "stage {name} trace increased");
            }
        }
    }

    #[test]
    fn landmark_only_fit_drives_landmark_energy_to_zero() {
        let scene = make_scene(42, -0.18);
        let opts = FitOptions {
            weights: FitWeights {
                photo: 0.0,
                ..FitWeights::default()
            },
            uv_resolution: UV_RES,
            ..FitOptions::default()
        };
        let (fit, report) = fit_two_views(&scene.model, &scene.views, &opts).unwrap();
        let e_lan = landmark_energy(&scene.model, &fit, &scene.views).unwrap();
        assert!(e_lan < 1e-4, "landmark energy {e_lan}");
        assert!(report.landmark_energy_final <= report.landmark_energy_initial);
    }

    #[test]
    fn identical_views_converge_with_a_warning() {
        let scene = make_scene(43, 0.06);
        let twin = vec![scene.views[0].clone(), scene.views[0].clone()];
        let opts = FitOptions {
            weights: FitWeights {
                photo: 0.0,
                ..FitWeights::default()
            },
            uv_resolution: UV_RES,
            ..FitOptions::default()
        };
        let (fit, report) = fit_two_views(&scene.model, &twin, &opts).unwrap();
        assert!(
            !report.warnings.is_empty(),
            "expected a degeneracy warning, got none"
        );
        let e_lan = landmark_energy(&scene.model, &fit, &twin).unwrap();
        assert!(e_lan < 1e-4, "landmark energy {e_lan}");
    }

    #[test]
    fn pose_is_invariant_to_a_global_intensity_scale() {
        let scene = make_scene(44, 0.16);
        let opts = FitOptions {
            uv_resolution: UV_RES,
            ..FitOptions::default()
        };
        let (fit_a, _) = fit_two_views(&scene.model, &scene.views, &opts).unwrap();
        let mut scaled = scene.views.clone();
        for view in scaled.iter_mut() {
            for px in view.image.data.iter_mut() {
                *px *= 1.3;
            }
        }
        let (fit_b, _) = fit_two_views(&scene.model, &scaled, &opts).unwrap();
        let d = rotation_geodesic(&fit_a.pose.rotation, &fit_b.pose.rotation);
        assert!(d < 1e-3, "pose changed by {d} rad under intensity scaling");
        // The lighting absorbs the scale.
        let ratio = fit_b.lighting.coeffs[1][0] / fit_a.lighting.coeffs[1][0];
        assert_relative_eq!(ratio, 1.3, epsilon = 0.05);
    }

    #[test]
    fn baked_maps_match_their_canonical_sources() {
        let scene = make_scene(45, 0.1);
        let cameras: Vec<Camera> = scene.views.iter().map(|v| v.camera.clone()).collect();
        let (baked, vis) = bake_maps(&scene.model, &scene.state, &cameras, UV_RES).unwrap();
        let coverage = scene.model.uv_coverage(UV_RES, UV_RES);
        let diffuse = scene
            .model
            .synthesize_albedo(&scene.state.coeffs, &coverage)
            .unwrap();
        let mesh = scene.model.synthesize_shape(&scene.state.coeffs).unwrap();
        let normal = bake_normal_map(&coverage, &scene.model.triangles, &mesh.normals);
        assert_eq!(baked.diffuse, diffuse);
        assert_eq!(baked.normal, normal);
        // Both-view coverage is the intersection of the per-view masks and is
        // substantial for a frontal rig.
        let mut count = 0;
        for idx in 0..baked.coverage.len() {
            assert_eq!(baked.coverage[idx], vis[0].mask[idx] && vis[1].mask[idx]);
            if baked.coverage[idx] {
                count += 1;
            }
        }
        assert!(
            count > (UV_RES * UV_RES / 4) as usize,
            "suspiciously small overlap: {count} texels"
        );
        // View directions are unit length where defined.
        for v in &vis {
            for idx in 0..v.mask.len() {
                if v.mask[idx] {
                    assert_relative_eq!(v.view_dir[idx].norm(), 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn texels_behind_the_cameras_are_not_covered() {
        let scene = make_scene(46, 0.0);
        // Both cameras in front, but the face turned fully away: nothing is
        // front-facing, so coverage must be empty.
        let mut state = scene.state.clone();
        state.pose.rotation = rotation_about_axis(Vector3::new(0.0, std::f64::consts::PI, 0.0));
        let cameras: Vec<Camera> = scene.views.iter().map(|v| v.camera.clone()).collect();
        let (baked, _) = bake_maps(&scene.model, &state, &cameras, 32).unwrap();
        let covered = baked.coverage.iter().filter(|&&c| c).count();
        assert_eq!(covered, 0, "back-facing texels marked visible");
    }
}
