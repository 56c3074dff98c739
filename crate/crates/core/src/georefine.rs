//! Stage 3 — per-texel normal refinement and least-squares vertex update.
//!
//! With the reflectance frozen, the remaining image residual is explained by
//! bending the baked normals: every covered texel carries a spherical-angle
//! offset `δ_n = (Δθ, Δφ)` on top of its baked normal, so the corrected
//! normal is unit length by construction. The refinement energy is
//!
//! ```text
//! E = Σ_views Σ_{p ∈ mask} ‖I(p) − I_ren(n + δ_n)(p)‖²
//!     + w1 · Σ_texels (|Δ(Δθ)| + |Δ(Δφ)|)   (smoothed L1 of the Laplacian)
//!     + w2 · Σ_covered ‖δ_n‖²
//! ```
//!
//! minimized by projected Adam with offsets boxed to ±π and uncovered texels
//! pinned at zero. The refined normal field then drives a linear
//! least-squares update of the vertex positions: each vertex moves along its
//! current normal so that the triangle cross products rotate toward the
//! refined field, with a Tikhonov anchor keeping unobserved vertices fixed.
//!
//! For a new frame pair of an already-reconstructed face, [`process_new_frames`]
//! re-runs the pose/expression fit with identity, albedo, and reflectance
//! frozen, then refines the new frame's normals.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3x2, Vector2, Vector3};

use crate::facemodel::ParametricModel;
use crate::fitting::{fit_new_pair, FitOptions, FitReport, FitState, FitView};
use crate::geom::{Mesh, UvRaster};
use crate::optim::{
    minimize_adam, raster_laplacian, smooth_abs, smooth_abs_grad, AdamOptions, SMOOTH_L1_EPS,
};
use crate::reflectance::{
    frame_appearance, prepare_frame, FrameData, FramePairSet, ReflectanceState,
};
use crate::render::shade_pixels;
use crate::shading::shade_total_gradients;
use crate::{Error, Result};

/// Tikhonov weight anchoring per-vertex offsets to zero in the vertex update.
pub const VERTEX_UPDATE_TIKHONOV: f64 = 0.1;

// ---------------------------------------------------------------------------
// Spherical parametrization
// ---------------------------------------------------------------------------

/// Polar angle θ ∈ [0, π] from +z and azimuth φ ∈ (−π, π] of a unit vector.
/// At the poles (θ ∈ {0, π}) the azimuth is defined as 0.
pub fn normal_to_spherical(n: &Vector3<f64>) -> (f64, f64) {
    let theta = n.z.clamp(-1.0, 1.0).acos();
    if n.x.hypot(n.y) < 1e-15 {
        return (theta, 0.0);
    }
    let mut phi = n.y.atan2(n.x);
    if phi <= -PI {
        phi = PI;
    }
    (theta, phi)
}

/// Inverse of [`normal_to_spherical`]: the unit vector
/// `(sin θ cos φ, sin θ sin φ, cos θ)`.
pub fn spherical_to_normal(theta: f64, phi: f64) -> Vector3<f64> {
    let (st, ct) = (theta.sin(), theta.cos());
    let (sp, cp) = (phi.sin(), phi.cos());
    Vector3::new(st * cp, st * sp, ct)
}

/// Columns ∂n/∂θ and ∂n/∂φ of [`spherical_to_normal`]. Both are tangent to
/// the unit sphere, so corrected normals stay unit to first order exactly.
fn spherical_jacobian(theta: f64, phi: f64) -> Matrix3x2<f64> {
    let (st, ct) = (theta.sin(), theta.cos());
    let (sp, cp) = (phi.sin(), phi.cos());
    Matrix3x2::new(
        ct * cp, -st * sp, //
        ct * sp, st * cp, //
        -st, 0.0,
    )
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Per-texel spherical-angle offsets applied to a frame's baked normal map.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalCorrection {
    /// `(Δθ, Δφ)` per texel; both components bounded by ±π.
    pub delta: UvRaster<Vector2<f64>>,
}

impl NormalCorrection {
    /// The zero correction: corrected normals equal the baked normals.
    pub fn zero(width: u32, height: u32) -> Self {
        NormalCorrection {
            delta: UvRaster::filled(width, height, Vector2::zeros()),
        }
    }

    /// Checks the sanity bound |Δθ|, |Δφ| ≤ π on every texel.
    pub fn validate(&self) -> Result<()> {
        for (idx, d) in self.delta.data.iter().enumerate() {
            if !(d.x.abs() <= PI && d.y.abs() <= PI) {
                return Err(Error::Parameter(format!(
                    "normal correction at texel {idx} is ({}, {}); both angles must stay within ±π",
                    d.x, d.y
                )));
            }
        }
        Ok(())
    }
}

/// Weights of the two penalty terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineWeights {
    /// Smoothed-L1 Laplacian weight on the offset rasters.
    pub w1: f64,
    /// Quadratic weight anchoring offsets to zero on covered texels.
    pub w2: f64,
}

impl Default for RefineWeights {
    fn default() -> Self {
        RefineWeights { w1: 1e-3, w2: 0.3 }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOptions {
    pub weights: RefineWeights,
    /// Adam iterations of the refinement descent.
    pub iters: usize,
    pub adam: AdamOptions,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            weights: RefineWeights::default(),
            iters: 100,
            adam: AdamOptions::default(),
        }
    }
}

/// Refinement diagnostics. `accepted_trace` is the best-seen energy after
/// every step, so it is monotone non-increasing by construction.
#[derive(Debug, Clone, Default)]
pub struct RefineReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    pub accepted_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Texels visible in at least one of the frame's views: the set whose offsets
/// the photometric term can observe. Offsets elsewhere stay pinned at zero.
pub fn frame_covered(frame: &FrameData) -> Vec<bool> {
    let mut covered = frame.views[0].vis.mask.clone();
    for (c, &r) in covered.iter_mut().zip(frame.views[1].vis.mask.iter()) {
        *c = *c || r;
    }
    covered
}

/// Applies a correction to the frame's baked normal map. Texels with an
/// exactly-zero offset keep their baked normal bitwise, so the zero
/// correction reproduces the baked map exactly; elsewhere the corrected
/// normal is unit by the spherical construction.
pub fn corrected_normals(
    frame: &FrameData,
    correction: &NormalCorrection,
) -> Result<UvRaster<Vector3<f64>>> {
    if correction.delta.width != frame.normal.width
        || correction.delta.height != frame.normal.height
    {
        return Err(Error::Dimension(format!(
            "correction raster is {}x{}, frame normal map is {}x{}",
            correction.delta.width,
            correction.delta.height,
            frame.normal.width,
            frame.normal.height
        )));
    }
    let mut out = frame.normal.clone();
    for (n, d) in out.data.iter_mut().zip(correction.delta.data.iter()) {
        if d.x == 0.0 && d.y == 0.0 {
            continue;
        }
        let base = if n.norm() > 1e-12 {
            n.normalize()
        } else {
            Vector3::z()
        };
        let (theta, phi) = normal_to_spherical(&base);
        *n = spherical_to_normal(theta + d.x, phi + d.y);
        debug_assert!((n.norm() - 1.0).abs() < 1e-9);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Energy
// ---------------------------------------------------------------------------

/// Wraps an angle difference into (−π, π].
fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = x - two_pi * (x / two_pi).round();
    if r <= -PI {
        r += two_pi;
    }
    r
}

/// Laplacian of the offset raster with the same replicated-edge stencil as
/// [`raster_laplacian`], except that azimuth differences are re-centered into
/// (−π, π] before accumulation: offsets of ±(π − ε) describe nearly the same
/// rotation, so their difference must read as small, not as ≈ 2π.
fn delta_laplacian(map: &UvRaster<Vector2<f64>>) -> UvRaster<Vector2<f64>> {
    assert!(
        map.width >= 3 && map.height >= 3,
        "laplacian needs at least a 3x3 raster, got {}x{}",
        map.width,
        map.height
    );
    let w = map.width as i64;
    let h = map.height as i64;
    let at = |x: i64, y: i64| -> Vector2<f64> {
        map.get(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32)
    };
    let mut out = Vec::with_capacity(map.data.len());
    for y in 0..h {
        for x in 0..w {
            let c = at(x, y);
            let mut lap = Vector2::zeros();
            for (nx, ny) in [(x, y - 1), (x, y + 1), (x - 1, y), (x + 1, y)] {
                let n = at(nx, ny);
                lap.x += c.x - n.x;
                lap.y += wrap_angle(c.y - n.y);
            }
            out.push(lap);
        }
    }
    UvRaster {
        width: map.width,
        height: map.height,
        data: out,
    }
}

fn check_frame_dims(pairs: &FramePairSet, state: &ReflectanceState, frame: &FrameData) -> Result<()> {
    let (w, h) = (pairs.diffuse.width, pairs.diffuse.height);
    if state.delta_diffuse.width != w
        || state.delta_diffuse.height != h
        || state.specular.width != w
        || state.specular.height != h
        || frame.normal.width != w
        || frame.normal.height != h
    {
        return Err(Error::Dimension(format!(
            "reflectance maps and frame normal map must all be {w}x{h}"
        )));
    }
    if frame.views.len() != 2 {
        return Err(Error::Parameter(format!(
            "a frame has {} views; exactly 2 are required",
            frame.views.len()
        )));
    }
    Ok(())
}

/// Canonical refinement energy of one frame: photometric residual of both
/// views rendered with the corrected normals (through the standard shading
/// path), plus the smoothness and quadratic penalties. At the zero
/// correction the photometric part equals the frame's Stage-2 data term and
/// the penalties collapse to the smoothed-L1 floor `w1 · 2Nε`.
pub fn refine_energy(
    pairs: &FramePairSet,
    state: &ReflectanceState,
    frame: &FrameData,
    correction: &NormalCorrection,
    weights: &RefineWeights,
) -> Result<f64> {
    check_frame_dims(pairs, state, frame)?;
    correction.validate()?;
    let corrected = corrected_normals(frame, correction)?;
    let mut appearance = frame_appearance(pairs, state, frame);
    appearance.normal = corrected;
    let mut total = 0.0;
    for view in &frame.views {
        let rendered = shade_pixels(
            &view.geom,
            &frame.pose,
            &appearance,
            &state.lighting,
            Vector3::zeros(),
        )?;
        for i in 0..view.geom.mask.len() {
            if view.geom.mask[i] {
                total += (rendered.data[i] - view.image.data[i]).norm_squared();
            }
        }
    }
    let lap = delta_laplacian(&correction.delta);
    for v in &lap.data {
        total += weights.w1 * (smooth_abs(v.x, SMOOTH_L1_EPS) + smooth_abs(v.y, SMOOTH_L1_EPS));
    }
    let covered = frame_covered(frame);
    for (idx, &c) in covered.iter().enumerate() {
        if c {
            total += weights.w2 * correction.delta.data[idx].norm_squared();
        }
    }
    Ok(total)
}

/// Energy and gradient in the per-texel offsets, laid out `[Δθ_t, Δφ_t]` per
/// texel (`2t`, `2t + 1`). Numerically equal to [`refine_energy`]; this is
/// the single evaluation path the optimizer and the finite-difference checks
/// share.
pub fn refine_gradients(
    pairs: &FramePairSet,
    state: &ReflectanceState,
    frame: &FrameData,
    correction: &NormalCorrection,
    weights: &RefineWeights,
) -> Result<(f64, DVector<f64>)> {
    check_frame_dims(pairs, state, frame)?;
    let corrected = corrected_normals(frame, correction)?;
    let n_texels = corrected.data.len();

    // Spherical Jacobians at the corrected angles, one per texel.
    let mut jac = vec![Matrix3x2::zeros(); n_texels];
    for idx in 0..n_texels {
        let base = frame.normal.data[idx];
        let nb = if base.norm() > 1e-12 {
            base.normalize()
        } else {
            Vector3::z()
        };
        let (theta, phi) = normal_to_spherical(&nb);
        let d = correction.delta.data[idx];
        jac[idx] = spherical_jacobian(theta + d.x, phi + d.y);
    }

    let mut grad = DVector::zeros(2 * n_texels);
    let mut energy = 0.0;
    let rot_t = frame.pose.rotation.transpose();
    for view in &frame.views {
        for i in 0..view.geom.mask.len() {
            if !view.geom.mask[i] {
                continue;
            }
            let uv = nalgebra::Vector2::new(
                view.geom.uv[i].x.clamp(0.0, 1.0),
                view.geom.uv[i].y.clamp(0.0, 1.0),
            );
            let footprint = corrected.sample_footprint(uv)?;
            let mut albedo = Vector3::zeros();
            let mut c_s = 0.0;
            let mut n_sum = Vector3::zeros();
            for &(ti, tj, w) in &footprint {
                let idx = corrected.texel_index(ti, tj);
                albedo += w * (pairs.diffuse.data[idx] + state.delta_diffuse.data[idx]);
                c_s += w * state.specular.data[idx];
                n_sum += w * corrected.data[idx];
            }
            let norm = n_sum.norm();
            let n_model = if norm > 1e-12 { n_sum / norm } else { Vector3::z() };
            let n_world = frame.pose.rotation * n_model;
            let g = shade_total_gradients(
                albedo,
                c_s,
                n_world,
                view.geom.view_vec[i],
                &state.lighting,
                pairs.shininess,
            );
            let r = g.value - view.image.data[i];
            energy += r.norm_squared();

            // Pull the channel gradients back to the model frame, project
            // through the normalization, then into each texel's angles.
            let mut pull = Vector3::zeros();
            for out in 0..3 {
                pull += 2.0 * r[out] * (rot_t * g.d_n[out]);
            }
            if norm <= 1e-12 {
                continue;
            }
            let tangent = (pull - n_model * n_model.dot(&pull)) / norm;
            for &(ti, tj, w) in &footprint {
                let idx = corrected.texel_index(ti, tj);
                let gt = jac[idx].transpose() * (w * tangent);
                grad[2 * idx] += gt.x;
                grad[2 * idx + 1] += gt.y;
            }
        }
    }

    // Smoothness: grad = w1 · L(smooth_abs'(L δ)), reusing the plain stencil
    // as the adjoint of the wrapped one (their linearizations coincide).
    let lap = delta_laplacian(&correction.delta);
    let mut slope = UvRaster::filled(lap.width, lap.height, Vector2::zeros());
    for idx in 0..n_texels {
        let v = lap.data[idx];
        energy += weights.w1 * (smooth_abs(v.x, SMOOTH_L1_EPS) + smooth_abs(v.y, SMOOTH_L1_EPS));
        slope.data[idx] = Vector2::new(
            smooth_abs_grad(v.x, SMOOTH_L1_EPS),
            smooth_abs_grad(v.y, SMOOTH_L1_EPS),
        );
    }
    let back = raster_laplacian(&slope);
    for idx in 0..n_texels {
        grad[2 * idx] += weights.w1 * back.data[idx].x;
        grad[2 * idx + 1] += weights.w1 * back.data[idx].y;
    }

    // Quadratic anchor on covered texels.
    let covered = frame_covered(frame);
    for (idx, &c) in covered.iter().enumerate() {
        if c {
            let d = correction.delta.data[idx];
            energy += weights.w2 * d.norm_squared();
            grad[2 * idx] += 2.0 * weights.w2 * d.x;
            grad[2 * idx + 1] += 2.0 * weights.w2 * d.y;
        }
    }
    Ok((energy, grad))
}

// ---------------------------------------------------------------------------
// Refinement descent
// ---------------------------------------------------------------------------

fn correction_from_vec(width: u32, height: u32, x: &DVector<f64>) -> NormalCorrection {
    let mut correction = NormalCorrection::zero(width, height);
    for (idx, d) in correction.delta.data.iter_mut().enumerate() {
        d.x = x[2 * idx];
        d.y = x[2 * idx + 1];
    }
    correction
}

/// Refines the normals of `pairs.frames[frame_index]` by projected Adam from
/// the zero correction. Covered texels move within ±π per angle, uncovered
/// texels are pinned at zero. Returns the correction, the corrected normal
/// map, and a report whose accepted-energy trace is monotone non-increasing.
pub fn refine_normals(
    pairs: &FramePairSet,
    state: &ReflectanceState,
    frame_index: usize,
    opts: &RefineOptions,
) -> Result<(NormalCorrection, UvRaster<Vector3<f64>>, RefineReport)> {
    let frame = pairs.frames.get(frame_index).ok_or_else(|| {
        Error::Parameter(format!(
            "frame index {frame_index} out of range; the set has {} frames",
            pairs.frames.len()
        ))
    })?;
    let (w, h) = (frame.normal.width, frame.normal.height);
    let n_texels = frame.normal.data.len();
    let covered = frame_covered(frame);

    let mut report = RefineReport::default();
    if !covered.iter().any(|&c| c) {
        report
            .warnings
            .push("no texel is visible in either view; refinement is a no-op".to_string());
    }

    // Validate once so the optimizer closure may assume clean dimensions.
    let zero = NormalCorrection::zero(w, h);
    let (initial, _) = refine_gradients(pairs, state, frame, &zero, &opts.weights)?;
    report.initial_energy = initial;

    let x0 = DVector::zeros(2 * n_texels);
    let mut lo = DVector::zeros(2 * n_texels);
    let mut hi = DVector::zeros(2 * n_texels);
    for idx in 0..n_texels {
        let bound = if covered[idx] { PI } else { 0.0 };
        lo[2 * idx] = -bound;
        lo[2 * idx + 1] = -bound;
        hi[2 * idx] = bound;
        hi[2 * idx + 1] = bound;
    }
    let run = minimize_adam(&x0, &lo, &hi, opts.iters, &opts.adam, |x| {
        let trial = correction_from_vec(w, h, x);
        refine_gradients(pairs, state, frame, &trial, &opts.weights)
            .expect("dimensions already validated")
    })?;

    let mut best = initial;
    report.accepted_trace.push(best);
    for &c in &run.trace {
        best = best.min(c);
        report.accepted_trace.push(best);
    }
    report.final_energy = run.cost;

    let correction = correction_from_vec(w, h, &run.x);
    let refined = corrected_normals(frame, &correction)?;
    Ok((correction, refined, report))
}

// ---------------------------------------------------------------------------
// Vertex update
// ---------------------------------------------------------------------------

/// Moves each vertex along its current normal so the triangle normals best
/// match the refined field, solving the Tikhonov-damped normal equations of
/// the linearized cross products (dense; the meshes used here are small).
///
/// Each triangle whose UV-centroid texel is covered contributes the residual
/// `(C₀ + J·o)/|C₀| − g` with `C = e₁ × e₂`; vertices touching no covered
/// triangle have only the Tikhonov row and keep a zero offset. Topology and
/// UVs are returned bitwise unchanged; vertex normals are recomputed.
pub fn update_vertices(
    mesh: &Mesh,
    refined: &UvRaster<Vector3<f64>>,
    covered: &[bool],
) -> Result<Mesh> {
    if covered.len() != refined.data.len() {
        return Err(Error::Dimension(format!(
            "covered mask has {} entries for {} texels",
            covered.len(),
            refined.data.len()
        )));
    }
    let nv = mesh.vertices.len();
    let mut m = DMatrix::<f64>::zeros(nv, nv);
    let mut rhs = DVector::<f64>::zeros(nv);
    for tri in &mesh.triangles {
        let [ia, ib, ic] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        let centroid = (mesh.uvs[ia] + mesh.uvs[ib] + mesh.uvs[ic]) / 3.0;
        let (ti, tj) = refined.nearest_texel(centroid);
        let idx = refined.texel_index(ti, tj);
        if !covered[idx] {
            continue;
        }
        let target = refined.data[idx];
        let target_norm = target.norm();
        if target_norm < 1e-12 {
            continue;
        }
        let g = target / target_norm;

        let (pa, pb, pc) = (mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic]);
        let e1 = pb - pa;
        let e2 = pc - pa;
        let c0 = e1.cross(&e2);
        let a0 = c0.norm();
        if a0 < 1e-15 {
            continue;
        }
        // ∂C/∂o for offsets along the current vertex normals.
        let (na, nb, nc) = (mesh.normals[ia], mesh.normals[ib], mesh.normals[ic]);
        let ja = -(na.cross(&e2)) - e1.cross(&na);
        let jb = nb.cross(&e2);
        let jc = e1.cross(&nc);
        let cols = [(ia, ja / a0), (ib, jb / a0), (ic, jc / a0)];
        let b = g - c0 / a0;
        for &(vi, ci) in &cols {
            rhs[vi] += ci.dot(&b);
            for &(vj, cj) in &cols {
                m[(vi, vj)] += ci.dot(&cj);
            }
        }
    }
    for v in 0..nv {
        m[(v, v)] += VERTEX_UPDATE_TIKHONOV;
    }
    let offsets = m
        .cholesky()
        .ok_or_else(|| Error::Solver("vertex update system is not positive definite".into()))?
        .solve(&rhs);

    let mut out = mesh.clone();
    for v in 0..nv {
        out.vertices[v] += offsets[v] * mesh.normals[v];
    }
    out.recompute_normals();
    Ok(out)
}

// ---------------------------------------------------------------------------
// New-frame tracking
// ---------------------------------------------------------------------------

/// Everything recovered for a new frame pair: the frozen-identity fit, the
/// prepared frame geometry, and the refined normals.
#[derive(Debug, Clone)]
pub struct TrackOutput {
    pub fit: FitState,
    pub frame: FrameData,
    pub correction: NormalCorrection,
    pub refined_normals: UvRaster<Vector3<f64>>,
    pub fit_report: FitReport,
    pub refine_report: RefineReport,
    pub warnings: Vec<String>,
}

/// Processes a new frame pair of an already-reconstructed face: fits pose
/// and expression with identity, albedo coefficients, and lighting frozen at
/// the warm-start values, then refines the frame's normals against the
/// frozen reflectance. The reflectance maps are read-only throughout.
pub fn process_new_frames(
    model: &ParametricModel,
    warm: &FitState,
    pairs: &FramePairSet,
    state: &ReflectanceState,
    views: Vec<FitView>,
    fit_opts: &FitOptions,
    refine_opts: &RefineOptions,
) -> Result<TrackOutput> {
    let (fit, fit_report) = fit_new_pair(model, warm, &views, fit_opts)?;
    let mesh = model.synthesize_shape(&fit.coeffs)?;
    let coverage = model.uv_coverage(pairs.diffuse.width, pairs.diffuse.height);
    let (frame, mut warnings) = prepare_frame(
        &mesh,
        &fit.pose,
        views.into_iter().map(|v| (v.camera, v.image)).collect(),
        &coverage,
    )?;
    let single = FramePairSet {
        diffuse: pairs.diffuse.clone(),
        shininess: pairs.shininess,
        frames: vec![frame],
    };
    let (correction, refined_normals, refine_report) =
        refine_normals(&single, state, 0, refine_opts)?;
    warnings.extend(refine_report.warnings.iter().cloned());
    let frame = single.frames.into_iter().next().expect("one frame was built");
    Ok(TrackOutput {
        fit,
        frame,
        correction,
        refined_normals,
        fit_report,
        refine_report,
        warnings,
    })
}
