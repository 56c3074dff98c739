//! Stage 2 — specular/diffuse separation over frame pairs.
//!
//! Holding geometry and pose fixed, this stage explains the captured images
//! with the full reflectance model: per-texel diffuse displacement `δ_Cd`
//! over the PCA albedo `C_d`, a per-texel monochrome specular albedo `C_s`
//! driving a Blinn-Phong lobe under the dominant light of the spherical
//! harmonics, and the shared lighting itself. The energy is
//!
//! ```text
//! E = E_O + λ_S · E_S + λ_H · E_H
//! ```
//!
//! * `E_O` — data term: squared RGB difference between the rendered and the
//!   captured pixels, summed (not averaged) over every covered pixel of
//!   every view and frame.
//! * `E_S` — cross-view specular separation: on texels visible in both views
//!   of a frame, the modeled specular difference between the two views must
//!   match the observed image difference. Diffuse shading is view
//!   independent, so it cancels in the difference and the term isolates the
//!   specular layer. Summed over the overlap texels.
//! * `E_H` — smoothed-L1 penalty on the raster Laplacian of `δ_Cd` (each
//!   channel) and `C_s`, keeping both maps piecewise smooth.
//!
//! Minimization is block-coordinate: lighting, then `C_s`, then `δ_Cd`, each
//! block by projected Adam under its box constraints
//! (`0 ≤ C_d + δ_Cd ≤ 255`, `0 ≤ C_s ≤ 255`, `ambient ≥ 0`). Each block
//! update keeps the best-seen iterate, so the total energy never increases;
//! passes stop when the relative decrease falls below a tolerance.

use nalgebra::{DVector, Vector3};

use crate::fitting::{uv_visibility, ViewVisibility};
use crate::geom::{rasterize, Camera, ImageBuf, Mesh, RenderOutput, RigidPose, UvCoverage, UvRaster};
use crate::optim::{
    minimize_adam, raster_laplacian, smooth_abs, smooth_abs_grad, AdamOptions, SMOOTH_L1_EPS,
};
use crate::render::{bake_normal_map, shade_pixels, Appearance};
use crate::shading::{shade_total_gradients, ShLighting, SH_COUNT};
use crate::{Error, Result};

/// Energy weights of the separation stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectanceWeights {
    pub lambda_s: f64,
    pub lambda_h: f64,
}

impl Default for ReflectanceWeights {
    fn default() -> Self {
        ReflectanceWeights {
            lambda_s: 0.1,
            lambda_h: 0.001,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReflectanceOptions {
    pub weights: ReflectanceWeights,
    /// Adam iterations per block update.
    pub adam_iters: usize,
    /// Shared Adam moment parameters; learning rates are per block because
    /// the SH coefficients live on a unit-ish scale while the maps live on
    /// the 0..=255 scale.
    pub adam: AdamOptions,
    pub lr_lighting: f64,
    pub lr_maps: f64,
    /// Upper bound on block-coordinate passes.
    pub max_passes: usize,
    /// Stop when a full pass decreases the energy by less than this
    /// relative amount.
    pub pass_tolerance: f64,
    /// Upper box bound of the specular albedo (0 disables the specular layer
    /// entirely and skips its block, the Lambertian-only ablation).
    pub specular_ceiling: f64,
}

impl Default for ReflectanceOptions {
    fn default() -> Self {
        ReflectanceOptions {
            weights: ReflectanceWeights::default(),
            adam_iters: 2000,
            adam: AdamOptions::default(),
            lr_lighting: 0.01,
            lr_maps: 1.0,
            max_passes: 5,
            pass_tolerance: 1e-4,
            specular_ceiling: 255.0,
        }
    }
}

/// Stage-2 unknowns: the diffuse displacement map, the specular albedo map,
/// and the refined lighting shared by all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectanceState {
    pub delta_diffuse: UvRaster<Vector3<f64>>,
    pub specular: UvRaster<f64>,
    pub lighting: ShLighting,
}

impl ReflectanceState {
    /// Zero maps with the given lighting: the canonical starting point.
    pub fn new(width: u32, height: u32, lighting: ShLighting) -> Self {
        ReflectanceState {
            delta_diffuse: UvRaster::filled(width, height, Vector3::zeros()),
            specular: UvRaster::filled(width, height, 0.0),
            lighting,
        }
    }
}

/// One captured view of one frame, with its rasterization and visibility.
#[derive(Debug, Clone)]
pub struct FrameView {
    pub camera: Camera,
    pub image: ImageBuf,
    pub geom: RenderOutput,
    pub vis: ViewVisibility,
}

/// One timestamp: the posed frame with its two views, the frame's own
/// model-frame normal map, and the texels visible in both views.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub pose: RigidPose,
    pub normal: UvRaster<Vector3<f64>>,
    pub views: Vec<FrameView>,
    pub overlap: Vec<bool>,
}

/// All inputs of the separation stage: the Stage-1 diffuse base map, the
/// Blinn-Phong exponent, and the prepared frames.
#[derive(Debug, Clone)]
pub struct FramePairSet {
    pub diffuse: UvRaster<Vector3<f64>>,
    pub shininess: f64,
    pub frames: Vec<FrameData>,
}

/// Texels visible in both views: the domain of the cross-view term.
pub fn overlap_mask(a: &ViewVisibility, b: &ViewVisibility) -> Vec<bool> {
    a.mask
        .iter()
        .zip(b.mask.iter())
        .map(|(&l, &r)| l && r)
        .collect()
}

/// Rasterizes, computes visibility and bakes the normal map for one posed
/// frame. Returns the frame plus warnings (e.g. an empty cross-view
/// overlap, which silences the separation term for this frame).
pub fn prepare_frame(
    mesh: &Mesh,
    pose: &RigidPose,
    inputs: Vec<(Camera, ImageBuf)>,
    coverage: &UvCoverage,
) -> Result<(FrameData, Vec<String>)> {
    if inputs.len() != 2 {
        return Err(Error::Parameter(format!(
            "a frame needs exactly 2 views, got {}",
            inputs.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut views = Vec::new();
    for (i, (camera, image)) in inputs.into_iter().enumerate() {
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::Dimension(format!(
                "view {i}: image is {}x{}, camera expects {}x{}",
                image.width, image.height, camera.width, camera.height
            )));
        }
        let geom = rasterize(mesh, pose, &camera);
        let vis = uv_visibility(mesh, pose, &camera, coverage, &geom);
        views.push(FrameView {
            camera,
            image,
            geom,
            vis,
        });
    }
    let overlap = overlap_mask(&views[0].vis, &views[1].vis);
    if !overlap.iter().any(|&o| o) {
        warnings.push(
            "frame has no texels visible in both views; cross-view separation is inactive"
                .to_string(),
        );
    }
    let normal = bake_normal_map(coverage, &mesh.triangles, &mesh.normals);
    Ok((
        FrameData {
            pose: *pose,
            normal,
            views,
            overlap,
        },
        warnings,
    ))
}

fn check_dims(pairs: &FramePairSet, state: &ReflectanceState) -> Result<()> {
    let (w, h) = (pairs.diffuse.width, pairs.diffuse.height);
    if state.delta_diffuse.width != w
        || state.delta_diffuse.height != h
        || state.specular.width != w
        || state.specular.height != h
    {
        return Err(Error::Dimension(format!(
            "state maps must be {w}x{h} to match the diffuse base"
        )));
    }
    for (t, frame) in pairs.frames.iter().enumerate() {
        if frame.normal.width != w || frame.normal.height != h {
            return Err(Error::Dimension(format!(
                "frame {t}: normal map resolution disagrees with the diffuse base"
            )));
        }
        if frame.views.len() != 2 {
            return Err(Error::Parameter(format!(
                "frame {t} has {} views; exactly 2 are required",
                frame.views.len()
            )));
        }
    }
    Ok(())
}

/// The appearance a reflectance state implies for one frame: base-plus-delta
/// diffuse, the specular map, and the frame's normal map.
pub fn frame_appearance(
    pairs: &FramePairSet,
    state: &ReflectanceState,
    frame: &FrameData,
) -> Appearance {
    let mut diffuse = pairs.diffuse.clone();
    for (d, delta) in diffuse.data.iter_mut().zip(state.delta_diffuse.data.iter()) {
        *d += *delta;
    }
    Appearance {
        diffuse,
        specular: state.specular.clone(),
        normal: frame.normal.clone(),
        shininess: pairs.shininess,
    }
}

// ---------------------------------------------------------------------------
// Energies (canonical evaluation)
// ---------------------------------------------------------------------------

/// Data term `E_O`: squared RGB difference between render and capture,
/// summed over the covered pixels of every view and frame (no averaging).
pub fn data_energy(pairs: &FramePairSet, state: &ReflectanceState) -> Result<f64> {
    check_dims(pairs, state)?;
    let mut total = 0.0;
    for frame in &pairs.frames {
        let appearance = frame_appearance(pairs, state, frame);
        for view in &frame.views {
            let rendered = shade_pixels(
                &view.geom,
                &frame.pose,
                &appearance,
                &state.lighting,
                Vector3::zeros(),
            )?;
            let mut sum = 0.0;
            for i in 0..view.geom.mask.len() {
                if view.geom.mask[i] {
                    sum += (rendered.data[i] - view.image.data[i]).norm_squared();
                }
            }
            total += sum;
        }
    }
    Ok(total)
}

/// Specular contribution of one texel in one view, with ambient and diffuse
/// switched off so the value is the pure Blinn-Phong lobe.
fn specular_only(
    c_s: f64,
    n: Vector3<f64>,
    v: Vector3<f64>,
    lighting: &ShLighting,
    shininess: f64,
) -> Vector3<f64> {
    let mut dark = lighting.clone();
    dark.ambient = Vector3::zeros();
    shade_total_gradients(Vector3::zeros(), c_s, n, v, &dark, shininess).value
}

/// Cross-view separation term `E_S`: on both-view texels, the squared
/// difference between the modeled specular difference and the observed image
/// difference, summed over texels and frames. Frames with an empty overlap
/// contribute zero. Independent of `δ_Cd` and the ambient level by
/// construction.
pub fn specular_difference_energy(pairs: &FramePairSet, state: &ReflectanceState) -> Result<f64> {
    check_dims(pairs, state)?;
    let mut total = 0.0;
    for frame in &pairs.frames {
        let (left, right) = (&frame.views[0], &frame.views[1]);
        for (idx, &both) in frame.overlap.iter().enumerate() {
            if !both {
                continue;
            }
            let n_model = frame.normal.data[idx];
            let n = frame.pose.rotation
                * if n_model.norm() > 1e-12 {
                    n_model.normalize()
                } else {
                    Vector3::z()
                };
            let c_s = state.specular.data[idx];
            let modeled = specular_only(c_s, n, left.vis.view_dir[idx], &state.lighting, pairs.shininess)
                - specular_only(c_s, n, right.vis.view_dir[idx], &state.lighting, pairs.shininess);
            let observed = left.image.sample_bilinear(left.vis.pixel[idx])
                - right.image.sample_bilinear(right.vis.pixel[idx]);
            total += (modeled - observed).norm_squared();
        }
    }
    Ok(total)
}

/// Smoothness term `E_H`: smoothed-L1 of the raster Laplacian over the three
/// `δ_Cd` channels and `C_s`.
pub fn smoothness_energy(state: &ReflectanceState) -> f64 {
    let lap_d = raster_laplacian(&state.delta_diffuse);
    let lap_s = raster_laplacian(&state.specular);
    let mut total = 0.0;
    for v in &lap_d.data {
        for c in 0..3 {
            total += smooth_abs(v[c], SMOOTH_L1_EPS);
        }
    }
    for &v in &lap_s.data {
        total += smooth_abs(v, SMOOTH_L1_EPS);
    }
    total
}

/// Full Stage-2 energy `E_O + λ_S·E_S + λ_H·E_H`.
pub fn total_energy(
    pairs: &FramePairSet,
    state: &ReflectanceState,
    weights: &ReflectanceWeights,
) -> Result<f64> {
    Ok(data_energy(pairs, state)?
        + weights.lambda_s * specular_difference_energy(pairs, state)?
        + weights.lambda_h * smoothness_energy(state))
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Gradient of the full energy in every Stage-2 unknown.
///
/// Layouts: `d_lighting` is `[l_r(9), l_g(9), l_b(9), ambient(3)]`;
/// `d_specular` is texel-major; `d_delta` is texel-major with interleaved
/// RGB (`3·t + c`).
#[derive(Debug, Clone)]
pub struct ReflectanceGrads {
    pub d_lighting: DVector<f64>,
    pub d_specular: DVector<f64>,
    pub d_delta: DVector<f64>,
}

/// Evaluates the full energy and its gradient in one sweep. The value is
/// numerically (not bitwise) equal to [`total_energy`]; the optimizer and the
/// finite-difference checks both use this single evaluation path.
pub fn energy_and_gradients(
    pairs: &FramePairSet,
    state: &ReflectanceState,
    weights: &ReflectanceWeights,
) -> Result<(f64, ReflectanceGrads)> {
    check_dims(pairs, state)?;
    let n_texels = state.specular.data.len();
    let mut grads = ReflectanceGrads {
        d_lighting: DVector::zeros(3 * SH_COUNT + 3),
        d_specular: DVector::zeros(n_texels),
        d_delta: DVector::zeros(3 * n_texels),
    };
    let mut energy = 0.0;

    let mut dark = state.lighting.clone();
    dark.ambient = Vector3::zeros();

    for frame in &pairs.frames {
        // --- E_O over the pixels of both views.
        for view in &frame.views {
            for i in 0..view.geom.mask.len() {
                if !view.geom.mask[i] {
                    continue;
                }
                let uv = nalgebra::Vector2::new(
                    view.geom.uv[i].x.clamp(0.0, 1.0),
                    view.geom.uv[i].y.clamp(0.0, 1.0),
                );
                let footprint = state.specular.sample_footprint(uv)?;
                let mut albedo = Vector3::zeros();
                let mut c_s = 0.0;
                let mut n_model = Vector3::zeros();
                for &(ti, tj, w) in &footprint {
                    let idx = state.specular.texel_index(ti, tj);
                    albedo += w * (pairs.diffuse.data[idx] + state.delta_diffuse.data[idx]);
                    c_s += w * state.specular.data[idx];
                    n_model += w * frame.normal.data[idx];
                }
                let n = frame.pose.rotation
                    * if n_model.norm() > 1e-12 {
                        n_model.normalize()
                    } else {
                        Vector3::z()
                    };
                let g = shade_total_gradients(
                    albedo,
                    c_s,
                    n,
                    view.geom.view_vec[i],
                    &state.lighting,
                    pairs.shininess,
                );
                let r = g.value - view.image.data[i];
                energy += r.norm_squared();
                for out in 0..3 {
                    let w_r = 2.0 * r[out];
                    grads.d_lighting[3 * SH_COUNT + out] += w_r;
                    for inp in 0..3 {
                        for k in 0..SH_COUNT {
                            grads.d_lighting[inp * SH_COUNT + k] += w_r * g.d_l[out][inp][k];
                        }
                    }
                }
                let spec_pull = 2.0 * r.dot(&g.d_cs);
                for &(ti, tj, w) in &footprint {
                    let idx = state.specular.texel_index(ti, tj);
                    grads.d_specular[idx] += w * spec_pull;
                    for c in 0..3 {
                        grads.d_delta[3 * idx + c] += 2.0 * w * r[c] * g.d_albedo[c];
                    }
                }
            }
        }

        // --- E_S over the both-view texels.
        let (left, right) = (&frame.views[0], &frame.views[1]);
        for (idx, &both) in frame.overlap.iter().enumerate() {
            if !both {
                continue;
            }
            let n_model = frame.normal.data[idx];
            let n = frame.pose.rotation
                * if n_model.norm() > 1e-12 {
                    n_model.normalize()
                } else {
                    Vector3::z()
                };
            let c_s = state.specular.data[idx];
            let gl = shade_total_gradients(
                Vector3::zeros(),
                c_s,
                n,
                left.vis.view_dir[idx],
                &dark,
                pairs.shininess,
            );
            let gr = shade_total_gradients(
                Vector3::zeros(),
                c_s,
                n,
                right.vis.view_dir[idx],
                &dark,
                pairs.shininess,
            );
            let observed = left.image.sample_bilinear(left.vis.pixel[idx])
                - right.image.sample_bilinear(right.vis.pixel[idx]);
            let r = (gl.value - gr.value) - observed;
            energy += weights.lambda_s * r.norm_squared();
            grads.d_specular[idx] += weights.lambda_s * 2.0 * r.dot(&(gl.d_cs - gr.d_cs));
            for out in 0..3 {
                let w_r = weights.lambda_s * 2.0 * r[out];
                for inp in 0..3 {
                    for k in 0..SH_COUNT {
                        grads.d_lighting[inp * SH_COUNT + k] +=
                            w_r * (gl.d_l[out][inp][k] - gr.d_l[out][inp][k]);
                    }
                }
            }
        }
    }

    // --- E_H and its self-adjoint Laplacian gradient.
    let lap_d = raster_laplacian(&state.delta_diffuse);
    let lap_s = raster_laplacian(&state.specular);
    let mut slope_d = UvRaster::filled(lap_d.width, lap_d.height, Vector3::zeros());
    let mut slope_s = UvRaster::filled(lap_s.width, lap_s.height, 0.0);
    for idx in 0..n_texels {
        for c in 0..3 {
            energy += weights.lambda_h * smooth_abs(lap_d.data[idx][c], SMOOTH_L1_EPS);
            slope_d.data[idx][c] = smooth_abs_grad(lap_d.data[idx][c], SMOOTH_L1_EPS);
        }
        energy += weights.lambda_h * smooth_abs(lap_s.data[idx], SMOOTH_L1_EPS);
        slope_s.data[idx] = smooth_abs_grad(lap_s.data[idx], SMOOTH_L1_EPS);
    }
    let back_d = raster_laplacian(&slope_d);
    let back_s = raster_laplacian(&slope_s);
    for idx in 0..n_texels {
        for c in 0..3 {
            grads.d_delta[3 * idx + c] += weights.lambda_h * back_d.data[idx][c];
        }
        grads.d_specular[idx] += weights.lambda_h * back_s.data[idx];
    }

    Ok((energy, grads))
}

// ---------------------------------------------------------------------------
// Block-coordinate inference
// ---------------------------------------------------------------------------

/// Solver diagnostics: energy after every block update and after every pass.
#[derive(Debug, Clone, Default)]
pub struct ReflectanceReport {
    pub warnings: Vec<String>,
    /// `(block name, accepted energy)` in execution order.
    pub block_trace: Vec<(String, f64)>,
    /// Energy before the first pass and after each pass.
    pub pass_energies: Vec<f64>,
}

fn pack_lighting(lighting: &ShLighting) -> DVector<f64> {
    let mut x = DVector::zeros(3 * SH_COUNT + 3);
    for c in 0..3 {
        for k in 0..SH_COUNT {
            x[c * SH_COUNT + k] = lighting.coeffs[c][k];
        }
        x[3 * SH_COUNT + c] = lighting.ambient[c];
    }
    x
}

fn unpack_lighting(x: &DVector<f64>, lighting: &mut ShLighting) {
    for c in 0..3 {
        for k in 0..SH_COUNT {
            lighting.coeffs[c][k] = x[c * SH_COUNT + k];
        }
        lighting.ambient[c] = x[3 * SH_COUNT + c];
    }
}

/// Runs the block-coordinate separation from zero maps and the given
/// lighting (typically the mean of the Stage-1 estimates).
pub fn infer_reflectance(
    pairs: &FramePairSet,
    lighting_init: &ShLighting,
    opts: &ReflectanceOptions,
) -> Result<(ReflectanceState, ReflectanceReport)> {
    let (w, h) = (pairs.diffuse.width, pairs.diffuse.height);
    let mut state = ReflectanceState::new(w, h, lighting_init.clone());
    check_dims(pairs, &state)?;
    let mut report = ReflectanceReport::default();
    for (t, frame) in pairs.frames.iter().enumerate() {
        if !frame.overlap.iter().any(|&o| o) {
            report.warnings.push(format!(
                "frame {t} has no texels visible in both views; its cross-view term is inactive"
            ));
        }
    }

    let n_texels = state.specular.data.len();
    let mut current = energy_and_gradients(pairs, &state, &opts.weights)?.0;
    report.pass_energies.push(current);

    let adam_lighting = AdamOptions {
        learning_rate: opts.lr_lighting,
        ..opts.adam
    };
    let adam_maps = AdamOptions {
        learning_rate: opts.lr_maps,
        ..opts.adam
    };

    for _pass in 0..opts.max_passes {
        let pass_start = current;

        // --- Lighting block: SH coefficients free, ambient in [0, 255].
        let x0 = pack_lighting(&state.lighting);
        let mut lo = DVector::from_element(x0.len(), f64::NEG_INFINITY);
        let mut hi = DVector::from_element(x0.len(), f64::INFINITY);
        for c in 0..3 {
            lo[3 * SH_COUNT + c] = 0.0;
            hi[3 * SH_COUNT + c] = 255.0;
        }
        let run = minimize_adam(&x0, &lo, &hi, opts.adam_iters, &adam_lighting, |x| {
            let mut trial = state.clone();
            unpack_lighting(x, &mut trial.lighting);
            let (e, g) = energy_and_gradients(pairs, &trial, &opts.weights)
                .expect("dimensions already validated");
            (e, g.d_lighting)
        })?;
        unpack_lighting(&run.x, &mut state.lighting);
        current = run.cost;
        report.block_trace.push(("lighting".to_string(), current));

        // --- Specular block: per-texel box [0, ceiling]. A zero ceiling
        // pins the whole map, so the block is skipped outright.
        if opts.specular_ceiling > 0.0 {
            let x0 = DVector::from_vec(state.specular.data.clone());
            let lo = DVector::zeros(n_texels);
            let hi = DVector::from_element(n_texels, opts.specular_ceiling.min(255.0));
            let run = minimize_adam(&x0, &lo, &hi, opts.adam_iters, &adam_maps, |x| {
                let mut trial = state.clone();
                trial.specular.data.copy_from_slice(x.as_slice());
                let (e, g) = energy_and_gradients(pairs, &trial, &opts.weights)
                    .expect("dimensions already validated");
                (e, g.d_specular)
            })?;
            state.specular.data.copy_from_slice(run.x.as_slice());
            current = run.cost;
        }
        report.block_trace.push(("specular".to_string(), current));

        // --- Diffuse displacement block: per-texel box keeping
        // C_d + δ_Cd inside [0, 255].
        let mut x0 = DVector::zeros(3 * n_texels);
        let mut lo = DVector::zeros(3 * n_texels);
        let mut hi = DVector::zeros(3 * n_texels);
        for idx in 0..n_texels {
            for c in 0..3 {
                x0[3 * idx + c] = state.delta_diffuse.data[idx][c];
                lo[3 * idx + c] = -pairs.diffuse.data[idx][c];
                hi[3 * idx + c] = 255.0 - pairs.diffuse.data[idx][c];
            }
        }
        let run = minimize_adam(&x0, &lo, &hi, opts.adam_iters, &adam_maps, |x| {
            let mut trial = state.clone();
            for idx in 0..n_texels {
                trial.delta_diffuse.data[idx] = Vector3::new(x[3 * idx], x[3 * idx + 1], x[3 * idx + 2]);
            }
            let (e, g) = energy_and_gradients(pairs, &trial, &opts.weights)
                .expect("dimensions already validated");
            (e, g.d_delta)
        })?;
        for idx in 0..n_texels {
            state.delta_diffuse.data[idx] =
                Vector3::new(run.x[3 * idx], run.x[3 * idx + 1], run.x[3 * idx + 2]);
        }
        current = run.cost;
        report.block_trace.push(("delta-diffuse".to_string(), current));

        report.pass_energies.push(current);
        if pass_start - current < opts.pass_tolerance * pass_start.abs().max(1e-12) {
            break;
        }
    }
    Ok((state, report))
}
