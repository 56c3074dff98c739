//! `mvface` — batch driver for the reconstruction pipeline.
//!
//! Subcommands walk the stages over a scene directory: `gen` writes a
//! synthetic scene with ground truth, `fit` recovers per-frame model state,
//! `infer` separates reflectance, `refine` bends normals and updates the
//! mesh, `track` processes one new frame against a frozen reconstruction,
//! `render` produces images from any recovered state, `eval` runs or
//! re-scores the three-method comparison, and `selftest` exercises the
//! numerical invariants.
//!
//! Exit codes: 0 success, 1 runtime/I-O failure (single-line error on
//! stderr), 2 usage error. With fixed seeds and inputs every subcommand is
//! bit-reproducible, independent of `--threads`.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{ArgGroup, Parser, Subcommand};

use mvface_core::facemodel::ParametricModel;
use mvface_core::fitting::{fit_new_pair, fit_two_views, stage1_appearance, FitState};
use mvface_core::geom::UvRaster;
use mvface_core::georefine::{
    frame_covered, normal_to_spherical, process_new_frames, refine_normals, spherical_to_normal,
    update_vertices, NormalCorrection,
};
use mvface_core::harness::{
    build_frame_pairs, generate_scene, recompute_report, run_comparison, ComparisonOptions,
    Method, SceneParams, SyntheticScene,
};
use mvface_core::io::{
    load_fit_state, load_lighting, load_scalar_raster, load_vector_raster, save_fit_state,
    save_image_png, save_lighting, save_mesh, save_scalar_raster, save_vector_raster,
};
use mvface_core::optim::{minimize_adam, raster_laplacian, AdamOptions};
use mvface_core::reflectance::{infer_reflectance, ReflectanceState};
use mvface_core::render::render_view;
use mvface_core::rng;
use mvface_core::shading::{sample_unit_vector, sh_basis, shade_total_gradients};

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "mvface", version, about = "multi-view facial reflectance and geometry recovery")]
struct Cli {
    /// Pipeline configuration file (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Bound the rayon thread pool (outputs do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write per-stage energy traces as CSV to this path.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with full ground truth.
    Gen {
        /// Scene seed; defaults to the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, default_value_t = 1.0)]
        specular: f64,
        #[arg(long, default_value_t = 1.0)]
        detail: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 64)]
        image_size: u32,
        #[arg(long, default_value_t = 24)]
        uv_resolution: u32,
    },
    /// Fit model state to every frame of a scene (cold start, then tracked).
    Fit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Separate reflectance across all fitted frames.
    Infer {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine one frame's normals and update the mesh.
    Refine {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        reflectance: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
    /// Process one new frame against a frozen reconstruction.
    Track {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        reflectance: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frame: usize,
    },
    /// Render one view of one frame from recovered state.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        reflectance: Option<PathBuf>,
        /// Refined normal map (vector raster) to shade with.
        #[arg(long)]
        normals: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// left, right, or heldout.
        #[arg(long, default_value = "heldout")]
        view: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three-method comparison, or re-score a finished run.
    #[command(group(ArgGroup::new("target").required(true).args(["out", "run"])))]
    Eval {
        #[arg(long)]
        scene: PathBuf,
        /// Run the comparison and write its artifacts here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-score this finished run directory from its stored artifacts.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Exercise gradient checks and core numerical invariants.
    Selftest,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: failed to size the thread pool: {e}");
            std::process::exit(1);
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let mut log = EnergyLog::default();
    let result = dispatch(&cli.command, &config, &mut log);
    if let Some(path) = &cli.log {
        log.write(path)?;
    }
    result
}

/// Per-stage energy traces, flushed as `stage,step,energy` CSV.
#[derive(Default)]
struct EnergyLog {
    sections: Vec<(String, Vec<f64>)>,
}

impl EnergyLog {
    fn push(&mut self, stage: impl Into<String>, trace: Vec<f64>) {
        self.sections.push((stage.into(), trace));
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut out = String::from("stage,step,energy\n");
        for (stage, trace) in &self.sections {
            for (i, e) in trace.iter().enumerate() {
                out.push_str(&format!("{stage},{i},{e}\n"));
            }
        }
        fs::write(path, out).map_err(|e| anyhow::anyhow!("io error on {}: {e}", path.display()))
    }
}

fn dispatch(command: &Command, config: &PipelineConfig, log: &mut EnergyLog) -> anyhow::Result<()> {
    match command {
        Command::Gen {
            seed,
            out,
            frames,
            specular,
            detail,
            noise,
            image_size,
            uv_resolution,
        } => gen(
            seed.unwrap_or(config.seed),
            out,
            SceneParams {
                n_frames: *frames,
                specular_strength: *specular,
                detail_strength: *detail,
                noise_sigma: *noise,
                image_size: *image_size,
                uv_resolution: *uv_resolution,
                ..SceneParams::default()
            },
        ),
        Command::Fit { scene, out } => fit(scene, out, config, log),
        Command::Infer { scene, fits, out } => infer(scene, fits, out, config, log),
        Command::Refine {
            scene,
            fits,
            reflectance,
            out,
            frame,
        } => refine(scene, fits, reflectance, out, *frame, config, log),
        Command::Track {
            scene,
            fits,
            reflectance,
            out,
            frame,
        } => track(scene, fits, reflectance, out, *frame, config, log),
        Command::Render {
            scene,
            fits,
            reflectance,
            normals,
            frame,
            view,
            out,
        } => render(
            scene,
            fits,
            reflectance.as_deref(),
            normals.as_deref(),
            *frame,
            view,
            out,
            config,
        ),
        Command::Eval { scene, out, run } => eval(scene, out.as_deref(), run.as_deref(), config),
        Command::Selftest => selftest(),
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn gen(seed: u64, out: &Path, params: SceneParams) -> anyhow::Result<()> {
    let scene = generate_scene(seed, &params)?;
    scene.save(out)?;
    eprintln!(
        "gen: wrote {} frame(s) at {}x{} to {}",
        params.n_frames,
        params.image_size,
        params.image_size,
        out.display()
    );
    Ok(())
}

fn load_scene(path: &Path) -> anyhow::Result<SyntheticScene> {
    SyntheticScene::load(path).with_context(|| format!("loading scene {}", path.display()))
}

fn fit_state_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("fit_{t}.mvfs"))
}

fn load_fits(dir: &Path, n_frames: usize) -> anyhow::Result<Vec<FitState>> {
    (0..n_frames)
        .map(|t| {
            let path = fit_state_path(dir, t);
            load_fit_state(&path).with_context(|| format!("loading fit state {}", path.display()))
        })
        .collect()
}

fn fit(scene_dir: &Path, out: &Path, config: &PipelineConfig, log: &mut EnergyLog) -> anyhow::Result<()> {
    let scene = load_scene(scene_dir)?;
    fs::create_dir_all(out).map_err(|e| anyhow::anyhow!("io error on {}: {e}", out.display()))?;
    let opts = config.fit_options();
    let mut previous: Option<FitState> = None;
    for t in 0..scene.params.n_frames {
        let views = scene.fit_views(t);
        let (state, report) = match &previous {
            None => fit_two_views(&scene.model, &views, &opts)?,
            Some(warm) => fit_new_pair(&scene.model, warm, &views, &opts)?,
        };
        for w in &report.warnings {
            eprintln!("fit: frame {t}: {w}");
        }
        for (stage, trace) in report.stage_traces {
            log.push(format!("fit{t}:{stage}"), trace);
        }
        eprintln!(
            "fit: frame {t}: landmark {:.6} -> {:.6}, photo {:.6}, total {:.6}",
            report.landmark_energy_initial,
            report.landmark_energy_final,
            report.photo_energy_final,
            report.total_energy_final
        );
        save_fit_state(&state, &fit_state_path(out, t))?;
        previous = Some(state);
    }
    Ok(())
}

fn infer(
    scene_dir: &Path,
    fits_dir: &Path,
    out: &Path,
    config: &PipelineConfig,
    log: &mut EnergyLog,
) -> anyhow::Result<()> {
    let scene = load_scene(scene_dir)?;
    let fits = load_fits(fits_dir, scene.params.n_frames)?;
    let pairs = build_frame_pairs(&scene, &fits, config.uv_resolution)?;
    let (state, report) = infer_reflectance(&pairs, &fits[0].lighting, &config.reflectance_options())?;
    for w in &report.warnings {
        eprintln!("infer: {w}");
    }
    log.push("infer:pass", report.pass_energies.clone());
    for (block, energy) in &report.block_trace {
        log.push(format!("infer:block:{block}"), vec![*energy]);
    }
    eprintln!(
        "infer: energy {:.4} -> {:.4} over {} pass(es)",
        report.pass_energies.first().unwrap_or(&f64::NAN),
        report.pass_energies.last().unwrap_or(&f64::NAN),
        report.pass_energies.len().saturating_sub(1)
    );
    fs::create_dir_all(out).map_err(|e| anyhow::anyhow!("io error on {}: {e}", out.display()))?;
    save_vector_raster(&state.delta_diffuse, &out.join("delta_diffuse.frs"))?;
    save_scalar_raster(&state.specular, &out.join("specular.frs"))?;
    save_lighting(&state.lighting, &out.join("lighting.txt"))?;
    Ok(())
}

fn load_reflectance(dir: &Path) -> anyhow::Result<ReflectanceState> {
    Ok(ReflectanceState {
        delta_diffuse: load_vector_raster(&dir.join("delta_diffuse.frs"))?,
        specular: load_scalar_raster(&dir.join("specular.frs"))?,
        lighting: load_lighting(&dir.join("lighting.txt"))?,
    })
}

/// The correction raster is stored as a vector raster with a zero third
/// channel.
fn correction_to_raster(c: &NormalCorrection) -> UvRaster<nalgebra::Vector3<f64>> {
    UvRaster {
        width: c.delta.width,
        height: c.delta.height,
        data: c
            .delta
            .data
            .iter()
            .map(|d| nalgebra::Vector3::new(d.x, d.y, 0.0))
            .collect(),
    }
}

fn refine(
    scene_dir: &Path,
    fits_dir: &Path,
    reflectance_dir: &Path,
    out: &Path,
    frame: usize,
    config: &PipelineConfig,
    log: &mut EnergyLog,
) -> anyhow::Result<()> {
    let scene = load_scene(scene_dir)?;
    let fits = load_fits(fits_dir, scene.params.n_frames)?;
    let state = load_reflectance(reflectance_dir)?;
    if frame >= scene.params.n_frames {
        bail!("frame {frame} out of range ({} frames)", scene.params.n_frames);
    }
    let pairs = build_frame_pairs(&scene, &fits, state.delta_diffuse.width)?;
    let (correction, refined, report) =
        refine_normals(&pairs, &state, frame, &config.refine_options())?;
    for w in &report.warnings {
        eprintln!("refine: {w}");
    }
    log.push(format!("refine{frame}"), report.accepted_trace.clone());
    eprintln!(
        "refine: frame {frame}: energy {:.4} -> {:.4}",
        report.initial_energy, report.final_energy
    );

    let mesh = scene.model.synthesize_shape(&fits[frame].coeffs)?;
    let covered = frame_covered(&pairs.frames[frame]);
    let updated = update_vertices(&mesh, &refined, &covered)?;

    fs::create_dir_all(out).map_err(|e| anyhow::anyhow!("io error on {}: {e}", out.display()))?;
    save_vector_raster(&correction_to_raster(&correction), &out.join(format!("correction_{frame}.frs")))?;
    save_vector_raster(&refined, &out.join(format!("refined_normals_{frame}.frs")))?;
    save_mesh(&updated, &out.join(format!("mesh_{frame}.txt")))?;
    Ok(())
}

fn track(
    scene_dir: &Path,
    fits_dir: &Path,
    reflectance_dir: &Path,
    out: &Path,
    frame: usize,
    config: &PipelineConfig,
    log: &mut EnergyLog,
) -> anyhow::Result<()> {
    let scene = load_scene(scene_dir)?;
    if frame == 0 || frame >= scene.params.n_frames {
        bail!(
            "track needs a frame in 1..{} (frame 0 is the cold-start fit), got {frame}",
            scene.params.n_frames
        );
    }
    let warm_path = fit_state_path(fits_dir, frame - 1);
    let warm = load_fit_state(&warm_path)
        .with_context(|| format!("loading warm state {}", warm_path.display()))?;
    let state = load_reflectance(reflectance_dir)?;
    let uv = state.delta_diffuse.width;
    let coverage = scene.model.uv_coverage(uv, uv);
    let pairs = mvface_core::reflectance::FramePairSet {
        diffuse: scene.model.synthesize_albedo(&warm.coeffs, &coverage)?,
        shininess: config.shininess,
        frames: Vec::new(),
    };
    let output = process_new_frames(
        &scene.model,
        &warm,
        &pairs,
        &state,
        scene.fit_views(frame),
        &config.fit_options(),
        &config.refine_options(),
    )?;
    for w in &output.warnings {
        eprintln!("track: {w}");
    }
    log.push(
        format!("track{frame}:refine"),
        output.refine_report.accepted_trace.clone(),
    );
    eprintln!(
        "track: frame {frame}: landmark {:.6} -> {:.6}, refine {:.4} -> {:.4}",
        output.fit_report.landmark_energy_initial,
        output.fit_report.landmark_energy_final,
        output.refine_report.initial_energy,
        output.refine_report.final_energy
    );
    fs::create_dir_all(out).map_err(|e| anyhow::anyhow!("io error on {}: {e}", out.display()))?;
    save_fit_state(&output.fit, &fit_state_path(out, frame))?;
    save_vector_raster(
        &correction_to_raster(&output.correction),
        &out.join(format!("correction_{frame}.frs")),
    )?;
    save_vector_raster(
        &output.refined_normals,
        &out.join(format!("refined_normals_{frame}.frs")),
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render(
    scene_dir: &Path,
    fits_dir: &Path,
    reflectance_dir: Option<&Path>,
    normals: Option<&Path>,
    frame: usize,
    view: &str,
    out: &Path,
    config: &PipelineConfig,
) -> anyhow::Result<()> {
    let scene = load_scene(scene_dir)?;
    let view_index = match view {
        "left" => 0,
        "right" => 1,
        "heldout" => 2,
        other => bail!("unknown view {other:?}; expected left, right, or heldout"),
    };
    if frame >= scene.params.n_frames {
        bail!("frame {frame} out of range ({} frames)", scene.params.n_frames);
    }
    let fit_path = fit_state_path(fits_dir, frame);
    let fit = load_fit_state(&fit_path)
        .with_context(|| format!("loading fit state {}", fit_path.display()))?;
    let mesh = scene.model.synthesize_shape(&fit.coeffs)?;

    let reflectance = reflectance_dir.map(load_reflectance).transpose()?;
    let uv = reflectance
        .as_ref()
        .map(|s| s.delta_diffuse.width)
        .unwrap_or(config.uv_resolution);
    let (mut appearance, _coverage) = stage1_appearance(&scene.model, &fit.coeffs, &mesh, uv)?;
    let mut lighting = fit.lighting.clone();
    if let Some(state) = &reflectance {
        for (d, delta) in appearance
            .diffuse
            .data
            .iter_mut()
            .zip(state.delta_diffuse.data.iter())
        {
            *d += *delta;
        }
        appearance.specular = state.specular.clone();
        appearance.shininess = config.shininess;
        lighting = state.lighting.clone();
    }
    if let Some(path) = normals {
        let map = load_vector_raster(path)?;
        if map.width != appearance.normal.width || map.height != appearance.normal.height {
            bail!(
                "normal map {} is {}x{}, appearance maps are {}x{}",
                path.display(),
                map.width,
                map.height,
                appearance.normal.width,
                appearance.normal.height
            );
        }
        appearance.normal = map;
    }
    let (image, _geom) = render_view(
        &mesh,
        &fit.pose,
        &scene.cameras[view_index],
        &appearance,
        &lighting,
    )?;
    save_image_png(&mvface_core::harness::quantize_image(&image), out)?;
    eprintln!("render: wrote {}", out.display());
    Ok(())
}

fn eval(
    scene_dir: &Path,
    out: Option<&Path>,
    run: Option<&Path>,
    config: &PipelineConfig,
) -> anyhow::Result<()> {
    let scene = load_scene(scene_dir)?;
    if let Some(out) = out {
        let opts = ComparisonOptions {
            fit: config.fit_options(),
            reflectance: config.reflectance_options(),
            refine: config.refine_options(),
        };
        let report = run_comparison(&scene, &Method::all(), &opts, Some(out))?;
        report.validate()?;
        for w in &report.warnings {
            eprintln!("eval: {w}");
        }
        print!("{}", report.table());
        return Ok(());
    }
    let run = run.expect("clap enforces one of --out/--run");
    let recomputed = recompute_report(&scene, run)?;
    let stored_path = run.join("report.csv");
    let stored = fs::read_to_string(&stored_path)
        .map_err(|e| anyhow::anyhow!("io error on {}: {e}", stored_path.display()))?;
    let csv = recomputed.to_csv();
    if csv != stored {
        bail!(
            "recomputed metrics differ from {}; the run directory was modified",
            stored_path.display()
        );
    }
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Selftest
// ---------------------------------------------------------------------------

fn check(name: &str, ok: bool, detail: String) -> anyhow::Result<()> {
    if ok {
        eprintln!("selftest: {name} ok");
        Ok(())
    } else {
        bail!("selftest {name} failed: {detail}")
    }
}

fn selftest() -> anyhow::Result<()> {
    use nalgebra::{DVector, Vector3};

    // Spherical-harmonic identities: the constant basis value and the
    // squared band sum 9/(4π), direction-independent.
    let mut rng = rng::stream(2024, "selftest");
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = sample_unit_vector(&mut rng);
        let basis = sh_basis(n);
        worst = worst.max((basis[0] - 0.28209479177387814).abs());
        let sum: f64 = basis.iter().map(|b| b * b).sum();
        worst = worst.max((sum - 9.0 / (4.0 * std::f64::consts::PI)).abs());
    }
    check("sh-identities", worst < 1e-12, format!("worst deviation {worst}"))?;

    // Shading gradients against central differences.
    let light = mvface_core::shading::sample_test_lighting(&mut rng);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let albedo = Vector3::new(120.0, 90.0, 70.0);
        let c_s = 35.0;
        let n = sample_unit_vector(&mut rng);
        let v = sample_unit_vector(&mut rng);
        let g = shade_total_gradients(albedo, c_s, n, v, &light, 5.0);
        let h = 1e-6;
        for c in 0..3 {
            let mut ap = albedo;
            let mut am = albedo;
            ap[c] += h;
            am[c] -= h;
            let fd = (mvface_core::shading::shade_total_point(ap, c_s, n, v, &light, 5.0)
                - mvface_core::shading::shade_total_point(am, c_s, n, v, &light, 5.0))
                / (2.0 * h);
            for out in 0..3 {
                let analytic = if out == c { g.d_albedo[out] } else { 0.0 };
                worst = worst.max((fd[out] - analytic).abs());
            }
        }
    }
    check("shading-gradients", worst < 1e-6, format!("worst deviation {worst}"))?;

    // Spherical round trip.
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let n = sample_unit_vector(&mut rng);
        let (theta, phi) = normal_to_spherical(&n);
        worst = worst.max((spherical_to_normal(theta, phi) - n).norm());
    }
    check("spherical-round-trip", worst < 1e-9, format!("worst error {worst}"))?;

    // Projected Adam respects box constraints and finds the boundary.
    let x0 = DVector::from_vec(vec![0.2]);
    let lo = DVector::from_vec(vec![0.0]);
    let hi = DVector::from_vec(vec![1.0]);
    let run = minimize_adam(&x0, &lo, &hi, 600, &AdamOptions::default(), |x| {
        let d = x[0] - 2.0;
        (d * d, DVector::from_vec(vec![2.0 * d]))
    })?;
    check(
        "adam-box",
        (run.x[0] - 1.0).abs() < 1e-6,
        format!("argmin {} (expected the bound 1)", run.x[0]),
    )?;

    // The raster Laplacian is self-adjoint: ⟨Lx, y⟩ = ⟨x, Ly⟩.
    let mut a = UvRaster::filled(9, 7, 0.0);
    let mut b = UvRaster::filled(9, 7, 0.0);
    for i in 0..a.data.len() {
        a.data[i] = ((i * 31 + 7) % 13) as f64 - 6.0;
        b.data[i] = ((i * 17 + 3) % 11) as f64 - 5.0;
    }
    let la = raster_laplacian(&a);
    let lb = raster_laplacian(&b);
    let lhs: f64 = la.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).sum();
    let rhs: f64 = a.data.iter().zip(lb.data.iter()).map(|(x, y)| x * y).sum();
    check(
        "laplacian-adjoint",
        (lhs - rhs).abs() < 1e-9,
        format!("⟨La,b⟩ = {lhs}, ⟨a,Lb⟩ = {rhs}"),
    )?;

    // Model generation is deterministic.
    let m1 = mvface_core::facemodel::generate_synthetic_model(5, 200, 3, 2, 3)?;
    let m2 = mvface_core::facemodel::generate_synthetic_model(5, 200, 3, 2, 3)?;
    check(
        "model-determinism",
        model_eq(&m1, &m2),
        "two generations from one seed differ".to_string(),
    )?;

    eprintln!("selftest: all checks passed");
    Ok(())
}

fn model_eq(a: &ParametricModel, b: &ParametricModel) -> bool {
    a.mean_shape == b.mean_shape && a.triangles == b.triangles && a.sigma_id == b.sigma_id
}
