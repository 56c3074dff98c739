//! Pipeline configuration: one TOML file, strict keys, defaults matching the
//! energy weights and solver budgets the library ships with.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mvface_core::fitting::{FitOptions, FitWeights};
use mvface_core::georefine::{RefineOptions, RefineWeights};
use mvface_core::optim::GaussNewtonOptions;
use mvface_core::reflectance::{ReflectanceOptions, ReflectanceWeights};

/// Everything tunable about a pipeline run. Unknown keys are rejected with
/// an error naming the key, so typos never silently fall back to defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed for anything stochastic a subcommand does.
    pub seed: u64,
    /// Resolution of the internal UV maps (albedo, specular, normals).
    pub uv_resolution: u32,
    /// Blinn-Phong exponent of the specular layer.
    pub shininess: f64,
    pub weights: WeightsConfig,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    /// Landmark term weight of the model fit.
    pub landmark: f64,
    /// Coefficient regularization weight of the model fit.
    pub regularization: f64,
    /// Cross-view specular-difference weight of the separation stage.
    pub specular_difference: f64,
    /// Laplacian smoothness weight of the separation stage.
    pub smoothness: f64,
    /// Smoothness weight on the normal-correction rasters.
    pub correction_smoothness: f64,
    /// Magnitude penalty on the normal corrections.
    pub correction_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Gauss-Newton iteration cap per fitting stage.
    pub gauss_newton_iterations: usize,
    /// Adam iterations per block of the separation stage.
    pub reflectance_iterations: usize,
    /// Block-coordinate passes of the separation stage.
    pub reflectance_passes: usize,
    /// Relative per-pass decrease below which the separation stops.
    pub reflectance_pass_tolerance: f64,
    /// Adam learning rate of the lighting block.
    pub lr_lighting: f64,
    /// Adam learning rate of the map blocks.
    pub lr_maps: f64,
    /// Adam iterations of the normal refinement.
    pub refine_iterations: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            uv_resolution: 128,
            shininess: 5.0,
            weights: WeightsConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig {
            landmark: 10.0,
            regularization: 5e-5,
            specular_difference: 0.1,
            smoothness: 0.001,
            correction_smoothness: 1e-3,
            correction_magnitude: 0.3,
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        let refl = ReflectanceOptions::default();
        let refine = RefineOptions::default();
        SolverConfig {
            gauss_newton_iterations: fit.solver.max_iters,
            reflectance_iterations: refl.adam_iters,
            reflectance_passes: refl.max_passes,
            reflectance_pass_tolerance: refl.pass_tolerance,
            lr_lighting: refl.lr_lighting,
            lr_maps: refl.lr_maps,
            refine_iterations: refine.iters,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("io error on {}: {e}", path.display()))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("config error in {}: {}", path.display(), one_line(&e)))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.uv_resolution < 8 {
            anyhow::bail!("uv_resolution must be at least 8, got {}", self.uv_resolution);
        }
        if !(self.shininess > 0.0) {
            anyhow::bail!("shininess must be positive, got {}", self.shininess);
        }
        for (name, v) in [
            ("weights.landmark", self.weights.landmark),
            ("weights.regularization", self.weights.regularization),
            ("weights.specular_difference", self.weights.specular_difference),
            ("weights.smoothness", self.weights.smoothness),
            ("weights.correction_smoothness", self.weights.correction_smoothness),
            ("weights.correction_magnitude", self.weights.correction_magnitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                anyhow::bail!("{name} must be finite and non-negative, got {v}");
            }
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            weights: FitWeights {
                landmark: self.weights.landmark,
                regularization: self.weights.regularization,
                ..FitWeights::default()
            },
            uv_resolution: self.uv_resolution,
            solver: GaussNewtonOptions {
                max_iters: self.solver.gauss_newton_iterations,
                ..GaussNewtonOptions::default()
            },
        }
    }

    pub fn reflectance_options(&self) -> ReflectanceOptions {
        ReflectanceOptions {
            weights: ReflectanceWeights {
                lambda_s: self.weights.specular_difference,
                lambda_h: self.weights.smoothness,
            },
            adam_iters: self.solver.reflectance_iterations,
            lr_lighting: self.solver.lr_lighting,
            lr_maps: self.solver.lr_maps,
            max_passes: self.solver.reflectance_passes,
            pass_tolerance: self.solver.reflectance_pass_tolerance,
            ..ReflectanceOptions::default()
        }
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            weights: RefineWeights {
                w1: self.weights.correction_smoothness,
                w2: self.weights.correction_magnitude,
            },
            iters: self.solver.refine_iterations,
            ..RefineOptions::default()
        }
    }
}

/// TOML errors are multi-line; error output must stay machine-parseable.
fn one_line(e: &toml::de::Error) -> String {
    e.to_string().replace('\n', " ").trim().to_string()
}
