//! Flat `key = value` run configuration with `#` comments and dotted section
//! keys; command-line `--set key=value` pairs override file values.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::forward::{fwhm_factor, PsfModel};
use crate::simulate::{NoiseModel, PhotoPhysics};
use crate::solver::SolverOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got `{got}`")]
    BadLine { line: usize, got: String },
    #[error("key `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("missing required key `{key}`")]
    Missing { key: String },
    #[error("keys `lambda_fraction` and `lambda_abs` are mutually exclusive")]
    LambdaConflict,
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Mean,
    Covariance,
}

/// Regularisation weight: either a fraction of the data-dependent maximum or
/// an absolute value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSpec {
    Fraction(f64),
    Absolute(f64),
}

#[derive(Debug, Clone)]
pub struct SimSettings {
    pub frames: usize,
    pub frame_rate: f64,
    pub seed: u64,
    pub photo: PhotoPhysics,
    pub noise: NoiseModel,
    /// Path of the ground-truth spike CSV; required by `simulate`.
    pub ground_truth: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub pixel_size_nm: f64,
    pub psf_fwhm_nm: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub problem: ProblemKind,
    pub lambda: LambdaSpec,
    /// None: use the problem-kind default (covariance on, mean off).
    pub nonnegative: Option<bool>,
    pub solver: SolverOptions,
    pub sim: SimSettings,
    pub render_upscale: usize,
    pub render_sigma: f64,
}

impl RunConfig {
    /// PSF standard deviation in pixel units.
    pub fn sigma_px(&self) -> f64 {
        self.psf_fwhm_nm / (fwhm_factor() * self.pixel_size_nm)
    }

    pub fn psf(&self) -> PsfModel {
        PsfModel::new(self.sigma_px(), self.grid_h, self.grid_w)
    }
}

/// Parses the config file (if any) then applies `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: idx + 1,
                got: raw.to_string(),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    for pair in overrides {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::BadLine {
            line: 0,
            got: pair.clone(),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    build(map)
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                reason: e.to_string(),
            }),
    }
}

fn require<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    parse(map, key)?.ok_or_else(|| ConfigError::Missing {
        key: key.to_string(),
    })
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::BadValue {
            key: key.to_string(),
            reason: format!("must be a positive finite number, got {v}"),
        })
    }
}

const KNOWN_KEYS: &[&str] = &[
    "pixel_size_nm",
    "psf_fwhm_nm",
    "grid_h",
    "grid_w",
    "problem",
    "lambda_fraction",
    "lambda_abs",
    "nonnegative",
    "solver.max_iterations",
    "solver.certificate_tolerance",
    "solver.insertion_grid_factor",
    "solver.lasso_tolerance",
    "solver.slide_max_evals",
    "solver.amplitude_prune_threshold",
    "sim.frames",
    "sim.frame_rate",
    "sim.seed",
    "sim.tau_on",
    "sim.tau_off",
    "sim.tau_bleach",
    "sim.photons_on",
    "sim.background",
    "sim.gaussian_snr_db",
    "sim.poisson",
    "sim.ground_truth",
    "render.upscale",
    "render.sigma",
];

fn build(map: BTreeMap<String, String>) -> Result<RunConfig, ConfigError> {
    for key in map.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { key: key.clone() });
        }
    }
    let pixel_size_nm = positive("pixel_size_nm", require(&map, "pixel_size_nm")?)?;
    let psf_fwhm_nm = positive("psf_fwhm_nm", require(&map, "psf_fwhm_nm")?)?;
    let grid_h: usize = require(&map, "grid_h")?;
    let grid_w: usize = require(&map, "grid_w")?;
    if grid_h == 0 || grid_w == 0 {
        return Err(ConfigError::BadValue {
            key: "grid_h/grid_w".into(),
            reason: "grid sides must be positive".into(),
        });
    }
    if grid_h * grid_w > 16384 {
        return Err(ConfigError::BadValue {
            key: "grid_h/grid_w".into(),
            reason: "at most 16384 pixels (128x128) are supported".into(),
        });
    }
    let problem = match map.get("problem").map(String::as_str) {
        None => ProblemKind::Covariance,
        Some("covariance") => ProblemKind::Covariance,
        Some("mean") => ProblemKind::Mean,
        Some(other) => {
            return Err(ConfigError::BadValue {
                key: "problem".into(),
                reason: format!("expected `mean` or `covariance`, got `{other}`"),
            })
        }
    };
    let lambda = match (
        parse::<f64>(&map, "lambda_fraction")?,
        parse::<f64>(&map, "lambda_abs")?,
    ) {
        (Some(_), Some(_)) => return Err(ConfigError::LambdaConflict),
        (Some(f), None) => {
            if f <= 0.0 || f > 1.0 {
                return Err(ConfigError::BadValue {
                    key: "lambda_fraction".into(),
                    reason: format!("must be in (0, 1], got {f}"),
                });
            }
            LambdaSpec::Fraction(f)
        }
        (None, Some(a)) => LambdaSpec::Absolute(positive("lambda_abs", a)?),
        (None, None) => LambdaSpec::Fraction(0.1),
    };
    let nonnegative = parse::<bool>(&map, "nonnegative")?;

    let defaults = SolverOptions::default();
    let solver = SolverOptions {
        max_iterations: parse(&map, "solver.max_iterations")?.unwrap_or(defaults.max_iterations),
        certificate_tolerance: parse(&map, "solver.certificate_tolerance")?
            .unwrap_or(defaults.certificate_tolerance),
        insertion_grid_factor: parse(&map, "solver.insertion_grid_factor")?
            .unwrap_or(defaults.insertion_grid_factor),
        lasso_tolerance: parse(&map, "solver.lasso_tolerance")?.unwrap_or(defaults.lasso_tolerance),
        slide_max_evals: parse(&map, "solver.slide_max_evals")?.unwrap_or(defaults.slide_max_evals),
        amplitude_prune_threshold: parse(&map, "solver.amplitude_prune_threshold")?
            .unwrap_or(defaults.amplitude_prune_threshold),
    };
    if solver.insertion_grid_factor == 0 {
        return Err(ConfigError::BadValue {
            key: "solver.insertion_grid_factor".into(),
            reason: "must be >= 1".into(),
        });
    }

    let gaussian_snr_db = match map.get("sim.gaussian_snr_db").map(String::as_str) {
        None | Some("off") | Some("none") => None,
        Some(_) => Some(require::<f64>(&map, "sim.gaussian_snr_db")?),
    };
    let background = parse::<f64>(&map, "sim.background")?.unwrap_or(0.0);
    if background < 0.0 {
        return Err(ConfigError::BadValue {
            key: "sim.background".into(),
            reason: "must be nonnegative".into(),
        });
    }
    let sim = SimSettings {
        frames: parse(&map, "sim.frames")?.unwrap_or(1000),
        frame_rate: positive("sim.frame_rate", parse(&map, "sim.frame_rate")?.unwrap_or(100.0))?,
        seed: parse(&map, "sim.seed")?.unwrap_or(0),
        photo: PhotoPhysics::new(
            positive("sim.tau_on", parse(&map, "sim.tau_on")?.unwrap_or(0.02))?,
            positive("sim.tau_off", parse(&map, "sim.tau_off")?.unwrap_or(0.04))?,
            positive("sim.tau_bleach", parse(&map, "sim.tau_bleach")?.unwrap_or(20.0))?,
            positive("sim.photons_on", parse(&map, "sim.photons_on")?.unwrap_or(1000.0))?,
        ),
        noise: NoiseModel {
            background_photons: background,
            gaussian_snr_db,
            poisson_enabled: parse(&map, "sim.poisson")?.unwrap_or(true),
        },
        ground_truth: map.get("sim.ground_truth").cloned(),
    };
    if sim.frames == 0 {
        return Err(ConfigError::BadValue {
            key: "sim.frames".into(),
            reason: "must be >= 1".into(),
        });
    }

    let render_upscale: usize = parse(&map, "render.upscale")?.unwrap_or(4);
    if render_upscale == 0 {
        return Err(ConfigError::BadValue {
            key: "render.upscale".into(),
            reason: "must be >= 1".into(),
        });
    }
    let render_sigma = positive("render.sigma", parse(&map, "render.sigma")?.unwrap_or(1.0))?;

    Ok(RunConfig {
        pixel_size_nm,
        psf_fwhm_nm,
        grid_h,
        grid_w,
        problem,
        lambda,
        nonnegative,
        solver,
        sim,
        render_upscale,
        render_sigma,
    })
}
