//! Run configuration and simulation recipes as TOML files. All defaults
//! mirror the reference analysis settings and are echoed back into the run
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{McmcConfig, SingleZoneInit};
use crate::model::{
    HarmonicConfig, JointStaticParams, KernelForm, KernelParams, PriorSpec, TimeGrid, ZoneGeometry,
};
use crate::simulate::{Missingness, SimulationRecipe};

/// Which model a run fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Joint,
    SingleZone,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct McmcSection {
    #[serde(default = "default_iterations")]
    iterations: usize,
    #[serde(default)]
    burn_in: Option<usize>,
    #[serde(default = "default_thin")]
    thin: usize,
    #[serde(default)]
    step_scale: Option<f64>,
    #[serde(default = "default_pilot")]
    pilot_iterations: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default = "default_target_acceptance")]
    target_acceptance: f64,
}

fn default_iterations() -> usize {
    22_000
}

fn default_thin() -> usize {
    1
}

fn default_pilot() -> usize {
    5_000
}

fn default_target_acceptance() -> f64 {
    0.25
}

impl Default for McmcSection {
    fn default() -> Self {
        McmcSection {
            iterations: default_iterations(),
            burn_in: None,
            thin: default_thin(),
            step_scale: None,
            pilot_iterations: default_pilot(),
            seed: None,
            target_acceptance: default_target_acceptance(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForecastSection {
    #[serde(default = "default_horizon")]
    horizon: usize,
    #[serde(default = "default_holdout")]
    holdout: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            horizon: default_horizon(),
            holdout: default_holdout(),
        }
    }
}

fn default_horizon() -> usize {
    10
}

fn default_holdout() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FfbsSection {
    #[serde(default = "default_ffbs_draws")]
    draws: usize,
}

fn default_ffbs_draws() -> usize {
    1_000
}

impl Default for FfbsSection {
    fn default() -> Self {
        FfbsSection {
            draws: default_ffbs_draws(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    model: ModelKind,
    panel: PathBuf,
    #[serde(default)]
    geometry: Option<PathBuf>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    threads: usize,
    #[serde(default = "default_output")]
    output: PathBuf,
    #[serde(default)]
    kernel: KernelForm,
    #[serde(default)]
    harmonic: HarmonicConfig,
    #[serde(default)]
    priors: PriorSpec,
    #[serde(default)]
    single_init: Option<SingleZoneInit>,
    #[serde(default)]
    mcmc: McmcSection,
    #[serde(default)]
    ffbs: FfbsSection,
    #[serde(default)]
    forecast: ForecastSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A fully resolved run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub panel_path: PathBuf,
    pub geometry_path: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub output: PathBuf,
    pub kernel: KernelForm,
    pub harmonic: HarmonicConfig,
    pub priors: PriorSpec,
    pub single_init: SingleZoneInit,
    pub mcmc: McmcConfig,
    pub ffbs_draws: usize,
    pub forecast_horizon: usize,
    pub holdout: usize,
}

pub fn parse_run_config(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let file: RunConfigFile =
        toml::from_str(text).map_err(|e| Error::parse(format!("run config: {e}")))?;
    let seed = file.seed.unwrap_or(0);
    let resolve = |p: &PathBuf| {
        if p.is_absolute() {
            p.clone()
        } else {
            base_dir.join(p)
        }
    };
    let config = RunConfig {
        model: file.model,
        panel_path: resolve(&file.panel),
        geometry_path: file.geometry.as_ref().map(&resolve),
        seed,
        threads: file.threads,
        output: resolve(&file.output),
        kernel: file.kernel,
        harmonic: file.harmonic,
        priors: file.priors,
        single_init: file.single_init.unwrap_or_default(),
        mcmc: McmcConfig {
            iterations: file.mcmc.iterations,
            burn_in: file.mcmc.burn_in.unwrap_or(file.mcmc.iterations / 10),
            thin: file.mcmc.thin,
            step_scale: file.mcmc.step_scale,
            proposal_cov: None,
            pilot_iterations: file.mcmc.pilot_iterations,
            seed: file.mcmc.seed.unwrap_or(seed),
            target_acceptance: file.mcmc.target_acceptance,
        },
        ffbs_draws: file.ffbs.draws,
        forecast_horizon: file.forecast.horizon,
        holdout: file.forecast.holdout,
    };
    config.harmonic.validate()?;
    config.priors.validate()?;
    config.mcmc.validate()?;
    if config.model == ModelKind::Joint && config.geometry_path.is_none() {
        return Err(Error::validation(
            "joint model runs require a geometry file",
        ));
    }
    Ok(config)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::parse(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_run_config(&text, base)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    #[serde(default)]
    times: Option<Vec<f64>>,
    #[serde(default)]
    n_times: Option<usize>,
    #[serde(default = "default_start")]
    start: f64,
}

fn default_start() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometrySection {
    zone_ids: Vec<String>,
    #[serde(default)]
    lon: Option<Vec<f64>>,
    #[serde(default)]
    lat: Option<Vec<f64>>,
    #[serde(default)]
    distances: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelSection {
    sigma: f64,
    phi: f64,
    #[serde(default)]
    form: KernelForm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsSection {
    obs_var: Vec<f64>,
    sys_var: Vec<f64>,
    theta1: Vec<f64>,
    theta2: Vec<f64>,
    eta1: KernelSection,
    eta2: KernelSection,
    eta3: KernelSection,
    #[serde(default = "default_level_mean")]
    level_init_mean: f64,
    #[serde(default = "default_level_var")]
    level_init_var: f64,
}

fn default_level_mean() -> f64 {
    6.0
}

fn default_level_var() -> f64 {
    20.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeFile {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_missing")]
    missing_probability: f64,
    grid: GridSection,
    #[serde(default)]
    harmonic: HarmonicConfig,
    geometry: GeometrySection,
    params: ParamsSection,
}

fn default_missing() -> f64 {
    0.0
}

pub fn parse_recipe(text: &str) -> Result<SimulationRecipe> {
    let file: RecipeFile =
        toml::from_str(text).map_err(|e| Error::parse(format!("recipe: {e}")))?;
    let times = match (&file.grid.times, file.grid.n_times) {
        (Some(times), _) => times.clone(),
        (None, Some(n)) => (0..n).map(|i| file.grid.start + i as f64).collect(),
        (None, None) => {
            return Err(Error::parse(
                "recipe grid needs either `times` or `n_times`",
            ))
        }
    };
    let grid = TimeGrid::from_times(times)?;

    let geometry = match (
        &file.geometry.distances,
        &file.geometry.lon,
        &file.geometry.lat,
    ) {
        (Some(rows), _, _) => {
            let n = file.geometry.zone_ids.len();
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(Error::parse(
                    "recipe distance matrix does not match the zone count",
                ));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            ZoneGeometry::from_distances(
                file.geometry.zone_ids.clone(),
                DMatrix::from_row_slice(n, n, &flat),
            )?
        }
        (None, Some(lon), Some(lat)) => {
            if lon.len() != lat.len() {
                return Err(Error::parse("recipe lon/lat lengths differ"));
            }
            let coords: Vec<(f64, f64)> = lon.iter().zip(lat).map(|(&x, &y)| (x, y)).collect();
            ZoneGeometry::from_coordinates(file.geometry.zone_ids.clone(), coords)?
        }
        _ => {
            return Err(Error::parse(
                "recipe geometry needs either `distances` or `lon` and `lat`",
            ))
        }
    };

    let n_z = geometry.n_zones();
    let p = &file.params;
    for (name, v) in [
        ("obs_var", &p.obs_var),
        ("sys_var", &p.sys_var),
        ("theta1", &p.theta1),
        ("theta2", &p.theta2),
    ] {
        if v.len() != n_z {
            return Err(Error::parse(format!(
                "recipe params.{name} has {} entries but there are {n_z} zones",
                v.len()
            )));
        }
    }
    let kernel = |k: &KernelSection| KernelParams {
        sigma: k.sigma,
        phi: k.phi,
        form: k.form,
    };
    let params = JointStaticParams {
        obs_var: DVector::from_vec(p.obs_var.clone()),
        sys_var: DVector::from_vec(p.sys_var.clone()),
        theta1: DVector::from_vec(p.theta1.clone()),
        theta2: DVector::from_vec(p.theta2.clone()),
        eta1: kernel(&p.eta1),
        eta2: kernel(&p.eta2),
        eta3: kernel(&p.eta3),
        init_mean: DVector::from_element(n_z, p.level_init_mean),
        init_var: DMatrix::identity(n_z, n_z) * p.level_init_var,
    };
    Ok(SimulationRecipe {
        params,
        geometry,
        grid,
        harmonic: file.harmonic,
        missingness: Missingness::Probability(file.missing_probability),
        seed: file.seed,
    })
}

pub fn load_recipe(path: &Path) -> Result<SimulationRecipe> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::parse(format!("cannot read recipe {}: {e}", path.display())))?;
    parse_recipe(&text)
}
