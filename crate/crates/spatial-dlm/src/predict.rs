//! Within-sample predictive generation, k-step-ahead forecasting,
//! amplitude/phase transformation and fit metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::kernel::kernel_matrix;
use crate::mcmc::{SingleZoneParams, TwoStageFit};
use crate::model::{
    observation_row, HarmonicConfig, JointStaticParams, PanelData, TimeGrid, ZoneGeometry,
};
use crate::smoother::LatentPath;
use crate::stats;

const PREDICTIVE_STREAM: u64 = 0x7072_6564;
const FORECAST_STREAM: u64 = 0x6663_7374;

/// Amplitude and phase of the harmonic theta1 sin + theta2 cos, so that
/// theta1 sin(wt) + theta2 cos(wt) = amplitude * cos(wt - phase).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplitudePhase {
    pub amplitude: f64,
    pub phase: f64,
}

/// Two-argument arctangent convention: phase = atan2(theta1, theta2),
/// mapped into (-pi, pi]; a zero vector has phase 0 by convention.
pub fn amplitude_phase(theta1: f64, theta2: f64) -> AmplitudePhase {
    let amplitude = theta1.hypot(theta2);
    if amplitude == 0.0 {
        return AmplitudePhase {
            amplitude: 0.0,
            phase: 0.0,
        };
    }
    let mut phase = theta1.atan2(theta2);
    if phase <= -std::f64::consts::PI {
        phase = std::f64::consts::PI;
    }
    AmplitudePhase { amplitude, phase }
}

/// Per-draw predicted observations over a common set of times.
#[derive(Debug, Clone)]
pub struct PredictiveDraws {
    pub times: Vec<f64>,
    /// One n_times x n_zones matrix per retained draw.
    pub draws: Vec<DMatrix<f64>>,
}

impl PredictiveDraws {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn n_zones(&self) -> usize {
        self.draws.first().map_or(0, |d| d.ncols())
    }

    /// All draw values at one (time, zone) cell.
    pub fn cell(&self, i: usize, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[(i, j)]).collect()
    }
}

/// Mean and central interval of predictive draws per time per zone.
#[derive(Debug, Clone)]
pub struct PredictiveSummary {
    pub times: Vec<f64>,
    pub mean: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub level: f64,
}

/// Summarize predictive draws with a central interval of the given nominal
/// level (0.95 gives the 2.5% and 97.5% quantiles).
pub fn summarize_draws(draws: &PredictiveDraws, level: f64) -> Result<PredictiveSummary> {
    if draws.draws.is_empty() {
        return Err(Error::validation("cannot summarize an empty draw set"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation(format!(
            "interval level must lie in (0, 1), got {level}"
        )));
    }
    let n = draws.times.len();
    let n_z = draws.n_zones();
    let tail = (1.0 - level) / 2.0;
    let mut mean = DMatrix::zeros(n, n_z);
    let mut lower = DMatrix::zeros(n, n_z);
    let mut upper = DMatrix::zeros(n, n_z);
    for i in 0..n {
        for j in 0..n_z {
            let cell = draws.cell(i, j);
            mean[(i, j)] = stats::mean(&cell);
            lower[(i, j)] = stats::quantile(&cell, tail);
            upper[(i, j)] = stats::quantile(&cell, 1.0 - tail);
        }
    }
    Ok(PredictiveSummary {
        times: draws.times.clone(),
        mean,
        lower,
        upper,
        level,
    })
}

/// Within-sample predictive draws for the joint model: for each retained
/// (psi, latent path) pair and each observation time and zone, draw from
/// N(theta1 sin + theta2 cos + level, V).
pub fn within_sample_predictive(
    psi_draws: &[JointStaticParams],
    latent_paths: &[LatentPath],
    grid: &TimeGrid,
    config: &HarmonicConfig,
    seed: u64,
) -> Result<PredictiveDraws> {
    if psi_draws.len() != latent_paths.len() {
        return Err(Error::validation(format!(
            "{} parameter draws but {} latent paths",
            psi_draws.len(),
            latent_paths.len()
        )));
    }
    config.validate()?;
    let n = grid.len();
    let draws: Vec<DMatrix<f64>> = psi_draws
        .par_iter()
        .zip(latent_paths)
        .enumerate()
        .map(|(r, (psi, path))| {
            let n_z = psi.n_zones();
            assert_eq!(
                path.states.nrows(),
                n + 1,
                "latent path must include the initial state"
            );
            let mut rng =
                ChaCha20Rng::seed_from_u64(derive_seed(seed, PREDICTIVE_STREAM, r as u64));
            let mut out = DMatrix::zeros(n, n_z);
            for i in 0..n {
                let [s, c, _] = observation_row(grid.times()[i], config);
                for j in 0..n_z {
                    let mean = psi.theta1[j] * s + psi.theta2[j] * c + path.states[(i + 1, j)];
                    let noise: f64 = rng.sample(StandardNormal);
                    out[(i, j)] = mean + psi.obs_var[j].sqrt() * noise;
                }
            }
            out
        })
        .collect();
    Ok(PredictiveDraws {
        times: grid.times().to_vec(),
        draws,
    })
}

/// Single-zone analogue: the harmonic coefficients are part of the sampled
/// path, so the predictive mean is F_t theta_t per draw.
pub fn within_sample_predictive_single(
    psi_draws: &[SingleZoneParams],
    latent_paths: &[LatentPath],
    grid: &TimeGrid,
    config: &HarmonicConfig,
    seed: u64,
) -> Result<PredictiveDraws> {
    if psi_draws.len() != latent_paths.len() {
        return Err(Error::validation(format!(
            "{} parameter draws but {} latent paths",
            psi_draws.len(),
            latent_paths.len()
        )));
    }
    config.validate()?;
    let n = grid.len();
    let draws: Vec<DMatrix<f64>> = psi_draws
        .par_iter()
        .zip(latent_paths)
        .enumerate()
        .map(|(r, (params, path))| {
            assert_eq!(
                path.states.ncols(),
                3,
                "single-zone path must be 3-dimensional"
            );
            let mut rng =
                ChaCha20Rng::seed_from_u64(derive_seed(seed, PREDICTIVE_STREAM, r as u64));
            let mut out = DMatrix::zeros(n, 1);
            for i in 0..n {
                let row = observation_row(grid.times()[i], config);
                let mean: f64 = (0..3).map(|d| row[d] * path.states[(i + 1, d)]).sum();
                let noise: f64 = rng.sample(StandardNormal);
                out[(i, 0)] = mean + params.obs_var.sqrt() * noise;
            }
            out
        })
        .collect();
    Ok(PredictiveDraws {
        times: grid.times().to_vec(),
        draws,
    })
}

/// Forecast draws plus their interval summary.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub draws: PredictiveDraws,
    pub summary: PredictiveSummary,
}

impl ForecastResult {
    pub fn horizons(&self) -> &[f64] {
        &self.draws.times
    }
}

/// Exact forecast moments for one parameter set: at horizon k the level
/// state has mean m_n and covariance R_{n+k} = C_n + sum of the k system
/// covariances over the extension grid.
pub fn forecast_moments(
    end_mean: &DVector<f64>,
    end_cov: &DMatrix<f64>,
    params: &JointStaticParams,
    geometry: &ZoneGeometry,
    extension: &TimeGrid,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let k3 = kernel_matrix(geometry, &params.eta3)?;
    let n_z = params.n_zones();
    let mut base_sys = k3.entries().clone();
    for j in 0..n_z {
        base_sys[(j, j)] += params.sys_var[j];
    }
    let mut cov = end_cov.clone();
    let mut out = Vec::with_capacity(extension.len());
    for &k in extension.gap_scales() {
        cov += &base_sys * (k * k);
        out.push((end_mean.clone(), cov.clone()));
    }
    Ok(out)
}

/// k-step-ahead observation forecasts. Each retained draw r carries its own
/// filter endpoint (m_n, C_n); the state forecast N(m_n, R_{n+k}) gains the
/// per-zone observation variance and the static harmonic of draw r.
pub fn k_step_forecast(
    ends: &[(DVector<f64>, DMatrix<f64>)],
    psi_draws: &[JointStaticParams],
    geometry: &ZoneGeometry,
    extension: &TimeGrid,
    config: &HarmonicConfig,
    seed: u64,
    level: f64,
) -> Result<ForecastResult> {
    if ends.len() != psi_draws.len() {
        return Err(Error::validation(format!(
            "{} filter endpoints but {} parameter draws",
            ends.len(),
            psi_draws.len()
        )));
    }
    if extension.is_empty() {
        return Err(Error::validation("forecast horizon must be at least 1"));
    }
    config.validate()?;
    let horizons = extension.times().to_vec();
    let draws: Vec<DMatrix<f64>> = psi_draws
        .par_iter()
        .zip(ends)
        .enumerate()
        .map(|(r, (psi, (end_mean, end_cov)))| {
            let n_z = psi.n_zones();
            let moments = forecast_moments(end_mean, end_cov, psi, geometry, extension)?;
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, FORECAST_STREAM, r as u64));
            let mut out = DMatrix::zeros(horizons.len(), n_z);
            for (h, (mean, cov)) in moments.iter().enumerate() {
                let mut obs_cov = cov.clone();
                for j in 0..n_z {
                    obs_cov[(j, j)] += psi.obs_var[j];
                }
                let draw = crate::smoother::sample_mvn(mean, &obs_cov, &mut rng);
                let [s, c, _] = observation_row(horizons[h], config);
                for j in 0..n_z {
                    out[(h, j)] = draw[j] + psi.theta1[j] * s + psi.theta2[j] * c;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let draws = PredictiveDraws {
        times: horizons,
        draws,
    };
    let summary = summarize_draws(&draws, level)?;
    Ok(ForecastResult { draws, summary })
}

/// Convenience wrapper: per-draw filter endpoints from a completed fit,
/// then [`k_step_forecast`] over `horizon` steps continuing the panel grid.
pub fn forecast_from_fit(
    fit: &TwoStageFit,
    panel: &PanelData,
    geometry: &ZoneGeometry,
    config: &HarmonicConfig,
    horizon: usize,
    seed: u64,
    level: f64,
) -> Result<ForecastResult> {
    let ends: Vec<(DVector<f64>, DMatrix<f64>)> = fit
        .ffbs_params
        .par_iter()
        .map(|psi| {
            let k3 = kernel_matrix(geometry, &psi.eta3)?;
            let detrended = crate::filter::detrend(panel, &psi.theta1, &psi.theta2, config);
            let traj = crate::filter::forward_filter_joint(&detrended, psi, &k3)?;
            Ok(traj.last_moments())
        })
        .collect::<Result<Vec<_>>>()?;
    let extension = panel.grid().extension(horizon)?;
    k_step_forecast(
        &ends,
        &fit.ffbs_params,
        geometry,
        &extension,
        config,
        seed,
        level,
    )
}

/// Single-zone observation forecasts. Each retained draw refilters the
/// panel for its own endpoint; at horizon k the state covariance grows by
/// the accumulated k^2 diag{W} and the observation projects through the
/// harmonic row at the future time.
pub fn forecast_single_from_fit(
    fit: &crate::mcmc::SingleZoneFit,
    panel: &PanelData,
    init: &crate::mcmc::SingleZoneInit,
    config: &HarmonicConfig,
    horizon: usize,
    seed: u64,
    level: f64,
) -> Result<ForecastResult> {
    if horizon == 0 {
        return Err(Error::validation("forecast horizon must be at least 1"));
    }
    let extension = panel.grid().extension(horizon)?;
    let m0 = DVector::from_row_slice(&init.mean);
    let c0 = DMatrix::from_diagonal(&DVector::from_row_slice(&init.var));
    let horizons = extension.times().to_vec();
    let draws: Vec<DMatrix<f64>> = fit
        .ffbs_params
        .par_iter()
        .enumerate()
        .map(|(r, params)| {
            let traj = crate::filter::forward_filter_single(
                panel,
                params.obs_var,
                &params.sys_var,
                &m0,
                &c0,
                config,
            )?;
            let (m_n, c_n) = traj.last_moments();
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, FORECAST_STREAM, r as u64));
            let mut cov = c_n;
            let mut out = DMatrix::zeros(horizons.len(), 1);
            for (h, &k) in extension.gap_scales().iter().enumerate() {
                for d in 0..3 {
                    cov[(d, d)] += k * k * params.sys_var[d];
                }
                let row = observation_row(horizons[h], config);
                let f = DMatrix::from_row_slice(1, 3, &row);
                let mean = (&f * &m_n)[(0, 0)];
                let var = (&f * &cov * f.transpose())[(0, 0)] + params.obs_var;
                let noise: f64 = rng.sample(StandardNormal);
                out[(h, 0)] = mean + var.sqrt() * noise;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let draws = PredictiveDraws {
        times: horizons,
        draws,
    };
    let summary = summarize_draws(&draws, level)?;
    Ok(ForecastResult { draws, summary })
}

/// Root-mean-square error per zone: at each observed time point the RMSE
/// across draws against the observation, averaged over that zone's observed
/// time points. Masked entries are excluded; a zone with no observations is
/// an error.
pub fn rmse_by_zone(observed: &PanelData, draws: &PredictiveDraws) -> Result<DVector<f64>> {
    if draws.draws.is_empty() {
        return Err(Error::validation("rmse_by_zone needs at least one draw"));
    }
    let n = observed.n_times();
    let n_z = observed.n_zones();
    if draws.times.len() != n || draws.n_zones() != n_z {
        return Err(Error::validation(format!(
            "draw set is {}x{} but panel is {n}x{n_z}",
            draws.times.len(),
            draws.n_zones()
        )));
    }
    let n_draws = draws.n_draws() as f64;
    let mut out = DVector::zeros(n_z);
    for j in 0..n_z {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            if let Some(x) = observed.value(i, j) {
                let mse: f64 = draws
                    .draws
                    .iter()
                    .map(|d| (d[(i, j)] - x).powi(2))
                    .sum::<f64>()
                    / n_draws;
                total += mse.sqrt();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::validation(format!(
                "zone index {j} has no observed time points"
            )));
        }
        out[j] = total / count as f64;
    }
    Ok(out)
}
