//! Domain types for the single-zone and joint models: time grids, zone
//! geometry, panel data, harmonic structure, static parameters and priors.
//!
//! All types here are immutable after construction/validation and may be
//! shared freely across concurrently running chains.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometres, used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Ordered observation times plus the convention for the initial state time.
///
/// `gap_scales[i]` is the factor k applied to system-noise standard
/// deviations over the step ending at `times[i]`, with
/// `gap_scales[i]^2 = times[i] - times[i-1]` (and the first gap measured
/// from `origin_time`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    origin_time: f64,
    gap_scales: Vec<f64>,
}

impl TimeGrid {
    /// Build a grid from observation times, placing the initial-state time
    /// one median inter-observation gap before the first observation. For a
    /// regular monthly grid this makes every gap scale exactly 1.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        let origin = match times.len() {
            0 => 0.0,
            1 => times[0] - 1.0,
            _ => {
                let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
                gaps.sort_by(|a, b| a.total_cmp(b));
                let mid = gaps.len() / 2;
                let median = if gaps.len() % 2 == 0 {
                    0.5 * (gaps[mid - 1] + gaps[mid])
                } else {
                    gaps[mid]
                };
                times[0] - median
            }
        };
        Self::with_origin(origin, times)
    }

    /// Build a grid with an explicit initial-state time.
    pub fn with_origin(origin_time: f64, times: Vec<f64>) -> Result<Self> {
        if !origin_time.is_finite() {
            return Err(Error::validation("origin_time must be finite"));
        }
        let mut gap_scales = Vec::with_capacity(times.len());
        let mut prev = origin_time;
        for (i, &t) in times.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::validation(format!(
                    "time at index {i} is not finite"
                )));
            }
            let gap = t - prev;
            if gap <= 0.0 {
                return Err(Error::validation(format!(
                    "times must be strictly increasing and start after the \
                     origin time; offending index {i} (t = {t}, previous = {prev})"
                )));
            }
            gap_scales.push(gap.sqrt());
            prev = t;
        }
        Ok(TimeGrid {
            times,
            origin_time,
            gap_scales,
        })
    }

    /// Regular grid of `n` monthly observations starting at `start`.
    pub fn regular_monthly(start: f64, n: usize) -> Self {
        let times: Vec<f64> = (0..n).map(|i| start + i as f64).collect();
        Self::with_origin(start - 1.0, times).expect("regular grid is valid")
    }

    /// Number of observation times.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn origin_time(&self) -> f64 {
        self.origin_time
    }

    pub fn gap_scales(&self) -> &[f64] {
        &self.gap_scales
    }

    /// Grid of `horizons` future times continuing this grid at its median
    /// spacing, with the last fitted time as origin. Suitable for passing to
    /// forecasting routines.
    pub fn extension(&self, horizons: usize) -> Result<TimeGrid> {
        let last = match self.times.last() {
            Some(&t) => t,
            None => return Err(Error::validation("cannot extend an empty grid")),
        };
        let step = if self.times.len() >= 2 {
            let mut gaps: Vec<f64> = self.times.windows(2).map(|w| w[1] - w[0]).collect();
            gaps.sort_by(|a, b| a.total_cmp(b));
            gaps[gaps.len() / 2]
        } else {
            1.0
        };
        let times: Vec<f64> = (1..=horizons).map(|k| last + k as f64 * step).collect();
        TimeGrid::with_origin(last, times)
    }
}

/// Zone labels, optional coordinates and the inter-zone distance matrix (km).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneGeometry {
    zone_ids: Vec<String>,
    coordinates: Option<Vec<(f64, f64)>>,
    distances: DMatrix<f64>,
}

/// Great-circle distance in km between two (longitude, latitude) points in
/// degrees, on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn great_circle_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lon1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lon2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

impl ZoneGeometry {
    /// Build geometry from per-zone (longitude, latitude) in degrees.
    pub fn from_coordinates(zone_ids: Vec<String>, coordinates: Vec<(f64, f64)>) -> Result<Self> {
        if zone_ids.len() != coordinates.len() {
            return Err(Error::validation(format!(
                "{} zone ids but {} coordinate pairs",
                zone_ids.len(),
                coordinates.len()
            )));
        }
        for (id, &(lon, lat)) in zone_ids.iter().zip(&coordinates) {
            if !lon.is_finite() || !lat.is_finite() {
                return Err(Error::validation(format!(
                    "non-finite coordinates for zone {id}"
                )));
            }
        }
        let n = zone_ids.len();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let dist = great_circle_km(coordinates[i], coordinates[j]);
                d[(i, j)] = dist;
                d[(j, i)] = dist;
            }
        }
        Ok(ZoneGeometry {
            zone_ids,
            coordinates: Some(coordinates),
            distances: d,
        })
    }

    /// Build geometry from an explicit distance matrix in km.
    pub fn from_distances(zone_ids: Vec<String>, distances: DMatrix<f64>) -> Result<Self> {
        let n = zone_ids.len();
        let mut problems = Vec::new();
        if distances.nrows() != n || distances.ncols() != n {
            problems.push(format!(
                "distance matrix is {}x{} but there are {} zones",
                distances.nrows(),
                distances.ncols(),
                n
            ));
        } else {
            for i in 0..n {
                if distances[(i, i)] != 0.0 {
                    problems.push(format!(
                        "nonzero diagonal distance for zone {}",
                        zone_ids[i]
                    ));
                }
                for j in 0..n {
                    let dij = distances[(i, j)];
                    if !dij.is_finite() || dij < 0.0 {
                        problems.push(format!(
                            "invalid distance between {} and {}: {}",
                            zone_ids[i], zone_ids[j], dij
                        ));
                    } else if j > i && dij != distances[(j, i)] {
                        problems.push(format!(
                            "asymmetric distance matrix between {} and {}",
                            zone_ids[i], zone_ids[j]
                        ));
                    }
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(ZoneGeometry {
            zone_ids,
            coordinates: None,
            distances,
        })
    }

    pub fn n_zones(&self) -> usize {
        self.zone_ids.len()
    }

    pub fn zone_ids(&self) -> &[String] {
        &self.zone_ids
    }

    pub fn coordinates(&self) -> Option<&[(f64, f64)]> {
        self.coordinates.as_deref()
    }

    pub fn distances(&self) -> &DMatrix<f64> {
        &self.distances
    }
}

/// Observed rates per zone per time with a missingness mask.
///
/// Masked entries carry no information: whatever value is stored at an
/// unobserved cell is ignored by every operation in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    grid: TimeGrid,
    values: DMatrix<f64>,
    observed: DMatrix<bool>,
}

impl PanelData {
    pub fn new(grid: TimeGrid, values: DMatrix<f64>, observed: DMatrix<bool>) -> Result<Self> {
        let n = grid.len();
        if values.nrows() != n || observed.nrows() != n {
            return Err(Error::validation(format!(
                "panel has {} times but {} value rows and {} mask rows",
                n,
                values.nrows(),
                observed.nrows()
            )));
        }
        if values.ncols() != observed.ncols() {
            return Err(Error::validation(format!(
                "value matrix has {} columns but mask has {}",
                values.ncols(),
                observed.ncols()
            )));
        }
        for i in 0..values.nrows() {
            for j in 0..values.ncols() {
                if observed[(i, j)] && !values[(i, j)].is_finite() {
                    return Err(Error::validation(format!(
                        "non-finite observed value at time index {i}, zone index {j}"
                    )));
                }
            }
        }
        Ok(PanelData {
            grid,
            values,
            observed,
        })
    }

    /// Fully observed panel.
    pub fn fully_observed(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(grid, values, mask)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_times(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_zones(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn observed(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[(i, j)]
    }

    /// Observed value at (time, zone), `None` when masked.
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.observed[(i, j)].then(|| self.values[(i, j)])
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Single-zone view of column `j` as its own panel (shared grid).
    pub fn zone_panel(&self, j: usize) -> PanelData {
        PanelData {
            grid: self.grid.clone(),
            values: DMatrix::from_column_slice(self.n_times(), 1, self.values.column(j).as_slice()),
            observed: DMatrix::from_fn(self.n_times(), 1, |i, _| self.observed[(i, j)]),
        }
    }

    /// Copy of this panel with the last `holdout` time points removed.
    pub fn truncated(&self, holdout: usize) -> Result<PanelData> {
        if holdout >= self.n_times() {
            return Err(Error::validation(format!(
                "holdout {} must be smaller than the number of time points {}",
                holdout,
                self.n_times()
            )));
        }
        let keep = self.n_times() - holdout;
        let grid =
            TimeGrid::with_origin(self.grid.origin_time(), self.grid.times()[..keep].to_vec())?;
        Ok(PanelData {
            grid,
            values: self.values.rows(0, keep).into_owned(),
            observed: self.observed.rows(0, keep).into_owned(),
        })
    }
}

/// Seasonal period of the harmonic (months per full cycle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicConfig {
    pub period: f64,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        HarmonicConfig { period: 12.0 }
    }
}

impl HarmonicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) || !self.period.is_finite() {
            return Err(Error::validation(format!(
                "harmonic period must be a positive finite number, got {}",
                self.period
            )));
        }
        Ok(())
    }
}

/// Observation row (sin(2 pi t / P), cos(2 pi t / P), 1) at calendar time `t`.
pub fn observation_row(t: f64, config: &HarmonicConfig) -> [f64; 3] {
    let angle = 2.0 * std::f64::consts::PI * t / config.period;
    [angle.sin(), angle.cos(), 1.0]
}

/// One state of the single-zone model: harmonic coefficients plus level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleZoneState {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
}

/// Covariance-kernel shape over distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelForm {
    /// sigma^2 * exp(-phi * d)
    #[default]
    Exponential,
    /// sigma^2 * exp(-phi * d^2)
    SquaredExponential,
}

/// Marginal standard deviation and inverse length scale (per km) of one
/// spatial process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma: f64,
    pub phi: f64,
    #[serde(default)]
    pub form: KernelForm,
}

impl KernelParams {
    pub fn new(sigma: f64, phi: f64) -> Self {
        KernelParams {
            sigma,
            phi,
            form: KernelForm::Exponential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.collect_problems("kernel", &mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    fn collect_problems(&self, label: &str, problems: &mut Vec<String>) {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            problems.push(format!(
                "non-positive variance: {label} sigma = {}",
                self.sigma
            ));
        }
        if !(self.phi > 0.0) || !self.phi.is_finite() {
            problems.push(format!(
                "non-positive inverse length scale: {label} phi = {}",
                self.phi
            ));
        }
    }
}

/// All fixed parameters of the joint model: per-zone observation and system
/// variances, static harmonic coefficients, kernel hyperparameters for the
/// three spatial processes, and the initial level distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointStaticParams {
    pub obs_var: DVector<f64>,
    pub sys_var: DVector<f64>,
    pub theta1: DVector<f64>,
    pub theta2: DVector<f64>,
    pub eta1: KernelParams,
    pub eta2: KernelParams,
    pub eta3: KernelParams,
    pub init_mean: DVector<f64>,
    pub init_var: DMatrix<f64>,
}

impl JointStaticParams {
    pub fn n_zones(&self) -> usize {
        self.obs_var.len()
    }

    fn collect_problems(&self, problems: &mut Vec<String>) {
        let n = self.n_zones();
        for (name, v) in [
            ("sys_var", &self.sys_var),
            ("theta1", &self.theta1),
            ("theta2", &self.theta2),
            ("init_mean", &self.init_mean),
        ] {
            if v.len() != n {
                problems.push(format!(
                    "dimension mismatch: {name} has length {} but obs_var has {n}",
                    v.len()
                ));
            }
        }
        for (name, v) in [("obs_var", &self.obs_var), ("sys_var", &self.sys_var)] {
            for (j, &x) in v.iter().enumerate() {
                if !(x > 0.0) || !x.is_finite() {
                    problems.push(format!("non-positive variance: {name}[{j}] = {x}"));
                }
            }
        }
        for (name, v) in [("theta1", &self.theta1), ("theta2", &self.theta2)] {
            for (j, &x) in v.iter().enumerate() {
                if !x.is_finite() {
                    problems.push(format!("non-finite coefficient: {name}[{j}]"));
                }
            }
        }
        self.eta1.collect_problems("eta1", problems);
        self.eta2.collect_problems("eta2", problems);
        self.eta3.collect_problems("eta3", problems);
        if self.init_var.nrows() != n || self.init_var.ncols() != n {
            problems.push(format!(
                "init_var is {}x{} but there are {n} zones",
                self.init_var.nrows(),
                self.init_var.ncols()
            ));
        } else {
            let sym = self
                .init_var
                .iter()
                .zip(self.init_var.transpose().iter())
                .all(|(a, b)| a == b);
            if !sym {
                problems.push("init_var is not symmetric".to_string());
            } else if self.init_var.clone().cholesky().is_none() {
                problems.push("init_var is not positive definite".to_string());
            }
        }
    }
}

/// Prior hyperparameters for the joint model. Defaults follow the reference
/// analysis: Ga(0.1, 0.1) precisions, log-normal kernel hyperparameters
/// centred on 0.1, constant GP means of 1.5 and N(6, 20) initial levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub precision_shape: f64,
    pub precision_rate: f64,
    pub log_sigma_mean: f64,
    pub log_sigma_sd: f64,
    pub log_phi_mean: f64,
    pub log_phi_sd: f64,
    pub gp_mean1: f64,
    pub gp_mean2: f64,
    pub level_init_mean: f64,
    pub level_init_var: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            precision_shape: 0.1,
            precision_rate: 0.1,
            log_sigma_mean: 0.1f64.ln(),
            log_sigma_sd: 0.1f64.sqrt(),
            log_phi_mean: 0.1f64.ln(),
            log_phi_sd: 0.1f64.sqrt(),
            gp_mean1: 1.5,
            gp_mean2: 1.5,
            level_init_mean: 6.0,
            level_init_var: 20.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, x) in [
            ("precision_shape", self.precision_shape),
            ("precision_rate", self.precision_rate),
            ("log_sigma_sd", self.log_sigma_sd),
            ("log_phi_sd", self.log_phi_sd),
            ("level_init_var", self.level_init_var),
        ] {
            if !(x > 0.0) || !x.is_finite() {
                problems.push(format!(
                    "prior hyperparameter {name} must be positive, got {x}"
                ));
            }
        }
        for (name, x) in [
            ("log_sigma_mean", self.log_sigma_mean),
            ("log_phi_mean", self.log_phi_mean),
            ("gp_mean1", self.gp_mean1),
            ("gp_mean2", self.gp_mean2),
            ("level_init_mean", self.level_init_mean),
        ] {
            if !x.is_finite() {
                problems.push(format!("prior hyperparameter {name} must be finite"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// A validated joint model: parameters, geometry and panel known to be
/// mutually consistent and individually well formed.
#[derive(Debug, Clone)]
pub struct JointModel {
    params: JointStaticParams,
    geometry: ZoneGeometry,
    panel: PanelData,
}

impl JointModel {
    pub fn params(&self) -> &JointStaticParams {
        &self.params
    }

    pub fn geometry(&self) -> &ZoneGeometry {
        &self.geometry
    }

    pub fn panel(&self) -> &PanelData {
        &self.panel
    }
}

/// Validate parameters, geometry and panel against each other, reporting
/// every violation found rather than stopping at the first.
pub fn validate_joint_spec(
    params: JointStaticParams,
    geometry: ZoneGeometry,
    panel: PanelData,
) -> Result<JointModel> {
    let mut problems = Vec::new();
    let n_z = geometry.n_zones();
    if params.n_zones() != n_z {
        problems.push(format!(
            "dimension mismatch: parameters cover {} zones but geometry has {n_z}",
            params.n_zones()
        ));
    }
    if panel.n_zones() != n_z {
        problems.push(format!(
            "dimension mismatch: panel has {} zone columns but geometry has {n_z}",
            panel.n_zones()
        ));
    }
    params.collect_problems(&mut problems);
    if problems.is_empty() {
        Ok(JointModel {
            params,
            geometry,
            panel,
        })
    } else {
        Err(Error::Validation(problems))
    }
}
