//! Generative samplers for the single-zone and joint models. Used both as
//! a user-facing synthetic-data generator and as the ground-truth oracle in
//! parameter-recovery and calibration tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::kernel_matrix;
use crate::model::{
    observation_row, HarmonicConfig, JointStaticParams, PanelData, SingleZoneState, TimeGrid,
    ZoneGeometry,
};
use crate::smoother::LatentPath;

/// Missingness applied to simulated observations: either an independent
/// per-entry probability (missing completely at random) or an explicit mask
/// where `true` marks observed entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Missingness {
    Probability(f64),
    Mask(DMatrix<bool>),
}

impl Missingness {
    fn validate(&self, n: usize, n_z: usize) -> Result<()> {
        match self {
            Missingness::Probability(p) => {
                if !(*p >= 0.0 && *p < 1.0) {
                    return Err(Error::validation(format!(
                        "missingness probability must lie in [0, 1), got {p}"
                    )));
                }
            }
            Missingness::Mask(m) => {
                if m.nrows() != n || m.ncols() != n_z {
                    return Err(Error::validation(format!(
                        "missingness mask is {}x{} but panel is {}x{}",
                        m.nrows(),
                        m.ncols(),
                        n,
                        n_z
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, n: usize, n_z: usize, rng: &mut R) -> DMatrix<bool> {
        match self {
            Missingness::Probability(p) => {
                DMatrix::from_fn(n, n_z, |_, _| rng.random::<f64>() >= *p)
            }
            Missingness::Mask(m) => m.clone(),
        }
    }
}

/// Everything needed to generate one synthetic joint panel.
#[derive(Debug, Clone)]
pub struct SimulationRecipe {
    pub params: JointStaticParams,
    pub geometry: ZoneGeometry,
    pub grid: TimeGrid,
    pub harmonic: HarmonicConfig,
    pub missingness: Missingness,
    pub seed: u64,
}

/// Draw one panel from the joint model: levels start at N(m0, C0), evolve
/// with increments N(0, k^2 (diag{W} + K3)), and observations add the static
/// harmonic plus N(0, V^j) noise. Returns the panel together with the true
/// latent level path (including the t_0 state).
pub fn simulate_joint(recipe: &SimulationRecipe) -> Result<(PanelData, LatentPath)> {
    let n_z = recipe.geometry.n_zones();
    if recipe.params.n_zones() != n_z {
        return Err(Error::validation(format!(
            "recipe parameters cover {} zones but geometry has {n_z}",
            recipe.params.n_zones()
        )));
    }
    recipe.harmonic.validate()?;
    let n = recipe.grid.len();
    recipe.missingness.validate(n, n_z)?;

    let k3 = kernel_matrix(&recipe.geometry, &recipe.params.eta3)?;
    let mut sys = k3.entries().clone();
    for j in 0..n_z {
        sys[(j, j)] += recipe.params.sys_var[j];
    }
    let sys_chol = sys
        .cholesky()
        .ok_or_else(|| Error::numerical("system covariance not positive definite"))?;
    let init_chol = recipe
        .params
        .init_var
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("initial covariance not positive definite"))?;

    let mut rng = ChaCha20Rng::seed_from_u64(recipe.seed);
    let mut states = DMatrix::zeros(n + 1, n_z);
    let z0 = DVector::from_fn(n_z, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut level = &recipe.params.init_mean + init_chol.l() * z0;
    states.row_mut(0).copy_from(&level.transpose());

    let mut values = DMatrix::zeros(n, n_z);
    for i in 0..n {
        let k = recipe.grid.gap_scales()[i];
        let z = DVector::from_fn(n_z, |_, _| rng.sample::<f64, _>(StandardNormal));
        level += sys_chol.l() * z * k;
        states.row_mut(i + 1).copy_from(&level.transpose());
        let [s, c, _] = observation_row(recipe.grid.times()[i], &recipe.harmonic);
        for j in 0..n_z {
            let noise: f64 = rng.sample(StandardNormal);
            values[(i, j)] = recipe.params.theta1[j] * s
                + recipe.params.theta2[j] * c
                + level[j]
                + recipe.params.obs_var[j].sqrt() * noise;
        }
    }
    let observed = recipe.missingness.draw(n, n_z, &mut rng);
    let panel = PanelData::new(recipe.grid.clone(), values, observed)?;
    Ok((panel, LatentPath { states }))
}

/// Recipe for the single-zone model with time-varying harmonic coefficients.
#[derive(Debug, Clone)]
pub struct SingleZoneRecipe {
    pub obs_var: f64,
    pub sys_var: [f64; 3],
    pub init_mean: [f64; 3],
    pub init_var: [f64; 3],
    pub grid: TimeGrid,
    pub harmonic: HarmonicConfig,
    pub missingness: Missingness,
    pub seed: u64,
}

/// Draw one single-zone panel: all three state components follow random
/// walks with variances (W1, W2, W3) scaled by the squared gap factors.
pub fn simulate_single(recipe: &SingleZoneRecipe) -> Result<(PanelData, Vec<SingleZoneState>)> {
    if !(recipe.obs_var > 0.0) {
        return Err(Error::validation("obs_var must be positive"));
    }
    if recipe.sys_var.iter().any(|&w| w < 0.0) || recipe.init_var.iter().any(|&v| v < 0.0) {
        return Err(Error::validation("variances must be non-negative"));
    }
    recipe.harmonic.validate()?;
    let n = recipe.grid.len();
    recipe.missingness.validate(n, 1)?;

    let mut rng = ChaCha20Rng::seed_from_u64(recipe.seed);
    let mut state = [0.0f64; 3];
    for d in 0..3 {
        let z: f64 = rng.sample(StandardNormal);
        state[d] = recipe.init_mean[d] + recipe.init_var[d].sqrt() * z;
    }
    let mut truth = Vec::with_capacity(n + 1);
    truth.push(SingleZoneState {
        theta1: state[0],
        theta2: state[1],
        theta3: state[2],
    });

    let mut values = DMatrix::zeros(n, 1);
    for i in 0..n {
        let k = recipe.grid.gap_scales()[i];
        for d in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            state[d] += k * recipe.sys_var[d].sqrt() * z;
        }
        truth.push(SingleZoneState {
            theta1: state[0],
            theta2: state[1],
            theta3: state[2],
        });
        let row = observation_row(recipe.grid.times()[i], &recipe.harmonic);
        let noise: f64 = rng.sample(StandardNormal);
        values[(i, 0)] = row[0] * state[0]
            + row[1] * state[1]
            + row[2] * state[2]
            + recipe.obs_var.sqrt() * noise;
    }
    let observed = recipe.missingness.draw(n, 1, &mut rng);
    let panel = PanelData::new(recipe.grid.clone(), values, observed)?;
    Ok((panel, truth))
}
