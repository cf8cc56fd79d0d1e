//! Forward Kalman filtering for the single-zone model (3-dimensional state,
//! time-varying harmonic observation row) and the joint detrended model
//! (n_z-dimensional level state, identity observation matrix), with exact
//! marginal log-likelihood evaluation and missing-data projection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::CovMatrix;
use crate::model::{observation_row, HarmonicConfig, JointStaticParams, PanelData};

const LN_2PI: f64 = 1.8378770664093453;

/// Per-step filtering output: prior covariances R_t, posterior moments
/// (m_t, C_t) and log-likelihood contributions, plus the initial moments.
///
/// The system covariance used on the step into time t_i is recoverable as
/// `prior_covs[i] - covs[i-1]` (with `init_cov` before the first step),
/// which is what the backward sampler consumes.
#[derive(Debug, Clone)]
pub struct FilterTrajectory {
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub prior_covs: Vec<DMatrix<f64>>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub step_log_lik: Vec<f64>,
}

impl FilterTrajectory {
    /// Total marginal log-likelihood: the sum of per-step contributions.
    pub fn log_likelihood(&self) -> f64 {
        self.step_log_lik.iter().sum()
    }

    /// Number of filtered time steps.
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    /// System-noise covariance used on the step into time index `i`.
    pub fn system_cov(&self, i: usize) -> DMatrix<f64> {
        let prev = if i == 0 {
            &self.init_cov
        } else {
            &self.covs[i - 1]
        };
        &self.prior_covs[i] - prev
    }

    /// Filtered moments at the final time, or the initial moments when the
    /// panel was empty.
    pub fn last_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        match self.means.last() {
            Some(m) => (m.clone(), self.covs.last().unwrap().clone()),
            None => (self.init_mean.clone(), self.init_cov.clone()),
        }
    }
}

/// Zero-one selection matrix mapping the full zone vector to the observed
/// subvector at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    rows: DMatrix<f64>,
    observed: Vec<usize>,
}

impl IncidenceMatrix {
    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// Indices of the observed components, in ascending order.
    pub fn observed_indices(&self) -> &[usize] {
        &self.observed
    }

    pub fn n_observed(&self) -> usize {
        self.observed.len()
    }
}

/// Build the incidence matrix selecting the observed components of a mask
/// row in ascending zone order. Fully observed gives the identity; fully
/// missing gives a matrix with zero rows.
pub fn incidence(mask_row: &[bool]) -> IncidenceMatrix {
    let observed: Vec<usize> = mask_row
        .iter()
        .enumerate()
        .filter_map(|(j, &o)| o.then_some(j))
        .collect();
    let mut rows = DMatrix::zeros(observed.len(), mask_row.len());
    for (r, &j) in observed.iter().enumerate() {
        rows[(r, j)] = 1.0;
    }
    IncidenceMatrix { rows, observed }
}

/// Subtract the static harmonic from every observed entry, leaving the mask
/// unchanged: x~ = x - theta1 sin(2 pi t / P) - theta2 cos(2 pi t / P).
pub fn detrend(
    panel: &PanelData,
    theta1: &DVector<f64>,
    theta2: &DVector<f64>,
    config: &HarmonicConfig,
) -> PanelData {
    assert_eq!(
        theta1.len(),
        panel.n_zones(),
        "theta1 length must match panel zones"
    );
    assert_eq!(
        theta2.len(),
        panel.n_zones(),
        "theta2 length must match panel zones"
    );
    let mut values = panel.values().clone();
    for (i, &t) in panel.grid().times().iter().enumerate() {
        let [s, c, _] = observation_row(t, config);
        for j in 0..panel.n_zones() {
            if panel.is_observed(i, j) {
                values[(i, j)] -= theta1[j] * s + theta2[j] * c;
            }
        }
    }
    PanelData::new(panel.grid().clone(), values, panel.observed().clone())
        .expect("detrending preserves panel validity")
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Update step for the joint filter with the identity observation matrix
/// restricted to `observed` components. Algebraically identical to the
/// incidence-matrix formulation (predictive covariance P(R+V)P', gain
/// R P' (P(R+V)P')^{-1}) with the selection applied by index gathering.
fn update_step_selected(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    observed: &[usize],
    obs: &DVector<f64>,
    obs_var_diag: &DVector<f64>,
    step_index: usize,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let k = observed.len();
    let n = prior_mean.len();
    let mut pred_cov = DMatrix::zeros(k, k);
    for (a, &ja) in observed.iter().enumerate() {
        for (b, &jb) in observed.iter().enumerate() {
            pred_cov[(a, b)] = prior_cov[(ja, jb)];
        }
        pred_cov[(a, a)] += obs_var_diag[a];
    }
    let chol = pred_cov.cholesky().ok_or_else(|| {
        Error::numerical(format!(
            "singular one-step predictive covariance at step {step_index}"
        ))
    })?;
    let factor = chol.l_dirty();
    let innovation = DVector::from_fn(k, |a, _| obs[a] - prior_mean[observed[a]]);
    let mut solved = innovation.clone();
    if !factor.solve_lower_triangular_mut(&mut solved) {
        return Err(Error::numerical(format!(
            "singular one-step predictive covariance at step {step_index}"
        )));
    }
    let logdet: f64 = (0..k).map(|a| factor[(a, a)].ln()).sum::<f64>() * 2.0;
    let log_lik = -0.5 * (k as f64 * LN_2PI + logdet + solved.norm_squared());
    if !log_lik.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite likelihood contribution at step {step_index}"
        )));
    }
    // R[:, S]' and the gain A = R[:, S] Q^{-1} computed as (Q^{-1} R[S, :])'.
    let r_cols_t = DMatrix::from_fn(k, n, |b, i| prior_cov[(i, observed[b])]);
    let mut qinv_rt = r_cols_t.clone();
    chol.solve_mut(&mut qinv_rt);
    let gain = qinv_rt.transpose();
    let mean = prior_mean + &gain * innovation;
    let mut cov = prior_cov - gain * r_cols_t;
    symmetrize(&mut cov);
    Ok((mean, cov, log_lik))
}

/// One partially observed update step with an explicit observation matrix
/// (the single-zone filter's time-varying harmonic row).
fn update_step(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    obs_rows: &DMatrix<f64>,
    obs: &DVector<f64>,
    obs_var_diag: &DVector<f64>,
    step_index: usize,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let n_obs = obs.len();
    // Predictive moments: F m, F R F' + V.
    let pred_mean = obs_rows * prior_mean;
    let rf_t = prior_cov * obs_rows.transpose();
    let mut pred_cov = obs_rows * &rf_t;
    for k in 0..n_obs {
        pred_cov[(k, k)] += obs_var_diag[k];
    }
    symmetrize(&mut pred_cov);
    let chol = pred_cov.clone().cholesky().ok_or_else(|| {
        Error::numerical(format!(
            "singular one-step predictive covariance at step {step_index}"
        ))
    })?;
    let innovation = obs - pred_mean;
    let solved = chol
        .l()
        .solve_lower_triangular(&innovation)
        .expect("triangular solve");
    let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let log_lik = -0.5 * (n_obs as f64 * LN_2PI + logdet + solved.norm_squared());
    if !log_lik.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite likelihood contribution at step {step_index}"
        )));
    }
    // Gain A = R F' Q^{-1}; posterior C = R - A Q A' = R - A (F R).
    let gain = chol.solve(&rf_t.transpose()).transpose();
    let mean = prior_mean + &gain * innovation;
    let mut cov = prior_cov - &gain * rf_t.transpose();
    symmetrize(&mut cov);
    Ok((mean, cov, log_lik))
}

/// Forward filter for the joint detrended model.
///
/// The state is the n_z-vector of levels; the observation matrix is the
/// identity restricted to observed zones; the system covariance on the step
/// into t_i is k_i^2 (diag{W} + K3). Steps with no observed zones perform a
/// pure time update and contribute zero log-likelihood.
pub fn forward_filter_joint(
    detrended: &PanelData,
    params: &JointStaticParams,
    k3: &CovMatrix,
) -> Result<FilterTrajectory> {
    let n_z = detrended.n_zones();
    if params.n_zones() != n_z || k3.dim() != n_z {
        return Err(Error::validation(format!(
            "filter dimension mismatch: panel {} zones, params {}, kernel {}",
            n_z,
            params.n_zones(),
            k3.dim()
        )));
    }
    let n = detrended.n_times();
    let mut base_sys = k3.entries().clone();
    for j in 0..n_z {
        base_sys[(j, j)] += params.sys_var[j];
    }

    let mut traj = FilterTrajectory {
        init_mean: params.init_mean.clone(),
        init_cov: params.init_var.clone(),
        prior_covs: Vec::with_capacity(n),
        means: Vec::with_capacity(n),
        covs: Vec::with_capacity(n),
        step_log_lik: Vec::with_capacity(n),
    };
    let mut mean = params.init_mean.clone();
    let mut cov = params.init_var.clone();

    for i in 0..n {
        let k2 = detrended.grid().gap_scales()[i].powi(2);
        let mut prior_cov = &cov + &base_sys * k2;
        symmetrize(&mut prior_cov);
        let observed: Vec<usize> = (0..n_z).filter(|&j| detrended.is_observed(i, j)).collect();
        if observed.is_empty() {
            traj.prior_covs.push(prior_cov.clone());
            traj.means.push(mean.clone());
            traj.covs.push(prior_cov.clone());
            traj.step_log_lik.push(0.0);
            cov = prior_cov;
            continue;
        }
        let obs = DVector::from_iterator(
            observed.len(),
            observed.iter().map(|&j| detrended.values()[(i, j)]),
        );
        let obs_var =
            DVector::from_iterator(observed.len(), observed.iter().map(|&j| params.obs_var[j]));
        let (new_mean, new_cov, log_lik) =
            update_step_selected(&mean, &prior_cov, &observed, &obs, &obs_var, i)?;
        traj.prior_covs.push(prior_cov);
        traj.means.push(new_mean.clone());
        traj.covs.push(new_cov.clone());
        traj.step_log_lik.push(log_lik);
        mean = new_mean;
        cov = new_cov;
    }
    Ok(traj)
}

/// Forward filter for the single-zone model with time-varying harmonic
/// coefficients: state (theta1, theta2, theta3), observation row
/// (sin, cos, 1) at each time, system covariance k_i^2 diag{W}.
pub fn forward_filter_single(
    panel: &PanelData,
    obs_var: f64,
    sys_var: &[f64; 3],
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
    config: &HarmonicConfig,
) -> Result<FilterTrajectory> {
    if panel.n_zones() != 1 {
        return Err(Error::validation(format!(
            "single-zone filter requires a one-column panel, got {} columns",
            panel.n_zones()
        )));
    }
    if init_mean.len() != 3 || init_cov.nrows() != 3 || init_cov.ncols() != 3 {
        return Err(Error::validation(
            "single-zone filter requires 3-dimensional initial moments",
        ));
    }
    if !(obs_var > 0.0) || sys_var.iter().any(|&w| w < 0.0) {
        return Err(Error::validation(
            "single-zone filter requires obs_var > 0 and sys_var >= 0",
        ));
    }
    let n = panel.n_times();
    let mut traj = FilterTrajectory {
        init_mean: init_mean.clone(),
        init_cov: init_cov.clone(),
        prior_covs: Vec::with_capacity(n),
        means: Vec::with_capacity(n),
        covs: Vec::with_capacity(n),
        step_log_lik: Vec::with_capacity(n),
    };
    let mut mean = init_mean.clone();
    let mut cov = init_cov.clone();
    let obs_var_vec = DVector::from_element(1, obs_var);

    for i in 0..n {
        let k2 = panel.grid().gap_scales()[i].powi(2);
        let mut prior_cov = cov.clone();
        for d in 0..3 {
            prior_cov[(d, d)] += k2 * sys_var[d];
        }
        if !panel.is_observed(i, 0) {
            traj.prior_covs.push(prior_cov.clone());
            traj.means.push(mean.clone());
            traj.covs.push(prior_cov.clone());
            traj.step_log_lik.push(0.0);
            cov = prior_cov;
            continue;
        }
        let row = observation_row(panel.grid().times()[i], config);
        let obs_rows = DMatrix::from_row_slice(1, 3, &row);
        let obs = DVector::from_element(1, panel.values()[(i, 0)]);
        let (new_mean, new_cov, log_lik) =
            update_step(&mean, &prior_cov, &obs_rows, &obs, &obs_var_vec, i)?;
        traj.prior_covs.push(prior_cov);
        traj.means.push(new_mean.clone());
        traj.covs.push(new_cov.clone());
        traj.step_log_lik.push(log_lik);
        mean = new_mean;
        cov = new_cov;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::kernel_matrix;
    use crate::model::{KernelParams, TimeGrid, ZoneGeometry};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn geometry(n_z: usize, spacing_km: f64) -> ZoneGeometry {
        let ids = (0..n_z).map(|j| format!("z{j}")).collect();
        let d = DMatrix::from_fn(n_z, n_z, |i, j| (i as f64 - j as f64).abs() * spacing_km);
        ZoneGeometry::from_distances(ids, d).unwrap()
    }

    fn joint_params(n_z: usize, obs_var: f64, sys_var: f64) -> JointStaticParams {
        JointStaticParams {
            obs_var: DVector::from_element(n_z, obs_var),
            sys_var: DVector::from_element(n_z, sys_var),
            theta1: DVector::zeros(n_z),
            theta2: DVector::zeros(n_z),
            eta1: KernelParams::new(1.0, 1.0),
            eta2: KernelParams::new(1.0, 1.0),
            eta3: KernelParams::new(0.5, 1.0),
            init_mean: DVector::zeros(n_z),
            init_var: DMatrix::identity(n_z, n_z),
        }
    }

    /// Stacked-covariance oracle: the detrended observations, restricted to
    /// observed entries, are jointly Gaussian with
    /// Cov(x_i, x_j) = C0 + sum_{l <= min(i,j)} Wtilde_l + delta_ij diag V.
    pub(crate) fn dense_log_likelihood_oracle(
        panel: &PanelData,
        params: &JointStaticParams,
        k3: &CovMatrix,
    ) -> f64 {
        let n = panel.n_times();
        let n_z = panel.n_zones();
        let mut base_sys = k3.entries().clone();
        for j in 0..n_z {
            base_sys[(j, j)] += params.sys_var[j];
        }
        // State covariance prefix sums: S_i = C0 + sum_{l<=i} Wtilde_l.
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(params.init_var.clone());
        for i in 0..n {
            let k2 = panel.grid().gap_scales()[i].powi(2);
            prefix.push(&prefix[i] + &base_sys * k2);
        }
        let mut idx = Vec::new();
        for i in 0..n {
            for j in 0..n_z {
                if panel.is_observed(i, j) {
                    idx.push((i, j));
                }
            }
        }
        let m = idx.len();
        if m == 0 {
            return 0.0;
        }
        let mut mean = DVector::zeros(m);
        let mut cov = DMatrix::zeros(m, m);
        for (a, &(ia, ja)) in idx.iter().enumerate() {
            mean[a] = params.init_mean[ja];
            for (b, &(ib, jb)) in idx.iter().enumerate() {
                let s = &prefix[1 + ia.min(ib)];
                let mut v = s[(ja, jb)];
                if ia == ib && ja == jb {
                    v += params.obs_var[ja];
                }
                cov[(a, b)] = v;
            }
        }
        let obs = DVector::from_iterator(m, idx.iter().map(|&(i, j)| panel.values()[(i, j)]));
        let chol = cov.cholesky().expect("oracle covariance is PD");
        let diff = &obs - &mean;
        let solved = chol.l().solve_lower_triangular(&diff).unwrap();
        let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * (m as f64 * LN_2PI + logdet + solved.norm_squared())
    }

    pub(crate) fn random_panel(
        rng: &mut StdRng,
        n: usize,
        n_z: usize,
        missing_prob: f64,
    ) -> PanelData {
        let grid = TimeGrid::regular_monthly(1.0, n);
        let values = DMatrix::from_fn(n, n_z, |_, _| rng.random_range(-2.0..8.0));
        let observed = DMatrix::from_fn(n, n_z, |_, _| rng.random::<f64>() >= missing_prob);
        PanelData::new(grid, values, observed).unwrap()
    }

    #[test]
    fn detrend_with_zero_coefficients_is_identity() {
        let mut rng = StdRng::seed_from_u64(1);
        let panel = random_panel(&mut rng, 6, 3, 0.2);
        let out = detrend(
            &panel,
            &DVector::zeros(3),
            &DVector::zeros(3),
            &HarmonicConfig::default(),
        );
        assert_eq!(out.values(), panel.values());
        assert_eq!(out.observed(), panel.observed());
    }

    #[test]
    fn detrend_constant_panel_at_full_periods() {
        let grid = TimeGrid::with_origin(-12.0, vec![0.0, 12.0, 24.0]).unwrap();
        let c = 4.2;
        let panel = PanelData::fully_observed(grid, DMatrix::from_element(3, 1, c)).unwrap();
        let out = detrend(
            &panel,
            &DVector::zeros(1),
            &DVector::from_element(1, c),
            &HarmonicConfig::default(),
        );
        for i in 0..3 {
            assert!(out.values()[(i, 0)].abs() < 1e-12);
        }
    }

    #[test]
    fn detrend_round_trips() {
        let mut rng = StdRng::seed_from_u64(2);
        let panel = random_panel(&mut rng, 9, 3, 0.15);
        let theta1 = DVector::from_fn(3, |j, _| 0.3 + 0.1 * j as f64);
        let theta2 = DVector::from_fn(3, |j, _| -0.5 + 0.2 * j as f64);
        let config = HarmonicConfig::default();
        let detrended = detrend(&panel, &theta1, &theta2, &config);
        let neg1 = -&theta1;
        let neg2 = -&theta2;
        let back = detrend(&detrended, &neg1, &neg2, &config);
        for i in 0..9 {
            for j in 0..3 {
                if panel.is_observed(i, j) {
                    assert!((back.values()[(i, j)] - panel.values()[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn incidence_matches_worked_example() {
        // 5 zones with zones 2 and 3 missing.
        let inc = incidence(&[true, false, false, true, true]);
        let expected = DMatrix::from_row_slice(
            3,
            5,
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(inc.rows(), &expected);
        assert_eq!(inc.observed_indices(), &[0, 3, 4]);
    }

    #[test]
    fn incidence_fully_observed_and_fully_missing() {
        let full = incidence(&[true, true, true]);
        assert_eq!(full.rows(), &DMatrix::identity(3, 3));
        let none = incidence(&[false, false]);
        assert_eq!(none.n_observed(), 0);
        assert_eq!(none.rows().nrows(), 0);
    }

    #[test]
    fn one_step_scalar_example() {
        // n = 1, n_z = 1, m0 = 0, C0 = 1, Wtilde = 1, V = 1, x = 0:
        // log-lik = log N(0; 0, 3), m1 = 0, C1 = 2 - 4/3 = 2/3.
        let grid = TimeGrid::with_origin(0.0, vec![1.0]).unwrap();
        let panel = PanelData::fully_observed(grid, DMatrix::from_element(1, 1, 0.0)).unwrap();
        let geom = geometry(1, 1.0);
        // diag W + K3 = 0.5 + 0.5 = 1.
        let mut params = joint_params(1, 1.0, 0.5);
        params.eta3 = KernelParams::new(0.5f64.sqrt(), 1.0);
        let k3 = kernel_matrix(&geom, &params.eta3).unwrap();
        let traj = forward_filter_joint(&panel, &params, &k3).unwrap();
        let expected_ll = -0.5 * (LN_2PI + 3.0f64.ln());
        assert!((traj.log_likelihood() - expected_ll).abs() < 1e-9);
        assert!(traj.means[0][0].abs() < 1e-12);
        assert!((traj.covs[0][(0, 0)] - 2.0 / 3.0).abs() < 1e-9);
        assert!((traj.prior_covs[0][(0, 0)] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn fully_missing_step_is_pure_time_update() {
        let grid = TimeGrid::regular_monthly(1.0, 3);
        let values = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 0.0, 1.5, 2.5]);
        let observed = DMatrix::from_row_slice(
            3,
            2,
            &[
                true, true, //
                false, false, //
                true, true,
            ],
        );
        let panel = PanelData::new(grid, values, observed).unwrap();
        let geom = geometry(2, 1.0);
        let params = joint_params(2, 0.5, 0.3);
        let k3 = kernel_matrix(&geom, &params.eta3).unwrap();
        let traj = forward_filter_joint(&panel, &params, &k3).unwrap();
        assert_eq!(traj.step_log_lik[1], 0.0);
        assert_eq!(traj.means[1], traj.means[0]);
        assert_eq!(traj.covs[1], traj.prior_covs[1]);
    }

    #[test]
    fn joint_filter_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for trial in 0..20 {
            let n = rng.random_range(1..=4);
            let n_z = rng.random_range(1..=2);
            let panel = random_panel(&mut rng, n, n_z, 0.25);
            let geom = geometry(n_z, rng.random_range(0.5..2.0));
            let mut params =
                joint_params(n_z, rng.random_range(0.1..1.5), rng.random_range(0.05..0.8));
            params.eta3 = KernelParams::new(rng.random_range(0.2..1.5), rng.random_range(0.3..2.0));
            let k3 = kernel_matrix(&geom, &params.eta3).unwrap();
            let got = forward_filter_joint(&panel, &params, &k3)
                .unwrap()
                .log_likelihood();
            let want = dense_log_likelihood_oracle(&panel, &params, &k3);
            let rel = (got - want).abs() / want.abs().max(1.0);
            assert!(rel < 1e-10, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn single_filter_matches_dense_oracle_via_equivalence() {
        // Stacked-covariance oracle over the 3-dim state, projected through
        // the harmonic observation rows.
        let mut rng = StdRng::seed_from_u64(11);
        let n = 3;
        let grid = TimeGrid::regular_monthly(1.0, n);
        let values = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let panel = PanelData::fully_observed(grid.clone(), values).unwrap();
        let config = HarmonicConfig::default();
        let v = 0.4;
        let w = [0.2, 0.1, 0.3];
        let m0 = DVector::from_row_slice(&[0.1, -0.2, 0.5]);
        let c0 = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.8, 1.2]));
        let traj = forward_filter_single(&panel, v, &w, &m0, &c0, &config).unwrap();

        // Oracle: stacked observation covariance F_i S_{min(i,j)} F_j' + V.
        let w_diag = DMatrix::from_diagonal(&DVector::from_row_slice(&w));
        let mut prefix = vec![c0.clone()];
        for i in 0..n {
            let k2 = grid.gap_scales()[i].powi(2);
            prefix.push(&prefix[i] + &w_diag * k2);
        }
        let rows: Vec<DMatrix<f64>> = grid
            .times()
            .iter()
            .map(|&t| DMatrix::from_row_slice(1, 3, &observation_row(t, &config)))
            .collect();
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        for i in 0..n {
            mean[i] = (&rows[i] * &m0)[(0, 0)];
            for j in 0..n {
                let s = &prefix[1 + i.min(j)];
                cov[(i, j)] =
                    (&rows[i] * s * rows[j].transpose())[(0, 0)] + if i == j { v } else { 0.0 };
            }
        }
        let obs = DVector::from_iterator(n, (0..n).map(|i| panel.values()[(i, 0)]));
        let chol = cov.cholesky().unwrap();
        let diff = &obs - &mean;
        let solved = chol.l().solve_lower_triangular(&diff).unwrap();
        let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let want = -0.5 * (n as f64 * LN_2PI + logdet + solved.norm_squared());
        assert!((traj.log_likelihood() - want).abs() < 1e-10);
    }

    #[test]
    fn noiseless_single_filter_reproduces_data() {
        // W = 0 with consistent data: the filter mean reproduces the data
        // exactly through the observation row (V tiny for realizability).
        let grid = TimeGrid::regular_monthly(1.0, 8);
        let config = HarmonicConfig::default();
        let truth = [0.7, -0.3, 5.0];
        let values = DMatrix::from_fn(8, 1, |i, _| {
            let r = observation_row(grid.times()[i], &config);
            r[0] * truth[0] + r[1] * truth[1] + r[2] * truth[2]
        });
        let panel = PanelData::fully_observed(grid.clone(), values.clone()).unwrap();
        let m0 = DVector::from_row_slice(&[1.5, 1.5, 6.0]);
        let c0 = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.5, 1.5, 20.0]));
        let traj =
            forward_filter_single(&panel, 1e-12, &[0.0, 0.0, 0.0], &m0, &c0, &config).unwrap();
        for i in 2..8 {
            let r = observation_row(grid.times()[i], &config);
            let fitted: f64 = (0..3).map(|d| r[d] * traj.means[i][d]).sum();
            assert!(
                (fitted - values[(i, 0)]).abs() < 1e-5,
                "step {i}: {fitted} vs {}",
                values[(i, 0)]
            );
        }
    }

    #[test]
    fn paper_initialization_is_accepted() {
        let grid = TimeGrid::regular_monthly(1.0, 4);
        let panel = PanelData::fully_observed(grid, DMatrix::from_element(4, 1, 5.0)).unwrap();
        let m0 = DVector::from_row_slice(&[1.5, 1.5, 6.0]);
        let c0 = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.5, 1.5, 20.0]));
        let traj = forward_filter_single(
            &panel,
            0.1,
            &[0.01, 0.01, 0.01],
            &m0,
            &c0,
            &HarmonicConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.init_mean, m0);
        assert_eq!(traj.init_cov, c0);
        assert!(traj.log_likelihood().is_finite());
    }

    #[test]
    fn masked_filter_equals_hand_reduced_model() {
        // Filtering with a mask equals filtering an explicitly reduced
        // model built by multiplying through the incidence matrix by hand.
        let mut rng = StdRng::seed_from_u64(21);
        let n = 5;
        let n_z = 3;
        let panel = random_panel(&mut rng, n, n_z, 0.35);
        let geom = geometry(n_z, 1.0);
        let params = joint_params(n_z, 0.6, 0.2);
        let k3 = kernel_matrix(&geom, &params.eta3).unwrap();
        let traj = forward_filter_joint(&panel, &params, &k3).unwrap();

        // Hand recursion with explicit P products.
        let mut base_sys = k3.entries().clone();
        for j in 0..n_z {
            base_sys[(j, j)] += params.sys_var[j];
        }
        let v_diag = DMatrix::from_diagonal(&params.obs_var);
        let mut m = params.init_mean.clone();
        let mut c = params.init_var.clone();
        let mut ll = 0.0;
        for i in 0..n {
            let k2 = panel.grid().gap_scales()[i].powi(2);
            let r = &c + &base_sys * k2;
            let mask: Vec<bool> = (0..n_z).map(|j| panel.is_observed(i, j)).collect();
            let p = incidence(&mask);
            if p.n_observed() == 0 {
                c = r;
                continue;
            }
            let pm = p.rows() * &m;
            let q = p.rows() * (&r + &v_diag) * p.rows().transpose();
            let x = DVector::from_iterator(
                p.n_observed(),
                p.observed_indices().iter().map(|&j| panel.values()[(i, j)]),
            );
            let qinv = q.clone().try_inverse().unwrap();
            let innov = &x - &pm;
            ll += -0.5
                * (p.n_observed() as f64 * LN_2PI
                    + q.determinant().ln()
                    + (innov.transpose() * &qinv * &innov)[(0, 0)]);
            let a = &r * p.rows().transpose() * &qinv;
            m = &m + &a * &innov;
            c = &r - &a * &q * a.transpose();
            let idx = i;
            assert!(
                (traj.means[idx].clone() - &m).norm() < 1e-10,
                "mean mismatch at {i}"
            );
            assert!((traj.covs[idx].clone() - &c).norm() < 1e-10);
        }
        assert!((traj.log_likelihood() - ll).abs() < 1e-10);
    }

    #[test]
    fn likelihood_invariant_under_zone_permutation() {
        let mut rng = StdRng::seed_from_u64(33);
        let n = 6;
        let n_z = 4;
        let panel = random_panel(&mut rng, n, n_z, 0.2);
        let geom = geometry(n_z, 1.2);
        let mut params = joint_params(n_z, 0.5, 0.2);
        params.obs_var = DVector::from_fn(n_z, |j, _| 0.3 + 0.1 * j as f64);
        params.sys_var = DVector::from_fn(n_z, |j, _| 0.1 + 0.05 * j as f64);
        let k3 = kernel_matrix(&geom, &params.eta3).unwrap();
        let base = forward_filter_joint(&panel, &params, &k3)
            .unwrap()
            .log_likelihood();

        let perm = [2usize, 0, 3, 1];
        let values = DMatrix::from_fn(n, n_z, |i, j| panel.values()[(i, perm[j])]);
        let observed = DMatrix::from_fn(n, n_z, |i, j| panel.is_observed(i, perm[j]));
        let ppanel = PanelData::new(panel.grid().clone(), values, observed).unwrap();
        let pdist = DMatrix::from_fn(n_z, n_z, |i, j| geom.distances()[(perm[i], perm[j])]);
        let pgeom =
            ZoneGeometry::from_distances(perm.iter().map(|&j| format!("z{j}")).collect(), pdist)
                .unwrap();
        let mut pparams = params.clone();
        pparams.obs_var = DVector::from_fn(n_z, |j, _| params.obs_var[perm[j]]);
        pparams.sys_var = DVector::from_fn(n_z, |j, _| params.sys_var[perm[j]]);
        let pk3 = kernel_matrix(&pgeom, &pparams.eta3).unwrap();
        let permuted = forward_filter_joint(&ppanel, &pparams, &pk3)
            .unwrap()
            .log_likelihood();
        assert!((base - permuted).abs() < 1e-10);
    }

    #[test]
    fn doubling_obs_var_lowers_average_likelihood() {
        // Monte Carlo sanity: data generated at V should on average prefer
        // V over 2V.
        let mut rng = StdRng::seed_from_u64(44);
        let geom = geometry(2, 1.0);
        let params = joint_params(2, 0.5, 0.2);
        let k3 = kernel_matrix(&geom, &params.eta3).unwrap();
        let mut doubled = params.clone();
        doubled.obs_var *= 2.0;
        let mut diff_sum = 0.0;
        for _ in 0..120 {
            let grid = TimeGrid::regular_monthly(1.0, 10);
            let mut values = DMatrix::zeros(10, 2);
            let mut level = DVector::from_fn(2, |j, _| params.init_mean[j]);
            let chol_init = params.init_var.clone().cholesky().unwrap();
            let z0 = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            level += chol_init.l() * z0;
            let mut base_sys = k3.entries().clone();
            for j in 0..2 {
                base_sys[(j, j)] += params.sys_var[j];
            }
            let chol_sys = base_sys.cholesky().unwrap();
            for i in 0..10 {
                let z =
                    DVector::from_fn(2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
                level += chol_sys.l() * z;
                for j in 0..2 {
                    values[(i, j)] = level[j]
                        + params.obs_var[j].sqrt()
                            * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
            let panel = PanelData::fully_observed(grid, values).unwrap();
            let ll_true = forward_filter_joint(&panel, &params, &k3)
                .unwrap()
                .log_likelihood();
            let ll_doubled = forward_filter_joint(&panel, &doubled, &k3)
                .unwrap()
                .log_likelihood();
            diff_sum += ll_true - ll_doubled;
        }
        assert!(diff_sum / 120.0 > 0.0, "average diff {}", diff_sum / 120.0);
    }

    #[test]
    fn single_zone_level_equals_joint_with_folded_variance() {
        // Joint filter with n_z = 1 and K3 = [sigma3^2] equals the
        // single-zone filter with pinned harmonic and W3 = W + sigma3^2.
        let mut rng = StdRng::seed_from_u64(55);
        let n = 7;
        let grid = TimeGrid::regular_monthly(1.0, n);
        let config = HarmonicConfig::default();
        let theta1 = 0.4;
        let theta2 = -0.9;
        let raw = DMatrix::from_fn(n, 1, |i, _| {
            let r = observation_row(grid.times()[i], &config);
            r[0] * theta1 + r[1] * theta2 + rng.random_range(3.0..7.0)
        });
        let mut observed = DMatrix::from_element(n, 1, true);
        observed[(3, 0)] = false;
        let panel = PanelData::new(grid.clone(), raw, observed).unwrap();

        let sigma3 = 0.6f64;
        let w = 0.25f64;
        let v = 0.4f64;

        // Joint route on detrended data.
        let geom = geometry(1, 1.0);
        let mut params = joint_params(1, v, w);
        params.eta3 = KernelParams::new(sigma3, 1.0);
        params.init_mean = DVector::from_element(1, 6.0);
        params.init_var = DMatrix::from_element(1, 1, 20.0);
        let k3 = kernel_matrix(&geom, &params.eta3).unwrap();
        let detrended = detrend(
            &panel,
            &DVector::from_element(1, theta1),
            &DVector::from_element(1, theta2),
            &config,
        );
        let joint = forward_filter_joint(&detrended, &params, &k3).unwrap();

        // Single route on raw data with the harmonic pinned at the truth.
        let m0 = DVector::from_row_slice(&[theta1, theta2, 6.0]);
        let c0 = DMatrix::from_diagonal(&DVector::from_row_slice(&[0.0, 0.0, 20.0]));
        let single = forward_filter_single(
            &panel,
            v,
            &[0.0, 0.0, w + sigma3 * sigma3 + k3.jitter()],
            &m0,
            &c0,
            &config,
        )
        .unwrap();

        assert!((joint.log_likelihood() - single.log_likelihood()).abs() < 1e-10);
        for i in 0..n {
            assert!((joint.means[i][0] - single.means[i][2]).abs() < 1e-10);
            assert!((joint.covs[i][(0, 0)] - single.covs[i][(2, 2)]).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn covariances_stay_symmetric_psd(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.random_range(2..6);
            let n_z = rng.random_range(1..4usize);
            let panel = random_panel(&mut rng, n, n_z, 0.3);
            let geom = geometry(n_z, rng.random_range(0.5..3.0));
            let mut params = joint_params(
                n_z,
                rng.random_range(0.05..2.0),
                rng.random_range(0.01..1.0),
            );
            params.eta3 = KernelParams::new(
                rng.random_range(0.1..2.0),
                rng.random_range(0.2..2.0),
            );
            let k3 = kernel_matrix(&geom, &params.eta3).unwrap();
            let traj = forward_filter_joint(&panel, &params, &k3).unwrap();
            for (c, r) in traj.covs.iter().zip(&traj.prior_covs) {
                for m in [c, r] {
                    prop_assert_eq!(m.clone(), m.transpose());
                    let eig = m.clone().symmetric_eigen();
                    prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-8));
                }
            }
        }
    }
}
