//! Backward sampler: exact joint posterior draws of the latent state path
//! conditional on static parameters, consuming a forward-filter trajectory.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::filter::FilterTrajectory;

/// One sampled latent path including the initial state: (n+1) x state_dim.
/// Row i holds the state at time t_i (row 0 is the t_0 state).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub states: DMatrix<f64>,
}

impl LatentPath {
    /// Number of time points excluding the initial state.
    pub fn n_steps(&self) -> usize {
        self.states.nrows().saturating_sub(1)
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    /// State at time index `i`, where 0 is the initial state.
    pub fn state(&self, i: usize) -> DVector<f64> {
        self.states.row(i).transpose()
    }
}

/// Draw from N(mean, cov) for a symmetric PSD covariance. Exactly singular
/// directions (for instance a filter pinned by noiseless data) are handled
/// by escalating jitter and, failing that, an eigenvalue-clamped factor.
pub(crate) fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let n = mean.len();
    let scale = cov.diagonal().amax();
    if !(scale > 0.0) {
        return mean.clone();
    }
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut jitter = 0.0;
    loop {
        let mut m = cov.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return mean + chol.l() * z;
        }
        jitter = if jitter == 0.0 {
            1e-14 * scale
        } else {
            jitter * 10.0
        };
        if jitter > 1e-8 * scale {
            break;
        }
    }
    // Eigen fallback for genuinely rank-deficient covariances.
    let eig = cov.clone().symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (k, col) in eig.eigenvalues.iter().enumerate() {
        let s = col.max(0.0).sqrt();
        l.column_mut(k).scale_mut(s);
    }
    mean + l * z
}

/// Sample one latent path from the smoothing distribution by the backward
/// recursion: draw the final state from N(m_n, C_n), then condition each
/// earlier state on its successor using the stored filter moments.
///
/// The system covariance for the step into t_{i+1} is recovered from the
/// trajectory as R_{i+1} - C_i. The output includes the t_0 state, drawn by
/// extending the recursion one step past the first observation using
/// (m_0, C_0).
pub fn backward_sample<R: Rng + ?Sized>(
    traj: &FilterTrajectory,
    rng: &mut R,
) -> Result<LatentPath> {
    let n = traj.len();
    let dim = traj.state_dim();
    let mut states = DMatrix::zeros(n + 1, dim);

    let (last_mean, last_cov) = traj.last_moments();
    let mut next = sample_mvn(&last_mean, &last_cov, rng);
    states.row_mut(n).copy_from(&next.transpose());

    for i in (0..n).rev() {
        // Condition theta_{t_i} on theta_{t_{i+1}}; i == 0 uses (m_0, C_0).
        let (mean_i, cov_i) = if i == 0 {
            (&traj.init_mean, &traj.init_cov)
        } else {
            (&traj.means[i - 1], &traj.covs[i - 1])
        };
        let sys = traj.system_cov(i);
        let denom = cov_i + &sys;
        let chol = denom
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical(format!("degenerate smoothing step {i}")))?;
        // B = C (C + W)^{-1}, h = m + B (next - m), H = C - B C.
        let gain = chol.solve(cov_i).transpose();
        let h = mean_i + &gain * (&next - mean_i);
        let mut cap = cov_i - &gain * cov_i;
        let n_rows = cap.nrows();
        for r in 0..n_rows {
            for c in (r + 1)..n_rows {
                let v = 0.5 * (cap[(r, c)] + cap[(c, r)]);
                cap[(r, c)] = v;
                cap[(c, r)] = v;
            }
        }
        next = sample_mvn(&h, &cap, rng);
        states.row_mut(i).copy_from(&next.transpose());
    }
    Ok(LatentPath { states })
}
