//! Single-phase MMSE estimation of the aggregate channel under aging.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fading::AgingProfile;
use crate::linalg::{self, CMat, CVec};
use crate::scenario::{ChannelStatistics, SystemConfig};

/// Orthonormal pilot sequences, one column per UE.
#[derive(Debug, Clone)]
pub struct PilotBook {
    pub psi: CMat,
}

impl PilotBook {
    /// Normalized Walsh–Hadamard columns when `tau_p` is a power of two,
    /// DFT columns otherwise.
    pub fn new(tau_p: usize, k: usize) -> Result<Self> {
        if k > tau_p {
            return Err(Error::Domain(format!("{k} orthogonal pilots need tau_p >= {k}, got {tau_p}")));
        }
        let s = 1.0 / (tau_p as f64).sqrt();
        let psi = if tau_p.is_power_of_two() {
            CMat::from_fn(tau_p, k, |t, u| {
                let sign = if (t & u).count_ones() % 2 == 0 { s } else { -s };
                Complex64::new(sign, 0.0)
            })
        } else {
            CMat::from_fn(tau_p, k, |t, u| {
                Complex64::from_polar(s, -2.0 * PI * (t * u) as f64 / tau_p as f64)
            })
        };
        Self::from_columns(psi)
    }

    pub fn from_columns(psi: CMat) -> Result<Self> {
        let gram = psi.adjoint() * &psi;
        let err = linalg::max_abs_diff(&gram, &CMat::identity(psi.ncols(), psi.ncols()));
        if err > 1e-10 {
            return Err(Error::Domain(format!("pilot set is not orthonormal (Gram error {err:e})")));
        }
        Ok(PilotBook { psi })
    }
}

/// Correlates the `M × τ_p` training block with UE k's pilot and removes the
/// pilot amplitude, giving `h_k + w̃_k / sqrt(p_p)`.
pub fn despread_pilots(y: &CMat, book: &PilotBook, k: usize, p_pilot: f64) -> Result<CVec> {
    if y.ncols() != book.psi.nrows() {
        return Err(Error::Dimension(format!(
            "training block has {} columns but pilots have length {}",
            y.ncols(),
            book.psi.nrows()
        )));
    }
    let conj: CVec = book.psi.column(k).map(|z| z.conj());
    Ok((y * conj).unscale(p_pilot.sqrt()))
}

/// Per-UE estimator matrices.
#[derive(Debug, Clone)]
pub struct EstimationModel {
    /// `(R_k + σ̃²/p_p I)^{-1}`.
    pub q: Vec<CMat>,
    pub phi: Vec<CMat>,
    pub psi: Vec<CMat>,
    /// Aging between the pilot slot and the estimation instant ζ.
    pub alpha_train: Vec<f64>,
    /// `α_train R_k Q_k`, the linear estimator.
    pub filter: Vec<CMat>,
    pub r: Vec<CMat>,
    /// `σ̃²/p_p`.
    pub noise_ratio: f64,
}

impl EstimationModel {
    pub fn new(stats: &ChannelStatistics, cfg: &SystemConfig, aging: &AgingProfile) -> Result<Self> {
        let zeta = cfg.first_data_index();
        let alpha_train: Vec<f64> = (0..cfg.k)
            .map(|k| aging.alpha(k, zeta - cfg.pilot_slots[k]))
            .collect();
        Self::with_alpha_train(&stats.r, cfg.noise_var_ul / cfg.p_pilot, &alpha_train)
    }

    /// Builds the model from covariances, the noise-to-pilot-power ratio
    /// `σ̃²/p_p` and per-UE training correlations.
    pub fn with_alpha_train(r: &[CMat], noise_ratio: f64, alpha_train: &[f64]) -> Result<Self> {
        if r.len() != alpha_train.len() {
            return Err(Error::Dimension("one training coefficient per UE required".into()));
        }
        if !(noise_ratio > 0.0) {
            return Err(Error::Domain("noise-to-pilot ratio must be positive".into()));
        }
        let mut q = Vec::with_capacity(r.len());
        let mut phi = Vec::with_capacity(r.len());
        let mut psi = Vec::with_capacity(r.len());
        let mut filter = Vec::with_capacity(r.len());
        for (rk, &a) in r.iter().zip(alpha_train) {
            // Every matrix below is a spectral function of R. Applying the
            // functions to the eigenvalues keeps the error at rounding in R;
            // forming R Q directly carries the condition number of R + sI.
            let eig = linalg::hermitize(rk).symmetric_eigen();
            let lam: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
            let spectral = |f: &dyn Fn(f64) -> f64| {
                let mut scaled = eig.eigenvectors.clone();
                for (j, &l) in lam.iter().enumerate() {
                    scaled.column_mut(j).scale_mut(f(l));
                }
                linalg::hermitize(&linalg::matmul(&scaled, &eig.eigenvectors.adjoint()))
            };
            let qk = spectral(&|l| 1.0 / (l + noise_ratio));
            let rq = spectral(&|l| l / (l + noise_ratio));
            // s R Q, bounded by s.
            let srq = spectral(&|l| noise_ratio * l / (l + noise_ratio));
            // Φ = α² RQR = α²(R − s RQ).
            let mut phik = rk.scale(a * a);
            linalg::axpy(&mut phik, -a * a, &srq);
            // Ψ = R − α²RQR = (1−α²)R + α² s RQ, free of cancellation when
            // the error is small.
            let mut psik = rk.scale((1.0 - a) * (1.0 + a));
            linalg::axpy(&mut psik, a * a, &srq);
            psi.push(linalg::hermitize(&psik));
            filter.push(rq.scale(a));
            phi.push(linalg::hermitize(&phik));
            q.push(qk);
        }
        Ok(EstimationModel { q, phi, psi, alpha_train: alpha_train.to_vec(), filter, r: r.to_vec(), noise_ratio })
    }

    pub fn k(&self) -> usize {
        self.phi.len()
    }
}

/// `ĥ_k = α_train R_k Q_k ỹ_k`.
pub fn mmse_estimate(y_tilde: &CVec, model: &EstimationModel, k: usize) -> Result<CVec> {
    let f = &model.filter[k];
    if y_tilde.len() != f.ncols() {
        return Err(Error::Dimension(format!(
            "observation has length {} but M = {}",
            y_tilde.len(),
            f.ncols()
        )));
    }
    Ok(f * y_tilde)
}

/// `tr(Ψ_k) / tr(R_k)`.
pub fn nmse(model: &EstimationModel, k: usize) -> f64 {
    let tr_r = linalg::trace(&model.r[k]).re;
    if tr_r <= 0.0 {
        return 0.0;
    }
    linalg::trace(&model.psi[k]).re / tr_r
}
