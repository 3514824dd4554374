//! Gradients of the DE SINR and DE sum SE with respect to the RIS phases.
//!
//! Reverse mode: per DE point the adjoints flow from the SINR through the
//! K×K layer (S, E, δ^λ, A) to the matrix layer (Φ, Ψ, T), with the fixed
//! point differentiated implicitly through `A^T y = δ̄`. Φ and Ψ do not depend
//! on n, so their adjoints are summed over the frame before the chain rule
//! through `Φ = α_t² R Q R`, `Ψ = R − Φ` and `R(Θ)`.
//!
//! Convention: for a Hermitian input X the adjoint X̄ satisfies
//! `dJ = Re tr(X̄ dX)`. The returned phase gradient is `q = ∂J/∂c*`, so that
//! `dJ = 2 Re Σ_l conj(q_l) dc_l` and `∂J/∂θ_l = 2 Re{conj(q_l) j c_l}`.

use num_complex::Complex64;

use crate::de::{DeFrame, DePoint, DeSettings};
use crate::error::{Error, Result};
use crate::estimation::EstimationModel;
use crate::fading::AgingProfile;
use crate::linalg::{self, CMat, CVec, RMat};
use crate::scenario::{ChannelStatistics, LambdaReading, SystemConfig};

/// Phase gradient and the objective it belongs to.
#[derive(Debug, Clone)]
pub struct PhaseGradient {
    pub value: f64,
    /// `∂J/∂c*`.
    pub euclidean: CVec,
    /// Component of `euclidean` tangent to the unit circle at each c_l.
    pub riemannian: CVec,
    /// `∂J/∂θ_l`.
    pub dtheta: Vec<f64>,
}

/// `∂ tr(A R_k)/∂c*`, i.e. `β_h2,k diag(H1^H A H1 Θ R_RIS,k)`.
pub fn trace_d_r(a: &CMat, stats: &ChannelStatistics, k: usize) -> CVec {
    let large = &stats.large;
    let inner = linalg::matmul3(&large.h1.adjoint(), a, &large.h1);
    let mut theta_r = large.r_ris[k].clone();
    for (l, mut row) in theta_r.row_iter_mut().enumerate() {
        row *= stats.theta[l];
    }
    let prod = linalg::matmul(&inner, &theta_r);
    CVec::from_iterator(large.l, (0..large.l).map(|l| prod[(l, l)] * large.beta_h2[k]))
}

/// Removes the radial component: `q_l − Re{q_l c_l*} c_l`.
pub fn tangent_projection(q: &CVec, c: &CVec) -> CVec {
    CVec::from_iterator(q.len(), q.iter().zip(c.iter()).map(|(qi, ci)| qi - ci * (qi * ci.conj()).re))
}

/// `∂J/∂θ_l` from `q = ∂J/∂c*`.
pub fn dtheta_from(q: &CVec, c: &CVec) -> Vec<f64> {
    q.iter().zip(c.iter()).map(|(qi, ci)| 2.0 * (qi.conj() * Complex64::new(0.0, 1.0) * ci).re).collect()
}

/// `(1 − GV)^{-T} x` for a right-hand side matrix.
fn solve_at(a: &RMat, rhs: &RMat) -> Result<RMat> {
    a.transpose()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Conditioning("I − F is singular".into()))
}

/// Adds the adjoints of one DE point into `phi_bar` and `psi_bar`, given the
/// adjoint `gamma_bar[k]` of each SINR at that point.
#[allow(clippy::too_many_arguments)]
pub fn point_adjoint(
    pt: &DePoint,
    phi: &[CMat],
    psi: &[CMat],
    p: &[f64],
    rho: f64,
    reading: LambdaReading,
    gamma_bar: &[f64],
    phi_bar: &mut [CMat],
    psi_bar: &mut [CMat],
) -> Result<()> {
    let k = pt.k();
    let m = pt.t.nrows() as f64;
    let t = &pt.t;
    let a2: Vec<f64> = pt.alpha.iter().map(|a| a * a).collect();
    let u = &pt.u;
    let v = &pt.v;
    let pm = pt.power_model(rho, reading);
    let sinr = pm.sinr(p);

    let mut delta_bar = vec![0.0; k];
    let mut u_bar = vec![0.0; k];
    let mut kappa_bar = vec![0.0; k];
    let mut dl_bar = vec![0.0; k];
    let mut e_bar = RMat::zeros(k, k);
    let mut s_bar = RMat::zeros(k, k);

    for kk in 0..k {
        if gamma_bar[kk] == 0.0 || pm.q[kk] == 0.0 || p[kk] == 0.0 {
            continue;
        }
        let den = pm.denominator(p, kk);
        let n_bar = gamma_bar[kk] / den;
        let d_bar = -gamma_bar[kk] * sinr[kk] / den;
        let a4 = a2[kk] * a2[kk];
        delta_bar[kk] += n_bar * 2.0 * p[kk] * a4 * pt.delta[kk];

        let abar2 = (1.0 - a2[kk]).max(0.0);
        e_bar[(kk, kk)] += d_bar * p[kk] * (a4 + a2[kk] * abar2);
        s_bar[(kk, kk)] -= d_bar * p[kk] * a4;

        let lead = (1.0 + u[kk]).powi(2);
        let mut inter = 0.0;
        let mut noise = 0.0;
        for i in 0..k {
            let ui = 1.0 + u[i];
            if i != kk {
                let coef = p[i] * a2[i] / (ui * ui);
                let qik = pt.q[(i, kk)];
                inter += coef * qik;
                let q_bar = d_bar * lead * coef;
                e_bar[(kk, i)] += q_bar;
                s_bar[(kk, i)] -= q_bar * a2[kk] * pt.kappa[kk];
                kappa_bar[kk] -= q_bar * a2[kk] * pt.s[(kk, i)];
                u_bar[i] += d_bar * lead * p[i] * a2[i] * qik * (-2.0) / (ui * ui * ui);
            }
            let wik = match reading {
                LambdaReading::PerUser => a2[i],
                LambdaReading::Leading => a2[kk],
            };
            let coef = p[i] * wik / (ui * ui * m * rho);
            noise += coef * pt.delta_lambda[i];
            dl_bar[i] += d_bar * lead * coef;
            u_bar[i] += d_bar * lead * coef * pt.delta_lambda[i] * (-2.0) / ui;
        }
        u_bar[kk] += d_bar * 2.0 * (1.0 + u[kk]) * (inter + noise);
    }
    for i in 0..k {
        u_bar[i] += kappa_bar[i] * 2.0 / (1.0 + u[i]).powi(3);
    }

    // E = X + S, X = H W, W = I + V S.
    s_bar += &e_bar;
    let mut w = pt.s.clone();
    for i in 0..k {
        w.row_mut(i).scale_mut(v[i]);
        w[(i, i)] += 1.0;
    }
    let h_bar = &e_bar * w.transpose();
    let w_bar = pt.h.transpose() * &e_bar;
    let mut v_bar = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            v_bar[i] += w_bar[(i, j)] * pt.s[(i, j)];
            s_bar[(i, j)] += v[i] * w_bar[(i, j)];
        }
    }
    // S = A^{-1} G and δ^λ = A^{-1} f.
    let s_hat = solve_at(&pt.a, &s_bar)?;
    let mut g_bar = s_hat.clone();
    let mut a_bar = -(&s_hat * pt.s.transpose());
    let dl_vec = RMat::from_column_slice(k, 1, &dl_bar);
    let l_hat = solve_at(&pt.a, &dl_vec)?;
    let f_bar: Vec<f64> = l_hat.iter().copied().collect();
    for i in 0..k {
        for j in 0..k {
            a_bar[(i, j)] -= l_hat[(i, 0)] * pt.delta_lambda[j];
        }
    }
    // A = I − G V.
    for i in 0..k {
        for j in 0..k {
            g_bar[(i, j)] -= a_bar[(i, j)] * v[j];
            v_bar[j] -= a_bar[(i, j)] * pt.g[(i, j)];
        }
    }
    for i in 0..k {
        u_bar[i] += v_bar[i] * (-2.0 * a2[i] * a2[i] / (1.0 + u[i]).powi(3));
        delta_bar[i] += a2[i] * u_bar[i];
    }

    // Matrix layer. G_kl = tr(TΦ_kTΦ_l)/M², H_kl = tr(Ψ_kTΦ_lT)/M²,
    // f_k = tr(Φ_kT²)/M.
    let m2 = m * m;
    let gs = &g_bar + g_bar.transpose();
    let b: Vec<CMat> = phi.iter().map(|ph| linalg::matmul(t, ph)).collect();
    let mut t_bar = CMat::zeros(t.nrows(), t.ncols());
    let mut f_sum = CMat::zeros(t.nrows(), t.ncols());
    let t2 = linalg::matmul(t, t);
    for kk in 0..k {
        // Sandwich argument for Φ̄_k.
        let mut y = CMat::zeros(t.nrows(), t.ncols());
        for l in 0..k {
            if gs[(kk, l)] != 0.0 {
                linalg::axpy(&mut y, gs[(kk, l)] / m2, &phi[l]);
            }
            if h_bar[(l, kk)] != 0.0 {
                linalg::axpy(&mut y, h_bar[(l, kk)] / m2, &psi[l]);
            }
        }
        t_bar += linalg::matmul(&b[kk].adjoint(), &y);
        let mut contrib = linalg::matmul3(t, &y, t);
        linalg::axpy(&mut contrib, f_bar[kk] / m, &t2);
        phi_bar[kk] += contrib;
        linalg::axpy(&mut f_sum, f_bar[kk] / m, &phi[kk]);

        // Sandwich argument for Ψ̄_k.
        let mut x = CMat::zeros(t.nrows(), t.ncols());
        for l in 0..k {
            if h_bar[(kk, l)] != 0.0 {
                linalg::axpy(&mut x, h_bar[(kk, l)] / m2, &phi[l]);
            }
        }
        let pt_ = linalg::matmul(&psi[kk], t);
        t_bar += linalg::matmul(&pt_, &x);
        psi_bar[kk] += linalg::matmul3(t, &x, t);
    }
    t_bar += linalg::matmul(t, &f_sum) + linalg::matmul(&f_sum, t);
    let t_bar = linalg::hermitize(&t_bar);

    // T = (Σ w_i Φ_i/M + Z/M + αI)^{-1}, w_i = a_i²/(1+u_i).
    let p_bar = -linalg::matmul3(t, &t_bar, t);
    for i in 0..k {
        let w_adj = linalg::re_trace_prod(&p_bar, &phi[i]) / m;
        delta_bar[i] -= v[i] * w_adj;
    }
    // Implicit fixed point δ = tr(Φ T(δ, Φ))/M.
    let y = solve_at(&pt.a, &RMat::from_column_slice(k, 1, &delta_bar))?;
    let mut yy = t_bar.clone();
    for i in 0..k {
        linalg::axpy(&mut yy, y[(i, 0)] / m, &phi[i]);
    }
    let common = -linalg::matmul3(t, &yy, t);
    for i in 0..k {
        let wi = a2[i] / (1.0 + u[i]);
        linalg::axpy(&mut phi_bar[i], wi / m, &common);
        linalg::axpy(&mut phi_bar[i], y[(i, 0)] / m, t);
    }
    Ok(())
}

/// Pulls the adjoints of `Φ = α_t²(R − sRQ)` and `Ψ = (1−α_t²)R + α_t² sRQ`
/// back to R, using `d(RQ) = s Q dR Q`.
fn estimation_to_r(est: &EstimationModel, phi_bar: &[CMat], psi_bar: &[CMat]) -> Vec<CMat> {
    let s2 = est.noise_ratio * est.noise_ratio;
    (0..phi_bar.len())
        .map(|k| {
            let at2 = est.alpha_train[k].powi(2);
            let pb = linalg::hermitize(&phi_bar[k]);
            let sb = linalg::hermitize(&psi_bar[k]);
            let mut out = pb.scale(at2) + sb.scale(1.0 - at2);
            if at2 != 0.0 {
                let diff = &sb - &pb;
                linalg::axpy(&mut out, at2 * s2, &linalg::matmul3(&est.q[k], &diff, &est.q[k]));
            }
            out
        })
        .collect()
}

fn finish(value: f64, r_bar: &[CMat], stats: &ChannelStatistics) -> PhaseGradient {
    let l = stats.l();
    let mut q = CVec::zeros(l);
    for (k, rb) in r_bar.iter().enumerate() {
        if stats.large.beta_h2[k] != 0.0 {
            q += trace_d_r(&linalg::hermitize(rb), stats, k);
        }
    }
    PhaseGradient {
        value,
        riemannian: tangent_projection(&q, &stats.theta),
        dtheta: dtheta_from(&q, &stats.theta),
        euclidean: q,
    }
}

fn zero_adjoints(k: usize, m: usize) -> (Vec<CMat>, Vec<CMat>) {
    (vec![CMat::zeros(m, m); k], vec![CMat::zeros(m, m); k])
}

/// Gradient of the frame's DE sum SE; `frame` must have been solved for the
/// statistics in `stats` and `est`.
pub fn grad_frame(frame: &DeFrame, p: &[f64], stats: &ChannelStatistics, est: &EstimationModel) -> Result<PhaseGradient> {
    let k = stats.k();
    let (mut phi_bar, mut psi_bar) = zero_adjoints(k, stats.m());
    let mut counts = vec![0usize; frame.points.len()];
    for &i in &frame.index {
        counts[i] += 1;
    }
    let scale = 1.0 / (frame.tau_c as f64 * std::f64::consts::LN_2);
    let mut value = 0.0;
    for (pt, &count) in frame.points.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let sinr = pt.sinr(p, frame.rho, frame.reading);
        value += count as f64 * sinr.iter().map(|g| (1.0 + g).log2()).sum::<f64>();
        let weight = count as f64 * scale;
        let gamma_bar: Vec<f64> = sinr.iter().map(|g| weight / (1.0 + g)).collect();
        point_adjoint(pt, &est.phi, &est.psi, p, frame.rho, frame.reading, &gamma_bar, &mut phi_bar, &mut psi_bar)?;
    }
    let r_bar = estimation_to_r(est, &phi_bar, &psi_bar);
    Ok(finish(value / frame.tau_c as f64, &r_bar, stats))
}

/// Gradient of the DE sum SE with respect to `c*`.
pub fn grad_sum_se(
    p: &[f64],
    stats: &ChannelStatistics,
    est: &EstimationModel,
    aging: &AgingProfile,
    cfg: &SystemConfig,
) -> Result<PhaseGradient> {
    let settings = DeSettings::from_config(cfg);
    let frame = DeFrame::solve(est, aging, cfg, &settings, None)?;
    grad_frame(&frame, p, stats, est)
}

/// Gradient of `γ̄_{k,n}` with respect to `c*`.
#[allow(clippy::too_many_arguments)]
pub fn grad_de_sinr(
    k: usize,
    n: usize,
    p: &[f64],
    stats: &ChannelStatistics,
    est: &EstimationModel,
    aging: &AgingProfile,
    cfg: &SystemConfig,
) -> Result<PhaseGradient> {
    if k >= cfg.k {
        return Err(Error::Domain(format!("UE index {k} out of range")));
    }
    if n <= cfg.tau_p || n > cfg.tau_c {
        return Err(Error::Domain(format!("n = {n} is outside the data phase")));
    }
    let settings = DeSettings::from_config(cfg);
    let alpha = aging.data_alphas(n, cfg.tau_p);
    let pt = DePoint::solve(&est.phi, &est.psi, &alpha, &settings, None)?;
    let sinr = pt.sinr(p, settings.rho, settings.lambda_reading);
    let mut gamma_bar = vec![0.0; cfg.k];
    gamma_bar[k] = 1.0;
    let (mut phi_bar, mut psi_bar) = zero_adjoints(cfg.k, cfg.m);
    point_adjoint(&pt, &est.phi, &est.psi, p, settings.rho, settings.lambda_reading, &gamma_bar, &mut phi_bar, &mut psi_bar)?;
    let r_bar = estimation_to_r(est, &phi_bar, &psi_bar);
    Ok(finish(sinr[k], &r_bar, stats))
}
