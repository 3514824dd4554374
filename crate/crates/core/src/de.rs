//! Deterministic-equivalent SINR and sum SE with RZF precoding.
//!
//! Notation per data symbol n: `a_i` is the data-phase correlation
//! `α_{i,n-τ_p}`, `u_i = a_i² δ_i`, `w_i = a_i²/(1+u_i)` and
//! `v_i = a_i⁴/(1+u_i)²`. `T = (Σ_i w_i Φ_i/M + Z/M + α I)^{-1}` and
//! `δ_k = tr(Φ_k T)/M`. The K×K quantities are
//!
//! * `G_kl = tr(Φ_k T Φ_l T)/M²`, `H_kl = tr(Ψ_k T Φ_l T)/M²`
//! * `A = I − G V`, `W = I + V S`, `S = A^{-1} G = G W`, `X = H W`
//! * `E = X + S`, the same form as S with `R_k = Φ_k + Ψ_k` in place of Φ_k
//! * `δ^λ = A^{-1} f` with `f_k = tr(Φ_k T²)/M`
//!
//! `S_ki` is the DE of `ĥ_i^H Σ Φ_k Σ ĥ_i` scaled by `M²` inside the RZF
//! inverse. The variance and interference terms are assembled from X and S,
//! which are entrywise nonnegative, instead of as differences `E − S`; at
//! high SNR those differences lose most of their significant digits.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::estimation::EstimationModel;
use crate::fading::AgingProfile;
use crate::linalg::{self, CMat, RMat};
use crate::scenario::{FixedPointMethod, LambdaReading, SystemConfig};

/// Below this data-phase correlation the user's SINR is defined as zero.
pub const ALPHA_NULL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct DeSettings {
    pub reg_alpha: f64,
    /// `Z / M`, or `None` when Z = 0.
    pub z_over_m: Option<CMat>,
    pub rho: f64,
    pub lambda_reading: LambdaReading,
    pub method: FixedPointMethod,
    pub tol: f64,
    pub max_iter: usize,
    pub stride: usize,
}

impl DeSettings {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        let z_over_m = if cfg.z.is_zero() { None } else { Some(cfg.z.matrix(cfg.m).unscale(cfg.m as f64)) };
        DeSettings {
            reg_alpha: cfg.reg_alpha,
            z_over_m,
            rho: cfg.rho(),
            lambda_reading: cfg.lambda_reading,
            method: cfg.fixed_point,
            tol: cfg.de_tol,
            max_iter: cfg.de_max_iter,
            stride: cfg.de_stride,
        }
    }
}

/// Converged fixed point of the δ system.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub t: CMat,
    pub delta: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn build_t(phi: &[CMat], weights: &[f64], reg_alpha: f64, z_over_m: Option<&CMat>) -> Result<CMat> {
    let m = phi[0].nrows();
    let mut inv = CMat::identity(m, m).scale(reg_alpha);
    if let Some(z) = z_over_m {
        inv += z;
    }
    for (p, &w) in phi.iter().zip(weights) {
        if w != 0.0 {
            linalg::axpy(&mut inv, w / m as f64, p);
        }
    }
    linalg::inv_hpd(&inv)
}

fn traces_with(phi: &[CMat], t: &CMat) -> Vec<f64> {
    let m = t.nrows() as f64;
    phi.iter().map(|p| linalg::re_trace_prod(p, t) / m).collect()
}

/// `G_kl = tr(Φ_k T Φ_l T)/M²` from the products `B_k = T Φ_k`.
fn gram(b: &[CMat]) -> RMat {
    let k = b.len();
    let m2 = (b[0].nrows() * b[0].nrows()) as f64;
    let mut g = RMat::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let x = linalg::re_trace_prod(&b[i], &b[j]) / m2;
            g[(i, j)] = x;
            g[(j, i)] = x;
        }
    }
    g
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    new.iter()
        .zip(old)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-30))
        .fold(0.0, f64::max)
}

/// Solves `δ_k = tr(Φ_k T(δ))/M`. Without a warm start the iteration begins
/// at `δ_k = tr(Φ_k)/(M α)`, the value of the map at δ = 0 with Z = 0.
pub fn solve_t(
    phi: &[CMat],
    alpha_data: &[f64],
    settings: &DeSettings,
    warm: Option<&[f64]>,
) -> Result<FixedPoint> {
    if phi.is_empty() || phi.len() != alpha_data.len() {
        return Err(Error::Dimension("one data coefficient per covariance required".into()));
    }
    if !(settings.reg_alpha > 0.0) {
        return Err(Error::Domain("RZF regularizer must be positive".into()));
    }
    let m = phi[0].nrows() as f64;
    let k = phi.len();
    let a2: Vec<f64> = alpha_data.iter().map(|a| a * a).collect();
    let mut delta: Vec<f64> = match warm {
        Some(w) if w.len() == k && w.iter().all(|x| x.is_finite() && *x >= 0.0) => w.to_vec(),
        _ => phi.iter().map(|p| linalg::trace(p).re / (m * settings.reg_alpha)).collect(),
    };
    let mut relax = 1.0;
    let mut last_step: Option<Vec<f64>> = None;
    let mut best_residual = f64::INFINITY;
    let mut polished = false;
    for it in 1..=settings.max_iter {
        let weights: Vec<f64> = (0..k).map(|i| a2[i] / (1.0 + a2[i] * delta[i])).collect();
        let t = build_t(phi, &weights, settings.reg_alpha, settings.z_over_m.as_ref())?;
        let mapped = traces_with(phi, &t);
        let residual = relative_change(&mapped, &delta);
        // Quadratic convergence bottoms out at rounding level; accept a
        // stalled residual once it is already tiny.
        let stalled = settings.method == FixedPointMethod::Newton && residual < 1e-10 && residual >= best_residual;
        // Newton takes one step past the tolerance. That step lands at
        // rounding level, so nearby inputs give consistently converged δ.
        if stalled || (residual < settings.tol && (settings.method == FixedPointMethod::Picard || polished)) {
            return Ok(FixedPoint { t, delta, residual, iterations: it });
        }
        polished = residual < settings.tol;
        best_residual = best_residual.min(residual);
        let next = match settings.method {
            FixedPointMethod::Newton => {
                let b: Vec<CMat> = phi.iter().map(|p| linalg::matmul(&t, p)).collect();
                let g = gram(&b);
                let mut a = RMat::identity(k, k);
                for r in 0..k {
                    for c in 0..k {
                        let v = a2[c] * a2[c] / (1.0 + a2[c] * delta[c]).powi(2);
                        a[(r, c)] -= g[(r, c)] * v;
                    }
                }
                let rhs = RMat::from_iterator(k, 1, mapped.iter().zip(&delta).map(|(f, d)| f - d));
                match linalg::solve_real(&a, &rhs) {
                    Ok(step) => {
                        let cand: Vec<f64> = (0..k).map(|i| delta[i] + step[(i, 0)]).collect();
                        if cand.iter().all(|x| x.is_finite() && *x >= 0.0) {
                            cand
                        } else {
                            mapped
                        }
                    }
                    Err(_) => mapped,
                }
            }
            FixedPointMethod::Picard => {
                let step: Vec<f64> = mapped.iter().zip(&delta).map(|(f, d)| f - d).collect();
                if let Some(prev) = &last_step {
                    if step.iter().zip(prev).any(|(s, p)| s * p < 0.0 && s.abs() > 0.5 * p.abs()) {
                        relax = 0.5;
                    }
                }
                let cand = delta.iter().zip(&step).map(|(d, s)| d + relax * s).collect();
                last_step = Some(step);
                cand
            }
        };
        delta = next;
    }
    let weights: Vec<f64> = (0..k).map(|i| a2[i] / (1.0 + a2[i] * delta[i])).collect();
    let t = build_t(phi, &weights, settings.reg_alpha, settings.z_over_m.as_ref())?;
    let residual = relative_change(&traces_with(phi, &t), &delta);
    Err(Error::Convergence { iterations: settings.max_iter, residual })
}

fn check_contractive(g: &RMat, v: &[f64]) -> Result<()> {
    // F = G V is similar to V^{1/2} G V^{1/2}, which is symmetric PSD.
    let k = v.len();
    let sym = RMat::from_fn(k, k, |i, j| v[i].sqrt() * g[(i, j)] * v[j].sqrt());
    let radius = sym.symmetric_eigenvalues().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if radius >= 1.0 {
        return Err(Error::Conditioning(format!("spectral radius of F is {radius}")));
    }
    Ok(())
}

/// `T̃(L)` for an arbitrary Hermitian argument, with the δ̃-type vector
/// `x = (I − F)^{-1} f`, `F_ki = tr(Φ_k T Φ_i T) v_i / M²`,
/// `f_k = tr(Φ_k T L T)/M`.
pub fn solve_ttilde(
    t: &CMat,
    phi: &[CMat],
    alpha_data: &[f64],
    delta: &[f64],
    arg: &CMat,
) -> Result<(CMat, Vec<f64>)> {
    let m = t.nrows() as f64;
    let k = phi.len();
    let v: Vec<f64> = (0..k)
        .map(|i| {
            let a2 = alpha_data[i] * alpha_data[i];
            a2 * a2 / (1.0 + a2 * delta[i]).powi(2)
        })
        .collect();
    let b: Vec<CMat> = phi.iter().map(|p| linalg::matmul(t, p)).collect();
    let g = gram(&b);
    check_contractive(&g, &v)?;
    let tlt = linalg::hermitize(&linalg::matmul3(t, arg, t));
    let f = RMat::from_iterator(k, 1, phi.iter().map(|p| linalg::re_trace_prod(p, &tlt) / m));
    let a = RMat::from_fn(k, k, |r, c| if r == c { 1.0 } else { 0.0 } - g[(r, c)] * v[c]);
    let x = linalg::solve_real(&a, &f)?;
    let mut out = tlt;
    for i in 0..k {
        let tpt = linalg::matmul(&b[i], t);
        linalg::axpy(&mut out, v[i] * x[(i, 0)] / m, &tpt);
    }
    Ok((linalg::hermitize(&out), x.iter().copied().collect()))
}

/// All DE quantities for one vector of data-phase coefficients.
#[derive(Debug, Clone)]
pub struct DePoint {
    pub alpha: Vec<f64>,
    pub t: CMat,
    pub delta: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub g: RMat,
    pub h: RMat,
    pub x: RMat,
    pub f_lambda: Vec<f64>,
    pub a: RMat,
    pub s: RMat,
    pub e: RMat,
    pub delta_lambda: Vec<f64>,
    pub delta_tilde: Vec<f64>,
    pub delta_e: Vec<f64>,
    /// `Q[(i, k)]`: interference of user i's beam at user k.
    pub q: RMat,
    pub kappa: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl DePoint {
    pub fn solve(
        phi: &[CMat],
        psi: &[CMat],
        alpha_data: &[f64],
        settings: &DeSettings,
        warm: Option<&[f64]>,
    ) -> Result<Self> {
        let fp = solve_t(phi, alpha_data, settings, warm)?;
        Self::from_fixed_point(phi, psi, alpha_data, fp)
    }

    /// `psi[k]` is the estimation-error covariance `R_k − Φ_k`.
    pub fn from_fixed_point(phi: &[CMat], psi: &[CMat], alpha_data: &[f64], fp: FixedPoint) -> Result<Self> {
        let k = phi.len();
        let m = fp.t.nrows() as f64;
        let t = fp.t;
        let delta = fp.delta;
        let a2: Vec<f64> = alpha_data.iter().map(|a| a * a).collect();
        let u: Vec<f64> = (0..k).map(|i| a2[i] * delta[i]).collect();
        let v: Vec<f64> = (0..k).map(|i| a2[i] * a2[i] / (1.0 + u[i]).powi(2)).collect();

        let b: Vec<CMat> = phi.iter().map(|p| linalg::matmul(&t, p)).collect();
        let g = gram(&b);
        check_contractive(&g, &v)?;
        let tpt: Vec<CMat> = b.iter().map(|bk| linalg::matmul(bk, &t)).collect();
        let h = RMat::from_fn(k, k, |kk, l| linalg::re_trace_prod(&psi[kk], &tpt[l]) / (m * m));
        let f_lambda: Vec<f64> = b.iter().map(|bk| linalg::re_trace_prod(bk, &t) / m).collect();

        let a = RMat::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 } - g[(i, j)] * v[j]);
        let lu = a.clone().lu();
        let s = lu.solve(&g).ok_or_else(|| Error::Conditioning("I − F is singular".into()))?;
        let fl = RMat::from_column_slice(k, 1, &f_lambda);
        let dl = lu.solve(&fl).ok_or_else(|| Error::Conditioning("I − F is singular".into()))?;
        let mut w = s.clone();
        for i in 0..k {
            w.row_mut(i).scale_mut(v[i]);
            w[(i, i)] += 1.0;
        }
        let x = &h * &w;
        let e = &x + &s;

        let kappa: Vec<f64> = u.iter().map(|x| 1.0 - 1.0 / (1.0 + x).powi(2)).collect();
        // E_ki − a_k² κ_k S_ki without cancellation.
        let q = RMat::from_fn(k, k, |i, kk| x[(kk, i)] + (1.0 - a2[kk] * kappa[kk]) * s[(kk, i)]);
        let delta_tilde = (0..k).map(|i| x[(i, i)]).collect();
        let delta_e = (0..k).map(|i| e[(i, i)]).collect();

        Ok(DePoint {
            alpha: alpha_data.to_vec(),
            t,
            delta,
            u,
            v,
            g,
            h,
            x,
            f_lambda,
            a,
            s,
            e,
            delta_lambda: dl.iter().copied().collect(),
            delta_tilde,
            delta_e,
            q,
            kappa,
            residual: fp.residual,
            iterations: fp.iterations,
        })
    }

    pub fn k(&self) -> usize {
        self.delta.len()
    }

    /// WMMSE form `γ̄_k = p_k q_k / Σ_i C[(k, i)] p_i`.
    pub fn power_model(&self, rho: f64, reading: LambdaReading) -> PowerModel {
        let k = self.k();
        let m = self.t.nrows() as f64;
        let a2: Vec<f64> = self.alpha.iter().map(|a| a * a).collect();
        let q = (0..k)
            .map(|i| if self.alpha[i].abs() < ALPHA_NULL { 0.0 } else { a2[i] * a2[i] * self.delta[i].powi(2) })
            .collect();
        let c = RMat::from_fn(k, k, |kk, i| {
            let lead = (1.0 + self.u[kk]).powi(2);
            let wik = match reading {
                LambdaReading::PerUser => a2[i],
                LambdaReading::Leading => a2[kk],
            };
            let noise = lead * wik * self.delta_lambda[i] / ((1.0 + self.u[i]).powi(2) * m * rho);
            if i == kk {
                let abar2 = (1.0 - a2[kk]).max(0.0);
                a2[kk] * a2[kk] * self.delta_tilde[kk] + a2[kk] * abar2 * self.delta_e[kk] + noise
            } else {
                lead * a2[i] * self.q[(i, kk)] / (1.0 + self.u[i]).powi(2) + noise
            }
        });
        PowerModel { q, c }
    }

    /// Per-UE `[signal, variance, interference, innovation, noise]`, the
    /// numerator and the denominator terms of `γ̄_k`.
    pub fn terms(&self, p: &[f64], rho: f64, reading: LambdaReading) -> Vec<[f64; 5]> {
        let pm = self.power_model(rho, reading);
        let k = self.k();
        let m = self.t.nrows() as f64;
        (0..k)
            .map(|kk| {
                let a2 = self.alpha[kk].powi(2);
                let lead = (1.0 + self.u[kk]).powi(2);
                let noise: f64 = (0..k)
                    .map(|i| {
                        let wik = match reading {
                            LambdaReading::PerUser => self.alpha[i].powi(2),
                            LambdaReading::Leading => a2,
                        };
                        p[i] * lead * wik * self.delta_lambda[i] / ((1.0 + self.u[i]).powi(2) * m * rho)
                    })
                    .sum();
                let var = p[kk] * a2 * a2 * self.delta_tilde[kk];
                let innov = p[kk] * a2 * (1.0 - a2).max(0.0) * self.delta_e[kk];
                let inter = pm.denominator(p, kk) - var - innov - noise;
                [p[kk] * pm.q[kk], var, inter, innov, noise]
            })
            .collect()
    }

    pub fn sinr(&self, p: &[f64], rho: f64, reading: LambdaReading) -> Vec<f64> {
        self.power_model(rho, reading).sinr(p)
    }

    /// Deterministic power normalization `λ̄`.
    pub fn lambda_bar(&self, p: &[f64], p_max: f64) -> f64 {
        let m = self.t.nrows() as f64;
        let denom: f64 = (0..self.k())
            .map(|i| p[i] * self.alpha[i].powi(2) * self.delta_lambda[i] / (1.0 + self.u[i]).powi(2))
            .sum::<f64>()
            / m;
        p_max / denom
    }
}

/// `γ̄_k = p_k q_k / Σ_i c[(k, i)] p_i` with all dependence on p explicit.
#[derive(Debug, Clone)]
pub struct PowerModel {
    pub q: Vec<f64>,
    pub c: RMat,
}

impl PowerModel {
    pub fn denominator(&self, p: &[f64], k: usize) -> f64 {
        (0..p.len()).map(|i| self.c[(k, i)] * p[i]).sum()
    }

    pub fn sinr(&self, p: &[f64]) -> Vec<f64> {
        (0..self.q.len())
            .map(|k| {
                let num = p[k] * self.q[k];
                if num == 0.0 {
                    0.0
                } else {
                    num / self.denominator(p, k)
                }
            })
            .collect()
    }
}

/// DE quantities for every data symbol of the frame.
#[derive(Debug, Clone)]
pub struct DeFrame {
    pub points: Vec<DePoint>,
    /// `index[j]` is the point used at channel use `first_n + j`.
    pub index: Vec<usize>,
    pub first_n: usize,
    pub tau_c: usize,
    pub rho: f64,
    pub reading: LambdaReading,
}

impl DeFrame {
    /// Solves the DE for every data symbol. Symbols sharing the same
    /// coefficient vector share one solve; `warm` seeds the fixed points with
    /// a previous frame (e.g. at a nearby phase vector).
    pub fn solve(
        est: &EstimationModel,
        aging: &AgingProfile,
        cfg: &SystemConfig,
        settings: &DeSettings,
        warm: Option<&DeFrame>,
    ) -> Result<Self> {
        let first_n = cfg.first_data_index();
        let mut points: Vec<DePoint> = Vec::new();
        let mut index = Vec::with_capacity(cfg.data_len());
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let stride = settings.stride.max(1);
        let mut anchor = 0;
        for j in 0..cfg.data_len() {
            let n = first_n + j;
            if j % stride != 0 {
                index.push(anchor);
                continue;
            }
            let alpha = aging.data_alphas(n, cfg.tau_p);
            let key: Vec<u64> = alpha.iter().map(|a| a.to_bits()).collect();
            if let Some(&idx) = seen.get(&key) {
                anchor = idx;
                index.push(idx);
                continue;
            }
            let warm_delta = warm
                .and_then(|w| w.index.get(j).map(|&i| w.points[i].delta.clone()))
                .or_else(|| points.last().map(|p| p.delta.clone()));
            let point = DePoint::solve(&est.phi, &est.psi, &alpha, settings, warm_delta.as_deref())?;
            points.push(point);
            anchor = points.len() - 1;
            seen.insert(key, anchor);
            index.push(anchor);
        }
        Ok(DeFrame { points, index, first_n, tau_c: cfg.tau_c, rho: settings.rho, reading: settings.lambda_reading })
    }

    pub fn point_at(&self, n: usize) -> &DePoint {
        &self.points[self.index[n - self.first_n]]
    }

    /// `γ̄_{k,n}` for all data symbols; rows are channel uses.
    pub fn sinr_table(&self, p: &[f64]) -> Vec<Vec<f64>> {
        let per_point: Vec<Vec<f64>> = self.points.iter().map(|pt| pt.sinr(p, self.rho, self.reading)).collect();
        self.index.iter().map(|&i| per_point[i].clone()).collect()
    }

    /// `(1/τ_c) Σ_k Σ_n log2(1 + γ̄_{k,n})`.
    pub fn sum_se(&self, p: &[f64]) -> f64 {
        se_from_table(&self.sinr_table(p), self.tau_c)
    }

    pub fn max_residual(&self) -> f64 {
        self.points.iter().map(|p| p.residual).fold(0.0, f64::max)
    }
}

pub fn se_from_table(table: &[Vec<f64>], tau_c: usize) -> f64 {
    table.iter().flat_map(|row| row.iter()).map(|g| (1.0 + g).log2()).sum::<f64>() / tau_c as f64
}

/// `γ̄_{k,n}` at a single channel use.
pub fn de_sinr_at(
    n: usize,
    p: &[f64],
    est: &EstimationModel,
    aging: &AgingProfile,
    cfg: &SystemConfig,
) -> Result<Vec<f64>> {
    if n <= cfg.tau_p || n > cfg.tau_c {
        return Err(Error::Domain(format!("n = {n} is outside the data phase")));
    }
    if p.len() != cfg.k || p.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Domain("powers must be K nonnegative values".into()));
    }
    let settings = DeSettings::from_config(cfg);
    let alpha = aging.data_alphas(n, cfg.tau_p);
    let pt = DePoint::solve(&est.phi, &est.psi, &alpha, &settings, None)?;
    Ok(pt.sinr(p, settings.rho, settings.lambda_reading))
}

/// DE sum SE and the per-(n, k) SINR table.
pub fn de_sum_se(
    p: &[f64],
    est: &EstimationModel,
    aging: &AgingProfile,
    cfg: &SystemConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if p.len() != cfg.k || p.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Domain("powers must be K nonnegative values".into()));
    }
    let settings = DeSettings::from_config(cfg);
    let frame = DeFrame::solve(est, aging, cfg, &settings, None)?;
    let table = frame.sinr_table(p);
    Ok((se_from_table(&table, cfg.tau_c), table))
}
