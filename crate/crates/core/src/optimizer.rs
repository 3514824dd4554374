//! Alternating optimization of the RIS phases and the power split.
//!
//! The phase block is projected gradient ascent on the DE sum SE with an
//! Armijo backtracking search. The power block is weighted MMSE over every
//! (k, n) pair of the frame, with a shared power vector; the frame is solved
//! once per block since p only enters the SINR assembly.

use std::sync::Arc;

use num_complex::Complex64;

use crate::de::{DeFrame, DeSettings, PowerModel};
use crate::error::{Error, Result};
use crate::estimation::EstimationModel;
use crate::fading::AgingProfile;
use crate::gradients::{grad_frame, PhaseGradient};
use crate::linalg::CVec;
use crate::scenario::{ChannelStatistics, LargeScale, SystemConfig};

pub const LS_BETA: f64 = 0.5;
pub const LS_ARMIJO: f64 = 1e-4;
pub const LS_MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone)]
pub struct OptState {
    pub c: CVec,
    pub p: Vec<f64>,
    pub objective: f64,
    /// `(iteration, objective)` after each iteration; entry 0 is the start.
    pub trace: Vec<(usize, f64)>,
    /// `(c, p)` after each outer iteration; PGA keeps only its final point.
    pub iterates: Vec<(CVec, Vec<f64>)>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct OptOptions {
    /// PGA stops once the objective gains less than this (bits/s/Hz).
    pub pga_eps: f64,
    pub pga_max_iter: usize,
    /// AO stops once the relative objective change drops below this.
    pub ao_tol: f64,
    pub ao_max_iter: usize,
    /// WMMSE stops once p changes by less than this, relatively.
    pub wmmse_tol: f64,
    pub wmmse_max_iter: usize,
}

impl Default for OptOptions {
    fn default() -> Self {
        OptOptions { pga_eps: 1e-4, pga_max_iter: 30, ao_tol: 1e-4, ao_max_iter: 50, wmmse_tol: 1e-8, wmmse_max_iter: 200 }
    }
}

/// `x_l/|x_l|`, with near-zero entries mapped to 1.
pub fn project_unit_modulus(x: &CVec) -> CVec {
    x.map(|z| {
        let r = z.norm();
        if r < 1e-300 {
            Complex64::new(1.0, 0.0)
        } else {
            z / r
        }
    })
}

#[derive(Debug, Clone)]
pub struct LineSearch<T> {
    /// Accepted step, 0 when no step satisfied the sufficient-increase test.
    pub step: f64,
    pub value: f64,
    pub c: CVec,
    /// Whatever the objective returned alongside the accepted value.
    pub payload: Option<T>,
}

/// Largest `μ = mu0 β^m`, m = 0..30, with
/// `f(proj(c + μq)) ≥ f(c) + 1e-4 μ ‖q‖²`.
pub fn backtracking_search<T, F>(mut f: F, c: &CVec, q: &CVec, f0: f64, mu0: f64) -> Result<LineSearch<T>>
where
    F: FnMut(&CVec) -> Result<(f64, T)>,
{
    let qn = q.norm_squared();
    let mut mu = mu0;
    for _ in 0..=LS_MAX_HALVINGS {
        let cand = project_unit_modulus(&(c + q * Complex64::new(mu, 0.0)));
        let (val, payload) = f(&cand)?;
        if val.is_finite() && val >= f0 + LS_ARMIJO * mu * qn {
            return Ok(LineSearch { step: mu, value: val, c: cand, payload: Some(payload) });
        }
        mu *= LS_BETA;
    }
    Ok(LineSearch { step: 0.0, value: f0, c: c.clone(), payload: None })
}

/// Everything derived from one phase vector.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub stats: ChannelStatistics,
    pub est: EstimationModel,
    pub frame: DeFrame,
}

impl Evaluation {
    pub fn sum_se(&self, p: &[f64]) -> f64 {
        self.frame.sum_se(p)
    }
}

/// Fixed scenario data shared by all evaluations.
#[derive(Debug, Clone)]
pub struct Problem {
    pub large: Arc<LargeScale>,
    pub cfg: SystemConfig,
    pub aging: AgingProfile,
    pub settings: DeSettings,
}

impl Problem {
    pub fn new(large: Arc<LargeScale>, cfg: &SystemConfig, aging: AgingProfile) -> Self {
        Problem { large, cfg: cfg.clone(), aging, settings: DeSettings::from_config(cfg) }
    }

    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        Ok(Self::new(Arc::new(LargeScale::from_config(cfg)?), cfg, AgingProfile::from_config(cfg)))
    }

    pub fn evaluate(&self, c: &CVec, warm: Option<&DeFrame>) -> Result<Evaluation> {
        let stats = ChannelStatistics::new(self.large.clone(), c.clone())?;
        let est = EstimationModel::new(&stats, &self.cfg, &self.aging)?;
        let frame = DeFrame::solve(&est, &self.aging, &self.cfg, &self.settings, warm)?;
        Ok(Evaluation { stats, est, frame })
    }

    pub fn gradient(&self, ev: &Evaluation, p: &[f64]) -> Result<PhaseGradient> {
        grad_frame(&ev.frame, p, &ev.stats, &ev.est)
    }

    pub fn equal_power(&self) -> Vec<f64> {
        vec![self.cfg.p_max / self.cfg.k as f64; self.cfg.k]
    }
}

/// Projected gradient ascent on the phases for fixed powers, starting at
/// `start` (or `e^{jπ/2}` everywhere).
pub fn pga_rbm(
    problem: &Problem,
    p: &[f64],
    start: Option<(&CVec, &Evaluation)>,
    eps: f64,
    max_iter: usize,
) -> Result<(OptState, Evaluation)> {
    if !(eps > 0.0) {
        return Err(Error::Domain("PGA tolerance must be positive".into()));
    }
    let (mut c, mut ev) = match start {
        Some((c, ev)) => (c.clone(), ev.clone()),
        None => {
            let c = crate::scenario::initial_theta(problem.cfg.l);
            let ev = problem.evaluate(&c, None)?;
            (c, ev)
        }
    };
    let mut value = ev.sum_se(p);
    let mut trace = vec![(0, value)];
    let mut converged = false;
    let mut last_step: Option<f64> = None;
    for it in 1..=max_iter {
        let grad = problem.gradient(&ev, p)?;
        let q = grad.riemannian;
        let qmax = q.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if qmax == 0.0 {
            trace.push((it, value));
            converged = true;
            break;
        }
        // First step moves the largest coordinate by about one radian; later
        // ones start from twice the last accepted step.
        let mu0 = last_step.map(|s| 2.0 * s).unwrap_or(1.0 / qmax);
        let warm = ev.frame.clone();
        let ls = backtracking_search(|cand| {
            let e = problem.evaluate(cand, Some(&warm))?;
            Ok((e.sum_se(p), e))
        }, &c, &q, value, mu0)?;
        let gain = ls.value - value;
        if ls.step == 0.0 {
            trace.push((it, value));
            converged = true;
            break;
        }
        last_step = Some(ls.step);
        c = ls.c;
        ev = ls.payload.expect("accepted step carries its evaluation");
        value = ls.value;
        trace.push((it, value));
        if gain < eps {
            converged = true;
            break;
        }
    }
    let iterates = vec![(c.clone(), p.to_vec())];
    Ok((OptState { c, p: p.to_vec(), objective: value, trace, iterates, converged }, ev))
}

/// `v_k = sqrt(p_k q_k)/(p_k q_k + Σ_i p_i C_ki)`.
pub fn wmmse_v(p: &[f64], model: &PowerModel) -> Vec<f64> {
    (0..p.len())
        .map(|k| {
            let s = p[k] * model.q[k];
            if s <= 0.0 {
                return 0.0;
            }
            s.sqrt() / (s + model.denominator(p, k))
        })
        .collect()
}

/// MSE `e_k = 1 − 2 v_k sqrt(p_k q_k) + v_k² (p_k q_k + Σ_i p_i C_ki)`.
pub fn wmmse_e(p: &[f64], v: &[f64], model: &PowerModel) -> Vec<f64> {
    (0..p.len())
        .map(|k| {
            let s = p[k] * model.q[k];
            1.0 - 2.0 * v[k] * s.max(0.0).sqrt() + v[k] * v[k] * (s + model.denominator(p, k))
        })
        .collect()
}

/// `d_k = 1/e_k`.
pub fn wmmse_d(e: &[f64]) -> Result<Vec<f64>> {
    e.iter()
        .map(|&x| if x > 0.0 { Ok(1.0 / x) } else { Err(Error::Domain(format!("MSE {x} is not positive"))) })
        .collect()
}

/// Power update for weighted terms `(w_j, v_j, d_j, model_j)`: minimizes
/// `Σ_j w_j Σ_k d_jk e_jk(p)` subject to `Σ p ≤ P_max`. Without an active
/// budget this is `p_k = (Σ w d v √q)² / (Σ w (d v² q + Σ_i d_i v_i² C_ik))²`;
/// otherwise a multiplier found by bisection is added to the denominator.
pub fn wmmse_p_weighted(terms: &[(f64, &[f64], &[f64], &PowerModel)], k: usize, p_max: f64) -> Vec<f64> {
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for &(w, v, d, model) in terms {
        for kk in 0..k {
            num[kk] += w * d[kk] * v[kk] * model.q[kk].max(0.0).sqrt();
            let mut s = d[kk] * v[kk] * v[kk] * model.q[kk];
            for i in 0..k {
                s += d[i] * v[i] * v[i] * model.c[(i, kk)];
            }
            den[kk] += w * s;
        }
    }
    let power = |mu: f64| -> Vec<f64> {
        (0..k)
            .map(|kk| {
                let dd = den[kk] + mu;
                if num[kk] <= 0.0 {
                    0.0
                } else if dd <= 0.0 {
                    p_max
                } else {
                    ((num[kk] / dd).powi(2)).min(p_max)
                }
            })
            .collect()
    };
    let p0 = power(0.0);
    if p0.iter().sum::<f64>() <= p_max {
        return p0;
    }
    let mut lo = 0.0;
    let mut hi = den.iter().fold(1e-300f64, |m, &x| m.max(x.abs()));
    while power(hi).iter().sum::<f64>() > p_max {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if power(mid).iter().sum::<f64>() > p_max {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    power(hi)
}

/// Single-term power update.
pub fn wmmse_p(v: &[f64], d: &[f64], model: &PowerModel, p_max: f64) -> Vec<f64> {
    wmmse_p_weighted(&[(1.0, v, d, model)], v.len(), p_max)
}

/// Σ over frame points of `multiplicity × Σ_k d_k e_k`.
fn weighted_mse(models: &[(f64, PowerModel)], p: &[f64], vs: &[Vec<f64>], ds: &[Vec<f64>]) -> f64 {
    models
        .iter()
        .zip(vs.iter().zip(ds))
        .map(|((w, m), (v, d))| w * wmmse_e(p, v, m).iter().zip(d).map(|(e, dk)| e * dk).sum::<f64>())
        .sum()
}

/// WMMSE power allocation on a solved frame. Returns the powers and the
/// objective after each sweep.
pub fn wmmse_power(frame: &DeFrame, p0: &[f64], p_max: f64, tol: f64, max_iter: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = p0.len();
    let mut counts = vec![0usize; frame.points.len()];
    for &i in &frame.index {
        counts[i] += 1;
    }
    let models: Vec<(f64, PowerModel)> = frame
        .points
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(pt, &c)| (c as f64, pt.power_model(frame.rho, frame.reading)))
        .collect();
    let mut p = p0.to_vec();
    let mut history = vec![frame.sum_se(&p)];
    for _ in 0..max_iter {
        let vs: Vec<Vec<f64>> = models.iter().map(|(_, m)| wmmse_v(&p, m)).collect();
        let es: Vec<Vec<f64>> = models.iter().zip(&vs).map(|((_, m), v)| wmmse_e(&p, v, m)).collect();
        // Terms with zero signal have e = 1 and any positive weight works.
        let ds: Vec<Vec<f64>> = es.iter().map(|e| wmmse_d(e)).collect::<Result<_>>()?;
        let terms: Vec<(f64, &[f64], &[f64], &PowerModel)> =
            models.iter().zip(vs.iter().zip(&ds)).map(|((w, m), (v, d))| (*w, v.as_slice(), d.as_slice(), m)).collect();
        let next = wmmse_p_weighted(&terms, k, p_max);
        debug_assert!(weighted_mse(&models, &next, &vs, &ds) <= weighted_mse(&models, &p, &vs, &ds) * (1.0 + 1e-12));
        let change = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            / p.iter().fold(1e-300f64, |m, &x| m.max(x));
        p = next;
        history.push(frame.sum_se(&p));
        if change < tol {
            break;
        }
    }
    Ok((p, history))
}

/// Alternates PGA on the phases and WMMSE on the powers, starting from
/// `P_max/K` each and `c0` (default `e^{jπ/2}` everywhere). Returns the best
/// iterate; `trace` holds the objective after each outer iteration.
pub fn alternating_optimize(problem: &Problem, c0: Option<&CVec>, opts: &OptOptions) -> Result<OptState> {
    let mut p = problem.equal_power();
    let c_start = c0.cloned().unwrap_or_else(|| crate::scenario::initial_theta(problem.cfg.l));
    let mut c = c_start;
    let mut ev = problem.evaluate(&c, None)?;
    let mut value = ev.sum_se(&p);
    let mut trace = vec![(0, value)];
    let mut iterates = vec![(c.clone(), p.clone())];
    let mut converged = false;
    for it in 1..=opts.ao_max_iter {
        let prev = value;
        let (state, new_ev) = pga_rbm(problem, &p, Some((&c, &ev)), opts.pga_eps, opts.pga_max_iter)?;
        c = state.c;
        ev = new_ev;
        let (p_new, hist) = wmmse_power(&ev.frame, &p, problem.cfg.p_max, opts.wmmse_tol, opts.wmmse_max_iter)?;
        let after = *hist.last().expect("history starts with the initial value");
        // WMMSE is a block ascent on an equivalent problem; keep the old
        // split if rounding says otherwise.
        if after >= state.objective {
            p = p_new;
            value = after;
        } else {
            value = state.objective;
        }
        trace.push((it, value));
        iterates.push((c.clone(), p.clone()));
        if (value - prev).abs() <= opts.ao_tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(OptState { c, p, objective: value, trace, iterates, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RMat;
    use crate::scenario::{RisCorrelation, Scale};

    #[test]
    fn projection_cases() {
        let x = CVec::from_vec(vec![Complex64::new(2.0, 0.0), Complex64::new(1.0, 1.0), Complex64::new(0.0, 0.0)]);
        let y = project_unit_modulus(&x);
        assert_eq!(y[0], Complex64::new(1.0, 0.0));
        assert!((y[1] - Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4)).norm() < 1e-15);
        assert_eq!(y[2], Complex64::new(1.0, 0.0));
        let u = CVec::from_vec(vec![Complex64::from_polar(1.0, 0.3), Complex64::from_polar(1.0, -2.0)]);
        assert!((project_unit_modulus(&u) - &u).norm() < 1e-15);
    }

    #[test]
    fn line_search_on_synthetic_objective() {
        // f(c) = Re(conj(t)·c) on the unit circle, maximized at c = t.
        let t = Complex64::from_polar(1.0, 1.0);
        let f = |c: &CVec| -> Result<(f64, ())> { Ok(((t.conj() * c[0]).re, ())) };
        let c = CVec::from_element(1, Complex64::new(1.0, 0.0));
        let f0 = f(&c).unwrap().0;
        let q = crate::gradients::tangent_projection(&CVec::from_element(1, t * 0.5), &c);
        let ls = backtracking_search(f, &c, &q, f0, 4.0).unwrap();
        assert!(ls.step > 0.0 && ls.value > f0);
        // At the maximizer a radial direction cannot pass the Armijo test.
        let at_opt = CVec::from_element(1, t);
        let stall = backtracking_search(f, &at_opt, &CVec::from_element(1, t), 1.0, 1.0).unwrap();
        assert_eq!(stall.step, 0.0);
    }

    fn model(q: Vec<f64>, c: RMat) -> PowerModel {
        PowerModel { q, c }
    }

    #[test]
    fn wmmse_identities() {
        let m = model(vec![2.0, 1.5, 0.7], RMat::from_row_slice(3, 3, &[0.3, 0.1, 0.2, 0.05, 0.4, 0.1, 0.2, 0.2, 0.9]));
        let p = [0.4, 1.1, 0.6];
        let v = wmmse_v(&p, &m);
        let e = wmmse_e(&p, &v, &m);
        let g = m.sinr(&p);
        let d = wmmse_d(&e).unwrap();
        for k in 0..3 {
            assert!((e[k] - 1.0 / (1.0 + g[k])).abs() < 1e-12);
            assert!((d[k] - (1.0 + g[k])).abs() < 1e-12);
        }
        assert_eq!(wmmse_v(&[0.0, 1.0, 1.0], &m)[0], 0.0);
        assert!((wmmse_d(&[1.0]).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!((wmmse_d(&[0.25]).unwrap()[0] - 4.0).abs() < 1e-15);
        assert!(wmmse_d(&[0.0]).is_err());
        // Scalar algebra.
        let s = model(vec![3.0], RMat::from_element(1, 1, 3.0));
        let v1 = wmmse_v(&[0.5], &s)[0];
        assert!((v1 - (1.5f64).sqrt() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn power_update_decreases_weighted_mse() {
        let mut rng = crate::montecarlo::trial_rng(21, 0);
        use rand::Rng;
        for _ in 0..50 {
            let k = 4;
            let m = model(
                (0..k).map(|_| rng.gen_range(0.1..2.0)).collect(),
                RMat::from_fn(k, k, |_, _| rng.gen_range(0.0..1.0)),
            );
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..0.5)).collect();
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total.max(1.0)).collect();
            let v = wmmse_v(&p, &m);
            let d = wmmse_d(&wmmse_e(&p, &v, &m)).unwrap();
            let obj = |pp: &[f64]| wmmse_e(pp, &v, &m).iter().zip(&d).map(|(e, dk)| e * dk).sum::<f64>();
            let next = wmmse_p(&v, &d, &m, 1.0);
            assert!(next.iter().sum::<f64>() <= 1.0 + 1e-9);
            assert!(obj(&next) <= obj(&p) + 1e-12);
        }
        let sym = model(vec![1.0; 3], RMat::from_element(3, 3, 0.2));
        let p = [0.2, 0.2, 0.2];
        let v = wmmse_v(&p, &sym);
        let d = wmmse_d(&wmmse_e(&p, &v, &sym)).unwrap();
        let next = wmmse_p(&v, &d, &sym, 1.0);
        assert!((next[0] - next[1]).abs() < 1e-14 && (next[1] - next[2]).abs() < 1e-14);
    }

    fn toy_problem(l: usize, k: usize, m: usize, corr: RisCorrelation) -> Problem {
        let mut cfg = SystemConfig::defaults(Scale::Desk).resized(m, l, k);
        cfg.tau_p = k;
        cfg.tau_c = k + 4;
        cfg.ris_correlation = corr;
        Problem::from_config(&cfg).unwrap()
    }

    #[test]
    fn identity_ris_correlation_stops_immediately() {
        let prob = toy_problem(4, 2, 4, RisCorrelation::Identity);
        let p = prob.equal_power();
        let (state, _) = pga_rbm(&prob, &p, None, 1e-9, 20).unwrap();
        assert!(state.trace.len() <= 2);
        assert!((state.objective - state.trace[0].1).abs() < 1e-12);
    }

    #[test]
    fn pga_matches_grid_search_for_one_element() {
        let prob = toy_problem(1, 1, 2, RisCorrelation::Sinc);
        let p = prob.equal_power();
        let (state, _) = pga_rbm(&prob, &p, None, 1e-12, 200).unwrap();
        for w in state.trace.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
        assert!((state.c[0].norm() - 1.0).abs() < 1e-12);
        let best = (0..4096)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / 4096.0;
                let c = CVec::from_element(1, Complex64::from_polar(1.0, th));
                prob.evaluate(&c, None).unwrap().sum_se(&p)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(state.objective >= best - 1e-3, "{} vs {}", state.objective, best);
    }
}
