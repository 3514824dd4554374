//! Sample-based evaluation of the achievable SINR with RZF or MRT precoding,
//! used as the reference for the deterministic equivalents.
//!
//! Per trial the channel at the estimation instant ζ is drawn, the pilot
//! observation is aged back to each UE's pilot slot, and the data-phase
//! channel is `h_{k,n} = α h_{k,ζ} + ᾱ ẽ_k`. The innovation `ẽ` is drawn once
//! per trial and reused for every n (common random numbers).
//!
//! With [`McNormalization::Average`] the terms are accumulated for the
//! unnormalized precoder together with `tr(P F^H F)`, and λ is applied once
//! the trials are in. Under per-realization normalization the fluctuation of
//! λ adds a variance term of order signal/M, which at high SNR stays
//! comparable to the noise for every M.

use std::collections::HashMap;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimation::EstimationModel;
use crate::fading::{complex_normal, AgingProfile, ChannelSampler};
use crate::linalg::{self, CMat};
use crate::scenario::{ChannelStatistics, McNormalization, SystemConfig};

/// Number of trial groups used for jackknife confidence intervals.
const GROUPS: usize = 20;

/// RNG for one trial: the ChaCha stream `trial` under key `base_seed`, so
/// nearby seeds never share trial streams.
pub fn trial_rng(base_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(trial);
    rng
}

thread_local! {
    static THREAD_LIMIT: std::cell::Cell<Option<usize>> = const { std::cell::Cell::new(None) };
}

/// Worker threads for trial groups: `RIS_DE_THREADS` if set, else the
/// available parallelism, further capped by [`with_thread_limit`].
pub fn thread_count() -> usize {
    let base = std::env::var("RIS_DE_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    THREAD_LIMIT.with(|l| l.get()).map_or(base, |cap| base.min(cap.max(1)))
}

/// Runs `f` with trial parallelism on this thread capped at `limit`. Results
/// do not depend on the thread count.
pub fn with_thread_limit<R>(limit: usize, f: impl FnOnce() -> R) -> R {
    let prev = THREAD_LIMIT.with(|l| l.replace(Some(limit)));
    let out = f();
    THREAD_LIMIT.with(|l| l.set(prev));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precoder {
    Rzf,
    Mrt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub half_width_95: f64,
    pub trials: usize,
    /// Signal power, variance term, interference, innovation term.
    pub per_term: [f64; 4],
}

/// RZF precoder `f_k = α_k sqrt(λ) Σ ĥ_k`, `Σ = (Ĥ A² Ĥ^H + Z + MαI)^{-1}`,
/// normalized so that `tr(P F^H F) = P_max`.
pub fn rzf_precoder(
    h_hat: &CMat,
    alpha_data: &[f64],
    p: &[f64],
    p_max: f64,
    reg_alpha: f64,
    z: Option<&CMat>,
) -> Result<CMat> {
    let f = rzf_direction(h_hat, alpha_data, reg_alpha, z)?;
    let k = f.ncols();
    normalize(f, p, p_max, k)
}

/// `Σ Ĥ A` before power normalization.
fn rzf_direction(h_hat: &CMat, alpha_data: &[f64], reg_alpha: f64, z: Option<&CMat>) -> Result<CMat> {
    let m = h_hat.nrows();
    let mut inv = CMat::identity(m, m).scale(m as f64 * reg_alpha);
    if let Some(z) = z {
        inv += z;
    }
    let mut scaled = h_hat.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= Complex64::new(alpha_data[j], 0.0);
    }
    inv += &scaled * scaled.adjoint();
    let sigma = linalg::inv_hpd(&inv)?;
    Ok(&sigma * &scaled)
}

/// MRT precoder `f_k ∝ α_k ĥ_k` under the same normalization.
pub fn mrt_precoder(h_hat: &CMat, alpha_data: &[f64], p: &[f64], p_max: f64) -> Result<CMat> {
    let mut f = h_hat.clone();
    for (j, mut col) in f.column_iter_mut().enumerate() {
        col *= Complex64::new(alpha_data[j], 0.0);
    }
    let k = f.ncols();
    normalize(f, p, p_max, k)
}

fn normalize(mut f: CMat, p: &[f64], p_max: f64, k: usize) -> Result<CMat> {
    let total: f64 = (0..k).map(|j| p[j] * f.column(j).norm_squared()).sum();
    if total <= 0.0 {
        return Ok(CMat::zeros(f.nrows(), k));
    }
    f *= Complex64::new((p_max / total).sqrt(), 0.0);
    Ok(f)
}

#[derive(Debug, Clone, Default)]
struct Acc {
    sig: Complex64,
    sig2: f64,
    inter: f64,
    innov: f64,
    /// `tr(P F^H F)` of the unnormalized precoder (average normalization).
    total: f64,
}

impl Acc {
    fn add(&mut self, o: &Acc) {
        self.sig += o.sig;
        self.sig2 += o.sig2;
        self.inter += o.inter;
        self.innov += o.innov;
        self.total += o.total;
    }
}

/// Accumulated expectations for a set of channel uses.
#[derive(Debug, Clone)]
pub struct McRun {
    /// Channel uses evaluated (1-based).
    pub ns: Vec<usize>,
    /// Point index per entry of `ns`.
    index: Vec<usize>,
    alphas: Vec<Vec<f64>>,
    p: Vec<f64>,
    noise: f64,
    p_max: f64,
    normalization: McNormalization,
    /// `groups[g][point][k]`.
    groups: Vec<Vec<Vec<Acc>>>,
    group_trials: Vec<usize>,
    pub trials: usize,
    pub tau_c: usize,
}

struct TrialContext<'a> {
    sampler: ChannelSampler,
    est: &'a EstimationModel,
    alpha_train: Vec<f64>,
    abar_train: Vec<f64>,
    noise_std: f64,
    reg_alpha: f64,
    z: Option<CMat>,
    p_max: f64,
    normalization: McNormalization,
}

/// Runs `trials` independent trials and accumulates the SINR expectations at
/// every channel use in `ns` (all data symbols when `None`).
#[allow(clippy::too_many_arguments)]
pub fn mc_run(
    stats: &ChannelStatistics,
    est: &EstimationModel,
    aging: &AgingProfile,
    cfg: &SystemConfig,
    p: &[f64],
    precoder: Precoder,
    trials: usize,
    seed: u64,
    ns: Option<&[usize]>,
) -> Result<McRun> {
    if trials == 0 {
        return Err(Error::Domain("at least one trial is required".into()));
    }
    if p.len() != cfg.k {
        return Err(Error::Dimension(format!("{} powers for K = {}", p.len(), cfg.k)));
    }
    let ns: Vec<usize> = match ns {
        Some(v) => v.to_vec(),
        None => (cfg.first_data_index()..=cfg.tau_c).collect(),
    };
    for &n in &ns {
        if n <= cfg.tau_p || n > cfg.tau_c {
            return Err(Error::Domain(format!("n = {n} is outside the data phase")));
        }
    }
    let mut alphas: Vec<Vec<f64>> = Vec::new();
    let mut index = Vec::with_capacity(ns.len());
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for &n in &ns {
        let a = aging.data_alphas(n, cfg.tau_p);
        let key: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
        let idx = *seen.entry(key).or_insert_with(|| {
            alphas.push(a);
            alphas.len() - 1
        });
        index.push(idx);
    }

    let zeta = cfg.first_data_index();
    let alpha_train: Vec<f64> = (0..cfg.k).map(|k| aging.alpha(k, zeta - cfg.pilot_slots[k])).collect();
    let ctx = TrialContext {
        sampler: ChannelSampler::new(stats),
        est,
        abar_train: alpha_train.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect(),
        alpha_train,
        noise_std: (cfg.noise_var_ul / cfg.p_pilot).sqrt(),
        reg_alpha: cfg.reg_alpha,
        z: if cfg.z.is_zero() { None } else { Some(cfg.z.matrix(cfg.m)) },
        p_max: cfg.p_max,
        normalization: cfg.mc_normalization,
    };

    let n_groups = GROUPS.min(trials);
    let bounds: Vec<(usize, usize)> =
        (0..n_groups).map(|g| (g * trials / n_groups, (g + 1) * trials / n_groups)).collect();
    let workers = thread_count().min(n_groups).max(1);
    let mut groups: Vec<Option<Result<Vec<Vec<Acc>>>>> = (0..n_groups).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<&mut [Option<Result<Vec<Vec<Acc>>>>]> = {
            let per = n_groups.div_ceil(workers);
            groups.chunks_mut(per).collect()
        };
        let per = n_groups.div_ceil(workers);
        for (c, chunk) in chunks.into_iter().enumerate() {
            let ctx = &ctx;
            let alphas = &alphas;
            let bounds = &bounds;
            scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    let (lo, hi) = bounds[c * per + off];
                    *slot = Some(run_group(ctx, alphas, p, precoder, seed, lo, hi));
                }
            });
        }
    });
    let groups: Vec<Vec<Vec<Acc>>> = groups.into_iter().map(|g| g.expect("group evaluated")).collect::<Result<_>>()?;
    Ok(McRun {
        ns,
        index,
        alphas,
        p: p.to_vec(),
        noise: cfg.noise_var_dl,
        p_max: cfg.p_max,
        normalization: cfg.mc_normalization,
        groups,
        group_trials: bounds.iter().map(|(lo, hi)| hi - lo).collect(),
        trials,
        tau_c: cfg.tau_c,
    })
}

fn run_group(
    ctx: &TrialContext,
    alphas: &[Vec<f64>],
    p: &[f64],
    precoder: Precoder,
    seed: u64,
    lo: usize,
    hi: usize,
) -> Result<Vec<Vec<Acc>>> {
    let k = p.len();
    let mut acc = vec![vec![Acc::default(); k]; alphas.len()];
    for trial in lo..hi {
        let mut rng = trial_rng(seed, trial as u64);
        let h_zeta = ctx.sampler.sample(&mut rng);
        let e_train = ctx.sampler.sample(&mut rng);
        let m = h_zeta.nrows();
        let w = complex_normal(&mut rng, m, k);
        let e_data = ctx.sampler.sample(&mut rng);
        let mut h_hat = CMat::zeros(m, k);
        for u in 0..k {
            let y = h_zeta.column(u) * Complex64::new(ctx.alpha_train[u], 0.0)
                + e_train.column(u) * Complex64::new(ctx.abar_train[u], 0.0)
                + w.column(u) * Complex64::new(ctx.noise_std, 0.0);
            h_hat.set_column(u, &(&ctx.est.filter[u] * y));
        }
        let gram = h_hat.adjoint() * &h_hat;
        let x = h_zeta.adjoint() * &h_hat;
        let y = e_data.adjoint() * &h_hat;
        for (j, a) in alphas.iter().enumerate() {
            // Coefficients c with F = Ĥ c.
            let coeff = match (precoder, &ctx.z) {
                (Precoder::Mrt, _) => CMat::from_diagonal(&a.iter().map(|&x| Complex64::new(x, 0.0)).collect::<Vec<_>>().into()),
                (Precoder::Rzf, None) => {
                    let mut inner = gram.clone();
                    for r in 0..k {
                        for c in 0..k {
                            inner[(r, c)] *= a[r] * a[r];
                        }
                        inner[(r, r)] += m as f64 * ctx.reg_alpha;
                    }
                    // Σ Ĥ = Ĥ (A² Ĥ^H Ĥ + MαI)^{-1}.
                    let winv = inner.try_inverse().ok_or_else(|| Error::Conditioning("singular RZF core".into()))?;
                    let mut c = winv;
                    for (col, mut cc) in c.column_iter_mut().enumerate() {
                        cc *= Complex64::new(a[col], 0.0);
                    }
                    c
                }
                (Precoder::Rzf, Some(z)) => {
                    let f = rzf_direction(&h_hat, a, ctx.reg_alpha, Some(z))?;
                    let total: f64 = (0..k).map(|u| p[u] * f.column(u).norm_squared()).sum();
                    let g = accumulate(&h_zeta.adjoint() * &f, &e_data.adjoint() * &f, a, p, ctx.trial_scale(total), total);
                    add_trial(&mut acc[j], g);
                    continue;
                }
            };
            let fnorm = coeff.adjoint() * &gram * &coeff;
            let total: f64 = (0..k).map(|u| p[u] * fnorm[(u, u)].re).sum();
            let gamma = &x * &coeff;
            let xi = &y * &coeff;
            let g = accumulate(gamma, xi, a, p, ctx.trial_scale(total), total);
            add_trial(&mut acc[j], g);
        }
    }
    Ok(acc)
}

impl TrialContext<'_> {
    /// λ applied inside a trial: the realization's own under per-realization
    /// normalization, 1 when λ is applied after averaging.
    fn trial_scale(&self, total: f64) -> f64 {
        match self.normalization {
            McNormalization::Average => 1.0,
            McNormalization::PerRealization if total > 0.0 => self.p_max / total,
            McNormalization::PerRealization => 0.0,
        }
    }
}

/// Per-trial terms for `h_ζ^H F = gamma`, `ẽ^H F = xi` of the unnormalized
/// precoder scaled by `sqrt(lam)`; `total = tr(P F^H F)` before scaling.
fn accumulate(gamma: CMat, xi: CMat, a: &[f64], p: &[f64], lam: f64, total: f64) -> Vec<Acc> {
    let k = a.len();
    let s = lam.sqrt();
    (0..k)
        .map(|u| {
            let ab = (1.0 - a[u] * a[u]).max(0.0).sqrt();
            let g_uu = gamma[(u, u)] * s;
            let mut inter = 0.0;
            for i in 0..k {
                if i != u {
                    let z = (gamma[(u, i)] * a[u] + xi[(u, i)] * ab) * s;
                    inter += p[i] * z.norm_sqr();
                }
            }
            Acc { sig: g_uu, sig2: g_uu.norm_sqr(), inter, innov: (xi[(u, u)] * s).norm_sqr(), total }
        })
        .collect()
}

fn add_trial(acc: &mut [Acc], trial: Vec<Acc>) {
    for (a, t) in acc.iter_mut().zip(&trial) {
        a.add(t);
    }
}

impl McRun {
    fn totals(&self, skip: Option<usize>) -> (Vec<Vec<Acc>>, usize) {
        let npts = self.alphas.len();
        let k = self.p.len();
        let mut tot = vec![vec![Acc::default(); k]; npts];
        let mut count = 0;
        for (g, grp) in self.groups.iter().enumerate() {
            if Some(g) == skip {
                continue;
            }
            count += self.group_trials[g];
            for (tp, gp) in tot.iter_mut().zip(grp) {
                for (a, b) in tp.iter_mut().zip(gp) {
                    a.add(b);
                }
            }
        }
        (tot, count)
    }

    /// λ still to be applied to accumulated means.
    fn late_scale(&self, acc: &[Acc], count: usize) -> f64 {
        match self.normalization {
            McNormalization::PerRealization => 1.0,
            McNormalization::Average => {
                let mean_total = acc.first().map_or(0.0, |a| a.total / count as f64);
                if mean_total > 0.0 {
                    self.p_max / mean_total
                } else {
                    0.0
                }
            }
        }
    }

    /// `[signal, variance, interference, innovation]` of UE u.
    fn user_parts(&self, a: &Acc, count: usize, alpha: f64, u: usize, lam: f64) -> [f64; 4] {
        let nt = count as f64;
        let a2 = alpha * alpha;
        let mean = a.sig / nt;
        [
            lam * a2 * self.p[u] * mean.norm_sqr(),
            lam * a2 * self.p[u] * (a.sig2 / nt - mean.norm_sqr()).max(0.0),
            lam * a.inter / nt,
            lam * (1.0 - a2).max(0.0) * self.p[u] * a.innov / nt,
        ]
    }

    fn sinr_terms(&self, acc: &[Acc], count: usize, alpha: &[f64]) -> (Vec<f64>, [f64; 4]) {
        let lam = self.late_scale(acc, count);
        let mut terms = [0.0; 4];
        let sinr = acc
            .iter()
            .enumerate()
            .map(|(u, a)| {
                let [sig, var, inter, innov] = self.user_parts(a, count, alpha[u], u, lam);
                terms[0] += sig;
                terms[1] += var;
                terms[2] += inter;
                terms[3] += innov;
                if sig == 0.0 {
                    0.0
                } else {
                    sig / (var + inter + innov + self.noise)
                }
            })
            .collect();
        (sinr, terms)
    }

    fn table_from(&self, skip: Option<usize>) -> (Vec<Vec<f64>>, [f64; 4]) {
        let (tot, count) = self.totals(skip);
        let per_point: Vec<(Vec<f64>, [f64; 4])> =
            tot.iter().zip(&self.alphas).map(|(acc, a)| self.sinr_terms(acc, count, a)).collect();
        let mut terms = [0.0; 4];
        for &i in &self.index {
            for t in 0..4 {
                terms[t] += per_point[i].1[t] / self.index.len() as f64;
            }
        }
        (self.index.iter().map(|&i| per_point[i].0.clone()).collect(), terms)
    }

    /// Per-UE `[signal, variance, interference, innovation, noise]` at the
    /// j-th evaluated channel use, all in received power units.
    pub fn user_terms(&self, j: usize) -> Vec<[f64; 5]> {
        let (tot, count) = self.totals(None);
        let pt = self.index[j];
        let alpha = &self.alphas[pt];
        let lam = self.late_scale(&tot[pt], count);
        tot[pt]
            .iter()
            .enumerate()
            .map(|(u, a)| {
                let [sig, var, inter, innov] = self.user_parts(a, count, alpha[u], u, lam);
                [sig, var, inter, innov, self.noise]
            })
            .collect()
    }

    /// SINR per evaluated channel use (rows) and UE (columns).
    pub fn sinr_table(&self) -> Vec<Vec<f64>> {
        self.table_from(None).0
    }

    fn jackknife<F: Fn(&Vec<Vec<f64>>) -> f64>(&self, f: F) -> (f64, f64) {
        let full = f(&self.table_from(None).0);
        let b = self.groups.len();
        if b < 2 {
            return (full, 0.0);
        }
        let loo: Vec<f64> = (0..b).map(|g| f(&self.table_from(Some(g)).0)).collect();
        let mean = loo.iter().sum::<f64>() / b as f64;
        let var = (b as f64 - 1.0) / b as f64 * loo.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        (full, 1.96 * var.sqrt())
    }

    /// `(1/τ_c) Σ_n Σ_k log2(1 + SINR)` over the evaluated channel uses.
    pub fn sum_se(&self) -> McEstimate {
        let tau_c = self.tau_c as f64;
        let (mean, hw) = self.jackknife(|t| {
            t.iter().flat_map(|r| r.iter()).map(|g| (1.0 + g).log2()).sum::<f64>() / tau_c
        });
        McEstimate { mean, half_width_95: hw, trials: self.trials, per_term: self.table_from(None).1 }
    }

    /// `Σ_k log2(1 + SINR)` at the j-th evaluated channel use, without pre-log.
    pub fn se_at(&self, j: usize) -> McEstimate {
        let (mean, hw) = self.jackknife(|t| t[j].iter().map(|g| (1.0 + g).log2()).sum());
        McEstimate { mean, half_width_95: hw, trials: self.trials, per_term: self.table_from(None).1 }
    }

    /// Per-UE SINR estimates at the j-th evaluated channel use.
    pub fn sinr_at(&self, j: usize) -> Vec<McEstimate> {
        let k = self.p.len();
        let terms = self.table_from(None).1;
        (0..k)
            .map(|u| {
                let (mean, hw) = self.jackknife(|t| t[j][u]);
                McEstimate { mean, half_width_95: hw, trials: self.trials, per_term: terms }
            })
            .collect()
    }
}

/// Per-UE SINR at channel use n.
#[allow(clippy::too_many_arguments)]
pub fn mc_sinr(
    n: usize,
    p: &[f64],
    stats: &ChannelStatistics,
    est: &EstimationModel,
    aging: &AgingProfile,
    cfg: &SystemConfig,
    trials: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    let run = mc_run(stats, est, aging, cfg, p, Precoder::Rzf, trials, seed, Some(&[n]))?;
    Ok(run.sinr_at(0))
}

/// Sum SE over the data phase with RZF precoding.
pub fn mc_sum_se(
    p: &[f64],
    stats: &ChannelStatistics,
    est: &EstimationModel,
    aging: &AgingProfile,
    cfg: &SystemConfig,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    Ok(mc_run(stats, est, aging, cfg, p, Precoder::Rzf, trials, seed, None)?.sum_se())
}

/// Sum SE over the data phase with MRT precoding.
pub fn mrt_baseline(
    p: &[f64],
    stats: &ChannelStatistics,
    est: &EstimationModel,
    aging: &AgingProfile,
    cfg: &SystemConfig,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    Ok(mc_run(stats, est, aging, cfg, p, Precoder::Mrt, trials, seed, None)?.sum_se())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_estimate_gives_zero_precoder() {
        let f = rzf_precoder(&CMat::zeros(4, 2), &[1.0, 1.0], &[1.0, 1.0], 1.0, 0.1, None).unwrap();
        assert_eq!(linalg::max_abs(&f), 0.0);
    }

    #[test]
    fn rzf_meets_power_budget() {
        let mut rng = trial_rng(7, 0);
        for _ in 0..10 {
            let h = complex_normal(&mut rng, 6, 3);
            let p = [0.2, 0.5, 0.3];
            let f = rzf_precoder(&h, &[0.9, 0.8, 0.7], &p, 2.0, 0.05, None).unwrap();
            let used: f64 = (0..3).map(|k| p[k] * f.column(k).norm_squared()).sum();
            assert!((used - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rzf_single_user_closed_form() {
        let mut rng = trial_rng(3, 1);
        let h = complex_normal(&mut rng, 2, 1);
        let (a, reg) = (0.8, 0.3);
        let f = rzf_precoder(&h, &[a], &[1.0], 1.0, reg, None).unwrap();
        // (a² h h^H + Mα I)^{-1} h = h / (a²‖h‖² + Mα).
        let dir = h.scale(a / (a * a * h.norm_squared() + 2.0 * reg));
        let expect = dir.unscale(dir.norm());
        assert!(linalg::max_abs_diff(&f, &expect) < 1e-12);
    }
}
