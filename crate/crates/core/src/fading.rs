//! Spatial correlation, the LoS BS–RIS channel, Jakes temporal correlation
//! and sampled (aged) channel realizations.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, CVec};
use crate::scenario::{ChannelStatistics, DopplerConvention, SystemConfig};

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 8.0 {
        j0_series(ax)
    } else if ax <= 25.0 {
        j0_miller(ax)
    } else {
        j0_asymptotic(ax)
    }
}

fn j0_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut m = 1.0;
    loop {
        term *= -q / (m * m);
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-3) && m > q.sqrt() {
            break;
        }
        m += 1.0;
    }
    sum
}

// Backward recurrence normalized with 1 = J0 + 2 Σ J_2k. The asymptotic
// series is not yet accurate to 1e-12 in this range.
fn j0_miller(x: f64) -> f64 {
    let mut n = (x as usize) + 40;
    if n % 2 == 1 {
        n += 1;
    }
    let mut jp1 = 0.0;
    let mut j = 1e-30;
    let mut norm = 0.0;
    let mut j0 = 0.0;
    for i in (1..=n).rev() {
        let jm1 = 2.0 * i as f64 / x * j - jp1;
        jp1 = j;
        j = jm1;
        if j.abs() > 1e250 {
            jp1 *= 1e-250;
            j *= 1e-250;
            norm *= 1e-250;
        }
        let order = i - 1;
        if order == 0 {
            j0 = j;
        } else if order % 2 == 0 {
            norm += 2.0 * j;
        }
    }
    norm += j0;
    j0 / norm
}

fn j0_asymptotic(x: f64) -> f64 {
    let mut p = 0.0;
    let mut q = 0.0;
    let mut a = 1.0;
    let mut prev = f64::INFINITY;
    for k in 0..60 {
        if k > 0 {
            let odd = (2 * k - 1) as f64;
            a *= odd * odd / (k as f64 * 8.0 * x);
        }
        if a > prev {
            break;
        }
        prev = a;
        let signed = if (k / 2) % 2 == 0 { a } else { -a };
        if k % 2 == 0 {
            p += signed;
        } else {
            q -= signed;
        }
        if a < 1e-17 {
            break;
        }
    }
    let chi = x - 0.25 * PI;
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Jakes correlation `J0(2π f_D T_s n)`.
pub fn jakes_alpha(fd_ts: f64, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    bessel_j0(2.0 * PI * fd_ts * n as f64)
}

/// Temporal correlation coefficients indexed by lag `0..τ_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgingProfile {
    pub alpha: Vec<Vec<f64>>,
    pub alpha_bar: Vec<Vec<f64>>,
}

impl AgingProfile {
    pub fn new(fd_ts: &[f64], tau_c: usize, convention: DopplerConvention) -> Self {
        let alpha: Vec<Vec<f64>> = fd_ts
            .iter()
            .map(|&x| {
                (0..tau_c)
                    .map(|lag| match convention {
                        DopplerConvention::PerIndex => jakes_alpha(x, lag),
                        DopplerConvention::PerSymbol => jakes_alpha(x, lag.min(1)),
                    })
                    .collect()
            })
            .collect();
        Self::from_alpha(alpha)
    }

    pub fn from_config(cfg: &SystemConfig) -> Self {
        let fd_ts: Vec<f64> = cfg.fd.iter().map(|f| f * cfg.ts).collect();
        Self::new(&fd_ts, cfg.tau_c, cfg.doppler_convention)
    }

    /// No aging: every coefficient is 1.
    pub fn static_profile(k: usize, tau_c: usize) -> Self {
        Self::from_alpha(vec![vec![1.0; tau_c]; k])
    }

    pub fn from_alpha(alpha: Vec<Vec<f64>>) -> Self {
        let alpha_bar = alpha
            .iter()
            .map(|row| row.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect())
            .collect();
        AgingProfile { alpha, alpha_bar }
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, k: usize, lag: usize) -> f64 {
        self.alpha[k][lag]
    }

    pub fn alpha_bar(&self, k: usize, lag: usize) -> f64 {
        self.alpha_bar[k][lag]
    }

    /// Data-phase coefficients `α_{i,n-τ_p}` for all users at channel use n.
    pub fn data_alphas(&self, n: usize, tau_p: usize) -> Vec<f64> {
        self.alpha.iter().map(|row| row[n - tau_p]).collect()
    }
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// ULA local-scattering covariance with a uniform angular distribution of
/// half-width `delta` around `phi`. Antenna spacing is in wavelengths.
pub fn bs_correlation(m: usize, phi: f64, delta: f64, spacing: f64) -> Result<CMat> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("angular spread must be positive, got {delta}")));
    }
    let (gx, gw) = gauss_legendre(16);
    // Enough panels to resolve the fastest oscillation across the band.
    let max_phase = 2.0 * PI * spacing * (m.max(1) - 1) as f64 * 2.0 * delta;
    let panels = 8 + (max_phase / 2.0).ceil() as usize;
    let width = 2.0 * delta / panels as f64;
    let mut col = vec![Complex64::new(0.0, 0.0); m];
    for p in 0..panels {
        let a = phi - delta + p as f64 * width;
        for (x, w) in gx.iter().zip(&gw) {
            let ang = a + 0.5 * width * (x + 1.0);
            let wt = 0.5 * width * w / (2.0 * delta);
            let s = 2.0 * PI * spacing * ang.sin();
            for (d, c) in col.iter_mut().enumerate() {
                *c += Complex64::from_polar(wt, s * d as f64);
            }
        }
    }
    // Toeplitz fill; the diagonal is exactly 1 so the trace is M.
    col[0] = Complex64::new(1.0, 0.0);
    Ok(CMat::from_fn(m, m, |a, b| {
        if a >= b {
            col[a - b]
        } else {
            col[b - a].conj()
        }
    }))
}

/// Element centers `(y, z)` of a planar RIS filled row by row.
pub fn ris_grid(l: usize, columns: usize, d_h: f64, d_v: f64) -> Vec<(f64, f64)> {
    let cols = columns.max(1);
    let rows = l.div_ceil(cols);
    (0..l)
        .map(|i| {
            let h = (i % cols) as f64 - 0.5 * (cols - 1) as f64;
            let v = (i / cols) as f64 - 0.5 * (rows - 1) as f64;
            (h * d_h, v * d_v)
        })
        .collect()
}

pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Isotropic-scattering RIS correlation `sinc(2‖u_m − u_n‖/λ)`.
pub fn ris_correlation(grid: &[(f64, f64)], wavelength: f64) -> Result<CMat> {
    if !(wavelength > 0.0) {
        return Err(Error::Domain(format!("wavelength must be positive, got {wavelength}")));
    }
    let l = grid.len();
    Ok(CMat::from_fn(l, l, |a, b| {
        let (dy, dz) = (grid[a].0 - grid[b].0, grid[a].1 - grid[b].1);
        Complex64::new(sinc(2.0 * (dy * dy + dz * dz).sqrt() / wavelength), 0.0)
    }))
}

/// Elevation/azimuth pairs of the BS–RIS LoS link.
#[derive(Debug, Clone, PartialEq)]
pub struct LosAngles {
    /// Departure from the BS towards RIS element l.
    pub theta1: Vec<f64>,
    pub phi1: Vec<f64>,
    /// Arrival at the RIS from BS antenna m.
    pub theta2: Vec<f64>,
    pub phi2: Vec<f64>,
}

impl LosAngles {
    /// BS ULA along y starting at the origin, RIS centered at `(r1, 0, 0)`
    /// facing the BS.
    pub fn from_geometry(cfg: &SystemConfig) -> Self {
        let d_bs = cfg.bs_spacing * cfg.wavelength();
        let r1 = cfg.geometry.r1;
        let grid = ris_grid(cfg.l, cfg.ris_columns(), cfg.d_h, cfg.d_v);
        let spherical = |x: f64, y: f64, z: f64| {
            let r = (x * x + y * y + z * z).sqrt();
            ((z / r).acos(), y.atan2(x))
        };
        let (theta1, phi1) = grid.iter().map(|&(y, z)| spherical(r1, y, z)).unzip();
        let (theta2, phi2) = (0..cfg.m).map(|m| spherical(-r1, m as f64 * d_bs, 0.0)).unzip();
        LosAngles { theta1, phi1, theta2, phi2 }
    }

    pub fn zeros(m: usize, l: usize) -> Self {
        LosAngles { theta1: vec![0.0; l], phi1: vec![0.0; l], theta2: vec![0.0; m], phi2: vec![0.0; m] }
    }
}

/// Deterministic LoS channel `[H1]_{m,l}`.
pub fn los_channel(beta1: f64, wavelength: f64, d_bs: f64, d_ris: f64, angles: &LosAngles) -> Result<CMat> {
    let l = angles.theta1.len();
    let m = angles.theta2.len();
    if angles.phi1.len() != l || angles.phi2.len() != m {
        return Err(Error::Dimension("elevation and azimuth arrays differ in length".into()));
    }
    let amp = beta1.sqrt();
    let kw = 2.0 * PI / wavelength;
    Ok(CMat::from_fn(m, l, |mi, li| {
        let phase = kw
            * (mi as f64 * d_bs * angles.theta1[li].sin() * angles.phi1[li].sin()
                + li as f64 * d_ris * angles.theta2[mi].sin() * angles.phi2[mi].sin());
        Complex64::from_polar(amp, phase)
    }))
}

/// Channel of all UEs at one channel use; column k is `h_{k,n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: CMat,
    pub n: usize,
}

/// Draws `CN(0, I)` entries.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(s * re, s * im)
    })
}

/// Precomputed square-root factors for repeated sampling of `CN(0, R_k)`
/// through the direct-plus-cascaded structure.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    sqrt_bs: Vec<CMat>,
    sqrt_ris: Vec<CMat>,
    beta_g: Vec<f64>,
    beta_h2: Vec<f64>,
    h1_theta: CMat,
}

impl ChannelSampler {
    pub fn new(stats: &ChannelStatistics) -> Self {
        let large = &stats.large;
        ChannelSampler {
            sqrt_bs: large.r_bs.iter().map(linalg::sqrt_psd).collect(),
            sqrt_ris: large.r_ris.iter().map(linalg::sqrt_psd).collect(),
            beta_g: large.beta_g.clone(),
            beta_h2: large.beta_h2.clone(),
            h1_theta: stats.h1_theta(),
        }
    }

    /// One independent `M × K` draw with column k distributed as `CN(0, R_k)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CMat {
        let m = self.h1_theta.nrows();
        let l = self.h1_theta.ncols();
        let k = self.sqrt_bs.len();
        let q = complex_normal(rng, m, k);
        let q2 = complex_normal(rng, l, k);
        let mut h = CMat::zeros(m, k);
        for u in 0..k {
            let g = (&self.sqrt_bs[u] * q.column(u)) * Complex64::new(self.beta_g[u].sqrt(), 0.0);
            let h2 = (&self.sqrt_ris[u] * q2.column(u)) * Complex64::new(self.beta_h2[u].sqrt(), 0.0);
            let cascaded = &self.h1_theta * h2;
            h.set_column(u, &(g + cascaded));
        }
        h
    }
}

pub fn sample_initial_channel<R: Rng + ?Sized>(stats: &ChannelStatistics, rng: &mut R) -> ChannelRealization {
    ChannelRealization { h: ChannelSampler::new(stats).sample(rng), n: 0 }
}

/// `h_n = α h_0 + sqrt(1 − α²) e_n` with a fresh innovation `e_n ~ CN(0, R_k)`.
pub fn age_channel<R: Rng + ?Sized>(
    h0: &ChannelRealization,
    sampler: &ChannelSampler,
    alpha_n: f64,
    n: usize,
    rng: &mut R,
) -> Result<ChannelRealization> {
    if !(alpha_n.abs() <= 1.0) {
        return Err(Error::Domain(format!("|alpha| = {} exceeds 1", alpha_n.abs())));
    }
    let abar = (1.0 - alpha_n * alpha_n).sqrt();
    if abar == 0.0 {
        return Ok(ChannelRealization { h: h0.h.scale(alpha_n), n });
    }
    let e = sampler.sample(rng);
    Ok(ChannelRealization { h: h0.h.scale(alpha_n) + e.scale(abar), n })
}

/// Column `k` of a realization as a vector.
pub fn user_channel(h: &ChannelRealization, k: usize) -> CVec {
    h.h.column(k).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // (1/π)∫₀^π cos(x sin φ) dφ; the integrand is π-periodic and smooth so
    // the trapezoid rule converges geometrically.
    fn j0_quadrature(x: f64) -> f64 {
        let n = 2000;
        let h = PI / n as f64;
        (0..n).map(|i| (x * (i as f64 * h).sin()).cos()).sum::<f64>() * h / PI
    }

    #[test]
    fn j0_matches_quadrature() {
        for i in 0..100 {
            let x = 20.0 * i as f64 / 99.0;
            let err = (bessel_j0(x) - j0_quadrature(x)).abs();
            assert!(err < 1e-12, "x = {x}: err {err:e}");
        }
    }

    #[test]
    fn j0_branch_boundaries_agree() {
        for &x in &[7.999_999, 8.000_001, 24.999_999, 25.000_001, 30.0, 55.5] {
            let err = (bessel_j0(x) - j0_quadrature(x)).abs();
            assert!(err < 1e-12, "x = {x}: err {err:e}");
        }
    }

    #[test]
    fn j0_known_values() {
        assert_eq!(jakes_alpha(0.3, 0), 1.0);
        assert!((bessel_j0(1.0) - 0.765_197_686_6).abs() < 1e-9);
        assert!(bessel_j0(2.404_826).abs() < 1e-6);
    }

    #[test]
    fn first_root_by_bisection() {
        let (mut a, mut b) = (2.0, 3.0);
        for _ in 0..80 {
            let c = 0.5 * (a + b);
            if j0_quadrature(a) * j0_quadrature(c) <= 0.0 {
                b = c;
            } else {
                a = c;
            }
        }
        let root = 0.5 * (a + b);
        assert!((root / (2.0 * PI) - 0.3827).abs() < 1e-4);
        assert!(jakes_alpha(root / (2.0 * PI), 1).abs() < 1e-12);
    }

    #[test]
    fn profile_invariants() {
        for conv in [DopplerConvention::PerIndex, DopplerConvention::PerSymbol] {
            let prof = AgingProfile::new(&[0.0025, 0.01], 50, conv);
            for k in 0..2 {
                assert_eq!(prof.alpha(k, 0), 1.0);
                for lag in 0..50 {
                    let s = prof.alpha(k, lag).powi(2) + prof.alpha_bar(k, lag).powi(2);
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        let per_symbol = AgingProfile::new(&[0.1], 10, DopplerConvention::PerSymbol);
        assert!(per_symbol.alpha[0][1..].iter().all(|&a| a == bessel_j0(2.0 * PI * 0.1)));
    }

    #[test]
    fn bs_correlation_isotropic_limit() {
        let r = bs_correlation(6, 0.0, PI, 0.5).unwrap();
        for a in 0..6 {
            assert!((r[(a, a)].re - 1.0).abs() < 1e-14);
            for b in 0..6 {
                let expect = j0_quadrature(PI * (a as f64 - b as f64));
                assert!((r[(a, b)] - Complex64::new(expect, 0.0)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn bs_correlation_is_psd_with_trace_m() {
        let r = bs_correlation(32, 0.4, 10f64.to_radians(), 0.5).unwrap();
        assert!(linalg::hermitian_defect(&r) < 1e-14);
        assert!((linalg::trace(&r).re - 32.0).abs() < 1e-9 * 32.0);
        assert!(linalg::min_eigenvalue(&r) >= -1e-10 * 32.0);
        assert_eq!(bs_correlation(1, 0.3, 0.1, 0.5).unwrap()[(0, 0)], Complex64::new(1.0, 0.0));
        assert!(matches!(bs_correlation(4, 0.0, 0.0, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn ris_sinc_values() {
        let lam = 0.15;
        let half = ris_correlation(&ris_grid(2, 2, lam / 2.0, lam / 2.0), lam).unwrap();
        assert_eq!(half[(0, 0)].re, 1.0);
        assert!(half[(0, 1)].re.abs() < 1e-15);
        let quarter = ris_correlation(&ris_grid(2, 2, lam / 4.0, lam / 4.0), lam).unwrap();
        assert!((quarter[(0, 1)].re - 2.0 / PI).abs() < 1e-12);
        assert!(matches!(ris_correlation(&[(0.0, 0.0)], 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn los_channel_cases() {
        let lam = 0.15;
        let h = los_channel(4.0, lam, lam / 2.0, lam / 4.0, &LosAngles::zeros(3, 5)).unwrap();
        assert!(h.iter().all(|z| (z - Complex64::new(2.0, 0.0)).norm() < 1e-15));

        let angles = LosAngles {
            theta1: vec![PI / 2.0],
            phi1: vec![PI / 2.0],
            theta2: vec![0.0; 2],
            phi2: vec![0.0; 2],
        };
        let h = los_channel(9.0, lam, lam / 2.0, lam / 4.0, &angles).unwrap();
        assert!((h[(0, 0)] - Complex64::new(3.0, 0.0)).norm() < 1e-14);
        assert!((h[(1, 0)] - Complex64::new(-3.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn aging_domain() {
        let h0 = ChannelRealization { h: CMat::zeros(2, 1), n: 0 };
        let sampler = ChannelSampler {
            sqrt_bs: vec![CMat::identity(2, 2)],
            sqrt_ris: vec![CMat::identity(1, 1)],
            beta_g: vec![1.0],
            beta_h2: vec![0.0],
            h1_theta: CMat::zeros(2, 1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(age_channel(&h0, &sampler, 1.5, 1, &mut rng), Err(Error::Domain(_))));
        let h0 = ChannelRealization { h: sampler.sample(&mut rng), n: 0 };
        assert_eq!(age_channel(&h0, &sampler, 1.0, 3, &mut rng).unwrap().h, h0.h);
    }
}
