//! System configuration and per-UE large-scale statistics.
//!
//! JSON configs use flat keys with powers in dBm, distances in meters and
//! angles in radians or degrees as named. Everything is converted to linear
//! SI units when the config is parsed.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fading;
use crate::linalg::{self, CMat, CVec};

pub const SPEED_OF_LIGHT: f64 = 3.0e8;

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watt_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Maximum Doppler shift `v f_c / c` for a speed given in km/h.
pub fn doppler_from_velocity(kmh: f64, carrier_hz: f64) -> f64 {
    kmh / 3.6 * carrier_hz / SPEED_OF_LIGHT
}

/// How the time lag enters the Jakes correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DopplerConvention {
    /// `J0(2π f_D T_s · lag)`: the lag in channel uses scales the argument.
    PerIndex,
    /// `J0(2π f_D T_s)` for every nonzero lag, so `f_D T_s` is the
    /// normalized Doppler seen by the whole data phase.
    PerSymbol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RisCorrelation {
    Sinc,
    Identity,
}

/// Which data-phase coefficient multiplies `δ^λ_i` in the noise term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaReading {
    /// `α_i²` inside the sum over users (matches the Monte Carlo normalization).
    PerUser,
    /// The intended user's `α_k²` in front of the sum.
    Leading,
}

/// How the simulator scales the precoder to the power budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McNormalization {
    /// One λ for all realizations, `P_max / E[tr(P F^H F)]` estimated over
    /// the trials. This is the λ̄ the deterministic equivalent converges to.
    Average,
    /// `tr(P F^H F) = P_max` in every realization.
    PerRealization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedPointMethod {
    /// Plain substitution, with relaxation switched on if it oscillates.
    Picard,
    /// Newton steps on the same equation; falls back to substitution if a
    /// step leaves the positive orthant.
    Newton,
}

/// RZF shift matrix `Z` as given in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZSpec {
    /// `z · I_M`.
    Scaled(f64),
    /// Diagonal entries.
    Diag(Vec<f64>),
}

impl ZSpec {
    pub fn matrix(&self, m: usize) -> CMat {
        match self {
            ZSpec::Scaled(z) => CMat::identity(m, m).scale(*z),
            ZSpec::Diag(d) => CMat::from_diagonal(&CVec::from_iterator(
                m,
                d.iter().map(|&x| Complex64::new(x, 0.0)),
            )),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ZSpec::Scaled(z) => *z == 0.0,
            ZSpec::Diag(d) => d.iter().all(|&x| x == 0.0),
        }
    }
}

/// Base parameter set that absent config keys fall back to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// M = L = 100, K = 20, τ_c = 200.
    Paper,
    /// M = 64, L = 32, K = 8, τ_c = 100.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// BS to RIS distance.
    pub r1: f64,
    /// RIS to UE distance, one per UE.
    pub r2: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Reference-distance losses, linear (< 1).
    pub c1: f64,
    pub c2: f64,
    /// Extra attenuation of the direct BS to UE link, linear (< 1).
    pub penetration: f64,
}

/// Fully resolved scenario in linear SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub m: usize,
    pub l: usize,
    pub k: usize,
    pub tau_c: usize,
    pub tau_p: usize,
    pub p_pilot: f64,
    pub p_max: f64,
    pub noise_var_ul: f64,
    pub noise_var_dl: f64,
    /// Maximum Doppler per UE, Hz.
    pub fd: Vec<f64>,
    pub ts: f64,
    pub carrier_freq: f64,
    pub doppler_convention: DopplerConvention,
    pub reg_alpha: f64,
    pub z: ZSpec,
    pub geometry: Geometry,
    pub d_h: f64,
    pub d_v: f64,
    /// BS element spacing in wavelengths.
    pub bs_spacing: f64,
    /// Half-width of the BS angular spread, radians.
    pub angular_spread: f64,
    pub ris_correlation: RisCorrelation,
    /// Channel use (1-based) carrying UE k's pilot.
    pub pilot_slots: Vec<usize>,
    pub lambda_reading: LambdaReading,
    pub mc_normalization: McNormalization,
    pub fixed_point: FixedPointMethod,
    pub de_tol: f64,
    pub de_max_iter: usize,
    /// Solve the DE every `de_stride` data symbols and hold it in between.
    pub de_stride: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn expand(&self, k: usize, key: &str) -> Result<Vec<f64>> {
        match self {
            OneOrMany::One(x) => Ok(vec![*x; k]),
            OneOrMany::Many(v) if v.len() == k => Ok(v.clone()),
            OneOrMany::Many(v) => Err(Error::Validation(format!(
                "`{key}` has {} entries but K = {k}",
                v.len()
            ))),
        }
    }
}

/// On-disk form. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(rename = "M")]
    m: Option<i64>,
    #[serde(rename = "L")]
    l: Option<i64>,
    #[serde(rename = "K")]
    k: Option<i64>,
    tau_c: Option<i64>,
    tau_p: Option<i64>,
    p_pilot_dbm: Option<f64>,
    p_max_dbm: Option<f64>,
    noise_ul_dbm: Option<f64>,
    noise_dl_dbm: Option<f64>,
    coherence_bandwidth_hz: Option<f64>,
    fd_hz: Option<OneOrMany>,
    velocity_kmh: Option<OneOrMany>,
    ts: Option<f64>,
    carrier_freq_hz: Option<f64>,
    doppler_convention: Option<DopplerConvention>,
    reg_alpha: Option<f64>,
    z: Option<ZSpec>,
    r1: Option<f64>,
    r2: Option<OneOrMany>,
    alpha1: Option<f64>,
    alpha2: Option<f64>,
    c1_db: Option<f64>,
    c2_db: Option<f64>,
    penetration_db: Option<f64>,
    d_h: Option<f64>,
    d_v: Option<f64>,
    bs_spacing_wavelengths: Option<f64>,
    angular_spread_deg: Option<f64>,
    ris_correlation: Option<RisCorrelation>,
    pilot_slots: Option<Vec<i64>>,
    lambda_reading: Option<LambdaReading>,
    mc_normalization: Option<McNormalization>,
    fixed_point: Option<FixedPointMethod>,
    de_tol: Option<f64>,
    de_max_iter: Option<i64>,
    de_stride: Option<i64>,
    seed: Option<u64>,
}

fn positive_count(v: Option<i64>, default: usize, key: &str) -> Result<usize> {
    match v {
        None => Ok(default),
        Some(x) if x >= 1 => Ok(x as usize),
        Some(x) => Err(Error::Validation(format!("`{key}` must be a positive integer, got {x}"))),
    }
}

impl SystemConfig {
    pub fn defaults(scale: Scale) -> Self {
        Self::from_raw(RawConfig::default(), scale).expect("built-in defaults are valid")
    }

    pub fn from_json_str(text: &str, scale: Scale) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::Schema { key, message: e.inner().to_string() }
        })?;
        Self::from_raw(raw, scale)
    }

    fn from_raw(raw: RawConfig, scale: Scale) -> Result<Self> {
        let (m0, l0, k0, tc0) = match scale {
            Scale::Paper => (100, 100, 20, 200),
            Scale::Desk => (64, 32, 8, 100),
        };
        let m = positive_count(raw.m, m0, "M")?;
        let l = positive_count(raw.l, l0, "L")?;
        let k = positive_count(raw.k, k0, "K")?;
        let tau_c = positive_count(raw.tau_c, tc0, "tau_c")?;
        let tau_p = positive_count(raw.tau_p, k, "tau_p")?;

        let carrier_freq = raw.carrier_freq_hz.unwrap_or(2.0e9);
        let bc = raw.coherence_bandwidth_hz.unwrap_or(1.0e5);
        let thermal_dbm = -174.0 + 10.0 * bc.log10();
        let noise_var_ul = dbm_to_watt(raw.noise_ul_dbm.unwrap_or(thermal_dbm));
        let noise_var_dl = dbm_to_watt(raw.noise_dl_dbm.unwrap_or(thermal_dbm));
        let p_pilot = dbm_to_watt(raw.p_pilot_dbm.unwrap_or(6.0));
        let p_max = dbm_to_watt(raw.p_max_dbm.unwrap_or(6.0));

        let fd = match (&raw.fd_hz, &raw.velocity_kmh) {
            (Some(_), Some(_)) => {
                return Err(Error::Validation("give either `fd_hz` or `velocity_kmh`, not both".into()))
            }
            (Some(f), None) => f.expand(k, "fd_hz")?,
            (None, Some(v)) => v
                .expand(k, "velocity_kmh")?
                .into_iter()
                .map(|x| doppler_from_velocity(x, carrier_freq))
                .collect(),
            (None, None) => vec![250.0; k],
        };

        let wavelength = SPEED_OF_LIGHT / carrier_freq;
        let r2 = match &raw.r2 {
            Some(v) => v.expand(k, "r2")?,
            None => vec![60.0; k],
        };
        let geometry = Geometry {
            r1: raw.r1.unwrap_or(8.0),
            r2,
            alpha1: raw.alpha1.unwrap_or(2.2),
            alpha2: raw.alpha2.unwrap_or(3.67),
            c1: 1.0 / db_to_linear(raw.c1_db.unwrap_or(26.0)),
            c2: 1.0 / db_to_linear(raw.c2_db.unwrap_or(28.0)),
            penetration: 1.0 / db_to_linear(raw.penetration_db.unwrap_or(15.0)),
        };

        let rho = p_max / noise_var_dl;
        let reg_alpha = raw.reg_alpha.unwrap_or(k as f64 / (m as f64 * rho));

        let pilot_slots = match raw.pilot_slots {
            None => (1..=k).collect(),
            Some(v) => {
                if v.len() != k {
                    return Err(Error::Validation(format!(
                        "`pilot_slots` has {} entries but K = {k}",
                        v.len()
                    )));
                }
                let mut out = Vec::with_capacity(k);
                for s in v {
                    if s < 1 || s as usize > tau_p {
                        return Err(Error::Validation(format!(
                            "pilot slot {s} outside 1..={tau_p}"
                        )));
                    }
                    out.push(s as usize);
                }
                out
            }
        };

        let cfg = SystemConfig {
            m,
            l,
            k,
            tau_c,
            tau_p,
            p_pilot,
            p_max,
            noise_var_ul,
            noise_var_dl,
            fd,
            ts: raw.ts.unwrap_or(1.0e-5),
            carrier_freq,
            doppler_convention: raw.doppler_convention.unwrap_or(DopplerConvention::PerIndex),
            reg_alpha,
            z: raw.z.unwrap_or(ZSpec::Scaled(0.0)),
            geometry,
            d_h: raw.d_h.unwrap_or(wavelength / 4.0),
            d_v: raw.d_v.unwrap_or(wavelength / 4.0),
            bs_spacing: raw.bs_spacing_wavelengths.unwrap_or(0.5),
            angular_spread: raw.angular_spread_deg.unwrap_or(10.0).to_radians(),
            ris_correlation: raw.ris_correlation.unwrap_or(RisCorrelation::Sinc),
            pilot_slots,
            lambda_reading: raw.lambda_reading.unwrap_or(LambdaReading::PerUser),
            mc_normalization: raw.mc_normalization.unwrap_or(McNormalization::Average),
            fixed_point: raw.fixed_point.unwrap_or(FixedPointMethod::Newton),
            de_tol: raw.de_tol.unwrap_or(1e-12),
            de_max_iter: positive_count(raw.de_max_iter, 10_000, "de_max_iter")?,
            de_stride: positive_count(raw.de_stride, 1, "de_stride")?,
            seed: raw.seed.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.m == 0 || self.l == 0 || self.k == 0 || self.tau_c == 0 || self.tau_p == 0 {
            return bad("M, L, K, tau_c and tau_p must be positive".into());
        }
        if self.tau_p < self.k {
            return bad(format!("tau_p = {} is below K = {}", self.tau_p, self.k));
        }
        if self.tau_c <= self.tau_p {
            return bad(format!("tau_c = {} must exceed tau_p = {}", self.tau_c, self.tau_p));
        }
        let positive = [
            ("p_pilot", self.p_pilot),
            ("p_max", self.p_max),
            ("noise_var_ul", self.noise_var_ul),
            ("noise_var_dl", self.noise_var_dl),
            ("ts", self.ts),
            ("carrier_freq", self.carrier_freq),
            ("reg_alpha", self.reg_alpha),
            ("r1", self.geometry.r1),
            ("c1", self.geometry.c1),
            ("c2", self.geometry.c2),
            ("penetration", self.geometry.penetration),
            ("d_h", self.d_h),
            ("d_v", self.d_v),
            ("bs_spacing", self.bs_spacing),
            ("angular_spread", self.angular_spread),
            ("de_tol", self.de_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("`{name}` must be strictly positive, got {v}"));
            }
        }
        if !self.geometry.alpha1.is_finite() || !self.geometry.alpha2.is_finite() {
            return bad("path-loss exponents must be finite".into());
        }
        if self.fd.len() != self.k || self.geometry.r2.len() != self.k || self.pilot_slots.len() != self.k {
            return bad("per-UE vectors must have K entries".into());
        }
        if self.fd.iter().any(|&f| !(f.is_finite() && f >= 0.0)) {
            return bad("Doppler shifts must be finite and nonnegative".into());
        }
        if self.geometry.r2.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return bad("`r2` distances must be strictly positive".into());
        }
        match &self.z {
            ZSpec::Scaled(z) if !(z.is_finite() && *z >= 0.0) => {
                return bad("`z` must be nonnegative".into())
            }
            ZSpec::Diag(d) if d.len() != self.m => {
                return bad(format!("`z` diagonal has {} entries but M = {}", d.len(), self.m))
            }
            ZSpec::Diag(d) if d.iter().any(|&x| !(x.is_finite() && x >= 0.0)) => {
                return bad("`z` diagonal entries must be nonnegative".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    /// Transmit SNR `ρ = P_max / σ²`.
    pub fn rho(&self) -> f64 {
        self.p_max / self.noise_var_dl
    }

    /// First channel use of the data phase (1-based), ζ = τ_p + 1.
    pub fn first_data_index(&self) -> usize {
        self.tau_p + 1
    }

    pub fn data_len(&self) -> usize {
        self.tau_c - self.tau_p
    }

    pub fn beta1(&self) -> f64 {
        self.geometry.c1 * self.geometry.r1.powf(-self.geometry.alpha1)
    }

    pub fn beta_h2(&self) -> Vec<f64> {
        self.geometry
            .r2
            .iter()
            .map(|r| self.geometry.c2 * r.powf(-self.geometry.alpha2))
            .collect()
    }

    pub fn beta_g(&self) -> Vec<f64> {
        self.beta_h2().iter().map(|b| b * self.geometry.penetration).collect()
    }

    /// Copy with new dimensions. Per-UE vectors are truncated or padded with
    /// their last entry; pilot slots and τ_p follow the default layout when K
    /// changes. A regularizer at its default `K/(Mρ)` is re-derived for the
    /// new sizes; an explicit one is kept.
    pub fn resized(&self, m: usize, l: usize, k: usize) -> SystemConfig {
        fn fit(v: &[f64], k: usize) -> Vec<f64> {
            let last = v.last().copied().unwrap_or(0.0);
            (0..k).map(|i| v.get(i).copied().unwrap_or(last)).collect()
        }
        let mut out = self.clone();
        let default_reg = self.k as f64 / (self.m as f64 * self.rho());
        if (self.reg_alpha - default_reg).abs() <= 1e-12 * default_reg {
            out.reg_alpha = k as f64 / (m as f64 * self.rho());
        }
        out.m = m;
        out.l = l;
        if k != self.k {
            out.k = k;
            out.fd = fit(&self.fd, k);
            out.geometry.r2 = fit(&self.geometry.r2, k);
            out.tau_p = self.tau_p.max(k);
            out.pilot_slots = (1..=k).collect();
        }
        out
    }

    /// Number of RIS columns on the planar grid.
    pub fn ris_columns(&self) -> usize {
        (self.l as f64).sqrt().ceil() as usize
    }
}

pub fn load_config(path: &Path) -> Result<SystemConfig> {
    load_config_with_base(path, Scale::Paper)
}

pub fn load_config_with_base(path: &Path, scale: Scale) -> Result<SystemConfig> {
    let text = std::fs::read_to_string(path)?;
    SystemConfig::from_json_str(&text, scale)
}

/// Θ-independent part of the statistics.
#[derive(Debug, Clone)]
pub struct LargeScale {
    pub m: usize,
    pub l: usize,
    pub k: usize,
    pub r_bs: Vec<CMat>,
    pub r_ris: Vec<CMat>,
    pub beta_g: Vec<f64>,
    pub beta_h2: Vec<f64>,
    pub beta1: f64,
    pub h1: CMat,
    /// Nominal BS angle per UE, radians.
    pub nominal_angles: Vec<f64>,
}

impl LargeScale {
    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5CE7_A210_0000_0001);
        let half_pi = std::f64::consts::FRAC_PI_2;
        let nominal_angles: Vec<f64> = (0..cfg.k).map(|_| rng.gen_range(-half_pi..half_pi)).collect();
        let r_bs = nominal_angles
            .iter()
            .map(|&phi| fading::bs_correlation(cfg.m, phi, cfg.angular_spread, cfg.bs_spacing))
            .collect::<Result<Vec<_>>>()?;
        let r_ris_one = match cfg.ris_correlation {
            RisCorrelation::Identity => CMat::identity(cfg.l, cfg.l),
            RisCorrelation::Sinc => {
                let grid = fading::ris_grid(cfg.l, cfg.ris_columns(), cfg.d_h, cfg.d_v);
                fading::ris_correlation(&grid, cfg.wavelength())?
            }
        };
        let beta1 = cfg.beta1();
        let angles = fading::LosAngles::from_geometry(cfg);
        let h1 = fading::los_channel(
            beta1,
            cfg.wavelength(),
            cfg.bs_spacing * cfg.wavelength(),
            cfg.d_h,
            &angles,
        )?;
        Ok(LargeScale {
            m: cfg.m,
            l: cfg.l,
            k: cfg.k,
            r_bs,
            r_ris: vec![r_ris_one; cfg.k],
            beta_g: cfg.beta_g(),
            beta_h2: cfg.beta_h2(),
            beta1,
            h1,
            nominal_angles,
        })
    }

    /// Copy with the cascaded path switched off; the direct link is kept.
    pub fn without_ris(&self) -> Self {
        let mut out = self.clone();
        out.beta_h2 = vec![0.0; self.k];
        out
    }
}

/// Large-scale statistics conditioned on a phase vector.
#[derive(Debug, Clone)]
pub struct ChannelStatistics {
    pub large: Arc<LargeScale>,
    pub theta: CVec,
    /// Aggregate covariance `R_k` per UE.
    pub r: Vec<CMat>,
}

pub fn check_unit_modulus(theta: &CVec) -> Result<()> {
    for (i, z) in theta.iter().enumerate() {
        if (z.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "phase entry {i} has modulus {} (expected 1)",
                z.norm()
            )));
        }
    }
    Ok(())
}

impl ChannelStatistics {
    pub fn new(large: Arc<LargeScale>, theta: CVec) -> Result<Self> {
        if theta.len() != large.l {
            return Err(Error::Dimension(format!(
                "theta has length {} but L = {}",
                theta.len(),
                large.l
            )));
        }
        check_unit_modulus(&theta)?;
        let h1t = h1_theta(&large.h1, &theta);
        let r = (0..large.k)
            .map(|k| {
                let cascaded = linalg::matmul3(&h1t, &large.r_ris[k], &h1t.adjoint());
                let mut rk = large.r_bs[k].scale(large.beta_g[k]);
                linalg::axpy(&mut rk, large.beta_h2[k], &cascaded);
                linalg::hermitize(&rk)
            })
            .collect();
        Ok(ChannelStatistics { large, theta, r })
    }

    pub fn with_theta(&self, theta: CVec) -> Result<Self> {
        Self::new(self.large.clone(), theta)
    }

    pub fn m(&self) -> usize {
        self.large.m
    }

    pub fn l(&self) -> usize {
        self.large.l
    }

    pub fn k(&self) -> usize {
        self.large.k
    }

    /// `H1 Θ`.
    pub fn h1_theta(&self) -> CMat {
        h1_theta(&self.large.h1, &self.theta)
    }
}

fn h1_theta(h1: &CMat, theta: &CVec) -> CMat {
    let mut out = h1.clone();
    for (l, mut col) in out.column_iter_mut().enumerate() {
        col *= theta[l];
    }
    out
}

pub fn build_statistics(cfg: &SystemConfig, theta: &CVec) -> Result<ChannelStatistics> {
    let large = Arc::new(LargeScale::from_config(cfg)?);
    ChannelStatistics::new(large, theta.clone())
}

/// The all-`e^{jπ/2}` starting phase vector.
pub fn initial_theta(l: usize) -> CVec {
    CVec::from_element(l, Complex64::new(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_paper_scenario() {
        let cfg = SystemConfig::from_json_str("{}", Scale::Paper).unwrap();
        assert_eq!((cfg.m, cfg.l, cfg.k, cfg.tau_c), (100, 100, 20, 200));
        assert_eq!(cfg.tau_p, 20);
        assert!(cfg.fd.iter().all(|&f| f == 250.0));
    }

    #[test]
    fn velocity_maps_to_doppler() {
        assert!((doppler_from_velocity(135.0, 2e9) - 250.0).abs() < 1e-9);
    }

    #[test]
    fn zero_antennas_rejected() {
        let err = SystemConfig::from_json_str(r#"{"M": 0}"#, Scale::Paper).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn short_pilots_rejected() {
        let err = SystemConfig::from_json_str(r#"{"tau_p": 10, "K": 20}"#, Scale::Paper).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn schema_error_names_key() {
        let err = SystemConfig::from_json_str(r#"{"M": "many"}"#, Scale::Paper).unwrap_err();
        match err {
            Error::Schema { key, .. } => assert_eq!(key, "M"),
            other => panic!("unexpected {other}"),
        }
        let err = SystemConfig::from_json_str(r#"{"antennas": 3}"#, Scale::Paper).unwrap_err();
        assert!(err.to_string().contains("antennas"), "{err}");
    }

    #[test]
    fn path_loss_constants() {
        let cfg = SystemConfig::defaults(Scale::Paper);
        let c1 = 10f64.powf(-26.0 / 10.0);
        assert!((cfg.beta1() - c1 * 8f64.powf(-2.2)).abs() < 1e-20);
        let bh2 = 10f64.powf(-28.0 / 10.0) * 60f64.powf(-3.67);
        assert!((cfg.beta_h2()[0] - bh2).abs() < 1e-24);
        assert!((cfg.beta_g()[0] - bh2 * 10f64.powf(-1.5)).abs() < 1e-26);
    }

    #[test]
    fn default_regularizer() {
        let cfg = SystemConfig::defaults(Scale::Desk);
        let expect = 8.0 / (64.0 * cfg.rho());
        assert!((cfg.reg_alpha - expect).abs() <= 1e-15 * expect);
        let big = cfg.resized(128, 32, 4);
        let expect = 4.0 / (128.0 * cfg.rho());
        assert!((big.reg_alpha - expect).abs() <= 1e-15 * expect);
        let mut fixed = cfg.clone();
        fixed.reg_alpha = 0.5;
        assert_eq!(fixed.resized(128, 32, 4).reg_alpha, 0.5);
    }

    #[test]
    fn non_unit_theta_rejected() {
        let mut cfg = SystemConfig::defaults(Scale::Desk);
        cfg.m = 4;
        cfg.l = 4;
        cfg.k = 2;
        cfg.tau_p = 2;
        cfg.fd = vec![0.0; 2];
        cfg.geometry.r2 = vec![60.0; 2];
        cfg.pilot_slots = vec![1, 2];
        let theta = CVec::from_element(4, Complex64::new(2.0, 0.0));
        assert!(matches!(build_statistics(&cfg, &theta), Err(Error::Domain(_))));
    }
}
