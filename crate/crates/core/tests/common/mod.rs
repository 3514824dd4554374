#![allow(dead_code)]

use num_complex::Complex64;
use rand::Rng;
use ris_aging_core::estimation::EstimationModel;
use ris_aging_core::fading::{complex_normal, AgingProfile};
use ris_aging_core::linalg::{CMat, CVec};
use ris_aging_core::scenario::{self, ChannelStatistics, Scale, SystemConfig};

/// Desk defaults shrunk to the given sizes, pilots on the first K uses.
pub fn small_cfg(m: usize, l: usize, k: usize, tau_c: usize) -> SystemConfig {
    let mut cfg = SystemConfig::defaults(Scale::Desk).resized(m, l, k);
    cfg.tau_p = k;
    cfg.pilot_slots = (1..=k).collect();
    cfg.tau_c = tau_c;
    cfg.reg_alpha = k as f64 / (m as f64 * cfg.rho());
    cfg.validate().unwrap();
    cfg
}

pub fn random_theta<R: Rng>(rng: &mut R, l: usize) -> CVec {
    CVec::from_iterator(l, (0..l).map(|_| Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU))))
}

/// Random Hermitian PD matrix with trace m.
pub fn random_psd<R: Rng>(rng: &mut R, m: usize) -> CMat {
    let g = complex_normal(rng, m, m);
    let a = &g * g.adjoint() + CMat::identity(m, m).scale(0.05);
    let tr = a.trace().re;
    a.scale(m as f64 / tr)
}

pub struct Setup {
    pub cfg: SystemConfig,
    pub stats: ChannelStatistics,
    pub aging: AgingProfile,
    pub est: EstimationModel,
}

pub fn setup(cfg: &SystemConfig, theta: &CVec) -> Setup {
    let stats = scenario::build_statistics(cfg, theta).unwrap();
    let aging = AgingProfile::from_config(cfg);
    let est = EstimationModel::new(&stats, cfg, &aging).unwrap();
    Setup { cfg: cfg.clone(), stats, aging, est }
}

pub fn equal_power(cfg: &SystemConfig) -> Vec<f64> {
    vec![cfg.p_max / cfg.k as f64; cfg.k]
}
