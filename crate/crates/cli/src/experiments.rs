//! Sweep definitions and the per-point evaluation behind each experiment.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use clap::ValueEnum;
use rand::Rng;
use serde::Serialize;

use ris_aging_core::estimation::{self, EstimationModel};
use ris_aging_core::fading::{complex_normal, AgingProfile};
use ris_aging_core::linalg::{self, CMat, CVec};
use ris_aging_core::montecarlo::{self, mc_run, trial_rng, with_thread_limit, McEstimate, Precoder};
use ris_aging_core::optimizer::{alternating_optimize, OptOptions, OptState, Problem};
use ris_aging_core::scenario::{self, doppler_from_velocity, LargeScale, RisCorrelation, SystemConfig};
use ris_aging_core::Error;

use crate::output::{Row, Stage, Timings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    NmseVsSnr,
    SeVsDoppler,
    SeVsTime,
    #[value(name = "se-vs-L")]
    #[serde(rename = "se-vs-L")]
    SeVsL,
    #[value(name = "se-vs-M")]
    #[serde(rename = "se-vs-M")]
    SeVsM,
    Convergence,
    InitSensitivity,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::NmseVsSnr => "nmse-vs-snr",
            Experiment::SeVsDoppler => "se-vs-doppler",
            Experiment::SeVsTime => "se-vs-time",
            Experiment::SeVsL => "se-vs-L",
            Experiment::SeVsM => "se-vs-M",
            Experiment::Convergence => "convergence",
            Experiment::InitSensitivity => "init-sensitivity",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub seed: u64,
    pub trials: usize,
    pub paper_scale: bool,
    pub optimize: bool,
    pub realizations: usize,
    pub random_inits: usize,
}

/// A solver error together with where it happened.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub stage: &'static str,
    pub context: String,
    pub kind: &'static str,
    pub message: String,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Schema { .. } => "schema",
        Error::Validation(_) => "validation",
        Error::Domain(_) => "domain",
        Error::Dimension(_) => "dimension",
        Error::Convergence { .. } => "convergence",
        Error::Conditioning(_) => "conditioning",
        Error::Io(_) => "io",
    }
}

type Res<T> = Result<T, Failure>;

trait At<T> {
    fn at(self, stage: &'static str, context: &str) -> Res<T>;
}

impl<T> At<T> for ris_aging_core::Result<T> {
    fn at(self, stage: &'static str, context: &str) -> Res<T> {
        self.map_err(|e| Failure { stage, context: context.to_string(), kind: error_kind(&e), message: e.to_string() })
    }
}

pub struct Outcome {
    pub axis: &'static str,
    pub rows: Vec<Row>,
    pub stages: Vec<Stage>,
}

/// Evaluates `f` on every item with up to `thread_count()` workers. Output
/// order follows the input; Monte Carlo inside a worker runs single-threaded.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Res<R> + Sync) -> Res<Vec<R>> {
    let workers = montecarlo::thread_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Res<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                with_thread_limit(1, || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let r = f(&items[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                })
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every item visited")).collect()
}

fn with_velocity(cfg: &SystemConfig, kmh: f64) -> SystemConfig {
    let mut out = cfg.clone();
    out.fd = vec![doppler_from_velocity(kmh, cfg.carrier_freq); cfg.k];
    out
}

fn vlabel(kmh: f64) -> String {
    format!("v={kmh}")
}

/// Scenario variant a curve is computed for.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Variant {
    Moving(f64),
    Static,
    NoRis(f64),
}

impl Variant {
    fn baseline(self) -> &'static str {
        match self {
            Variant::Moving(_) => "rzf",
            Variant::Static => "static",
            Variant::NoRis(_) => "no-ris",
        }
    }

    fn series(self) -> String {
        match self {
            Variant::Moving(v) | Variant::NoRis(v) => vlabel(v),
            Variant::Static => "static".to_string(),
        }
    }

    fn problem(self, cfg: &SystemConfig, large: &Arc<LargeScale>) -> Problem {
        match self {
            Variant::Moving(v) => {
                let c = with_velocity(cfg, v);
                Problem::new(large.clone(), &c, AgingProfile::from_config(&c))
            }
            Variant::Static => Problem::new(large.clone(), cfg, AgingProfile::static_profile(cfg.k, cfg.tau_c)),
            Variant::NoRis(v) => {
                let c = with_velocity(cfg, v);
                Problem::new(Arc::new(large.without_ris()), &c, AgingProfile::from_config(&c))
            }
        }
    }
}

fn large_scale(cfg: &SystemConfig) -> Res<Arc<LargeScale>> {
    Ok(Arc::new(LargeScale::from_config(cfg).at("setup", "large-scale statistics")?))
}

/// Optimized (or default) operating point of a problem.
struct Operating {
    c: CVec,
    p: Vec<f64>,
    state: Option<OptState>,
}

fn operate(problem: &Problem, c0: Option<&CVec>, run: &RunSettings, t: &mut Timings, ctx: &str) -> Res<Operating> {
    if !run.optimize {
        let c = c0.cloned().unwrap_or_else(|| scenario::initial_theta(problem.cfg.l));
        return Ok(Operating { c, p: problem.equal_power(), state: None });
    }
    let state = t.time("optimize", || alternating_optimize(problem, c0, &OptOptions::default())).at("optimize", ctx)?;
    Ok(Operating { c: state.c.clone(), p: state.p.clone(), state: Some(state) })
}

fn mc_at(
    problem: &Problem,
    c: &CVec,
    p: &[f64],
    precoder: Precoder,
    run: &RunSettings,
    t: &mut Timings,
    ctx: &str,
) -> Res<montecarlo::McRun> {
    let ev = t.time("de", || problem.evaluate(c, None)).at("de", ctx)?;
    t.time("mc", || mc_run(&ev.stats, &ev.est, &problem.aging, &problem.cfg, p, precoder, run.trials, run.seed, None))
        .at("mc", ctx)
}

/// DE and MC sum SE at one operating point.
fn sum_se_pair(
    problem: &Problem,
    op: &Operating,
    run: &RunSettings,
    t: &mut Timings,
    ctx: &str,
) -> Res<(f64, McEstimate)> {
    let ev = t.time("de", || problem.evaluate(&op.c, None)).at("de", ctx)?;
    let de = ev.sum_se(&op.p);
    let mc = t
        .time("mc", || {
            mc_run(&ev.stats, &ev.est, &problem.aging, &problem.cfg, &op.p, Precoder::Rzf, run.trials, run.seed, None)
        })
        .at("mc", ctx)?
        .sum_se();
    Ok((de, mc))
}

fn run_items<T: Sync>(
    items: &[T],
    f: impl Fn(&T, &mut Timings) -> Res<Vec<Row>> + Sync,
) -> Res<(Vec<Row>, Vec<Stage>)> {
    let parts = par_map(items, |it| {
        let mut t = Timings::default();
        let rows = f(it, &mut t)?;
        Ok((rows, t.stages().to_vec()))
    })?;
    let mut rows = Vec::new();
    let mut stages = Timings::default();
    for (r, s) in parts {
        rows.extend(r);
        stages.merge(&s);
    }
    Ok((rows, stages.stages().to_vec()))
}

pub fn run_experiment(exp: Experiment, cfg: &SystemConfig, run: &RunSettings) -> Res<Outcome> {
    let (axis, (rows, stages)) = match exp {
        Experiment::NmseVsSnr => ("pilot_snr_db", nmse_vs_snr(cfg, run)?),
        Experiment::SeVsDoppler => ("fd_ts", se_vs_doppler(cfg, run)?),
        Experiment::SeVsTime => ("n", se_vs_time(cfg, run)?),
        Experiment::SeVsL => ("L", se_vs_l(cfg, run)?),
        Experiment::SeVsM => ("M", se_vs_m(cfg, run)?),
        Experiment::Convergence => ("iteration", convergence(cfg, run)?),
        Experiment::InitSensitivity => ("realization", init_sensitivity(cfg, run)?),
    };
    Ok(Outcome { axis, rows, stages })
}

const VELOCITIES_NMSE: [f64; 3] = [0.0, 50.0, 135.0];

/// Mean NMSE over UEs with covariances normalized to unit average gain, so
/// the pilot SNR is the received one.
fn nmse_vs_snr(cfg: &SystemConfig, run: &RunSettings) -> Res<(Vec<Row>, Vec<Stage>)> {
    let snrs: Vec<f64> = (0..=14).map(|i| -10.0 + 5.0 * i as f64).collect();
    let mut base = cfg.clone();
    base.ris_correlation = RisCorrelation::Identity;
    let stats = scenario::build_statistics(&base, &scenario::initial_theta(base.l)).at("setup", "statistics")?;
    let m = base.m as f64;
    let r_norm: Vec<CMat> = stats.r.iter().map(|r| r.scale(m / linalg::trace(r).re)).collect();
    let roots: Vec<CMat> = r_norm.iter().map(linalg::sqrt_psd).collect();
    run_items(&VELOCITIES_NMSE, |&v, t| {
        let c = with_velocity(&base, v);
        let aging = AgingProfile::from_config(&c);
        let zeta = c.first_data_index();
        let a_train: Vec<f64> = (0..c.k).map(|k| aging.alpha(k, zeta - c.pilot_slots[k])).collect();
        let mut rows = Vec::new();
        for &snr in &snrs {
            let s = 10f64.powf(-snr / 10.0);
            let ctx = format!("{} snr={snr}", vlabel(v));
            let model = t.time("de", || EstimationModel::with_alpha_train(&r_norm, s, &a_train)).at("estimation", &ctx)?;
            let de = (0..c.k).map(|k| estimation::nmse(&model, k)).sum::<f64>() / c.k as f64;
            let mc = t.time("mc", || nmse_mc(&model, &roots, s, run)).at("mc", &ctx)?;
            rows.push(Row::new("mmse", vlabel(v), snr).de(de).mc(mc.0, mc.1));
        }
        Ok(rows)
    })
}

/// Empirical `‖h_ζ − ĥ‖²/tr(R)` averaged over UEs; mean and 95% half-width
/// over trials.
fn nmse_mc(model: &EstimationModel, roots: &[CMat], s: f64, run: &RunSettings) -> ris_aging_core::Result<(f64, f64)> {
    let k = model.k();
    let m = roots[0].nrows();
    let mut vals = Vec::with_capacity(run.trials);
    for trial in 0..run.trials {
        let mut rng = trial_rng(run.seed, trial as u64);
        let mut acc = 0.0;
        for u in 0..k {
            let a = model.alpha_train[u];
            let abar = (1.0 - a * a).max(0.0).sqrt();
            let h = &roots[u] * complex_normal(&mut rng, m, 1);
            let noise = complex_normal(&mut rng, m, 1).scale(s.sqrt());
            let innov = &roots[u] * complex_normal(&mut rng, m, 1);
            let y: CVec = (&h + noise).column(0).into();
            let hat = estimation::mmse_estimate(&y, model, u)?;
            let aged: CVec = (h.scale(a) + innov.scale(abar)).column(0).into();
            acc += (aged - hat).norm_squared() / linalg::trace(&model.r[u]).re;
        }
        vals.push(acc / k as f64);
    }
    Ok(mean_hw(&vals))
}

fn mean_hw(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Sum SE at the default phases and equal powers for `f_D T_s` on a grid;
/// the Doppler is applied to every UE.
fn se_vs_doppler(cfg: &SystemConfig, run: &RunSettings) -> Res<(Vec<Row>, Vec<Stage>)> {
    let xs: Vec<f64> = (0..=60).map(|i| i as f64 / 100.0).collect();
    let large = large_scale(cfg)?;
    let no_ris = Arc::new(large.without_ris());
    run_items(&xs, |&x, t| {
        let mut c = cfg.clone();
        c.fd = vec![x / c.ts; c.k];
        let aging = AgingProfile::from_config(&c);
        let series = format!("L={}", c.l);
        let mut rows = Vec::new();
        for (tag, ls) in [("rzf", &large), ("no-ris", &no_ris)] {
            let problem = Problem::new(ls.clone(), &c, aging.clone());
            let op = Operating { c: scenario::initial_theta(c.l), p: problem.equal_power(), state: None };
            let ctx = format!("{tag} fd_ts={x}");
            let (de, mc) = sum_se_pair(&problem, &op, run, t, &ctx)?;
            rows.push(Row::new(tag, series.clone(), x).de(de).mc(mc.mean, mc.half_width_95));
        }
        Ok(rows)
    })
}

/// `Σ_k log2(1+γ_{k,n})` along the data phase, each curve at its own
/// optimized operating point.
fn se_vs_time(cfg: &SystemConfig, run: &RunSettings) -> Res<(Vec<Row>, Vec<Stage>)> {
    let large = large_scale(cfg)?;
    let variants = [Variant::Static, Variant::Moving(50.0), Variant::Moving(135.0), Variant::NoRis(40.0)];
    run_items(&variants, |&var, t| {
        let problem = var.problem(cfg, &large);
        let ctx = format!("{} {}", var.baseline(), var.series());
        let op = operate(&problem, None, run, t, &ctx)?;
        let ev = t.time("de", || problem.evaluate(&op.c, None)).at("de", &ctx)?;
        let mc = t
            .time("mc", || {
                mc_run(&ev.stats, &ev.est, &problem.aging, &problem.cfg, &op.p, Precoder::Rzf, run.trials, run.seed, None)
            })
            .at("mc", &ctx)?;
        let frame = &ev.frame;
        Ok(mc
            .ns
            .iter()
            .enumerate()
            .map(|(j, &n)| {
                let de: f64 = frame.point_at(n).sinr(&op.p, frame.rho, frame.reading).iter().map(|g| (1.0 + g).log2()).sum();
                let est = mc.se_at(j);
                Row::new(var.baseline(), var.series(), n as f64).de(de).mc(est.mean, est.half_width_95)
            })
            .collect())
    })
}

fn l_grid(paper: bool) -> Vec<usize> {
    if paper {
        vec![20, 60, 100, 140, 180]
    } else {
        vec![16, 32, 64]
    }
}

fn m_grid(paper: bool) -> Vec<usize> {
    if paper {
        vec![50, 100, 150, 200]
    } else {
        vec![32, 64, 128]
    }
}

/// Optimized sum SE versus L. MRT is simulated at the RZF operating point.
fn se_vs_l(cfg: &SystemConfig, run: &RunSettings) -> Res<(Vec<Row>, Vec<Stage>)> {
    let variants = [Variant::Moving(50.0), Variant::Moving(135.0), Variant::Static, Variant::NoRis(50.0)];
    let items: Vec<(usize, Variant)> =
        l_grid(run.paper_scale).into_iter().flat_map(|l| variants.iter().map(move |&v| (l, v))).collect();
    run_items(&items, |&(l, var), t| {
        let c = cfg.resized(cfg.m, l, cfg.k);
        let large = large_scale(&c)?;
        let problem = var.problem(&c, &large);
        let ctx = format!("{} {} L={l}", var.baseline(), var.series());
        let op = operate(&problem, None, run, t, &ctx)?;
        let (de, mc) = sum_se_pair(&problem, &op, run, t, &ctx)?;
        let mut rows = vec![Row::new(var.baseline(), var.series(), l as f64).de(de).mc(mc.mean, mc.half_width_95)];
        if let Variant::Moving(_) = var {
            let mrt = mc_at(&problem, &op.c, &op.p, Precoder::Mrt, run, t, &ctx)?.sum_se();
            rows.push(Row::new("mrt", var.series(), l as f64).mc(mrt.mean, mrt.half_width_95));
        }
        Ok(rows)
    })
}

/// Pre-log rescaling for a training phase of `L + K` channel uses.
fn high_overhead_factor(cfg: &SystemConfig) -> f64 {
    let tau = cfg.l + cfg.k;
    cfg.tau_c.saturating_sub(tau) as f64 / cfg.data_len() as f64
}

/// Optimized sum SE versus M, with the high-overhead estimation comparison.
fn se_vs_m(cfg: &SystemConfig, run: &RunSettings) -> Res<(Vec<Row>, Vec<Stage>)> {
    let items: Vec<(usize, f64)> =
        m_grid(run.paper_scale).into_iter().flat_map(|m| [10.0, 100.0].map(|v| (m, v))).collect();
    run_items(&items, |&(m, v), t| {
        let c = cfg.resized(m, cfg.l, cfg.k);
        let large = large_scale(&c)?;
        let var = Variant::Moving(v);
        let problem = var.problem(&c, &large);
        let ctx = format!("{} M={m}", vlabel(v));
        let op = operate(&problem, None, run, t, &ctx)?;
        let (de, mc) = sum_se_pair(&problem, &op, run, t, &ctx)?;
        let f = high_overhead_factor(&c);
        Ok(vec![
            Row::new("rzf", vlabel(v), m as f64).de(de).mc(mc.mean, mc.half_width_95),
            Row::new("high-overhead-ce", vlabel(v), m as f64).de(de * f).mc(mc.mean * f, mc.half_width_95 * f),
        ])
    })
}

/// AO objective after each outer iteration, with MC at each iterate.
fn convergence(cfg: &SystemConfig, run: &RunSettings) -> Res<(Vec<Row>, Vec<Stage>)> {
    let ls = [(cfg.l / 2).max(1), cfg.l];
    let items: Vec<(usize, f64)> = ls.iter().flat_map(|&l| [50.0, 135.0].map(|v| (l, v))).collect();
    let forced = RunSettings { optimize: true, ..run.clone() };
    run_items(&items, |&(l, v), t| {
        let c = cfg.resized(cfg.m, l, cfg.k);
        let large = large_scale(&c)?;
        let problem = Variant::Moving(v).problem(&c, &large);
        let series = format!("L={l},{}", vlabel(v));
        let op = operate(&problem, None, &forced, t, &series)?;
        let state = op.state.expect("optimization forced on");
        let mut rows = Vec::new();
        for (&(it, value), (ci, pi)) in state.trace.iter().zip(&state.iterates) {
            let ctx = format!("{series} iteration={it}");
            let est = mc_at(&problem, ci, pi, Precoder::Rzf, run, t, &ctx)?.sum_se();
            rows.push(Row::new("rzf", series.clone(), it as f64).de(value).mc(est.mean, est.half_width_95));
        }
        Ok(rows)
    })
}

/// Per large-scale realization: AO from the default start versus the best
/// of several random phase starts.
fn init_sensitivity(cfg: &SystemConfig, run: &RunSettings) -> Res<(Vec<Row>, Vec<Stage>)> {
    let realizations: Vec<usize> = (1..=run.realizations).collect();
    let forced = RunSettings { optimize: true, ..run.clone() };
    run_items(&realizations, |&r, t| {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(r as u64);
        let large = large_scale(&c)?;
        let problem = Variant::Moving(50.0).problem(&c, &large);
        let ctx = format!("realization={r}");
        let default = operate(&problem, None, &forced, t, &ctx)?;
        let mut best: Option<Operating> = None;
        for i in 0..run.random_inits {
            let mut rng = trial_rng(run.seed ^ 0x1A17_5EED, (r * run.random_inits + i) as u64);
            let c0 = CVec::from_iterator(
                c.l,
                (0..c.l).map(|_| num_complex::Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU))),
            );
            let op = operate(&problem, Some(&c0), &forced, t, &format!("{ctx} init={i}"))?;
            let better = match &best {
                None => true,
                Some(b) => op.state.as_ref().map(|s| s.objective) > b.state.as_ref().map(|s| s.objective),
            };
            if better {
                best = Some(op);
            }
        }
        let mut rows = Vec::new();
        for (series, op) in [("init=default", Some(default)), ("init=best-random", best)] {
            let Some(op) = op else { continue };
            let (de, mc) = sum_se_pair(&problem, &op, run, t, &ctx)?;
            rows.push(Row::new("rzf", series, r as f64).de(de).mc(mc.mean, mc.half_width_95));
        }
        Ok(rows)
    })
}
