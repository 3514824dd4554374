//! CSV tables and the JSON sidecar written next to them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use ris_aging_core::scenario::SystemConfig;

pub const CSV_HEADER: [&str; 8] = ["experiment", "baseline", "series", "axis", "x", "de", "mc_mean", "mc_half_width"];

/// One CSV line. Missing estimates are written as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub baseline: &'static str,
    pub series: String,
    pub x: f64,
    pub de: Option<f64>,
    pub mc: Option<(f64, f64)>,
}

impl Row {
    pub fn new(baseline: &'static str, series: impl Into<String>, x: f64) -> Self {
        Row { baseline, series: series.into(), x, de: None, mc: None }
    }

    pub fn de(mut self, v: f64) -> Self {
        self.de = Some(v);
        self
    }

    pub fn mc(mut self, mean: f64, half_width: f64) -> Self {
        self.mc = Some((mean, half_width));
        self
    }
}

// `{}` on f64 prints the shortest string that round-trips, so the exact
// values survive the text format.
fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_csv(path: &Path, experiment: &str, axis: &str, rows: &[Row]) -> std::io::Result<()> {
    let file = fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            experiment.to_string(),
            r.baseline.to_string(),
            r.series.clone(),
            axis.to_string(),
            format!("{}", r.x),
            num(r.de),
            num(r.mc.map(|m| m.0)),
            num(r.mc.map(|m| m.1)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

/// Accumulates wall time per named stage, in first-use order.
#[derive(Debug)]
pub struct Timings {
    start: Instant,
    stages: Vec<Stage>,
}

impl Default for Timings {
    fn default() -> Self {
        Timings { start: Instant::now(), stages: Vec::new() }
    }
}

impl Timings {
    pub fn time<R>(&mut self, name: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let out = f();
        self.add(name, t.elapsed().as_secs_f64());
        out
    }

    pub fn add(&mut self, name: &str, seconds: f64) {
        match self.stages.iter_mut().find(|s| s.name == name) {
            Some(s) => s.seconds += seconds,
            None => self.stages.push(Stage { name: name.to_string(), seconds }),
        }
    }

    pub fn merge(&mut self, other: &[Stage]) {
        for s in other {
            self.add(&s.name, s.seconds);
        }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Serialize)]
pub struct Meta<'a> {
    pub experiment: &'a str,
    pub seed: u64,
    pub trials: usize,
    pub paper_scale: bool,
    pub git_revision: String,
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
    pub stages: Vec<Stage>,
    pub rows: usize,
    pub csv: String,
    pub config: &'a SystemConfig,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(std::io::Error::other)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

pub struct Paths {
    pub csv: PathBuf,
    pub meta: PathBuf,
    pub error: PathBuf,
}

impl Paths {
    pub fn new(out: &Path, experiment: &str) -> Self {
        Paths {
            csv: out.join(format!("{experiment}.csv")),
            meta: out.join(format!("{experiment}.meta.json")),
            error: out.join(format!("{experiment}.error.json")),
        }
    }
}
