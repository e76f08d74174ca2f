//! CSV and JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, RouteRow, RunOutcome, SummaryRow};
use crate::ma2c::EpisodeRecord;
use crate::sim::{Event, EventKind};

/// Marker for values that do not exist (no EMV, no completed trips).
pub const NA: &str = "NA";

/// Six significant digits, trailing zeros trimmed, like C's `%g`.
pub fn g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding may carry into the next decade
    let rounded: f64 = format!("{:.5e}", x).parse().expect("float literal");
    let exp = if rounded.abs() >= 10f64.powi(exp + 1) { exp + 1 } else { exp };
    if !(-4..6).contains(&exp) {
        let s = format!("{:.5e}", x);
        let (mant, e) = s.split_once('e').expect("exponent form");
        let mant = trim_zeros(mant);
        let e: i32 = e.parse().expect("exponent");
        return format!("{mant}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(g6).unwrap_or_else(|| NA.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), ExperimentError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(ExperimentError::OutputExists(dir.display().to_string()));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, ExperimentError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

pub fn write_metrics(path: &Path, combo: &str, outcomes: &[RunOutcome]) -> Result<(), ExperimentError> {
    let mut w = writer(path)?;
    w.write_record([
        "episode",
        "seed",
        "combo",
        "T_EMV_s",
        "T_avg_s",
        "emergency_lanes_formed",
        "completed_trips",
        "spawned",
        "in_network",
        "emv_links",
        "emv_arrived",
    ])?;
    for (i, o) in outcomes.iter().enumerate() {
        let m = &o.metrics;
        w.write_record([
            i.to_string(),
            o.seed.to_string(),
            combo.to_string(),
            opt(m.t_emv_or_censored()),
            opt(m.t_avg),
            m.emergency_lanes.to_string(),
            m.completed.to_string(),
            m.spawned.to_string(),
            m.in_network.to_string(),
            m.emv_links.to_string(),
            m.t_emv.is_some().to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "combo",
    "runs",
    "T_EMV_mean_s",
    "T_EMV_std_s",
    "T_avg_mean_s",
    "T_avg_std_s",
    "emergency_lanes_mean",
    "censored_runs",
    "reward_variance",
];

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), ExperimentError> {
    let mut w = writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.combo.clone(),
            r.runs.to_string(),
            opt(r.t_emv_mean),
            opt(r.t_emv_std),
            opt(r.t_avg_mean),
            opt(r.t_avg_std),
            opt(r.emergency_lanes_mean),
            r.censored.to_string(),
            opt(r.reward_variance),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a summary written by [`write_summary`]; `NA` cells become `None`.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    let cell = |s: &str| if s == NA { None } else { s.parse::<f64>().ok() };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(SummaryRow {
            combo: rec[0].to_string(),
            runs: rec[1].parse().unwrap_or(0),
            t_emv_mean: cell(&rec[2]),
            t_emv_std: cell(&rec[3]),
            t_avg_mean: cell(&rec[4]),
            t_avg_std: cell(&rec[5]),
            emergency_lanes_mean: cell(&rec[6]),
            censored: rec[7].parse().unwrap_or(0),
            reward_variance: cell(&rec[8]),
        });
    }
    Ok(out)
}

pub fn write_route(path: &Path, combo: &str, outcomes: &[RunOutcome]) -> Result<(), ExperimentError> {
    let mut w = writer(path)?;
    w.write_record(["seed", "combo", "time_s", "link", "from", "to", "pos_m", "speed_mps", "lane_formed", "eta_s", "next"])?;
    for o in outcomes {
        for RouteRow {
            time_s,
            link,
            from,
            to,
            pos_m,
            speed,
            lane_formed,
            eta_s,
            next,
        } in &o.route
        {
            w.write_record([
                o.seed.to_string(),
                combo.to_string(),
                g6(*time_s),
                link.to_string(),
                from.to_string(),
                to.to_string(),
                g6(*pos_m),
                g6(*speed),
                lane_formed.to_string(),
                opt(*eta_s),
                next.map(|n| n.to_string()).unwrap_or_else(|| NA.into()),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn event_name(k: EventKind) -> &'static str {
    match k {
        EventKind::Spawn => "spawn",
        EventKind::EnterLink => "enter_link",
        EventKind::Complete => "complete",
        EventKind::EmvDispatch => "emv_dispatch",
        EventKind::EmvEnterLink => "emv_enter_link",
        EventKind::EmvArrive => "emv_arrive",
    }
}

pub fn write_events(path: &Path, outcomes: &[RunOutcome]) -> Result<(), ExperimentError> {
    let mut w = writer(path)?;
    w.write_record(["seed", "time_s", "event_type", "vehicle_id", "lane_id"])?;
    for o in outcomes {
        for Event { time_s, kind, vehicle, lane } in &o.events {
            w.write_record([
                o.seed.to_string(),
                g6(*time_s),
                event_name(*kind).to_string(),
                vehicle.to_string(),
                lane.map(|l| l.to_string()).unwrap_or_else(|| NA.into()),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_learning_curve(path: &Path, rows: &[EpisodeRecord]) -> Result<(), ExperimentError> {
    let mut w = writer(path)?;
    w.write_record(["episode", "seed", "T_EMV_s", "T_avg_s", "mean_reward"])?;
    for r in rows {
        w.write_record([r.episode.to_string(), r.seed.to_string(), opt(r.t_emv), opt(r.t_avg), g6(r.mean_reward)])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_learning_curve(path: &Path) -> Result<Vec<EpisodeRecord>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    let cell = |s: &str| if s == NA { None } else { s.parse::<f64>().ok() };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(EpisodeRecord {
            episode: rec[0].parse().unwrap_or(0),
            seed: rec[1].parse().unwrap_or(0),
            t_emv: cell(&rec[2]),
            t_avg: cell(&rec[3]),
            mean_reward: cell(&rec[4]).unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

/// Provenance of one command run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub scenario: String,
    pub scenario_path: Option<PathBuf>,
    pub scenario_hash: String,
    pub seeds: Vec<u64>,
    /// Command-specific settings and the scenario file as parsed.
    pub config: serde_json::Value,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        let path = dir.join(Self::FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Manifest, ExperimentError> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `git describe` of the working tree when available, else the crate version.
pub fn version_string() -> String {
    let pkg = concat!("v", env!("CARGO_PKG_VERSION"));
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| format!("{pkg}-{}", s.trim()))
        .unwrap_or_else(|| pkg.to_string())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn copy(from: &Path, to: &Path) -> Result<(), ExperimentError> {
    fs::copy(from, to).map(|_| ()).map_err(io_err(from))
}
