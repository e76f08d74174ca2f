//! The train, evaluate, benchmark, ablate and report workflows.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::io::{self, g6, opt, Manifest};
use super::{ablation_options, make_strategy, parallel_map, run_seeds, tail_variance, ExperimentError, SummaryRow, ABLATIONS, COMBOS};
use crate::ma2c::{checkpoint, EpisodeRecord, TrainOptions, Trainer};
use crate::scenario::Scenario;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Where a scenario came from, for manifests.
#[derive(Clone, Debug)]
pub struct ScenarioRef<'a> {
    pub scenario: &'a Scenario,
    pub path: Option<PathBuf>,
}

fn manifest(command: &str, s: &ScenarioRef<'_>, seeds: Vec<u64>, config: serde_json::Value) -> Manifest {
    Manifest {
        command: command.into(),
        version: io::version_string(),
        scenario: s.scenario.name.clone(),
        scenario_path: s.path.clone(),
        scenario_hash: s.scenario.hash(),
        seeds,
        config: json!({ "run": config, "scenario": s.scenario.source }),
    }
}

/// Trains from scratch and writes the checkpoint and learning curve.
pub fn run_train(
    s: &ScenarioRef<'_>,
    opts: TrainOptions,
    episodes: usize,
    out: &Path,
    force: bool,
    mut progress: impl FnMut(&EpisodeRecord),
) -> Result<(Trainer, Vec<EpisodeRecord>), ExperimentError> {
    io::prepare_out_dir(out, force)?;
    let (trainer, curve) = train_into(s, opts, episodes, out, &mut progress)?;
    manifest(
        "train",
        s,
        vec![opts.seed],
        json!({ "episodes": episodes, "options": opts, "train": trainer.cfg }),
    )
    .write(out)?;
    Ok((trainer, curve))
}

fn train_into(
    s: &ScenarioRef<'_>,
    opts: TrainOptions,
    episodes: usize,
    out: &Path,
    progress: &mut dyn FnMut(&EpisodeRecord),
) -> Result<(Trainer, Vec<EpisodeRecord>), ExperimentError> {
    let mut trainer = Trainer::new(s.scenario, opts);
    trainer.plan(s.scenario, episodes);
    let curve = trainer.train(s.scenario, episodes, progress)?;
    checkpoint::save(&trainer, &out.join(CHECKPOINT_FILE))?;
    io::write_learning_curve(&out.join(CURVE_FILE), &curve)?;
    Ok((trainer, curve))
}

fn evaluate_into(
    s: &ScenarioRef<'_>,
    combo: &str,
    trainer: Option<&Trainer>,
    seeds: &[u64],
    dir: &Path,
    workers: usize,
) -> Result<SummaryRow, ExperimentError> {
    if let Some(t) = trainer {
        t.check_network(s.scenario)?;
    }
    let strategy = make_strategy(combo, trainer)?;
    let outcomes = run_seeds(strategy.as_ref(), s.scenario, seeds, true, workers)?;
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    io::write_metrics(&dir.join("metrics.csv"), strategy.name(), &outcomes)?;
    if strategy.has_emv() {
        io::write_route(&dir.join("route.csv"), strategy.name(), &outcomes)?;
    }
    io::write_events(&dir.join("events.csv"), &outcomes)?;
    Ok(SummaryRow::from_outcomes(strategy.name(), strategy.has_emv(), &outcomes))
}

/// Runs each combo on every seed; one sub-directory per combo plus a summary.
pub fn run_benchmark(
    s: &ScenarioRef<'_>,
    combos: &[String],
    seeds: &[u64],
    trainer: Option<&Trainer>,
    out: &Path,
    force: bool,
    workers: usize,
) -> Result<Vec<SummaryRow>, ExperimentError> {
    for c in combos {
        if !COMBOS.contains(&c.as_str()) {
            return Err(ExperimentError::UnknownCombo(c.clone()));
        }
        if c == "emvlight" && trainer.is_none() {
            return Err(ExperimentError::MissingCheckpoint);
        }
    }
    io::prepare_out_dir(out, force)?;
    let mut rows = Vec::with_capacity(combos.len());
    for c in combos {
        let t = if c == "emvlight" { trainer } else { None };
        rows.push(evaluate_into(s, c, t, seeds, &out.join(c), workers)?);
    }
    io::write_summary(&out.join(SUMMARY_FILE), &rows)?;
    manifest(
        "benchmark",
        s,
        seeds.to_vec(),
        json!({
            "combos": combos,
            "checkpoint_scenario_hash": trainer.map(|t| t.scenario_hash.clone()),
            "checkpoint_options": trainer.map(|t| t.opts),
        }),
    )
    .write(out)?;
    Ok(rows)
}

/// Trains the full method and each ablation with the same seed, then
/// evaluates them all on `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    s: &ScenarioRef<'_>,
    which: &[String],
    train_seed: u64,
    episodes: usize,
    seeds: &[u64],
    out: &Path,
    force: bool,
    workers: usize,
) -> Result<Vec<SummaryRow>, ExperimentError> {
    let mut variants = vec!["full".to_string()];
    for w in which {
        if w == "all" {
            variants.extend(ABLATIONS.iter().map(|a| a.to_string()));
        } else {
            ablation_options(w, train_seed)?;
            variants.push(w.clone());
        }
    }
    variants.dedup();
    io::prepare_out_dir(out, force)?;
    let results = parallel_map(&variants, workers, |v| -> Result<SummaryRow, ExperimentError> {
        let dir = out.join(v);
        fs::create_dir_all(&dir).map_err(|source| ExperimentError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let opts = ablation_options(v, train_seed)?;
        let (trainer, curve) = train_into(s, opts, episodes, &dir, &mut |_| {})?;
        // seeds run serially here; variants already occupy the workers
        let mut row = evaluate_into(s, "emvlight", Some(&trainer), seeds, &dir, 1)?;
        row.combo = v.clone();
        row.reward_variance = tail_variance(&curve.iter().map(|r| r.mean_reward).collect::<Vec<_>>());
        Ok(row)
    });
    let rows: Vec<SummaryRow> = results.into_iter().collect::<Result<_, _>>()?;
    io::write_summary(&out.join(SUMMARY_FILE), &rows)?;
    manifest(
        "ablate",
        s,
        seeds.to_vec(),
        json!({ "variants": variants, "train_seed": train_seed, "episodes": episodes }),
    )
    .write(out)?;
    Ok(rows)
}

fn cell(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{} ± {}", g6(m), g6(s)),
        (Some(m), None) => g6(m),
        _ => "N/A".into(),
    }
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut stack = vec![(root.to_path_buf(), 0)];
    while let Some((dir, depth)) = stack.pop() {
        if dir.join(Manifest::FILE).is_file() {
            found.push(dir.clone());
        }
        if depth < 2 {
            if let Ok(rd) = fs::read_dir(&dir) {
                for e in rd.flatten() {
                    let p = e.path();
                    if p.is_dir() && p.file_name().is_some_and(|n| n != "plotdata") {
                        stack.push((p, depth + 1));
                    }
                }
            }
        }
    }
    found.sort();
    found
}

fn label(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let s = rel.display().to_string().replace(['/', '\\'], "_");
    if s.is_empty() {
        "root".into()
    } else {
        s
    }
}

/// Writes `report.md` and `plotdata/` from every run found under `root`.
pub fn emit_report(root: &Path) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(root).map_err(|source| ExperimentError::Io {
        path: root.display().to_string(),
        source,
    })?;
    let plot = root.join("plotdata");
    let mut md = String::from("# Results\n\n");
    let runs = run_dirs(root);
    if runs.is_empty() {
        md.push_str("No runs found.\n");
        io::write_text(&root.join("report.md"), &md)?;
        return Ok(root.join("report.md"));
    }
    fs::create_dir_all(&plot).map_err(|source| ExperimentError::Io {
        path: plot.display().to_string(),
        source,
    })?;
    let mut gaps = Vec::new();
    for dir in &runs {
        let m = Manifest::read(dir)?;
        let name = label(root, dir);
        md.push_str(&format!(
            "## {} `{}`\n\nScenario `{}` (sha256 {}), seeds {:?}, version {}.\n\n",
            m.command,
            name,
            m.scenario,
            &m.scenario_hash[..12.min(m.scenario_hash.len())],
            m.seeds,
            m.version
        ));
        match m.command.as_str() {
            "benchmark" | "eval" | "ablate" => {
                let path = dir.join(SUMMARY_FILE);
                if !path.is_file() {
                    md.push_str("Summary missing.\n\n");
                    gaps.push(format!("{name}: {SUMMARY_FILE}"));
                    continue;
                }
                let rows = io::read_summary(&path)?;
                let ablate = m.command == "ablate";
                md.push_str(if ablate {
                    "| Variant | T_EMV (s) | T_avg (s) | Emergency lanes | Reward variance, last 25% |\n|---|---|---|---|---|\n"
                } else {
                    "| Method | T_EMV (s) | T_avg (s) | Emergency lanes | Runs |\n|---|---|---|---|---|\n"
                });
                for r in &rows {
                    let last = if ablate { opt(r.reward_variance) } else { r.runs.to_string() };
                    md.push_str(&format!(
                        "| {} | {} | {} | {} | {} |\n",
                        r.combo,
                        cell(r.t_emv_mean, r.t_emv_std),
                        cell(r.t_avg_mean, r.t_avg_std),
                        r.emergency_lanes_mean.map(g6).unwrap_or_else(|| "N/A".into()),
                        last
                    ));
                    let sub = dir.join(&r.combo);
                    for (file, kind) in [("route.csv", "route"), (CURVE_FILE, "learning_curve")] {
                        let src = sub.join(file);
                        if src.is_file() {
                            io::copy(&src, &plot.join(format!("{name}_{}_{kind}.csv", r.combo)))?;
                        }
                    }
                }
                md.push('\n');
            }
            "train" => {
                let path = dir.join(CURVE_FILE);
                if !path.is_file() {
                    md.push_str("Learning curve missing.\n\n");
                    gaps.push(format!("{name}: {CURVE_FILE}"));
                    continue;
                }
                let curve = io::read_learning_curve(&path)?;
                let k = curve.len().div_ceil(10).max(1);
                let tail = &curve[curve.len().saturating_sub(k)..];
                let mean = |f: &dyn Fn(&EpisodeRecord) -> Option<f64>| {
                    let v: Vec<f64> = tail.iter().filter_map(f).collect();
                    super::mean_std(&v).0
                };
                let dest = format!("{name}_learning_curve.csv");
                io::copy(&path, &plot.join(&dest))?;
                md.push_str(&format!(
                    "{} episodes. Last {} episodes: mean T_EMV {} s, mean T_avg {} s, mean reward {}. Curve: `plotdata/{dest}`.\n\n",
                    curve.len(),
                    tail.len(),
                    opt(mean(&|r| r.t_emv)),
                    opt(mean(&|r| r.t_avg)),
                    opt(mean(&|r| Some(r.mean_reward)))
                ));
            }
            other => md.push_str(&format!("Unrecognised command `{other}`.\n\n")),
        }
    }
    if !gaps.is_empty() {
        md.push_str("## Gaps\n\n");
        for g in gaps {
            md.push_str(&format!("- {g}\n"));
        }
    }
    let path = root.join("report.md");
    io::write_text(&path, &md)?;
    Ok(path)
}
