//! `run` / `sweep`: executes every cell, writes per-cell CSV and JSON, then
//! an aggregate summary table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mirror_gossip::analysis::centralized_oracle;
use mirror_gossip::engine::{run, run_with_schedule, Problem, RunSummary};
use mirror_gossip::topology::GraphSchedule;
use rayon::prelude::*;

use crate::spec::{Cell, ExperimentSpec};

pub struct TopologyFiles {
    pub save: Option<PathBuf>,
    pub load: Option<PathBuf>,
}

struct CellResult {
    cell: Cell,
    outcome: Result<RunSummary, String>,
}

/// Runs the sweep. Returns `true` when every cell succeeded.
pub fn run_experiment(spec: &ExperimentSpec, topology: &TopologyFiles) -> Result<bool> {
    spec.validate()?;
    let loaded = topology
        .load
        .as_ref()
        .map(|path| -> Result<GraphSchedule> {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.parse()
                .with_context(|| format!("topology {}", path.display()))
        })
        .transpose()?;
    fs::create_dir_all(&spec.out).with_context(|| format!("creating {}", spec.out.display()))?;

    let cells = spec.cells();
    let single = cells.len() == 1;
    let results: Vec<CellResult> = cells
        .into_par_iter()
        .map(|cell| {
            let save = topology
                .save
                .as_deref()
                .map(|p| topology_path(p, &cell.label, single));
            let outcome = run_cell(&cell, &spec.out, loaded.as_ref(), save.as_deref())
                .map_err(|e| format!("{e:#}"));
            CellResult { cell, outcome }
        })
        .collect();

    let mut ok = true;
    for r in &results {
        if let Err(e) = &r.outcome {
            ok = false;
            eprintln!("cell {} failed: {e}", r.cell.label);
            fs::write(
                spec.out.join(format!("{}.error.txt", r.cell.label)),
                format!("{e}\n"),
            )?;
        }
    }
    let table = summary_table(&results);
    fs::write(spec.out.join("summary.csv"), &table.csv)?;
    print!("{}", table.text);
    Ok(ok)
}

fn topology_path(path: &Path, label: &str, single: bool) -> PathBuf {
    if single {
        return path.to_path_buf();
    }
    let stem = path
        .file_stem()
        .map_or_else(|| "topology".into(), |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{label}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{label}"),
    };
    path.with_file_name(name)
}

fn run_cell(
    cell: &Cell,
    out: &Path,
    loaded: Option<&GraphSchedule>,
    save: Option<&Path>,
) -> Result<RunSummary> {
    let mut config = cell.config.clone();
    if config.threshold.is_none() {
        let problem = Problem::build(&config)?;
        let oracle = centralized_oracle(&problem.losses, &problem.shards, 1e-6)?;
        config.threshold = Some(1.05 * oracle.f_star);
    }
    let output = match loaded {
        Some(schedule) => run_with_schedule(&config, schedule.clone())?,
        None => run(&config)?,
    };
    if let Some(path) = save {
        fs::write(path, output.schedule.to_text())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let csv = out.join(format!("{}.csv", cell.label));
    output.metrics.write_csv(
        fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?,
    )?;
    fs::write(
        out.join(format!("{}.json", cell.label)),
        output.metrics.summary_json()?,
    )?;
    Ok(output.metrics.summary)
}

struct Table {
    csv: String,
    text: String,
}

const SUMMARY_HEADER: &str =
    "cell,runs,failed,mean_min_loss,min_min_loss,mean_final_accuracy,mean_iterations_to_threshold,reached";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// One row per seed-free cell, in sweep order.
fn summary_table(results: &[CellResult]) -> Table {
    let mut groups: Vec<(&str, Vec<&CellResult>)> = Vec::new();
    for r in results {
        match groups.iter_mut().find(|(g, _)| *g == r.cell.group) {
            Some((_, members)) => members.push(r),
            None => groups.push((&r.cell.group, vec![r])),
        }
    }
    let mut csv = format!("{SUMMARY_HEADER}\n");
    let mut text = format!(
        "{:<40} {:>4} {:>12} {:>12} {:>9} {:>10}\n",
        "cell", "runs", "mean min F", "min min F", "accuracy", "iters"
    );
    for (group, members) in groups {
        let done: Vec<&RunSummary> = members
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        let failed = members.len() - done.len();
        let min_losses: Vec<f64> = done.iter().map(|s| s.min_loss).collect();
        let accuracies: Vec<f64> = done.iter().filter_map(|s| s.final_accuracy).collect();
        let reached: Vec<f64> = done
            .iter()
            .filter(|s| s.iterations_to_threshold >= 0)
            .map(|s| s.iterations_to_threshold as f64)
            .collect();
        let best = min_losses.iter().copied().reduce(f64::min);
        let _ = writeln!(
            csv,
            "{group},{},{failed},{},{},{},{},{}",
            members.len(),
            fmt_opt(mean(&min_losses)),
            fmt_opt(best),
            fmt_opt(mean(&accuracies)),
            fmt_opt(mean(&reached)),
            reached.len()
        );
        let iters = match mean(&reached) {
            Some(v) => format!("{v:.1} ({}/{})", reached.len(), done.len()),
            None => format!("- (0/{})", done.len()),
        };
        let _ = writeln!(
            text,
            "{group:<40} {:>4} {:>12} {:>12} {:>9} {:>10}{}",
            members.len(),
            mean(&min_losses).map_or("-".into(), |v| format!("{v:.4}")),
            best.map_or("-".into(), |v| format!("{v:.4}")),
            mean(&accuracies).map_or("-".into(), |v| format!("{v:.3}")),
            iters,
            if failed > 0 {
                format!("  [{failed} failed]")
            } else {
                String::new()
            }
        );
    }
    Table { csv, text }
}
