use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use aeqa::experiment::{pct, transcript_label, ExperimentReport, CONFIG_FILE, RESULTS_FILE};
use serde_json::Value;

use crate::config::{read_json, require, write_text, RunConfig, RUN_CONFIG_FILE};
use crate::failure::{CmdResult, Failure};

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Experiment output directories, or directories whose subdirectories
    /// are experiment outputs (a sweep).
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Directory for report.md and accuracy_vs_rho.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const REPORT_MD: &str = "report.md";
pub const SWEEP_CSV: &str = "accuracy_vs_rho.csv";

pub struct Run {
    pub name: String,
    pub results: ExperimentReport,
    /// Flattened effective config, `a.b.c -> value`.
    pub config: BTreeMap<String, String>,
}

pub fn run(mut cfg: RunConfig, args: ReportArgs) -> CmdResult {
    if args.out.is_some() {
        cfg.out = args.out;
    }
    let out = require(cfg.out.clone(), "--out")?;
    let runs = collect_runs(&args.runs)?;
    let md = render_markdown(&runs);
    write_text(&out.join(REPORT_MD), &md)?;
    write_text(&out.join(SWEEP_CSV), &render_csv(&runs))?;
    print!("{md}");
    Ok(())
}

/// Expands sweep directories and loads every run, sorted by name within a
/// sweep.
pub fn collect_runs(dirs: &[PathBuf]) -> CmdResult<Vec<Run>> {
    let mut runs = Vec::new();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(Failure::Data(format!("{}: not a directory", dir.display())));
        }
        if dir.join(RESULTS_FILE).exists() {
            runs.push(load_run(dir)?);
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subs.sort();
        let before = runs.len();
        for sub in subs {
            if sub.join(RESULTS_FILE).exists() {
                runs.push(load_run(&sub)?);
            }
        }
        if runs.len() == before {
            return Err(Failure::Data(format!(
                "{}: missing {RESULTS_FILE} (not a run, and no subdirectory holds one)",
                dir.display()
            )));
        }
    }
    let mut seen = BTreeMap::<String, usize>::new();
    for r in &mut runs {
        let n = seen.entry(r.name.clone()).or_default();
        *n += 1;
        if *n > 1 {
            r.name = format!("{} ({n})", r.name);
        }
    }
    Ok(runs)
}

fn load_run(dir: &Path) -> CmdResult<Run> {
    let results: ExperimentReport = read_json(&dir.join(RESULTS_FILE))?;
    let config_path = [RUN_CONFIG_FILE, CONFIG_FILE]
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| Failure::Data(format!("{}: missing {RUN_CONFIG_FILE} and {CONFIG_FILE}", dir.display())))?;
    let value: Value = read_json(&config_path)?;
    let mut config = BTreeMap::new();
    flatten("", &value, &mut config);
    config.insert("rho".into(), results.rho.to_string());
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(Run { name, results, config })
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Keys whose values are not identical across all runs. Output paths
/// always differ and are left out.
pub fn config_diff(runs: &[Run]) -> Vec<String> {
    let mut keys: Vec<&String> = runs.iter().flat_map(|r| r.config.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| !matches!(k.as_str(), "out" | "data" | "init" | "checkpoint"))
        .filter(|k| {
            let first = runs[0].config.get(*k);
            runs.iter().any(|r| r.config.get(*k) != first)
        })
        .cloned()
        .collect()
}

pub fn render_markdown(runs: &[Run]) -> String {
    let mut s = String::from("# Accuracy (dev / test, %)\n\n| Model | |");
    for r in runs {
        let _ = write!(s, " {} |", r.name);
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---:|".repeat(runs.len()));
    s.push('\n');
    let mut rows: Vec<(&str, &str, &str)> = Vec::new();
    for r in runs {
        for sys in &r.results.systems {
            if !rows.iter().any(|(k, _, _)| *k == sys.key) {
                rows.push((&sys.key, &sys.group, &sys.label));
            }
        }
    }
    let mut last_group = "";
    for (key, group, label) in rows {
        let shown = if group != last_group { group } else { "" };
        last_group = group;
        let _ = write!(s, "| {shown} | {label} |");
        for r in runs {
            match r.results.system(key) {
                Some(sc) => {
                    let _ = write!(s, " {} / {} |", pct(sc.dev), pct(sc.test));
                }
                None => s.push_str(" n/a |"),
            }
        }
        s.push('\n');
    }

    s.push_str("\n# Transcript conditions (dev / test, %)\n\n| Training | Dev & Test |");
    for r in runs {
        let _ = write!(s, " {} |", r.name);
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---:|".repeat(runs.len()));
    s.push('\n');
    let mut cells = Vec::new();
    for r in runs {
        for t in &r.results.transcripts {
            if !cells.contains(&(t.train, t.eval)) {
                cells.push((t.train, t.eval));
            }
        }
    }
    for (train, eval) in cells {
        let _ = write!(s, "| {} | {} |", transcript_label(train), transcript_label(eval));
        for r in runs {
            match r.results.transcript(train, eval) {
                Some(sc) => {
                    let _ = write!(s, " {} / {} |", pct(sc.dev), pct(sc.test));
                }
                None => s.push_str(" n/a |"),
            }
        }
        s.push('\n');
    }

    if runs.len() > 1 {
        s.push_str("\n# Config differences\n\n");
        let diff = config_diff(runs);
        if diff.is_empty() {
            s.push_str("All runs share one configuration.\n");
        } else {
            s.push_str("| Field |");
            for r in runs {
                let _ = write!(s, " {} |", r.name);
            }
            s.push_str("\n|---|");
            s.push_str(&"---|".repeat(runs.len()));
            s.push('\n');
            for k in diff {
                let _ = write!(s, "| **{k}** |");
                for r in runs {
                    let _ = write!(s, " {} |", r.config.get(&k).map_or("-", String::as_str));
                }
                s.push('\n');
            }
        }
    }
    s
}

/// One row per run, ordered by corruption rate: dev and test accuracy of
/// every system.
pub fn render_csv(runs: &[Run]) -> String {
    let mut keys: Vec<&str> = Vec::new();
    for r in runs {
        for sys in &r.results.systems {
            if !keys.contains(&sys.key.as_str()) {
                keys.push(&sys.key);
            }
        }
    }
    let mut s = String::from("rho,seed,run");
    for k in &keys {
        let _ = write!(s, ",{k}_dev,{k}_test");
    }
    s.push('\n');
    let mut order: Vec<&Run> = runs.iter().collect();
    order.sort_by(|a, b| a.results.rho.total_cmp(&b.results.rho).then_with(|| a.name.cmp(&b.name)));
    for r in order {
        let _ = write!(s, "{},{},{}", r.results.rho, r.results.seed, r.name.replace(',', ";"));
        for k in &keys {
            match r.results.system(k) {
                Some(sc) => {
                    let _ = write!(s, ",{},{}", sc.dev, sc.test);
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}
