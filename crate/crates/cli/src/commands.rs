use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use fscil_core::metrics::evaluate_session;
use fscil_core::pipeline::{checkpoint_path, latest_checkpoint, run_ablation_grid, AblationRow};
use fscil_core::protocol::RealizedSplit;
use fscil_core::record::run_id;
use fscil_core::{run_experiment, Dataset, Error, ExperimentConfig, ExperimentRecord, RunOptions, RunState, TaskStream, TrickToggles};
use serde::Serialize;
use serde_json::json;

use crate::args::{AblateArgs, Cli, Command, EvalArgs, GlobalArgs, ReportArgs, RunArgs, SweepArgs};
use crate::report::{self, write_file, Table};

/// Misuse of the command line that clap cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 config or usage, 3 data or records, 4 divergence, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::Data(_)
                | Error::InsufficientClasses { .. }
                | Error::InsufficientShots { .. }
                | Error::Checkpoint(_)
                | Error::VersionMismatch(_) => 3,
                Error::Divergence { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Run(a) => cmd_run(g, a).map(|_| ()),
        Command::Report(a) => cmd_report(g, a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(g, a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(g, a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
    }
}

/// File config (or defaults), then overrides, then `--seed`; validated.
pub fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let base = match &g.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.data.load().map_err(|e| match e {
        Error::Io { .. } | Error::Json(_) => Error::Data(e.to_string()),
        other => other,
    })
    .context("loading dataset")
}

/// Makes `dir` usable for fresh output: refuses a non-empty directory
/// unless `force`, which clears it.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if occupied {
            if !force {
                return Err(usage(format!("{} is not empty; pass --force to replace it", dir.display())));
            }
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

pub fn cmd_run(g: &GlobalArgs, a: &RunArgs) -> Result<PathBuf> {
    let cfg = load_config(g)?;
    let dataset = load_dataset(&cfg)?;
    let dir = g.out.clone().unwrap_or_else(|| g.run_root.join(run_id(&cfg)));
    if !a.resume {
        prepare_dir(&dir, a.force)?;
    }
    let opts = RunOptions { run_dir: Some(dir.clone()), resume: a.resume, stop_after_session: a.stop_after };
    let outcome = run_experiment(&cfg, &dataset, &opts)?;
    println!("{}", dir.display());
    println!("session  total   base    novel");
    for r in &outcome.state.results {
        println!("{:<8} {:.4}  {}  {}", r.session_index, r.total_accuracy, fmt_opt(r.base_accuracy), fmt_opt(r.novel_accuracy));
    }
    if !outcome.completed {
        eprintln!("stopped after session {}; continue with --resume", outcome.state.session_index);
    }
    Ok(dir)
}

pub fn cmd_report(g: &GlobalArgs, a: &ReportArgs) -> Result<PathBuf> {
    if a.runs.is_empty() {
        return Err(usage("report needs at least one run"));
    }
    let records = report::load_records(&a.runs)?;
    let out = match &g.out {
        Some(o) => o.clone(),
        None if a.runs[0].is_dir() => a.runs[0].join("report"),
        None => a.runs[0].parent().unwrap_or(Path::new(".")).join("report"),
    };
    report::write_report(&records, &out)?;
    print!("{}", report::session_table(&records, true).to_markdown());
    println!("{}", out.display());
    Ok(out)
}

/// `key=v1,v2,...` into its key and override strings.
pub fn parse_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid `{spec}` is not key=v1,v2,...")))?;
    let key = key.trim().to_string();
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if key.is_empty() || values.is_empty() {
        return Err(Error::Config(format!("grid `{spec}` needs a key and at least one value")).into());
    }
    Ok((key, values))
}

/// Cartesian product of the axes, last axis varying fastest.
pub fn grid_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |cells, (key, values)| {
        cells
            .iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push(format!("{key}={v}"));
                    c
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub rank: usize,
    pub cell: usize,
    pub settings: Vec<String>,
    pub run_id: String,
    pub final_accuracy: f64,
    pub base_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
}

/// Rows ranked by final accuracy, best first; ties keep cell order.
pub fn rank_cells(cells: &[Vec<String>], records: &[ExperimentRecord]) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = cells
        .iter()
        .zip(records)
        .enumerate()
        .map(|(i, (settings, r))| {
            let last = r.sessions.last();
            SweepRow {
                rank: 0,
                cell: i,
                settings: settings.clone(),
                run_id: r.run_id.clone(),
                final_accuracy: r.final_accuracy().unwrap_or(f64::NAN),
                base_accuracy: last.and_then(|s| s.base_accuracy),
                novel_accuracy: last.and_then(|s| s.novel_accuracy),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.final_accuracy.total_cmp(&a.final_accuracy).then(a.cell.cmp(&b.cell)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    rows
}

fn sweep_table(rows: &[SweepRow]) -> Table {
    Table {
        header: ["rank", "cell", "settings", "final", "base", "novel", "run"].map(String::from).to_vec(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.rank.to_string(),
                    format!("cell-{:02}", r.cell),
                    r.settings.join(" "),
                    r.final_accuracy.to_string(),
                    r.base_accuracy.map_or_else(String::new, |v| v.to_string()),
                    r.novel_accuracy.map_or_else(String::new, |v| v.to_string()),
                    r.run_id.clone(),
                ]
            })
            .collect(),
        source: rows.iter().map(|r| r.run_id.clone()).collect(),
    }
}

pub fn cmd_sweep(g: &GlobalArgs, a: &SweepArgs) -> Result<PathBuf> {
    let base = load_config(g)?;
    let axes = a.grid.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>>>()?;
    let cells = grid_cells(&axes);
    let configs = cells
        .iter()
        .map(|ov| base.with_overrides(ov).with_context(|| format!("grid cell {}", ov.join(" "))))
        .collect::<Result<Vec<_>>>()?;
    let mut datasets: Vec<(fscil_core::DataSource, Dataset)> = Vec::new();
    for cfg in &configs {
        if !datasets.iter().any(|(src, _)| *src == cfg.data) {
            datasets.push((cfg.data.clone(), load_dataset(cfg)?));
        }
    }
    let out = g.out.clone().unwrap_or_else(|| g.run_root.join(format!("sweep-{}", &run_id(&base)[4..])));
    prepare_dir(&out, a.force)?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ExperimentRecord>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..a.jobs.clamp(1, configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let data = &datasets.iter().find(|(src, _)| *src == cfg.data).expect("dataset loaded").1;
                let opts = RunOptions { run_dir: Some(out.join(format!("cell-{i:02}"))), ..RunOptions::default() };
                eprintln!("cell-{i:02}: {}", cells[i].join(" "));
                let rec = run_experiment(cfg, data, &opts)
                    .map_err(anyhow::Error::from)
                    .and_then(|o| o.record.context("run did not complete"))
                    .with_context(|| format!("cell-{i:02} ({})", cells[i].join(" ")));
                slots.lock().expect("no panics while locked")[i] = Some(rec);
            });
        }
    });
    let records = slots
        .into_inner()
        .expect("no panics while locked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;

    let rows = rank_cells(&cells, &records);
    let table = sweep_table(&rows);
    table.write(&out, "summary")?;
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&json!({ "axes": axes, "rows": rows }))?)?;
    print!("{}", table.to_markdown());
    println!("{}", out.display());
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationLine {
    pub stability: bool,
    pub adaptability: bool,
    pub training: bool,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

/// Seed-averaged grid rows and the drop from removing each group from the
/// all-on cell.
pub fn summarise_ablation(per_seed: &[Vec<AblationRow>]) -> (Vec<AblationLine>, BTreeMap<&'static str, f64>) {
    let lines: Vec<AblationLine> = group_combinations()
        .iter()
        .enumerate()
        .map(|(i, &(s, a, t))| {
            let per: Vec<f64> = per_seed.iter().map(|rows| rows[i].final_accuracy).collect();
            AblationLine { stability: s, adaptability: a, training: t, mean: per.iter().sum::<f64>() / per.len() as f64, per_seed: per }
        })
        .collect();
    let find = |s, a, t| lines.iter().find(|l| (l.stability, l.adaptability, l.training) == (s, a, t)).map(|l| l.mean).expect("full grid");
    let all = find(true, true, true);
    let drops = BTreeMap::from([
        ("stability", all - find(false, true, true)),
        ("adaptability", all - find(true, false, true)),
        ("training", all - find(true, true, false)),
    ]);
    (lines, drops)
}

/// `(stability, adaptability, training)` for every cell, all-on first.
pub fn group_combinations() -> Vec<(bool, bool, bool)> {
    (0..8u8).rev().map(|b| (b & 4 != 0, b & 2 != 0, b & 1 != 0)).collect()
}

pub fn cmd_ablate(g: &GlobalArgs, a: &AblateArgs) -> Result<PathBuf> {
    let cfg = load_config(g)?;
    let dataset = load_dataset(&cfg)?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    let subsets: Vec<TrickToggles> = group_combinations().into_iter().map(|(s, ad, t)| TrickToggles::from_groups(s, ad, t)).collect();
    let out = g.out.clone().unwrap_or_else(|| g.run_root.join(format!("ablation-{}", &run_id(&cfg)[4..])));
    prepare_dir(&out, a.force)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut sources = Vec::new();
    for &seed in &seeds {
        eprintln!("seed {seed}");
        let seeded = ExperimentConfig { seed, ..cfg.clone() };
        sources.extend(subsets.iter().map(|&tricks| run_id(&ExperimentConfig { tricks, ..seeded.clone() })));
        per_seed.push(run_ablation_grid(&seeded, &dataset, &subsets)?);
    }
    let (lines, drops) = summarise_ablation(&per_seed);
    let mark = |b: bool| if b { "x" } else { "" }.to_string();
    let mut header: Vec<String> = ["stability", "adaptability", "training"].map(String::from).to_vec();
    header.extend(seeds.iter().map(|s| format!("seed {s}")));
    header.push("mean".into());
    let table = Table {
        header,
        rows: lines
            .iter()
            .map(|l| {
                let mut row = vec![mark(l.stability), mark(l.adaptability), mark(l.training)];
                row.extend(l.per_seed.iter().map(|v| v.to_string()));
                row.push(l.mean.to_string());
                row
            })
            .collect(),
        source: sources,
    };
    table.write(&out, "ablation")?;
    let json = json!({ "seeds": seeds, "rows": lines, "group_drops": drops, "raw": per_seed, "source_run_ids": table.source });
    write_file(&out.join("ablation.json"), serde_json::to_string_pretty(&json)?)?;
    print!("{}", table.to_markdown());
    for (group, d) in &drops {
        println!("removing {group}: {:+.2} pts", -100.0 * d);
    }
    println!("{}", out.display());
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub run_id: String,
    pub checkpoint: PathBuf,
    pub session_index: usize,
    pub result: fscil_core::SessionResult,
    pub matches_checkpoint: bool,
}

/// Re-evaluates a checkpoint with the run's own config snapshot and split.
pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let dir = &a.run_dir;
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let dataset = load_dataset(&cfg)?;
    let split = RealizedSplit::load(&dir.join("split.json"))?;
    let stream = TaskStream::from_split(&dataset, &split)?;
    let checkpoint = match a.session {
        Some(t) => checkpoint_path(dir, t),
        None => latest_checkpoint(dir)?.ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", dir.display())))?,
    };
    let state = RunState::load(&checkpoint)?;
    state.check_config(&cfg)?;
    let t = state.session_index;
    let test = stream.cumulative_test_set(t)?;
    let refs: Vec<_> = test.iter().map(|s| s.as_ref()).collect();
    let (result, _) = evaluate_session(t, &state.classifier, &state.encoder, &refs, stream.base_classes())?;
    let report = EvalReport {
        run_id: run_id(&cfg),
        checkpoint,
        session_index: t,
        matches_checkpoint: state.results.get(t) == Some(&result),
        result,
    };
    write_file(&dir.join(format!("eval-session-{t}.json")), serde_json::to_string_pretty(&report)?)?;
    println!(
        "session {t}: total {:.4} base {} novel {} ({})",
        report.result.total_accuracy,
        fmt_opt(report.result.base_accuracy),
        fmt_opt(report.result.novel_accuracy),
        if report.matches_checkpoint { "matches checkpoint" } else { "differs from checkpoint" }
    );
    Ok(report)
}
