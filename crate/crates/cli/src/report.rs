//! Tables and figures derived from run records. Everything here is a pure
//! function of the records it is given.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fscil_core::metrics::cumulative_distance_distribution;
use fscil_core::ExperimentRecord;
use serde_json::json;

use crate::plot::{self, Series};

/// A rectangular table with the run ids it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub source: Vec<String>,
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("| {} |\n", self.header.join(" | ")));
        out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for row in &self.rows {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out.push_str(&format!("\nsource: {}\n", self.source.join(", ")));
        out
    }

    /// CSV rows followed by a `# source:` comment line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        let mut text = String::from_utf8(w.into_inner()?)?;
        text.push_str(&format!("# source: {}\n", self.source.join(" ")));
        Ok(text)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let md = dir.join(format!("{stem}.md"));
        let csv = dir.join(format!("{stem}.csv"));
        write_file(&md, self.to_markdown())?;
        write_file(&csv, self.to_csv()?)?;
        Ok(vec![md, csv])
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Loads records from run directories or `record.json` paths.
pub fn load_records(paths: &[PathBuf]) -> Result<Vec<ExperimentRecord>> {
    paths
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("record.json") } else { p.clone() };
            ExperimentRecord::load(&file).with_context(|| format!("loading {}", file.display()))
        })
        .collect()
}

/// Legend labels: run ids, suffixed when the same run appears twice.
pub fn labels(records: &[ExperimentRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(records.len());
    for r in records {
        let seen = out.iter().filter(|l| l.split('#').next() == Some(r.run_id.as_str())).count();
        out.push(if seen == 0 { r.run_id.clone() } else { format!("{}#{}", r.run_id, seen + 1) });
    }
    out
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn raw(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn source(records: &[ExperimentRecord]) -> Vec<String> {
    records.iter().map(|r| r.run_id.clone()).collect()
}

/// One row per session, one accuracy column per run. With exactly two runs
/// a `delta` column holds second minus first.
pub fn session_table(records: &[ExperimentRecord], percent: bool) -> Table {
    let fmt = if percent { pct } else { raw };
    let mut header = vec!["session".to_string()];
    header.extend(labels(records));
    let with_delta = records.len() == 2;
    if with_delta {
        header.push("delta".into());
    }
    let sessions = records.iter().map(|r| r.sessions.len()).max().unwrap_or(0);
    let rows = (0..sessions)
        .map(|t| {
            let accs: Vec<Option<f64>> = records.iter().map(|r| r.sessions.get(t).map(|s| s.total_accuracy)).collect();
            let mut row = vec![t.to_string()];
            row.extend(accs.iter().map(|&a| fmt(a)));
            if with_delta {
                row.push(fmt(accs[0].zip(accs[1]).map(|(a, b)| b - a)));
            }
            row
        })
        .collect();
    Table { header, rows, source: source(records) }
}

/// Final-session summary per run. `drop` is first minus last accuracy.
pub fn summary_table(records: &[ExperimentRecord], percent: bool) -> Table {
    let fmt = if percent { pct } else { raw };
    let header = ["run", "sessions", "final", "base", "novel", "drop", "separation"].map(String::from).to_vec();
    let rows = records
        .iter()
        .zip(labels(records))
        .map(|(r, label)| {
            let last = r.sessions.last();
            let first = r.sessions.first().map(|s| s.total_accuracy);
            let sep = r.geometry.last().map(|g| g.separation.all);
            vec![
                label,
                r.sessions.len().to_string(),
                fmt(last.map(|s| s.total_accuracy)),
                fmt(last.and_then(|s| s.base_accuracy)),
                fmt(last.and_then(|s| s.novel_accuracy)),
                fmt(first.zip(r.final_accuracy()).map(|(a, b)| a - b)),
                sep.map_or_else(|| if percent { "-".into() } else { String::new() }, |v| format!("{v:.4}")),
            ]
        })
        .collect();
    Table { header, rows, source: source(records) }
}

/// Writes every table, figure and its plotted data into `out`.
pub fn write_report(records: &[ExperimentRecord], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let names = labels(records);
    let src = source(records).join(", ");
    let mut written = Vec::new();

    let mut md = session_table(records, true).to_markdown();
    md.push('\n');
    md.push_str(&summary_table(records, true).to_markdown());
    let md_path = out.join("report.md");
    write_file(&md_path, md)?;
    written.push(md_path);
    for (table, stem) in [(session_table(records, false), "sessions"), (summary_table(records, false), "summary")] {
        let path = out.join(format!("{stem}.csv"));
        write_file(&path, table.to_csv()?)?;
        written.push(path);
    }

    let curves: Vec<Series> = records
        .iter()
        .zip(&names)
        .map(|(r, label)| Series {
            label: label.clone(),
            points: r.sessions.iter().map(|s| (s.session_index as f64, s.total_accuracy)).collect(),
        })
        .collect();
    let n_sessions = records.iter().map(|r| r.sessions.len()).max().unwrap_or(1).max(1);
    written.extend(emit_lines(out, "accuracy_curve", "Accuracy per session", "session", "accuracy", &curves, &src, |p| {
        plot::session_chart(p, "Accuracy per session", &curves, n_sessions, &src)
    })?);

    for (stem, title, intra) in [("inter_cdf", "Inter-class distance CDF", false), ("intra_cdf", "Intra-class distance CDF", true)] {
        let series: Vec<Series> = records
            .iter()
            .zip(&names)
            .filter_map(|(r, label)| {
                let g = r.geometry.last()?;
                let values = if intra { g.intra_values() } else { g.inter_values() };
                Some(Series { label: label.clone(), points: cumulative_distance_distribution(&values) })
            })
            .collect();
        written.extend(emit_lines(out, stem, title, "distance", "fraction", &series, &src, |p| {
            plot::line_chart(p, title, "distance", "fraction <= distance", &series, 0.0..2.0, 0.0..1.0, &src)
        })?);
    }

    let groups = ["all", "base", "novel"];
    let bars: Vec<(String, Vec<Option<f64>>)> = records
        .iter()
        .zip(&names)
        .map(|(r, label)| {
            let s = r.geometry.last().map(|g| &g.separation);
            (label.clone(), vec![s.map(|s| s.all), s.and_then(|s| s.base), s.and_then(|s| s.novel)])
        })
        .collect();
    let sep_json = json!({
        "title": "Class separation, last session",
        "groups": groups,
        "series": bars.iter().map(|(l, v)| json!({"label": l, "values": v})).collect::<Vec<_>>(),
        "source_run_ids": source(records),
    });
    written.extend(emit(out, "separation", &sep_json, |p| {
        plot::bar_chart(p, "Class separation, last session", &groups, &bars, &src)
    })?);

    for (r, label) in records.iter().zip(&names) {
        let Some(last) = r.sessions.last() else { continue };
        let stem = format!("confusion-{}", label.replace('#', "-"));
        let title = format!("Confusion, session {} ({label})", last.session_index);
        let data = json!({
            "title": title,
            "class_ids": last.class_ids,
            "confusion": last.confusion,
            "source_run_ids": [r.run_id],
        });
        written.extend(emit(out, &stem, &data, |p| plot::heatmap(p, &title, &last.class_ids, &last.confusion, &r.run_id))?);
    }
    Ok(written)
}

#[allow(clippy::too_many_arguments)]
fn emit_lines(
    out: &Path,
    stem: &str,
    title: &str,
    x: &str,
    y: &str,
    series: &[Series],
    src: &str,
    draw: impl FnOnce(&Path) -> Result<()>,
) -> Result<Vec<PathBuf>> {
    let data = json!({
        "title": title,
        "x": x,
        "y": y,
        "series": series.iter().map(|s| json!({"label": s.label, "points": s.points})).collect::<Vec<_>>(),
        "source_run_ids": src.split(", ").collect::<Vec<_>>(),
    });
    emit(out, stem, &data, draw)
}

fn emit(out: &Path, stem: &str, data: &serde_json::Value, draw: impl FnOnce(&Path) -> Result<()>) -> Result<Vec<PathBuf>> {
    let json_path = out.join(format!("{stem}.json"));
    let svg_path = out.join(format!("{stem}.svg"));
    write_file(&json_path, serde_json::to_string_pretty(data)?)?;
    draw(&svg_path).with_context(|| format!("drawing {}", svg_path.display()))?;
    Ok(vec![svg_path, json_path])
}
