//! Static SVG figures.

use std::ops::Range;
use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::coord::types::RangedCoordf64;
use plotters::coord::Shift;
use plotters::prelude::*;

const SIZE: (u32, u32) = (720, 480);
const FOOTER: u32 = 26;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("{e}")
}

/// A white canvas with the source footer drawn; returns the plotting area.
fn canvas<'a>(root: &DrawingArea<SVGBackend<'a>, Shift>, source: &str) -> Result<DrawingArea<SVGBackend<'a>, Shift>> {
    root.fill(&WHITE).map_err(err)?;
    let (main, footer) = root.split_vertically(SIZE.1 - FOOTER);
    footer
        .draw(&Text::new(format!("source: {source}"), (10, 6), ("sans-serif", 13).into_font().color(&BLACK.mix(0.7))))
        .map_err(err)?;
    Ok(main)
}

fn draw_lines<'a>(chart: &mut ChartContext<'a, SVGBackend<'a>, Cartesian2d<RangedCoordf64, RangedCoordf64>>, series: &[Series], markers: bool) -> Result<()> {
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        if markers {
            chart
                .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(err)?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK.mix(0.4))
        .position(SeriesLabelPosition::LowerLeft)
        .draw()
        .map_err(err)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn line_chart(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[Series],
    x: Range<f64>,
    y: Range<f64>,
    source: &str,
) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    let main = canvas(&root, source)?;
    let mut chart = ChartBuilder::on(&main)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x, y)
        .map_err(err)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(err)?;
    draw_lines(&mut chart, series, false)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Accuracy against session index, one marked line per series.
pub fn session_chart(path: &Path, title: &str, series: &[Series], sessions: usize, source: &str) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    let main = canvas(&root, source)?;
    let mut chart = ChartBuilder::on(&main)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.3..sessions as f64 - 0.7, 0.0..1.0)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_labels(sessions)
        .x_label_formatter(&|v| if (v - v.round()).abs() < 1e-9 { format!("{v:.0}") } else { String::new() })
        .x_desc("session")
        .y_desc("accuracy")
        .draw()
        .map_err(err)?;
    draw_lines(&mut chart, series, true)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Grouped bars in `[0, 1]`; missing values leave a gap.
pub fn bar_chart(path: &Path, title: &str, groups: &[&str], series: &[(String, Vec<Option<f64>>)], source: &str) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    let main = canvas(&root, source)?;
    let n = groups.len() as f64;
    let mut chart = ChartBuilder::on(&main)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..n, 0.0..1.0)
        .map_err(err)?;
    let names: Vec<String> = groups.iter().map(|g| g.to_string()).collect();
    let fmt = move |v: &f64| {
        let i = v.floor();
        if (v - i - 0.5).abs() < 1e-9 && (i as usize) < names.len() {
            names[i as usize].clone()
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(2 * groups.len() + 1)
        .x_label_formatter(&fmt)
        .y_desc("separation")
        .draw()
        .map_err(err)?;
    let width = 0.8 / series.len().max(1) as f64;
    for (i, (label, values)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(values.iter().enumerate().filter_map(|(g, v)| {
                let v = (*v)?;
                let x0 = g as f64 + 0.1 + i as f64 * width;
                Some(Rectangle::new([(x0, 0.0), (x0 + width * 0.92, v.clamp(0.0, 1.0))], color.filled()))
            }))
            .map_err(err)?
            .label(label.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK.mix(0.4))
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Row-normalised confusion heatmap; rows are true classes, top to bottom.
pub fn heatmap(path: &Path, title: &str, class_ids: &[u32], counts: &[Vec<u64>], source: &str) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    let main = canvas(&root, source)?;
    let n = class_ids.len() as i32;
    let mut chart = ChartBuilder::on(&main)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d((0..n).into_segmented(), (0..n).into_segmented())
        .map_err(err)?;
    let ids = class_ids.to_vec();
    let x_fmt = |v: &SegmentValue<i32>| match v {
        SegmentValue::CenterOf(i) if *i >= 0 && *i < n => ids[*i as usize].to_string(),
        _ => String::new(),
    };
    let y_fmt = |v: &SegmentValue<i32>| match v {
        SegmentValue::CenterOf(i) if *i >= 0 && *i < n => ids[(n - 1 - *i) as usize].to_string(),
        _ => String::new(),
    };
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(class_ids.len())
        .y_labels(class_ids.len())
        .x_label_formatter(&x_fmt)
        .y_label_formatter(&y_fmt)
        .x_desc("predicted")
        .y_desc("true")
        .draw()
        .map_err(err)?;
    let cells = counts.iter().enumerate().flat_map(|(r, row)| {
        let total = row.iter().sum::<u64>().max(1) as f64;
        row.iter().enumerate().map(move |(c, &v)| {
            let share = v as f64 / total;
            let shade = (255.0 * (1.0 - share)).round() as u8;
            let y = n - 1 - r as i32;
            Rectangle::new(
                [(SegmentValue::Exact(c as i32), SegmentValue::Exact(y)), (SegmentValue::Exact(c as i32 + 1), SegmentValue::Exact(y + 1))],
                RGBColor(shade, shade, 255).filled(),
            )
        })
    });
    chart.draw_series(cells).map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figures_are_svg_with_source_footer() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![Series { label: "a".into(), points: vec![(0.0, 0.9), (1.0, 0.8)] }];
        let p = dir.path().join("l.svg");
        session_chart(&p, "t", &series, 2, "run-x").unwrap();
        let b = dir.path().join("b.svg");
        bar_chart(&b, "t", &["all", "base"], &[("a".into(), vec![Some(0.5), None])], "run-y").unwrap();
        let h = dir.path().join("h.svg");
        heatmap(&h, "t", &[3, 7], &[vec![2, 0], vec![1, 1]], "run-z").unwrap();
        for (path, id) in [(p, "run-x"), (b, "run-y"), (h, "run-z")] {
            let text = std::fs::read_to_string(path).unwrap();
            assert!(text.starts_with("<svg") && text.contains(&format!("source: {id}")));
        }
    }
}
