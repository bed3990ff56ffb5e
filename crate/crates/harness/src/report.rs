//! Figures and the markdown report rendered from a finished run's metrics.
//!
//! Rendering reads only `metrics/`, so it is repeatable and byte-identical
//! across invocations on the same run.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::run::{RunDir, Table};

/// Metrics the report cannot be rendered without.
pub const REQUIRED_METRICS: [&str; 8] =
    ["accuracy", "weights", "weight_hist", "influence", "influence_hist", "diversity", "preferred_mass", "membership"];

type Series = (String, Vec<(f64, f64)>);

const PALETTE: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

fn plot_err(name: &str) -> impl Fn(String) -> Error + '_ {
    move |message| Error::Plot { name: name.into(), message }
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |lo: f64, hi: f64| {
        let m = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
        (lo - m, hi + m)
    };
    (pad(x0, x1), pad(y0, y1))
}

fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let err = plot_err(&name);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

fn f(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

/// Groups rows by the `key` column (first-appearance order) into (x, y) series.
fn group_series(t: &Table, key: &[&str], x: &str, y: &str) -> Vec<Series> {
    let (Some(xi), Some(yi)) = (t.column(x), t.column(y)) else { return Vec::new() };
    let ki: Vec<usize> = key.iter().filter_map(|k| t.column(k)).collect();
    let mut out: Vec<Series> = Vec::new();
    for row in &t.rows {
        let label = ki.iter().map(|&i| row[i].as_str()).collect::<Vec<_>>().join("/");
        let p = (f(&row[xi]), f(&row[yi]));
        match out.iter_mut().find(|(l, _)| *l == label) {
            Some((_, pts)) => pts.push(p),
            None => out.push((label, vec![p])),
        }
    }
    out
}

/// Histogram tables (source, lo, hi, count) as normalised frequency curves.
fn histogram_series(t: &Table) -> Vec<Series> {
    let (Some(s), Some(lo), Some(hi), Some(c)) = (t.column("source"), t.column("lo"), t.column("hi"), t.column("count"))
    else {
        return Vec::new();
    };
    let mut out: Vec<Series> = Vec::new();
    for row in &t.rows {
        let p = (0.5 * (f(&row[lo]) + f(&row[hi])), f(&row[c]));
        match out.iter_mut().find(|(l, _)| *l == row[s]) {
            Some((_, pts)) => pts.push(p),
            None => out.push((row[s].clone(), vec![p])),
        }
    }
    for (_, pts) in &mut out {
        let total: f64 = pts.iter().map(|p| p.1).sum();
        if total > 0.0 {
            pts.iter_mut().for_each(|p| p.1 /= total);
        }
    }
    out
}

fn markdown_table(t: &Table) -> String {
    let mut s = format!("| {} |\n|{}\n", t.header.join(" | "), " --- |".repeat(t.header.len()));
    for row in &t.rows {
        let cells: Vec<String> = row
            .iter()
            .map(|c| match c.parse::<f64>() {
                Ok(v) if c.contains('.') || c.contains('e') => format!("{v:.4}"),
                _ => c.clone(),
            })
            .collect();
        s.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    s
}

/// Renders `plots/*.svg` and `report/report.md` for the run at `root`.
/// Fails with [`Error::MissingArtifacts`] naming every absent required
/// metrics file.
pub fn emit_report(root: &Path) -> Result<()> {
    let missing: Vec<String> = std::iter::once("config.sha256".to_string())
        .chain(REQUIRED_METRICS.iter().map(|m| format!("metrics/{m}.csv")))
        .filter(|rel| !root.join(rel).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let run = RunDir::existing(root)?;
    let optional = |name: &str| if run.exists(&format!("metrics/{name}.csv")) { run.read_metrics(name).ok() } else { None };

    let mut md = String::from("# Run report\n\n");
    md.push_str(&format!("Config hash: `{}`\n\n", run.config_hash()));

    md.push_str("## Downstream accuracy\n\n");
    md.push_str(&markdown_table(&run.read_metrics("accuracy")?));

    let weights = run.read_metrics("weights")?;
    line_plot(
        &run.path("plots/weights.svg"),
        "Weight-net output distribution",
        "weight",
        "fraction",
        &histogram_series(&run.read_metrics("weight_hist")?),
    )?;
    md.push_str("\n## Learned weights\n\n");
    md.push_str(&markdown_table(&weights));
    md.push_str("\n![weights](../plots/weights.svg)\n");

    line_plot(
        &run.path("plots/influence.svg"),
        "Influence on test loss",
        "score",
        "fraction",
        &histogram_series(&run.read_metrics("influence_hist")?),
    )?;
    md.push_str("\n## Influence\n\nPositive scores reduce test loss.\n\n");
    md.push_str(&markdown_table(&run.read_metrics("influence")?));
    md.push_str("\n![influence](../plots/influence.svg)\n");

    md.push_str("\n## Intra-class diversity\n\n");
    md.push_str(&markdown_table(&run.read_metrics("diversity")?));

    md.push_str("\n## Mode composition\n\n");
    md.push_str(&markdown_table(&run.read_metrics("preferred_mass")?));
    md.push('\n');
    md.push_str(&markdown_table(&run.read_metrics("membership")?));

    if let Some(c) = optional("weight_curve") {
        line_plot(&run.path("plots/weight_curve.svg"), "Weight as a function of loss", "loss", "weight", &group_series(&c, &[], "loss", "weight"))?;
        md.push_str("\n## Weight curve\n\n![weight curve](../plots/weight_curve.svg)\n");
    }
    if let Some(n) = optional("noise_weights") {
        md.push_str("\n## Weights on flipped labels\n\n");
        md.push_str(&markdown_table(&n));
    }
    if let Some(t) = optional("todv") {
        let mut series = group_series(&t, &[], "epoch", "val_accuracy");
        if let Some(s) = series.first_mut() {
            s.0 = "validation accuracy".into();
        }
        if let Some((_, pts)) = group_series(&t, &[], "epoch", "mean_weight").pop() {
            series.push(("mean weight".into(), pts));
        }
        line_plot(&run.path("plots/todv.svg"), "Weight-net training", "epoch", "value", &series)?;
        md.push_str("\n## Weight-net training\n\n![todv](../plots/todv.svg)\n");
    }
    if let Some(t) = optional("mlco") {
        md.push_str("\n## Preference fine-tuning\n\n");
        md.push_str(&markdown_table(&t));
    }
    if let Some(t) = optional("mlco_reward") {
        md.push('\n');
        md.push_str(&markdown_table(&t));
    }
    if let Some(t) = optional("ilpo") {
        if let Some(e) = t.column("epoch") {
            let last: Vec<Vec<String>> = t.rows.iter().filter(|r| Some(&r[e]) == t.rows.last().map(|l| &l[e])).cloned().collect();
            if !last.is_empty() {
                md.push_str("\n## Prompt optimisation (final epoch)\n\n");
                md.push_str(&markdown_table(&Table { header: t.header.clone(), rows: last }));
            }
        }
    }
    if let Some(t) = optional("scaling") {
        if !t.rows.is_empty() {
            line_plot(
                &run.path("plots/scaling.svg"),
                "Accuracy against synthesis budget",
                "budget",
                "accuracy",
                &group_series(&t, &["regime", "source"], "budget", "accuracy"),
            )?;
            md.push_str("\n## Budget scaling\n\n");
            md.push_str(&markdown_table(&t));
            md.push_str("\n![scaling](../plots/scaling.svg)\n");
        }
    }
    if let Some(t) = optional("reusability") {
        md.push_str("\n## Architecture reuse\n\n");
        md.push_str(&markdown_table(&t));
    }
    run.write_text("report/report.md", &md)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_series_normalises() {
        let mut t = Table::new(&["source", "lo", "hi", "count"]);
        for (s, lo, c) in [("a", 0.0, 1), ("a", 0.5, 3), ("b", 0.0, 2), ("b", 0.5, 2)] {
            t.push(vec![s.into(), lo.to_string(), (lo + 0.5).to_string(), c.to_string()]);
        }
        let s = histogram_series(&t);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].1, vec![(0.25, 0.25), (0.75, 0.75)]);
        assert_eq!(s[1].1, vec![(0.25, 0.5), (0.75, 0.5)]);
    }

    #[test]
    fn markdown_table_formats_floats_only() {
        let mut t = Table::new(&["n", "x"]);
        t.push(vec!["12".into(), "0.123456".into()]);
        assert_eq!(markdown_table(&t), "| n | x |\n| --- | --- |\n| 12 | 0.1235 |\n");
    }

    #[test]
    fn empty_plot_still_renders() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.svg");
        line_plot(&p, "empty", "x", "y", &[]).unwrap();
        assert!(std::fs::read_to_string(p).unwrap().starts_with("<svg"));
    }
}
