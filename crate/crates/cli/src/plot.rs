//! `plot` subcommand: CMC curves and a PCA scatter of test embeddings.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::Context;
use hwdnet::dataset::Modality;
use hwdnet::metrics::EvalReport;
use nalgebra::DMatrix;
use plotters::prelude::*;

use crate::{usage, EmbeddingRow, PlotArgs};

pub const CMC_FILE: &str = "cmc.svg";
pub const EMBEDDING_FILE: &str = "embedding.svg";

pub fn cmd_plot(a: &PlotArgs) -> anyhow::Result<()> {
    if a.report.is_none() && a.embeddings.is_none() {
        return Err(usage("nothing to plot: pass --report and/or --embeddings"));
    }
    let mut jobs = Vec::new();
    if let Some(p) = &a.report {
        jobs.push((p, a.out.join(CMC_FILE)));
    }
    if let Some(p) = &a.embeddings {
        jobs.push((p, a.out.join(EMBEDDING_FILE)));
    }
    for (input, output) in &jobs {
        if !input.is_file() {
            return Err(usage(format!("input file {} does not exist", input.display())));
        }
        if output.exists() && !a.force {
            return Err(usage(format!("{} already exists (use --force to overwrite)", output.display())));
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    if let Some(p) = &a.report {
        let reports = read_reports(p)?;
        let out = a.out.join(CMC_FILE);
        draw_cmc(&reports, &out)?;
        println!("{}: {} curve(s)", out.display(), reports.len());
    }
    if let Some(p) = &a.embeddings {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let rows: Vec<EmbeddingRow> = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let out = a.out.join(EMBEDDING_FILE);
        let (ids, mods) = draw_scatter(&rows, &out)?;
        println!("{}: {} points, {ids} colors x {mods} markers", out.display(), rows.len());
    }
    Ok(())
}

/// A report file holds one report or an array of them.
fn read_reports(path: &Path) -> anyhow::Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let reports = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    let reports: Vec<EvalReport> = reports.map_err(|e| usage(format!("{}: not an eval report: {e}", path.display())))?;
    if reports.iter().any(|r| r.cmc.is_empty()) {
        return Err(usage(format!("{}: empty CMC curve", path.display())));
    }
    Ok(reports)
}

fn draw_cmc(reports: &[EvalReport], out: &Path) -> anyhow::Result<()> {
    let max_rank = reports.iter().map(|r| r.cmc.len()).max().unwrap_or(1);
    let root = SVGBackend::new(out, (640, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("CMC", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1f64..max_rank.max(2) as f64, 0f64..1f64)?;
    chart.configure_mesh().x_desc("rank").y_desc("matching rate").draw()?;
    for (i, r) in reports.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let label = format!("{} {} (mAP {:.3})", r.direction, r.shot, r.map);
        chart
            .draw_series(LineSeries::new(r.cmc.iter().enumerate().map(|(k, &v)| ((k + 1) as f64, v)), color.stroke_width(2)))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).position(SeriesLabelPosition::LowerRight).draw()?;
    root.present()?;
    Ok(())
}

/// Projects rows onto their top two principal components. Component signs
/// are fixed so the largest-magnitude loading is positive.
pub fn pca_2d(features: &[Vec<f32>]) -> anyhow::Result<Vec<(f64, f64)>> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(usage("no embeddings to plot"));
    }
    if features.iter().any(|f| f.len() != d) {
        return Err(usage("embeddings have different dimensions"));
    }
    let mut x = DMatrix::<f64>::from_fn(n, d, |i, j| f64::from(features[i][j]));
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.context("SVD did not return singular vectors")?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut axes = Vec::new();
    for &k in order.iter().take(2) {
        let mut axis: Vec<f64> = v_t.row(k).iter().copied().collect();
        let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        axes.push(axis);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    Ok((0..n)
        .map(|i| {
            let dot = |a: &[f64]| x.row(i).iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
            (dot(&axes[0]), dot(&axes[1]))
        })
        .collect())
}

/// Returns the number of identities (colors) and modalities (markers) drawn.
fn draw_scatter(rows: &[EmbeddingRow], out: &Path) -> anyhow::Result<(usize, usize)> {
    let features: Vec<Vec<f32>> = rows.iter().map(|r| r.feature.clone()).collect();
    let points = pca_2d(&features)?;
    let ids: Vec<usize> = rows.iter().map(|r| r.identity).collect::<BTreeSet<_>>().into_iter().collect();
    let mods: BTreeSet<Modality> = rows.iter().map(|r| r.modality).collect();

    let (lo_x, hi_x) = bounds(points.iter().map(|p| p.0));
    let (lo_y, hi_y) = bounds(points.iter().map(|p| p.1));
    let root = SVGBackend::new(out, (640, 560)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Embedding (PCA)", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(lo_x..hi_x, lo_y..hi_y)?;
    chart.configure_mesh().x_desc("PC1").y_desc("PC2").draw()?;

    for (row, &(px, py)) in rows.iter().zip(&points) {
        let slot = ids.binary_search(&row.identity).unwrap_or(0);
        let color = Palette99::pick(slot).to_rgba().filled();
        match row.modality {
            Modality::Rgb => chart.draw_series(std::iter::once(Circle::new((px, py), 4, color)))?,
            Modality::Ir => chart.draw_series(std::iter::once(TriangleMarker::new((px, py), 5, color)))?,
        };
    }
    for m in &mods {
        let label = match m {
            Modality::Rgb => "RGB",
            Modality::Ir => "IR",
        };
        let style = BLACK.filled();
        let anno = chart.draw_series(std::iter::empty::<Circle<(f64, f64), i32>>())?.label(label);
        match m {
            Modality::Rgb => anno.legend(move |(x, y)| Circle::new((x, y), 4, style)),
            Modality::Ir => anno.legend(move |(x, y)| TriangleMarker::new((x, y), 5, style)),
        };
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok((ids.len(), mods.len()))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = ((hi - lo) * 0.08).max(1e-6);
    (lo - pad, hi + pad)
}
