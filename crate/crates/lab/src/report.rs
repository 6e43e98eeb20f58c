//! Tables and curves over run records. Every plot is written next to a CSV
//! holding exactly the plotted points.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use clip_lab_core::model::{EncoderFamily, EncoderSpec};
use clip_lab_core::train::RunRecord;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{write, LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Table,
    /// Error rate against total training GFLOPs.
    ComputeCurve,
    /// Metric against dataset size at fixed sampled data.
    ScalingCurve,
    /// Metric against quality-tier keep fraction.
    QualityCurve,
}

impl ReportKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            ReportKind::Table => "table",
            ReportKind::ComputeCurve => "compute_curve",
            ReportKind::ScalingCurve => "scaling_curve",
            ReportKind::QualityCurve => "quality_curve",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn vision_label(spec: &EncoderSpec) -> String {
    match spec.family {
        EncoderFamily::Vit => format!("vit-p{}-d{}-w{}", spec.patch_size, spec.depth, spec.width),
        EncoderFamily::MlpMixer => format!("mixer-p{}-d{}-w{}", spec.patch_size, spec.depth, spec.width),
        EncoderFamily::CnnResnetStyle => format!("cnn-w{}-{:?}", spec.width, spec.stage_blocks),
    }
}

fn series_name(r: &RunRecord) -> String {
    format!("{} {}", r.strategy.label(), vision_label(&r.model.vision))
}

/// First `*/accuracy` metric present in any record.
pub fn default_metric(records: &[RunRecord]) -> Option<String> {
    let keys: BTreeSet<&String> = records.iter().flat_map(|r| r.eval.keys()).collect();
    keys.iter().find(|k| k.ends_with("/accuracy")).or(keys.first()).map(|k| k.to_string())
}

/// Curve points grouped by series, each sorted by x.
pub fn curve_series(records: &[RunRecord], kind: ReportKind, metric: &str) -> Result<Vec<Series>> {
    if records.is_empty() {
        return Err(LabError::Report("no run records to report".into()));
    }
    if !records.iter().any(|r| r.eval.contains_key(metric)) {
        return Err(LabError::Report(format!("metric `{metric}` is missing from every record")));
    }
    if kind == ReportKind::QualityCurve && records.iter().all(|r| r.quality_tier.is_none()) {
        return Err(LabError::Report("axis `keep_fraction` is missing: no record trained on a quality tier".into()));
    }
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        let Some(&m) = r.eval.get(metric) else { continue };
        let (name, x, y) = match kind {
            ReportKind::ComputeCurve => (series_name(r), r.gflops_per_sample * r.sampled_data_count as f64, 1.0 - m),
            ReportKind::ScalingCurve => (format!("{} n{}", series_name(r), r.sampled_data_count), r.dataset_size as f64, m),
            ReportKind::QualityCurve => (series_name(r), r.quality_tier.unwrap_or(1.0), m),
            ReportKind::Table => return Err(LabError::Report("a table is not a curve".into())),
        };
        groups.entry(name).or_default().push((x, y));
    }
    Ok(groups
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            Series { name, points }
        })
        .collect())
}

pub fn write_curve_csv(path: &Path, series: &[Series]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in series {
        for &(x, y) in &s.points {
            w.serialize(CurvePoint { series: s.name.clone(), x, y }).map_err(|e| LabError::format(path, e.to_string()))?;
        }
    }
    write(path, w.into_inner().map_err(|e| LabError::format(path, e.to_string()))?)
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<Series>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| LabError::format(path, e.to_string()))?;
    let mut out: Vec<Series> = Vec::new();
    for row in r.deserialize::<CurvePoint>() {
        let p = row.map_err(|e| LabError::format(path, e.to_string()))?;
        match out.last_mut() {
            Some(s) if s.name == p.series => s.points.push((p.x, p.y)),
            _ => out.push(Series { name: p.series, points: vec![(p.x, p.y)] }),
        }
    }
    Ok(out)
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
    (lo - 0.05 * span)..(hi + 0.05 * span)
}

pub fn write_curve_svg(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let err = |e: &dyn std::fmt::Display| LabError::format(path, e.to_string());
    {
        let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(padded(x0, x1), padded(y0, y1))
            .map_err(|e| err(&e))?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(|e| err(&e))?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| err(&e))?
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(|e| err(&e))?;
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw().map_err(|e| err(&e))?;
        root.present().map_err(|e| err(&e))?;
    }
    Ok(())
}

const TABLE_COLUMNS: [&str; 11] = [
    "run_id",
    "strategy",
    "vision",
    "dataset_size",
    "quality_tier",
    "epochs",
    "steps",
    "sampled_data_count",
    "gflops_per_sample",
    "total_gflops",
    "final_loss",
];

/// Header and one row of cells per record.
pub fn table_rows(records: &[RunRecord]) -> (Vec<String>, Vec<Vec<String>>) {
    let metrics: BTreeSet<&String> = records.iter().flat_map(|r| r.eval.keys()).collect();
    let mut header: Vec<String> = TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(metrics.iter().map(|s| s.to_string()));
    let rows = records
        .iter()
        .map(|r| {
            let mut row = vec![
                r.run_id.clone(),
                r.strategy.label(),
                vision_label(&r.model.vision),
                r.dataset_size.to_string(),
                r.quality_tier.map(|q| q.to_string()).unwrap_or_default(),
                r.epochs.to_string(),
                r.steps.to_string(),
                r.sampled_data_count.to_string(),
                format!("{:.6}", r.gflops_per_sample),
                format!("{:.3}", r.total_gflops),
                format!("{:.6}", r.final_loss),
            ];
            row.extend(metrics.iter().map(|m| r.eval.get(*m).map(|v| format!("{v:.4}")).unwrap_or_default()));
            row
        })
        .collect();
    (header, rows)
}

pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let s: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
    for row in rows {
        out.push_str(&line(row));
    }
    out
}

/// Writes the report files into `out_dir` and returns their paths.
pub fn report(records: &[RunRecord], kind: ReportKind, metric: Option<&str>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    crate::error::create_dir(out_dir)?;
    if kind == ReportKind::Table {
        if records.is_empty() {
            return Err(LabError::Report("no run records to report".into()));
        }
        let (header, rows) = table_rows(records);
        let txt = out_dir.join("table.txt");
        write(&txt, render_table(&header, &rows))?;
        let csv_path = out_dir.join("table.csv");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).map_err(|e| LabError::format(&csv_path, e.to_string()))?;
        for row in &rows {
            w.write_record(row).map_err(|e| LabError::format(&csv_path, e.to_string()))?;
        }
        write(&csv_path, w.into_inner().map_err(|e| LabError::format(&csv_path, e.to_string()))?)?;
        return Ok(vec![txt, csv_path]);
    }
    let metric = match metric {
        Some(m) => m.to_string(),
        None => default_metric(records).ok_or_else(|| LabError::Report("records carry no evaluation metrics".into()))?,
    };
    let series = curve_series(records, kind, &metric)?;
    let (x_desc, y_desc) = match kind {
        ReportKind::ComputeCurve => ("total GFLOPs".to_string(), format!("error rate ({metric})")),
        ReportKind::ScalingCurve => ("dataset size".to_string(), metric.clone()),
        _ => ("keep fraction".to_string(), metric.clone()),
    };
    let stem = kind.file_stem();
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let svg_path = out_dir.join(format!("{stem}.svg"));
    write_curve_csv(&csv_path, &series)?;
    write_curve_svg(&svg_path, stem, &x_desc, &y_desc, &series)?;
    Ok(vec![csv_path, svg_path])
}
