//! PNG loss curves and per-fold mIoU bars.

use std::fs;
use std::path::{Path, PathBuf};

use crnet::eval::CrossValReport;
use crnet::train::{MetricRecord, METRICS_FILE};
use crnet::{Error, Result};
use plotters::prelude::*;

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(214, 39, 40)];

/// Register a system font for labels; without one the charts are drawn
/// without text.
fn register_font() -> bool {
    for p in FONT_PATHS {
        if let Ok(bytes) = fs::read(p) {
            let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                return true;
            }
        }
    }
    false
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("cannot render {}: {e}", path.display()))
}

/// `(fold, records)` for every `fold*/metrics.jsonl` under `run`.
pub fn read_metrics(run: &Path) -> Result<Vec<(String, Vec<MetricRecord>)>> {
    let mut out = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(run)
        .map_err(|e| Error::io(run, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(METRICS_FILE).is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        let path = d.join(METRICS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut recs = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: MetricRecord = serde_json::from_str(line).map_err(|e| Error::Dataset {
                path: path.clone(),
                msg: format!("line {}: {e}", i + 1),
            })?;
            recs.push(rec);
        }
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, recs));
    }
    Ok(out)
}

/// Trailing moving average over `window` records.
fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn loss_curves(series: &[(String, Vec<MetricRecord>)], path: &Path, text: bool) -> Result<()> {
    let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let max_ep = series.iter().flat_map(|(_, r)| r.last()).map(|r| r.episode_idx + 1).max().unwrap_or(1);
    let max_loss = series.iter().flat_map(|(_, r)| r.iter().map(|m| m.total)).fold(0.0f64, f64::max).max(1e-3);
    let mut b = ChartBuilder::on(&root);
    b.margin(15);
    if text {
        b.caption("training loss (moving average)", ("sans-serif", 22)).x_label_area_size(35).y_label_area_size(50);
    }
    let mut chart = b.build_cartesian_2d(0..max_ep, 0.0..max_loss * 1.05).map_err(|e| plot_err(path, e))?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("episode").y_desc("total loss");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(|e| plot_err(path, e))?;
    for (i, (name, recs)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let totals: Vec<f64> = recs.iter().map(|r| r.total).collect();
        let sm = smooth(&totals, 50);
        let s = chart
            .draw_series(LineSeries::new(recs.iter().zip(sm).map(|(r, v)| (r.episode_idx, v)), &color))
            .map_err(|e| plot_err(path, e))?;
        if text {
            s.label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

fn fold_bars(report: &CrossValReport, path: &Path, text: bool) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let n = report.folds.len() + 1;
    let mut b = ChartBuilder::on(&root);
    b.margin(15);
    if text {
        b.caption("test mIoU per fold", ("sans-serif", 22)).x_label_area_size(35).y_label_area_size(45);
    }
    let mut chart = b
        .build_cartesian_2d((0..n).into_segmented(), 0.0..100.0)
        .map_err(|e| plot_err(path, e))?;
    let labels: Vec<String> = report.folds.iter().map(|r| format!("fold {}", r.fold)).chain(["mean".into()]).collect();
    let fmt = |v: &SegmentValue<usize>| match v {
        SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
        _ => String::new(),
    };
    let mut mesh = chart.configure_mesh();
    mesh.disable_x_mesh();
    if text {
        mesh.y_desc("mIoU (%)").x_label_formatter(&fmt);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(|e| plot_err(path, e))?;
    let values: Vec<f64> = report.folds.iter().map(|r| 100.0 * r.mean_iou).chain([100.0 * report.mean_iou]).collect();
    chart
        .draw_series(values.iter().enumerate().map(|(i, &v)| {
            let color = if i + 1 == n { PALETTE[1] } else { PALETTE[0] };
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), v)],
                color.filled(),
            );
            bar.set_margin(0, 0, 12, 12);
            bar
        }))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Write `loss_curves.png` and, when a report is available, `fold_miou.png`.
pub fn render(run: &Path, report: Option<&Path>, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = register_font();
    let series = read_metrics(run)?;
    if series.is_empty() {
        return Err(Error::InvalidInput(format!("no {METRICS_FILE} found under {}", run.display())));
    }
    let curves = out.join("loss_curves.png");
    loss_curves(&series, &curves, text)?;
    log::info!("wrote {}", curves.display());
    let default_report = run.join("eval.json");
    let report_path = report.map(Path::to_path_buf).or_else(|| default_report.is_file().then_some(default_report));
    if let Some(rp) = report_path {
        let body = fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?;
        let rep: CrossValReport = serde_json::from_str(&body)
            .map_err(|e| Error::Dataset { path: rp.clone(), msg: e.to_string() })?;
        let bars = out.join("fold_miou.png");
        fold_bars(&rep, &bars, text)?;
        log::info!("wrote {}", bars.display());
    }
    Ok(())
}
