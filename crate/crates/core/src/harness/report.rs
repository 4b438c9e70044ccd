//! CSV summaries and SVG plots. Every file carries the fingerprint of the
//! configuration that produced its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use plotters::prelude::*;

use super::profile::{TimingKind, TimingSummary};
use crate::error::{FwsError, Result};
use crate::metrics::{cell_means, summarize, MetricRecord};
use crate::sparsify::Technique;

fn report_err(path: &Path, e: impl std::fmt::Display) -> FwsError {
    FwsError::Data { path: path.to_path_buf(), msg: e.to_string() }
}

/// Writes `rows` as CSV under a `# config_fingerprint=...` comment line.
pub fn write_csv(path: &Path, fingerprint: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| report_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| report_err(path, e))?;
    }
    let body = w.into_inner().map_err(|e| report_err(path, e))?;
    let mut text = format!("# config_fingerprint={fingerprint}\n").into_bytes();
    text.extend(body);
    fs::write(path, text).map_err(|e| FwsError::io(path, e))
}

/// Reads a CSV written by [`write_csv`], returning the fingerprint, the
/// header and the rows.
pub fn read_csv(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| FwsError::io(path, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let fp = first
        .strip_prefix("# config_fingerprint=")
        .ok_or_else(|| report_err(path, "missing fingerprint line"))?
        .to_string();
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers().map_err(|e| report_err(path, e))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()).map_err(|e| report_err(path, e)))
        .collect::<Result<_>>()?;
    Ok((fp, header, rows))
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

/// `summary_overall.csv`, `summary_best.csv` and `cells.csv` in `dir`.
pub fn write_metric_summaries(dir: &Path, records: &[MetricRecord], fingerprint: &str) -> Result<()> {
    let s = summarize(records);
    let iv = ["od_mean", "od_lo", "od_hi", "oc_mean", "oc_lo", "oc_hi"];
    let overall: Vec<Vec<String>> = s
        .overall
        .iter()
        .map(|r| {
            let mut row = vec![r.learner.clone(), r.dataset.clone(), r.n.to_string()];
            row.extend([r.od.mean, r.od.lo, r.od.hi, r.oc.mean, r.oc.lo, r.oc.hi, r.mean].map(f));
            row
        })
        .collect();
    let mut h = vec!["learner", "dataset", "n"];
    h.extend(iv);
    h.push("mean_iou");
    write_csv(&dir.join("summary_overall.csv"), fingerprint, &h, &overall)?;

    let best: Vec<Vec<String>> = s
        .best
        .iter()
        .map(|r| {
            let mut row = vec![
                r.learner.clone(),
                r.dataset.clone(),
                r.shots.to_string(),
                r.technique.to_string(),
                r.density.to_string(),
                r.n.to_string(),
            ];
            row.extend([r.od.mean, r.od.lo, r.od.hi, r.oc.mean, r.oc.lo, r.oc.hi, r.mean].map(f));
            row
        })
        .collect();
    let mut h = vec!["learner", "dataset", "shots", "technique", "density", "n"];
    h.extend(iv);
    h.push("mean_iou");
    write_csv(&dir.join("summary_best.csv"), fingerprint, &h, &best)?;

    let cells: Vec<Vec<String>> = cell_means(records)
        .into_iter()
        .map(|(l, d, shots, t, density, od, oc)| {
            let mut row = vec![l, d, shots.to_string(), t.to_string(), density.to_string()];
            row.extend([od.mean, od.lo, od.hi, oc.mean, oc.lo, oc.hi].map(f));
            row
        })
        .collect();
    let mut h = vec!["learner", "dataset", "shots", "technique", "density"];
    h.extend(iv);
    write_csv(&dir.join("cells.csv"), fingerprint, &h, &cells)
}

pub fn write_timing_summary(path: &Path, summaries: &[TimingSummary], fingerprint: &str) -> Result<()> {
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            let kind = match s.kind {
                TimingKind::Inference => "inference",
                TimingKind::Prediction => "prediction",
            };
            let mut row = vec![kind.to_string(), s.learner.to_string(), s.shots.to_string(), s.batch.to_string(), s.reps.to_string()];
            row.extend([s.median, s.mean, s.lo, s.hi].map(|v| format!("{v:.6e}")));
            row
        })
        .collect();
    write_csv(path, fingerprint, &["kind", "learner", "shots", "batch", "reps", "median_s", "mean_s", "lo_s", "hi_s"], &rows)
}

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &Series, fingerprint: &str) -> Result<()> {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad_x = ((x1 - x0) * 0.05).max(0.5);
    let pad_y = ((y1 - y0) * 0.1).max(1e-3 * y1.abs().max(1e-6));
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    let run = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let short = &fingerprint[..fingerprint.len().min(12)];
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{title} (config {short})"), ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d((x0 - pad_x)..(x1 + pad_x), (y0 - pad_y)..(y1 + pad_y))?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        for (i, (name, points)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
            chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    run().map_err(|e| report_err(path, e))
}

/// Mean of `(IoU_OD + IoU_OC) / 2` against shots, one line per
/// (learner, technique), averaged over densities.
pub fn plot_iou_by_shots(path: &Path, records: &[MetricRecord], fingerprint: &str) -> Result<()> {
    let mut acc: BTreeMap<(String, Technique), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in records {
        let e = acc.entry((r.learner.clone(), r.technique)).or_default().entry(r.shots).or_default();
        e.0 += r.mean_iou();
        e.1 += 1;
    }
    let series: Series = acc
        .into_iter()
        .map(|((l, t), m)| (format!("{l} / {t}"), m.into_iter().map(|(s, (sum, n))| (s as f64, sum / n as f64)).collect()))
        .collect();
    line_chart(path, "mean IoU by shots", "shots", "mean IoU (OD+OC)/2", &series, fingerprint)
}

/// Median inference time against shots, one line per (learner, batch).
pub fn plot_inference_time(path: &Path, summaries: &[TimingSummary], fingerprint: &str) -> Result<()> {
    let mut acc: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.kind == TimingKind::Inference) {
        acc.entry((s.learner.to_string(), s.batch)).or_default().push((s.shots as f64, s.median));
    }
    let series: Series = acc
        .into_iter()
        .map(|((l, b), mut p)| {
            p.sort_by(|a, b| a.0.total_cmp(&b.0));
            (format!("{l} (batch {b})"), p)
        })
        .collect();
    line_chart(path, "median inference time", "shots", "seconds", &series, fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(shots: usize, t: Technique, od: f64) -> MetricRecord {
        MetricRecord {
            learner: "eo_protoseg".into(),
            dataset: "d".into(),
            shots,
            technique: t,
            density: 0.5,
            seed: 0,
            query_id: format!("q{shots}"),
            iou_od: od,
            iou_oc: od / 2.0,
            overhead_time: 0.0,
            predict_time: 0.0,
            config_fingerprint: "abc".into(),
        }
    }

    #[test]
    fn csv_round_trip_keeps_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, "fp1", &["a", "b"], &[vec!["1".into(), "x,y".into()]]).unwrap();
        let (fp, h, rows) = read_csv(&p).unwrap();
        assert_eq!(fp, "fp1");
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(rows, vec![vec!["1".to_string(), "x,y".to_string()]]);
    }

    #[test]
    fn summaries_and_plots_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![rec(1, Technique::Points, 0.5), rec(5, Technique::Points, 0.7), rec(5, Technique::Grid, 0.9)];
        write_metric_summaries(dir.path(), &recs, "fp").unwrap();
        let (_, _, best) = read_csv(&dir.path().join("summary_best.csv")).unwrap();
        assert_eq!(best.len(), 1);
        assert_eq!(best[0][2], "5");
        assert_eq!(best[0][3], "grid");
        let svg = dir.path().join("p.svg");
        plot_iou_by_shots(&svg, &recs, "fp").unwrap();
        let text = fs::read_to_string(&svg).unwrap();
        assert!(text.contains("<svg") && text.contains("config fp"));
    }
}
