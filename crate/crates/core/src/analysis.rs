//! Threshold-swept recall curves, the target-language probability
//! histogram, and plots of both.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{BleuStats, EvalRecord};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no scored records")]
    NoRecords,
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("thresholds must be strictly increasing")]
    UnsortedThresholds,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("plot {path}: {message}")]
    Plot { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    /// Records with `p > tau`.
    Success,
    /// Records with `p < tau`.
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub tau: f64,
    pub recalled_fraction: f64,
    /// Corpus BLEU of the recalled records; `None` when none are recalled.
    pub bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub kind: CurveKind,
    pub points: Vec<RecallPoint>,
}

/// `steps + 1` evenly spaced thresholds over `[0, 1]`.
pub fn tau_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// The default 101-point grid.
pub fn default_taus() -> Vec<f64> {
    tau_grid(100)
}

fn scored(records: &[EvalRecord]) -> Vec<(f64, BleuStats)> {
    records
        .iter()
        .filter(|r| r.is_ok())
        .filter_map(|r| Some((r.p_en?, r.bleu?)))
        .collect()
}

/// Success and fail curves over `taus`. Records that failed scoring are
/// ignored; a record with `p == tau` is in neither set at that threshold.
pub fn recall_curves(
    records: &[EvalRecord],
    taus: &[f64],
) -> Result<(RecallCurve, RecallCurve), AnalysisError> {
    let items = scored(records);
    if items.is_empty() {
        return Err(AnalysisError::NoRecords);
    }
    if let Some(&t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(AnalysisError::BadThreshold(t));
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AnalysisError::UnsortedThresholds);
    }
    let n = items.len() as f64;
    let point = |tau: f64, keep: &dyn Fn(f64) -> bool| {
        let mut stats = BleuStats::default();
        let mut count = 0usize;
        for (p, s) in &items {
            if keep(*p) {
                stats.add(s);
                count += 1;
            }
        }
        RecallPoint {
            tau,
            recalled_fraction: count as f64 / n,
            bleu: (count > 0).then(|| stats.score()),
        }
    };
    let success = taus.iter().map(|&t| point(t, &|p| p > t)).collect();
    let fail = taus.iter().map(|&t| point(t, &|p| p < t)).collect();
    Ok((
        RecallCurve {
            kind: CurveKind::Success,
            points: success,
        },
        RecallCurve {
            kind: CurveKind::Fail,
            points: fail,
        },
    ))
}

/// Largest single change in recalled fraction between neighbouring grid
/// points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discontinuity {
    /// Index of the grid point just before the jump.
    pub index: usize,
    pub tau_before: f64,
    pub tau_after: f64,
    /// Recalled fraction on the recalled side of the jump: before it for
    /// success curves, after it for fail curves.
    pub level: f64,
    pub size: f64,
}

pub fn discontinuity(curve: &RecallCurve) -> Option<Discontinuity> {
    let mut best: Option<Discontinuity> = None;
    for (i, w) in curve.points.windows(2).enumerate() {
        let size = (w[1].recalled_fraction - w[0].recalled_fraction).abs();
        if size > 0.0 && best.is_none_or(|b| size > b.size) {
            best = Some(Discontinuity {
                index: i,
                tau_before: w[0].tau,
                tau_after: w[1].tau,
                level: match curve.kind {
                    CurveKind::Success => w[0].recalled_fraction,
                    CurveKind::Fail => w[1].recalled_fraction,
                },
                size,
            });
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimodalitySummary {
    pub n: usize,
    /// Fraction with `p <= 0.1`.
    pub mass_low: f64,
    /// Fraction with `p >= 0.9`.
    pub mass_high: f64,
    pub mass_mid: f64,
    pub mean: f64,
    /// Ten equal-width bins; the last one includes 1.0.
    pub histogram: Vec<HistogramBin>,
}

pub const LOW_CUT: f64 = 0.1;
pub const HIGH_CUT: f64 = 0.9;
const BINS: usize = 10;

pub fn bimodality_summary(records: &[EvalRecord]) -> Result<BimodalitySummary, AnalysisError> {
    let ps: Vec<f64> = records
        .iter()
        .filter(|r| r.is_ok())
        .filter_map(|r| r.p_en)
        .collect();
    if ps.is_empty() {
        return Err(AnalysisError::NoRecords);
    }
    let n = ps.len();
    let low = ps.iter().filter(|&&p| p <= LOW_CUT).count();
    let high = ps.iter().filter(|&&p| p >= HIGH_CUT).count();
    let mut counts = [0usize; BINS];
    for &p in &ps {
        counts[((p * BINS as f64).floor() as usize).min(BINS - 1)] += 1;
    }
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| HistogramBin {
            lo: i as f64 / BINS as f64,
            hi: (i + 1) as f64 / BINS as f64,
            count: c,
            fraction: c as f64 / n as f64,
        })
        .collect();
    Ok(BimodalitySummary {
        n,
        mass_low: low as f64 / n as f64,
        mass_high: high as f64 / n as f64,
        mass_mid: (n - low - high) as f64 / n as f64,
        mean: ps.iter().sum::<f64>() / n as f64,
        histogram,
    })
}

#[derive(Serialize)]
struct CurveRow {
    tau: f64,
    recalled_fraction: f64,
    bleu: Option<f64>,
}

fn write_csv<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), AnalysisError> {
    let io = |e: csv::Error| AnalysisError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_curve_csv(path: &Path, curve: &RecallCurve) -> Result<(), AnalysisError> {
    write_csv(
        path,
        curve.points.iter().map(|p| CurveRow {
            tau: p.tau,
            recalled_fraction: p.recalled_fraction,
            bleu: p.bleu,
        }),
    )
}

pub fn write_histogram_csv(path: &Path, summary: &BimodalitySummary) -> Result<(), AnalysisError> {
    write_csv(path, &summary.histogram)
}

/// Writes `curves_success.csv`, `curves_fail.csv`, `p_en_hist.csv` and the
/// matching `.svg` plots into `dir`. Returns the written paths.
pub fn write_analysis(
    dir: &Path,
    success: &RecallCurve,
    fail: &RecallCurve,
    summary: &BimodalitySummary,
) -> Result<Vec<PathBuf>, AnalysisError> {
    fs::create_dir_all(dir).map_err(|source| AnalysisError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (curve, stem) in [(success, "curves_success"), (fail, "curves_fail")] {
        let csv = dir.join(format!("{stem}.csv"));
        write_curve_csv(&csv, curve)?;
        let svg = dir.join(format!("{stem}.svg"));
        plot_curve(&svg, curve)?;
        out.extend([csv, svg]);
    }
    let csv = dir.join("p_en_hist.csv");
    write_histogram_csv(&csv, summary)?;
    let svg = dir.join("p_en_hist.svg");
    plot_histogram(&svg, summary)?;
    out.extend([csv, svg]);
    Ok(out)
}

fn plot_err(path: &Path) -> impl Fn(String) -> AnalysisError + '_ {
    move |message| AnalysisError::Plot {
        path: path.to_path_buf(),
        message,
    }
}

/// BLEU against recalled fraction (in percent), one marker per grid point
/// with a non-empty recalled set.
pub fn plot_curve(path: &Path, curve: &RecallCurve) -> Result<(), AnalysisError> {
    let title = match curve.kind {
        CurveKind::Success => "success recall",
        CurveKind::Fail => "fail recall",
    };
    plot_curves(path, title, &[("", curve)])
}

/// Several labelled curves on one set of axes.
pub fn plot_curves(
    path: &Path,
    title: &str,
    curves: &[(&str, &RecallCurve)],
) -> Result<(), AnalysisError> {
    let err = plot_err(path);
    let series: Vec<Vec<(f64, f64)>> = curves
        .iter()
        .map(|(_, c)| {
            c.points
                .iter()
                .filter_map(|p| Some((100.0 * p.recalled_fraction, p.bleu?)))
                .collect()
        })
        .collect();
    let y_max = series.iter().flatten().map(|p| p.1).fold(1.0, f64::max) * 1.1;
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..100.0, 0.0..y_max)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("recall (%)")
        .y_desc("BLEU")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, ((label, _), pts)) in curves.iter().zip(&series).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let drawn = chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(e.to_string()))?;
        if !label.is_empty() {
            drawn
                .label(*label)
                .legend(move |(x, y)| Circle::new((x + 8, y), 3, color.filled()));
        }
    }
    if curves.iter().any(|(l, _)| !l.is_empty()) {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(e.to_string()))?;
    }
    root.present().map_err(|e| err(e.to_string()))
}

pub fn plot_histogram(path: &Path, summary: &BimodalitySummary) -> Result<(), AnalysisError> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("P(en) distribution", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..100.0, 0.0..100.0)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("P(en) (%)")
        .y_desc("utterances (%)")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(summary.histogram.iter().map(|b| {
            Rectangle::new(
                [
                    (100.0 * b.lo + 0.5, 0.0),
                    (100.0 * b.hi - 0.5, 100.0 * b.fraction),
                ],
                BLUE.mix(0.6).filled(),
            )
        }))
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::normalize;

    fn rec(id: usize, p: f64, hyp: &str) -> EvalRecord {
        let r = normalize("t1 t2 t3 t4");
        let h = normalize(hyp);
        EvalRecord {
            id: format!("u{id}"),
            hypothesis: hyp.into(),
            reference: "t1 t2 t3 t4".into(),
            wer: None,
            bleu: Some(BleuStats::sentence(&r, &h)),
            p_en: Some(p),
            error: None,
        }
    }

    #[test]
    fn all_successful_records() {
        let rs: Vec<_> = (0..4).map(|i| rec(i, 1.0, "t1 t2 t3 t4")).collect();
        let (s, f) = recall_curves(&rs, &default_taus()).unwrap();
        assert_eq!(s.points.len(), 101);
        let mid = &s.points[50];
        assert_eq!((mid.tau, mid.recalled_fraction), (0.5, 1.0));
        assert!((mid.bleu.unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(f.points[50].recalled_fraction, 0.0);
        assert_eq!(f.points[50].bleu, None);
        // p == 1.0 is not > 1.0
        assert_eq!(s.points[100].recalled_fraction, 0.0);
    }

    #[test]
    fn tau_zero_excludes_exact_zero() {
        let rs = vec![
            rec(0, 0.0, "s1"),
            rec(1, 0.3, "t1 s2"),
            rec(2, 1.0, "t1 t2 t3 t4"),
        ];
        let (s, f) = recall_curves(&rs, &[0.0, 0.3]).unwrap();
        assert!((s.points[0].recalled_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f.points[0].recalled_fraction, 0.0);
        assert!((s.points[1].recalled_fraction - 1.0 / 3.0).abs() < 1e-12);
        assert!((f.points[1].recalled_fraction - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            recall_curves(&[], &default_taus()),
            Err(AnalysisError::NoRecords)
        ));
        let rs = vec![rec(0, 0.5, "t1")];
        assert!(matches!(
            recall_curves(&rs, &[0.2, 1.5]),
            Err(AnalysisError::BadThreshold(_))
        ));
        assert!(matches!(
            recall_curves(&rs, &[0.5, 0.2]),
            Err(AnalysisError::UnsortedThresholds)
        ));
        assert!(matches!(
            bimodality_summary(&[]),
            Err(AnalysisError::NoRecords)
        ));
    }

    #[test]
    fn two_point_masses() {
        let rs: Vec<_> = (0..6)
            .map(|i| rec(i, if i % 2 == 0 { 0.0 } else { 1.0 }, "t1"))
            .collect();
        let b = bimodality_summary(&rs).unwrap();
        assert_eq!((b.mass_low, b.mass_high, b.mass_mid), (0.5, 0.5, 0.0));
        assert_eq!(b.histogram[0].count, 3);
        assert_eq!(b.histogram[9].count, 3);
        let zeros: Vec<_> = (0..3).map(|i| rec(i, 0.0, "s1")).collect();
        let b = bimodality_summary(&zeros).unwrap();
        assert_eq!((b.mass_low, b.mass_high), (1.0, 0.0));
    }

    #[test]
    fn discontinuity_of_two_point_distribution() {
        let rs: Vec<_> = (0..10)
            .map(|i| rec(i, if i < 3 { 0.0 } else { 1.0 }, "t1"))
            .collect();
        let (s, f) = recall_curves(&rs, &default_taus()).unwrap();
        let d = discontinuity(&s).unwrap();
        assert!((d.level - 0.7).abs() < 1e-12);
        assert_eq!(d.tau_after, 1.0);
        let d = discontinuity(&f).unwrap();
        assert!((d.level - 0.3).abs() < 1e-12);
        assert_eq!(d.tau_before, 0.0);
    }

    #[test]
    fn writes_csv_and_plots() {
        let rs: Vec<_> = (0..5).map(|i| rec(i, i as f64 / 4.0, "t1 t2 t3")).collect();
        let (s, f) = recall_curves(&rs, &default_taus()).unwrap();
        let b = bimodality_summary(&rs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_analysis(dir.path(), &s, &f, &b).unwrap();
        assert_eq!(paths.len(), 6);
        let text = fs::read_to_string(dir.path().join("curves_fail.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), "tau,recalled_fraction,bleu");
        assert_eq!(text.lines().count(), 102);
        assert!(text.lines().nth(1).unwrap().ends_with(",0.0,"));
        let hist = fs::read_to_string(dir.path().join("p_en_hist.csv")).unwrap();
        assert_eq!(hist.lines().count(), 11);
        assert!(fs::read_to_string(dir.path().join("p_en_hist.svg"))
            .unwrap()
            .contains("<svg"));
    }
}
