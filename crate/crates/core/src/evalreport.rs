//! Error metrics, naive baselines, per-day and per-station evaluation of a
//! trained bundle, and deterministic CSV/JSON/SVG report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::dates::DateRange;
use crate::decision::{predict_calibrated, ModelBundle};
use crate::error::{Error, Result};
use crate::features::FeatureBuilder;
use crate::ingest::{ExternalTables, VolumePanel};
use crate::station::StationId;

/// Lower edges of the per-station MAPE histogram buckets, in percent; the
/// last bucket is unbounded.
pub const HISTOGRAM_EDGES: [f64; 7] = [0.0, 5.0, 10.0, 15.0, 20.0, 30.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean absolute percentage error in percent over non-zero truths.
    pub mape: Option<f64>,
    pub rmse: f64,
    pub r_square: Option<f64>,
    /// Points left out of the MAPE because their truth is zero.
    pub excluded: usize,
}

/// MAPE, RMSE and R-square of `pred` against `truth`. MAPE skips zero truths
/// and is undefined when every truth is zero; R-square is undefined for a
/// constant truth vector.
pub fn compute_metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "metrics need equal non-empty vectors, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let mut ape = 0.0;
    let mut included = 0usize;
    let mut sse = 0.0;
    for (&p, &y) in pred.iter().zip(truth) {
        sse += (p - y) * (p - y);
        if y != 0.0 {
            ape += ((p - y) / y).abs();
            included += 1;
        }
    }
    let mean = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    Ok(Metrics {
        mape: (included > 0).then(|| 100.0 * ape / included as f64),
        rmse: (sse / n).sqrt(),
        r_square: (sst > 0.0).then(|| 1.0 - sse / sst),
        excluded: truth.len() - included,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    HistoricalAverage,
    SeasonalNaive,
    Persistence,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::HistoricalAverage,
        BaselineKind::SeasonalNaive,
        BaselineKind::Persistence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::HistoricalAverage => "historical_average",
            BaselineKind::SeasonalNaive => "seasonal_naive",
            BaselineKind::Persistence => "persistence",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

/// Baseline prediction of every station's exit volume on `anchor + 1`.
/// `train` is the range the historical average is taken over.
pub fn baseline_predict(kind: BaselineKind, panel: &VolumePanel, anchor: NaiveDate, train: DateRange) -> Result<Vec<f64>> {
    let day = |d: NaiveDate| {
        panel
            .day_index(d)
            .ok_or_else(|| Error::Config(format!("{} baseline needs exit volumes on {d}", kind.name())))
    };
    let l = panel.num_stations();
    match kind {
        BaselineKind::HistoricalAverage => {
            day(train.start)?;
            day(train.end)?;
            (0..l)
                .map(|s| {
                    let series = panel.exit_series(s, train)?;
                    Ok(series.iter().sum::<f64>() / series.len() as f64)
                })
                .collect()
        }
        BaselineKind::SeasonalNaive => {
            let d = day(anchor - Duration::days(6))?;
            Ok((0..l).map(|s| panel.exit(s, d) as f64).collect())
        }
        BaselineKind::Persistence => {
            let d = day(anchor)?;
            Ok((0..l).map(|s| panel.exit(s, d) as f64).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    /// Day being predicted.
    pub date: NaiveDate,
    pub model: Metrics,
    pub baselines: BTreeMap<BaselineKind, Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMetrics {
    pub station_id: StationId,
    /// Mean over evaluated days of the absolute percentage error, in percent.
    pub mape: Option<f64>,
    pub excluded: usize,
    pub baselines: BTreeMap<BaselineKind, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// One count per bucket `[edges[i], edges[i + 1])`, the last unbounded.
    pub counts: Vec<usize>,
    /// Stations whose MAPE is undefined (every truth zero).
    pub undefined: usize,
}

impl Histogram {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut counts = vec![0; HISTOGRAM_EDGES.len()];
        let mut undefined = 0;
        for v in values {
            match v {
                Some(v) => {
                    let b = HISTOGRAM_EDGES.iter().rposition(|&e| v >= e).unwrap_or(0);
                    counts[b] += 1;
                }
                None => undefined += 1,
            }
        }
        Histogram {
            edges: HISTOGRAM_EDGES.to_vec(),
            counts,
            undefined,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.undefined
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_mape: Option<f64>,
    pub mean_rmse: Option<f64>,
    pub mean_r_square: Option<f64>,
}

impl Summary {
    fn of<'a>(metrics: impl Iterator<Item = &'a Metrics> + Clone) -> Self {
        fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
            let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            (n > 0).then(|| s / n as f64)
        }
        Summary {
            mean_mape: mean(metrics.clone().filter_map(|m| m.mape)),
            mean_rmse: mean(metrics.clone().map(|m| m.rmse)),
            mean_r_square: mean(metrics.filter_map(|m| m.r_square)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stations: Vec<StationId>,
    pub days: Vec<DayMetrics>,
    pub per_station: Vec<StationMetrics>,
    pub histogram: Histogram,
    pub baseline_histograms: BTreeMap<BaselineKind, Histogram>,
    pub summary: Summary,
    pub baseline_summaries: BTreeMap<BaselineKind, Summary>,
    /// Zero-truth points left out of the model MAPE.
    pub excluded_points: usize,
    /// Target days without computable features.
    pub skipped_days: Vec<NaiveDate>,
    /// `[day][station]` model predictions of the evaluated days.
    #[serde(skip)]
    pub predictions: Vec<Vec<f64>>,
    /// `[day][station]` true exit volumes of the evaluated days.
    #[serde(skip)]
    pub truth: Vec<Vec<f64>>,
}

impl MetricsReport {
    pub fn station_mape(&self, station: &StationId) -> Option<f64> {
        self.per_station.iter().find(|s| &s.station_id == station)?.mape
    }
}

/// Builds per-day and per-station metrics from aligned `[day][station]`
/// matrices. Every comparator is scored on exactly the same pairs.
pub fn assemble_report(
    stations: &[StationId],
    dates: &[NaiveDate],
    predictions: Vec<Vec<f64>>,
    baselines: &BTreeMap<BaselineKind, Vec<Vec<f64>>>,
    truth: Vec<Vec<f64>>,
    skipped_days: Vec<NaiveDate>,
) -> Result<MetricsReport> {
    let l = stations.len();
    let shapes_ok = predictions.len() == dates.len()
        && truth.len() == dates.len()
        && predictions.iter().chain(&truth).all(|r| r.len() == l)
        && baselines
            .values()
            .all(|b| b.len() == dates.len() && b.iter().all(|r| r.len() == l));
    if !shapes_ok {
        return Err(Error::Shape("evaluation matrices do not match days × stations".into()));
    }
    let mut days = Vec::with_capacity(dates.len());
    for (d, &date) in dates.iter().enumerate() {
        let mut b = BTreeMap::new();
        for (k, m) in baselines {
            b.insert(*k, compute_metrics(&m[d], &truth[d])?);
        }
        days.push(DayMetrics {
            date,
            model: compute_metrics(&predictions[d], &truth[d])?,
            baselines: b,
        });
    }
    let station_mape = |pred: &[Vec<f64>], s: usize| -> (Option<f64>, usize) {
        let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
        for (p, t) in pred.iter().zip(&truth) {
            if t[s] == 0.0 {
                excluded += 1;
            } else {
                sum += 100.0 * ((p[s] - t[s]) / t[s]).abs();
                n += 1;
            }
        }
        ((n > 0).then(|| sum / n as f64), excluded)
    };
    let per_station: Vec<StationMetrics> = stations
        .iter()
        .enumerate()
        .map(|(s, id)| {
            let (mape, excluded) = station_mape(&predictions, s);
            StationMetrics {
                station_id: id.clone(),
                mape,
                excluded,
                baselines: baselines.iter().map(|(k, m)| (*k, station_mape(m, s).0)).collect(),
            }
        })
        .collect();
    let histogram = Histogram::of(per_station.iter().map(|s| s.mape));
    let baseline_histograms = baselines
        .keys()
        .map(|k| (*k, Histogram::of(per_station.iter().map(|s| s.baselines[k]))))
        .collect();
    let summary = Summary::of(days.iter().map(|d| &d.model));
    let baseline_summaries = baselines
        .keys()
        .map(|k| (*k, Summary::of(days.iter().map(|d| &d.baselines[k]))))
        .collect();
    Ok(MetricsReport {
        stations: stations.to_vec(),
        excluded_points: days.iter().map(|d| d.model.excluded).sum(),
        days,
        per_station,
        histogram,
        baseline_histograms,
        summary,
        baseline_summaries,
        skipped_days,
        predictions,
        truth,
    })
}

/// Predicts every day of `test` (as a target day) from the previous day's
/// features and scores the bundle and the requested baselines. Days whose
/// features cannot be built are skipped and logged.
pub fn evaluate_run(
    bundle: &ModelBundle,
    panel: &VolumePanel,
    tables: &ExternalTables,
    test: DateRange,
    train: DateRange,
    baselines: &[BaselineKind],
) -> Result<MetricsReport> {
    if panel.stations() != bundle.stations() {
        return Err(Error::StationMismatch(format!(
            "panel has {} stations that differ from the model's {}",
            panel.num_stations(),
            bundle.stations().len()
        )));
    }
    let builder = FeatureBuilder::new(
        panel,
        &tables.weather,
        &tables.calendar,
        &tables.stations,
        &bundle.upstream,
        &bundle.normalization,
        bundle.params.architecture.history,
    )?;
    let mut dates = Vec::new();
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    let mut base: BTreeMap<BaselineKind, Vec<Vec<f64>>> = baselines.iter().map(|k| (*k, Vec::new())).collect();
    let mut skipped = Vec::new();
    for target in test.days() {
        let anchor = target - Duration::days(1);
        let Some(t) = panel.day_index(target) else {
            log::warn!("skipping {target}: no observed exit volumes");
            skipped.push(target);
            continue;
        };
        let x = match builder.tensor(anchor) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("skipping {target}: {e}");
                skipped.push(target);
                continue;
            }
        };
        let mut row = BTreeMap::new();
        for &k in baselines {
            row.insert(k, baseline_predict(k, panel, anchor, train)?);
        }
        preds.push(predict_calibrated(&x, bundle)?.values);
        truth.push((0..panel.num_stations()).map(|s| panel.exit(s, t) as f64).collect());
        for (k, v) in row {
            base.get_mut(&k).expect("requested baseline").push(v);
        }
        dates.push(target);
    }
    if dates.is_empty() {
        return Err(Error::Validation(format!(
            "no day in {}..{} could be evaluated",
            test.start, test.end
        )));
    }
    assemble_report(bundle.stations(), &dates, preds, &base, truth, skipped)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn metrics_by_day_csv(r: &MetricsReport) -> String {
    let mut out = String::from("date,mape,rmse,r_square,excluded");
    for k in r.baseline_summaries.keys() {
        let n = k.name();
        let _ = write!(out, ",{n}_mape,{n}_rmse,{n}_r_square");
    }
    out.push('\n');
    for d in &r.days {
        let m = &d.model;
        let _ = write!(out, "{},{},{},{},{}", d.date, fmt_opt(m.mape), m.rmse, fmt_opt(m.r_square), m.excluded);
        for b in d.baselines.values() {
            let _ = write!(out, ",{},{},{}", fmt_opt(b.mape), b.rmse, fmt_opt(b.r_square));
        }
        out.push('\n');
    }
    out
}

fn metrics_by_station_csv(r: &MetricsReport) -> String {
    let mut out = String::from("station_id,mape,excluded");
    for k in r.baseline_summaries.keys() {
        let _ = write!(out, ",{}_mape", k.name());
    }
    out.push('\n');
    for s in &r.per_station {
        let _ = write!(out, "{},{},{}", s.station_id, fmt_opt(s.mape), s.excluded);
        for v in s.baselines.values() {
            let _ = write!(out, ",{}", fmt_opt(*v));
        }
        out.push('\n');
    }
    out
}

fn histogram_csv(r: &MetricsReport) -> String {
    let mut out = String::from("lower,upper,count");
    for k in r.baseline_histograms.keys() {
        let _ = write!(out, ",{}_count", k.name());
    }
    out.push('\n');
    let edges = &r.histogram.edges;
    for (i, lower) in edges.iter().enumerate() {
        let upper = edges.get(i + 1).map(|u| format!("{u}")).unwrap_or_else(|| "inf".into());
        let _ = write!(out, "{lower},{upper},{}", r.histogram.counts[i]);
        for h in r.baseline_histograms.values() {
            let _ = write!(out, ",{}", h.counts[i]);
        }
        out.push('\n');
    }
    let _ = write!(out, "undefined,,{}", r.histogram.undefined);
    for h in r.baseline_histograms.values() {
        let _ = write!(out, ",{}", h.undefined);
    }
    out.push('\n');
    out
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

fn svg_frame(title: &str, y_max: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, SVG_W / 2.0);
    let (x0, y0, x1, y1) = (MARGIN, SVG_H - MARGIN, SVG_W - MARGIN / 2.0, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, x0 - 4.0, y + 4.0);
    }
    s
}

fn mape_line_chart(r: &MetricsReport) -> String {
    let mut series: Vec<(String, Vec<Option<f64>>)> =
        vec![("model".into(), r.days.iter().map(|d| d.model.mape).collect())];
    for k in r.baseline_summaries.keys() {
        series.push((k.name().into(), r.days.iter().map(|d| d.baselines[k].mape).collect()));
    }
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter().flatten())
        .fold(1.0f64, |a, &b| a.max(b))
        * 1.05;
    let mut s = svg_frame("Daily MAPE (%)", y_max);
    let n = r.days.len().max(2) - 1;
    let (x0, y0, x1, y1) = (MARGIN, SVG_H - MARGIN, SVG_W - MARGIN / 2.0, MARGIN);
    for (i, (name, values)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter_map(|(d, v)| {
                v.map(|v| {
                    let x = x0 + (x1 - x0) * d as f64 / n as f64;
                    let y = y0 - (y0 - y1) * v / y_max;
                    format!("{x:.1},{y:.1}")
                })
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = y1 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly:.1}" fill="{color}">{name}</text>"#,
            x1 - 130.0
        );
    }
    if let (Some(first), Some(last)) = (r.days.first(), r.days.last()) {
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">{}</text>"#, y0 + 16.0, first.date);
        let _ = writeln!(s, r#"<text x="{x1}" y="{}" text-anchor="end">{}</text>"#, y0 + 16.0, last.date);
    }
    s.push_str("</svg>\n");
    s
}

fn histogram_chart(r: &MetricsReport) -> String {
    let h = &r.histogram;
    let labels: Vec<String> = h
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| match h.edges.get(i + 1) {
            Some(u) => format!("{e}-{u}"),
            None => format!(">={e}"),
        })
        .chain(std::iter::once("n/a".to_string()))
        .collect();
    let counts: Vec<usize> = h.counts.iter().copied().chain(std::iter::once(h.undefined)).collect();
    let y_max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = svg_frame("Stations by mean MAPE (%)", y_max);
    let (x0, y0, x1, y1) = (MARGIN, SVG_H - MARGIN, SVG_W - MARGIN / 2.0, MARGIN);
    let slot = (x1 - x0) / counts.len() as f64;
    for (i, (c, label)) in counts.iter().zip(&labels).enumerate() {
        let height = (y0 - y1) * *c as f64 / y_max;
        let x = x0 + slot * i as f64 + slot * 0.1;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{height:.1}" fill="{}"/>"#,
            y0 - height,
            slot * 0.8,
            COLORS[0]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{label}</text>"#,
            x + slot * 0.4,
            y0 + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `metrics_by_day.csv`, `metrics_by_station.csv`, `histogram.csv`,
/// `summary.json`, `mape_by_day.svg` and `mape_histogram.svg` into `dir`.
pub fn build_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = serde_json::to_string_pretty(report)?;
    summary.push('\n');
    let files = [
        ("metrics_by_day.csv", metrics_by_day_csv(report)),
        ("metrics_by_station.csv", metrics_by_station_csv(report)),
        ("histogram.csv", histogram_csv(report)),
        ("summary.json", summary),
        ("mape_by_day.svg", mape_line_chart(report)),
        ("mape_histogram.svg", histogram_chart(report)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
