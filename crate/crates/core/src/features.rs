//! Feature pre-processing: weather and date encodings, upstream dependent
//! stations, Box-Cox normalisation, vital-few flags and the `L × H × N`
//! feature tensor.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::dates::DateRange;
use crate::error::{Error, Result};
use crate::ingest::{CalendarTable, DistanceTable, StationProfile, VolumePanel, WeatherLevels, WeatherTable};
use crate::station::StationId;

/// Binary weather category of a station-day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeatherCategory {
    Normal = 0,
    Extreme = 1,
}

impl WeatherCategory {
    pub fn value(self) -> f64 {
        self as u8 as f64
    }
}

/// Calendar category of a day; holidays win over weekends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DateCategory {
    Workday = 0,
    Weekend = 1,
    Holiday = 2,
}

impl DateCategory {
    pub fn value(self) -> f64 {
        self as u8 as f64
    }
}

/// Extreme weather: visibility, rain or snow at level 2 or above, or wind or
/// temperature at level 3 or above.
pub fn encode_weather(levels: WeatherLevels) -> Result<WeatherCategory> {
    if levels.as_array().iter().any(|&l| l > 4) {
        return Err(Error::Validation(format!(
            "weather levels outside 0..=4: {levels:?}"
        )));
    }
    let severe_precip = levels.visibility >= 2 || levels.rain >= 2 || levels.snow >= 2;
    let severe_wind_temp = levels.wind >= 3 || levels.temperature >= 3;
    Ok(if severe_precip || severe_wind_temp {
        WeatherCategory::Extreme
    } else {
        WeatherCategory::Normal
    })
}

pub fn encode_date(day: NaiveDate, calendar: &CalendarTable) -> DateCategory {
    if calendar.is_holiday(day) {
        DateCategory::Holiday
    } else if calendar.is_weekend(day) {
        DateCategory::Weekend
    } else {
        DateCategory::Workday
    }
}

/// The `η` upstream dependent stations of every station.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamMap {
    pub eta: usize,
    pub lists: BTreeMap<StationId, Vec<StationId>>,
}

impl UpstreamMap {
    pub fn get(&self, station: &StationId) -> Option<&[StationId]> {
        self.lists.get(station).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        for (l, ups) in &self.lists {
            if ups.len() != self.eta {
                return Err(Error::Validation(format!(
                    "station {l} has {} upstream stations, expected {}",
                    ups.len(),
                    self.eta
                )));
            }
            if ups.contains(l) {
                return Err(Error::Validation(format!("station {l} lists itself as upstream")));
            }
            let mut seen = ups.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != ups.len() {
                return Err(Error::Validation(format!("station {l} has duplicate upstream entries")));
            }
        }
        Ok(())
    }
}

/// Stations `l' != l` ordered by `|distance(l, l') - avg_mileage(l)|`, ties by
/// ascending station id; the first `eta` are returned.
pub fn discover_upstream(
    station: &StationId,
    candidates: &[StationId],
    distances: &DistanceTable,
    avg_mileage: &BTreeMap<StationId, f64>,
    eta: usize,
) -> Result<Vec<StationId>> {
    let mileage = *avg_mileage.get(station).ok_or_else(|| {
        Error::Config(format!("no average mileage for station {station}"))
    })?;
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates.iter().filter(|c| *c != station) {
        let d = distances.get(station, c).ok_or_else(|| {
            Error::Config(format!("distance table lacks pair {station}-{c}"))
        })?;
        scored.push(((d - mileage).abs(), c));
    }
    if scored.len() < eta {
        return Err(Error::Config(format!(
            "station {station} has {} candidate upstream stations, need {eta}",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(eta).map(|(_, c)| c.clone()).collect())
}

/// Runs [`discover_upstream`] for every station. Stations without any exit
/// record in the mileage table fall back to mileage 0 (nearest stations).
pub fn build_upstream_map(
    stations: &[StationId],
    distances: &DistanceTable,
    avg_mileage: &BTreeMap<StationId, f64>,
    eta: usize,
) -> Result<UpstreamMap> {
    if eta == 0 {
        return Err(Error::Config("eta must be at least 1".into()));
    }
    let mut mileage = avg_mileage.clone();
    for s in stations {
        if !mileage.contains_key(s) {
            log::warn!("station {s} has no exit records; using nearest stations as upstream");
            mileage.insert(s.clone(), 0.0);
        }
    }
    let mut lists = BTreeMap::new();
    for s in stations {
        lists.insert(s.clone(), discover_upstream(s, stations, distances, &mileage, eta)?);
    }
    Ok(UpstreamMap { eta, lists })
}

/// Box-Cox parameters of one series: `z = ((y + s)^λ - 1) / λ`, `ln(y + s)` at `λ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCox {
    pub lambda: f64,
    pub shift: f64,
}

impl BoxCox {
    pub const IDENTITY_SHIFTED: BoxCox = BoxCox {
        lambda: 1.0,
        shift: 1.0,
    };

    pub fn apply(&self, y: f64) -> Result<f64> {
        boxcox_apply(y, self)
    }

    pub fn invert(&self, z: f64) -> Result<f64> {
        boxcox_invert(z, self)
    }
}

pub const LAMBDA_MIN: f64 = -2.0;
pub const LAMBDA_MAX: f64 = 2.0;
const LAMBDA_STEPS: i32 = 400;

/// The fitting grid `-2.00, -1.99, ..., 2.00`.
pub fn lambda_grid() -> impl Iterator<Item = f64> {
    (0..=LAMBDA_STEPS).map(|k| (k - LAMBDA_STEPS / 2) as f64 / 100.0)
}

pub fn boxcox_apply(y: f64, p: &BoxCox) -> Result<f64> {
    let v = y + p.shift;
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Domain(format!(
            "Box-Cox needs y + s > 0, got y={y}, s={}",
            p.shift
        )));
    }
    Ok(if p.lambda == 0.0 {
        v.ln()
    } else {
        (v.powf(p.lambda) - 1.0) / p.lambda
    })
}

pub fn boxcox_invert(z: f64, p: &BoxCox) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Domain(format!("cannot invert non-finite value {z}")));
    }
    if p.lambda == 0.0 {
        return Ok(z.exp() - p.shift);
    }
    let t = p.lambda * z;
    if !(t > -1.0) {
        return Err(Error::Domain(format!(
            "inverse Box-Cox needs 1 + λz > 0, got λ={}, z={z}",
            p.lambda
        )));
    }
    // exp(log1p(λz)/λ) keeps precision when λz is small.
    let y = (t.ln_1p() / p.lambda).exp() - p.shift;
    if !y.is_finite() {
        return Err(Error::Domain(format!(
            "inverse Box-Cox overflows for λ={}, z={z}",
            p.lambda
        )));
    }
    Ok(y)
}

/// Profile log-likelihood of the Box-Cox model for strictly positive data.
pub fn boxcox_log_likelihood(positive: &[f64], lambda: f64) -> f64 {
    let n = positive.len() as f64;
    let p = BoxCox { lambda, shift: 0.0 };
    let z: Vec<f64> = positive
        .iter()
        .map(|&v| boxcox_apply(v, &p).unwrap_or(f64::NAN))
        .collect();
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let log_sum: f64 = positive.iter().map(|v| v.ln()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * log_sum
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoxFit {
    pub params: BoxCox,
    /// Set when the likelihood was degenerate and λ fell back to 1.
    pub degenerate: bool,
}

/// Maximum-likelihood λ over the fixed grid, after shifting the series so its
/// minimum is at least 1 when it contains non-positive values.
pub fn fit_boxcox(series: &[f64]) -> Result<BoxCoxFit> {
    if series.is_empty() {
        return Err(Error::Validation("cannot fit Box-Cox on an empty series".into()));
    }
    if series.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(
            "Box-Cox series must be finite and non-negative".into(),
        ));
    }
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min <= 0.0 { 1.0 - min } else { 1.0 };
    let shifted: Vec<f64> = series.iter().map(|v| v + shift).collect();
    let constant = series.iter().all(|&v| v == series[0]);
    if constant {
        log::warn!("constant series: Box-Cox likelihood degenerate, using λ = 1");
        return Ok(BoxCoxFit {
            params: BoxCox { lambda: 1.0, shift },
            degenerate: true,
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for lambda in lambda_grid() {
        let ll = boxcox_log_likelihood(&shifted, lambda);
        if ll.is_finite() && best.is_none_or(|(_, b)| ll > b) {
            best = Some((lambda, ll));
        }
    }
    match best {
        Some((lambda, _)) => Ok(BoxCoxFit {
            params: BoxCox { lambda, shift },
            degenerate: false,
        }),
        None => {
            log::warn!("Box-Cox likelihood non-finite on the whole grid, using λ = 1");
            Ok(BoxCoxFit {
                params: BoxCox { lambda: 1.0, shift },
                degenerate: true,
            })
        }
    }
}

/// Per-station Box-Cox parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoxCoxParams {
    pub stations: BTreeMap<StationId, BoxCox>,
}

impl BoxCoxParams {
    pub fn get(&self, s: &StationId) -> Result<&BoxCox> {
        self.stations
            .get(s)
            .ok_or_else(|| Error::Config(format!("no Box-Cox parameters for station {s}")))
    }
}

/// Box-Cox parameters for exit volumes (targets) and entry volumes (features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub exit: BoxCoxParams,
    pub entry: BoxCoxParams,
}

/// Fits exit and entry Box-Cox parameters per station on `range`.
pub fn fit_station_boxcox(panel: &VolumePanel, range: DateRange) -> Result<Normalization> {
    let mut exit = BoxCoxParams::default();
    let mut entry = BoxCoxParams::default();
    for (l, s) in panel.stations().iter().enumerate() {
        exit.stations
            .insert(s.clone(), fit_boxcox(&panel.exit_series(l, range)?)?.params);
        entry
            .stations
            .insert(s.clone(), fit_boxcox(&panel.entry_series(l, range)?)?.params);
    }
    Ok(Normalization { exit, entry })
}

/// Vital-few flags per station.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VitalFlags {
    pub stations: BTreeMap<StationId, bool>,
}

impl VitalFlags {
    pub fn is_vital(&self, s: &StationId) -> bool {
        self.stations.get(s).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.stations.values().filter(|v| **v).count()
    }

    pub fn all(stations: &[StationId], vital: bool) -> Self {
        VitalFlags {
            stations: stations.iter().map(|s| (s.clone(), vital)).collect(),
        }
    }
}

/// Indices of stations whose mean value exceeds the cross-station mean by more
/// than three (population) standard deviations.
pub fn three_sigma_outliers(means: &[f64]) -> Vec<bool> {
    let n = means.len();
    if n < 2 {
        return vec![false; n];
    }
    let mu = means.iter().sum::<f64>() / n as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    means.iter().map(|&m| m > mu + 3.0 * sigma).collect()
}

/// Flags stations whose mean daily exit volume over `range` is more than three
/// standard deviations above the mean of all station means.
pub fn flag_vital(panel: &VolumePanel, range: DateRange) -> Result<VitalFlags> {
    let mut means = Vec::with_capacity(panel.num_stations());
    for l in 0..panel.num_stations() {
        let s = panel.exit_series(l, range)?;
        means.push(s.iter().sum::<f64>() / s.len() as f64);
    }
    let flags = three_sigma_outliers(&means);
    Ok(VitalFlags {
        stations: panel.stations().iter().cloned().zip(flags).collect(),
    })
}

/// Input tensor `X` for one anchor day, stored row-major as `[L × H × N]`.
///
/// Slot 0 is the weather category, slot 1 the date category and slots
/// `2..N` the Box-Cox-normalised entry volumes of the upstream stations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub anchor: NaiveDate,
    pub stations: Vec<StationId>,
    pub history: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureTensor {
    pub fn num_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn get(&self, station: usize, day: usize, slot: usize) -> f64 {
        self.values[(station * self.history + day) * self.width + slot]
    }

    /// Calendar day of column `h` (0 = oldest).
    pub fn day_of(&self, h: usize) -> NaiveDate {
        self.anchor - Duration::days((self.history - 1 - h) as i64)
    }

    /// The `L × N` matrix of column `h`, row-major.
    pub fn day_slice(&self, h: usize) -> Vec<f64> {
        let (l, n) = (self.num_stations(), self.width);
        let mut out = Vec::with_capacity(l * n);
        for s in 0..l {
            let start = (s * self.history + h) * n;
            out.extend_from_slice(&self.values[start..start + n]);
        }
        out
    }
}

/// Precomputed lookups for building tensors and datasets over one panel.
pub struct FeatureBuilder<'a> {
    panel: &'a VolumePanel,
    weather: &'a WeatherTable,
    calendar: &'a CalendarTable,
    regions: Vec<String>,
    upstream: Vec<Vec<usize>>,
    entry: Vec<BoxCox>,
    exit: Vec<BoxCox>,
    history: usize,
    eta: usize,
}

impl<'a> FeatureBuilder<'a> {
    pub fn new(
        panel: &'a VolumePanel,
        weather: &'a WeatherTable,
        calendar: &'a CalendarTable,
        profiles: &[StationProfile],
        upstream: &UpstreamMap,
        normalization: &Normalization,
        history: usize,
    ) -> Result<Self> {
        if history < 1 {
            return Err(Error::Config("history length H must be at least 1".into()));
        }
        let region_of: BTreeMap<&StationId, &str> = profiles
            .iter()
            .map(|p| (&p.station_id, p.region.as_str()))
            .collect();
        let mut regions = Vec::new();
        let mut up_idx = Vec::new();
        let mut entry = Vec::new();
        let mut exit = Vec::new();
        for s in panel.stations() {
            regions.push(
                region_of
                    .get(s)
                    .ok_or_else(|| Error::Config(format!("no profile for station {s}")))?
                    .to_string(),
            );
            let ups = upstream
                .get(s)
                .ok_or_else(|| Error::Config(format!("no upstream list for station {s}")))?;
            if ups.len() != upstream.eta {
                return Err(Error::Config(format!(
                    "station {s} has {} upstream stations, expected {}",
                    ups.len(),
                    upstream.eta
                )));
            }
            let idx = ups
                .iter()
                .map(|u| {
                    panel.station_index(u).ok_or_else(|| {
                        Error::Config(format!("upstream station {u} of {s} not in panel"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            up_idx.push(idx);
            entry.push(*normalization.entry.get(s)?);
            exit.push(*normalization.exit.get(s)?);
        }
        Ok(FeatureBuilder {
            panel,
            weather,
            calendar,
            regions,
            upstream: up_idx,
            entry,
            exit,
            history,
            eta: upstream.eta,
        })
    }

    pub fn width(&self) -> usize {
        self.eta + 2
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn panel(&self) -> &VolumePanel {
        self.panel
    }

    /// Feature tensor for anchor day `anchor`, covering `anchor-H+1..=anchor`.
    pub fn tensor(&self, anchor: NaiveDate) -> Result<FeatureTensor> {
        let (l_count, h_count, n) = (self.panel.num_stations(), self.history, self.width());
        let first = anchor - Duration::days(h_count as i64 - 1);
        let first_idx = self.panel.day_index(first).ok_or_else(|| {
            Error::Validation(format!("panel has no data for {first} (window of {anchor})"))
        })?;
        if self.panel.day_index(anchor).is_none() {
            return Err(Error::Validation(format!("panel has no data for {anchor}")));
        }
        let mut values = vec![0.0; l_count * h_count * n];
        for h in 0..h_count {
            let day = first + Duration::days(h as i64);
            let d = first_idx + h;
            let date_cat = encode_date(day, self.calendar).value();
            for l in 0..l_count {
                let levels = self.weather.get(&self.regions[l], day).ok_or_else(|| {
                    Error::Validation(format!(
                        "no weather for region {} on {day}",
                        self.regions[l]
                    ))
                })?;
                let base = (l * h_count + h) * n;
                values[base] = encode_weather(levels)?.value();
                values[base + 1] = date_cat;
                for (j, &u) in self.upstream[l].iter().enumerate() {
                    values[base + 2 + j] = boxcox_apply(self.panel.entry(u, d) as f64, &self.entry[u])?;
                }
            }
        }
        Ok(FeatureTensor {
            anchor,
            stations: self.panel.stations().to_vec(),
            history: h_count,
            width: n,
            values,
        })
    }

    /// One sample per anchor in `anchors` (stride 1), ordered by anchor.
    pub fn dataset(&self, anchors: DateRange) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(anchors.len());
        for anchor in anchors.days() {
            let next = anchor + Duration::days(1);
            let d = self.panel.day_index(next).ok_or_else(|| {
                Error::Config(format!("panel has no target day {next} for anchor {anchor}"))
            })?;
            let features = self.tensor(anchor)?;
            let raw: Vec<f64> = (0..self.panel.num_stations())
                .map(|l| self.panel.exit(l, d) as f64)
                .collect();
            let target = raw
                .iter()
                .zip(&self.exit)
                .map(|(&y, p)| boxcox_apply(y, p))
                .collect::<Result<Vec<_>>>()?;
            out.push(Sample {
                anchor,
                features,
                target,
                raw_target: raw,
            });
        }
        if out.is_empty() {
            return Err(Error::Config("sample range yields zero samples".into()));
        }
        Ok(out)
    }
}

/// One training or evaluation example: features on day `anchor`, targets on
/// `anchor + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub anchor: NaiveDate,
    pub features: FeatureTensor,
    /// Box-Cox-normalised next-day exit volumes.
    pub target: Vec<f64>,
    /// Next-day exit volumes.
    pub raw_target: Vec<f64>,
}

/// Anchor days whose window and next-day target lie inside `targets_within`
/// and whose history starts no earlier than `data`'s first day.
pub fn feasible_anchors(data: DateRange, targets_within: DateRange, history: usize) -> Result<DateRange> {
    let first_anchor = data.start + Duration::days(history as i64 - 1);
    let start = first_anchor.max(targets_within.start - Duration::days(1));
    let end = (targets_within.end - Duration::days(1)).min(data.end - Duration::days(1));
    if end < start {
        return Err(Error::Config(format!(
            "no anchor day has {history} days of history and a target inside {}..{}",
            targets_within.start, targets_within.end
        )));
    }
    DateRange::new(start, end)
}

/// Builds a single feature tensor; see [`FeatureBuilder::tensor`].
#[allow(clippy::too_many_arguments)]
pub fn build_feature_tensor(
    anchor: NaiveDate,
    panel: &VolumePanel,
    weather: &WeatherTable,
    calendar: &CalendarTable,
    profiles: &[StationProfile],
    upstream: &UpstreamMap,
    normalization: &Normalization,
    history: usize,
) -> Result<FeatureTensor> {
    FeatureBuilder::new(panel, weather, calendar, profiles, upstream, normalization, history)?
        .tensor(anchor)
}

/// Builds the sliding-window dataset; see [`FeatureBuilder::dataset`].
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    panel: &VolumePanel,
    weather: &WeatherTable,
    calendar: &CalendarTable,
    profiles: &[StationProfile],
    upstream: &UpstreamMap,
    normalization: &Normalization,
    history: usize,
    anchors: DateRange,
) -> Result<Vec<Sample>> {
    FeatureBuilder::new(panel, weather, calendar, profiles, upstream, normalization, history)?
        .dataset(anchors)
}

const FEATURES_MAGIC: &[u8; 8] = b"PHDSTFEA";
pub const FEATURES_VERSION: u32 = 1;

/// Writes tensors sharing one station order and shape into the `features.bin`
/// container: magic, version, `L`, `H`, `N`, station ids, tensor count, then per
/// tensor the anchor day (days since 0001-01-01) and `L·H·N` little-endian f64s.
pub fn write_features_bin<W: Write>(mut out: W, tensors: &[FeatureTensor]) -> Result<()> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Validation("no feature tensors to write".into()))?;
    for t in tensors {
        if t.stations != first.stations || t.history != first.history || t.width != first.width {
            return Err(Error::Shape("feature tensors disagree on shape or station order".into()));
        }
    }
    out.write_all(FEATURES_MAGIC)?;
    for v in [
        FEATURES_VERSION,
        first.stations.len() as u32,
        first.history as u32,
        first.width as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for s in &first.stations {
        let b = s.as_str().as_bytes();
        out.write_all(&(b.len() as u32).to_le_bytes())?;
        out.write_all(b)?;
    }
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&t.anchor.num_days_from_ce().to_le_bytes())?;
        for v in &t.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_features_bin<R: Read>(mut input: R) -> Result<Vec<FeatureTensor>> {
    fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| Error::Load(format!("truncated features file: {e}")))?;
        Ok(u32::from_le_bytes(b))
    }
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::Load(format!("truncated features file: {e}")))?;
    if &magic != FEATURES_MAGIC {
        return Err(Error::Load("not a features file (bad magic)".into()));
    }
    let version = u32_of(&mut input)?;
    if version != FEATURES_VERSION {
        return Err(Error::Load(format!(
            "features file version {version} not supported (expected {FEATURES_VERSION})"
        )));
    }
    let (l, h, n) = (
        u32_of(&mut input)? as usize,
        u32_of(&mut input)? as usize,
        u32_of(&mut input)? as usize,
    );
    let mut stations = Vec::with_capacity(l);
    for _ in 0..l {
        let len = u32_of(&mut input)? as usize;
        let mut b = vec![0u8; len];
        input
            .read_exact(&mut b)
            .map_err(|e| Error::Load(format!("truncated features file: {e}")))?;
        stations.push(StationId::new(
            String::from_utf8(b).map_err(|_| Error::Load("station id not UTF-8".into()))?,
        ));
    }
    let count = u32_of(&mut input)? as usize;
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0u8; l * h * n * 8];
    for _ in 0..count {
        let days = u32_of(&mut input)? as i32;
        let anchor = NaiveDate::from_num_days_from_ce_opt(days)
            .ok_or_else(|| Error::Load(format!("invalid anchor day {days}")))?;
        input
            .read_exact(&mut buf)
            .map_err(|e| Error::Load(format!("truncated features file: {e}")))?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(FeatureTensor {
            anchor,
            stations: stations.clone(),
            history: h,
            width: n,
            values,
        });
    }
    Ok(out)
}
