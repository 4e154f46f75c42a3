//! Toll-record parsing, daily aggregation and the external lookup tables
//! (weather, calendar, station profiles, route distances).
//!
//! All CSV inputs are UTF-8 with a header row. Rejected toll rows never abort
//! a parse; they are collected with their line number and a reason so the
//! caller can decide whether the rejection rate is acceptable.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::dates::{parse_iso_date, DateRange};
use crate::error::{Error, Result};
use crate::station::StationId;

pub const TOLL_HEADER: [&str; 12] = [
    "collector_id",
    "vehicle_license",
    "vehicle_type",
    "card_id",
    "etc_id",
    "etc_cpu_id",
    "entry_time",
    "exit_time",
    "entry_station",
    "entry_lane",
    "exit_station",
    "exit_lane",
];
pub const WEATHER_HEADER: [&str; 7] = [
    "region",
    "date",
    "visibility_level",
    "rain_level",
    "snow_level",
    "wind_level",
    "temperature_level",
];
pub const CALENDAR_HEADER: [&str; 2] = ["date", "kind"];
pub const STATIONS_HEADER: [&str; 3] = ["station_id", "name", "region"];
pub const DISTANCES_HEADER: [&str; 3] = ["from_station", "to_station", "km"];

const TIMESTAMP_FORMAT: &str = "%Y/%m/%d %H:%M:%S";
const TIMESTAMP_WRITE_FORMAT: &str = "%Y/%-m/%-d %H:%M:%S";

/// Default maximum share of rejected toll rows before ingestion is refused.
pub const DEFAULT_REJECTION_THRESHOLD: f64 = 0.05;

/// One vehicle passage through the closed network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TollRecord {
    pub collector_id: String,
    pub vehicle_license: String,
    pub vehicle_type: u8,
    pub card_id: String,
    pub etc_id: String,
    pub etc_cpu_id: String,
    pub entry_time: NaiveDateTime,
    pub exit_time: NaiveDateTime,
    pub entry_station: StationId,
    pub entry_lane: u32,
    pub exit_station: StationId,
    pub exit_lane: u32,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT).ok()
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_WRITE_FORMAT).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// 1-based line number in the source file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedRecords {
    pub records: Vec<TollRecord>,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub accepted: u64,
    pub rejections: Vec<Rejection>,
}

impl ParseStats {
    pub fn rejection_rate(&self) -> f64 {
        let total = self.accepted + self.rejections.len() as u64;
        if total == 0 {
            0.0
        } else {
            self.rejections.len() as f64 / total as f64
        }
    }

    /// Turns an excessive rejection rate into a fatal validation error.
    pub fn check_rejection_rate(&self, threshold: f64) -> Result<()> {
        let rate = self.rejection_rate();
        if rate > threshold {
            let first = self
                .rejections
                .first()
                .map(|r| format!(" (first: line {}: {})", r.line, r.reason))
                .unwrap_or_default();
            return Err(Error::Validation(format!(
                "{} of {} toll rows rejected ({:.2}% > {:.2}% threshold){first}",
                self.rejections.len(),
                self.accepted + self.rejections.len() as u64,
                rate * 100.0,
                threshold * 100.0
            )));
        }
        Ok(())
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str], file: &str) -> Result<()> {
    let got: Vec<&str> = found.iter().map(|h| h.trim()).collect();
    if got != expected {
        return Err(Error::Schema(format!(
            "{file}: header {:?} does not match expected {:?}",
            got, expected
        )));
    }
    Ok(())
}

fn reader_for<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input)
}

fn read_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str], file: &str) -> Result<()> {
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Err(Error::Schema(format!("{file}: missing header row")));
    }
    check_header(&header, expected, file)
}

fn parse_toll_row(
    row: &csv::StringRecord,
    stations: &HashSet<StationId>,
) -> std::result::Result<TollRecord, String> {
    if row.len() != TOLL_HEADER.len() {
        return Err(format!(
            "field count {} (expected {})",
            row.len(),
            TOLL_HEADER.len()
        ));
    }
    for (i, field) in row.iter().enumerate() {
        if field.trim().is_empty() {
            return Err(format!("empty field {}", TOLL_HEADER[i]));
        }
    }
    let text = |i: usize| row[i].trim().to_string();
    let vehicle_type: u8 = row[2]
        .trim()
        .parse()
        .map_err(|_| format!("bad vehicle_type {:?}", &row[2]))?;
    let entry_time =
        parse_timestamp(&row[6]).ok_or_else(|| format!("bad timestamp entry_time {:?}", &row[6]))?;
    let exit_time =
        parse_timestamp(&row[7]).ok_or_else(|| format!("bad timestamp exit_time {:?}", &row[7]))?;
    let lane = |i: usize| -> std::result::Result<u32, String> {
        match row[i].trim().parse::<u32>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("bad {} {:?}", TOLL_HEADER[i], &row[i])),
        }
    };
    let entry_lane = lane(9)?;
    let exit_lane = lane(11)?;
    let entry_station = StationId::new(text(8));
    let exit_station = StationId::new(text(10));
    if !stations.contains(&entry_station) {
        return Err(format!("unknown station {entry_station}"));
    }
    if !stations.contains(&exit_station) {
        return Err(format!("unknown station {exit_station}"));
    }
    if exit_time < entry_time {
        return Err("time order".to_string());
    }
    Ok(TollRecord {
        collector_id: text(0),
        vehicle_license: text(1),
        vehicle_type,
        card_id: text(3),
        etc_id: text(4),
        etc_cpu_id: text(5),
        entry_time,
        exit_time,
        entry_station,
        entry_lane,
        exit_station,
        exit_lane,
    })
}

/// Streams toll records to `sink` without holding them all in memory.
pub fn parse_toll_records_with<R: Read>(
    input: R,
    stations: &HashSet<StationId>,
    mut sink: impl FnMut(TollRecord),
) -> Result<ParseStats> {
    let mut rdr = reader_for(input);
    read_header(&mut rdr, &TOLL_HEADER, "toll.csv")?;
    let mut stats = ParseStats::default();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {
                let line = row.position().map(|p| p.line()).unwrap_or(line);
                match parse_toll_row(&row, stations) {
                    Ok(rec) => {
                        stats.accepted += 1;
                        sink(rec);
                    }
                    Err(reason) => stats.rejections.push(Rejection { line, reason }),
                }
            }
            // Malformed UTF-8 and similar row-level problems reject the row only.
            Err(e) if !matches!(e.kind(), csv::ErrorKind::Io(_)) => {
                stats.rejections.push(Rejection {
                    line,
                    reason: format!("unreadable row: {e}"),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(stats)
}

pub fn parse_toll_records<R: Read>(
    input: R,
    stations: &HashSet<StationId>,
) -> Result<ParsedRecords> {
    let mut records = Vec::new();
    let stats = parse_toll_records_with(input, stations, |r| records.push(r))?;
    Ok(ParsedRecords {
        records,
        rejections: stats.rejections,
    })
}

pub fn toll_csv_writer<W: Write>(out: W) -> Result<csv::Writer<W>> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TOLL_HEADER)?;
    Ok(w)
}

pub fn write_toll_record<W: Write>(w: &mut csv::Writer<W>, r: &TollRecord) -> Result<()> {
    w.write_record([
        r.collector_id.as_str(),
        r.vehicle_license.as_str(),
        &r.vehicle_type.to_string(),
        r.card_id.as_str(),
        r.etc_id.as_str(),
        r.etc_cpu_id.as_str(),
        &format_timestamp(&r.entry_time),
        &format_timestamp(&r.exit_time),
        r.entry_station.as_str(),
        &r.entry_lane.to_string(),
        r.exit_station.as_str(),
        &r.exit_lane.to_string(),
    ])?;
    Ok(())
}

pub fn write_toll_records<W: Write>(out: W, records: &[TollRecord]) -> Result<()> {
    let mut w = toll_csv_writer(out)?;
    for r in records {
        write_toll_record(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

/// Daily exit (`xTF`) and entry (`nTF`) counts per station.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumePanel {
    stations: Vec<StationId>,
    range: DateRange,
    exit: Vec<u64>,
    entry: Vec<u64>,
}

impl VolumePanel {
    pub fn zeros(stations: Vec<StationId>, range: DateRange) -> Self {
        let n = stations.len() * range.len();
        VolumePanel {
            stations,
            range,
            exit: vec![0; n],
            entry: vec![0; n],
        }
    }

    /// Builds a panel from station-major `[station × day]` matrices.
    pub fn from_matrices(
        stations: Vec<StationId>,
        range: DateRange,
        exit: Vec<u64>,
        entry: Vec<u64>,
    ) -> Result<Self> {
        let n = stations.len() * range.len();
        if exit.len() != n || entry.len() != n {
            return Err(Error::Shape(format!(
                "panel matrices must hold {} x {} = {n} values",
                stations.len(),
                range.len()
            )));
        }
        Ok(VolumePanel {
            stations,
            range,
            exit,
            entry,
        })
    }

    pub fn stations(&self) -> &[StationId] {
        &self.stations
    }

    pub fn range(&self) -> DateRange {
        self.range
    }

    pub fn num_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn num_days(&self) -> usize {
        self.range.len()
    }

    pub fn days(&self) -> Vec<NaiveDate> {
        self.range.days().collect()
    }

    pub fn station_index(&self, id: &StationId) -> Option<usize> {
        self.stations.iter().position(|s| s == id)
    }

    pub fn day_index(&self, day: NaiveDate) -> Option<usize> {
        self.range.offset(day)
    }

    pub fn exit(&self, station: usize, day: usize) -> u64 {
        self.exit[station * self.num_days() + day]
    }

    pub fn entry(&self, station: usize, day: usize) -> u64 {
        self.entry[station * self.num_days() + day]
    }

    pub fn exit_mut(&mut self, station: usize, day: usize) -> &mut u64 {
        let d = self.num_days();
        &mut self.exit[station * d + day]
    }

    pub fn entry_mut(&mut self, station: usize, day: usize) -> &mut u64 {
        let d = self.num_days();
        &mut self.entry[station * d + day]
    }

    pub fn exit_on(&self, station: usize, day: NaiveDate) -> Option<u64> {
        self.day_index(day).map(|d| self.exit(station, d))
    }

    pub fn entry_on(&self, station: usize, day: NaiveDate) -> Option<u64> {
        self.day_index(day).map(|d| self.entry(station, d))
    }

    pub fn exit_matrix(&self) -> &[u64] {
        &self.exit
    }

    pub fn entry_matrix(&self) -> &[u64] {
        &self.entry
    }

    /// Exit volumes of one station over `range` (must lie inside the panel).
    pub fn exit_series(&self, station: usize, range: DateRange) -> Result<Vec<f64>> {
        self.series(&self.exit, station, range)
    }

    pub fn entry_series(&self, station: usize, range: DateRange) -> Result<Vec<f64>> {
        self.series(&self.entry, station, range)
    }

    fn series(&self, m: &[u64], station: usize, range: DateRange) -> Result<Vec<f64>> {
        let (a, b) = match (self.day_index(range.start), self.day_index(range.end)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "range {}..{} not covered by panel {}..{}",
                    range.start, range.end, self.range.start, self.range.end
                )))
            }
        };
        let base = station * self.num_days();
        Ok(m[base + a..=base + b].iter().map(|&v| v as f64).collect())
    }

    pub fn total_exit(&self) -> u64 {
        self.exit.iter().sum()
    }

    pub fn total_entry(&self) -> u64 {
        self.entry.iter().sum()
    }
}

/// Incremental counter behind [`aggregate_daily_volumes`]; partial
/// accumulators over disjoint record chunks merge by addition.
#[derive(Debug, Clone)]
pub struct VolumeAccumulator {
    index: HashMap<StationId, usize>,
    panel: VolumePanel,
}

impl VolumeAccumulator {
    pub fn new(stations: &[StationId], range: DateRange) -> Self {
        let index = stations
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        VolumeAccumulator {
            index,
            panel: VolumePanel::zeros(stations.to_vec(), range),
        }
    }

    pub fn add(&mut self, r: &TollRecord) {
        if let (Some(&l), Some(d)) = (
            self.index.get(&r.exit_station),
            self.panel.day_index(r.exit_time.date()),
        ) {
            *self.panel.exit_mut(l, d) += 1;
        }
        if let (Some(&l), Some(d)) = (
            self.index.get(&r.entry_station),
            self.panel.day_index(r.entry_time.date()),
        ) {
            *self.panel.entry_mut(l, d) += 1;
        }
    }

    pub fn merge(&mut self, other: &VolumeAccumulator) {
        for (a, b) in self.panel.exit.iter_mut().zip(&other.panel.exit) {
            *a += b;
        }
        for (a, b) in self.panel.entry.iter_mut().zip(&other.panel.entry) {
            *a += b;
        }
    }

    pub fn finish(self) -> VolumePanel {
        self.panel
    }
}

/// Counts exits and entries per station and civil day. Records outside the
/// date range or referencing stations outside `stations` are ignored.
pub fn aggregate_daily_volumes(
    records: &[TollRecord],
    stations: &[StationId],
    range: DateRange,
) -> VolumePanel {
    let mut acc = VolumeAccumulator::new(stations, range);
    for r in records {
        acc.add(r);
    }
    acc.finish()
}

/// Same result as [`aggregate_daily_volumes`], computed over `threads` chunks.
pub fn aggregate_daily_volumes_parallel(
    records: &[TollRecord],
    stations: &[StationId],
    range: DateRange,
    threads: usize,
) -> VolumePanel {
    let threads = threads.max(1);
    if threads == 1 || records.len() < 2 * threads {
        return aggregate_daily_volumes(records, stations, range);
    }
    let chunk = records.len().div_ceil(threads);
    let partials: Vec<VolumeAccumulator> = std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut acc = VolumeAccumulator::new(stations, range);
                    for r in part {
                        acc.add(r);
                    }
                    acc
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("aggregation worker panicked"))
            .collect()
    });
    let mut total = VolumeAccumulator::new(stations, range);
    for p in &partials {
        total.merge(p);
    }
    total.finish()
}

/// Station metadata; `region` joins the weather table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationProfile {
    pub station_id: StationId,
    pub name: String,
    pub region: String,
}

/// Symmetric route distances in km. `d(a, a) = 0` is implicit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistanceTable {
    km: BTreeMap<(StationId, StationId), f64>,
}

impl DistanceTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(a: &StationId, b: &StationId) -> (StationId, StationId) {
        if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        }
    }

    /// Inserts a pair; a conflicting value for the reverse direction is an error.
    pub fn insert(&mut self, a: &StationId, b: &StationId, km: f64) -> Result<()> {
        if a == b {
            if km != 0.0 {
                return Err(Error::Validation(format!(
                    "distance from {a} to itself must be 0, got {km}"
                )));
            }
            return Ok(());
        }
        if !(km.is_finite() && km > 0.0) {
            return Err(Error::Validation(format!(
                "distance {a}-{b} must be positive, got {km}"
            )));
        }
        let key = Self::key(a, b);
        if let Some(&prev) = self.km.get(&key) {
            if prev != km {
                return Err(Error::Validation(format!(
                    "conflicting distances for {a}-{b}: {prev} vs {km}"
                )));
            }
        }
        self.km.insert(key, km);
        Ok(())
    }

    pub fn get(&self, a: &StationId, b: &StationId) -> Option<f64> {
        if a == b {
            return Some(0.0);
        }
        self.km.get(&Self::key(a, b)).copied()
    }

    /// Number of stored unordered pairs of distinct stations.
    pub fn len(&self) -> usize {
        self.km.len()
    }

    pub fn is_empty(&self) -> bool {
        self.km.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&StationId, &StationId, f64)> {
        self.km.iter().map(|((a, b), &km)| (a, b, km))
    }
}

/// Weather severity levels, each in `0..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WeatherLevels {
    pub visibility: u8,
    pub rain: u8,
    pub snow: u8,
    pub wind: u8,
    pub temperature: u8,
}

impl WeatherLevels {
    pub fn as_array(&self) -> [u8; 5] {
        [
            self.visibility,
            self.rain,
            self.snow,
            self.wind,
            self.temperature,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeatherTable {
    rows: BTreeMap<(String, NaiveDate), WeatherLevels>,
}

impl WeatherTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, region: &str, date: NaiveDate, levels: WeatherLevels) -> Result<()> {
        if levels.as_array().iter().any(|&l| l > 4) {
            return Err(Error::Validation(format!(
                "weather levels for {region} on {date} outside 0..=4: {levels:?}"
            )));
        }
        if self
            .rows
            .insert((region.to_string(), date), levels)
            .is_some()
        {
            return Err(Error::Validation(format!(
                "duplicate weather row for {region} on {date}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, region: &str, date: NaiveDate) -> Option<WeatherLevels> {
        self.rows.get(&(region.to_string(), date)).copied()
    }

    pub fn regions(&self) -> BTreeSet<&str> {
        self.rows.keys().map(|(r, _)| r.as_str()).collect()
    }

    /// First and last date present in the table.
    pub fn date_span(&self) -> Option<DateRange> {
        let min = self.rows.keys().map(|(_, d)| *d).min()?;
        let max = self.rows.keys().map(|(_, d)| *d).max()?;
        Some(DateRange { start: min, end: max })
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, NaiveDate, WeatherLevels)> {
        self.rows.iter().map(|((r, d), l)| (r.as_str(), *d, *l))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Holiday dates; weekends are Saturday and Sunday.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CalendarTable {
    holidays: BTreeSet<NaiveDate>,
}

impl CalendarTable {
    pub fn new(holidays: impl IntoIterator<Item = NaiveDate>) -> Self {
        CalendarTable {
            holidays: holidays.into_iter().collect(),
        }
    }

    pub fn is_holiday(&self, day: NaiveDate) -> bool {
        self.holidays.contains(&day)
    }

    pub fn is_weekend(&self, day: NaiveDate) -> bool {
        crate::dates::is_weekend(day)
    }

    pub fn holidays(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.holidays.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.holidays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.holidays.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ExternalTables {
    pub weather: WeatherTable,
    pub calendar: CalendarTable,
    pub stations: Vec<StationProfile>,
    pub distances: DistanceTable,
}

impl ExternalTables {
    pub fn station_ids(&self) -> Vec<StationId> {
        self.stations.iter().map(|s| s.station_id.clone()).collect()
    }

    pub fn station_set(&self) -> HashSet<StationId> {
        self.stations.iter().map(|s| s.station_id.clone()).collect()
    }
}

fn field<'a>(row: &'a csv::StringRecord, i: usize, file: &str) -> Result<&'a str> {
    row.get(i)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| {
            Error::Validation(format!(
                "{file} line {}: missing field {}",
                row.position().map(|p| p.line()).unwrap_or(0),
                i + 1
            ))
        })
}

fn line_of(row: &csv::StringRecord) -> u64 {
    row.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_level(s: &str, file: &str, line: u64) -> Result<u8> {
    s.parse::<u8>()
        .ok()
        .filter(|&v| v <= 4)
        .ok_or_else(|| Error::Validation(format!("{file} line {line}: level {s:?} not in 0..=4")))
}

pub fn read_weather<R: Read>(input: R) -> Result<WeatherTable> {
    let mut rdr = reader_for(input);
    read_header(&mut rdr, &WEATHER_HEADER, "weather.csv")?;
    let mut table = WeatherTable::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        let f = |i| field(&row, i, "weather.csv");
        let date = parse_iso_date(f(1)?)?;
        let levels = WeatherLevels {
            visibility: parse_level(f(2)?, "weather.csv", line)?,
            rain: parse_level(f(3)?, "weather.csv", line)?,
            snow: parse_level(f(4)?, "weather.csv", line)?,
            wind: parse_level(f(5)?, "weather.csv", line)?,
            temperature: parse_level(f(6)?, "weather.csv", line)?,
        };
        table.insert(f(0)?, date, levels)?;
    }
    Ok(table)
}

pub fn read_calendar<R: Read>(input: R) -> Result<CalendarTable> {
    let mut rdr = reader_for(input);
    read_header(&mut rdr, &CALENDAR_HEADER, "calendar.csv")?;
    let mut holidays = BTreeSet::new();
    for row in rdr.records() {
        let row = row?;
        let date = parse_iso_date(field(&row, 0, "calendar.csv")?)?;
        let kind = field(&row, 1, "calendar.csv")?;
        if kind != "holiday" {
            return Err(Error::Validation(format!(
                "calendar.csv line {}: unknown kind {kind:?}",
                line_of(&row)
            )));
        }
        if !holidays.insert(date) {
            return Err(Error::Validation(format!(
                "calendar.csv: duplicate holiday {date}"
            )));
        }
    }
    Ok(CalendarTable { holidays })
}

pub fn read_stations<R: Read>(input: R) -> Result<Vec<StationProfile>> {
    let mut rdr = reader_for(input);
    read_header(&mut rdr, &STATIONS_HEADER, "stations.csv")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i| field(&row, i, "stations.csv");
        let id = StationId::new(f(0)?);
        if !seen.insert(id.clone()) {
            return Err(Error::Validation(format!(
                "stations.csv: duplicate station id {id}"
            )));
        }
        out.push(StationProfile {
            station_id: id,
            name: f(1)?.to_string(),
            region: f(2)?.to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::Validation("stations.csv lists no stations".into()));
    }
    Ok(out)
}

pub fn read_distances<R: Read>(input: R, stations: &HashSet<StationId>) -> Result<DistanceTable> {
    let mut rdr = reader_for(input);
    read_header(&mut rdr, &DISTANCES_HEADER, "distances.csv")?;
    let mut table = DistanceTable::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i| field(&row, i, "distances.csv");
        let a = StationId::new(f(0)?);
        let b = StationId::new(f(1)?);
        for s in [&a, &b] {
            if !stations.contains(s) {
                return Err(Error::Validation(format!(
                    "distances.csv line {}: unknown station {s}",
                    line_of(&row)
                )));
            }
        }
        let km: f64 = f(2)?.parse().map_err(|_| {
            Error::Validation(format!(
                "distances.csv line {}: bad km {:?}",
                line_of(&row),
                &row[2]
            ))
        })?;
        table.insert(&a, &b, km)?;
    }
    Ok(table)
}

/// Readers for the four external tables.
pub struct ExternalSources<W, C, S, D> {
    pub weather: W,
    pub calendar: C,
    pub stations: S,
    pub distances: D,
}

/// Parses and cross-validates the external tables.
///
/// Every station's region must have a weather row for each day of `covered`.
/// With `interpolate_weather`, gaps are forward-filled from the previous day
/// of the same region (a leading gap is still fatal).
pub fn load_external_tables<W: Read, C: Read, S: Read, D: Read>(
    sources: ExternalSources<W, C, S, D>,
    covered: DateRange,
    interpolate_weather: bool,
) -> Result<ExternalTables> {
    let stations = read_stations(sources.stations)?;
    let set: HashSet<StationId> = stations.iter().map(|s| s.station_id.clone()).collect();
    let mut weather = read_weather(sources.weather)?;
    let calendar = read_calendar(sources.calendar)?;
    let distances = read_distances(sources.distances, &set)?;

    let known: BTreeSet<String> = weather.regions().into_iter().map(String::from).collect();
    let mut needed = BTreeSet::new();
    for s in &stations {
        if !known.contains(&s.region) {
            return Err(Error::Validation(format!(
                "station {} references unknown region key {:?}",
                s.station_id, s.region
            )));
        }
        needed.insert(s.region.clone());
    }
    for region in &needed {
        let mut last: Option<WeatherLevels> = None;
        for day in covered.days() {
            match weather.get(region, day) {
                Some(l) => last = Some(l),
                None if interpolate_weather => match last {
                    Some(l) => {
                        log::warn!("weather for {region} on {day} missing; forward-filled");
                        weather.insert(region, day, l)?;
                    }
                    None => {
                        return Err(Error::Validation(format!(
                            "weather for {region} on {day} missing with no earlier row to fill from"
                        )))
                    }
                },
                None => {
                    return Err(Error::Validation(format!(
                        "weather for {region} on {day} missing (use --interpolate-weather to forward-fill)"
                    )))
                }
            }
        }
    }
    Ok(ExternalTables {
        weather,
        calendar,
        stations,
        distances,
    })
}

/// Paths of the five input CSVs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub toll: PathBuf,
    pub weather: PathBuf,
    pub calendar: PathBuf,
    pub stations: PathBuf,
    pub distances: PathBuf,
}

impl DataPaths {
    /// Standard file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            toll: dir.join("toll.csv"),
            weather: dir.join("weather.csv"),
            calendar: dir.join("calendar.csv"),
            stations: dir.join("stations.csv"),
            distances: dir.join("distances.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 5] {
        [
            &self.toll,
            &self.weather,
            &self.calendar,
            &self.stations,
            &self.distances,
        ]
    }
}

pub fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn load_external_tables_from(
    paths: &DataPaths,
    covered: DateRange,
    interpolate_weather: bool,
) -> Result<ExternalTables> {
    load_external_tables(
        ExternalSources {
            weather: open(&paths.weather)?,
            calendar: open(&paths.calendar)?,
            stations: open(&paths.stations)?,
            distances: open(&paths.distances)?,
        },
        covered,
        interpolate_weather,
    )
}

/// Mean trip distance of vehicles exiting each station.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MileageSummary {
    pub mean_km: BTreeMap<StationId, f64>,
    /// Records skipped because their station pair has no distance.
    pub skipped: u64,
}

#[derive(Debug, Clone, Default)]
pub struct MileageAccumulator {
    sums: BTreeMap<StationId, (f64, u64)>,
    skipped: u64,
}

impl MileageAccumulator {
    pub fn add(&mut self, r: &TollRecord, distances: &DistanceTable) {
        match distances.get(&r.entry_station, &r.exit_station) {
            Some(km) => {
                let e = self.sums.entry(r.exit_station.clone()).or_insert((0.0, 0));
                e.0 += km;
                e.1 += 1;
            }
            None => self.skipped += 1,
        }
    }

    pub fn finish(self) -> MileageSummary {
        MileageSummary {
            mean_km: self
                .sums
                .into_iter()
                .map(|(s, (sum, n))| (s, sum / n as f64))
                .collect(),
            skipped: self.skipped,
        }
    }
}

pub fn compute_avg_mileage(records: &[TollRecord], distances: &DistanceTable) -> MileageSummary {
    let mut acc = MileageAccumulator::default();
    for r in records {
        acc.add(r, distances);
    }
    if acc.skipped > 0 {
        log::warn!("{} records skipped: station pair missing from distance table", acc.skipped);
    }
    acc.finish()
}

pub fn write_weather<W: Write>(out: W, weather: &WeatherTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WEATHER_HEADER)?;
    for (region, date, l) in weather.rows() {
        w.write_record([
            region.to_string(),
            date.format("%Y-%m-%d").to_string(),
            l.visibility.to_string(),
            l.rain.to_string(),
            l.snow.to_string(),
            l.wind.to_string(),
            l.temperature.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_calendar<W: Write>(out: W, calendar: &CalendarTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CALENDAR_HEADER)?;
    for d in calendar.holidays() {
        w.write_record([d.format("%Y-%m-%d").to_string(), "holiday".to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stations<W: Write>(out: W, stations: &[StationProfile]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STATIONS_HEADER)?;
    for s in stations {
        w.write_record([s.station_id.as_str(), &s.name, &s.region])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_distances<W: Write>(out: W, distances: &DistanceTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DISTANCES_HEADER)?;
    for (a, b, km) in distances.pairs() {
        w.write_record([a.as_str(), b.as_str(), &km.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the panel as `station_id,date,exit_volume,entry_volume`.
pub fn write_panel<W: Write>(out: W, panel: &VolumePanel) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PANEL_HEADER)?;
    let days = panel.days();
    for (l, s) in panel.stations().iter().enumerate() {
        for (d, day) in days.iter().enumerate() {
            w.write_record([
                s.to_string(),
                day.format("%Y-%m-%d").to_string(),
                panel.exit(l, d).to_string(),
                panel.entry(l, d).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const PANEL_HEADER: [&str; 4] = ["station_id", "date", "exit_volume", "entry_volume"];

/// Reads a panel written by [`write_panel`]. Stations keep their order of
/// first appearance; every station must have exactly one row per day of a
/// contiguous date range.
pub fn read_panel<R: Read>(input: R) -> Result<VolumePanel> {
    let mut rdr = reader_for(input);
    read_header(&mut rdr, &PANEL_HEADER, "panel.csv")?;
    let mut stations: Vec<StationId> = Vec::new();
    let mut rows: Vec<(usize, NaiveDate, u64, u64)> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        let f = |i| field(&row, i, "panel.csv");
        let id = StationId::from(f(0)?);
        let l = match stations.iter().position(|s| *s == id) {
            Some(l) => l,
            None => {
                stations.push(id);
                stations.len() - 1
            }
        };
        let count = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::Validation(format!("panel.csv line {line}: bad volume {s:?}")))
        };
        rows.push((l, parse_iso_date(f(1)?)?, count(f(2)?)?, count(f(3)?)?));
    }
    let (Some(start), Some(end)) = (rows.iter().map(|r| r.1).min(), rows.iter().map(|r| r.1).max()) else {
        return Err(Error::Validation("panel.csv has no rows".into()));
    };
    let range = DateRange::new(start, end)?;
    if rows.len() != stations.len() * range.len() {
        return Err(Error::Validation(format!(
            "panel.csv has {} rows, expected {} stations x {} days",
            rows.len(),
            stations.len(),
            range.len()
        )));
    }
    let mut panel = VolumePanel::zeros(stations, range);
    let mut seen = vec![false; rows.len()];
    for (l, day, exit, entry) in rows {
        let d = panel.day_index(day).expect("within range");
        let k = l * range.len() + d;
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::Validation(format!(
                "panel.csv repeats station {} on {day}",
                panel.stations()[l]
            )));
        }
        *panel.exit_mut(l, d) = exit;
        *panel.entry_mut(l, d) = entry;
    }
    Ok(panel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stations(ids: &[&str]) -> HashSet<StationId> {
        ids.iter().map(|s| StationId::from(*s)).collect()
    }

    const HEADER: &str = "collector_id,vehicle_license,vehicle_type,card_id,etc_id,etc_cpu_id,entry_time,exit_time,entry_station,entry_lane,exit_station,exit_lane\n";

    fn row(entry: &str, exit: &str, from: &str, to: &str) -> String {
        format!("C1,LIC1,1,CARD1,ETC1,CPU1,{entry},{exit},{from},2,{to},3\n")
    }

    #[test]
    fn parses_table_example_row() {
        let csv = format!(
            "{HEADER}{}",
            row("2018/1/23 15:55:44", "2018/1/23 16:02:50", "33011", "33012")
        );
        let parsed = parse_toll_records(csv.as_bytes(), &stations(&["33011", "33012"])).unwrap();
        assert!(parsed.rejections.is_empty());
        let r = &parsed.records[0];
        assert_eq!(r.exit_station, StationId::from("33012"));
        assert_eq!(format_timestamp(&r.exit_time), "2018/1/23 16:02:50");
        assert_eq!(r.entry_lane, 2);
        assert_eq!(r.exit_lane, 3);
    }

    #[test]
    fn time_order_violation_is_rejected() {
        let csv = format!(
            "{HEADER}{}{}",
            row("2018/1/23 16:02:50", "2018/1/23 15:55:44", "33011", "33012"),
            row("2018/1/23 15:55:44", "2018/1/23 16:02:50", "33011", "33012"),
        );
        let parsed = parse_toll_records(csv.as_bytes(), &stations(&["33011", "33012"])).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(
            parsed.rejections,
            vec![Rejection {
                line: 2,
                reason: "time order".into()
            }]
        );
    }

    #[test]
    fn bad_rows_are_rejected_not_fatal() {
        let csv = format!(
            "{HEADER}{}{}{}C1,L,1,C,E,P,2018/1/23 10:00:00\n",
            row("2018/1/23 xx", "2018/1/23 16:02:50", "33011", "33012"),
            row("2018/1/23 15:55:44", "2018/1/23 16:02:50", "99999", "33012"),
            row("2018/1/23 15:55:44", "2018/1/23 16:02:50", "33011", "33012"),
        );
        let parsed = parse_toll_records(csv.as_bytes(), &stations(&["33011", "33012"])).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.rejections.len(), 3);
        assert!(parsed.rejections[0].reason.contains("timestamp"));
        assert!(parsed.rejections[1].reason.contains("unknown station"));
        assert!(parsed.rejections[2].reason.contains("field count"));
        assert_eq!(parsed.rejections[2].line, 5);
    }

    #[test]
    fn empty_file_with_header() {
        let parsed = parse_toll_records(HEADER.as_bytes(), &stations(&["1"])).unwrap();
        assert!(parsed.records.is_empty());
        assert!(parsed.rejections.is_empty());
    }

    #[test]
    fn missing_or_wrong_header_is_fatal() {
        assert!(matches!(
            parse_toll_records("".as_bytes(), &stations(&["1"])),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            parse_toll_records("a,b,c\n1,2,3\n".as_bytes(), &stations(&["1"])),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn rejection_threshold() {
        let stats = ParseStats {
            accepted: 90,
            rejections: (0..10)
                .map(|i| Rejection {
                    line: i,
                    reason: "x".into(),
                })
                .collect(),
        };
        assert!(stats.check_rejection_rate(0.05).is_err());
        assert!(stats.check_rejection_rate(0.10).is_ok());
    }

    fn rec(entry: &str, exit: &str, from: &str, to: &str) -> TollRecord {
        TollRecord {
            collector_id: "C".into(),
            vehicle_license: "L".into(),
            vehicle_type: 1,
            card_id: "c".into(),
            etc_id: "e".into(),
            etc_cpu_id: "p".into(),
            entry_time: parse_timestamp(entry).unwrap(),
            exit_time: parse_timestamp(exit).unwrap(),
            entry_station: from.into(),
            entry_lane: 1,
            exit_station: to.into(),
            exit_lane: 1,
        }
    }

    fn day(s: &str) -> NaiveDate {
        parse_iso_date(s).unwrap()
    }

    #[test]
    fn aggregation_counts() {
        let ids: Vec<StationId> = vec!["33011".into(), "33012".into()];
        let range = DateRange::new(day("2018-01-22"), day("2018-01-24")).unwrap();
        let mut records = vec![rec("2018/1/23 15:55:44", "2018/1/23 16:02:50", "33011", "33012")];
        for _ in 0..2 {
            records.push(rec("2018/1/23 08:00:00", "2018/1/23 09:00:00", "33012", "33012"));
        }
        // outside range
        records.push(rec("2018/1/25 08:00:00", "2018/1/25 09:00:00", "33011", "33012"));
        let panel = aggregate_daily_volumes(&records, &ids, range);
        let d = panel.day_index(day("2018-01-23")).unwrap();
        assert_eq!(panel.exit(1, d), 3);
        assert_eq!(panel.entry(0, d), 1);
        assert_eq!(panel.entry(1, d), 2);
        assert_eq!(panel.exit(0, d), 0);
        assert_eq!(panel.exit(1, 0), 0);
        assert_eq!(panel.total_exit(), 3);
    }

    #[test]
    fn cross_midnight_trip_counts_on_each_event_date() {
        let ids: Vec<StationId> = vec!["1".into(), "2".into()];
        let range = DateRange::new(day("2018-01-22"), day("2018-01-24")).unwrap();
        let records = vec![rec("2018/1/22 23:50:00", "2018/1/23 00:20:00", "1", "2")];
        let panel = aggregate_daily_volumes(&records, &ids, range);
        assert_eq!(panel.entry(0, 0), 1);
        assert_eq!(panel.exit(1, 1), 1);
    }

    #[test]
    fn parallel_aggregation_matches_sequential() {
        let ids: Vec<StationId> = vec!["1".into(), "2".into(), "3".into()];
        let range = DateRange::new(day("2018-01-01"), day("2018-01-10")).unwrap();
        let records: Vec<TollRecord> = (0..1000)
            .map(|i| {
                let dd = 1 + i % 10;
                let t = format!("2018/1/{dd} 10:00:00");
                let t2 = format!("2018/1/{dd} 11:00:00");
                let a = ["1", "2", "3"][i % 3];
                let b = ["1", "2", "3"][(i / 3) % 3];
                rec(&t, &t2, a, b)
            })
            .collect();
        let seq = aggregate_daily_volumes(&records, &ids, range);
        for threads in [1, 2, 3, 7] {
            assert_eq!(aggregate_daily_volumes_parallel(&records, &ids, range, threads), seq);
        }
    }

    #[test]
    fn avg_mileage_examples() {
        let ids = ["1", "2", "3", "4"];
        let mut dist = DistanceTable::new();
        dist.insert(&"1".into(), &"4".into(), 10.0).unwrap();
        dist.insert(&"2".into(), &"4".into(), 20.0).unwrap();
        dist.insert(&"3".into(), &"4".into(), 40.0).unwrap();
        dist.insert(&"1".into(), &"2".into(), 30.0).unwrap();
        let t = ("2018/1/1 10:00:00", "2018/1/1 11:00:00");
        let trips = [("1", "4"), ("1", "4"), ("2", "4"), ("3", "4"), ("4", "3")];
        let mut records: Vec<TollRecord> = trips.iter().map(|(a, b)| rec(t.0, t.1, a, b)).collect();
        // mixed corpus {10,10,20,40,40}: the last trip exits at 3, so compute on
        // a corpus where all five exit at "4"
        records[4] = rec(t.0, t.1, "3", "4");
        let m = compute_avg_mileage(&records, &dist);
        assert_eq!(m.mean_km[&StationId::from("4")], 24.0);
        assert_eq!(m.skipped, 0);
        let _ = ids;

        // two trips with 10 and 30 km
        let two = vec![rec(t.0, t.1, "1", "4"), rec(t.0, t.1, "2", "1")];
        let mut dist2 = DistanceTable::new();
        dist2.insert(&"1".into(), &"4".into(), 10.0).unwrap();
        dist2.insert(&"2".into(), &"1".into(), 30.0).unwrap();
        let m = compute_avg_mileage(&two, &dist2);
        assert_eq!(m.mean_km[&StationId::from("4")], 10.0);
        assert_eq!(m.mean_km[&StationId::from("1")], 30.0);

        // same-station trip contributes 0; missing pair is skipped
        let recs = vec![rec(t.0, t.1, "2", "2"), rec(t.0, t.1, "3", "2")];
        let m = compute_avg_mileage(&recs, &dist2);
        assert_eq!(m.mean_km[&StationId::from("2")], 0.0);
        assert_eq!(m.skipped, 1);
    }

    #[test]
    fn distance_table_symmetry_and_validation() {
        let set = stations(&["A", "B", "C"]);
        let t = read_distances("from_station,to_station,km\nB,A,12.5\nA,C,3\n".as_bytes(), &set)
            .unwrap();
        assert_eq!(t.get(&"A".into(), &"B".into()), Some(12.5));
        assert_eq!(t.get(&"B".into(), &"A".into()), Some(12.5));
        assert_eq!(t.get(&"C".into(), &"C".into()), Some(0.0));
        assert_eq!(t.get(&"B".into(), &"C".into()), None);
        assert!(read_distances("from_station,to_station,km\nA,B,0\n".as_bytes(), &set).is_err());
        assert!(
            read_distances("from_station,to_station,km\nA,B,1\nB,A,2\n".as_bytes(), &set).is_err()
        );
        assert!(read_distances("from_station,to_station,km\nA,Z,1\n".as_bytes(), &set).is_err());
    }

    fn sources<'a>(
        weather: &'a str,
        calendar: &'a str,
        stations: &'a str,
        distances: &'a str,
    ) -> ExternalSources<&'a [u8], &'a [u8], &'a [u8], &'a [u8]> {
        ExternalSources {
            weather: weather.as_bytes(),
            calendar: calendar.as_bytes(),
            stations: stations.as_bytes(),
            distances: distances.as_bytes(),
        }
    }

    const WEATHER: &str = "region,date,visibility_level,rain_level,snow_level,wind_level,temperature_level\nR1,2017-09-23,0,0,0,0,0\nR1,2017-09-25,1,2,0,0,3\n";
    const STATIONS: &str = "station_id,name,region\nA,Alpha,R1\nB,Beta,R1\n";
    const DISTANCES: &str = "from_station,to_station,km\nB,A,7\n";

    #[test]
    fn external_tables_load_and_validate() {
        let calendar = "date,kind\n2017-10-01,holiday\n2017-10-02,holiday\n2017-10-03,holiday\n2017-10-04,holiday\n2017-10-05,holiday\n2017-10-06,holiday\n2017-10-07,holiday\n";
        let covered = DateRange::new(day("2017-09-23"), day("2017-09-25")).unwrap();
        // gap on 09-24 is fatal without interpolation
        let err = load_external_tables(sources(WEATHER, calendar, STATIONS, DISTANCES), covered, false);
        assert!(matches!(err, Err(Error::Validation(_))));
        let t = load_external_tables(sources(WEATHER, calendar, STATIONS, DISTANCES), covered, true)
            .unwrap();
        assert_eq!(t.calendar.len(), 7);
        assert_eq!(
            t.weather.get("R1", day("2017-09-23")),
            Some(WeatherLevels::default())
        );
        assert_eq!(
            t.weather.get("R1", day("2017-09-24")),
            Some(WeatherLevels::default())
        );
        assert_eq!(t.weather.get("R1", day("2017-09-25")).unwrap().temperature, 3);
        assert_eq!(t.distances.get(&"A".into(), &"B".into()), Some(7.0));
    }

    #[test]
    fn unknown_region_is_fatal() {
        let covered = DateRange::new(day("2017-09-23"), day("2017-09-23")).unwrap();
        let stations = "station_id,name,region\nA,Alpha,R9\n";
        let err = load_external_tables(
            sources(WEATHER, "date,kind\n", stations, "from_station,to_station,km\n"),
            covered,
            false,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown region"));
    }

    #[test]
    fn calendar_and_weather_validation() {
        assert!(read_calendar("date,kind\n2017-10-01,holiday\n2017-10-01,holiday\n".as_bytes()).is_err());
        assert!(read_calendar("date,kind\n2017-10-01,festival\n".as_bytes()).is_err());
        assert!(read_calendar("date,kind\n2017-02-30,holiday\n".as_bytes()).is_err());
        let bad = "region,date,visibility_level,rain_level,snow_level,wind_level,temperature_level\nR1,2017-09-23,5,0,0,0,0\n";
        assert!(read_weather(bad.as_bytes()).is_err());
        assert!(read_stations("station_id,name,region\nA,x,R\nA,y,R\n".as_bytes()).is_err());
    }

    #[test]
    fn external_writers_round_trip() {
        let weather = read_weather(WEATHER.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_weather(&mut buf, &weather).unwrap();
        assert_eq!(read_weather(buf.as_slice()).unwrap(), weather);

        let stations = read_stations(STATIONS.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_stations(&mut buf, &stations).unwrap();
        assert_eq!(read_stations(buf.as_slice()).unwrap(), stations);

        let set: HashSet<StationId> = stations.iter().map(|s| s.station_id.clone()).collect();
        let dist = read_distances(DISTANCES.as_bytes(), &set).unwrap();
        let mut buf = Vec::new();
        write_distances(&mut buf, &dist).unwrap();
        assert_eq!(read_distances(buf.as_slice(), &set).unwrap(), dist);
    }

    #[test]
    fn panel_csv_round_trip() {
        let ids = vec![StationId::from("9"), StationId::from("10")];
        let range = DateRange::with_len(NaiveDate::from_ymd_opt(2017, 6, 1).unwrap(), 3).unwrap();
        let mut p = VolumePanel::zeros(ids, range);
        for l in 0..2 {
            for d in 0..3 {
                *p.exit_mut(l, d) = (l * 10 + d) as u64;
                *p.entry_mut(l, d) = (l * 7 + d * 3) as u64;
            }
        }
        let mut buf = Vec::new();
        write_panel(&mut buf, &p).unwrap();
        assert_eq!(read_panel(buf.as_slice()).unwrap(), p);
        let text = String::from_utf8(buf).unwrap();
        let missing: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_panel(missing.as_bytes()), Err(Error::Validation(_))));
    }
}
