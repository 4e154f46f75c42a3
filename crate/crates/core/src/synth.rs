//! Synthetic highway networks, daily volume panels and toll records with known
//! latent structure: long-tailed station sizes, weekly and holiday effects,
//! regional weather shocks and same-day coupling between upstream entries and
//! exits.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dates::{is_weekend, DateRange};
use crate::error::{Error, Result};
use crate::features::discover_upstream;
use crate::ingest::{
    self, CalendarTable, DataPaths, DistanceTable, StationProfile, TollRecord, VolumePanel, WeatherLevels,
    WeatherTable,
};
use crate::station::StationId;

/// Side of the square the stations are scattered in, in km.
const AREA_KM: f64 = 300.0;
/// Speed used to derive trip durations from route distances.
const TRAVEL_KMH: f64 = 80.0;
const FIRST_STATION_ID: u32 = 33001;

// Independent random streams of the generator.
const STREAM_NETWORK: u64 = 0;
const STREAM_BASES: u64 = 1;
const STREAM_DAY_BASE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub stations: usize,
    pub start: NaiveDate,
    pub days: usize,
    pub seed: u64,
    /// `μ` of the log-normal station base volume.
    pub base_log_mean: f64,
    /// `σ` of the log-normal station base volume.
    pub base_log_std: f64,
    pub weekend_multiplier: f64,
    pub holiday_multiplier: f64,
    pub extreme_weather_multiplier: f64,
    /// Probability that a region-day draws extreme weather.
    pub extreme_weather_probability: f64,
    /// Weight of the upstream entry signal in a station's exit volume.
    pub upstream_coupling: f64,
    /// Standard deviation of the multiplicative log-normal noise.
    pub noise_level: f64,
    pub regions: usize,
    /// Designated upstream stations per station.
    pub upstream_count: usize,
    /// Holidays; `None` uses Jan 1, May 1-3 and Oct 1-7 of every covered year.
    pub holidays: Option<Vec<NaiveDate>>,
    /// When set, the largest station's base becomes this multiple of the
    /// median base.
    pub dominant_station_factor: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            stations: 20,
            start: NaiveDate::from_ymd_opt(2017, 6, 1).expect("valid date"),
            days: 180,
            seed: 42,
            base_log_mean: 5.5,
            base_log_std: 1.0,
            weekend_multiplier: 1.3,
            holiday_multiplier: 1.6,
            extreme_weather_multiplier: 0.6,
            extreme_weather_probability: 0.02,
            upstream_coupling: 0.5,
            noise_level: 0.04,
            regions: 4,
            upstream_count: 3,
            holidays: None,
            dominant_station_factor: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stations < 5 {
            return fail(format!("synthetic network needs at least 5 stations, got {}", self.stations));
        }
        if self.days < 1 {
            return fail("synthetic panel needs at least one day".into());
        }
        for (name, v) in [
            ("weekend_multiplier", self.weekend_multiplier),
            ("holiday_multiplier", self.holiday_multiplier),
            ("extreme_weather_multiplier", self.extreme_weather_multiplier),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.extreme_weather_probability) {
            return fail("extreme_weather_probability must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.upstream_coupling) {
            return fail("upstream_coupling must be in [0, 1]".into());
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return fail("noise_level must be non-negative".into());
        }
        if !(self.base_log_std >= 0.0) || !self.base_log_mean.is_finite() {
            return fail("base volume log-normal parameters invalid".into());
        }
        if self.regions < 1 {
            return fail("at least one region required".into());
        }
        if self.upstream_count < 1 || self.upstream_count >= self.stations {
            return fail(format!(
                "upstream_count must be in 1..{}, got {}",
                self.stations, self.upstream_count
            ));
        }
        if let Some(f) = self.dominant_station_factor {
            if !(f > 0.0 && f.is_finite()) {
                return fail("dominant_station_factor must be positive".into());
            }
        }
        Ok(())
    }

    pub fn range(&self) -> Result<DateRange> {
        DateRange::with_len(self.start, self.days)
    }

    pub fn holiday_dates(&self) -> Result<Vec<NaiveDate>> {
        if let Some(h) = &self.holidays {
            return Ok(h.clone());
        }
        let range = self.range()?;
        let mut out = Vec::new();
        for year in range.start.year()..=range.end.year() {
            let md = [(1, 1), (5, 1), (5, 2), (5, 3), (10, 1), (10, 2), (10, 3), (10, 4), (10, 5), (10, 6), (10, 7)];
            for (m, d) in md {
                let day = NaiveDate::from_ymd_opt(year, m, d).expect("valid holiday");
                if range.contains(day) {
                    out.push(day);
                }
            }
        }
        Ok(out)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Station profiles, route distances and planar positions of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub profiles: Vec<StationProfile>,
    pub distances: DistanceTable,
    pub positions: Vec<(f64, f64)>,
}

impl Network {
    pub fn station_ids(&self) -> Vec<StationId> {
        self.profiles.iter().map(|p| p.station_id.clone()).collect()
    }

    pub fn region_names(regions: usize) -> Vec<String> {
        (1..=regions).map(|r| format!("R{r}")).collect()
    }
}

fn round_km(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Scatters stations in a square, links each to its nearest earlier station
/// (a spanning tree) plus a few shortcut edges, and stores all-pairs shortest
/// route distances.
pub fn generate_network(config: &SynthConfig) -> Result<Network> {
    config.validate()?;
    let n = config.stations;
    let mut rng = stream_rng(config.seed, STREAM_NETWORK);
    let positions: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..AREA_KM), rng.random_range(0.0..AREA_KM)))
        .collect();
    let euclid = |a: usize, b: usize| {
        let (dx, dy) = (positions[a].0 - positions[b].0, positions[a].1 - positions[b].1);
        (dx * dx + dy * dy).sqrt()
    };
    let edge = |a: usize, b: usize, rng: &mut ChaCha8Rng| {
        let detour = rng.random_range(1.1..1.4);
        (a, b, round_km(euclid(a, b) * detour).max(0.1))
    };
    let mut edges = Vec::new();
    for i in 1..n {
        let nearest = (0..i)
            .min_by(|&a, &b| euclid(i, a).total_cmp(&euclid(i, b)))
            .expect("i >= 1");
        edges.push(edge(i, nearest, &mut rng));
    }
    for _ in 0..n / 2 {
        let a = rng.random_range(0..n);
        let mut others: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        others.sort_by(|&x, &y| euclid(a, x).total_cmp(&euclid(a, y)));
        let b = others[rng.random_range(0..others.len().min(3))];
        edges.push(edge(a, b, &mut rng));
    }
    let mut dist = vec![f64::INFINITY; n * n];
    for i in 0..n {
        dist[i * n + i] = 0.0;
    }
    for (a, b, km) in edges {
        if km < dist[a * n + b] {
            dist[a * n + b] = km;
            dist[b * n + a] = km;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = dist[i * n + k] + dist[k * n + j];
                if via < dist[i * n + j] {
                    dist[i * n + j] = via;
                }
            }
        }
    }
    let ids: Vec<StationId> = (0..n)
        .map(|i| StationId::from(format!("{}", FIRST_STATION_ID + i as u32)))
        .collect();
    let regions = Network::region_names(config.regions);
    let band = AREA_KM / config.regions as f64;
    let profiles = (0..n)
        .map(|i| StationProfile {
            station_id: ids[i].clone(),
            name: format!("Station {}", ids[i]),
            region: regions[((positions[i].0 / band) as usize).min(config.regions - 1)].clone(),
        })
        .collect();
    let mut distances = DistanceTable::new();
    for i in 0..n {
        for j in i + 1..n {
            distances.insert(&ids[i], &ids[j], round_km(dist[i * n + j]))?;
        }
    }
    Ok(Network {
        profiles,
        distances,
        positions,
    })
}

/// Latent factors of one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayTruth {
    pub date: NaiveDate,
    /// Weekend or holiday multiplier, 1 on workdays.
    pub calendar_multiplier: f64,
    pub extreme_regions: Vec<String>,
    /// Factor applied to the rounded raw entries so that the day's entry total
    /// equals its exit total.
    pub entry_balance: f64,
}

/// Everything needed to recompute a generated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub stations: Vec<StationId>,
    /// Region of each station.
    pub regions: Vec<String>,
    pub base: Vec<f64>,
    pub upstream: BTreeMap<StationId, Vec<StationId>>,
    /// Base-weighted mean route distance from each station to all stations.
    pub expected_mileage: BTreeMap<StationId, f64>,
    pub days: Vec<DayTruth>,
    /// `[station][day]` multiplicative noise on entries.
    pub entry_noise: Vec<Vec<f64>>,
    /// `[station][day]` multiplicative noise on exits.
    pub exit_noise: Vec<Vec<f64>>,
    /// `[station][day]` entry volume before balancing and rounding.
    pub raw_entry: Vec<Vec<f64>>,
    /// `[station][day]` exit volume before rounding.
    pub raw_exit: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Closed-form exit volume of `station` on day index `day`.
    pub fn closed_form_exit(&self, station: usize, day: usize) -> f64 {
        let c = self.config.upstream_coupling;
        let own = self.calendar_weather(station, day);
        let ups = &self.upstream[&self.stations[station]];
        let mix: f64 = ups
            .iter()
            .map(|u| {
                let j = self.stations.iter().position(|s| s == u).expect("upstream in station list");
                self.raw_entry[j][day] / self.base[j]
            })
            .sum::<f64>()
            / ups.len() as f64;
        self.base[station] * ((1.0 - c) * own + c * mix) * self.exit_noise[station][day]
    }

    /// Closed-form raw entry volume of `station` on day index `day`.
    pub fn closed_form_entry(&self, station: usize, day: usize) -> f64 {
        self.base[station] * self.calendar_weather(station, day) * self.entry_noise[station][day]
    }

    fn calendar_weather(&self, station: usize, day: usize) -> f64 {
        let t = &self.days[day];
        t.calendar_multiplier
            * if t.extreme_regions.contains(&self.region_of(station)) {
                self.config.extreme_weather_multiplier
            } else {
                1.0
            }
    }

    fn region_of(&self, station: usize) -> String {
        self.regions[station].clone()
    }
}

/// Generated panel and auxiliary tables.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub panel: VolumePanel,
    pub weather: WeatherTable,
    pub calendar: CalendarTable,
    pub truth: GroundTruth,
}

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (sigma * z - sigma * sigma / 2.0).exp()
}

fn weather_levels(rng: &mut ChaCha8Rng, extreme: bool) -> WeatherLevels {
    let mut v = [
        rng.random_range(0..=1u8),
        rng.random_range(0..=1u8),
        rng.random_range(0..=1u8),
        rng.random_range(0..=2u8),
        rng.random_range(0..=2u8),
    ];
    if extreme {
        let which = rng.random_range(0..5usize);
        v[which] = if which < 3 {
            rng.random_range(2..=4u8)
        } else {
            rng.random_range(3..=4u8)
        };
    }
    WeatherLevels {
        visibility: v[0],
        rain: v[1],
        snow: v[2],
        wind: v[3],
        temperature: v[4],
    }
}

/// Integers proportional to `weights` summing exactly to `total`; leftover
/// units go to the largest fractional parts, ties to the lower index.
pub fn largest_remainder(weights: &[f64], total: u64) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if !(sum > 0.0) {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(assigned);
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        out[i] += 1;
        remaining -= 1;
    }
    out
}

/// Draws station bases, calendar and weather factors and noise, and builds the
/// panel. Entries are generated first; each station's exits mix its own
/// calendar/weather factor with the same-day entry factor of its designated
/// upstream stations.
pub fn generate_panel(network: &Network, config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let range = config.range()?;
    let ids = network.station_ids();
    let n = ids.len();
    if n != config.stations {
        return Err(Error::Config(format!(
            "network has {n} stations, config expects {}",
            config.stations
        )));
    }
    let mut rng = stream_rng(config.seed, STREAM_BASES);
    let mut base: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (config.base_log_mean + config.base_log_std * z).exp()
        })
        .collect();
    if let Some(f) = config.dominant_station_factor {
        let mut sorted = base.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let top = (0..n).max_by(|&a, &b| base[a].total_cmp(&base[b])).expect("n >= 5");
        base[top] = f * median;
    }

    let total_base: f64 = base.iter().sum();
    let mut expected_mileage = BTreeMap::new();
    for (l, s) in ids.iter().enumerate() {
        let mut acc = 0.0;
        for (m, t) in ids.iter().enumerate() {
            if l != m {
                acc += base[m] * network.distances.get(s, t).expect("complete distance table");
            }
        }
        expected_mileage.insert(s.clone(), acc / total_base);
    }
    let mut upstream = BTreeMap::new();
    for s in &ids {
        upstream.insert(
            s.clone(),
            discover_upstream(s, &ids, &network.distances, &expected_mileage, config.upstream_count)?,
        );
    }
    let up_idx: Vec<Vec<usize>> = ids
        .iter()
        .map(|s| {
            upstream[s]
                .iter()
                .map(|u| ids.iter().position(|x| x == u).expect("upstream is a station"))
                .collect()
        })
        .collect();

    let holidays = config.holiday_dates()?;
    let calendar = CalendarTable::new(holidays.iter().copied());
    let regions = Network::region_names(config.regions);
    let region_idx: Vec<usize> = network
        .profiles
        .iter()
        .map(|p| regions.iter().position(|r| *r == p.region).unwrap_or(0))
        .collect();

    let days = range.len();
    let mut weather = WeatherTable::new();
    let mut day_truth = Vec::with_capacity(days);
    let mut entry_noise = vec![vec![0.0; days]; n];
    let mut exit_noise = vec![vec![0.0; days]; n];
    let mut raw_entry = vec![vec![0.0; days]; n];
    let mut raw_exit = vec![vec![0.0; days]; n];
    let mut panel = VolumePanel::zeros(ids.clone(), range);
    for (d, date) in range.days().enumerate() {
        let mut rng = stream_rng(config.seed, STREAM_DAY_BASE + d as u64);
        let cal = if calendar.is_holiday(date) {
            config.holiday_multiplier
        } else if is_weekend(date) {
            config.weekend_multiplier
        } else {
            1.0
        };
        let mut extreme = vec![false; regions.len()];
        for (r, name) in regions.iter().enumerate() {
            extreme[r] = rng.random_bool(config.extreme_weather_probability);
            weather.insert(name, date, weather_levels(&mut rng, extreme[r]))?;
        }
        let factor: Vec<f64> = (0..n)
            .map(|l| cal * if extreme[region_idx[l]] { config.extreme_weather_multiplier } else { 1.0 })
            .collect();
        for l in 0..n {
            entry_noise[l][d] = noise(&mut rng, config.noise_level);
            raw_entry[l][d] = base[l] * factor[l] * entry_noise[l][d];
        }
        for l in 0..n {
            exit_noise[l][d] = noise(&mut rng, config.noise_level);
            let mix = up_idx[l].iter().map(|&u| raw_entry[u][d] / base[u]).sum::<f64>() / up_idx[l].len() as f64;
            let c = config.upstream_coupling;
            raw_exit[l][d] = base[l] * ((1.0 - c) * factor[l] + c * mix) * exit_noise[l][d];
            *panel.exit_mut(l, d) = raw_exit[l][d].round() as u64;
        }
        let exit_total: u64 = (0..n).map(|l| panel.exit(l, d)).sum();
        let weights: Vec<f64> = (0..n).map(|l| raw_entry[l][d]).collect();
        let entries = largest_remainder(&weights, exit_total);
        for (l, e) in entries.into_iter().enumerate() {
            *panel.entry_mut(l, d) = e;
        }
        day_truth.push(DayTruth {
            date,
            calendar_multiplier: cal,
            extreme_regions: regions
                .iter()
                .zip(&extreme)
                .filter(|(_, e)| **e)
                .map(|(r, _)| r.clone())
                .collect(),
            entry_balance: exit_total as f64 / weights.iter().sum::<f64>(),
        });
    }
    let truth = GroundTruth {
        config: config.clone(),
        stations: ids,
        regions: network.profiles.iter().map(|p| p.region.clone()).collect(),
        base,
        upstream,
        expected_mileage,
        days: day_truth,
        entry_noise,
        exit_noise,
        raw_entry,
        raw_exit,
    };
    Ok(SynthOutput {
        panel,
        weather,
        calendar,
        truth,
    })
}

fn random_token(rng: &mut ChaCha8Rng, alphabet: &[u8], len: usize) -> String {
    (0..len)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())] as char)
        .collect()
}

const DIGITS: &[u8] = b"0123456789";
const HEX: &[u8] = b"0123456789ABCDEF";
const PLATE: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ0123456789";

/// Writes one toll record per vehicle so that aggregating the output gives
/// back `panel` exactly. Each day's entry tokens are shuffled and paired with
/// that day's exits; entry and exit happen on the same civil day with a
/// duration derived from the route distance. Days whose entry and exit totals
/// differ get their entries rebalanced first. Returns the record count.
pub fn expand_to_records<W: Write>(
    panel: &VolumePanel,
    network: &Network,
    seed: u64,
    out: W,
) -> Result<u64> {
    let ids = panel.stations();
    let mut w = ingest::toll_csv_writer(out)?;
    let mut count = 0u64;
    for (d, date) in panel.range().days().enumerate() {
        let mut rng = stream_rng(seed, d as u64);
        let exits: Vec<u64> = (0..ids.len()).map(|l| panel.exit(l, d)).collect();
        let mut entries: Vec<u64> = (0..ids.len()).map(|l| panel.entry(l, d)).collect();
        let (exit_total, entry_total) = (exits.iter().sum::<u64>(), entries.iter().sum::<u64>());
        if exit_total != entry_total {
            log::warn!("{date}: {entry_total} entries vs {exit_total} exits, rebalancing entries");
            let weights: Vec<f64> = entries.iter().map(|&e| e as f64).collect();
            entries = largest_remainder(&weights, exit_total);
        }
        if entries.iter().sum::<u64>() != exit_total {
            return Err(Error::Validation(format!(
                "{date}: entry and exit budgets cannot be balanced"
            )));
        }
        let mut tokens: Vec<usize> = Vec::with_capacity(exit_total as usize);
        for (l, &e) in entries.iter().enumerate() {
            tokens.extend(std::iter::repeat_n(l, e as usize));
        }
        tokens.shuffle(&mut rng);
        let mut next = tokens.into_iter();
        for (l, &x) in exits.iter().enumerate() {
            for _ in 0..x {
                let from = next.next().expect("balanced budgets");
                let km = network
                    .distances
                    .get(&ids[from], &ids[l])
                    .ok_or_else(|| Error::Config(format!("no distance {}-{}", ids[from], ids[l])))?;
                let travel = ((km / TRAVEL_KMH * 3600.0).ceil() as u32).min(86_399);
                let entry_sec = rng.random_range(0..=86_399 - travel);
                let at = |sec: u32| {
                    NaiveDateTime::new(
                        date,
                        NaiveTime::from_num_seconds_from_midnight_opt(sec, 0).expect("second of day"),
                    )
                };
                let exit_lane = rng.random_range(1..=8u32);
                let record = TollRecord {
                    collector_id: format!("C{}{:02}", ids[l], exit_lane),
                    vehicle_license: format!("HA{}", random_token(&mut rng, PLATE, 5)),
                    vehicle_type: rng.random_range(1..=4u8),
                    card_id: random_token(&mut rng, DIGITS, 16),
                    etc_id: format!("ETC{}", random_token(&mut rng, DIGITS, 10)),
                    etc_cpu_id: random_token(&mut rng, HEX, 16),
                    entry_time: at(entry_sec),
                    exit_time: at(entry_sec + travel),
                    entry_station: ids[from].clone(),
                    entry_lane: rng.random_range(1..=8u32),
                    exit_station: ids[l].clone(),
                    exit_lane,
                };
                ingest::write_toll_record(&mut w, &record)?;
                count += 1;
            }
        }
    }
    w.flush().map_err(Error::Stream)?;
    Ok(count)
}

/// Writes the five input CSVs and `ground_truth.json` into `dir`.
pub fn write_dataset(dir: &Path, network: &Network, output: &SynthOutput) -> Result<DataPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DataPaths::in_dir(dir);
    let create = |p: &Path| {
        std::fs::File::create(p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    expand_to_records(&output.panel, network, output.truth.config.seed, create(&paths.toll)?)?;
    ingest::write_weather(create(&paths.weather)?, &output.weather)?;
    ingest::write_calendar(create(&paths.calendar)?, &output.calendar)?;
    ingest::write_stations(create(&paths.stations)?, &network.profiles)?;
    ingest::write_distances(create(&paths.distances)?, &network.distances)?;
    let truth_path = dir.join("ground_truth.json");
    let mut f = create(&truth_path)?;
    serde_json::to_writer_pretty(&mut f, &output.truth)?;
    f.flush().map_err(|e| Error::io(&truth_path, e))?;
    Ok(paths)
}

/// Sample skewness (population moments).
pub fn skewness(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Day index helper used by callers that hold dates.
pub fn day_offset(range: DateRange, day: NaiveDate) -> Option<usize> {
    range.contains(day).then(|| (day - range.start).num_days() as usize)
}
