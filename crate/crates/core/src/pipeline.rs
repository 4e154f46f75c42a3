//! Configuration, run-directory layout and the phases that turn input CSVs
//! into a trained bundle and evaluation reports. Every phase reads its inputs
//! from and writes its outputs to a run directory, so phases can be run one at
//! a time or chained.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::dates::DateRange;
use crate::decision::{
    predict_calibrated, serialize_bundle, sha256_hex, train_calibration, CalibrationConfig, CalibrationReport,
    Fingerprint, ModelBundle, BUNDLE_FORMAT,
};
use crate::error::{Error, Result};
use crate::evalreport::{build_report, evaluate_run, BaselineKind, MetricsReport};
use crate::features::{
    boxcox_apply, build_upstream_map, feasible_anchors, fit_station_boxcox, flag_vital, read_features_bin,
    write_features_bin, FeatureBuilder, FeatureTensor, Normalization, Sample, UpstreamMap, VitalFlags,
};
use crate::ingest::{
    self, aggregate_daily_volumes_parallel, load_external_tables_from, parse_toll_records_with, DataPaths,
    ExternalTables, MileageAccumulator, TollRecord, VolumePanel,
};
use crate::model::{train_stage1, ModelConfig, TrainConfig, TrainHistory};
use crate::station::StationId;
use crate::synth::{generate_network, generate_panel, write_dataset, SynthConfig};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "PHDST_THREADS";
/// Days held out for testing when no ranges are configured.
pub const DEFAULT_TEST_DAYS: usize = 30;
const INGEST_CHUNK: usize = 1 << 16;

/// Worker thread count from `PHDST_THREADS`, 1 when unset or invalid.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input CSVs; when absent the data are generated from `synth`.
    pub data: Option<DataPaths>,
    pub synth: Option<SynthConfig>,
    /// Target days used for fitting; defaults to everything before `test_range`.
    pub train_range: Option<DateRange>,
    /// Target days used for evaluation; defaults to the last 30 days of data.
    pub test_range: Option<DateRange>,
    /// `H`, days of history per sample.
    pub history: usize,
    /// `η`, upstream stations per station.
    pub eta: usize,
    pub hidden: usize,
    pub shared_fcn: bool,
    pub training: TrainConfig,
    pub calibration: CalibrationConfig,
    /// Seed of training and calibration; overrides their nested seeds.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub baselines: Vec<BaselineKind>,
    pub interpolate_weather: bool,
    /// Largest tolerated fraction of rejected toll rows.
    pub max_rejection_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: None,
            synth: None,
            train_range: None,
            test_range: None,
            history: 14,
            eta: 3,
            hidden: ModelConfig::default().hidden,
            shared_fcn: true,
            training: TrainConfig::default(),
            calibration: CalibrationConfig::default(),
            seed: 42,
            output_dir: PathBuf::from("runs"),
            baselines: BaselineKind::ALL.to_vec(),
            interpolate_weather: false,
            max_rejection_rate: 0.05,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.is_some() && self.synth.is_some() {
            return Err(Error::Config("set either data or synth, not both".into()));
        }
        if self.history < 2 {
            return Err(Error::Config(format!("history H must be at least 2, got {}", self.history)));
        }
        if self.eta < 1 {
            return Err(Error::Config(format!("eta must be at least 1, got {}", self.eta)));
        }
        if self.hidden < 1 {
            return Err(Error::Config("hidden must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_rejection_rate) {
            return Err(Error::Config("max_rejection_rate must be in [0, 1]".into()));
        }
        self.training.validate()?;
        self.calibration.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
            if self.eta >= s.stations {
                return Err(Error::Config(format!(
                    "eta = {} needs more than {} stations",
                    self.eta, s.stations
                )));
            }
        }
        if let (Some(train), Some(test)) = (self.train_range, self.test_range) {
            if train.overlaps(&test) {
                return Err(Error::Config(format!(
                    "test range {}..{} overlaps training range {}..{}",
                    test.start, test.end, train.start, train.end
                )));
            }
            if test.start <= train.end {
                return Err(Error::Config("test range must come after the training range".into()));
            }
            if train.len() <= self.history {
                return Err(Error::Config(format!(
                    "training range of {} days leaves no sample with H = {} days of history",
                    train.len(),
                    self.history
                )));
            }
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        self.synth.clone().unwrap_or_default()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            shared_fcn: self.shared_fcn,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.training
        }
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        CalibrationConfig {
            seed: self.seed,
            ..self.calibration
        }
    }

    pub fn train(&self) -> Result<DateRange> {
        self.train_range
            .ok_or_else(|| Error::Config("training range not resolved".into()))
    }

    pub fn test(&self) -> Result<DateRange> {
        self.test_range
            .ok_or_else(|| Error::Config("test range not resolved".into()))
    }

    /// Days the panel must cover: the first training day through the last test day.
    pub fn data_range(&self) -> Result<DateRange> {
        DateRange::new(self.train()?.start, self.test()?.end)
    }

    /// Fills in defaulted ranges from the available data span and applies the
    /// synthetic-data default when no input files are given.
    pub fn resolve(mut self) -> Result<Self> {
        if self.data.is_none() && self.synth.is_none() {
            self.synth = Some(SynthConfig::default());
        }
        if self.train_range.is_none() || self.test_range.is_none() {
            let span = match (&self.data, &self.synth) {
                (Some(paths), _) => ingest::read_weather(ingest::open(&paths.weather)?)?
                    .date_span()
                    .ok_or_else(|| Error::Validation("weather.csv has no rows".into()))?,
                (None, Some(s)) => s.range()?,
                (None, None) => unreachable!("synth defaulted above"),
            };
            let test = match (self.test_range, self.train_range) {
                (Some(t), _) => t,
                (None, Some(train)) => DateRange::new(train.end + Duration::days(1), span.end)?,
                (None, None) => DateRange::new(span.end - Duration::days(DEFAULT_TEST_DAYS as i64 - 1), span.end)?,
            };
            let train = match self.train_range {
                Some(t) => t,
                None => {
                    if test.start <= span.start {
                        return Err(Error::Config("no data left before the test range for training".into()));
                    }
                    DateRange::new(span.start, test.start - Duration::days(1))?
                }
            };
            self.train_range = Some(train);
            self.test_range = Some(test);
        }
        self.validate()?;
        Ok(self)
    }

    /// SHA-256 of the configuration with the output directory blanked, so that
    /// the same experiment hashes the same wherever it is written.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(sha256_hex(&serde_json::to_vec(&c)?))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.data {
            fix(&mut d.toll);
            fix(&mut d.weather);
            fix(&mut d.calendar);
            fix(&mut d.stations);
            fix(&mut d.distances);
        }
        fix(&mut self.output_dir);
    }
}

/// Reads a JSON configuration, applies defaults and validates it. Relative
/// paths are taken relative to the file's directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: PipelineConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn data_hashes(&self) -> PathBuf {
        self.root.join("data_hashes.json")
    }
    pub fn panel(&self) -> PathBuf {
        self.root.join("panel.csv")
    }
    pub fn mileage(&self) -> PathBuf {
        self.root.join("mileage.json")
    }
    pub fn preprocessing(&self) -> PathBuf {
        self.root.join("preprocessing.json")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features.bin")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn training_history(&self) -> PathBuf {
        self.root.join("training_history.csv")
    }
    pub fn calibration_report(&self) -> PathBuf {
        self.root.join("calibration.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// Creates a fresh `run-<UTC timestamp>` directory under `parent`.
    pub fn create_timestamped(parent: &Path) -> Result<Self> {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let stamp = chrono::Utc::now().format("run-%Y%m%dT%H%M%SZ").to_string();
        for k in 0.. {
            let name = if k == 0 { stamp.clone() } else { format!("{stamp}-{k}") };
            let dir = parent.join(name);
            match std::fs::create_dir(&dir) {
                Ok(()) => return Ok(RunPaths::new(dir)),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(Error::io(&dir, e)),
            }
        }
        unreachable!("unbounded loop returns")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

/// Writes the effective configuration into the run directory.
pub fn write_config_snapshot(cfg: &PipelineConfig, run: &RunPaths) -> Result<()> {
    write_json(&run.config(), cfg)
}

/// Input files of a run: the configured CSVs, or the synthetic set inside the
/// run directory.
pub fn data_paths(cfg: &PipelineConfig, run: &RunPaths) -> DataPaths {
    cfg.data.clone().unwrap_or_else(|| DataPaths::in_dir(&run.data_dir()))
}

/// Generates the synthetic network, panel and toll records into `dir`.
pub fn synth_phase(synth: &SynthConfig, dir: &Path) -> Result<DataPaths> {
    let network = generate_network(synth)?;
    let output = generate_panel(&network, synth)?;
    log::info!(
        "synthetic data: {} stations, {} days, {} vehicles",
        network.profiles.len(),
        synth.days,
        output.panel.total_exit()
    );
    write_dataset(dir, &network, &output)
}

/// SHA-256 of each input file plus a combined digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataHashes {
    pub files: BTreeMap<String, String>,
    pub combined: String,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::Digest;
    use std::io::Read;
    let mut f = ingest::open(path)?;
    let mut hasher = sha2::Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn hash_inputs(paths: &DataPaths) -> Result<DataHashes> {
    let mut files = BTreeMap::new();
    let mut combined = String::new();
    for (name, path) in ["toll", "weather", "calendar", "stations", "distances"].iter().zip(paths.all()) {
        let h = file_sha256(path)?;
        combined.push_str(&format!("{name}:{h}\n"));
        files.insert(name.to_string(), h);
    }
    Ok(DataHashes {
        files,
        combined: sha256_hex(combined.as_bytes()),
    })
}

/// Mean route distance of vehicles leaving each station during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MileageFile {
    pub mean_km: BTreeMap<StationId, f64>,
    pub skipped: u64,
    pub accepted_records: u64,
    pub rejected_records: usize,
}

pub struct IngestOutput {
    pub panel: VolumePanel,
    pub tables: ExternalTables,
    pub mileage: MileageFile,
    pub hashes: DataHashes,
}

fn add_panel(total: &mut VolumePanel, part: &VolumePanel) {
    for l in 0..total.num_stations() {
        for d in 0..total.num_days() {
            *total.exit_mut(l, d) += part.exit(l, d);
            *total.entry_mut(l, d) += part.entry(l, d);
        }
    }
}

/// Validates the inputs, aggregates toll records into the daily panel over
/// the data range and averages trip mileage over the training range. Writes
/// `panel.csv`, `mileage.json` and `data_hashes.json`.
pub fn ingest_phase(cfg: &PipelineConfig, paths: &DataPaths, run: &RunPaths) -> Result<IngestOutput> {
    let range = cfg.data_range()?;
    let train = cfg.train()?;
    let tables = load_external_tables_from(paths, range, cfg.interpolate_weather)?;
    let ids = tables.station_ids();
    let set: HashSet<StationId> = ids.iter().cloned().collect();
    let threads = worker_threads();
    let mut panel = VolumePanel::zeros(ids.clone(), range);
    let mut mileage = MileageAccumulator::default();
    let mut chunk: Vec<TollRecord> = Vec::with_capacity(INGEST_CHUNK);
    let stats = {
        let flush = |chunk: &mut Vec<TollRecord>, panel: &mut VolumePanel| {
            add_panel(panel, &aggregate_daily_volumes_parallel(chunk, &ids, range, threads));
            chunk.clear();
        };
        let stats = parse_toll_records_with(ingest::open(&paths.toll)?, &set, |r| {
            if train.contains(r.exit_time.date()) {
                mileage.add(&r, &tables.distances);
            }
            chunk.push(r);
            if chunk.len() == INGEST_CHUNK {
                flush(&mut chunk, &mut panel);
            }
        })?;
        flush(&mut chunk, &mut panel);
        stats
    };
    stats.check_rejection_rate(cfg.max_rejection_rate)?;
    if !stats.rejections.is_empty() {
        log::warn!("{} toll rows rejected", stats.rejections.len());
    }
    let summary = mileage.finish();
    if summary.skipped > 0 {
        log::warn!("{} records skipped: station pair missing from distance table", summary.skipped);
    }
    let mileage = MileageFile {
        mean_km: summary.mean_km,
        skipped: summary.skipped,
        accepted_records: stats.accepted,
        rejected_records: stats.rejections.len(),
    };
    let hashes = hash_inputs(paths)?;
    let mut buf = Vec::new();
    ingest::write_panel(&mut buf, &panel)?;
    write_file(&run.panel(), &buf)?;
    write_json(&run.mileage(), &mileage)?;
    write_json(&run.data_hashes(), &hashes)?;
    log::info!("ingested {} records into {} stations x {} days", stats.accepted, ids.len(), range.len());
    Ok(IngestOutput {
        panel,
        tables,
        mileage,
        hashes,
    })
}

/// Everything fitted on the training range before the network is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub normalization: Normalization,
    pub vital: VitalFlags,
    pub upstream: UpstreamMap,
    pub exit_ceiling: BTreeMap<StationId, f64>,
}

pub fn read_run_panel(run: &RunPaths) -> Result<VolumePanel> {
    ingest::read_panel(ingest::open(&run.panel())?)
}

pub fn load_tables(cfg: &PipelineConfig, run: &RunPaths) -> Result<ExternalTables> {
    load_external_tables_from(&data_paths(cfg, run), cfg.data_range()?, cfg.interpolate_weather)
}

/// Fits Box-Cox parameters, vital flags, upstream lists and exit ceilings on
/// the training range and writes `preprocessing.json` plus the training
/// tensors in `features.bin`.
pub fn features_phase(cfg: &PipelineConfig, run: &RunPaths) -> Result<(Preprocessing, Vec<FeatureTensor>)> {
    let panel = read_run_panel(run)?;
    let tables = load_tables(cfg, run)?;
    let mileage: MileageFile = read_json(&run.mileage())?;
    let train = cfg.train()?;
    let normalization = fit_station_boxcox(&panel, train)?;
    let vital = flag_vital(&panel, train)?;
    let upstream = build_upstream_map(panel.stations(), &tables.distances, &mileage.mean_km, cfg.eta)?;
    let mut exit_ceiling = BTreeMap::new();
    for (l, s) in panel.stations().iter().enumerate() {
        let max = panel.exit_series(l, train)?.into_iter().fold(0.0, f64::max);
        exit_ceiling.insert(s.clone(), max);
    }
    let pre = Preprocessing {
        normalization,
        vital,
        upstream,
        exit_ceiling,
    };
    let builder = FeatureBuilder::new(
        &panel,
        &tables.weather,
        &tables.calendar,
        &tables.stations,
        &pre.upstream,
        &pre.normalization,
        cfg.history,
    )?;
    let anchors = feasible_anchors(panel.range(), train, cfg.history)?;
    let tensors: Vec<FeatureTensor> = anchors.days().map(|a| builder.tensor(a)).collect::<Result<_>>()?;
    write_json(&run.preprocessing(), &pre)?;
    let mut buf = Vec::new();
    write_features_bin(&mut buf, &tensors)?;
    write_file(&run.features(), &buf)?;
    log::info!(
        "{} training tensors, {} vital stations",
        tensors.len(),
        pre.vital.count()
    );
    Ok((pre, tensors))
}

/// Pairs feature tensors with their next-day exit volumes.
pub fn attach_targets(tensors: Vec<FeatureTensor>, panel: &VolumePanel, normalization: &Normalization) -> Result<Vec<Sample>> {
    let exit: Vec<_> = panel
        .stations()
        .iter()
        .map(|s| normalization.exit.get(s).copied())
        .collect::<Result<_>>()?;
    tensors
        .into_iter()
        .map(|features| {
            if features.stations != panel.stations() {
                return Err(Error::StationMismatch("features.bin and panel.csv list different stations".into()));
            }
            let target_day = features.anchor + Duration::days(1);
            let d = panel
                .day_index(target_day)
                .ok_or_else(|| Error::Validation(format!("panel has no target volumes for {target_day}")))?;
            let raw_target: Vec<f64> = (0..panel.num_stations()).map(|l| panel.exit(l, d) as f64).collect();
            let target = raw_target
                .iter()
                .zip(&exit)
                .map(|(&y, p)| boxcox_apply(y, p))
                .collect::<Result<_>>()?;
            Ok(Sample {
                anchor: features.anchor,
                features,
                target,
                raw_target,
            })
        })
        .collect()
}

pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub history: TrainHistory,
    pub calibration: CalibrationReport,
}

/// Trains the network and the calibration nets on the training tensors and
/// writes `model.json`, `training_history.csv` and `calibration.json`.
pub fn train_phase(cfg: &PipelineConfig, run: &RunPaths) -> Result<TrainOutput> {
    let panel = read_run_panel(run)?;
    let pre: Preprocessing = read_json(&run.preprocessing())?;
    let hashes: DataHashes = read_json(&run.data_hashes())?;
    let tensors = read_features_bin(ingest::open(&run.features())?)?;
    let samples = attach_targets(tensors, &panel, &pre.normalization)?;
    let (params, history) = train_stage1(&samples, &cfg.model_config(), &cfg.train_config())?;
    log::info!(
        "stage 1: {} epochs, best epoch {}, final train loss {:?}",
        history.epochs.len(),
        history.best_epoch,
        history.final_train_loss()
    );
    let (calibration, report) = train_calibration(
        &params,
        &samples,
        &pre.normalization.exit,
        &pre.vital,
        &pre.exit_ceiling,
        &cfg.calibration_config(),
    )?;
    let bundle = ModelBundle {
        format: BUNDLE_FORMAT.into(),
        params,
        normalization: pre.normalization,
        vital: pre.vital,
        calibration,
        upstream: pre.upstream,
        exit_ceiling: pre.exit_ceiling,
        fingerprint: Fingerprint {
            seed: cfg.seed,
            config_hash: cfg.config_hash()?,
            data_hash: hashes.combined,
        },
    };
    write_file(&run.model(), &serialize_bundle(&bundle)?)?;
    write_file(&run.training_history(), history.to_csv().as_bytes())?;
    write_json(&run.calibration_report(), &report)?;
    Ok(TrainOutput {
        bundle,
        history,
        calibration: report,
    })
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    crate::decision::deserialize_bundle(&bytes)
}

/// Rows `station_id,date,predicted_exit_volume` for one predicted day.
pub fn prediction_rows(stations: &[StationId], day: NaiveDate, values: &[f64]) -> String {
    let mut out = String::new();
    for (s, v) in stations.iter().zip(values) {
        out.push_str(&format!("{s},{day},{v}\n"));
    }
    out
}

pub const PREDICTIONS_HEADER: &str = "station_id,date,predicted_exit_volume\n";

/// Predicts exit volumes of `anchor + 1` from the features ending on `anchor`.
pub fn predict_day(bundle: &ModelBundle, panel: &VolumePanel, tables: &ExternalTables, anchor: NaiveDate) -> Result<Vec<f64>> {
    let builder = FeatureBuilder::new(
        panel,
        &tables.weather,
        &tables.calendar,
        &tables.stations,
        &bundle.upstream,
        &bundle.normalization,
        bundle.params.architecture.history,
    )?;
    Ok(predict_calibrated(&builder.tensor(anchor)?, bundle)?.values)
}

/// Scores the bundle and the baselines on the test range and writes
/// `metrics.json` and `predictions.csv`.
pub fn evaluate_phase(cfg: &PipelineConfig, run: &RunPaths) -> Result<MetricsReport> {
    let bundle = load_bundle(&run.model())?;
    let panel = read_run_panel(run)?;
    let tables = load_tables(cfg, run)?;
    let report = evaluate_run(&bundle, &panel, &tables, cfg.test()?, cfg.train()?, &cfg.baselines)?;
    write_json(&run.metrics(), &report)?;
    let mut csv = String::from(PREDICTIONS_HEADER);
    for (day, values) in report.days.iter().zip(&report.predictions) {
        csv.push_str(&prediction_rows(bundle.stations(), day.date, values));
    }
    write_file(&run.predictions(), csv.as_bytes())?;
    if let Some(m) = report.summary.mean_mape {
        log::info!("test MAPE {m:.3}% over {} days", report.days.len());
    }
    Ok(report)
}

/// Renders the report files of `metrics.json` into `report/`.
pub fn report_phase(run: &RunPaths) -> Result<Vec<PathBuf>> {
    let report: MetricsReport = read_json(&run.metrics())?;
    build_report(&report, &run.report_dir())
}

pub struct PipelineOutcome {
    pub run: RunPaths,
    pub config: PipelineConfig,
    pub bundle: ModelBundle,
    pub history: TrainHistory,
    pub report: MetricsReport,
}

/// Runs every phase into `run` (created if missing).
pub fn run_pipeline_in(cfg: PipelineConfig, run: RunPaths) -> Result<PipelineOutcome> {
    let cfg = cfg.resolve()?;
    std::fs::create_dir_all(&run.root).map_err(|e| Error::io(&run.root, e))?;
    write_config_snapshot(&cfg, &run)?;
    let paths = match &cfg.data {
        Some(p) => p.clone(),
        None => synth_phase(&cfg.synth_config(), &run.data_dir())?,
    };
    ingest_phase(&cfg, &paths, &run)?;
    features_phase(&cfg, &run)?;
    let trained = train_phase(&cfg, &run)?;
    let report = evaluate_phase(&cfg, &run)?;
    report_phase(&run)?;
    Ok(PipelineOutcome {
        run,
        config: cfg,
        bundle: trained.bundle,
        history: trained.history,
        report,
    })
}

/// Runs every phase into a new timestamped directory under `output_dir`.
pub fn run_pipeline(cfg: PipelineConfig) -> Result<PipelineOutcome> {
    let run = RunPaths::create_timestamped(&cfg.output_dir)?;
    log::info!("run directory {}", run.root.display());
    run_pipeline_in(cfg, run)
}

/// Flushes a writer, mapping the error to this crate's type.
pub fn flush(mut w: impl Write) -> Result<()> {
    w.flush().map_err(Error::Stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn defaults_resolve_against_synthetic_span() {
        let cfg = PipelineConfig::default().resolve().unwrap();
        assert_eq!(cfg.test_range, Some(DateRange::new(d("2017-10-29"), d("2017-11-27")).unwrap()));
        assert_eq!(cfg.train_range, Some(DateRange::new(d("2017-06-01"), d("2017-10-28")).unwrap()));
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let cfg = PipelineConfig {
            train_range: Some(DateRange::new(d("2017-06-01"), d("2017-08-01")).unwrap()),
            test_range: Some(DateRange::new(d("2017-07-20"), d("2017-08-10")).unwrap()),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("overlaps")));
    }

    #[test]
    fn short_history_is_rejected() {
        let cfg = PipelineConfig {
            history: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_loading_applies_defaults_and_rejects_typos() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(
            &p,
            r#"{"data": {"toll": "t.csv", "weather": "w.csv", "calendar": "c.csv", "stations": "s.csv", "distances": "d.csv"}}"#,
        )
        .unwrap();
        let cfg = load_config(&p).unwrap();
        assert_eq!(cfg.history, 14);
        assert_eq!(cfg.eta, 3);
        assert_eq!(cfg.training, TrainConfig::default());
        assert_eq!(cfg.data.unwrap().toll, dir.path().join("t.csv"));

        std::fs::write(&p, r#"{"histroy": 14}"#).unwrap();
        assert!(matches!(load_config(&p), Err(Error::Config(m)) if m.contains("histroy")));
        std::fs::write(&p, r#"{"training": {"epochs": 3, "batchsize": 2}}"#).unwrap();
        assert!(load_config(&p).is_err());
    }

    #[test]
    fn snapshot_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            output_dir: dir.path().join("runs"),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        let run = RunPaths::new(dir.path().join("r"));
        write_config_snapshot(&cfg, &run).unwrap();
        assert_eq!(load_config(&run.config()).unwrap(), cfg);
    }

    #[test]
    fn timestamped_runs_never_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunPaths::create_timestamped(dir.path()).unwrap();
        let b = RunPaths::create_timestamped(dir.path()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn small_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            synth: Some(SynthConfig {
                stations: 6,
                days: 40,
                ..Default::default()
            }),
            test_range: Some(DateRange::new(d("2017-07-01"), d("2017-07-10")).unwrap()),
            train_range: Some(DateRange::new(d("2017-06-01"), d("2017-06-30")).unwrap()),
            history: 5,
            eta: 2,
            hidden: 8,
            training: TrainConfig {
                epochs: 3,
                ..Default::default()
            },
            calibration: CalibrationConfig {
                epochs: 5,
                ..Default::default()
            },
            output_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let out = run_pipeline(cfg.clone()).unwrap();
        assert_eq!(out.report.days.len(), 10);
        assert_eq!(out.report.histogram.total(), 6);
        for f in [
            out.run.model(),
            out.run.panel(),
            out.run.predictions(),
            out.run.report_dir().join("summary.json"),
            out.run.data_dir().join("ground_truth.json"),
        ] {
            assert!(f.exists(), "{}", f.display());
        }
        let again = run_pipeline(cfg).unwrap();
        assert_ne!(again.run, out.run);
        for f in ["model.json", "predictions.csv", "report/summary.json", "report/histogram.csv"] {
            assert_eq!(
                std::fs::read(out.run.root.join(f)).unwrap(),
                std::fs::read(again.run.root.join(f)).unwrap(),
                "{f}"
            );
        }
        let predictions = std::fs::read_to_string(out.run.predictions()).unwrap();
        assert_eq!(predictions.lines().count(), 1 + 10 * 6);
    }
}
