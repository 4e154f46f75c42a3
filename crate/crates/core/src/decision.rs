//! Decision phase: inverse Box-Cox of stage-1 outputs, routing of stations into
//! vital-few and ordinary groups, per-group calibration networks, and the
//! versioned model bundle that carries every fitted artifact.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{BoxCox, BoxCoxParams, FeatureTensor, Normalization, Sample, UpstreamMap, VitalFlags};
use crate::model::{model_forward, model_forward_batch, PhdstParams};
use crate::neuralcore::{
    adam_step, clip_global_norm, dense_backward, dense_forward, zero_fill, zeros_like, AdamConfig, DenseParams,
    OptimizerState, Parameters,
};
use crate::station::StationId;

pub const BUNDLE_FORMAT: &str = "phdst-model-v1";

const FORWARD_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Hidden width `w` of both layers.
    pub width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of the chronologically last samples whose pairs select the
    /// best epoch; epoch 0 (the identity map) is always a candidate.
    pub validation_fraction: f64,
    pub clip_norm: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            width: 16,
            epochs: 300,
            learning_rate: 1e-3,
            seed: 42,
            validation_fraction: 0.2,
            clip_norm: 5.0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 {
            return Err(Error::Config(format!("calibration width must be at least 2, got {}", self.width)));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::Config("calibration validation_fraction must be in [0, 0.5]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("calibration learning_rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("calibration clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar network `1 → w → w → 1` with ReLU on both hidden layers, applied
/// in a standardized space: `v ↦ center + scale · f((v − center) / scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub center: f64,
    pub scale: f64,
    pub hidden1: DenseParams,
    pub hidden2: DenseParams,
    pub output: DenseParams,
}

impl Parameters for Mlp {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, layer) in [("hidden1", &self.hidden1), ("hidden2", &self.hidden2), ("output", &self.output)] {
            for (b, v) in layer.blocks() {
                out.push((format!("{name}.{b}"), v));
            }
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (name, layer) in [
            ("hidden1", &mut self.hidden1),
            ("hidden2", &mut self.hidden2),
            ("output", &mut self.output),
        ] {
            for (b, v) in layer.blocks_mut() {
                out.push((format!("{name}.{b}"), v));
            }
        }
        out
    }
}

struct MlpTrace {
    z: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    y: Vec<f64>,
}

impl Mlp {
    /// A network that computes the identity exactly in standardized space:
    /// units 0 and 1 carry `relu(x)` and `relu(−x)` and the output takes their
    /// difference. Remaining units start random with zero outgoing weight.
    pub fn identity_init(width: usize, center: f64, scale: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if width < 2 {
            return Err(Error::Config("calibration width must be at least 2".into()));
        }
        let mut hidden1 = DenseParams::init(width, 1, rng)?;
        hidden1.weight[0] = 1.0;
        hidden1.weight[1] = -1.0;
        hidden1.bias[0] = 0.0;
        hidden1.bias[1] = 0.0;
        let mut hidden2 = DenseParams::init(width, width, rng)?;
        for r in 0..2 {
            for c in 0..width {
                hidden2.weight[r * width + c] = if r == c { 1.0 } else { 0.0 };
            }
            hidden2.bias[r] = 0.0;
        }
        let mut output = DenseParams::zeros(1, width)?;
        output.weight[0] = 1.0;
        output.weight[1] = -1.0;
        Ok(Mlp {
            center,
            scale,
            hidden1,
            hidden2,
            output,
        })
    }

    pub fn width(&self) -> usize {
        self.hidden1.outputs
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        let ok = self.hidden1.inputs == 1
            && self.hidden2.inputs == w
            && self.hidden2.outputs == w
            && self.output.inputs == w
            && self.output.outputs == 1;
        if !ok {
            return Err(Error::Shape("calibration net must be 1 → w → w → 1".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite() && self.center.is_finite()) {
            return Err(Error::Shape("calibration net has an invalid standardization".into()));
        }
        for l in [&self.hidden1, &self.hidden2, &self.output] {
            l.validate()?;
        }
        Ok(())
    }

    fn forward_z(&self, z: Vec<f64>) -> Result<MlpTrace> {
        let n = z.len();
        let h1 = dense_forward(&z, n, &self.hidden1, true)?;
        let h2 = dense_forward(&h1, n, &self.hidden2, true)?;
        let y = dense_forward(&h2, n, &self.output, false)?;
        Ok(MlpTrace { z, h1, h2, y })
    }

    fn standardize(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    pub fn apply_batch(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.is_empty() {
            return Ok(Vec::new());
        }
        let t = self.forward_z(values.iter().map(|&v| self.standardize(v)).collect())?;
        Ok(t.y.iter().map(|y| self.center + self.scale * y).collect())
    }

    /// Mean squared error in standardized space; accumulates its gradient into
    /// `grads` when given.
    pub fn loss_and_gradient(&self, inputs: &[f64], labels: &[f64], grads: Option<&mut Mlp>) -> Result<f64> {
        let n = inputs.len();
        let t = self.forward_z(inputs.iter().map(|&v| self.standardize(v)).collect())?;
        let mut loss = 0.0;
        let mut g = Vec::with_capacity(n);
        for (y, l) in t.y.iter().zip(labels) {
            let d = y - self.standardize(*l);
            loss += d * d;
            g.push(2.0 * d / n as f64);
        }
        if let Some(grads) = grads {
            let g2 = dense_backward(&t.h2, &t.y, &g, n, &self.output, false, &mut grads.output)?;
            let g1 = dense_backward(&t.h1, &t.h2, &g2, n, &self.hidden2, true, &mut grads.hidden2)?;
            dense_backward(&t.z, &t.h1, &g1, n, &self.hidden1, true, &mut grads.hidden1)?;
        }
        Ok(loss / n as f64)
    }
}

/// One calibration network; `Identity` passes values through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationNet {
    Identity,
    Mlp(Mlp),
}

impl CalibrationNet {
    pub fn apply_batch(&self, values: &[f64]) -> Result<Vec<f64>> {
        match self {
            CalibrationNet::Identity => Ok(values.to_vec()),
            CalibrationNet::Mlp(m) => m.apply_batch(values),
        }
    }

    pub fn apply(&self, v: f64) -> Result<f64> {
        Ok(self.apply_batch(&[v])?[0])
    }
}

/// Calibration networks of the vital-few and the ordinary group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationNets {
    pub vital: CalibrationNet,
    pub ordinary: CalibrationNet,
}

impl CalibrationNets {
    pub fn identity() -> Self {
        CalibrationNets {
            vital: CalibrationNet::Identity,
            ordinary: CalibrationNet::Identity,
        }
    }

    pub fn for_group(&self, vital: bool) -> &CalibrationNet {
        if vital {
            &self.vital
        } else {
            &self.ordinary
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths: Vec<usize> = [&self.vital, &self.ordinary]
            .into_iter()
            .filter_map(|n| match n {
                CalibrationNet::Mlp(m) => Some(m),
                CalibrationNet::Identity => None,
            })
            .map(|m| m.validate().map(|_| m.width()))
            .collect::<Result<_>>()?;
        if widths.len() == 2 && widths[0] != widths[1] {
            return Err(Error::Shape("calibration nets differ in width".into()));
        }
        Ok(())
    }
}

/// Outcome of fitting one group's network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFit {
    pub pairs: usize,
    pub validation_pairs: usize,
    /// Epoch whose parameters were kept; 0 means the identity map won.
    pub best_epoch: usize,
    pub initial_loss: Option<f64>,
    pub best_validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub vital: GroupFit,
    pub ordinary: GroupFit,
}

/// Inverse Box-Cox with the batch-safe fallback: a value outside the inverse's
/// domain maps to the nearest boundary of the transform's range, which is
/// `max(−s, 0)` for `λ > 0` and `ceiling` for `λ < 0`.
pub fn invert_or_fallback(z: f64, p: &BoxCox, ceiling: f64) -> (f64, bool) {
    match p.invert(z) {
        Ok(v) => (v, false),
        Err(_) => {
            let v = if z.is_nan() {
                0.0
            } else if p.lambda > 0.0 && z < 0.0 || z == f64::NEG_INFINITY {
                (-p.shift).max(0.0)
            } else {
                ceiling
            };
            (v, true)
        }
    }
}

struct Pairs {
    inputs: Vec<f64>,
    labels: Vec<f64>,
}

fn stage1_predictions(params: &PhdstParams, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(FORWARD_CHUNK) {
        let xs: Vec<&FeatureTensor> = chunk.iter().map(|s| &s.features).collect();
        out.extend(model_forward_batch(&xs, params)?);
    }
    Ok(out)
}

fn fit_group(
    name: &str,
    train: &Pairs,
    val: &Pairs,
    config: &CalibrationConfig,
    stream: u64,
) -> Result<(CalibrationNet, GroupFit)> {
    if train.inputs.is_empty() {
        log::warn!("no {name} stations: {name} calibration net set to identity");
        return Ok((
            CalibrationNet::Identity,
            GroupFit {
                pairs: 0,
                validation_pairs: val.inputs.len(),
                best_epoch: 0,
                initial_loss: None,
                best_validation_loss: None,
            },
        ));
    }
    let n = train.labels.len() as f64;
    let center = train.labels.iter().sum::<f64>() / n;
    let sd = (train.labels.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 1e-9 { sd } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    // Burn one draw so the two groups never share an initial state even when
    // their streams are later reused elsewhere.
    let _: u32 = rng.random();
    let mut net = Mlp::identity_init(config.width, center, scale, &mut rng)?;
    let mut opt = OptimizerState::new(
        &net,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let has_val = !val.inputs.is_empty();
    let initial_loss = net.loss_and_gradient(&train.inputs, &train.labels, None)?;
    let mut best = net.clone();
    let mut best_epoch = 0;
    let mut best_val = if has_val {
        Some(net.loss_and_gradient(&val.inputs, &val.labels, None)?)
    } else {
        None
    };
    let mut grads = zeros_like(&net);
    for epoch in 1..=config.epochs {
        zero_fill(&mut grads);
        let loss = net.loss_and_gradient(&train.inputs, &train.labels, Some(&mut grads))?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("{name} calibration loss diverged in epoch {epoch}")));
        }
        clip_global_norm(&mut grads, config.clip_norm);
        adam_step(&mut net, &grads, &mut opt)?;
        if let Some(bv) = best_val {
            let v = net.loss_and_gradient(&val.inputs, &val.labels, None)?;
            if v < bv {
                best_val = Some(v);
                best = net.clone();
                best_epoch = epoch;
            }
        }
    }
    if !has_val {
        best = net;
        best_epoch = config.epochs;
    }
    log::info!(
        "{name} calibration: {} pairs, kept epoch {best_epoch}, validation loss {best_val:?}",
        train.inputs.len()
    );
    Ok((
        CalibrationNet::Mlp(best),
        GroupFit {
            pairs: train.inputs.len(),
            validation_pairs: val.inputs.len(),
            best_epoch,
            initial_loss: Some(initial_loss),
            best_validation_loss: best_val,
        },
    ))
}

/// Trains the vital and ordinary networks on `(inverse-transformed stage-1
/// prediction, true next-day exit volume)` pairs of `samples`. The stage-1
/// parameters stay frozen.
pub fn train_calibration(
    params: &PhdstParams,
    samples: &[Sample],
    exit_boxcox: &BoxCoxParams,
    flags: &VitalFlags,
    exit_ceiling: &BTreeMap<StationId, f64>,
    config: &CalibrationConfig,
) -> Result<(CalibrationNets, CalibrationReport)> {
    config.validate()?;
    let preds = stage1_predictions(params, samples)?;
    let n_val = (config.validation_fraction * samples.len() as f64).floor() as usize;
    let n_train = samples.len() - n_val;
    let empty = || Pairs {
        inputs: Vec::new(),
        labels: Vec::new(),
    };
    // [group][train/val]
    let mut groups = [[empty(), empty()], [empty(), empty()]];
    let station_params: Vec<(BoxCox, f64, bool)> = params
        .stations
        .iter()
        .map(|s| {
            Ok((
                *exit_boxcox.get(s)?,
                exit_ceiling.get(s).copied().unwrap_or(f64::MAX),
                flags.is_vital(s),
            ))
        })
        .collect::<Result<_>>()?;
    for (i, (sample, pred)) in samples.iter().zip(&preds).enumerate() {
        let part = usize::from(i >= n_train);
        for (l, &(bc, ceiling, vital)) in station_params.iter().enumerate() {
            let (v, _) = invert_or_fallback(pred[l], &bc, ceiling);
            let pairs = &mut groups[usize::from(vital)][part];
            pairs.inputs.push(v);
            pairs.labels.push(sample.raw_target[l]);
        }
    }
    let [ordinary, vital] = groups;
    let (vital_net, vital_fit) = fit_group("vital", &vital[0], &vital[1], config, 2)?;
    let (ordinary_net, ordinary_fit) = fit_group("ordinary", &ordinary[0], &ordinary[1], config, 3)?;
    Ok((
        CalibrationNets {
            vital: vital_net,
            ordinary: ordinary_net,
        },
        CalibrationReport {
            vital: vital_fit,
            ordinary: ordinary_fit,
        },
    ))
}

/// Provenance of a trained bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seed: u64,
    /// SHA-256 of the effective configuration.
    pub config_hash: String,
    /// SHA-256 over the input data files.
    pub data_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything needed to turn raw inputs into calibrated predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBundle {
    pub format: String,
    pub params: PhdstParams,
    pub normalization: Normalization,
    pub vital: VitalFlags,
    pub calibration: CalibrationNets,
    pub upstream: UpstreamMap,
    /// Largest training exit volume per station, the fallback for inverse
    /// transforms that overflow.
    pub exit_ceiling: BTreeMap<StationId, f64>,
    pub fingerprint: Fingerprint,
}

impl ModelBundle {
    pub fn stations(&self) -> &[StationId] {
        &self.params.stations
    }

    /// Checks shapes and that every member covers exactly the model's stations.
    pub fn validate(&self) -> Result<()> {
        if self.format != BUNDLE_FORMAT {
            return Err(Error::Load(format!(
                "unsupported model format {:?}, expected {BUNDLE_FORMAT:?}",
                self.format
            )));
        }
        self.params.validate()?;
        self.calibration.validate()?;
        self.upstream.validate()?;
        if self.upstream.eta + 2 != self.params.architecture.width {
            return Err(Error::Shape(format!(
                "upstream count {} does not match feature width {}",
                self.upstream.eta, self.params.architecture.width
            )));
        }
        let want: Vec<&StationId> = self.params.stations.iter().collect();
        let mut sorted = want.clone();
        sorted.sort();
        let check = |what: &str, got: Vec<&StationId>| -> Result<()> {
            if got != sorted {
                return Err(Error::StationMismatch(format!(
                    "{what} covers {} stations that differ from the model's {}",
                    got.len(),
                    sorted.len()
                )));
            }
            Ok(())
        };
        check("exit Box-Cox parameters", self.normalization.exit.stations.keys().collect())?;
        check("entry Box-Cox parameters", self.normalization.entry.stations.keys().collect())?;
        check("vital flags", self.vital.stations.keys().collect())?;
        check("upstream map", self.upstream.lists.keys().collect())?;
        check("exit ceilings", self.exit_ceiling.keys().collect())?;
        Ok(())
    }
}

pub fn serialize_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut out = serde_json::to_vec_pretty(bundle)?;
    out.push(b'\n');
    Ok(out)
}

pub fn deserialize_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| Error::Load(format!("model file is not valid JSON: {e}")))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(BUNDLE_FORMAT) => {}
        Some(other) => {
            return Err(Error::Load(format!(
                "model format {other:?} is not supported; this build reads {BUNDLE_FORMAT:?}"
            )))
        }
        None => return Err(Error::Load("model file has no format field".into())),
    }
    let bundle: ModelBundle =
        serde_json::from_value(value).map_err(|e| Error::Load(format!("malformed {BUNDLE_FORMAT} file: {e}")))?;
    bundle.validate()?;
    Ok(bundle)
}

/// One station whose inverse transform needed the fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fallback {
    pub station: StationId,
    pub normalized: f64,
    pub substituted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Calibrated next-day exit volumes in station order, all `>= 0`.
    pub values: Vec<f64>,
    pub fallbacks: Vec<Fallback>,
}

/// Inverse-transforms stage-1 outputs and routes each station through its
/// group's calibration network.
pub fn calibrate(normalized: &[f64], bundle: &ModelBundle) -> Result<Prediction> {
    let stations = bundle.stations();
    if normalized.len() != stations.len() {
        return Err(Error::Shape(format!(
            "{} normalized values for {} stations",
            normalized.len(),
            stations.len()
        )));
    }
    let mut fallbacks = Vec::new();
    let mut inverted = Vec::with_capacity(stations.len());
    for (s, &z) in stations.iter().zip(normalized) {
        let ceiling = bundle.exit_ceiling.get(s).copied().unwrap_or(f64::MAX);
        let (v, fell_back) = invert_or_fallback(z, bundle.normalization.exit.get(s)?, ceiling);
        if fell_back {
            log::warn!("station {s}: inverse Box-Cox of {z} out of domain, using {v}");
            fallbacks.push(Fallback {
                station: s.clone(),
                normalized: z,
                substituted: v,
            });
        }
        inverted.push(v);
    }
    let mut values = vec![0.0; stations.len()];
    for vital in [true, false] {
        let idx: Vec<usize> = (0..stations.len())
            .filter(|&l| bundle.vital.is_vital(&stations[l]) == vital)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let inputs: Vec<f64> = idx.iter().map(|&l| inverted[l]).collect();
        let out = bundle.calibration.for_group(vital).apply_batch(&inputs)?;
        for (&l, v) in idx.iter().zip(out) {
            values[l] = if v > 0.0 { v } else { 0.0 };
        }
    }
    Ok(Prediction { values, fallbacks })
}

pub fn check_stations(x: &FeatureTensor, bundle: &ModelBundle) -> Result<()> {
    if x.stations != bundle.stations() {
        return Err(Error::StationMismatch(format!(
            "feature tensor has {} stations that differ from the model's {}",
            x.stations.len(),
            bundle.stations().len()
        )));
    }
    Ok(())
}

/// Calibrated next-day exit volume of every station.
pub fn predict_calibrated(x: &FeatureTensor, bundle: &ModelBundle) -> Result<Prediction> {
    check_stations(x, bundle)?;
    calibrate(&model_forward(x, &bundle.params)?, bundle)
}

/// Batched [`predict_calibrated`]; results are identical to per-tensor calls.
pub fn predict_calibrated_batch(xs: &[&FeatureTensor], bundle: &ModelBundle) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(FORWARD_CHUNK) {
        for x in chunk {
            check_stations(x, bundle)?;
        }
        for z in model_forward_batch(chunk, &bundle.params)? {
            out.push(calibrate(&z, bundle)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureTensor;
    use crate::model::{Architecture, PhdstParams};
    use chrono::NaiveDate;

    fn ids(n: usize) -> Vec<StationId> {
        (0..n).map(|i| StationId::from(format!("{}", 100 + i))).collect()
    }

    fn bundle_for(stations: &[StationId], bc: BoxCox, vital: bool) -> ModelBundle {
        let arch = Architecture {
            stations: stations.len(),
            history: 3,
            width: 3,
            hidden: 4,
            shared_fcn: true,
        };
        let params = PhdstParams::init(stations.to_vec(), arch, 1).unwrap();
        let map = |v: BoxCox| BoxCoxParams {
            stations: stations.iter().map(|s| (s.clone(), v)).collect(),
        };
        let mut lists = BTreeMap::new();
        for (i, s) in stations.iter().enumerate() {
            lists.insert(s.clone(), vec![stations[(i + 1) % stations.len()].clone()]);
        }
        ModelBundle {
            format: BUNDLE_FORMAT.into(),
            params,
            normalization: Normalization {
                exit: map(bc),
                entry: map(bc),
            },
            vital: VitalFlags::all(stations, vital),
            calibration: CalibrationNets::identity(),
            upstream: UpstreamMap { eta: 1, lists },
            exit_ceiling: stations.iter().map(|s| (s.clone(), 1e6)).collect(),
            fingerprint: Fingerprint {
                seed: 1,
                config_hash: String::new(),
                data_hash: String::new(),
            },
        }
    }

    fn tensor(stations: &[StationId], seed: u64) -> FeatureTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = stations.len() * 3 * 3;
        FeatureTensor {
            anchor: NaiveDate::from_ymd_opt(2017, 7, 1).unwrap(),
            stations: stations.to_vec(),
            history: 3,
            width: 3,
            values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn identity_nets_with_unit_lambda_return_plain_inverse() {
        let s = ids(3);
        let b = bundle_for(&s, BoxCox { lambda: 1.0, shift: 1.0 }, false);
        let z = [5.0, 100.5, 0.25];
        let p = calibrate(&z, &b).unwrap();
        for (v, z) in p.values.iter().zip(z) {
            assert_eq!(*v, BoxCox { lambda: 1.0, shift: 1.0 }.invert(z).unwrap());
        }
        assert!(p.fallbacks.is_empty());
    }

    #[test]
    fn log_inverse_hand_trace() {
        let s = ids(1);
        let b = bundle_for(&s, BoxCox { lambda: 0.0, shift: 0.0 }, false);
        let p = calibrate(&[2.0], &b).unwrap();
        assert!((p.values[0] - 7.38905609893065).abs() < 1e-12);
    }

    #[test]
    fn routing_uses_group_net_only() {
        let s = ids(4);
        let mut b = bundle_for(&s, BoxCox { lambda: 1.0, shift: 1.0 }, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bad = Mlp::identity_init(4, 0.0, 1.0, &mut rng).unwrap();
        bad.center = f64::NAN;
        b.calibration.ordinary = CalibrationNet::Mlp(bad);
        let p = calibrate(&[1.0, 2.0, 3.0, 4.0], &b).unwrap();
        assert!(p.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn outputs_are_clamped_and_fallbacks_flagged() {
        let s = ids(3);
        let b = bundle_for(&s, BoxCox { lambda: 0.5, shift: 1.0 }, false);
        let p = calibrate(&[-10.0, -1.5, f64::INFINITY], &b).unwrap();
        assert_eq!(p.values[0], 0.0);
        assert_eq!(p.values[1], 0.0);
        assert_eq!(p.values[2], 1e6);
        assert_eq!(p.fallbacks.len(), 2);
        let neg = BoxCox { lambda: -0.5, shift: 1.0 };
        assert_eq!(invert_or_fallback(3.0, &neg, 77.0), (77.0, true));
    }

    #[test]
    fn identity_init_is_exact_in_standardized_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::identity_init(16, 0.0, 1.0, &mut rng).unwrap();
        let xs = [-3.5, -1.0, 0.0, 0.5, 1234.25];
        assert_eq!(m.apply_batch(&xs).unwrap(), xs.to_vec());
        let m = Mlp::identity_init(16, 500.0, 120.0, &mut rng).unwrap();
        for (y, x) in m.apply_batch(&xs).unwrap().iter().zip(xs) {
            assert!((y - x).abs() <= 1e-12 * x.abs().max(500.0));
        }
    }

    #[test]
    fn calibration_gradient_matches_finite_differences() {
        use crate::neuralcore::{grad_check, GradCheckConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Mlp::identity_init(6, 2.0, 3.0, &mut rng).unwrap();
        // Move every preactivation off the exact ReLU kinks of the identity init.
        for (_, block) in m.blocks_mut() {
            for w in block.iter_mut() {
                *w += rng.random_range(-0.3..0.3);
            }
        }
        let inputs: Vec<f64> = (0..20).map(|_| rng.random_range(-5.0..9.0)).collect();
        let labels: Vec<f64> = inputs.iter().map(|x| 0.5 * x * x - 1.0).collect();
        let mut g = zeros_like(&m);
        m.loss_and_gradient(&inputs, &labels, Some(&mut g)).unwrap();
        let report = grad_check(
            &m,
            &g,
            |q: &Mlp| q.loss_and_gradient(&inputs, &labels, None).unwrap(),
            GradCheckConfig::default(),
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn calibration_learns_a_scale_error_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(100.0..1000.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.2 * v).collect();
        let train = Pairs {
            inputs: x[..160].to_vec(),
            labels: y[..160].to_vec(),
        };
        let val = Pairs {
            inputs: x[160..].to_vec(),
            labels: y[160..].to_vec(),
        };
        let cfg = CalibrationConfig {
            epochs: 400,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (a, fit) = fit_group("ordinary", &train, &val, &cfg, 3).unwrap();
        let (b, _) = fit_group("ordinary", &train, &val, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(fit.best_epoch > 0);
        assert!(fit.best_validation_loss.unwrap() < 0.1 * fit.initial_loss.unwrap());
    }

    #[test]
    fn empty_group_gets_identity() {
        let empty = Pairs {
            inputs: vec![],
            labels: vec![],
        };
        let (net, fit) = fit_group("vital", &empty, &empty, &CalibrationConfig::default(), 2).unwrap();
        assert_eq!(net, CalibrationNet::Identity);
        assert_eq!(fit.pairs, 0);
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let s = ids(3);
        let mut b = bundle_for(&s, BoxCox { lambda: 0.37, shift: 1.0 }, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.calibration.ordinary = CalibrationNet::Mlp(Mlp::identity_init(16, 321.123, 45.6, &mut rng).unwrap());
        let x = tensor(&s, 4);
        let before = predict_calibrated(&x, &b).unwrap();
        let bytes = serialize_bundle(&b).unwrap();
        let back = deserialize_bundle(&bytes).unwrap();
        assert_eq!(back, b);
        let after = predict_calibrated(&x, &back).unwrap();
        for (p, q) in before.values.iter().zip(&after.values) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        assert_eq!(serialize_bundle(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_or_foreign_bundles_are_rejected() {
        let s = ids(2);
        let b = bundle_for(&s, BoxCox { lambda: 1.0, shift: 1.0 }, false);
        let bytes = serialize_bundle(&b).unwrap();
        assert!(matches!(deserialize_bundle(&bytes[..bytes.len() / 2]), Err(Error::Load(_))));
        let text = String::from_utf8(bytes).unwrap().replace(BUNDLE_FORMAT, "phdst-model-v9");
        let err = deserialize_bundle(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("phdst-model-v9"));
    }

    #[test]
    fn station_mismatch_is_refused() {
        let s = ids(3);
        let b = bundle_for(&s, BoxCox { lambda: 1.0, shift: 1.0 }, false);
        let x = tensor(&ids(4)[1..], 1);
        assert!(matches!(predict_calibrated(&x, &b), Err(Error::StationMismatch(_))));
    }

    #[test]
    fn batch_prediction_equals_single() {
        let s = ids(3);
        let b = bundle_for(&s, BoxCox { lambda: 0.5, shift: 1.0 }, false);
        let xs: Vec<FeatureTensor> = (0..5).map(|i| tensor(&s, i)).collect();
        let refs: Vec<&FeatureTensor> = xs.iter().collect();
        let batch = predict_calibrated_batch(&refs, &b).unwrap();
        for (x, p) in xs.iter().zip(batch) {
            assert_eq!(predict_calibrated(x, &b).unwrap(), p);
        }
    }
}
