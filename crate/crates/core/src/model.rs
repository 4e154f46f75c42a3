//! The forecasting network: feature splitting, per-day FCN modules, LSTM over
//! the `H` day components and a dense projection to `L` outputs, plus the
//! training loop.
//!
//! Inputs and targets are standardised per station inside the model with
//! constants fitted on the training split ([`Scaling`]); `model_forward` takes
//! raw feature tensors and returns Box-Cox-scale predictions.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureTensor, Sample};
use crate::neuralcore::{
    add_assign, adam_step, clip_global_norm, conv_1xk, conv_1xk_backward_into, cross_channel_avg_pool,
    cross_channel_avg_pool_backward, dense_backward, dense_forward, lstm_sequence_backward,
    lstm_sequence_forward, mse_loss, relu_backward_in_place, relu_in_place, zero_fill, zeros_like,
    AdamConfig, ConvParams, DenseParams, LstmParams, LstmStepCache, OptimizerState, Parameters, Tensor,
};
use crate::station::StationId;

/// Output channels of the three convolutions of an FCN module.
pub const FCN_CHANNELS: [usize; 3] = [64, 128, 256];

/// Shape metadata of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `L`, number of stations.
    pub stations: usize,
    /// `H`, history length in days.
    pub history: usize,
    /// `N = η + 2`, features per station-day.
    pub width: usize,
    pub hidden: usize,
    /// One FCN shared by all `H` days, or one per day position.
    pub shared_fcn: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.stations == 0 || self.history == 0 || self.hidden == 0 {
            return Err(Error::Shape(format!("degenerate architecture {self:?}")));
        }
        if self.width < 3 {
            return Err(Error::Shape(format!(
                "feature width N = {} leaves no room for the third kernel (needs N >= 3)",
                self.width
            )));
        }
        Ok(())
    }

    fn fcn_count(&self) -> usize {
        if self.shared_fcn {
            1
        } else {
            self.history
        }
    }
}

/// The three convolutions of one FCN module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
}

impl FcnParams {
    /// Kernel widths 2, 2 and `N − 2`.
    pub fn init(width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if width < 3 {
            return Err(Error::Shape(format!("FCN needs N >= 3, got {width}")));
        }
        let [c1, c2, c3] = FCN_CHANNELS;
        Ok(FcnParams {
            conv1: ConvParams::init(c1, 1, 2, rng)?,
            conv2: ConvParams::init(c2, c1, 2, rng)?,
            conv3: ConvParams::init(c3, c2, width - 2, rng)?,
        })
    }

    pub fn zeros(width: usize) -> Result<Self> {
        if width < 3 {
            return Err(Error::Shape(format!("FCN needs N >= 3, got {width}")));
        }
        let [c1, c2, c3] = FCN_CHANNELS;
        Ok(FcnParams {
            conv1: ConvParams::zeros(c1, 1, 2)?,
            conv2: ConvParams::zeros(c2, c1, 2)?,
            conv3: ConvParams::zeros(c3, c2, width - 2)?,
        })
    }

    pub fn width(&self) -> usize {
        self.conv3.k + 2
    }
}

fn prefixed<'a, P: Parameters>(prefix: &str, p: &'a P) -> impl Iterator<Item = (String, &'a [f64])> + 'a {
    let prefix = prefix.to_string();
    p.blocks().into_iter().map(move |(n, b)| (format!("{prefix}.{n}"), b))
}

fn prefixed_mut<'a, P: Parameters>(
    prefix: &str,
    p: &'a mut P,
) -> impl Iterator<Item = (String, &'a mut [f64])> + 'a {
    let prefix = prefix.to_string();
    p.blocks_mut().into_iter().map(move |(n, b)| (format!("{prefix}.{n}"), b))
}

impl Parameters for FcnParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        prefixed("conv1", &self.conv1)
            .chain(prefixed("conv2", &self.conv2))
            .chain(prefixed("conv3", &self.conv3))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let FcnParams { conv1, conv2, conv3 } = self;
        prefixed_mut("conv1", conv1)
            .chain(prefixed_mut("conv2", conv2))
            .chain(prefixed_mut("conv3", conv3))
            .collect()
    }
}

/// Fixed per-station affine maps applied around the trainable network.
///
/// Feature slot `k` of station `l` enters as `(x − center) / scale`; the
/// network output for station `l` leaves as `target_center + target_scale · y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    /// `[L × N]`.
    pub feature_center: Vec<f64>,
    /// `[L × N]`.
    pub feature_scale: Vec<f64>,
    pub target_center: Vec<f64>,
    pub target_scale: Vec<f64>,
}

const MIN_SCALE: f64 = 1e-9;

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > MIN_SCALE { sd } else { 1.0 })
}

impl Scaling {
    pub fn identity(stations: usize, width: usize) -> Self {
        Scaling {
            feature_center: vec![0.0; stations * width],
            feature_scale: vec![1.0; stations * width],
            target_center: vec![0.0; stations],
            target_scale: vec![1.0; stations],
        }
    }

    /// Centers and scales from `samples`. Slots 0 and 1 (weather and date
    /// codes) pass through unchanged; entry-volume slots and targets are
    /// z-scored per station.
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("cannot fit scaling on zero samples".into()))?;
        let (l_count, n) = (first.features.num_stations(), first.features.width);
        let mut s = Scaling::identity(l_count, n);
        // One slice per calendar day; overlapping windows repeat days.
        let mut days: BTreeMap<chrono::NaiveDate, Vec<f64>> = BTreeMap::new();
        for sample in samples {
            for h in 0..sample.features.history {
                days.entry(sample.features.day_of(h))
                    .or_insert_with(|| sample.features.day_slice(h));
            }
        }
        for l in 0..l_count {
            for k in 2..n {
                let (m, sd) = mean_std(days.values().map(|d| d[l * n + k]));
                s.feature_center[l * n + k] = m;
                s.feature_scale[l * n + k] = sd;
            }
            let (m, sd) = mean_std(samples.iter().map(|x| x.target[l]));
            s.target_center[l] = m;
            s.target_scale[l] = sd;
        }
        Ok(s)
    }

    fn standardize_slice(&self, slice: &[f64]) -> Vec<f64> {
        slice
            .iter()
            .zip(self.feature_center.iter().zip(&self.feature_scale))
            .map(|(x, (c, s))| (x - c) / s)
            .collect()
    }

    fn standardize_target(&self, target: &[f64]) -> Vec<f64> {
        target
            .iter()
            .zip(self.target_center.iter().zip(&self.target_scale))
            .map(|(y, (c, s))| (y - c) / s)
            .collect()
    }

    fn destandardize(&self, out: &[f64]) -> Vec<f64> {
        out.iter()
            .zip(self.target_center.iter().zip(&self.target_scale))
            .map(|(y, (c, s))| c + s * y)
            .collect()
    }
}

/// All parameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhdstParams {
    pub architecture: Architecture,
    pub stations: Vec<StationId>,
    /// One entry when shared, `H` entries otherwise.
    pub fcn: Vec<FcnParams>,
    pub lstm: LstmParams,
    /// `[L × hidden]`.
    pub projection: DenseParams,
    pub scaling: Scaling,
}

impl Parameters for PhdstParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let shared = self.fcn.len() == 1;
        let mut out = Vec::new();
        for (h, f) in self.fcn.iter().enumerate() {
            let prefix = if shared { "fcn".to_string() } else { format!("fcn[{h}]") };
            out.extend(prefixed(&prefix, f));
        }
        out.extend(prefixed("lstm", &self.lstm));
        out.extend(prefixed("projection", &self.projection));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let shared = self.fcn.len() == 1;
        let mut out = Vec::new();
        for (h, f) in self.fcn.iter_mut().enumerate() {
            let prefix = if shared { "fcn".to_string() } else { format!("fcn[{h}]") };
            out.extend(prefixed_mut(&prefix, f));
        }
        out.extend(prefixed_mut("lstm", &mut self.lstm));
        out.extend(prefixed_mut("projection", &mut self.projection));
        out
    }
}

impl PhdstParams {
    pub fn init(stations: Vec<StationId>, architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        if stations.len() != architecture.stations {
            return Err(Error::Shape(format!(
                "{} station ids for an architecture with L = {}",
                stations.len(),
                architecture.stations
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fcn = (0..architecture.fcn_count())
            .map(|_| FcnParams::init(architecture.width, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let lstm = LstmParams::init(architecture.hidden, architecture.stations, &mut rng)?;
        let projection = DenseParams::init(architecture.stations, architecture.hidden, &mut rng)?;
        Ok(PhdstParams {
            architecture,
            scaling: Scaling::identity(architecture.stations, architecture.width),
            stations,
            fcn,
            lstm,
            projection,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.architecture;
        a.validate()?;
        let bad = |what: &str| Err(Error::Shape(format!("model parameters inconsistent: {what}")));
        if self.stations.len() != a.stations {
            return bad("station list");
        }
        if self.fcn.len() != a.fcn_count() {
            return bad("number of FCN modules");
        }
        for f in &self.fcn {
            f.conv1.validate()?;
            f.conv2.validate()?;
            f.conv3.validate()?;
            if f.width() != a.width
                || f.conv1.in_channels != 1
                || f.conv2.in_channels != f.conv1.out_channels
                || f.conv3.in_channels != f.conv2.out_channels
                || f.conv1.k != 2
                || f.conv2.k != 2
            {
                return bad("FCN kernel shapes");
            }
        }
        self.lstm.validate()?;
        if self.lstm.hidden != a.hidden || self.lstm.input != a.stations {
            return bad("LSTM sizes");
        }
        self.projection.validate()?;
        if self.projection.inputs != a.hidden || self.projection.outputs != a.stations {
            return bad("projection sizes");
        }
        let s = &self.scaling;
        if s.feature_center.len() != a.stations * a.width
            || s.feature_scale.len() != a.stations * a.width
            || s.target_center.len() != a.stations
            || s.target_scale.len() != a.stations
        {
            return bad("scaling sizes");
        }
        Ok(())
    }

    /// Relabels stations: new station `i` is old station `perm[i]`. LSTM input
    /// columns, projection rows and scaling follow the relabeling.
    pub fn permute_stations(&self, perm: &[usize]) -> Result<Self> {
        let (l, n, hd) = (self.architecture.stations, self.architecture.width, self.architecture.hidden);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..l).collect::<Vec<_>>() {
            return Err(Error::Shape("not a permutation of the stations".into()));
        }
        let mut out = self.clone();
        out.stations = perm.iter().map(|&p| self.stations[p].clone()).collect();
        let zw = hd + l;
        for (dst, src) in [
            (&mut out.lstm.w_f, &self.lstm.w_f),
            (&mut out.lstm.w_i, &self.lstm.w_i),
            (&mut out.lstm.w_c, &self.lstm.w_c),
            (&mut out.lstm.w_o, &self.lstm.w_o),
        ] {
            for u in 0..hd {
                for (i, &p) in perm.iter().enumerate() {
                    dst[u * zw + hd + i] = src[u * zw + hd + p];
                }
            }
        }
        for (i, &p) in perm.iter().enumerate() {
            out.projection.weight[i * hd..(i + 1) * hd]
                .copy_from_slice(&self.projection.weight[p * hd..(p + 1) * hd]);
            out.projection.bias[i] = self.projection.bias[p];
            for k in 0..n {
                out.scaling.feature_center[i * n + k] = self.scaling.feature_center[p * n + k];
                out.scaling.feature_scale[i * n + k] = self.scaling.feature_scale[p * n + k];
            }
            out.scaling.target_center[i] = self.scaling.target_center[p];
            out.scaling.target_scale[i] = self.scaling.target_scale[p];
        }
        Ok(out)
    }
}

/// The `H` day matrices `[L × N]` of `x`, oldest first.
pub fn split_features(x: &FeatureTensor) -> Vec<Tensor> {
    (0..x.history)
        .map(|h| {
            Tensor::new(vec![x.num_stations(), x.width], x.day_slice(h))
                .expect("feature tensor slices are well formed")
        })
        .collect()
}

/// Inverse of [`split_features`].
pub fn stack_features(
    days: &[Tensor],
    anchor: chrono::NaiveDate,
    stations: Vec<StationId>,
) -> Result<FeatureTensor> {
    let first = days
        .first()
        .ok_or_else(|| Error::Shape("no day matrices to stack".into()))?;
    let (l, n) = match first.shape() {
        [l, n] => (*l, *n),
        s => return Err(Error::Shape(format!("day matrix must be rank 2, got {s:?}"))),
    };
    if stations.len() != l || days.iter().any(|d| d.shape() != [l, n]) {
        return Err(Error::Shape("day matrices disagree in shape".into()));
    }
    let h_count = days.len();
    let mut values = vec![0.0; l * h_count * n];
    for (h, d) in days.iter().enumerate() {
        for s in 0..l {
            let dst = (s * h_count + h) * n;
            values[dst..dst + n].copy_from_slice(&d.values()[s * n..(s + 1) * n]);
        }
    }
    Ok(FeatureTensor {
        anchor,
        stations,
        history: h_count,
        width: n,
        values,
    })
}

/// Activations of one FCN pass over `R` stacked station rows.
struct FcnCache {
    input: Tensor,
    a1: Tensor,
    a2: Tensor,
    a3: Tensor,
}

fn fcn_forward_cached(input: Tensor, p: &FcnParams) -> Result<(Vec<f64>, FcnCache)> {
    let mut a1 = conv_1xk(&input, &p.conv1)?;
    relu_in_place(a1.values_mut());
    let mut a2 = conv_1xk(&a1, &p.conv2)?;
    relu_in_place(a2.values_mut());
    let mut a3 = conv_1xk(&a2, &p.conv3)?;
    relu_in_place(a3.values_mut());
    let out = cross_channel_avg_pool(&a3)?.into_values();
    Ok((out, FcnCache { input, a1, a2, a3 }))
}

fn fcn_backward(cache: &FcnCache, grad_out: &[f64], p: &FcnParams, grads: &mut FcnParams) -> Result<()> {
    let rows = grad_out.len();
    let go = Tensor::new(vec![rows, 1], grad_out.to_vec())?;
    let mut g3 = cross_channel_avg_pool_backward(&go, p.conv3.out_channels)?;
    relu_backward_in_place(g3.values_mut(), cache.a3.values());
    let mut g2 = conv_1xk_backward_into(&cache.a2, &p.conv3, &g3, &mut grads.conv3, true)?
        .expect("input gradient requested");
    relu_backward_in_place(g2.values_mut(), cache.a2.values());
    let mut g1 = conv_1xk_backward_into(&cache.a1, &p.conv2, &g2, &mut grads.conv2, true)?
        .expect("input gradient requested");
    relu_backward_in_place(g1.values_mut(), cache.a1.values());
    conv_1xk_backward_into(&cache.input, &p.conv1, &g1, &mut grads.conv1, false)?;
    Ok(())
}

fn day_input(x_h: &Tensor) -> Result<Tensor> {
    match x_h.shape() {
        [l, n] if *n >= 3 => Tensor::new(vec![*l, *n, 1], x_h.values().to_vec()),
        [_, n] => Err(Error::Shape(format!("FCN needs N >= 3, got {n}"))),
        s => Err(Error::Shape(format!("day matrix must be [L × N], got {s:?}"))),
    }
}

/// One FCN module on a day matrix `[L × N]`, returning the `L`-vector.
pub fn fcn_module_forward(x_h: &Tensor, params: &FcnParams) -> Result<Vec<f64>> {
    Ok(fcn_forward_cached(day_input(x_h)?, params)?.0)
}

/// Shapes after each convolution and after pooling, for inspection.
pub fn fcn_module_shapes(x_h: &Tensor, params: &FcnParams) -> Result<[Vec<usize>; 4]> {
    let (out, cache) = fcn_forward_cached(day_input(x_h)?, params)?;
    Ok([
        cache.a1.shape().to_vec(),
        cache.a2.shape().to_vec(),
        cache.a3.shape().to_vec(),
        vec![out.len(), 1],
    ])
}

/// Parameter gradients of `Σ grad_out · fcn_module_forward(x_h)`.
pub fn fcn_module_backward(x_h: &Tensor, params: &FcnParams, grad_out: &[f64]) -> Result<FcnParams> {
    let (out, cache) = fcn_forward_cached(day_input(x_h)?, params)?;
    if grad_out.len() != out.len() {
        return Err(Error::Shape("FCN backward: gradient length mismatch".into()));
    }
    let mut grads = zeros_like(params);
    fcn_backward(&cache, grad_out, params, &mut grads)?;
    Ok(grads)
}

/// Standardised day slices of a batch plus dedup keys: slices with equal keys
/// are identical and share one FCN evaluation when the FCN is shared.
struct BatchInput<'a> {
    /// `[B][H]` slices of length `L·N`.
    slices: Vec<Vec<&'a [f64]>>,
    keys: Vec<Vec<usize>>,
}

struct FcnGroup {
    fcn: usize,
    cache: FcnCache,
}

struct ForwardCache {
    batch: usize,
    groups: Vec<FcnGroup>,
    /// `[H][B]` → (group, row block inside the group).
    loc: Vec<Vec<(usize, usize)>>,
    lstm: Vec<LstmStepCache>,
    h_last: Vec<f64>,
    out: Vec<f64>,
}

fn forward_batch(params: &PhdstParams, input: &BatchInput) -> Result<ForwardCache> {
    let a = params.architecture;
    let (l, n, hist) = (a.stations, a.width, a.history);
    let batch = input.slices.len();
    let mut groups = Vec::new();
    let mut loc = vec![vec![(0, 0); batch]; hist];
    let mut group_out = Vec::new();
    let mut run_group = |fcn: usize, rows: Vec<&[f64]>| -> Result<()> {
        let count = rows.len();
        let t = Tensor::new(vec![count * l, n, 1], rows.concat())?;
        let (out, cache) = fcn_forward_cached(t, &params.fcn[fcn])?;
        groups.push(FcnGroup { fcn, cache });
        group_out.push(out);
        Ok(())
    };
    if a.shared_fcn {
        let mut pos_of: BTreeMap<usize, usize> = BTreeMap::new();
        let mut rows = Vec::new();
        for (b, keys) in input.keys.iter().enumerate() {
            for (h, &k) in keys.iter().enumerate() {
                let pos = *pos_of.entry(k).or_insert_with(|| {
                    rows.push(input.slices[b][h]);
                    rows.len() - 1
                });
                loc[h][b] = (0, pos);
            }
        }
        run_group(0, rows)?;
    } else {
        for (h, row_loc) in loc.iter_mut().enumerate() {
            let rows = (0..batch).map(|b| input.slices[b][h]).collect();
            run_group(h, rows)?;
            for (b, slot) in row_loc.iter_mut().enumerate() {
                *slot = (h, b);
            }
        }
    }
    let xs: Vec<Vec<f64>> = loc
        .iter()
        .map(|row_loc| {
            let mut x = Vec::with_capacity(batch * l);
            for &(g, pos) in row_loc {
                x.extend_from_slice(&group_out[g][pos * l..(pos + 1) * l]);
            }
            x
        })
        .collect();
    let (hs, lstm) = lstm_sequence_forward(&xs, batch, &params.lstm)?;
    let h_last = hs.last().cloned().unwrap_or_default();
    let out = dense_forward(&h_last, batch, &params.projection, false)?;
    Ok(ForwardCache {
        batch,
        groups,
        loc,
        lstm,
        h_last,
        out,
    })
}

fn backward_batch(
    params: &PhdstParams,
    cache: &ForwardCache,
    grad_out: &[f64],
    grads: &mut PhdstParams,
) -> Result<()> {
    let l = params.architecture.stations;
    let dh = dense_backward(
        &cache.h_last,
        &cache.out,
        grad_out,
        cache.batch,
        &params.projection,
        false,
        &mut grads.projection,
    )?;
    let dxs = lstm_sequence_backward(&cache.lstm, &dh, &params.lstm, &mut grads.lstm)?;
    let mut group_grad: Vec<Vec<f64>> = cache
        .groups
        .iter()
        .map(|g| vec![0.0; g.cache.input.shape()[0]])
        .collect();
    for (h, row_loc) in cache.loc.iter().enumerate() {
        for (b, &(g, pos)) in row_loc.iter().enumerate() {
            let src = &dxs[h][b * l..(b + 1) * l];
            for (d, s) in group_grad[g][pos * l..(pos + 1) * l].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    for (g, gg) in cache.groups.iter().zip(&group_grad) {
        fcn_backward(&g.cache, gg, &params.fcn[g.fcn], &mut grads.fcn[g.fcn])?;
    }
    Ok(())
}

fn check_tensor(x: &FeatureTensor, params: &PhdstParams) -> Result<()> {
    let a = params.architecture;
    if x.stations != params.stations {
        return Err(Error::StationMismatch(
            "feature tensor stations differ from the model's stations".into(),
        ));
    }
    if x.history != a.history || x.width != a.width {
        return Err(Error::Shape(format!(
            "feature tensor is {}×{}×{}, model expects {}×{}×{}",
            x.num_stations(),
            x.history,
            x.width,
            a.stations,
            a.history,
            a.width
        )));
    }
    Ok(())
}

/// Box-Cox-scale predictions for a batch of feature tensors.
pub fn model_forward_batch(xs: &[&FeatureTensor], params: &PhdstParams) -> Result<Vec<Vec<f64>>> {
    let h_count = params.architecture.history;
    let mut std_slices = Vec::with_capacity(xs.len());
    for x in xs {
        check_tensor(x, params)?;
        std_slices.push(
            (0..h_count)
                .map(|h| params.scaling.standardize_slice(&x.day_slice(h)))
                .collect::<Vec<_>>(),
        );
    }
    let input = BatchInput {
        slices: std_slices
            .iter()
            .map(|s| s.iter().map(Vec::as_slice).collect())
            .collect(),
        keys: (0..xs.len())
            .map(|b| (0..h_count).map(|h| b * h_count + h).collect())
            .collect(),
    };
    let cache = forward_batch(params, &input)?;
    let l = params.architecture.stations;
    Ok(cache
        .out
        .chunks_exact(l)
        .map(|row| params.scaling.destandardize(row))
        .collect())
}

/// Box-Cox-scale next-day predictions `[L]` for one feature tensor.
pub fn model_forward(x: &FeatureTensor, params: &PhdstParams) -> Result<Vec<f64>> {
    Ok(model_forward_batch(&[x], params)?.remove(0))
}

/// Samples with deduplicated, standardised day slices.
pub struct PreparedSet {
    slices: Vec<Vec<f64>>,
    day_ids: Vec<Vec<usize>>,
    targets: Vec<Vec<f64>>,
}

impl PreparedSet {
    pub fn new(samples: &[Sample], params: &PhdstParams) -> Result<Self> {
        let mut index: BTreeMap<chrono::NaiveDate, usize> = BTreeMap::new();
        let mut slices = Vec::new();
        let mut day_ids = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            check_tensor(&s.features, params)?;
            if s.target.len() != params.architecture.stations {
                return Err(Error::Shape("target length differs from L".into()));
            }
            let ids = (0..s.features.history)
                .map(|h| {
                    *index.entry(s.features.day_of(h)).or_insert_with(|| {
                        slices.push(params.scaling.standardize_slice(&s.features.day_slice(h)));
                        slices.len() - 1
                    })
                })
                .collect();
            day_ids.push(ids);
            targets.push(params.scaling.standardize_target(&s.target));
        }
        Ok(PreparedSet {
            slices,
            day_ids,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn batch_input(&self, idx: &[usize]) -> BatchInput<'_> {
        BatchInput {
            slices: idx
                .iter()
                .map(|&i| self.day_ids[i].iter().map(|&d| self.slices[d].as_slice()).collect())
                .collect(),
            keys: idx.iter().map(|&i| self.day_ids[i].clone()).collect(),
        }
    }

    fn batch_targets(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| self.targets[i].iter().copied()).collect()
    }
}

/// Mean standardised MSE over `idx` and, if `grads` is given, its gradient
/// (added into `grads`).
fn batch_loss(
    params: &PhdstParams,
    set: &PreparedSet,
    idx: &[usize],
    grads: Option<&mut PhdstParams>,
) -> Result<f64> {
    let cache = forward_batch(params, &set.batch_input(idx))?;
    let (loss, grad) = mse_loss(&cache.out, &set.batch_targets(idx))?;
    if let Some(g) = grads {
        backward_batch(params, &cache, &grad, g)?;
    }
    Ok(loss)
}

/// Training objective on `samples`: mean squared error between standardised
/// outputs and standardised normalised targets.
pub fn dataset_loss(params: &PhdstParams, samples: &[Sample]) -> Result<f64> {
    let set = PreparedSet::new(samples, params)?;
    prepared_loss(params, &set)
}

const EVAL_CHUNK: usize = 64;

fn prepared_loss(params: &PhdstParams, set: &PreparedSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Config("loss over zero samples".into()));
    }
    let all: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(EVAL_CHUNK) {
        total += batch_loss(params, set, chunk, None)? * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Loss and its exact gradient over all `samples` (one batch).
pub fn loss_and_gradient(params: &PhdstParams, samples: &[Sample]) -> Result<(f64, PhdstParams)> {
    let set = PreparedSet::new(samples, params)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut grads = zeros_like(params);
    let loss = batch_loss(params, &set, &idx, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Size and sharing of the network; the data fixes `L`, `H` and `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub shared_fcn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            shared_fcn: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of the chronologically last samples held out for early stopping.
    pub validation_fraction: f64,
    pub patience: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 42,
            validation_fraction: 0.1,
            patience: 20,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0, 0.5], got {}",
                self.validation_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Number of validation samples out of `n`.
    pub fn validation_count(&self, n: usize) -> usize {
        (n as f64 * self.validation_fraction).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Training loss at the initial parameters.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// `(epoch, train_loss, val_loss)` rows, without timings.
    pub fn losses(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.epochs
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.val_loss))
            .collect()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// CSV with columns `epoch,train_loss,val_loss`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (e, t, v) in self.losses() {
            let v = v.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{e},{t},{v}\n"));
        }
        s
    }
}

/// Early-stopping bookkeeping on a validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records `loss` for `epoch`; returns `true` when it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience.max(1)
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Trains the network on chronologically ordered `samples`.
///
/// The last `validation_fraction` of samples drive early stopping and the
/// best-validation parameters are returned; without validation samples the
/// final parameters are returned. Batches are runs of consecutive samples so
/// that overlapping windows share FCN evaluations; batch order is shuffled per
/// epoch from `config.seed`.
pub fn train_stage1(
    samples: &[Sample],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(PhdstParams, TrainHistory)> {
    config.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("training dataset is empty".into()))?;
    let n_val = config.validation_count(samples.len());
    let n_train = samples.len() - n_val;
    if n_train == 0 {
        return Err(Error::Config(
            "validation split leaves no training samples".into(),
        ));
    }
    let (train, val) = samples.split_at(n_train);
    let architecture = Architecture {
        stations: first.features.num_stations(),
        history: first.features.history,
        width: first.features.width,
        hidden: model.hidden,
        shared_fcn: model.shared_fcn,
    };
    let mut params = PhdstParams::init(first.features.stations.clone(), architecture, config.seed)?;
    params.scaling = Scaling::fit(train)?;
    let train_set = PreparedSet::new(train, &params)?;
    let val_set = if val.is_empty() {
        None
    } else {
        Some(PreparedSet::new(val, &params)?)
    };

    let mut optimizer = OptimizerState::new(
        &params,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let blocks: Vec<Vec<usize>> = (0..n_train)
        .collect::<Vec<_>>()
        .chunks(config.batch_size)
        .map(<[usize]>::to_vec)
        .collect();

    let mut history = TrainHistory {
        initial_train_loss: prepared_loss(&params, &train_set)?,
        ..Default::default()
    };
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = params.clone();
    let mut grads = zeros_like(&params);
    let started = Instant::now();
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for &bi in &order {
            let idx = &blocks[bi];
            zero_fill(&mut grads);
            let loss = batch_loss(&params, &train_set, idx, Some(&mut grads))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss in epoch {epoch}")));
            }
            total += loss * idx.len() as f64;
            clip_global_norm(&mut grads, config.clip_norm);
            adam_step(&mut params, &grads, &mut optimizer)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
        }
        let train_loss = total / n_train as f64;
        let val_loss = match &val_set {
            Some(v) => {
                let l = prepared_loss(&params, v)?;
                if !l.is_finite() {
                    return Err(Error::Numeric(format!("non-finite validation loss in epoch {epoch}")));
                }
                Some(l)
            }
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        if let Some(v) = val_loss {
            if stopper.observe(epoch, v) {
                best = params.clone();
            }
            if stopper.should_stop() {
                history.stopped_early = true;
                break;
            }
        }
    }
    if val_set.is_some() {
        history.best_epoch = stopper.best_epoch();
        Ok((best, history))
    } else {
        history.best_epoch = history.epochs.len();
        Ok((params, history))
    }
}

/// Sum of per-sample gradients, for checking batched gradients.
pub fn summed_sample_gradients(params: &PhdstParams, samples: &[Sample]) -> Result<PhdstParams> {
    let mut acc = zeros_like(params);
    for s in samples {
        let (_, g) = loss_and_gradient(params, std::slice::from_ref(s))?;
        add_assign(&mut acc, &g);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::{grad_check, GradCheckConfig};
    use chrono::{Duration, NaiveDate};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ids(l: usize) -> Vec<StationId> {
        (0..l).map(|i| StationId::from(format!("{}", 100 + i))).collect()
    }

    /// Samples over a shared random daily feature table, like real sliding windows.
    pub(crate) fn toy_samples(l: usize, h: usize, n: usize, count: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let days = count + h;
        let start = NaiveDate::from_ymd_opt(2017, 6, 1).unwrap();
        let table: Vec<Vec<f64>> = (0..days)
            .map(|_| {
                let mut v = vec![0.0; l * n];
                for s in 0..l {
                    v[s * n] = f64::from(rng.random_range(0..2u8));
                    v[s * n + 1] = f64::from(rng.random_range(0..3u8));
                    for k in 2..n {
                        v[s * n + k] = { let z: f64 = StandardNormal.sample(&mut rng); 3.0 + z };
                    }
                }
                v
            })
            .collect();
        (0..count)
            .map(|i| {
                let anchor_idx = i + h - 1;
                let mut values = vec![0.0; l * h * n];
                for hh in 0..h {
                    let day = &table[anchor_idx + 1 - h + hh];
                    for s in 0..l {
                        values[(s * h + hh) * n..(s * h + hh + 1) * n]
                            .copy_from_slice(&day[s * n..(s + 1) * n]);
                    }
                }
                let target: Vec<f64> = (0..l)
                    .map(|s| table[anchor_idx][s * n + 2] * 0.5 + 1.0 + 0.1 * s as f64)
                    .collect();
                Sample {
                    anchor: start + Duration::days(anchor_idx as i64),
                    features: FeatureTensor {
                        anchor: start + Duration::days(anchor_idx as i64),
                        stations: ids(l),
                        history: h,
                        width: n,
                        values,
                    },
                    raw_target: target.clone(),
                    target,
                }
            })
            .collect()
    }

    fn arch(l: usize, h: usize, n: usize, hidden: usize, shared: bool) -> Architecture {
        Architecture {
            stations: l,
            history: h,
            width: n,
            hidden,
            shared_fcn: shared,
        }
    }

    #[test]
    fn split_and_stack_round_trip() {
        let s = toy_samples(3, 14, 5, 1, 1).remove(0);
        let days = split_features(&s.features);
        assert_eq!(days.len(), 14);
        assert_eq!(days[0].shape(), &[3, 5]);
        for l in 0..3 {
            for k in 0..5 {
                assert_eq!(days[4].values()[l * 5 + k], s.features.get(l, 4, k));
            }
        }
        let back = stack_features(&days, s.features.anchor, s.features.stations.clone()).unwrap();
        assert_eq!(back, s.features);
    }

    #[test]
    fn fcn_shapes_large_station_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = FcnParams::init(5, &mut rng).unwrap();
        let x = Tensor::zeros(vec![274, 5]).unwrap();
        let shapes = fcn_module_shapes(&x, &p).unwrap();
        assert_eq!(shapes[0], vec![274, 4, 64]);
        assert_eq!(shapes[1], vec![274, 3, 128]);
        assert_eq!(shapes[2], vec![274, 1, 256]);
        assert_eq!(shapes[3], vec![274, 1]);
        assert!(FcnParams::init(2, &mut rng).is_err());
        assert!(fcn_module_forward(&Tensor::zeros(vec![3, 2]).unwrap(), &p).is_err());
    }

    #[test]
    fn fcn_zero_params_give_zero() {
        let p = FcnParams::zeros(6).unwrap();
        let x = Tensor::new(vec![2, 6], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(fcn_module_forward(&x, &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn fcn_module_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = FcnParams::init(5, &mut rng).unwrap();
        let x = Tensor::new(vec![4, 5], (0..20).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let probe: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = fcn_module_backward(&x, &p, &probe).unwrap();
        let report = grad_check(
            &p,
            &g,
            |q| {
                fcn_module_forward(&x, q)
                    .unwrap()
                    .iter()
                    .zip(&probe)
                    .map(|(a, b)| a * b)
                    .sum()
            },
            GradCheckConfig {
                tolerance: 1e-5,
                seed: 3,
                ..Default::default()
            },
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn model_output_length() {
        let s = toy_samples(20, 14, 5, 1, 2).remove(0);
        let p = PhdstParams::init(ids(20), arch(20, 14, 5, 32, true), 1).unwrap();
        assert_eq!(model_forward(&s.features, &p).unwrap().len(), 20);
        let other = toy_samples(20, 13, 5, 1, 2).remove(0);
        assert!(matches!(model_forward(&other.features, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn station_relabeling_permutes_output() {
        let s = toy_samples(4, 5, 5, 1, 3).remove(0);
        let mut p = PhdstParams::init(ids(4), arch(4, 5, 5, 8, true), 4).unwrap();
        p.scaling = Scaling::fit(std::slice::from_ref(&s)).unwrap();
        let perm = [2, 0, 3, 1];
        let q = p.permute_stations(&perm).unwrap();
        let mut xp = s.features.clone();
        xp.stations = q.stations.clone();
        for (i, &src) in perm.iter().enumerate() {
            for h in 0..5 {
                for k in 0..5 {
                    xp.values[(i * 5 + h) * 5 + k] = s.features.get(src, h, k);
                }
            }
        }
        let y = model_forward(&s.features, &p).unwrap();
        let yp = model_forward(&xp, &q).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert!((yp[i] - y[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_model_gradient_check() {
        for shared in [true, false] {
            let samples = toy_samples(4, 6, 5, if shared { 3 } else { 1 }, 5);
            let mut p = PhdstParams::init(ids(4), arch(4, 6, 5, 6, shared), 9).unwrap();
            p.scaling = Scaling::fit(&samples).unwrap();
            let (_, g) = loss_and_gradient(&p, &samples).unwrap();
            let report = grad_check(
                &p,
                &g,
                |q| dataset_loss(q, &samples).unwrap(),
                GradCheckConfig {
                    seed: 1,
                    ..Default::default()
                },
            );
            assert!(report.passed(), "shared={shared}\n{report}");
        }
    }

    #[test]
    fn batched_gradient_is_mean_of_sample_gradients() {
        let samples = toy_samples(3, 4, 4, 6, 7);
        let mut p = PhdstParams::init(ids(3), arch(3, 4, 4, 5, true), 2).unwrap();
        p.scaling = Scaling::fit(&samples).unwrap();
        let (_, batched) = loss_and_gradient(&p, &samples).unwrap();
        let summed = summed_sample_gradients(&p, &samples).unwrap();
        for ((name, a), (_, b)) in batched.blocks().iter().zip(summed.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x * 6.0 - y).abs() <= 1e-10 * (1.0 + y.abs()), "{name}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_respects_patience() {
        let samples = toy_samples(3, 4, 5, 20, 8);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 4,
            validation_fraction: 0.2,
            seed: 5,
            ..Default::default()
        };
        let model = ModelConfig {
            hidden: 8,
            shared_fcn: true,
        };
        let (p1, h1) = train_stage1(&samples, &model, &cfg).unwrap();
        let (p2, h2) = train_stage1(&samples, &model, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1.losses(), h2.losses());
        assert_eq!(h1.epochs.len(), 6);
        assert!(h1.to_csv().starts_with("epoch,train_loss,val_loss\n1,"));
    }

    #[test]
    fn early_stopper_contract() {
        let mut s = EarlyStopper::new(5);
        let mut stopped_at = None;
        for epoch in 1..=20 {
            s.observe(epoch, epoch as f64);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(s.best_epoch(), 1);
        assert!(stopped_at.unwrap() - s.best_epoch() <= 6);
    }

    #[test]
    fn invalid_training_configs() {
        let samples = toy_samples(3, 4, 5, 2, 8);
        let model = ModelConfig::default();
        let bad = TrainConfig {
            validation_fraction: 0.6,
            ..Default::default()
        };
        assert!(matches!(train_stage1(&samples, &model, &bad), Err(Error::Config(_))));
        assert!(matches!(
            train_stage1(&[], &model, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_stage1(&samples, &model, &zero_epochs).is_err());
    }
}
