//! Small dense numeric engine: 1×k convolution, cross-channel pooling,
//! activations, LSTM cell, dense layer, MSE loss, Adam and finite-difference
//! gradient checking. Everything is `f64` and row-major.
//!
//! Layers operate on batches: convolution inputs are `[R × W × C]` where `R`
//! may stack the rows of several day-slices, and LSTM/dense inputs are
//! `[B × features]` matrices.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::Shape(format!(
                "{what} expects a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `C = A·B + beta·C` for strided matrices (`m × k` times `k × n`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(max_offset(m, k, rsa, csa) <= a.len(), "gemm: A out of bounds");
    assert!(max_offset(k, n, rsb, csb) <= b.len(), "gemm: B out of bounds");
    assert!(max_offset(m, n, rsc, csc) <= c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a unique borrow that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Derivative of [`relu`]; 0 at the kink.
pub fn relu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

pub fn tanh_derivative(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        *x = relu(*x);
    }
}

/// Masks `grad` by the positivity of a ReLU `output`.
pub fn relu_backward_in_place(grad: &mut [f64], output: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Named flat parameter blocks, visited in a fixed order.
pub trait Parameters {
    fn blocks(&self) -> Vec<(String, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

pub fn zero_fill<P: Parameters>(p: &mut P) {
    for (_, b) in p.blocks_mut() {
        b.fill(0.0);
    }
}

pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    zero_fill(&mut z);
    z
}

pub fn global_norm<P: Parameters>(p: &P) -> f64 {
    p.blocks()
        .iter()
        .flat_map(|(_, b)| b.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

pub fn scale_in_place<P: Parameters>(p: &mut P, factor: f64) {
    for (_, b) in p.blocks_mut() {
        for x in b {
            *x *= factor;
        }
    }
}

/// `acc += other`, block by block.
pub fn add_assign<P: Parameters>(acc: &mut P, other: &P) {
    for ((_, a), (_, b)) in acc.blocks_mut().into_iter().zip(other.blocks()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        scale_in_place(grads, max_norm / norm);
    }
    norm
}

pub fn all_finite<P: Parameters>(p: &P) -> std::result::Result<(), String> {
    for (name, b) in p.blocks() {
        if let Some(i) = b.iter().position(|x| !x.is_finite()) {
            return Err(format!("{name}[{i}] = {}", b[i]));
        }
    }
    Ok(())
}

fn fill_uniform(rng: &mut ChaCha8Rng, bound: f64, v: &mut [f64]) {
    for x in v {
        *x = rng.random_range(-bound..bound);
    }
}

/// Kernel `[out × in × 1 × k]` and bias `[out]` of a 1×k convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub k: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || k == 0 {
            return Err(Error::Shape(format!(
                "convolution needs positive sizes, got out={out_channels} in={in_channels} k={k}"
            )));
        }
        Ok(ConvParams {
            out_channels,
            in_channels,
            k,
            kernel: vec![0.0; out_channels * in_channels * k],
            bias: vec![0.0; out_channels],
        })
    }

    /// Fan-in scaled uniform initialisation.
    pub fn init(out_channels: usize, in_channels: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut p = ConvParams::zeros(out_channels, in_channels, k)?;
        let bound = 1.0 / ((in_channels * k) as f64).sqrt();
        fill_uniform(rng, bound, &mut p.kernel);
        fill_uniform(rng, bound, &mut p.bias);
        Ok(p)
    }

    pub fn kernel_at(&self, o: usize, c: usize, j: usize) -> f64 {
        self.kernel[(o * self.in_channels + c) * self.k + j]
    }

    pub fn kernel_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.out_channels, self.in_channels, 1, self.k],
            values: self.kernel.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.kernel.len() != self.out_channels * self.in_channels * self.k
            || self.bias.len() != self.out_channels
        {
            return Err(Error::Shape("convolution parameters inconsistent".into()));
        }
        Ok(())
    }

    /// Kernel rearranged to `[out × (k·in)]`, matching the patch layout.
    fn packed(&self) -> Vec<f64> {
        let (ci, k) = (self.in_channels, self.k);
        let mut w = vec![0.0; self.out_channels * k * ci];
        for o in 0..self.out_channels {
            for c in 0..ci {
                for j in 0..k {
                    w[o * k * ci + j * ci + c] = self.kernel_at(o, c, j);
                }
            }
        }
        w
    }
}

impl Parameters for ConvParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![("kernel".into(), &self.kernel), ("bias".into(), &self.bias)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("kernel".into(), &mut self.kernel), ("bias".into(), &mut self.bias)]
    }
}

fn conv_dims(input: &Tensor, params: &ConvParams) -> Result<(usize, usize, usize, usize)> {
    params.validate()?;
    let (r, w, ci) = input.dims3("conv_1xk")?;
    if ci != params.in_channels {
        return Err(Error::Shape(format!(
            "conv_1xk: input has {ci} channels, kernel expects {}",
            params.in_channels
        )));
    }
    if w < params.k {
        return Err(Error::Shape(format!(
            "conv_1xk: width {w} smaller than kernel width {}",
            params.k
        )));
    }
    Ok((r, w, ci, w - params.k + 1))
}

/// Patch matrix `[(R·W_out) × (k·C_in)]`.
fn im2col(input: &[f64], r: usize, w: usize, ci: usize, k: usize) -> Vec<f64> {
    let wo = w - k + 1;
    let kc = k * ci;
    let mut p = Vec::with_capacity(r * wo * kc);
    for row in 0..r {
        for x in 0..wo {
            let start = (row * w + x) * ci;
            p.extend_from_slice(&input[start..start + kc]);
        }
    }
    p
}

/// Valid cross-correlation along the width axis, stride 1:
/// `[R × W × C_in] → [R × (W−k+1) × C_out]`. No activation.
pub fn conv_1xk(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let (r, w, ci, wo) = conv_dims(input, params)?;
    let co = params.out_channels;
    let kc = params.k * ci;
    let patches = im2col(&input.values, r, w, ci, params.k);
    let packed = params.packed();
    let mut out = Vec::with_capacity(r * wo * co);
    for _ in 0..r * wo {
        out.extend_from_slice(&params.bias);
    }
    gemm(r * wo, kc, co, &patches, (kc, 1), &packed, (1, kc), 1.0, &mut out, (co, 1));
    Tensor::new(vec![r, wo, co], out)
}

/// Accumulates parameter gradients of [`conv_1xk`] into `grads` and returns the
/// input gradient when `want_input_grad` is set.
pub fn conv_1xk_backward_into(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
    grads: &mut ConvParams,
    want_input_grad: bool,
) -> Result<Option<Tensor>> {
    let (r, w, ci, wo) = conv_dims(input, params)?;
    let co = params.out_channels;
    let (k, kc) = (params.k, params.k * ci);
    if grad_out.shape != [r, wo, co] {
        return Err(Error::Shape(format!(
            "conv_1xk backward: gradient shape {:?}, expected {:?}",
            grad_out.shape,
            [r, wo, co]
        )));
    }
    if grads.kernel.len() != params.kernel.len() || grads.bias.len() != co {
        return Err(Error::Shape("conv_1xk backward: gradient buffer mismatch".into()));
    }
    let rows = r * wo;
    let g = &grad_out.values;
    let patches = im2col(&input.values, r, w, ci, k);
    let mut dpacked = vec![0.0; co * kc];
    gemm(co, rows, kc, g, (1, co), &patches, (kc, 1), 0.0, &mut dpacked, (kc, 1));
    for o in 0..co {
        for c in 0..ci {
            for j in 0..k {
                grads.kernel[(o * ci + c) * k + j] += dpacked[o * kc + j * ci + c];
            }
        }
    }
    for row in g.chunks_exact(co) {
        for (b, x) in grads.bias.iter_mut().zip(row) {
            *b += x;
        }
    }
    if !want_input_grad {
        return Ok(None);
    }
    let packed = params.packed();
    let mut dpatches = vec![0.0; rows * kc];
    gemm(rows, co, kc, g, (co, 1), &packed, (kc, 1), 0.0, &mut dpatches, (kc, 1));
    let mut dinput = vec![0.0; r * w * ci];
    for row in 0..r {
        for x in 0..wo {
            let src = &dpatches[(row * wo + x) * kc..(row * wo + x + 1) * kc];
            let start = (row * w + x) * ci;
            for (d, s) in dinput[start..start + kc].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(Some(Tensor::new(vec![r, w, ci], dinput)?))
}

/// Gradients of [`conv_1xk`] with respect to its input and parameters.
pub fn conv_1xk_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, ConvParams)> {
    let mut grads = zeros_like(params);
    let dinput = conv_1xk_backward_into(input, params, grad_out, &mut grads, true)?
        .expect("input gradient requested");
    Ok((dinput, grads))
}

/// Mean over channels: `[R × 1 × C] → [R × 1]`.
pub fn cross_channel_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (r, w, c) = input.dims3("cross_channel_avg_pool")?;
    if w != 1 {
        return Err(Error::Shape(format!(
            "cross_channel_avg_pool needs width 1, got {w}"
        )));
    }
    let out = input
        .values
        .chunks_exact(c)
        .map(|ch| ch.iter().sum::<f64>() / c as f64)
        .collect();
    Tensor::new(vec![r, 1], out)
}

/// Spreads `grad_out[r] / C` over the `C` channels of row `r`.
pub fn cross_channel_avg_pool_backward(grad_out: &Tensor, channels: usize) -> Result<Tensor> {
    if channels == 0 {
        return Err(Error::Shape("pool backward needs at least one channel".into()));
    }
    let r = grad_out.len();
    let scale = 1.0 / channels as f64;
    let mut v = Vec::with_capacity(r * channels);
    for &g in &grad_out.values {
        v.extend(std::iter::repeat_n(g * scale, channels));
    }
    Tensor::new(vec![r, 1, channels], v)
}

/// LSTM gate weights `[hidden × (hidden + input)]` acting on `[h_prev, x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub hidden: usize,
    pub input: usize,
    pub w_f: Vec<f64>,
    pub w_i: Vec<f64>,
    pub w_c: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(hidden: usize, input: usize) -> Result<Self> {
        if hidden == 0 || input == 0 {
            return Err(Error::Shape(format!(
                "LSTM needs positive sizes, got hidden={hidden} input={input}"
            )));
        }
        let wn = hidden * (hidden + input);
        Ok(LstmParams {
            hidden,
            input,
            w_f: vec![0.0; wn],
            w_i: vec![0.0; wn],
            w_c: vec![0.0; wn],
            w_o: vec![0.0; wn],
            b_f: vec![0.0; hidden],
            b_i: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
        })
    }

    /// Uniform `±1/√hidden` weights, zero biases except the forget gate at +1.
    pub fn init(hidden: usize, input: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut p = LstmParams::zeros(hidden, input)?;
        let bound = 1.0 / (hidden as f64).sqrt();
        for w in [&mut p.w_f, &mut p.w_i, &mut p.w_c, &mut p.w_o] {
            fill_uniform(rng, bound, w);
        }
        p.b_f.fill(1.0);
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let wn = self.hidden * (self.hidden + self.input);
        let ok = [&self.w_f, &self.w_i, &self.w_c, &self.w_o]
            .iter()
            .all(|w| w.len() == wn)
            && [&self.b_f, &self.b_i, &self.b_c, &self.b_o]
                .iter()
                .all(|b| b.len() == self.hidden);
        if !ok {
            return Err(Error::Shape("LSTM parameters inconsistent".into()));
        }
        Ok(())
    }

    fn gates(&self) -> [(&[f64], &[f64]); 4] {
        [
            (&self.w_f, &self.b_f),
            (&self.w_i, &self.b_i),
            (&self.w_c, &self.b_c),
            (&self.w_o, &self.b_o),
        ]
    }
}

impl Parameters for LstmParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("w_f".into(), &self.w_f),
            ("w_i".into(), &self.w_i),
            ("w_c".into(), &self.w_c),
            ("w_o".into(), &self.w_o),
            ("b_f".into(), &self.b_f),
            ("b_i".into(), &self.b_i),
            ("b_c".into(), &self.b_c),
            ("b_o".into(), &self.b_o),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("w_f".into(), &mut self.w_f),
            ("w_i".into(), &mut self.w_i),
            ("w_c".into(), &mut self.w_c),
            ("w_o".into(), &mut self.w_o),
            ("b_f".into(), &mut self.b_f),
            ("b_i".into(), &mut self.b_i),
            ("b_c".into(), &mut self.b_c),
            ("b_o".into(), &mut self.b_o),
        ]
    }
}

/// Activations of one LSTM step for a batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub batch: usize,
    z: Vec<f64>,
    f: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// One LSTM step for `batch` rows. `x` is `[B × input]`, states `[B × hidden]`.
/// Returns `(h_t, C_t, cache)`.
pub fn lstm_step_forward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    batch: usize,
    params: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>, LstmStepCache)> {
    params.validate()?;
    let (hd, inp) = (params.hidden, params.input);
    if x.len() != batch * inp || h_prev.len() != batch * hd || c_prev.len() != batch * hd {
        return Err(Error::Shape(format!(
            "LSTM step: got x={}, h={}, C={} values for batch {batch}, hidden {hd}, input {inp}",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let zw = hd + inp;
    let mut z = Vec::with_capacity(batch * zw);
    for b in 0..batch {
        z.extend_from_slice(&h_prev[b * hd..(b + 1) * hd]);
        z.extend_from_slice(&x[b * inp..(b + 1) * inp]);
    }
    let mut pre: [Vec<f64>; 4] = Default::default();
    for (p, (w, bias)) in pre.iter_mut().zip(params.gates()) {
        let mut m = Vec::with_capacity(batch * hd);
        for _ in 0..batch {
            m.extend_from_slice(bias);
        }
        gemm(batch, zw, hd, &z, (zw, 1), w, (1, zw), 1.0, &mut m, (hd, 1));
        *p = m;
    }
    let [pf, pi, pg, po] = pre;
    let f: Vec<f64> = pf.into_iter().map(sigmoid).collect();
    let i: Vec<f64> = pi.into_iter().map(sigmoid).collect();
    let g: Vec<f64> = pg.into_iter().map(tanh).collect();
    let o: Vec<f64> = po.into_iter().map(sigmoid).collect();
    let c: Vec<f64> = (0..batch * hd).map(|u| f[u] * c_prev[u] + i[u] * g[u]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = o.iter().zip(&tanh_c).map(|(a, b)| a * b).collect();
    let cache = LstmStepCache {
        batch,
        z,
        f,
        i,
        g,
        o,
        c_prev: c_prev.to_vec(),
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Backward through one step given `dL/dh_t` and `dL/dC_t`; accumulates
/// parameter gradients and returns `(dL/dx, dL/dh_prev, dL/dC_prev)`.
pub fn lstm_step_backward(
    cache: &LstmStepCache,
    dh: &[f64],
    dc: &[f64],
    params: &LstmParams,
    grads: &mut LstmParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (hd, inp, batch) = (params.hidden, params.input, cache.batch);
    let n = batch * hd;
    if dh.len() != n || dc.len() != n {
        return Err(Error::Shape("LSTM backward: state gradient size mismatch".into()));
    }
    let mut d_pre: [Vec<f64>; 4] = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut dc_prev = vec![0.0; n];
    for u in 0..n {
        let (f, i, g, o, t) = (cache.f[u], cache.i[u], cache.g[u], cache.o[u], cache.tanh_c[u]);
        let dct = dc[u] + dh[u] * o * (1.0 - t * t);
        d_pre[0][u] = dct * cache.c_prev[u] * f * (1.0 - f);
        d_pre[1][u] = dct * g * i * (1.0 - i);
        d_pre[2][u] = dct * i * (1.0 - g * g);
        d_pre[3][u] = dh[u] * t * o * (1.0 - o);
        dc_prev[u] = dct * f;
    }
    let zw = hd + inp;
    let mut dz = vec![0.0; batch * zw];
    let grad_blocks = [
        (&mut grads.w_f, &mut grads.b_f),
        (&mut grads.w_i, &mut grads.b_i),
        (&mut grads.w_c, &mut grads.b_c),
        (&mut grads.w_o, &mut grads.b_o),
    ];
    for ((dp, (gw, gb)), (w, _)) in d_pre.iter().zip(grad_blocks).zip(params.gates()) {
        gemm(hd, batch, zw, dp, (1, hd), &cache.z, (zw, 1), 1.0, gw, (zw, 1));
        for row in dp.chunks_exact(hd) {
            for (b, x) in gb.iter_mut().zip(row) {
                *b += x;
            }
        }
        gemm(batch, hd, zw, dp, (hd, 1), w, (zw, 1), 1.0, &mut dz, (zw, 1));
    }
    let mut dx = Vec::with_capacity(batch * inp);
    let mut dh_prev = Vec::with_capacity(n);
    for row in dz.chunks_exact(zw) {
        dh_prev.extend_from_slice(&row[..hd]);
        dx.extend_from_slice(&row[hd..]);
    }
    Ok((dx, dh_prev, dc_prev))
}

/// Single-sample LSTM step returning `(h_t, C_t)`.
pub fn lstm_cell_step(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, c, _) = lstm_step_forward(x, h_prev, c_prev, 1, params)?;
    Ok((h, c))
}

/// Runs the LSTM over `xs` (one `[B × input]` matrix per step) from zero
/// state and returns the hidden states of every step plus caches.
pub fn lstm_sequence_forward(
    xs: &[Vec<f64>],
    batch: usize,
    params: &LstmParams,
) -> Result<(Vec<Vec<f64>>, Vec<LstmStepCache>)> {
    let n = batch * params.hidden;
    let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
    let mut hs = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (h2, c2, cache) = lstm_step_forward(x, &h, &c, batch, params)?;
        h = h2;
        c = c2;
        hs.push(h.clone());
        caches.push(cache);
    }
    Ok((hs, caches))
}

/// Backpropagation through time when only the final hidden state receives a
/// gradient. Returns the input gradients of every step.
pub fn lstm_sequence_backward(
    caches: &[LstmStepCache],
    dh_last: &[f64],
    params: &LstmParams,
    grads: &mut LstmParams,
) -> Result<Vec<Vec<f64>>> {
    let mut dh = dh_last.to_vec();
    let mut dc = vec![0.0; dh.len()];
    let mut dxs = vec![Vec::new(); caches.len()];
    for (t, cache) in caches.iter().enumerate().rev() {
        let (dx, dh_prev, dc_prev) = lstm_step_backward(cache, &dh, &dc, params, grads)?;
        dxs[t] = dx;
        dh = dh_prev;
        dc = dc_prev;
    }
    Ok(dxs)
}

/// Dense layer weight `[out × in]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(outputs: usize, inputs: usize) -> Result<Self> {
        if outputs == 0 || inputs == 0 {
            return Err(Error::Shape(format!(
                "dense layer needs positive sizes, got out={outputs} in={inputs}"
            )));
        }
        Ok(DenseParams {
            inputs,
            outputs,
            weight: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        })
    }

    /// Fan-in scaled uniform initialisation.
    pub fn init(outputs: usize, inputs: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut p = DenseParams::zeros(outputs, inputs)?;
        let bound = 1.0 / (inputs as f64).sqrt();
        fill_uniform(rng, bound, &mut p.weight);
        fill_uniform(rng, bound, &mut p.bias);
        Ok(p)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut p = DenseParams::zeros(n, n)?;
        for i in 0..n {
            p.weight[i * n + i] = 1.0;
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::Shape("dense parameters inconsistent".into()));
        }
        Ok(())
    }
}

impl Parameters for DenseParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// `W·x + b` for each of `batch` rows of `x` (`[B × in] → [B × out]`),
/// optionally ReLU-activated.
pub fn dense_forward(x: &[f64], batch: usize, params: &DenseParams, relu_act: bool) -> Result<Vec<f64>> {
    params.validate()?;
    let (i, o) = (params.inputs, params.outputs);
    if x.len() != batch * i {
        return Err(Error::Shape(format!(
            "dense: got {} inputs for batch {batch} of width {i}",
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(batch * o);
    for _ in 0..batch {
        out.extend_from_slice(&params.bias);
    }
    gemm(batch, i, o, x, (i, 1), &params.weight, (1, i), 1.0, &mut out, (o, 1));
    if relu_act {
        relu_in_place(&mut out);
    }
    Ok(out)
}

/// Single-vector [`dense_forward`].
pub fn dense(x: &[f64], params: &DenseParams, relu_act: bool) -> Result<Vec<f64>> {
    dense_forward(x, 1, params, relu_act)
}

/// Accumulates parameter gradients of [`dense_forward`] and returns the input
/// gradient. `output` is the forward result (needed for the ReLU mask).
pub fn dense_backward(
    x: &[f64],
    output: &[f64],
    grad_out: &[f64],
    batch: usize,
    params: &DenseParams,
    relu_act: bool,
    grads: &mut DenseParams,
) -> Result<Vec<f64>> {
    let (i, o) = (params.inputs, params.outputs);
    if x.len() != batch * i || output.len() != batch * o || grad_out.len() != batch * o {
        return Err(Error::Shape("dense backward: size mismatch".into()));
    }
    let mut g = grad_out.to_vec();
    if relu_act {
        relu_backward_in_place(&mut g, output);
    }
    gemm(o, batch, i, &g, (1, o), x, (i, 1), 1.0, &mut grads.weight, (i, 1));
    for row in g.chunks_exact(o) {
        for (b, v) in grads.bias.iter_mut().zip(row) {
            *b += v;
        }
    }
    let mut dx = vec![0.0; batch * i];
    gemm(batch, o, i, &g, (o, 1), &params.weight, (i, 1), 0.0, &mut dx, (i, 1));
    Ok(dx)
}

/// `(1/n)·Σ(pred − target)²` and its gradient `2(pred − target)/n`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "mse_loss: lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.into_iter().map(|d| 2.0 * d / n).collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators, one per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<P: Parameters>(params: &P, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.blocks().iter().map(|(_, b)| b.len()).collect();
        OptimizerState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any
/// parameter changes, naming the offending block.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut OptimizerState) -> Result<()> {
    let gblocks = grads.blocks();
    if let Err(at) = all_finite(grads) {
        return Err(Error::Numeric(format!("non-finite gradient at {at}")));
    }
    let pblocks = params.blocks_mut();
    if pblocks.len() != gblocks.len()
        || pblocks.len() != state.m.len()
        || pblocks
            .iter()
            .zip(&gblocks)
            .zip(&state.m)
            .any(|(((_, p), (_, g)), m)| p.len() != g.len() || p.len() != m.len())
    {
        return Err(Error::Shape("adam_step: parameter, gradient and state shapes differ".into()));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (bi, ((_, p), (_, g))) in pblocks.into_iter().zip(&gblocks).enumerate() {
        let (m, v) = (&mut state.m[bi], &mut state.v[bi]);
        for j in 0..p.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Coordinates checked per block (all of them when the block is smaller).
    pub coords_per_block: usize,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// gradient is numerically zero do not dominate.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            coords_per_block: 50,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because the loss is not differentiable within
    /// `±epsilon` of them (a ReLU changed sign).
    pub skipped_nonsmooth: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<28} n={:<4} skipped={:<2} max_rel={:.3e} (idx {}, analytic {:.6e}, numeric {:.6e})",
                b.name,
                b.checked,
                b.skipped_nonsmooth,
                b.max_rel_error,
                b.worst_index,
                b.worst_analytic,
                b.worst_numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn central_difference<P: Parameters, F: FnMut(&P) -> f64>(
    work: &mut P,
    loss: &mut F,
    block: usize,
    idx: usize,
    eps: f64,
) -> f64 {
    let original = work.blocks()[block].1[idx];
    work.blocks_mut()[block].1[idx] = original + eps;
    let plus = loss(work);
    work.blocks_mut()[block].1[idx] = original - eps;
    let minus = loss(work);
    work.blocks_mut()[block].1[idx] = original;
    (plus - minus) / (2.0 * eps)
}

/// Compares `analytic` gradients of the scalar `loss` at `params` with central
/// finite differences on a seeded subsample of coordinates of every block.
///
/// A coordinate that fails the tolerance is re-measured with half the step.
/// If the two differences disagree by more than a quarter of the tolerance the
/// loss has a kink inside the step and the coordinate is replaced by another
/// one; an incorrect analytic gradient gives consistent differences and is
/// still reported.
pub fn grad_check<P, F>(params: &P, analytic: &P, mut loss: F, config: GradCheckConfig) -> GradCheckReport
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let analytic_blocks = analytic.blocks();
    let sizes: Vec<(String, usize)> = params
        .blocks()
        .iter()
        .map(|(n, b)| (n.clone(), b.len()))
        .collect();
    let mut blocks = Vec::with_capacity(sizes.len());
    for (bi, (name, len)) in sizes.into_iter().enumerate() {
        let candidates: Vec<usize> = if len <= config.coords_per_block {
            (0..len).collect()
        } else {
            sample(&mut rng, len, len.min(4 * config.coords_per_block)).into_vec()
        };
        let mut check = BlockCheck {
            name,
            checked: 0,
            skipped_nonsmooth: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for idx in candidates {
            if check.checked == config.coords_per_block {
                break;
            }
            let a = analytic_blocks[bi].1[idx];
            let numeric = central_difference(&mut work, &mut loss, bi, idx, config.epsilon);
            let mut err = relative_error(a, numeric, config.abs_floor);
            if err.is_nan() {
                err = f64::INFINITY;
            }
            if err >= config.tolerance && err.is_finite() {
                let half = central_difference(&mut work, &mut loss, bi, idx, config.epsilon / 2.0);
                let spread = (numeric - half).abs() / numeric.abs().max(half.abs()).max(config.abs_floor);
                if spread > config.tolerance / 4.0 {
                    check.skipped_nonsmooth += 1;
                    continue;
                }
            }
            check.checked += 1;
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = idx;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        blocks.push(check);
    }
    GradCheckReport {
        tolerance: config.tolerance,
        blocks,
    }
}

/// A single flat parameter vector, handy for tests and small closures.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams(pub Vec<f64>);

impl Parameters for FlatParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![("w".into(), &self.0)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("w".into(), &mut self.0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct-loop convolution used as an oracle.
    fn conv_naive(input: &Tensor, p: &ConvParams) -> Vec<f64> {
        let (r, w, ci) = input.dims3("x").unwrap();
        let wo = w - p.k + 1;
        let mut out = vec![0.0; r * wo * p.out_channels];
        for row in 0..r {
            for x in 0..wo {
                for o in 0..p.out_channels {
                    let mut s = p.bias[o];
                    for j in 0..p.k {
                        for c in 0..ci {
                            s += p.kernel_at(o, c, j) * input.values[(row * w + x + j) * ci + c];
                        }
                    }
                    out[(row * wo + x) * p.out_channels + o] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::new(vec![3, 6, 4], randn(&mut rng, 72)).unwrap();
        let p = ConvParams::init(5, 4, 3, &mut rng).unwrap();
        let out = conv_1xk(&input, &p).unwrap();
        assert_eq!(out.shape(), &[3, 4, 5]);
        for (a, b) in out.values().iter().zip(conv_naive(&input, &p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shapes_and_identity() {
        let input = Tensor::zeros(vec![274, 5, 1]).unwrap();
        let p = ConvParams::zeros(64, 1, 2).unwrap();
        assert_eq!(conv_1xk(&input, &p).unwrap().shape(), &[274, 4, 64]);

        let x = Tensor::new(vec![2, 3, 1], vec![1.0, -2.0, 3.0, 4.5, 0.0, -1.0]).unwrap();
        let mut id = ConvParams::zeros(1, 1, 1).unwrap();
        id.kernel[0] = 1.0;
        assert_eq!(conv_1xk(&x, &id).unwrap().values(), x.values());

        let narrow = Tensor::zeros(vec![1, 2, 1]).unwrap();
        assert!(matches!(
            conv_1xk(&narrow, &ConvParams::zeros(1, 1, 3).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::new(vec![4, 6, 3], randn(&mut rng, 72)).unwrap();
        let p = ConvParams::init(5, 3, 2, &mut rng).unwrap();
        let probe = randn(&mut rng, 4 * 5 * 5);
        let grad_out = Tensor::new(vec![4, 5, 5], probe.clone()).unwrap();
        let (dinput, dparams) = conv_1xk_backward(&input, &p, &grad_out).unwrap();

        let cfg = GradCheckConfig {
            tolerance: 1e-6,
            ..Default::default()
        };
        let report = grad_check(&p, &dparams, |q| dot(conv_1xk(&input, q).unwrap().values(), &probe), cfg);
        assert!(report.passed(), "{report}");

        let x0 = FlatParams(input.values().to_vec());
        let report = grad_check(
            &x0,
            &FlatParams(dinput.into_values()),
            |x| {
                let t = Tensor::new(vec![4, 6, 3], x.0.clone()).unwrap();
                dot(conv_1xk(&t, &p).unwrap().values(), &probe)
            },
            cfg,
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn pool_examples_and_gradient() {
        let x = Tensor::new(vec![2, 1, 4], vec![1.0, 2.0, 3.0, 6.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        let y = cross_channel_avg_pool(&x).unwrap();
        assert_eq!(y.values(), &[3.0, 5.0]);
        assert!(cross_channel_avg_pool(&Tensor::zeros(vec![2, 2, 4]).unwrap()).is_err());

        let probe = [0.7, -1.3];
        let g = cross_channel_avg_pool_backward(&Tensor::new(vec![2, 1], probe.to_vec()).unwrap(), 4).unwrap();
        let report = grad_check(
            &FlatParams(x.values().to_vec()),
            &FlatParams(g.into_values()),
            |v| {
                let t = Tensor::new(vec![2, 1, 4], v.0.clone()).unwrap();
                dot(cross_channel_avg_pool(&t).unwrap().values(), &probe)
            },
            GradCheckConfig {
                tolerance: 1e-6,
                ..Default::default()
            },
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn activation_values_and_derivatives() {
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(2.0), 2.0);
        assert_eq!(relu_derivative(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(tanh(0.0), 0.0);
        let h = 1e-5;
        for &x in &[-4.0, -1.2, -0.3, 0.0, 0.4, 2.5, 6.0] {
            let fd = (sigmoid(x + h) - sigmoid(x - h)) / (2.0 * h);
            assert!((fd - sigmoid_derivative(x)).abs() < 1e-8, "sigmoid at {x}");
            let fd = (tanh(x + h) - tanh(x - h)) / (2.0 * h);
            assert!((fd - tanh_derivative(x)).abs() < 1e-8, "tanh at {x}");
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn lstm_zero_weights() {
        let p = LstmParams::zeros(3, 2).unwrap();
        let c_prev = [0.4, -1.0, 2.0];
        let (h, c) = lstm_cell_step(&[1.0, -2.0], &[0.3, 0.1, -0.2], &c_prev, &p).unwrap();
        for u in 0..3 {
            assert!((c[u] - 0.5 * c_prev[u]).abs() < 1e-15);
            assert!((h[u] - 0.5 * (0.5 * c_prev[u]).tanh()).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut q = LstmParams::init(3, 2, &mut rng).unwrap();
        q.w_c.fill(0.0);
        q.b_c.fill(0.0);
        let (h, c) = lstm_cell_step(&[1.0, -2.0], &[0.3, 0.1, -0.2], &[0.0; 3], &q).unwrap();
        assert!(h.iter().chain(&c).all(|v| *v == 0.0));
        assert!(matches!(
            lstm_cell_step(&[1.0], &[0.0; 3], &[0.0; 3], &q),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn lstm_bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (hd, inp, batch, steps) = (4, 3, 2, 5);
        let p = LstmParams::init(hd, inp, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..steps).map(|_| randn(&mut rng, batch * inp)).collect();
        let probe = randn(&mut rng, batch * hd);
        let run = |q: &LstmParams, xs: &[Vec<f64>]| {
            let (hs, _) = lstm_sequence_forward(xs, batch, q).unwrap();
            dot(hs.last().unwrap(), &probe)
        };
        let (_, caches) = lstm_sequence_forward(&xs, batch, &p).unwrap();
        let mut grads = zeros_like(&p);
        let dxs = lstm_sequence_backward(&caches, &probe, &p, &mut grads).unwrap();
        let cfg = GradCheckConfig {
            tolerance: 1e-5,
            ..Default::default()
        };
        let report = grad_check(&p, &grads, |q| run(q, &xs), cfg);
        assert!(report.passed(), "{report}");

        let flat = FlatParams(xs.concat());
        let report = grad_check(
            &flat,
            &FlatParams(dxs.concat()),
            |f| {
                let xs: Vec<Vec<f64>> = f.0.chunks(batch * inp).map(<[f64]>::to_vec).collect();
                run(&p, &xs)
            },
            cfg,
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn dense_examples_and_gradient() {
        let id = DenseParams::identity(3).unwrap();
        assert_eq!(dense(&[1.0, -2.0, 3.0], &id, false).unwrap(), vec![1.0, -2.0, 3.0]);
        let p = DenseParams {
            inputs: 2,
            outputs: 1,
            weight: vec![1.0, 1.0],
            bias: vec![0.0],
        };
        assert_eq!(dense(&[2.0, 3.0], &p, false).unwrap(), vec![5.0]);
        assert!(dense(&[2.0], &p, false).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for relu_act in [false, true] {
            let q = DenseParams::init(4, 5, &mut rng).unwrap();
            let x = randn(&mut rng, 3 * 5);
            let probe = randn(&mut rng, 3 * 4);
            let out = dense_forward(&x, 3, &q, relu_act).unwrap();
            let mut grads = zeros_like(&q);
            let dx = dense_backward(&x, &out, &probe, 3, &q, relu_act, &mut grads).unwrap();
            let cfg = GradCheckConfig {
                tolerance: 1e-7,
                ..Default::default()
            };
            let f = |w: &DenseParams| dot(&dense_forward(&x, 3, w, relu_act).unwrap(), &probe);
            assert!(grad_check(&q, &grads, f, cfg).passed());
            let g = |v: &FlatParams| dot(&dense_forward(&v.0, 3, &q, relu_act).unwrap(), &probe);
            assert!(grad_check(&FlatParams(x.clone()), &FlatParams(dx), g, cfg).passed());
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        let (l, g) = mse_loss(&[3.0], &[1.0]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g, vec![4.0]);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
        let target = [0.5, -1.0, 2.0];
        let pred = vec![1.5, 0.25, -0.5];
        let (_, g) = mse_loss(&pred, &target).unwrap();
        let report = grad_check(
            &FlatParams(pred),
            &FlatParams(g),
            |p| mse_loss(&p.0, &target).unwrap().0,
            GradCheckConfig {
                tolerance: 1e-9,
                ..Default::default()
            },
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn adam_zero_gradient_and_hand_step() {
        let mut p = FlatParams(vec![1.0, -2.0]);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &FlatParams(vec![0.0, 0.0]), &mut st).unwrap();
        assert_eq!(p.0, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);

        // Second step from a known state, evaluated by hand:
        // m = 0.9·0.05 + 0.1·0.5 = 0.095, v = 0.999·0.0025 + 0.001·0.25 = 0.0027475
        // m̂ = 0.095/(1−0.81) = 0.5, v̂ = 0.0027475/(1−0.998001) = 1.374437...
        let mut q = FlatParams(vec![2.0]);
        let mut st = OptimizerState {
            config: AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            step: 1,
            m: vec![vec![0.05]],
            v: vec![vec![0.0025]],
        };
        adam_step(&mut q, &FlatParams(vec![0.5]), &mut st).unwrap();
        let vhat: f64 = 0.0027475 / (1.0 - 0.999f64 * 0.999);
        let expected = 2.0 - 0.1 * 0.5 / (vhat.sqrt() + 1e-8);
        assert!((q.0[0] - expected).abs() < 1e-14);
        assert!((q.0[0] - (2.0 - 0.1 * 0.5 / 1.172363)).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_non_finite_and_is_deterministic() {
        let mut p = ConvParams::zeros(2, 1, 2).unwrap();
        let mut g = zeros_like(&p);
        g.bias[1] = f64::NAN;
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &g, &mut st).unwrap_err();
        assert!(err.to_string().contains("bias[1]"), "{err}");
        assert_eq!(st.step, 0);

        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut p = DenseParams::init(3, 3, &mut rng).unwrap();
            let mut st = OptimizerState::new(&p, AdamConfig::default());
            for _ in 0..10 {
                let mut g = p.clone();
                scale_in_place(&mut g, 0.3);
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_linear_and_corrupted() {
        let x = [0.5, -1.5, 2.0, 3.0];
        let w = FlatParams(vec![0.1, 0.2, -0.3, 0.4]);
        let report = grad_check(&w, &FlatParams(x.to_vec()), |p| dot(&p.0, &x), GradCheckConfig::default());
        assert!(report.max_rel_error() < 1e-9);

        let flipped = FlatParams(x.iter().map(|v| -v).collect());
        let report = grad_check(&w, &flipped, |p| dot(&p.0, &x), GradCheckConfig::default());
        assert!(report.max_rel_error() > 0.1);
        assert!(!report.passed());
    }

    #[test]
    fn grad_check_skips_kinks_but_not_wrong_gradients() {
        // relu(w0) + 2·w1 with w0 inside the finite-difference step of the kink
        let w = FlatParams(vec![3e-6, 0.5]);
        let f = |p: &FlatParams| relu(p.0[0]) + 2.0 * p.0[1];
        let report = grad_check(&w, &FlatParams(vec![1.0, 2.0]), f, GradCheckConfig::default());
        assert_eq!(report.blocks[0].skipped_nonsmooth, 1);
        assert_eq!(report.blocks[0].checked, 1);
        assert!(report.passed(), "{report}");
        let report = grad_check(&w, &FlatParams(vec![1.0, 3.0]), f, GradCheckConfig::default());
        assert!(!report.passed());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = FlatParams(vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = FlatParams(vec![0.3, 0.4]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.0, vec![0.3, 0.4]);
    }
}
