//! The discriminative half: a stacked two-layer LSTM plus two feed-forward
//! heads. The predictor head (P-ANN) emits a per-window score estimate, the
//! attention head (A-ANN) emits a per-window logit; the final prediction is
//! the attention-softmax-weighted average of the per-window estimates.
//!
//! Gradients are hand-derived for this fixed architecture (full
//! backpropagation through time, both heads, and the softmax coupling) and
//! flow to every weight and to the input loadings. Missing scores drop out of
//! the loss and its gradient.

use crate::error::{Error, Result};
use crate::io::ScoreVector;
use crate::linalg::Mat;
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Gate packing order within the 4H-row LSTM weight blocks:
/// input, forget, cell candidate, output.
const GATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Input width per window (K loadings, or P for graph-feature baselines).
    pub input: usize,
    /// LSTM hidden width per layer.
    pub lstm_hidden: usize,
    /// Hidden width of the two fully-connected layers in each head.
    pub ann_hidden: usize,
    /// Number of predicted scores M.
    pub outputs: usize,
}

impl NetConfig {
    pub fn standard(input: usize, outputs: usize) -> Self {
        NetConfig {
            input,
            lstm_hidden: 40,
            ann_hidden: 40,
            outputs,
        }
    }

    /// Wide variant used by the betweenness-centrality baseline.
    pub fn wide(input: usize, outputs: usize) -> Self {
        NetConfig {
            input,
            lstm_hidden: 200,
            ann_hidden: 200,
            outputs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmLayer {
    /// 4H x input
    pub w: Mat,
    /// 4H x H
    pub u: Mat,
    /// 4H
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Mat,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub cfg: NetConfig,
    pub lstm: Vec<LstmLayer>,
    /// Two ReLU hidden layers then a linear output of width M.
    pub pann: Vec<Dense>,
    /// Two ReLU hidden layers then a scalar linear output.
    pub aann: Vec<Dense>,
}

fn uniform_mat(rows: usize, cols: usize, fan_in: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    let bound = scale / (fan_in as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

impl PredictorParams {
    /// Seeded init: uniform weights scaled by 1/sqrt(fan-in), forget-gate
    /// bias 1 for gradient flow, other biases 0. `scale` multiplies the
    /// weight range (1.0 for training; the synthetic generator uses a larger
    /// gain so generated scores have usable spread).
    pub fn init(cfg: NetConfig, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.lstm_hidden;
        let mut lstm = Vec::with_capacity(2);
        for layer in 0..2 {
            let input = if layer == 0 { cfg.input } else { h };
            let w = uniform_mat(GATES * h, input, input, scale, &mut rng);
            let u = uniform_mat(GATES * h, h, h, scale, &mut rng);
            let mut b = Array1::zeros(GATES * h);
            for j in h..2 * h {
                b[j] = 1.0; // forget gate
            }
            lstm.push(LstmLayer { w, u, b });
        }
        let head = |outputs: usize, rng: &mut ChaCha8Rng| -> Vec<Dense> {
            vec![
                Dense {
                    w: uniform_mat(cfg.ann_hidden, h, h, scale, rng),
                    b: Array1::zeros(cfg.ann_hidden),
                },
                Dense {
                    w: uniform_mat(cfg.ann_hidden, cfg.ann_hidden, cfg.ann_hidden, scale, rng),
                    b: Array1::zeros(cfg.ann_hidden),
                },
                Dense {
                    w: uniform_mat(outputs, cfg.ann_hidden, cfg.ann_hidden, scale, rng),
                    b: Array1::zeros(outputs),
                },
            ]
        };
        let pann = head(cfg.outputs, &mut rng);
        let aann = head(1, &mut rng);
        PredictorParams {
            cfg,
            lstm,
            pann,
            aann,
        }
    }

    pub fn zeros(cfg: NetConfig) -> Self {
        let mut p = Self::init(cfg, 0, 0.0);
        for t in p.tensors_mut() {
            for v in t {
                *v = 0.0;
            }
        }
        p
    }

    /// All parameter tensors as flat slices, in a fixed order (LSTM layers,
    /// then P-ANN, then A-ANN). The order is part of the checkpoint layout.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.lstm {
            out.push(l.w.as_slice().unwrap());
            out.push(l.u.as_slice().unwrap());
            out.push(l.b.as_slice().unwrap());
        }
        for d in self.pann.iter().chain(self.aann.iter()) {
            out.push(d.w.as_slice().unwrap());
            out.push(d.b.as_slice().unwrap());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.lstm {
            out.push(l.w.as_slice_mut().unwrap());
            out.push(l.u.as_slice_mut().unwrap());
            out.push(l.b.as_slice_mut().unwrap());
        }
        for d in self.pann.iter_mut().chain(self.aann.iter_mut()) {
            out.push(d.w.as_slice_mut().unwrap());
            out.push(d.b.as_slice_mut().unwrap());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Gradients share the parameter layout.
pub type PredictorGrads = PredictorParams;

#[derive(Debug, Clone)]
struct LstmStepCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    tanh_c: Array1<f64>,
}

#[derive(Debug, Clone)]
struct HeadStepCache {
    a1: Array1<f64>,
    a2: Array1<f64>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    lstm: Vec<Vec<LstmStepCache>>, // [layer][t]
    pann: Vec<HeadStepCache>,
    aann: Vec<HeadStepCache>,
}

/// Everything a forward pass produces, including what backward needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Top-layer hidden states, T x H.
    pub hidden: Mat,
    /// Per-window score estimates, T x M.
    pub step_preds: Mat,
    /// A-ANN outputs before the softmax, length T.
    pub logits: Array1<f64>,
    /// Softmax attention weights: positive, sum to 1.
    pub attention: Array1<f64>,
    /// Attention-weighted final prediction, length M.
    pub final_pred: Array1<f64>,
    cache: ForwardCache,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mv_add(out: &mut [f64], a: &Mat, x: &[f64]) {
    let s = a.as_slice().unwrap();
    let (r, c) = a.dim();
    for i in 0..r {
        let row = &s[i * c..(i + 1) * c];
        let mut acc = 0.0;
        for j in 0..c {
            acc += row[j] * x[j];
        }
        out[i] += acc;
    }
}

/// out += Aᵀ x, row-major friendly
fn mv_t_add(out: &mut [f64], a: &Mat, x: &[f64]) {
    let s = a.as_slice().unwrap();
    let (r, c) = a.dim();
    debug_assert_eq!(x.len(), r);
    for i in 0..r {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        let row = &s[i * c..(i + 1) * c];
        for j in 0..c {
            out[j] += row[j] * xi;
        }
    }
}

/// target += col ⊗ row
fn outer_add(target: &mut Mat, col: &[f64], row: &[f64]) {
    let t = target.as_slice_mut().unwrap();
    let cols = row.len();
    for (i, &ci) in col.iter().enumerate() {
        if ci == 0.0 {
            continue;
        }
        let base = i * cols;
        for (j, &rj) in row.iter().enumerate() {
            t[base + j] += ci * rj;
        }
    }
}

fn mlp_forward(layers: &[Dense], x: &[f64]) -> (Array1<f64>, HeadStepCache) {
    let mut a1 = layers[0].b.clone();
    mv_add(a1.as_slice_mut().unwrap(), &layers[0].w, x);
    a1.mapv_inplace(|v| v.max(0.0));
    let mut a2 = layers[1].b.clone();
    mv_add(a2.as_slice_mut().unwrap(), &layers[1].w, a1.as_slice().unwrap());
    a2.mapv_inplace(|v| v.max(0.0));
    let mut out = layers[2].b.clone();
    mv_add(out.as_slice_mut().unwrap(), &layers[2].w, a2.as_slice().unwrap());
    (out, HeadStepCache { a1, a2 })
}

/// Accumulates layer gradients and adds dL/dx into `dx`.
fn mlp_backward(
    layers: &[Dense],
    grads: &mut [Dense],
    cache: &HeadStepCache,
    x: &[f64],
    dout: &[f64],
    dx: &mut [f64],
) {
    let a1 = cache.a1.as_slice().unwrap();
    let a2 = cache.a2.as_slice().unwrap();
    outer_add(&mut grads[2].w, dout, a2);
    for (b, &d) in grads[2].b.iter_mut().zip(dout) {
        *b += d;
    }
    let mut dz2 = vec![0.0f64; a2.len()];
    mv_t_add(&mut dz2, &layers[2].w, dout);
    for j in 0..dz2.len() {
        if a2[j] <= 0.0 {
            dz2[j] = 0.0;
        }
    }
    outer_add(&mut grads[1].w, &dz2, a1);
    for (b, &d) in grads[1].b.iter_mut().zip(&dz2) {
        *b += d;
    }
    let mut dz1 = vec![0.0f64; a1.len()];
    mv_t_add(&mut dz1, &layers[1].w, &dz2);
    for j in 0..dz1.len() {
        if a1[j] <= 0.0 {
            dz1[j] = 0.0;
        }
    }
    outer_add(&mut grads[0].w, &dz1, x);
    for (b, &d) in grads[0].b.iter_mut().zip(&dz1) {
        *b += d;
    }
    mv_t_add(dx, &layers[0].w, &dz1);
}

/// Run the LSTM and both heads over a loading track (T x K rows in time
/// order). Supports any T >= 1; attention is the softmax over the T attention
/// logits.
pub fn forward(params: &PredictorParams, track: &Mat) -> Result<ForwardTrace> {
    let t_n = track.nrows();
    if t_n == 0 {
        return Err(Error::contract("forward: empty track"));
    }
    if track.ncols() != params.cfg.input {
        return Err(Error::dim(format!(
            "forward: track width {} != network input {}",
            track.ncols(),
            params.cfg.input
        )));
    }
    let h_w = params.cfg.lstm_hidden;
    let m = params.cfg.outputs;

    let mut lstm_cache: Vec<Vec<LstmStepCache>> = vec![Vec::with_capacity(t_n), Vec::with_capacity(t_n)];
    let mut hidden = Mat::zeros((t_n, h_w));
    let mut layer_input: Vec<Array1<f64>> = (0..t_n).map(|t| track.row(t).to_owned()).collect();
    let mut z = vec![0.0f64; GATES * h_w];

    for (layer_idx, layer) in params.lstm.iter().enumerate() {
        let mut h: Array1<f64> = Array1::zeros(h_w);
        let mut c: Array1<f64> = Array1::zeros(h_w);
        let mut next_input = Vec::with_capacity(t_n);
        for (t, x) in layer_input.iter().enumerate() {
            z.copy_from_slice(layer.b.as_slice().unwrap());
            mv_add(&mut z, &layer.w, x.as_slice().unwrap());
            mv_add(&mut z, &layer.u, h.as_slice().unwrap());
            let mut gi = Array1::zeros(h_w);
            let mut gf = Array1::zeros(h_w);
            let mut gg = Array1::zeros(h_w);
            let mut go = Array1::zeros(h_w);
            let mut c_new = Array1::zeros(h_w);
            let mut tanh_c = Array1::zeros(h_w);
            let mut h_new = Array1::zeros(h_w);
            let mut finite = true;
            for j in 0..h_w {
                gi[j] = sigmoid(z[j]);
                gf[j] = sigmoid(z[h_w + j]);
                gg[j] = z[2 * h_w + j].tanh();
                go[j] = sigmoid(z[3 * h_w + j]);
                c_new[j] = gf[j] * c[j] + gi[j] * gg[j];
                tanh_c[j] = c_new[j].tanh();
                h_new[j] = go[j] * tanh_c[j];
                finite &= h_new[j].is_finite();
            }
            if !finite {
                return Err(Error::numeric(format!(
                    "forward: non-finite hidden state at layer {layer_idx}, step {t}"
                )));
            }
            lstm_cache[layer_idx].push(LstmStepCache {
                x: x.clone(),
                h_prev: h.clone(),
                c_prev: c.clone(),
                i: gi,
                f: gf,
                g: gg,
                o: go,
                tanh_c,
            });
            h = h_new;
            c = c_new;
            next_input.push(h.clone());
        }
        layer_input = next_input;
    }
    for (t, h) in layer_input.iter().enumerate() {
        hidden.row_mut(t).assign(h);
    }

    let mut step_preds = Mat::zeros((t_n, m));
    let mut logits = Array1::zeros(t_n);
    let mut pann_cache = Vec::with_capacity(t_n);
    let mut aann_cache = Vec::with_capacity(t_n);
    {
        let hidden_s = hidden.as_slice().unwrap();
        for t in 0..t_n {
            let h_t = &hidden_s[t * h_w..(t + 1) * h_w];
            let (pred, pc) = mlp_forward(&params.pann, h_t);
            let (logit, ac) = mlp_forward(&params.aann, h_t);
            step_preds.row_mut(t).assign(&pred);
            logits[t] = logit[0];
            pann_cache.push(pc);
            aann_cache.push(ac);
        }
    }
    if logits.iter().any(|v| !v.is_finite()) || step_preds.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("forward: non-finite head output"));
    }

    let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut attention = logits.mapv(|z| (z - max_logit).exp());
    let norm = attention.sum();
    attention /= norm;

    let mut final_pred = Array1::zeros(m);
    for t in 0..t_n {
        for j in 0..m {
            final_pred[j] += attention[t] * step_preds[[t, j]];
        }
    }

    Ok(ForwardTrace {
        hidden,
        step_preds,
        logits,
        attention,
        final_pred,
        cache: ForwardCache {
            lstm: lstm_cache,
            pann: pann_cache,
            aann: aann_cache,
        },
    })
}

/// Squared-error loss over observed scores only; unobserved entries
/// contribute nothing to the loss or its gradient.
pub fn masked_mse(trace: &ForwardTrace, scores: &ScoreVector) -> f64 {
    if scores.all_unobserved() {
        log::warn!("masked_mse: subject {} has no observed scores", scores.subject_id);
        return 0.0;
    }
    let mut loss = 0.0;
    for (j, &obs) in scores.observed.iter().enumerate() {
        if obs {
            let e = trace.final_pred[j] - scores.y[j];
            loss += e * e;
        }
    }
    loss
}

/// Gradients of `masked_mse` with respect to every parameter and every input
/// row of the track. Runs its own forward pass.
pub fn backward(
    params: &PredictorParams,
    track: &Mat,
    scores: &ScoreVector,
) -> Result<(f64, PredictorGrads, Mat)> {
    let trace = forward(params, track)?;
    let (loss, grads, dinputs) = backward_from_trace(params, track, scores, &trace);
    Ok((loss, grads, dinputs))
}

/// Backward using an existing trace (avoids the duplicate forward when the
/// caller already has one).
pub fn backward_from_trace(
    params: &PredictorParams,
    track: &Mat,
    scores: &ScoreVector,
    trace: &ForwardTrace,
) -> (f64, PredictorGrads, Mat) {
    let t_n = track.nrows();
    let h_w = params.cfg.lstm_hidden;
    let m = params.cfg.outputs;
    let loss = masked_mse(trace, scores);
    let mut grads = PredictorParams::zeros(params.cfg);

    // dL/dŷ over observed entries
    let mut dfinal = vec![0.0f64; m];
    for j in 0..m {
        if scores.observed[j] {
            dfinal[j] = 2.0 * (trace.final_pred[j] - scores.y[j]);
        }
    }

    // attention coupling: ŷ = Σ_t a_t ŷ_t, a = softmax(z)
    let mut datt = vec![0.0f64; t_n];
    for t in 0..t_n {
        let mut dot = 0.0;
        for j in 0..m {
            dot += dfinal[j] * trace.step_preds[[t, j]];
        }
        datt[t] = dot;
    }
    let weighted: f64 = (0..t_n).map(|t| trace.attention[t] * datt[t]).sum();

    // heads, accumulating dL/dh per step
    let mut dhidden = Mat::zeros((t_n, h_w));
    {
        let hidden_s = trace.hidden.as_slice().unwrap();
        let dhidden_s = dhidden.as_slice_mut().unwrap();
        let mut dpred = vec![0.0f64; m];
        for t in 0..t_n {
            let h_t = &hidden_s[t * h_w..(t + 1) * h_w];
            let dx = &mut dhidden_s[t * h_w..(t + 1) * h_w];
            for j in 0..m {
                dpred[j] = dfinal[j] * trace.attention[t];
            }
            mlp_backward(&params.pann, &mut grads.pann, &trace.cache.pann[t], h_t, &dpred, dx);
            let dlogit = trace.attention[t] * (datt[t] - weighted);
            mlp_backward(&params.aann, &mut grads.aann, &trace.cache.aann[t], h_t, &[dlogit], dx);
        }
    }

    // BPTT, top layer first; its input gradients replace the per-step output
    // gradients seen by the lower layer
    let mut dinputs = Mat::zeros((t_n, params.cfg.input));
    let mut dh = vec![0.0f64; h_w];
    let mut dz = vec![0.0f64; GATES * h_w];
    for layer_idx in (0..2).rev() {
        let layer = &params.lstm[layer_idx];
        let cache = &trace.cache.lstm[layer_idx];
        let gl = &mut grads.lstm[layer_idx];
        let in_w = layer.w.ncols();
        let mut dh_next = vec![0.0f64; h_w];
        let mut dc_next = vec![0.0f64; h_w];
        let mut dx = vec![0.0f64; in_w];
        for t in (0..t_n).rev() {
            let sc = &cache[t];
            {
                let drow = dhidden.row(t);
                let i = sc.i.as_slice().unwrap();
                let f = sc.f.as_slice().unwrap();
                let g = sc.g.as_slice().unwrap();
                let o = sc.o.as_slice().unwrap();
                let tc = sc.tanh_c.as_slice().unwrap();
                let cp = sc.c_prev.as_slice().unwrap();
                for j in 0..h_w {
                    dh[j] = drow[j] + dh_next[j];
                    let d_o = dh[j] * tc[j];
                    let dc = dc_next[j] + dh[j] * o[j] * (1.0 - tc[j] * tc[j]);
                    let d_i = dc * g[j];
                    let d_f = dc * cp[j];
                    let d_g = dc * i[j];
                    dc_next[j] = dc * f[j];
                    dz[j] = d_i * i[j] * (1.0 - i[j]);
                    dz[h_w + j] = d_f * f[j] * (1.0 - f[j]);
                    dz[2 * h_w + j] = d_g * (1.0 - g[j] * g[j]);
                    dz[3 * h_w + j] = d_o * o[j] * (1.0 - o[j]);
                }
            }
            outer_add(&mut gl.w, &dz, sc.x.as_slice().unwrap());
            outer_add(&mut gl.u, &dz, sc.h_prev.as_slice().unwrap());
            for (b, &d) in gl.b.iter_mut().zip(&dz) {
                *b += d;
            }
            dx.iter_mut().for_each(|v| *v = 0.0);
            mv_t_add(&mut dx, &layer.w, &dz);
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            mv_t_add(&mut dh_next, &layer.u, &dz);
            if layer_idx == 1 {
                // becomes the lower layer's per-step output gradient
                for (o, &v) in dhidden.row_mut(t).iter_mut().zip(&dx) {
                    *o = v;
                }
            } else {
                for (o, &v) in dinputs.row_mut(t).iter_mut().zip(&dx) {
                    *o = v;
                }
            }
        }
    }

    (loss, grads, dinputs)
}

fn mlp_backward_dx_only(layers: &[Dense], cache: &HeadStepCache, dout: &[f64], dx: &mut [f64]) {
    let a1 = cache.a1.as_slice().unwrap();
    let a2 = cache.a2.as_slice().unwrap();
    let mut dz2 = vec![0.0f64; a2.len()];
    mv_t_add(&mut dz2, &layers[2].w, dout);
    for j in 0..dz2.len() {
        if a2[j] <= 0.0 {
            dz2[j] = 0.0;
        }
    }
    let mut dz1 = vec![0.0f64; a1.len()];
    mv_t_add(&mut dz1, &layers[1].w, &dz2);
    for j in 0..dz1.len() {
        if a1[j] <= 0.0 {
            dz1[j] = 0.0;
        }
    }
    mv_t_add(dx, &layers[0].w, &dz1);
}

/// Gradient of the loss with respect to the inputs only. Skips all parameter
/// gradient accumulation; the loading update step calls this many times per
/// main iteration.
pub fn input_gradients(params: &PredictorParams, track: &Mat, scores: &ScoreVector, trace: &ForwardTrace) -> Mat {
    let t_n = track.nrows();
    let h_w = params.cfg.lstm_hidden;
    let m = params.cfg.outputs;
    let mut dfinal = vec![0.0f64; m];
    for j in 0..m {
        if scores.observed[j] {
            dfinal[j] = 2.0 * (trace.final_pred[j] - scores.y[j]);
        }
    }
    let mut datt = vec![0.0f64; t_n];
    for t in 0..t_n {
        let mut dot = 0.0;
        for j in 0..m {
            dot += dfinal[j] * trace.step_preds[[t, j]];
        }
        datt[t] = dot;
    }
    let weighted: f64 = (0..t_n).map(|t| trace.attention[t] * datt[t]).sum();

    let mut dhidden = Mat::zeros((t_n, h_w));
    {
        let dhidden_s = dhidden.as_slice_mut().unwrap();
        let mut dpred = vec![0.0f64; m];
        for t in 0..t_n {
            let dx = &mut dhidden_s[t * h_w..(t + 1) * h_w];
            for j in 0..m {
                dpred[j] = dfinal[j] * trace.attention[t];
            }
            mlp_backward_dx_only(&params.pann, &trace.cache.pann[t], &dpred, dx);
            let dlogit = trace.attention[t] * (datt[t] - weighted);
            mlp_backward_dx_only(&params.aann, &trace.cache.aann[t], &[dlogit], dx);
        }
    }

    let mut dinputs = Mat::zeros((t_n, params.cfg.input));
    let mut dh = vec![0.0f64; h_w];
    let mut dz = vec![0.0f64; GATES * h_w];
    for layer_idx in (0..2).rev() {
        let layer = &params.lstm[layer_idx];
        let cache = &trace.cache.lstm[layer_idx];
        let in_w = layer.w.ncols();
        let mut dh_next = vec![0.0f64; h_w];
        let mut dc_next = vec![0.0f64; h_w];
        let mut dx = vec![0.0f64; in_w];
        for t in (0..t_n).rev() {
            let sc = &cache[t];
            {
                let drow = dhidden.row(t);
                let i = sc.i.as_slice().unwrap();
                let f = sc.f.as_slice().unwrap();
                let g = sc.g.as_slice().unwrap();
                let o = sc.o.as_slice().unwrap();
                let tc = sc.tanh_c.as_slice().unwrap();
                let cp = sc.c_prev.as_slice().unwrap();
                for j in 0..h_w {
                    dh[j] = drow[j] + dh_next[j];
                    let d_o = dh[j] * tc[j];
                    let dc = dc_next[j] + dh[j] * o[j] * (1.0 - tc[j] * tc[j]);
                    let d_i = dc * g[j];
                    let d_f = dc * cp[j];
                    let d_g = dc * i[j];
                    dc_next[j] = dc * f[j];
                    dz[j] = d_i * i[j] * (1.0 - i[j]);
                    dz[h_w + j] = d_f * f[j] * (1.0 - f[j]);
                    dz[2 * h_w + j] = d_g * (1.0 - g[j] * g[j]);
                    dz[3 * h_w + j] = d_o * o[j] * (1.0 - o[j]);
                }
            }
            dx.iter_mut().for_each(|v| *v = 0.0);
            mv_t_add(&mut dx, &layer.w, &dz);
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            mv_t_add(&mut dh_next, &layer.u, &dz);
            if layer_idx == 1 {
                for (out, &v) in dhidden.row_mut(t).iter_mut().zip(&dx) {
                    *out = v;
                }
            } else {
                for (out, &v) in dinputs.row_mut(t).iter_mut().zip(&dx) {
                    *out = v;
                }
            }
        }
    }
    dinputs
}

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new_for(params: &PredictorParams) -> Self {
        Self::with_shapes(params.tensors().iter().map(|t| t.len()).collect())
    }

    pub fn with_shapes(lens: Vec<usize>) -> Self {
        AdamState {
            m: lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: lens.iter().map(|&l| vec![0.0; l]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One ADAM update over a list of flat parameter/gradient slices. Uses
    /// the folded bias correction `lr_t = lr * sqrt(1-β₂ᵗ) / (1-β₁ᵗ)`.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let lr_t = lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        for (idx, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= lr_t * m[j] / (v[j].sqrt() + self.eps);
            }
        }
    }
}

/// ADAM update of the predictor parameters.
pub fn adam_step(params: &mut PredictorParams, grads: &PredictorGrads, state: &mut AdamState, lr: f64) {
    let mut p = params.tensors_mut();
    let g = grads.tensors();
    state.step_slices(&mut p, &g, lr);
}

/// Optional global gradient-norm clipping (off by default; a CLI flag turns
/// it on for long sequences).
pub fn clip_grad_norm(grads: &mut PredictorGrads, max_norm: f64) {
    let norm: f64 = grads.tensors().iter().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            for v in t {
                *v *= scale;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainNetOpts {
    pub epochs: usize,
    pub lr0: f64,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainNetOpts {
    fn default() -> Self {
        TrainNetOpts {
            epochs: 50,
            lr0: 1e-4,
            decay: 0.95,
            decay_every: 5,
            clip_norm: None,
            seed: 0,
        }
    }
}

/// Sequential per-subject ADAM training (batch size 1) in a seeded shuffled
/// order. Returns the mean training loss per epoch.
pub fn train_network(
    params: &mut PredictorParams,
    tracks: &[Mat],
    scores: &[ScoreVector],
    opts: &TrainNetOpts,
) -> Result<Vec<f64>> {
    if tracks.is_empty() {
        return Err(Error::contract("train_network: no subjects"));
    }
    if tracks.len() != scores.len() {
        return Err(Error::dim("train_network: tracks/scores length mismatch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamState::new_for(params);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    for epoch in 0..opts.epochs {
        let lr = opts.lr0 * opts.decay.powi((epoch / opts.decay_every.max(1)) as i32);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &idx in &order {
            let (loss, mut grads, _) = backward(params, &tracks[idx], &scores[idx])?;
            if let Some(max_norm) = opts.clip_norm {
                clip_grad_norm(&mut grads, max_norm);
            }
            adam_step(params, &grads, &mut adam, lr);
            total += loss;
        }
        history.push(total / tracks.len() as f64);
    }
    Ok(history)
}
