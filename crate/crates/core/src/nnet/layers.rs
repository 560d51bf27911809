//! Hand-rolled layers with explicit forward caches and backward passes.
//! Frame tensors are channels x time (`Mat`); batches are `Vec<Mat>` until
//! pooling collapses them into one rows-are-samples `Mat`.
//!
//! Parallel sections reduce in fixed sample order, so outputs and gradients
//! are identical for any rayon worker count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::mat::Mat;

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub w: Vec<f64>,
    pub g: Vec<f64>,
}

impl Param {
    pub fn zeros(n: usize) -> Self {
        Param {
            w: vec![0.0; n],
            g: vec![0.0; n],
        }
    }

    pub fn uniform(n: usize, limit: f64, rng: &mut ChaCha8Rng) -> Self {
        Param {
            w: (0..n).map(|_| rng.gen_range(-limit..limit)).collect(),
            g: vec![0.0; n],
        }
    }

    pub fn clear_grad(&mut self) {
        for g in &mut self.g {
            *g = 0.0;
        }
    }
}

pub const VAR_FLOOR: f64 = 1e-10;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------------------
// dilated 1-D convolution, zero same-padding
// ---------------------------------------------------------------------------

pub struct Conv1d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: Param,
    pub bias: Param,
    cache_x: Vec<Mat>,
}

impl Conv1d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let limit = (6.0 / (c_in * kernel) as f64).sqrt();
        Conv1d {
            c_in,
            c_out,
            kernel,
            dilation,
            weight: Param::uniform(c_in * c_out * kernel, limit, rng),
            bias: Param::zeros(c_out),
            cache_x: Vec::new(),
        }
    }

    /// Receptive field width: (kernel - 1) * dilation + 1.
    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    fn pad_left(&self) -> isize {
        (((self.kernel - 1) * self.dilation) / 2) as isize
    }

    fn forward_one(&self, x: &Mat) -> Mat {
        let t_len = x.cols;
        let mut y = Mat::zeros(self.c_out, t_len);
        let pad = self.pad_left();
        for co in 0..self.c_out {
            let b = self.bias.w[co];
            {
                let yrow = y.row_mut(co);
                for v in yrow.iter_mut() {
                    *v = b;
                }
            }
            for ci in 0..self.c_in {
                for j in 0..self.kernel {
                    let w = self.weight.w[(co * self.c_in + ci) * self.kernel + j];
                    if w == 0.0 {
                        continue;
                    }
                    let off = (j * self.dilation) as isize - pad;
                    let t0 = (-off).max(0) as usize;
                    let t1 = ((t_len as isize - off).min(t_len as isize)).max(0) as usize;
                    let xrow = x.row(ci);
                    let yrow = y.row_mut(co);
                    for t in t0..t1 {
                        yrow[t] += w * xrow[(t as isize + off) as usize];
                    }
                }
            }
        }
        y
    }

    pub fn forward(&mut self, xs: &[Mat], train: bool) -> Vec<Mat> {
        let ys: Vec<Mat> = xs.par_iter().map(|x| self.forward_one(x)).collect();
        if train {
            self.cache_x = xs.to_vec();
        }
        ys
    }

    pub fn backward(&mut self, gys: &[Mat]) -> Vec<Mat> {
        let pad = self.pad_left();
        let results: Vec<(Mat, Vec<f64>, Vec<f64>)> = self
            .cache_x
            .par_iter()
            .zip(gys.par_iter())
            .map(|(x, gy)| {
                let t_len = x.cols;
                let mut dx = Mat::zeros(self.c_in, t_len);
                let mut dw = vec![0.0f64; self.weight.w.len()];
                let mut db = vec![0.0f64; self.c_out];
                for co in 0..self.c_out {
                    let gyrow = gy.row(co);
                    db[co] += gyrow.iter().sum::<f64>();
                    for ci in 0..self.c_in {
                        let xrow = x.row(ci);
                        for j in 0..self.kernel {
                            let off = (j * self.dilation) as isize - pad;
                            let t0 = (-off).max(0) as usize;
                            let t1 = ((t_len as isize - off).min(t_len as isize)).max(0) as usize;
                            let w = self.weight.w[(co * self.c_in + ci) * self.kernel + j];
                            let mut grad_w = 0.0;
                            let dxrow = dx.row_mut(ci);
                            for t in t0..t1 {
                                let s = (t as isize + off) as usize;
                                grad_w += gyrow[t] * xrow[s];
                                dxrow[s] += w * gyrow[t];
                            }
                            dw[(co * self.c_in + ci) * self.kernel + j] += grad_w;
                        }
                    }
                }
                (dx, dw, db)
            })
            .collect();
        let mut dxs = Vec::with_capacity(results.len());
        for (dx, dw, db) in results {
            for (a, b) in self.weight.g.iter_mut().zip(&dw) {
                *a += b;
            }
            for (a, b) in self.bias.g.iter_mut().zip(&db) {
                *a += b;
            }
            dxs.push(dx);
        }
        self.cache_x.clear();
        dxs
    }
}

// ---------------------------------------------------------------------------
// batch normalization over (batch, time) per channel
// ---------------------------------------------------------------------------

pub struct BatchNorm1d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache_xhat: Vec<Mat>,
    cache_invstd: Vec<f64>,
    cache_count: f64,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            channels,
            gamma: Param {
                w: vec![1.0; channels],
                g: vec![0.0; channels],
            },
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache_xhat: Vec::new(),
            cache_invstd: Vec::new(),
            cache_count: 0.0,
        }
    }

    pub fn forward(&mut self, xs: &[Mat], train: bool) -> Vec<Mat> {
        let c = self.channels;
        if !train {
            let invstd: Vec<f64> = self
                .running_var
                .iter()
                .map(|&v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            return xs
                .par_iter()
                .map(|x| {
                    let mut y = x.clone();
                    for ch in 0..c {
                        let (g, b, m, is) =
                            (self.gamma.w[ch], self.beta.w[ch], self.running_mean[ch], invstd[ch]);
                        for v in y.row_mut(ch) {
                            *v = g * (*v - m) * is + b;
                        }
                    }
                    y
                })
                .collect();
        }
        // batch statistics over all samples and frames, reduced in order
        let partials: Vec<(Vec<f64>, Vec<f64>, f64)> = xs
            .par_iter()
            .map(|x| {
                let mut sum = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for ch in 0..c {
                    for &v in x.row(ch) {
                        sum[ch] += v;
                        sq[ch] += v * v;
                    }
                }
                (sum, sq, x.cols as f64)
            })
            .collect();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0.0f64;
        for (s, q, n) in &partials {
            for ch in 0..c {
                sum[ch] += s[ch];
                sq[ch] += q[ch];
            }
            count += n;
        }
        let mean: Vec<f64> = sum.iter().map(|&s| s / count).collect();
        let var: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(&q, &m)| (q / count - m * m).max(0.0))
            .collect();
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        for ch in 0..c {
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean[ch];
            self.running_var[ch] =
                (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * var[ch];
        }
        let xhats: Vec<Mat> = xs
            .par_iter()
            .map(|x| {
                let mut xh = x.clone();
                for ch in 0..c {
                    let (m, is) = (mean[ch], invstd[ch]);
                    for v in xh.row_mut(ch) {
                        *v = (*v - m) * is;
                    }
                }
                xh
            })
            .collect();
        let ys: Vec<Mat> = xhats
            .par_iter()
            .map(|xh| {
                let mut y = xh.clone();
                for ch in 0..c {
                    let (g, b) = (self.gamma.w[ch], self.beta.w[ch]);
                    for v in y.row_mut(ch) {
                        *v = g * *v + b;
                    }
                }
                y
            })
            .collect();
        self.cache_xhat = xhats;
        self.cache_invstd = invstd;
        self.cache_count = count;
        ys
    }

    pub fn backward(&mut self, gys: &[Mat]) -> Vec<Mat> {
        let c = self.channels;
        let n = self.cache_count;
        // per-channel sums of gy and gy * xhat, fixed-order reduction
        let partials: Vec<(Vec<f64>, Vec<f64>)> = self
            .cache_xhat
            .par_iter()
            .zip(gys.par_iter())
            .map(|(xh, gy)| {
                let mut s_gy = vec![0.0f64; c];
                let mut s_gyx = vec![0.0f64; c];
                for ch in 0..c {
                    for (&g, &x) in gy.row(ch).iter().zip(xh.row(ch)) {
                        s_gy[ch] += g;
                        s_gyx[ch] += g * x;
                    }
                }
                (s_gy, s_gyx)
            })
            .collect();
        let mut sum_gy = vec![0.0f64; c];
        let mut sum_gyx = vec![0.0f64; c];
        for (a, b) in &partials {
            for ch in 0..c {
                sum_gy[ch] += a[ch];
                sum_gyx[ch] += b[ch];
            }
        }
        for ch in 0..c {
            self.beta.g[ch] += sum_gy[ch];
            self.gamma.g[ch] += sum_gyx[ch];
        }
        let dxs: Vec<Mat> = self
            .cache_xhat
            .par_iter()
            .zip(gys.par_iter())
            .map(|(xh, gy)| {
                let mut dx = Mat::zeros(c, xh.cols);
                for ch in 0..c {
                    let scale = self.gamma.w[ch] * self.cache_invstd[ch];
                    let (sg, sgx) = (sum_gy[ch], sum_gyx[ch]);
                    let dxrow = dx.row_mut(ch);
                    for (t, (&g, &x)) in gy.row(ch).iter().zip(xh.row(ch)).enumerate() {
                        dxrow[t] = scale * (g - (sg + x * sgx) / n);
                    }
                }
                dx
            })
            .collect();
        self.cache_xhat.clear();
        dxs
    }
}

// ---------------------------------------------------------------------------
// element-wise ReLU over a batch of frame matrices
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct Relu {
    cache_mask: Vec<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward(&mut self, xs: &[Mat], train: bool) -> Vec<Mat> {
        if train {
            self.cache_mask = xs
                .iter()
                .map(|x| x.data.iter().map(|&v| v > 0.0).collect())
                .collect();
        }
        xs.iter()
            .map(|x| Mat {
                rows: x.rows,
                cols: x.cols,
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
            })
            .collect()
    }

    pub fn backward(&mut self, gys: &[Mat]) -> Vec<Mat> {
        let out = self
            .cache_mask
            .iter()
            .zip(gys)
            .map(|(mask, gy)| Mat {
                rows: gy.rows,
                cols: gy.cols,
                data: gy
                    .data
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { g } else { 0.0 })
                    .collect(),
            })
            .collect();
        self.cache_mask.clear();
        out
    }
}

// ---------------------------------------------------------------------------
// fully connected layer over pooled vectors (rows are samples)
// ---------------------------------------------------------------------------

pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Param,
    pub bias: Param,
    cache_x: Mat,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / d_in as f64).sqrt();
        Linear {
            d_in,
            d_out,
            weight: Param::uniform(d_in * d_out, limit, rng),
            bias: Param::zeros(d_out),
            cache_x: Mat::zeros(0, 0),
        }
    }

    pub fn forward(&mut self, x: &Mat, train: bool) -> Mat {
        debug_assert_eq!(x.cols, self.d_in);
        let mut y = Mat::zeros(x.rows, self.d_out);
        for r in 0..x.rows {
            let xrow = x.row(r);
            let yrow = y.row_mut(r);
            for o in 0..self.d_out {
                let wrow = &self.weight.w[o * self.d_in..(o + 1) * self.d_in];
                let mut acc = self.bias.w[o];
                for (w, v) in wrow.iter().zip(xrow) {
                    acc += w * v;
                }
                yrow[o] = acc;
            }
        }
        if train {
            self.cache_x = x.clone();
        }
        y
    }

    pub fn backward(&mut self, gy: &Mat) -> Mat {
        let x = &self.cache_x;
        let mut dx = Mat::zeros(x.rows, self.d_in);
        for r in 0..x.rows {
            let grow = gy.row(r);
            let xrow = x.row(r);
            for o in 0..self.d_out {
                let g = grow[o];
                if g == 0.0 {
                    continue;
                }
                self.bias.g[o] += g;
                let wg = &mut self.weight.g[o * self.d_in..(o + 1) * self.d_in];
                for (wgi, &xv) in wg.iter_mut().zip(xrow) {
                    *wgi += g * xv;
                }
                let wrow = &self.weight.w[o * self.d_in..(o + 1) * self.d_in];
                let dxrow = dx.row_mut(r);
                for (dxi, &w) in dxrow.iter_mut().zip(wrow) {
                    *dxi += g * w;
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// batch norm over sample vectors (rows of a Mat)
// ---------------------------------------------------------------------------

pub struct BatchNormVec {
    pub dims: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache_xhat: Mat,
    cache_invstd: Vec<f64>,
}

impl BatchNormVec {
    pub fn new(dims: usize) -> Self {
        BatchNormVec {
            dims,
            gamma: Param {
                w: vec![1.0; dims],
                g: vec![0.0; dims],
            },
            beta: Param::zeros(dims),
            running_mean: vec![0.0; dims],
            running_var: vec![1.0; dims],
            cache_xhat: Mat::zeros(0, 0),
            cache_invstd: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Mat, train: bool) -> Mat {
        let d = self.dims;
        let mut y = Mat::zeros(x.rows, d);
        if !train {
            for r in 0..x.rows {
                for c in 0..d {
                    let is = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
                    y.data[r * d + c] =
                        self.gamma.w[c] * (x.at(r, c) - self.running_mean[c]) * is + self.beta.w[c];
                }
            }
            return y;
        }
        let n = x.rows as f64;
        let mut mean = vec![0.0f64; d];
        let mut var = vec![0.0f64; d];
        for r in 0..x.rows {
            for c in 0..d {
                mean[c] += x.at(r, c);
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for r in 0..x.rows {
            for c in 0..d {
                let diff = x.at(r, c) - mean[c];
                var[c] += diff * diff;
            }
        }
        for v in &mut var {
            *v /= n;
        }
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        for c in 0..d {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c];
        }
        let mut xhat = Mat::zeros(x.rows, d);
        for r in 0..x.rows {
            for c in 0..d {
                xhat.data[r * d + c] = (x.at(r, c) - mean[c]) * invstd[c];
                y.data[r * d + c] = self.gamma.w[c] * xhat.at(r, c) + self.beta.w[c];
            }
        }
        self.cache_xhat = xhat;
        self.cache_invstd = invstd;
        y
    }

    pub fn backward(&mut self, gy: &Mat) -> Mat {
        let d = self.dims;
        let xh = &self.cache_xhat;
        let n = xh.rows as f64;
        let mut sum_gy = vec![0.0f64; d];
        let mut sum_gyx = vec![0.0f64; d];
        for r in 0..xh.rows {
            for c in 0..d {
                sum_gy[c] += gy.at(r, c);
                sum_gyx[c] += gy.at(r, c) * xh.at(r, c);
            }
        }
        for c in 0..d {
            self.beta.g[c] += sum_gy[c];
            self.gamma.g[c] += sum_gyx[c];
        }
        let mut dx = Mat::zeros(xh.rows, d);
        for r in 0..xh.rows {
            for c in 0..d {
                let scale = self.gamma.w[c] * self.cache_invstd[c];
                dx.data[r * d + c] =
                    scale * (gy.at(r, c) - (sum_gy[c] + xh.at(r, c) * sum_gyx[c]) / n);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// statistics pooling: per-channel mean || std over time
// ---------------------------------------------------------------------------

/// Pool one frame matrix into mean-and-std; shared by both pooling layers.
pub fn stats_pool_vec(x: &Mat) -> Vec<f64> {
    let c = x.rows;
    let t = x.cols as f64;
    let mut out = vec![0.0f64; 2 * c];
    for ch in 0..c {
        let row = x.row(ch);
        let mean = row.iter().sum::<f64>() / t;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t;
        out[ch] = mean;
        out[c + ch] = var.max(VAR_FLOOR).sqrt();
    }
    out
}

#[derive(Default)]
pub struct StatsPool {
    cache_x: Vec<Mat>,
    cache_out: Mat,
}

impl StatsPool {
    pub fn new() -> Self {
        StatsPool::default()
    }

    pub fn forward(&mut self, xs: &[Mat], train: bool) -> Mat {
        let rows: Vec<Vec<f64>> = xs.par_iter().map(stats_pool_vec).collect();
        let out = Mat::from_rows(&rows);
        if train {
            self.cache_x = xs.to_vec();
            self.cache_out = out.clone();
        }
        out
    }

    pub fn backward(&mut self, gy: &Mat) -> Vec<Mat> {
        let out: Vec<Mat> = self
            .cache_x
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let c = x.rows;
                let t = x.cols as f64;
                let g = gy.row(i);
                let pooled = self.cache_out.row(i);
                let mut dx = Mat::zeros(c, x.cols);
                for ch in 0..c {
                    let mean = pooled[ch];
                    let std = pooled[c + ch];
                    let gm = g[ch];
                    let gs = g[c + ch];
                    // d std/dx = (x - mean) / (t * std) on the unfloored branch
                    let var = x.row(ch).iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t;
                    let floored = var < VAR_FLOOR;
                    let dxrow = dx.row_mut(ch);
                    for (dv, &v) in dxrow.iter_mut().zip(x.row(ch)) {
                        *dv = gm / t
                            + if floored {
                                0.0
                            } else {
                                gs * (v - mean) / (t * std)
                            };
                    }
                }
                dx
            })
            .collect();
        self.cache_x.clear();
        out
    }
}

// ---------------------------------------------------------------------------
// attentive statistics pooling with global context
// ---------------------------------------------------------------------------

pub struct AttentiveStatsPool {
    pub channels: usize,
    pub bottleneck: usize,
    /// bottleneck x 3C
    pub w1: Param,
    pub b1: Param,
    /// C x bottleneck
    pub w2: Param,
    pub b2: Param,
    cache: Vec<AttnCache>,
}

struct AttnCache {
    x: Mat,
    context: Mat,    // 3C x T
    hidden: Mat,     // A x T (tanh applied)
    alpha: Mat,      // C x T
    mu: Vec<f64>,    // C
    sigma: Vec<f64>, // C
    floored: Vec<bool>,
    g_mean: Vec<f64>,
    g_std: Vec<f64>,
    g_floored: Vec<bool>,
}

impl AttentiveStatsPool {
    pub fn new(channels: usize, bottleneck: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit1 = (6.0 / (3 * channels) as f64).sqrt();
        let limit2 = (6.0 / bottleneck as f64).sqrt();
        AttentiveStatsPool {
            channels,
            bottleneck,
            w1: Param::uniform(bottleneck * 3 * channels, limit1, rng),
            b1: Param::zeros(bottleneck),
            w2: Param::uniform(channels * bottleneck, limit2, rng),
            b2: Param::zeros(channels),
            cache: Vec::new(),
        }
    }

    fn forward_one(&self, x: &Mat) -> AttnCache {
        let c = self.channels;
        let a = self.bottleneck;
        let t_len = x.cols;
        let t = t_len as f64;
        // global context: per-channel mean and (floored) std
        let mut g_mean = vec![0.0f64; c];
        let mut g_std = vec![0.0f64; c];
        let mut g_floored = vec![false; c];
        for ch in 0..c {
            let row = x.row(ch);
            let mean = row.iter().sum::<f64>() / t;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t;
            g_mean[ch] = mean;
            g_floored[ch] = var < VAR_FLOOR;
            g_std[ch] = var.max(VAR_FLOOR).sqrt();
        }
        // context rows: [x; mean broadcast; std broadcast]
        let mut context = Mat::zeros(3 * c, t_len);
        for ch in 0..c {
            context.row_mut(ch).copy_from_slice(x.row(ch));
            for v in context.row_mut(c + ch) {
                *v = g_mean[ch];
            }
            for v in context.row_mut(2 * c + ch) {
                *v = g_std[ch];
            }
        }
        // hidden = tanh(W1 ctx + b1)
        let mut hidden = Mat::zeros(a, t_len);
        for o in 0..a {
            let wrow = &self.w1.w[o * 3 * c..(o + 1) * 3 * c];
            let hrow = hidden.row_mut(o);
            for v in hrow.iter_mut() {
                *v = self.b1.w[o];
            }
            for (ci, &w) in wrow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let crow = context.row(ci);
                for (hv, &cv) in hrow.iter_mut().zip(crow) {
                    *hv += w * cv;
                }
            }
            for v in hrow.iter_mut() {
                *v = v.tanh();
            }
        }
        // logits = W2 hidden + b2; softmax over time per channel
        let mut alpha = Mat::zeros(c, t_len);
        for ch in 0..c {
            let wrow = &self.w2.w[ch * a..(ch + 1) * a];
            let arow = alpha.row_mut(ch);
            for v in arow.iter_mut() {
                *v = self.b2.w[ch];
            }
            for (hi, &w) in wrow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let hrow = hidden.row(hi);
                for (av, &hv) in arow.iter_mut().zip(hrow) {
                    *av += w * hv;
                }
            }
            // softmax over t
            let max = arow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for v in arow.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            for v in arow.iter_mut() {
                *v /= denom;
            }
        }
        // weighted statistics
        let mut mu = vec![0.0f64; c];
        let mut sigma = vec![0.0f64; c];
        let mut floored = vec![false; c];
        for ch in 0..c {
            let arow = alpha.row(ch);
            let xrow = x.row(ch);
            let m: f64 = arow.iter().zip(xrow).map(|(&a, &v)| a * v).sum();
            let sq: f64 = arow.iter().zip(xrow).map(|(&a, &v)| a * v * v).sum();
            let var = sq - m * m;
            mu[ch] = m;
            floored[ch] = var < VAR_FLOOR;
            sigma[ch] = var.max(VAR_FLOOR).sqrt();
        }
        AttnCache {
            x: x.clone(),
            context,
            hidden,
            alpha,
            mu,
            sigma,
            floored,
            g_mean,
            g_std,
            g_floored,
        }
    }

    pub fn forward(&mut self, xs: &[Mat], train: bool) -> Mat {
        let caches: Vec<AttnCache> = xs.par_iter().map(|x| self.forward_one(x)).collect();
        let rows: Vec<Vec<f64>> = caches
            .iter()
            .map(|cc| {
                let mut row = cc.mu.clone();
                row.extend_from_slice(&cc.sigma);
                row
            })
            .collect();
        let out = Mat::from_rows(&rows);
        if train {
            self.cache = caches;
        }
        out
    }

    pub fn backward(&mut self, gy: &Mat) -> Vec<Mat> {
        let c = self.channels;
        let a = self.bottleneck;
        let cache = std::mem::take(&mut self.cache);
        let results: Vec<(Mat, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = cache
            .par_iter()
            .enumerate()
            .map(|(i, cc)| {
                let t_len = cc.x.cols;
                let t = t_len as f64;
                let g = gy.row(i);
                let mut dx = Mat::zeros(c, t_len);
                let mut dw1 = vec![0.0f64; self.w1.w.len()];
                let mut db1 = vec![0.0f64; a];
                let mut dw2 = vec![0.0f64; self.w2.w.len()];
                let mut db2 = vec![0.0f64; c];
                // de: C x T logits grad
                let mut de = Mat::zeros(c, t_len);
                for ch in 0..c {
                    let gm = g[ch];
                    let gs = g[c + ch];
                    let dvar = if cc.floored[ch] {
                        0.0
                    } else {
                        gs / (2.0 * cc.sigma[ch])
                    };
                    let dmu = gm - 2.0 * cc.mu[ch] * dvar;
                    let arow = cc.alpha.row(ch);
                    let xrow = cc.x.row(ch);
                    // dalpha_t and the direct x path
                    let mut dalpha = vec![0.0f64; t_len];
                    for tt in 0..t_len {
                        dalpha[tt] = dmu * xrow[tt] + dvar * xrow[tt] * xrow[tt];
                        dx.row_mut(ch)[tt] += arow[tt] * (dmu + 2.0 * dvar * xrow[tt]);
                    }
                    // softmax backward over time
                    let dot: f64 = arow.iter().zip(&dalpha).map(|(&al, &da)| al * da).sum();
                    let derow = de.row_mut(ch);
                    for tt in 0..t_len {
                        derow[tt] = arow[tt] * (dalpha[tt] - dot);
                    }
                }
                // through the attention network
                let mut dhidden = Mat::zeros(a, t_len);
                for ch in 0..c {
                    let derow = de.row(ch);
                    db2[ch] += derow.iter().sum::<f64>();
                    for hi in 0..a {
                        let hrow = cc.hidden.row(hi);
                        let mut acc = 0.0;
                        for (dv, &hv) in derow.iter().zip(hrow) {
                            acc += dv * hv;
                        }
                        dw2[ch * a + hi] += acc;
                        let w = self.w2.w[ch * a + hi];
                        if w != 0.0 {
                            let dhrow = dhidden.row_mut(hi);
                            for (dh, &dv) in dhrow.iter_mut().zip(derow) {
                                *dh += w * dv;
                            }
                        }
                    }
                }
                // tanh backward, then through W1 into the context
                let mut dcontext = Mat::zeros(3 * c, t_len);
                for hi in 0..a {
                    let hrow = cc.hidden.row(hi);
                    let dhrow = dhidden.row_mut(hi);
                    for (dh, &hv) in dhrow.iter_mut().zip(hrow) {
                        *dh *= 1.0 - hv * hv;
                    }
                    let dhrow = dhidden.row(hi);
                    db1[hi] += dhrow.iter().sum::<f64>();
                    for ci in 0..3 * c {
                        let crow = cc.context.row(ci);
                        let mut acc = 0.0;
                        for (&dh, &cv) in dhrow.iter().zip(crow) {
                            acc += dh * cv;
                        }
                        dw1[hi * 3 * c + ci] += acc;
                        let w = self.w1.w[hi * 3 * c + ci];
                        if w != 0.0 {
                            let dcrow = dcontext.row_mut(ci);
                            for (dc, &dh) in dcrow.iter_mut().zip(dhrow) {
                                *dc += w * dh;
                            }
                        }
                    }
                }
                // context rows split: x part direct, mean/std parts flow
                // through the global statistics
                for ch in 0..c {
                    let dxrow_ctx: Vec<f64> = dcontext.row(ch).to_vec();
                    for (dv, &dc) in dx.row_mut(ch).iter_mut().zip(&dxrow_ctx) {
                        *dv += dc;
                    }
                    let d_gmean: f64 = dcontext.row(c + ch).iter().sum();
                    let d_gstd: f64 = dcontext.row(2 * c + ch).iter().sum();
                    let mean = cc.g_mean[ch];
                    let std = cc.g_std[ch];
                    let xrow = cc.x.row(ch);
                    let dxrow = dx.row_mut(ch);
                    for (dv, &v) in dxrow.iter_mut().zip(xrow) {
                        *dv += d_gmean / t
                            + if cc.g_floored[ch] {
                                0.0
                            } else {
                                d_gstd * (v - mean) / (t * std)
                            };
                    }
                }
                (dx, dw1, db1, dw2, db2)
            })
            .collect();
        let mut dxs = Vec::with_capacity(results.len());
        for (dx, dw1, db1, dw2, db2) in results {
            for (g, d) in self.w1.g.iter_mut().zip(&dw1) {
                *g += d;
            }
            for (g, d) in self.b1.g.iter_mut().zip(&db1) {
                *g += d;
            }
            for (g, d) in self.w2.g.iter_mut().zip(&dw2) {
                *g += d;
            }
            for (g, d) in self.b2.g.iter_mut().zip(&db2) {
                *g += d;
            }
            dxs.push(dx);
        }
        dxs
    }
}

// ---------------------------------------------------------------------------
// squeeze-excitation gate
// ---------------------------------------------------------------------------

pub struct SeBlock {
    pub channels: usize,
    pub bottleneck: usize,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    cache: Vec<SeCache>,
}

struct SeCache {
    x: Mat,
    z: Vec<f64>,
    h: Vec<f64>,   // post-relu
    pre1: Vec<f64>,
    gate: Vec<f64>,
}

impl SeBlock {
    pub fn new(channels: usize, bottleneck: usize, rng: &mut ChaCha8Rng) -> Self {
        let l1 = (6.0 / channels as f64).sqrt();
        let l2 = (6.0 / bottleneck as f64).sqrt();
        SeBlock {
            channels,
            bottleneck,
            w1: Param::uniform(bottleneck * channels, l1, rng),
            b1: Param::zeros(bottleneck),
            w2: Param::uniform(channels * bottleneck, l2, rng),
            b2: Param::zeros(channels),
            cache: Vec::new(),
        }
    }

    fn gate_one(&self, x: &Mat) -> SeCache {
        let c = self.channels;
        let a = self.bottleneck;
        let t = x.cols as f64;
        let z: Vec<f64> = (0..c).map(|ch| x.row(ch).iter().sum::<f64>() / t).collect();
        let mut pre1 = vec![0.0f64; a];
        for o in 0..a {
            let wrow = &self.w1.w[o * c..(o + 1) * c];
            pre1[o] = self.b1.w[o] + wrow.iter().zip(&z).map(|(&w, &v)| w * v).sum::<f64>();
        }
        let h: Vec<f64> = pre1.iter().map(|&v| v.max(0.0)).collect();
        let gate: Vec<f64> = (0..c)
            .map(|ch| {
                let wrow = &self.w2.w[ch * a..(ch + 1) * a];
                let pre = self.b2.w[ch] + wrow.iter().zip(&h).map(|(&w, &v)| w * v).sum::<f64>();
                1.0 / (1.0 + (-pre).exp())
            })
            .collect();
        SeCache {
            x: x.clone(),
            z,
            h,
            pre1,
            gate,
        }
    }

    pub fn forward(&mut self, xs: &[Mat], train: bool) -> Vec<Mat> {
        let caches: Vec<SeCache> = xs.par_iter().map(|x| self.gate_one(x)).collect();
        let ys: Vec<Mat> = caches
            .par_iter()
            .map(|cc| {
                let mut y = cc.x.clone();
                for ch in 0..self.channels {
                    let s = cc.gate[ch];
                    for v in y.row_mut(ch) {
                        *v *= s;
                    }
                }
                y
            })
            .collect();
        if train {
            self.cache = caches;
        }
        ys
    }

    pub fn backward(&mut self, gys: &[Mat]) -> Vec<Mat> {
        let c = self.channels;
        let a = self.bottleneck;
        let cache = std::mem::take(&mut self.cache);
        let results: Vec<(Mat, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = cache
            .par_iter()
            .zip(gys.par_iter())
            .map(|(cc, gy)| {
                let t = cc.x.cols as f64;
                let mut dx = Mat::zeros(c, cc.x.cols);
                // direct path and gate gradient
                let mut dgate = vec![0.0f64; c];
                for ch in 0..c {
                    let s = cc.gate[ch];
                    let gyrow = gy.row(ch);
                    let xrow = cc.x.row(ch);
                    let dxrow = dx.row_mut(ch);
                    let mut acc = 0.0;
                    for ((dv, &g), &xv) in dxrow.iter_mut().zip(gyrow).zip(xrow) {
                        *dv = g * s;
                        acc += g * xv;
                    }
                    dgate[ch] = acc;
                }
                // sigmoid backward
                let dpre2: Vec<f64> = (0..c)
                    .map(|ch| dgate[ch] * cc.gate[ch] * (1.0 - cc.gate[ch]))
                    .collect();
                let mut dw2 = vec![0.0f64; self.w2.w.len()];
                let mut db2 = vec![0.0f64; c];
                let mut dh = vec![0.0f64; a];
                for ch in 0..c {
                    db2[ch] += dpre2[ch];
                    for hi in 0..a {
                        dw2[ch * a + hi] += dpre2[ch] * cc.h[hi];
                        dh[hi] += self.w2.w[ch * a + hi] * dpre2[ch];
                    }
                }
                let dpre1: Vec<f64> = (0..a)
                    .map(|hi| if cc.pre1[hi] > 0.0 { dh[hi] } else { 0.0 })
                    .collect();
                let mut dw1 = vec![0.0f64; self.w1.w.len()];
                let mut db1 = vec![0.0f64; a];
                let mut dz = vec![0.0f64; c];
                for hi in 0..a {
                    db1[hi] += dpre1[hi];
                    for ch in 0..c {
                        dw1[hi * c + ch] += dpre1[hi] * cc.z[ch];
                        dz[ch] += self.w1.w[hi * c + ch] * dpre1[hi];
                    }
                }
                // mean pool backward
                for ch in 0..c {
                    let d = dz[ch] / t;
                    for v in dx.row_mut(ch) {
                        *v += d;
                    }
                }
                (dx, dw1, db1, dw2, db2)
            })
            .collect();
        let mut dxs = Vec::with_capacity(results.len());
        for (dx, dw1, db1, dw2, db2) in results {
            for (g, d) in self.w1.g.iter_mut().zip(&dw1) {
                *g += d;
            }
            for (g, d) in self.b1.g.iter_mut().zip(&db1) {
                *g += d;
            }
            for (g, d) in self.w2.g.iter_mut().zip(&dw2) {
                *g += d;
            }
            for (g, d) in self.b2.g.iter_mut().zip(&db2) {
                *g += d;
            }
            dxs.push(dx);
        }
        dxs
    }
}

// ---------------------------------------------------------------------------
// Res2 multi-scale grouped convolution
// ---------------------------------------------------------------------------

/// Channel groups processed sequentially: group 0 passes through; group i
/// (i >= 1) is convolved after adding the previous group's output
/// (from i >= 2), widening the temporal context per group.
pub struct Res2Conv {
    pub channels: usize,
    pub scale: usize,
    pub convs: Vec<Conv1d>,
    relus: Vec<Relu>,
    cache_inputs: Vec<Vec<Mat>>, // per group: batch of group inputs
}

impl Res2Conv {
    pub fn new(
        channels: usize,
        scale: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(channels % scale == 0, "channels must divide by res2 scale");
        let group = channels / scale;
        Res2Conv {
            channels,
            scale,
            convs: (1..scale)
                .map(|_| Conv1d::new(group, group, kernel, dilation, rng))
                .collect(),
            relus: (1..scale).map(|_| Relu::new()).collect(),
            cache_inputs: Vec::new(),
        }
    }

    fn split(&self, x: &Mat) -> Vec<Mat> {
        let group = self.channels / self.scale;
        (0..self.scale)
            .map(|s| {
                let mut m = Mat::zeros(group, x.cols);
                for ch in 0..group {
                    m.row_mut(ch).copy_from_slice(x.row(s * group + ch));
                }
                m
            })
            .collect()
    }

    pub fn forward(&mut self, xs: &[Mat], train: bool) -> Vec<Mat> {
        let group = self.channels / self.scale;
        let split: Vec<Vec<Mat>> = xs.iter().map(|x| self.split(x)).collect();
        let b = xs.len();
        let mut outputs: Vec<Vec<Mat>> = vec![Vec::with_capacity(self.scale); b];
        for (i, sp) in split.iter().enumerate() {
            outputs[i].push(sp[0].clone());
        }
        self.cache_inputs = Vec::with_capacity(self.scale - 1);
        for s in 1..self.scale {
            // group input: chunk_s (+ previous output for s >= 2)
            let inputs: Vec<Mat> = (0..b)
                .map(|i| {
                    let mut m = split[i][s].clone();
                    if s >= 2 {
                        for (v, &p) in m.data.iter_mut().zip(&outputs[i][s - 1].data) {
                            *v += p;
                        }
                    }
                    m
                })
                .collect();
            if train {
                self.cache_inputs.push(inputs.clone());
            }
            let conv_out = self.convs[s - 1].forward(&inputs, train);
            let act = self.relus[s - 1].forward(&conv_out, train);
            for (i, y) in act.into_iter().enumerate() {
                outputs[i].push(y);
            }
        }
        // concat groups back
        (0..b)
            .map(|i| {
                let mut m = Mat::zeros(self.channels, xs[i].cols);
                for (s, y) in outputs[i].iter().enumerate() {
                    for ch in 0..group {
                        m.row_mut(s * group + ch).copy_from_slice(y.row(ch));
                    }
                }
                m
            })
            .collect()
    }

    pub fn backward(&mut self, gys: &[Mat]) -> Vec<Mat> {
        let group = self.channels / self.scale;
        let b = gys.len();
        let t_of = |i: usize| gys[i].cols;
        // split incoming grads per group
        let mut dgroups: Vec<Vec<Mat>> = (0..b)
            .map(|i| {
                (0..self.scale)
                    .map(|s| {
                        let mut m = Mat::zeros(group, t_of(i));
                        for ch in 0..group {
                            m.row_mut(ch).copy_from_slice(gys[i].row(s * group + ch));
                        }
                        m
                    })
                    .collect()
            })
            .collect();
        let mut dxs: Vec<Mat> = (0..b).map(|i| Mat::zeros(self.channels, t_of(i))).collect();
        // walk groups backwards; carry the grad into the previous output
        for s in (1..self.scale).rev() {
            let gout: Vec<Mat> = (0..b).map(|i| dgroups[i][s].clone()).collect();
            let grelu = self.relus[s - 1].backward(&gout);
            let dinputs = self.convs[s - 1].backward(&grelu);
            for i in 0..b {
                // input was chunk_s (+ out_{s-1} for s >= 2)
                for ch in 0..group {
                    let dst = dxs[i].row_mut(s * group + ch);
                    for (dv, &g) in dst.iter_mut().zip(dinputs[i].row(ch)) {
                        *dv += g;
                    }
                }
                if s >= 2 {
                    for (v, &g) in dgroups[i][s - 1].data.iter_mut().zip(&dinputs[i].data) {
                        *v += g;
                    }
                }
            }
        }
        // group 0 passes through
        for i in 0..b {
            for ch in 0..group {
                let dst = dxs[i].row_mut(ch);
                for (dv, &g) in dst.iter_mut().zip(dgroups[i][0].row(ch)) {
                    *dv += g;
                }
            }
        }
        self.cache_inputs.clear();
        dxs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn stats_pool_hand_case() {
        // [[0,2],[2,0]] -> mean [1,1], std [1,1]
        let x = Mat::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]);
        let v = stats_pool_vec(&x);
        assert_eq!(v, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn stats_pool_constant_rows_floor_the_std() {
        let x = Mat::from_rows(&[vec![3.0; 7]]);
        let v = stats_pool_vec(&x);
        assert_eq!(v[0], 3.0);
        assert!((v[1] - VAR_FLOOR.sqrt()).abs() < 1e-18);
    }

    #[test]
    fn stats_pool_single_frame() {
        let x = Mat::from_rows(&[vec![0.7], vec![-0.2]]);
        let v = stats_pool_vec(&x);
        assert_eq!(v[0], 0.7);
        assert_eq!(v[1], -0.2);
        assert!((v[2] - VAR_FLOOR.sqrt()).abs() < 1e-18);
        assert!((v[3] - VAR_FLOOR.sqrt()).abs() < 1e-18);
    }

    #[test]
    fn attentive_pool_with_zero_attention_equals_stats_pool() {
        let mut r = rng(1);
        let mut pool = AttentiveStatsPool::new(4, 3, &mut r);
        for v in &mut pool.w2.w {
            *v = 0.0;
        }
        for v in &mut pool.b2.w {
            *v = 0.0;
        }
        let x = rand_mat(4, 9, &mut r);
        let out = pool.forward(std::slice::from_ref(&x), false);
        let want = stats_pool_vec(&x);
        for (a, b) in out.row(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attentive_pool_saturated_on_one_frame() {
        let mut r = rng(2);
        let c = 3;
        let mut pool = AttentiveStatsPool::new(c, 1, &mut r);
        // attention reads channel 0 of the context; frame t0 gets a huge
        // marker value there, and w2 amplifies the tanh gap to saturation
        for v in &mut pool.w1.w {
            *v = 0.0;
        }
        pool.w1.w[0] = 1.0; // bottleneck unit = context channel 0 = x[0,:]
        pool.b1.w[0] = 0.0;
        for v in &mut pool.w2.w {
            *v = 1e4;
        }
        for v in &mut pool.b2.w {
            *v = 0.0;
        }
        let t0 = 5;
        let mut x = rand_mat(c, 9, &mut r);
        for t in 0..9 {
            x.row_mut(0)[t] = if t == t0 { 5.0 } else { -5.0 };
        }
        let out = pool.forward(std::slice::from_ref(&x), false);
        for ch in 0..c {
            assert!(
                (out.row(0)[ch] - x.at(ch, t0)).abs() < 1e-6,
                "mean ch {ch}: {} vs {}",
                out.row(0)[ch],
                x.at(ch, t0)
            );
            assert!(out.row(0)[c + ch] < 1e-3, "std ch {ch} not collapsed");
        }
    }

    #[test]
    fn attentive_pool_is_permutation_invariant() {
        let mut r = rng(3);
        let pool = AttentiveStatsPool::new(4, 3, &mut r);
        let x = rand_mat(4, 8, &mut r);
        // permute frames
        let perm = [3usize, 0, 7, 1, 5, 2, 6, 4];
        let mut xp = Mat::zeros(4, 8);
        for (dst, &src) in perm.iter().enumerate() {
            for ch in 0..4 {
                *xp.at_mut(ch, dst) = x.at(ch, src);
            }
        }
        let mut p1 = pool;
        let a = p1.forward(std::slice::from_ref(&x), false);
        let b = p1.forward(std::slice::from_ref(&xp), false);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_receptive_field_matches_formula() {
        let mut r = rng(4);
        let mut conv = Conv1d::new(2, 3, 3, 4, &mut r);
        assert_eq!(conv.receptive_field(), 9);
        // single-impulse sensitivity probe
        let t_len = 40;
        let base = Mat::zeros(2, t_len);
        let mut probe = base.clone();
        *probe.at_mut(1, 20) = 1.0;
        let y0 = conv.forward(std::slice::from_ref(&base), false);
        let y1 = conv.forward(std::slice::from_ref(&probe), false);
        let mut touched = Vec::new();
        for t in 0..t_len {
            let differs = (0..3).any(|ch| (y0[0].at(ch, t) - y1[0].at(ch, t)).abs() > 1e-15);
            if differs {
                touched.push(t);
            }
        }
        let width = touched.last().unwrap() - touched.first().unwrap() + 1;
        assert_eq!(width, conv.receptive_field());
        // centered on the impulse
        assert_eq!(*touched.first().unwrap(), 20 - 4);
        assert_eq!(*touched.last().unwrap(), 20 + 4);
    }

    #[test]
    fn res2_groups_concatenate_back() {
        let mut r = rng(5);
        let mut res2 = Res2Conv::new(8, 4, 3, 2, &mut r);
        let x = rand_mat(8, 12, &mut r);
        let y = res2.forward(std::slice::from_ref(&x), false);
        assert_eq!(y[0].rows, 8);
        assert_eq!(y[0].cols, 12);
        // group 0 passes through untouched
        for ch in 0..2 {
            for t in 0..12 {
                assert_eq!(y[0].at(ch, t), x.at(ch, t));
            }
        }
    }
}
