//! Layer ops and their backward rules. Layout is always NCHW, row-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Op, Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the loss.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running mean and variance.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training batch. `var` is the unbiased
/// estimate, which is what the running average tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => bail!(Shape, "{what} expects a 4-d tensor, got {:?}", shape),
    }
}

impl Tape {
    /// Stride-1 cross-correlation with zero padding `pad = (ph, pw)`.
    /// `x: [N,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: (usize, usize)) -> Result<Var> {
        let [n, ci, h, wd] = dims4(self.shape(x), "conv2d input")?;
        let [co, wci, kh, kw] = dims4(self.shape(w), "conv2d weight")?;
        if wci != ci {
            bail!(Shape, "conv2d: input has {ci} channels, weight expects {wci}");
        }
        if self.shape(b) != [co] {
            bail!(Shape, "conv2d: bias shape {:?}, expected [{co}]", self.shape(b));
        }
        let (ph, pw) = pad;
        if h + 2 * ph < kh || wd + 2 * pw < kw {
            bail!(Shape, "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}");
        }
        let (ho, wo) = (h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1);
        let geo = ConvGeo { n, ci, h, wd, kh, kw, ph, pw, ho, wo };
        let col = geo.im2col(&self.value(x).data);
        let (kk, np, p) = (geo.k(), geo.np(), geo.p());
        let (wdat, bd) = (&self.value(w).data, &self.value(b).data);
        // out_t[o, s*P + q] = b[o] + sum_k w[o, k] col[k, s*P + q], tiled over columns
        let mut out_t = vec![0.0; co * np];
        for p0 in (0..np).step_by(TILE) {
            let p1 = (p0 + TILE).min(np);
            for o in 0..co {
                let row = &mut out_t[o * np + p0..o * np + p1];
                row.fill(bd[o]);
                for k in 0..kk {
                    let wv = wdat[o * kk + k];
                    let crow = &col[k * np + p0..k * np + p1];
                    row.iter_mut().zip(crow).for_each(|(r, c)| *r += wv * c);
                }
            }
        }
        let mut out = vec![0.0; n * co * p];
        for s in 0..n {
            for o in 0..co {
                out[(s * co + o) * p..(s * co + o + 1) * p].copy_from_slice(&out_t[o * np + s * p..o * np + (s + 1) * p]);
            }
        }
        let rg = self.rg(&[x, w, b]);
        let col = self.nodes[w.0].requires_grad.then_some(col);
        Ok(self.push(Tensor { shape: vec![n, co, ho, wo], data: out }, rg, Op::Conv2d { x, w, b, pad, col }))
    }

    /// Keeps the leading `h x w` block of every plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, hi, wi] = dims4(self.shape(x), "crop")?;
        if h > hi || w > wi {
            bail!(Shape, "crop to {h}x{w} from {hi}x{wi}");
        }
        let xd = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for i in 0..h {
                let start = (p * hi + i) * wi;
                out.extend_from_slice(&xd[start..start + w]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![n, c, h, w], data: out }, rg, Op::Crop(x)))
    }

    /// Per-channel normalization over `(N, H, W)` followed by `gamma * xhat + beta`.
    /// Training mode needs at least two samples and returns the batch statistics.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, h, w] = dims4(self.shape(x), "batchnorm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Shape, "batchnorm2d: affine parameters must have shape [{c}]");
        }
        let hw = h * w;
        let m = n * hw;
        let xd = &self.value(x).data;
        let (mean, var_b, stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    bail!(Batch, "batch norm in training mode needs at least 2 samples, got {n}");
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0;
                    for i in 0..n {
                        q += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m as f64;
                }
                let unbiased = if m > 1 {
                    var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    bail!(Shape, "batchnorm2d: running statistics must have {c} entries");
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for k in off..off + hw {
                    let z = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = z;
                    out[k] = g[ch] * z + bt[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let train = matches!(mode, BnMode::Train);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train };
        Ok((self.push(Tensor { shape: vec![n, c, h, w], data: out }, rg, op), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let value = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| sigmoid(a)).collect();
        let value = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sigmoid(x))
    }

    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "maxpool2d")?;
        if h < 2 || w < 2 {
            bail!(Shape, "maxpool2d needs at least 2x2 planes, got {h}x{w}");
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let k = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[k] > xd[best] {
                            best = k;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![n, c, ho, wo], data: out }, rg, Op::MaxPool { x, argmax }))
    }

    /// Inverted dropout: in training, elements are zeroed with probability
    /// `p` and survivors scaled by `1/(1-p)`; otherwise the input is returned.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            bail!(Config, "dropout probability {p} outside [0, 1)");
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = v.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Dropout { x, mask }))
    }

    /// `x: [N,F]`, `w: [F,O]`, `b: [O]` -> `x w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, f) = match self.shape(x) {
            &[n, f] => (n, f),
            s => bail!(Shape, "linear input must be [N,F], got {:?}", s),
        };
        let o = match self.shape(w) {
            &[wf, o] if wf == f => o,
            s => bail!(Shape, "linear weight {:?} does not accept {f} features", s),
        };
        if self.shape(b) != [o] {
            bail!(Shape, "linear bias shape {:?}, expected [{o}]", self.shape(b));
        }
        let (xd, wdat, bd) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut out = Vec::with_capacity(n * o);
        for i in 0..n {
            let mut row = bd.clone();
            for k in 0..f {
                let xv = xd[i * f + k];
                for (r, wv) in row.iter_mut().zip(&wdat[k * o..(k + 1) * o]) {
                    *r += xv * wv;
                }
            }
            out.extend(row);
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor { shape: vec![n, o], data: out }, rg, Op::Linear { x, w, b }))
    }

    /// Spatial mean of every plane: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "global_avg_pool2d")?;
        let hw = h * w;
        let data = self.value(x).data.chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![n, c, 1, 1], data }, rg, Op::GlobalAvgPool(x)))
    }

    /// `x: [N,C,H,W]` scaled per channel by `s: [N,C,1,1]`.
    pub fn channelwise_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "channelwise_mul")?;
        if self.shape(s) != [n, c, 1, 1] {
            bail!(Shape, "channelwise_mul scale {:?}, expected [{n},{c},1,1]", self.shape(s));
        }
        let hw = h * w;
        let sd = &self.value(s).data;
        let data = self
            .value(x)
            .data
            .chunks_exact(hw)
            .zip(sd)
            .flat_map(|(p, &k)| p.iter().map(move |v| v * k))
            .collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor { shape: vec![n, c, h, w], data }, rg, Op::ChannelMul { x, s }))
    }

    /// Mean of `-[w y ln p + (1-w)(1-y) ln(1-p)]` with `p` clamped to
    /// `[1e-7, 1 - 1e-7]`. `p` may be `[N]` or `[N,1]`.
    pub fn weighted_bce(&mut self, p: Var, y: &[f64], w_pos: f64) -> Result<Var> {
        let pd = &self.value(p).data;
        if pd.len() != y.len() || pd.is_empty() {
            bail!(Shape, "weighted_bce: {} probabilities for {} targets", pd.len(), y.len());
        }
        let n = pd.len() as f64;
        let mut loss = 0.0;
        let mut dp = Vec::with_capacity(pd.len());
        for (&pv, &t) in pd.iter().zip(y) {
            let q = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= w_pos * t * q.ln() + (1.0 - w_pos) * (1.0 - t) * (1.0 - q).ln();
            let inside = pv > BCE_CLAMP && pv < 1.0 - BCE_CLAMP;
            dp.push(if inside { (-w_pos * t / q + (1.0 - w_pos) * (1.0 - t) / (1.0 - q)) / n } else { 0.0 });
        }
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(loss / n), rg, Op::WeightedBce { p, dp }))
    }
}

/// Logistic function split by sign so neither branch overflows.
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Column tile width for the conv matrix products.
const TILE: usize = 128;

#[derive(Clone, Copy)]
struct ConvGeo {
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeo {
    /// Rows of the column matrix: one per (input channel, kernel tap).
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Output positions per sample.
    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn np(&self) -> usize {
        self.n * self.p()
    }

    /// Visits every in-bounds run of the `[K, N*P]` column matrix as
    /// `(col_start, x_start, j0, j1)`: for `j in j0..j1`, column entry
    /// `col_start + j` reads input element `x_start + j - pw`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (np, p) = (self.np(), self.p());
        for s in 0..self.n {
            for c in 0..self.ci {
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let k = (c * self.kh + ki) * self.kw + kj;
                        let j0 = self.pw.saturating_sub(kj);
                        let j1 = self.wo.min((self.wd + self.pw).saturating_sub(kj));
                        if j0 >= j1 {
                            continue;
                        }
                        for i in 0..self.ho {
                            let si = i + ki;
                            if si < self.ph || si - self.ph >= self.h {
                                continue;
                            }
                            let x_start = ((s * self.ci + c) * self.h + si - self.ph) * self.wd + kj;
                            f(k * np + s * p + i * self.wo, x_start, j0, j1);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.k() * self.np()];
        let pw = self.pw;
        self.for_each_run(|cs, xs, j0, j1| {
            for j in j0..j1 {
                col[cs + j] = x[xs + j - pw];
            }
        });
        col
    }

    fn col2im_add(&self, dcol: &[f64], dx: &mut [f64]) {
        let pw = self.pw;
        self.for_each_run(|cs, xs, j0, j1| {
            for j in j0..j1 {
                dx[xs + j - pw] += dcol[cs + j];
            }
        });
    }
}

pub(super) fn backward_node(t: &mut Tape, i: usize, g: &[f64]) {
    let op = std::mem::replace(&mut t.nodes[i].op, Op::Leaf);
    match &op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            t.accumulate(*a, g);
            t.accumulate(*b, g);
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = g.iter().zip(&t.value(*b).data).map(|(g, v)| g * v).collect();
            let db: Vec<f64> = g.iter().zip(&t.value(*a).data).map(|(g, v)| g * v).collect();
            t.accumulate(*a, &da);
            t.accumulate(*b, &db);
        }
        Op::Sum(a) => {
            let d = vec![g[0]; t.value(*a).numel()];
            t.accumulate(*a, &d);
        }
        Op::Reshape(a) => t.accumulate(*a, g),
        Op::Conv2d { .. } => conv_backward(t, i, &op, g),
        Op::Crop(x) => {
            let [n, c, hi, wi] = dims4(t.shape(*x), "crop").unwrap();
            let [_, _, h, w] = dims4(&t.nodes[i].value.shape, "crop").unwrap();
            t.accumulate_with(*x, |dx| {
                for p in 0..n * c {
                    for r in 0..h {
                        let src = &g[(p * h + r) * w..(p * h + r + 1) * w];
                        let start = (p * hi + r) * wi;
                        dx[start..start + w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            });
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let [n, c, h, w] = dims4(t.shape(*x), "batchnorm2d").unwrap();
            let hw = h * w;
            let m = (n * hw) as f64;
            let gv = t.value(*gamma).data.clone();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    for k in off..off + hw {
                        dgamma[ch] += g[k] * xhat[k];
                        dbeta[ch] += g[k];
                    }
                }
            }
            t.accumulate_with(*x, |dx| {
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for k in off..off + hw {
                            dx[k] += if *train {
                                // d/dx of gamma * (x - mean) / sqrt(var + eps) with batch statistics
                                gv[ch] * inv_std[ch] / m * (m * g[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                            } else {
                                gv[ch] * inv_std[ch] * g[k]
                            };
                        }
                    }
                }
            });
            t.accumulate(*gamma, &dgamma);
            t.accumulate(*beta, &dbeta);
        }
        Op::Relu(x) => {
            let d: Vec<f64> =
                g.iter().zip(&t.value(*x).data).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
            t.accumulate(*x, &d);
        }
        Op::Sigmoid(x) => {
            let d: Vec<f64> = g.iter().zip(&t.nodes[i].value.data).map(|(g, y)| g * y * (1.0 - y)).collect();
            t.accumulate(*x, &d);
        }
        Op::MaxPool { x, argmax } => {
            t.accumulate_with(*x, |dx| {
                for (&k, gv) in argmax.iter().zip(g) {
                    dx[k] += gv;
                }
            });
        }
        Op::Dropout { x, mask } => {
            let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
            t.accumulate(*x, &d);
        }
        Op::Linear { x, w, b } => {
            let (n, f) = (t.shape(*x)[0], t.shape(*x)[1]);
            let o = t.shape(*w)[1];
            if t.nodes[x.0].requires_grad {
                let wd = &t.value(*w).data;
                let mut dx = vec![0.0; n * f];
                for s in 0..n {
                    let grow = &g[s * o..(s + 1) * o];
                    for k in 0..f {
                        dx[s * f + k] = wd[k * o..(k + 1) * o].iter().zip(grow).map(|(a, b)| a * b).sum();
                    }
                }
                t.accumulate(*x, &dx);
            }
            if t.nodes[w.0].requires_grad {
                let xd = &t.value(*x).data;
                let mut dw = vec![0.0; f * o];
                for s in 0..n {
                    let grow = &g[s * o..(s + 1) * o];
                    for k in 0..f {
                        let xv = xd[s * f + k];
                        dw[k * o..(k + 1) * o].iter_mut().zip(grow).for_each(|(a, b)| *a += xv * b);
                    }
                }
                t.accumulate(*w, &dw);
            }
            let mut db = vec![0.0; o];
            for row in g.chunks_exact(o) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            t.accumulate(*b, &db);
        }
        Op::GlobalAvgPool(x) => {
            let [_, _, h, w] = dims4(t.shape(*x), "global_avg_pool2d").unwrap();
            let hw = h * w;
            let d: Vec<f64> = g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
            t.accumulate(*x, &d);
        }
        Op::ChannelMul { x, s } => {
            let [_, _, h, w] = dims4(t.shape(*x), "channelwise_mul").unwrap();
            let hw = h * w;
            let sd = &t.value(*s).data;
            let dx: Vec<f64> =
                g.chunks_exact(hw).zip(sd).flat_map(|(p, &k)| p.iter().map(move |v| v * k)).collect();
            let ds: Vec<f64> = g
                .chunks_exact(hw)
                .zip(t.value(*x).data.chunks_exact(hw))
                .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                .collect();
            t.accumulate(*x, &dx);
            t.accumulate(*s, &ds);
        }
        Op::WeightedBce { p, dp } => {
            let d: Vec<f64> = dp.iter().map(|v| v * g[0]).collect();
            t.accumulate(*p, &d);
        }
    }
    t.nodes[i].op = op;
}

fn conv_backward(t: &mut Tape, node: usize, op: &Op, g: &[f64]) {
    let Op::Conv2d { x, w, b, pad, col } = op else { unreachable!() };
    let (x, w, b) = (*x, *w, *b);
    let [n, ci, h, wd] = dims4(t.shape(x), "conv2d").unwrap();
    let [co, _, kh, kw] = dims4(t.shape(w), "conv2d").unwrap();
    let [_, _, ho, wo] = dims4(&t.nodes[node].value.shape, "conv2d").unwrap();
    let geo = ConvGeo { n, ci, h, wd, kh, kw, ph: pad.0, pw: pad.1, ho, wo };
    let (kk, np, p) = (geo.k(), geo.np(), geo.p());

    // g is [N, Cout, P]; regroup to [Cout, N*P] to match the column matrix
    let mut gt = vec![0.0; co * np];
    for s in 0..n {
        for o in 0..co {
            gt[o * np + s * p..o * np + (s + 1) * p].copy_from_slice(&g[(s * co + o) * p..(s * co + o + 1) * p]);
        }
    }
    let db: Vec<f64> = gt.chunks_exact(np).map(|r| r.iter().sum()).collect();

    if let Some(col) = col {
        let mut dw = vec![0.0; co * kk];
        for p0 in (0..np).step_by(TILE) {
            let p1 = (p0 + TILE).min(np);
            for o in 0..co {
                let grow = &gt[o * np + p0..o * np + p1];
                for k in 0..kk {
                    let crow = &col[k * np + p0..k * np + p1];
                    dw[o * kk + k] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        t.accumulate(w, &dw);
    }

    if t.nodes[x.0].requires_grad {
        let wdat = &t.value(w).data;
        let mut dcol = vec![0.0; kk * np];
        for p0 in (0..np).step_by(TILE) {
            let p1 = (p0 + TILE).min(np);
            for k in 0..kk {
                let drow = &mut dcol[k * np + p0..k * np + p1];
                for o in 0..co {
                    let wv = wdat[o * kk + k];
                    let grow = &gt[o * np + p0..o * np + p1];
                    drow.iter_mut().zip(grow).for_each(|(d, g)| *d += wv * g);
                }
            }
        }
        t.accumulate_with(x, |dx| geo.col2im_add(&dcol, dx));
    }

    t.accumulate(b, &db);
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, Tensor};
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], ph: usize, pw: usize) -> Tensor {
        let [n, ci, h, wd] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        let [co, _, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
        let (ho, wo) = (h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for s in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let (si, sj) = (i as isize + a as isize - ph as isize, j as isize + bb as isize - pw as isize);
                                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wd {
                                        acc += w.data[((o * ci + c) * kh + a) * kw + bb]
                                            * x.data[((s * ci + c) * h + si as usize) * wd + sj as usize];
                                    }
                                }
                            }
                        }
                        out.data[((s * co + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    /// Scalar probe `sum(r * layer(inputs))` with a fixed random `r`, so
    /// every output element contributes to the checked gradient.
    fn probe_grad(
        inputs: &[Tensor],
        which: usize,
        layer: &dyn Fn(&mut Tape, &[Var]) -> Var,
        r_seed: u64,
    ) -> f64 {
        let f = |v: &[f64]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(k, tin)| {
                    let val = if k == which { Tensor::new(tin.shape.clone(), v.to_vec()).unwrap() } else { tin.clone() };
                    t.leaf(val, true)
                })
                .collect();
            let out = layer(&mut t, &vars);
            let mut rng = ChaCha8Rng::seed_from_u64(r_seed);
            let r = rand_tensor(&mut rng, t.shape(out));
            let rv = t.leaf(r, false);
            let prod = t.mul(out, rv).unwrap();
            let loss = t.sum(prod);
            let value = t.value(loss).data[0];
            t.backward(loss).unwrap();
            Ok((value, t.grad(vars[which]).map(|g| g.to_vec()).unwrap_or(vec![0.0; v.len()])))
        };
        grad_check(f, &inputs[which].data, 1e-5).unwrap()
    }

    #[test]
    fn conv_identity_and_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[1, 1, 4, 5]);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), false);
        let w = t.leaf(Tensor::full(&[1, 1, 1, 1], 1.0), false);
        let b = t.leaf(Tensor::zeros(&[1]), false);
        let y = t.conv2d(xv, w, b, (0, 0)).unwrap();
        assert_eq!(t.value(y), &x);

        let ones = t.leaf(Tensor::full(&[1, 1, 5, 5], 1.0), false);
        let k = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let y = t.conv2d(ones, k, b, (0, 0)).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert!(t.value(y).data.iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(n, ci, co, h, w, kh, kw, ph, pw) in &[
            (2, 3, 4, 5, 6, 2, 2, 1, 1),
            (1, 2, 3, 4, 3, 3, 3, 0, 0),
            (2, 1, 2, 3, 7, 3, 2, 1, 0),
            (1, 4, 2, 2, 2, 2, 2, 1, 1),
        ] {
            let x = rand_tensor(&mut rng, &[n, ci, h, w]);
            let wt = rand_tensor(&mut rng, &[co, ci, kh, kw]);
            let b = rand_tensor(&mut rng, &[co]);
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.leaf(x.clone(), false), t.leaf(wt.clone(), false), t.leaf(b.clone(), false));
            let y = t.conv2d(xv, wv, bv, (ph, pw)).unwrap();
            let oracle = naive_conv(&x, &wt, &b.data, ph, pw);
            assert_eq!(t.shape(y), oracle.shape.as_slice());
            for (a, o) in t.value(y).data.iter().zip(&oracle.data) {
                assert!((a - o).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn conv_exact_on_integers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let int = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-5i32..=5) as f64).collect()).unwrap()
        };
        let x = int(&mut rng, &[2, 3, 6, 5]);
        let w = int(&mut rng, &[4, 3, 2, 2]);
        let b = int(&mut rng, &[4]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.leaf(x.clone(), false), t.leaf(w.clone(), false), t.leaf(b.clone(), false));
        let y = t.conv2d(xv, wv, bv, (1, 1)).unwrap();
        assert_eq!(t.value(y), &naive_conv(&x, &w, &b.data, 1, 1));
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [rand_tensor(&mut rng, &[2, 2, 4, 3]), rand_tensor(&mut rng, &[3, 2, 2, 2]), rand_tensor(&mut rng, &[3])];
        let layer = |t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], v[2], (1, 1)).unwrap();
            t.crop(y, 4, 3).unwrap()
        };
        for which in 0..3 {
            assert!(probe_grad(&inputs, which, &layer, 9) <= 1e-4);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 2, 3, 3]), false);
        let w = t.leaf(Tensor::zeros(&[1, 3, 2, 2]), false);
        let b = t.leaf(Tensor::zeros(&[1]), false);
        assert!(matches!(t.conv2d(x, w, b, (0, 0)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 3, 2, 3]);
        let mut t = Tape::new();
        let xv = t.leaf(x, false);
        let g = t.leaf(Tensor::full(&[3], 1.0), false);
        let b = t.leaf(Tensor::zeros(&[3]), false);
        let (y, stats) = t.batchnorm2d(xv, g, b, BnMode::Train, 1e-5).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean.len(), 3);
        let yd = &t.value(y).data;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|s| yd[(s * 3 + ch) * 6..(s * 3 + ch + 1) * 6].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 24.0;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 24.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_eval_identity_and_batch_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), false);
        let g = t.leaf(Tensor::full(&[2], 1.0), false);
        let b = t.leaf(Tensor::zeros(&[2]), false);
        let (mean, var) = ([0.0; 2], [1.0; 2]);
        let (y, _) = t.batchnorm2d(xv, g, b, BnMode::Eval { mean: &mean, var: &var }, 1e-5).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, o) in t.value(y).data.iter().zip(&x.data) {
            assert!((a - o * scale).abs() < 1e-15);
        }
        assert!(matches!(t.batchnorm2d(xv, g, b, BnMode::Train, 1e-5), Err(crate::Error::Batch(_))));
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [rand_tensor(&mut rng, &[3, 2, 2, 3]), rand_tensor(&mut rng, &[2]), rand_tensor(&mut rng, &[2])];
        let train = |t: &mut Tape, v: &[Var]| t.batchnorm2d(v[0], v[1], v[2], BnMode::Train, 1e-5).unwrap().0;
        let (mean, var) = ([0.3, -0.2], [0.5, 2.0]);
        let eval = move |t: &mut Tape, v: &[Var]| {
            t.batchnorm2d(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5).unwrap().0
        };
        for which in 0..3 {
            assert!(probe_grad(&inputs, which, &train, 11) <= 1e-4, "train {which}");
            assert!(probe_grad(&inputs, which, &eval, 11) <= 1e-4, "eval {which}");
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let r = t.relu(x);
        assert_eq!(t.value(r).data, vec![0.0, 0.0, 2.0]);
        let l = t.sum(r);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() <= 1e-15);
        assert!(sigmoid(-50.0).abs() <= 1e-15 && sigmoid(-50.0) > 0.0);
        assert!(sigmoid(-1000.0) == 0.0 && sigmoid(1000.0) == 1.0);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // keep relu inputs away from the kink
        let mut x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        x.data.iter_mut().for_each(|v| *v += v.signum() * 0.1);
        let inputs = [x];
        let relu = |t: &mut Tape, v: &[Var]| t.relu(v[0]);
        let sig = |t: &mut Tape, v: &[Var]| t.sigmoid(v[0]);
        let gap = |t: &mut Tape, v: &[Var]| t.global_avg_pool2d(v[0]).unwrap();
        let flat = |t: &mut Tape, v: &[Var]| t.flatten(v[0]).unwrap();
        for layer in [&relu as &dyn Fn(&mut Tape, &[Var]) -> Var, &sig, &gap, &flat] {
            assert!(probe_grad(&inputs, 0, layer, 12) <= 1e-4);
        }
    }

    #[test]
    fn maxpool_values_shapes_and_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = t.maxpool2d(x).unwrap();
        assert_eq!(t.value(y).data, vec![4.0]);

        let mut shape = (20, 11);
        for expect in [(10, 5), (5, 2), (2, 1)] {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::zeros(&[1, 1, shape.0, shape.1]), false);
            let y = t.maxpool2d(x).unwrap();
            shape = (t.shape(y)[2], t.shape(y)[3]);
            assert_eq!(shape, expect);
        }

        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap(), true);
        let y = t.maxpool2d(x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0], "first index wins ties");

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inputs = [rand_tensor(&mut rng, &[2, 2, 5, 4])];
        let pool = |t: &mut Tape, v: &[Var]| t.maxpool2d(v[0]).unwrap();
        assert!(probe_grad(&inputs, 0, &pool, 14) <= 1e-4);
    }

    #[test]
    fn dropout_modes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[100_000], 1.0), true);
        assert_eq!(t.dropout(x, 0.0, true, 1).unwrap(), x);
        assert_eq!(t.dropout(x, 0.7, false, 1).unwrap(), x);
        let y = t.dropout(x, 0.3, true, 1).unwrap();
        let zeros = t.value(y).data.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.3).abs() <= 0.01, "{zeros}");
        let kept = t.value(y).data.iter().find(|&&v| v != 0.0).copied().unwrap();
        assert!((kept - 1.0 / 0.7).abs() < 1e-15);
        let y2 = t.dropout(x, 0.3, true, 1).unwrap();
        assert_eq!(t.value(y).data, t.value(y2).data);
        assert!(t.dropout(x, 1.0, true, 1).is_err());
    }

    #[test]
    fn linear_identity_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mut eye = Tensor::zeros(&[4, 4]);
        (0..4).for_each(|i| eye.data[i * 4 + i] = 1.0);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.leaf(x.clone(), false), t.leaf(eye, false), t.leaf(Tensor::zeros(&[4]), false));
        let y = t.linear(xv, wv, bv).unwrap();
        assert_eq!(t.value(y), &x);

        let inputs = [x, rand_tensor(&mut rng, &[4, 2]), rand_tensor(&mut rng, &[2])];
        let lin = |t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], v[2]).unwrap();
        for which in 0..3 {
            assert!(probe_grad(&inputs, which, &lin, 16) <= 1e-4);
        }
    }

    #[test]
    fn pooling_and_channel_scaling() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[2, 3, 4, 5], 2.5), false);
        let z = t.global_avg_pool2d(x).unwrap();
        assert_eq!(t.shape(z), &[2, 3, 1, 1]);
        assert!(t.value(z).data.iter().all(|&v| v == 2.5));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xr = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let xv = t.leaf(xr.clone(), false);
        let ones = t.leaf(Tensor::full(&[2, 3, 1, 1], 1.0), false);
        let y = t.channelwise_mul(xv, ones).unwrap();
        assert_eq!(t.value(y), &xr);

        let inputs = [xr, rand_tensor(&mut rng, &[2, 3, 1, 1])];
        let cm = |t: &mut Tape, v: &[Var]| t.channelwise_mul(v[0], v[1]).unwrap();
        for which in 0..2 {
            assert!(probe_grad(&inputs, which, &cm, 18) <= 1e-4);
        }
    }

    #[test]
    fn weighted_bce_values() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::full(&[4], 0.5), true);
        let l = t.weighted_bce(p, &[1.0, 0.0, 1.0, 0.0], 0.5).unwrap();
        assert!((t.value(l).data[0] - 0.5 * 2f64.ln()).abs() < 1e-15);

        let p2 = t.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(), true);
        let l2 = t.weighted_bce(p2, &[1.0, 0.0], 0.5).unwrap();
        assert!(t.value(l2).data[0] < 1e-6);
    }

    #[test]
    fn weighted_bce_gradient() {
        let y = [1.0, 0.0, 1.0, 1.0, 0.0];
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let pv = t.leaf(Tensor::new(vec![5], p.to_vec()).unwrap(), true);
            let l = t.weighted_bce(pv, &y, 0.52).unwrap();
            let v = t.value(l).data[0];
            t.backward(l).unwrap();
            Ok((v, t.grad(pv).unwrap().to_vec()))
        };
        assert!(grad_check(f, &[0.2, 0.7, 0.9, 0.4, 0.05], 1e-6).unwrap() <= 1e-6);
    }

    proptest! {
        #[test]
        fn half_weight_is_half_unweighted(p in prop::collection::vec(0.001f64..0.999, 1..20), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = p.iter().map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
            let mut t = Tape::new();
            let pv = t.leaf(Tensor::new(vec![p.len()], p.clone()).unwrap(), false);
            let l = t.weighted_bce(pv, &y, 0.5).unwrap();
            let plain: f64 = p.iter().zip(&y).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / p.len() as f64;
            prop_assert!((t.value(l).data[0] - 0.5 * plain).abs() <= 1e-12 * (1.0 + plain));
        }
    }
}
