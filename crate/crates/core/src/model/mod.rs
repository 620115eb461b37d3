//! The seizure predictor: three conv blocks, squeeze-and-excitation
//! channel attention on the last feature map, and a dense classifier head.
//!
//! ```text
//! [N,19,20,11]
//!   block x3: conv(k, same) -> batchnorm -> relu -> dropout -> maxpool 2x2
//!   (20,11) -> (10,5) -> (5,2) -> (2,1), channels 32 -> 64 -> 128
//!   SE: z = mean_hw(x); s = sigmoid(W2 relu(W1 z)); x = s * x
//!   flatten(256) -> dense(128) -> relu -> dense(1) -> sigmoid
//! ```

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::mfcc::MfccTensor;
use crate::tensor::{BatchStats, BnMode, Tape, Tensor, Var};

/// Probabilities at or above this are classed preictal.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Excitation bias that saturates the SE sigmoid; see [`SeizurePredictor::pin_attention`].
pub const SE_PIN_BIAS: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub conv_channels: [usize; 3],
    pub kernel: (usize, usize),
    pub dropout_p: f64,
    pub se_reduction: usize,
    pub dense_units: usize,
    /// `false` builds the no-attention ablation (SE block removed).
    pub attention: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 19,
            in_height: 20,
            in_width: 11,
            conv_channels: [32, 64, 128],
            kernel: (2, 2),
            dropout_p: 0.3,
            se_reduction: 8,
            dense_units: 128,
            attention: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let c = self.conv_channels;
        if c[0] == 0 || !(c[0] < c[1] && c[1] < c[2]) {
            out.push(format!("conv_channels {c:?} must be positive and strictly increasing"));
        }
        if self.se_reduction == 0 || !c[2].is_multiple_of(self.se_reduction) {
            out.push(format!("se_reduction {} must divide {}", self.se_reduction, c[2]));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            out.push(format!("dropout {} must lie in [0, 1)", self.dropout_p));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            out.push("kernel sides must be positive".into());
        }
        if self.dense_units == 0 || self.in_channels == 0 {
            out.push("dense_units and in_channels must be positive".into());
        }
        if self.trajectory().last().is_none_or(|&(h, w)| h == 0 || w == 0) {
            out.push(format!("input {}x{} is too small for three 2x2 pools", self.in_height, self.in_width));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// "Same" padding: `ceil((k - 1) / 2)` per side, trailing excess cropped.
    pub fn padding(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    /// Spatial size after each pooling stage.
    pub fn trajectory(&self) -> Vec<(usize, usize)> {
        let mut hw = (self.in_height, self.in_width);
        (0..3)
            .map(|_| {
                hw = (hw.0 / 2, hw.1 / 2);
                hw
            })
            .collect()
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.trajectory()[2];
        self.conv_channels[2] * h * w
    }

    /// Parameter names, shapes and initializers, in storage order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let (kh, kw) = self.kernel;
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (b, &cout) in self.conv_channels.iter().enumerate() {
            specs.push(ParamSpec::weight(format!("conv{b}.weight"), vec![cout, cin, kh, kw], cin * kh * kw));
            specs.push(ParamSpec::fill(format!("conv{b}.bias"), vec![cout], 0.0));
            specs.push(ParamSpec::fill(format!("bn{b}.gamma"), vec![cout], 1.0));
            specs.push(ParamSpec::fill(format!("bn{b}.beta"), vec![cout], 0.0));
            cin = cout;
        }
        if self.attention {
            let c = self.conv_channels[2];
            let r = c / self.se_reduction.max(1);
            specs.push(ParamSpec::weight("se.w1".into(), vec![r, c, 1, 1], c));
            specs.push(ParamSpec::fill("se.b1".into(), vec![r], 0.0));
            specs.push(ParamSpec::weight("se.w2".into(), vec![c, r, 1, 1], r));
            specs.push(ParamSpec::fill("se.b2".into(), vec![c], 0.0));
        }
        let (f, d) = (self.flat_features(), self.dense_units);
        specs.push(ParamSpec::weight("dense.weight".into(), vec![f, d], f));
        specs.push(ParamSpec::fill("dense.bias".into(), vec![d], 0.0));
        specs.push(ParamSpec::weight("out.weight".into(), vec![d, 1], d));
        specs.push(ParamSpec::fill("out.bias".into(), vec![1], 0.0));
        specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// He-uniform fan-in for weights; `None` for constant-initialized tensors.
    pub fan_in: Option<usize>,
    pub fill: f64,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamSpec { name, shape, fan_in: Some(fan_in), fill: 0.0 }
    }
    fn fill(name: String, shape: Vec<usize>, fill: f64) -> Self {
        ParamSpec { name, shape, fan_in: None, fill }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Running batch-norm statistics used in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Batch statistics and dropout; `dropout_seed` fixes the masks.
    Train { dropout_seed: u64 },
    Eval,
}

/// A recorded forward pass. `bn_stats` is empty in evaluation mode.
pub struct Forward {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub prob: Var,
    pub se_scale: Option<Var>,
    pub block_shapes: Vec<(usize, usize)>,
    pub bn_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeizurePredictor {
    pub cfg: ModelConfig,
    pub params: Vec<Param>,
    pub running: Vec<RunningStats>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// He-uniform weights `U(-a, a)` with `a = sqrt(6 / fan_in)`, zero biases,
/// unit batch-norm scale.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<SeizurePredictor> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = cfg
        .layout()
        .into_iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let data = match spec.fan_in {
                Some(fan_in) => {
                    let a = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                None => vec![spec.fill; n],
            };
            Param { name: spec.name, value: Tensor { shape: spec.shape, data } }
        })
        .collect();
    let running = cfg
        .conv_channels
        .iter()
        .map(|&c| RunningStats { mean: vec![0.0; c], var: vec![1.0; c] })
        .collect();
    Ok(SeizurePredictor { cfg: cfg.clone(), params, running, step: 0 })
}

/// Stacks feature tensors into an `[N, C, H, W]` batch.
pub fn stack_batch<T: Float>(items: &[&MfccTensor<T>]) -> Result<Tensor> {
    let Some(first) = items.first() else {
        bail!(Shape, "empty batch");
    };
    let shape = first.shape;
    let mut data = Vec::with_capacity(items.len() * shape.iter().product::<usize>());
    for t in items {
        if t.shape != shape {
            bail!(Shape, "batch mixes shapes {:?} and {:?}", shape, t.shape);
        }
        data.extend(t.values.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
    }
    Tensor::new(vec![items.len(), shape[0], shape[1], shape[2]], data)
}

/// `1` where `p >= 0.5`.
pub fn classify(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= DECISION_THRESHOLD)).collect()
}

fn block_seed(seed: u64, block: usize) -> u64 {
    seed ^ (block as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl SeizurePredictor {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Forces every SE gate to exactly 1 by zeroing the second excitation
    /// weight and setting its bias to [`SE_PIN_BIAS`]; `sigmoid(60)` rounds
    /// to 1.0 in f64.
    pub fn pin_attention(&mut self) -> Result<()> {
        let (Some(_), Some(_)) = (self.param("se.w2"), self.param("se.b2")) else {
            bail!(Usage, "model has no attention block");
        };
        self.param_mut("se.w2").unwrap().value.data.fill(0.0);
        self.param_mut("se.b2").unwrap().value.data.fill(SE_PIN_BIAS);
        Ok(())
    }

    /// Same parameters minus the SE block.
    pub fn without_attention(&self) -> SeizurePredictor {
        SeizurePredictor {
            cfg: ModelConfig { attention: false, ..self.cfg.clone() },
            params: self.params.iter().filter(|p| !p.name.starts_with("se.")).cloned().collect(),
            running: self.running.clone(),
            step: self.step,
        }
    }

    /// Runs the network on `batch` and keeps the tape. With `grad` set the
    /// parameters are differentiable leaves, in `self.params` order.
    pub fn forward(&self, batch: Tensor, mode: Mode, grad: bool) -> Result<Forward> {
        let cfg = &self.cfg;
        let expect = [cfg.in_channels, cfg.in_height, cfg.in_width];
        if batch.shape.len() != 4 || batch.shape[1..] != expect || batch.shape[0] == 0 {
            bail!(Shape, "model input {:?}, expected [N, {}, {}, {}]", batch.shape, expect[0], expect[1], expect[2]);
        }
        let mut t = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| t.leaf(p.value.clone(), grad)).collect();
        let mut x = t.leaf(batch, false);
        let pad = cfg.padding();
        let (train, seed) = match mode {
            Mode::Train { dropout_seed } => (true, dropout_seed),
            Mode::Eval => (false, 0),
        };
        let mut hw = (cfg.in_height, cfg.in_width);
        let mut block_shapes = Vec::with_capacity(3);
        let mut bn_stats = Vec::new();
        for b in 0..3 {
            let p = &params[4 * b..4 * b + 4];
            let mut y = t.conv2d(x, p[0], p[1], pad)?;
            if t.shape(y)[2..] != [hw.0, hw.1] {
                y = t.crop(y, hw.0, hw.1)?;
            }
            let bn_mode = if train {
                BnMode::Train
            } else {
                BnMode::Eval { mean: &self.running[b].mean, var: &self.running[b].var }
            };
            let (y, stats) = t.batchnorm2d(y, p[2], p[3], bn_mode, cfg.bn_eps)?;
            bn_stats.extend(stats);
            t.check_finite(y, &format!("block {b} pre-activation"))?;
            let y = t.relu(y);
            let y = t.dropout(y, cfg.dropout_p, train, block_seed(seed, b))?;
            x = t.maxpool2d(y)?;
            hw = (t.shape(x)[2], t.shape(x)[3]);
            block_shapes.push(hw);
        }
        let mut next = 12;
        let mut se_scale = None;
        if cfg.attention {
            let p = &params[12..16];
            let z = t.global_avg_pool2d(x)?;
            let e = t.conv2d(z, p[0], p[1], (0, 0))?;
            let e = t.relu(e);
            let e = t.conv2d(e, p[2], p[3], (0, 0))?;
            let s = t.sigmoid(e);
            x = t.channelwise_mul(x, s)?;
            se_scale = Some(s);
            next = 16;
        }
        let p = &params[next..next + 4];
        let f = t.flatten(x)?;
        let h = t.linear(f, p[0], p[1])?;
        let h = t.relu(h);
        let logit = t.linear(h, p[2], p[3])?;
        let prob = t.sigmoid(logit);
        let n = t.shape(prob)[0];
        let prob = t.reshape(prob, vec![n])?;
        t.check_finite(prob, "model output")?;
        Ok(Forward { tape: t, params, prob, se_scale, block_shapes, bn_stats })
    }

    /// Evaluation-mode probabilities; does not touch the model.
    pub fn predict(&self, batch: Tensor) -> Result<Vec<f64>> {
        let fw = self.forward(batch, Mode::Eval, false)?;
        Ok(fw.tape.value(fw.prob).data.clone())
    }

    /// Evaluation-mode SE weights, `[N x C]` row-major.
    pub fn attention_weights(&self, batch: Tensor) -> Result<Vec<f64>> {
        let fw = self.forward(batch, Mode::Eval, false)?;
        match fw.se_scale {
            Some(s) => Ok(fw.tape.value(s).data.clone()),
            None => bail!(Usage, "model has no attention block"),
        }
    }

    /// Training-mode weighted BCE loss and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        batch: Tensor,
        targets: &[f64],
        w_pos: f64,
        dropout_seed: u64,
    ) -> Result<(f64, Vec<Vec<f64>>, Vec<BatchStats>)> {
        let mut fw = self.forward(batch, Mode::Train { dropout_seed }, true)?;
        let loss = fw.tape.weighted_bce(fw.prob, targets, w_pos)?;
        let value = fw.tape.value(loss).data[0];
        fw.tape.backward(loss)?;
        let grads = fw
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| fw.tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect();
        Ok((value, grads, fw.bn_stats))
    }

    /// Exponential moving average of batch statistics into the running ones.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let m = self.cfg.bn_momentum;
        for (run, s) in self.running.iter_mut().zip(stats) {
            for (r, v) in run.mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in run.var.iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }
}
