//! A fully-connected velocity network `u(x, t)` with hand-written reverse-mode
//! gradients, Adam with global-norm clipping, an EMA shadow, and the three
//! training loops: conditional flow matching, empirical flow matching with an
//! `M`-sample target, and mini-batch OT-paired conditional flow matching.
//!
//! Every training step draws its batch from the `(seed, "train/draws", step)`
//! stream: per sample `t ~ U[0, 1)`, the `x1` index, then `x0 ~ N(0, I)`.
//! EFM companions come from a separate `(seed, "train/companions", step)`
//! stream, so switching objectives never shifts the shared draws.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::TrainingSet;
use crate::efm_estimator::{anchored_estimate, draw_companions};
use crate::error::{Error, Result};
use crate::exact_field::ExactField;
use crate::ot::{min_cost_assignment, CostMatrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `a * sigmoid(a)`.
    Silu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeEmbedding {
    /// Appends `t` as one extra input.
    Scalar,
    /// `sin(ω_j t), cos(ω_j t)` for `k` frequencies spaced geometrically in `[1, 100]`.
    Sinusoidal { frequencies: usize },
}

impl TimeEmbedding {
    pub fn width(self) -> usize {
        match self {
            TimeEmbedding::Scalar => 1,
            TimeEmbedding::Sinusoidal { frequencies } => 2 * frequencies,
        }
    }

    fn write(self, t: f64, out: &mut [f64]) {
        match self {
            TimeEmbedding::Scalar => out[0] = t,
            TimeEmbedding::Sinusoidal { frequencies: k } => {
                for j in 0..k {
                    let frac = if k > 1 { j as f64 / (k - 1) as f64 } else { 0.0 };
                    let w = 100f64.powf(frac);
                    out[2 * j] = (w * t).sin();
                    out[2 * j + 1] = (w * t).cos();
                }
            }
        }
    }
}

/// One affine layer; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights and biases of every layer. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        ParamSet {
            layers: other
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters in checkpoint order: per layer, weight row-major then bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len());
        for (p, &v) in self.iter_mut().zip(flat) {
            *p = v;
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.iter_mut().for_each(|v| *v *= c);
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embedding: TimeEmbedding,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            embedding: TimeEmbedding::Sinusoidal { frequencies: 16 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    dim: usize,
    activation: Activation,
    embedding: TimeEmbedding,
    pub params: ParamSet,
}

/// Per-layer activations kept for the backward pass.
struct Tape {
    /// Inputs to each layer (`B x in`).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers (`B x out`).
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

/// A regression batch: inputs `(x, t)` and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x: Array2<f64>,
    pub t: Vec<f64>,
    pub target: Array2<f64>,
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Silu => a * sigmoid(a),
            Activation::Relu => a.max(0.0),
        }
    }

    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(a);
                s * (1.0 + a * (1.0 - s))
            }
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl VelocityNet {
    /// Glorot-uniform weights from the `(seed, "net/init")` stream, zero biases.
    pub fn new(dim: usize, cfg: &NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dim, cfg)?;
        let mut rng = rng::stream(seed, "net/init");
        for layer in &mut net.params.layers {
            let (fan_out, fan_in) = layer.weight.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-limit..=limit));
        }
        Ok(net)
    }

    pub fn zeros(dim: usize, cfg: &NetConfig) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("ambient dimension must be >= 1"));
        }
        if cfg.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be >= 1"));
        }
        if let TimeEmbedding::Sinusoidal { frequencies: 0 } = cfg.embedding {
            return Err(Error::invalid("sinusoidal embedding needs at least one frequency"));
        }
        let mut widths = vec![dim + cfg.embedding.width()];
        widths.extend(&cfg.hidden);
        widths.push(dim);
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(VelocityNet {
            dim,
            activation: cfg.activation,
            embedding: cfg.embedding,
            params: ParamSet { layers },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn embedding(&self) -> TimeEmbedding {
        self.embedding
    }

    pub fn config(&self) -> NetConfig {
        NetConfig {
            hidden: self.layer_dims()[1..self.params.layers.len()].to_vec(),
            activation: self.activation,
            embedding: self.embedding,
        }
    }

    /// Input width, hidden widths, output width.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.params.layers[0].weight.ncols()];
        dims.extend(self.params.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    fn input_matrix(&self, x: &Array2<f64>, t: &[f64]) -> Array2<f64> {
        let b = x.nrows();
        let e = self.embedding.width();
        let mut input = Array2::zeros((b, self.dim + e));
        for (r, mut row) in input.rows_mut().into_iter().enumerate() {
            let slice = row.as_slice_mut().expect("standard layout");
            for (dst, &src) in slice[..self.dim].iter_mut().zip(x.row(r)) {
                *dst = src;
            }
            self.embedding.write(t[r], &mut slice[self.dim..]);
        }
        input
    }

    fn run(&self, x: &Array2<f64>, t: &[f64], keep: bool) -> Tape {
        let mut h = self.input_matrix(x, t);
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let last = self.params.layers.len() - 1;
        for (l, layer) in self.params.layers.iter().enumerate() {
            let mut a = h.dot(&layer.weight.t());
            a += &layer.bias;
            if keep {
                inputs.push(h);
            }
            if l == last {
                return Tape { inputs, pre, output: a };
            }
            let next = a.mapv(|v| self.activation.apply(v));
            if keep {
                pre.push(a);
            }
            h = next;
        }
        unreachable!("network has at least one layer")
    }

    fn check_inputs(&self, x: &Array2<f64>, t: &[f64]) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::invalid(format!(
                "input has dimension {}, network expects {}",
                x.ncols(),
                self.dim
            )));
        }
        if x.nrows() != t.len() {
            return Err(Error::invalid(format!("{} inputs but {} times", x.nrows(), t.len())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        Ok(self.forward_batch(&xm, &[t])?.into_raw_vec_and_offset().0)
    }

    /// Row-wise forward pass; `x` is `B x d`.
    pub fn forward_batch(&self, x: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        self.check_inputs(x, t)?;
        Ok(self.run(x, t, false).output)
    }

    /// Mean over the batch of `|u(x, t) - target|²` and its parameter gradient.
    pub fn grad(&self, batch: &TrainBatch) -> Result<(f64, ParamSet)> {
        self.grad_scaled(batch, 1.0)
    }

    /// Gradient of `scale` times the batch loss.
    pub fn grad_scaled(&self, batch: &TrainBatch, scale: f64) -> Result<(f64, ParamSet)> {
        self.check_inputs(&batch.x, &batch.t)?;
        if batch.x.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if batch.target.dim() != batch.x.dim() {
            return Err(Error::invalid("target shape differs from input shape"));
        }
        let finite = batch
            .x
            .iter()
            .chain(batch.target.iter())
            .chain(batch.t.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite value in batch".into()));
        }
        let b = batch.x.nrows() as f64;
        let tape = self.run(&batch.x, &batch.t, true);
        let diff = &tape.output - &batch.target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / b;

        let mut grads = ParamSet::zeros_like(&self.params);
        let mut g = diff.mapv(|v| 2.0 * scale * v / b);
        for l in (0..self.params.layers.len()).rev() {
            let gl = &mut grads.layers[l];
            gl.weight = g.t().dot(&tape.inputs[l]);
            gl.bias = g.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut dh = g.dot(&self.params.layers[l].weight);
            dh.zip_mut_with(&tape.pre[l - 1], |d, &a| *d *= self.activation.derivative(a));
            g = dh;
        }
        Ok((loss * scale, grads))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ParamSet::zeros_like(params),
            v: ParamSet::zeros_like(params),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Rescales `grads` to norm `max_norm` when it is larger. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    pub shadow: VelocityNet,
    pub decay: f64,
}

impl EmaShadow {
    pub fn new(net: &VelocityNet, decay: f64) -> Self {
        EmaShadow {
            shadow: net.clone(),
            decay,
        }
    }

    /// `shadow = decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &ParamSet) {
        let d = self.decay;
        for (s, &p) in self.shadow.params.iter_mut().zip(params.iter()) {
            *s = d * *s + (1.0 - d) * p;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Cfm,
    Efm { m: usize },
    Otcfm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub t_eps: f64,
    /// Loss is recorded at every step that is a multiple of this.
    pub log_every: usize,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Cfm,
            batch_size: 128,
            lr: 2e-4,
            steps: 2000,
            grad_clip: 1.0,
            ema_decay: 0.9999,
            seed: 0,
            t_eps: crate::exact_field::DEFAULT_T_EPS,
            log_every: 10,
            net: NetConfig::default(),
        }
    }
}

/// Largest batch accepted by OT pairing (the assignment is cubic).
pub const MAX_OT_BATCH: usize = 512;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::invalid(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return Err(Error::invalid(format!("t_eps must lie in (0, 1), got {}", self.t_eps)));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be >= 1"));
        }
        match self.objective {
            Objective::Efm { m: 0 } => return Err(Error::invalid("EFM needs M >= 1")),
            Objective::Otcfm if self.batch_size > MAX_OT_BATCH => {
                return Err(Error::invalid(format!(
                    "OT pairing supports batch_size <= {MAX_OT_BATCH}, got {}",
                    self.batch_size
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: VelocityNet,
    pub ema: EmaShadow,
    pub optimizer: Adam,
    pub trace: Vec<LossRecord>,
}

/// The regression batch used at `step`: shared draws, optional OT re-pairing,
/// and the objective's target.
pub fn step_batch(ts: &TrainingSet, cfg: &TrainConfig, step: usize) -> TrainBatch {
    let d = ts.dim();
    let n = ts.n();
    let bsz = cfg.batch_size;
    let mut rng = rng::indexed_stream(cfg.seed, "train/draws", step as u64);
    let mut times = Vec::with_capacity(bsz);
    let mut x1_idx = Vec::with_capacity(bsz);
    let mut x0 = vec![vec![0.0; d]; bsz];
    for row in x0.iter_mut() {
        times.push(rng.random::<f64>());
        x1_idx.push(rng.random_range(0..n));
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    if cfg.objective == Objective::Otcfm && bsz > 1 {
        let x1_rows: Vec<Vec<f64>> = x1_idx.iter().map(|&i| ts.row_f64(i)).collect();
        let perm = min_cost_assignment(&CostMatrix::squared_euclidean(&x0, &x1_rows));
        x1_idx = perm.iter().map(|&j| x1_idx[j]).collect();
    }
    let mut companions_rng = rng::indexed_stream(cfg.seed, "train/companions", step as u64);
    let mut x = Array2::zeros((bsz, d));
    let mut target = Array2::zeros((bsz, d));
    let t_cap = 1.0 - cfg.t_eps;
    for b in 0..bsz {
        let t = times[b];
        let x1 = ts.row(x1_idx[b]);
        let xt: Vec<f64> = (0..d).map(|j| (1.0 - t) * x0[b][j] + t * f64::from(x1[j])).collect();
        let u: Vec<f64> = match cfg.objective {
            Objective::Cfm | Objective::Otcfm => (0..d).map(|j| f64::from(x1[j]) - x0[b][j]).collect(),
            Objective::Efm { m } => {
                let mut indices = vec![x1_idx[b]];
                indices.extend(draw_companions(&mut companions_rng, n, m));
                anchored_estimate(&x0[b], &xt, t, t.min(t_cap), &indices, ts).0
            }
        };
        for j in 0..d {
            x[[b, j]] = xt[j];
            target[[b, j]] = u[j];
        }
    }
    TrainBatch { x, t: times, target }
}

/// Runs the configured objective from a freshly initialized network.
pub fn train(ts: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = VelocityNet::new(ts.dim(), &cfg.net, cfg.seed)?;
    train_from(ts, cfg, net)
}

pub fn train_from(ts: &TrainingSet, cfg: &TrainConfig, mut net: VelocityNet) -> Result<TrainOutcome> {
    cfg.validate()?;
    if net.dim() != ts.dim() {
        return Err(Error::invalid(format!(
            "network dimension {} differs from data dimension {}",
            net.dim(),
            ts.dim()
        )));
    }
    let mut opt = Adam::new(&net.params, cfg.lr);
    let mut ema = EmaShadow::new(&net, cfg.ema_decay);
    let mut trace = Vec::new();
    for step in 0..cfg.steps {
        let batch = step_batch(ts, cfg, step);
        let (loss, mut grads) = net.grad(&batch).map_err(|e| Error::Training {
            step,
            message: e.to_string(),
        })?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss is {loss}"),
            });
        }
        if step % cfg.log_every == 0 {
            trace.push(LossRecord { step, loss });
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.update(&mut net.params, &grads);
        if !net.params.all_finite() {
            return Err(Error::Training {
                step,
                message: "non-finite parameters after update".into(),
            });
        }
        ema.update(&net.params);
    }
    Ok(TrainOutcome {
        net,
        ema,
        optimizer: opt,
        trace,
    })
}

fn expect_objective(cfg: &TrainConfig, ok: bool, name: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} called with objective {:?}",
            cfg.objective
        )))
    }
}

pub fn train_cfm(ts: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_objective(cfg, cfg.objective == Objective::Cfm, "train_cfm")?;
    train(ts, cfg)
}

pub fn train_efm(ts: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_objective(cfg, matches!(cfg.objective, Objective::Efm { .. }), "train_efm")?;
    train(ts, cfg)
}

pub fn train_otcfm(ts: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_objective(cfg, cfg.objective == Objective::Otcfm, "train_otcfm")?;
    train(ts, cfg)
}

/// For each `t` in the grid, the mean of `|u(x_t, t) - u*(x_t, t)|²` over
/// `n_mc` draws `x0 ~ N(0, I)`, `x1 ~ uniform`, from the
/// `(seed, "approx-error", k)` stream of grid point `k`.
pub fn approx_error_curve(
    net: &VelocityNet,
    ts: &TrainingSet,
    t_grid: &[f64],
    n_mc: usize,
    seed: u64,
    t_eps: f64,
) -> Result<Vec<(f64, f64)>> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be >= 1"));
    }
    let field = ExactField::new(ts, t_eps)?;
    let d = ts.dim();
    t_grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            if t > field.t_max() {
                return Err(Error::Singularity { t, t_eps });
            }
            let mut rng = rng::indexed_stream(seed, "approx-error", k as u64);
            let mut x = Array2::zeros((n_mc, d));
            for mut row in x.rows_mut() {
                let x0: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let x1 = ts.row(rng.random_range(0..ts.n()));
                for j in 0..d {
                    row[j] = (1.0 - t) * x0[j] + t * f64::from(x1[j]);
                }
            }
            let exact: Vec<Vec<f64>> = (0..n_mc)
                .into_par_iter()
                .map(|r| field.velocity(x.row(r).as_slice().expect("row"), t))
                .collect::<Result<_>>()?;
            let learned = net.forward_batch(&x, &vec![t; n_mc])?;
            let mut total = 0.0;
            for (r, ex) in exact.iter().enumerate() {
                total += ex
                    .iter()
                    .zip(learned.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            Ok((t, total / n_mc as f64))
        })
        .collect()
}

// Checkpoint files.
//
// Little-endian layout:
//
//   magic b"FMNN" | version u32 = 1
//   dim u32 | activation u32 (0 silu, 1 relu)
//   embedding u32 (0 scalar, 1 sinusoidal) | frequencies u32 (0 for scalar)
//   width count u32 (layers + 1) | widths u32 x count
//   parameter count P u64
//   parameters f32 x P (per layer: weight row-major out x in, then bias)
//   optimizer tag u32 (0 none, 1 adam)
//     adam: step u64 | lr f64 | beta1 f64 | beta2 f64 | eps f64 | m f32 x P | v f32 x P
//   ema tag u32 (0 none, 1 present)
//     ema: decay f64 | shadow f32 x P

pub const FMNN_MAGIC: &[u8; 4] = b"FMNN";
pub const FMNN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: VelocityNet,
    pub optimizer: Option<Adam>,
    pub ema: Option<EmaShadow>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_params(out: &mut Vec<u8>, p: &ParamSet) {
    for &v in p.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let at = self.cur.position();
        let mut buf = [0u8; N];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| Error::format(at, format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.bytes::<4>(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.bytes::<8>(what).map(u64::from_le_bytes)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        self.bytes::<8>(what).map(f64::from_le_bytes)
    }

    fn params(&mut self, into: &mut ParamSet, what: &str) -> Result<()> {
        for p in into.iter_mut() {
            *p = f64::from(f32::from_le_bytes(self.bytes::<4>(what)?));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.net;
        let mut out = Vec::new();
        out.extend_from_slice(FMNN_MAGIC);
        put_u32(&mut out, FMNN_VERSION);
        put_u32(&mut out, net.dim as u32);
        put_u32(
            &mut out,
            match net.activation {
                Activation::Silu => 0,
                Activation::Relu => 1,
            },
        );
        let (kind, freqs) = match net.embedding {
            TimeEmbedding::Scalar => (0, 0),
            TimeEmbedding::Sinusoidal { frequencies } => (1, frequencies as u32),
        };
        put_u32(&mut out, kind);
        put_u32(&mut out, freqs);
        let widths = net.layer_dims();
        put_u32(&mut out, widths.len() as u32);
        for w in widths {
            put_u32(&mut out, w as u32);
        }
        out.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
        put_params(&mut out, &net.params);
        match &self.optimizer {
            None => put_u32(&mut out, 0),
            Some(adam) => {
                put_u32(&mut out, 1);
                out.extend_from_slice(&adam.step.to_le_bytes());
                for v in [adam.lr, adam.beta1, adam.beta2, adam.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_params(&mut out, &adam.m);
                put_params(&mut out, &adam.v);
            }
        }
        match &self.ema {
            None => put_u32(&mut out, 0),
            Some(ema) => {
                put_u32(&mut out, 1);
                out.extend_from_slice(&ema.decay.to_le_bytes());
                put_params(&mut out, &ema.shadow.params);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            cur: Cursor::new(bytes),
        };
        if &r.bytes::<4>("magic")? != FMNN_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"FMNN\""));
        }
        let version = r.u32("version")?;
        if version != FMNN_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let dim = r.u32("dim")? as usize;
        let at = r.cur.position();
        let activation = match r.u32("activation")? {
            0 => Activation::Silu,
            1 => Activation::Relu,
            other => return Err(Error::format(at, format!("unknown activation {other}"))),
        };
        let at = r.cur.position();
        let kind = r.u32("embedding")?;
        let freqs = r.u32("frequencies")? as usize;
        let embedding = match kind {
            0 => TimeEmbedding::Scalar,
            1 => TimeEmbedding::Sinusoidal { frequencies: freqs },
            other => return Err(Error::format(at, format!("unknown embedding {other}"))),
        };
        let at = r.cur.position();
        let count = r.u32("width count")? as usize;
        if !(2..=1024).contains(&count) {
            return Err(Error::format(at, format!("implausible width count {count}")));
        }
        let mut widths = Vec::with_capacity(count);
        for _ in 0..count {
            widths.push(r.u32("widths")? as usize);
        }
        let cfg = NetConfig {
            hidden: widths[1..count - 1].to_vec(),
            activation,
            embedding,
        };
        let mut net = VelocityNet::zeros(dim, &cfg).map_err(|e| Error::format(at, e.to_string()))?;
        if net.layer_dims() != widths {
            return Err(Error::format(
                at,
                format!("widths {widths:?} inconsistent with dim {dim}"),
            ));
        }
        let at = r.cur.position();
        let p = r.u64("parameter count")?;
        if p != net.params.len() as u64 {
            return Err(Error::format(at, format!("parameter count {p} does not match widths")));
        }
        r.params(&mut net.params, "parameters")?;
        let at = r.cur.position();
        let optimizer = match r.u32("optimizer tag")? {
            0 => None,
            1 => {
                let step = r.u64("adam step")?;
                let lr = r.f64("adam lr")?;
                let beta1 = r.f64("adam beta1")?;
                let beta2 = r.f64("adam beta2")?;
                let eps = r.f64("adam eps")?;
                let mut m = ParamSet::zeros_like(&net.params);
                let mut v = ParamSet::zeros_like(&net.params);
                r.params(&mut m, "adam first moment")?;
                r.params(&mut v, "adam second moment")?;
                Some(Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step,
                    m,
                    v,
                })
            }
            other => return Err(Error::format(at, format!("unknown optimizer tag {other}"))),
        };
        let at = r.cur.position();
        let ema = match r.u32("ema tag")? {
            0 => None,
            1 => {
                let decay = r.f64("ema decay")?;
                let mut shadow = net.clone();
                r.params(&mut shadow.params, "ema parameters")?;
                Some(EmaShadow { shadow, decay })
            }
            other => return Err(Error::format(at, format!("unknown ema tag {other}"))),
        };
        let end = r.cur.position();
        if end != bytes.len() as u64 {
            return Err(Error::format(end, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { net, optimizer, ema })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl From<&TrainOutcome> for Checkpoint {
    fn from(o: &TrainOutcome) -> Self {
        Checkpoint {
            net: o.net.clone(),
            optimizer: Some(o.optimizer.clone()),
            ema: Some(o.ema.clone()),
        }
    }
}
