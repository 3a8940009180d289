//! Independent reference implementations shared by the integration tests
//! and the acceptance suite. Nothing here calls the library's numerics.

#![allow(dead_code, clippy::excessive_precision)]

use std::collections::BTreeSet;

use nvae::autodiff::{Tape, Var};
use nvae::model::{LatentLayout, ModelConfig, NvaeModel, Objective};
use nvae::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Special functions

/// B_{2k} / (2k (2k − 1)) for k = 1..=10.
const STIRLING: [f64; 10] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
    43867.0 / 244188.0,
    -174611.0 / 125400.0,
];

/// B_{2k} / (2k) for k = 1..=10.
const PSI_SERIES: [f64; 10] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
    43867.0 / 14364.0,
    -174611.0 / 6600.0,
];

/// B_{2k} for k = 1..=10.
const BERNOULLI: [f64; 10] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
    -174611.0 / 330.0,
];

const SHIFT_TO: f64 = 30.0;

fn shift_up(mut x: f64) -> (f64, Vec<f64>) {
    let mut skipped = Vec::new();
    while x < SHIFT_TO {
        skipped.push(x);
        x += 1.0;
    }
    (x, skipped)
}

/// Neumaier-compensated sum.
fn ksum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

/// ln Γ(x) by upward recurrence to x ≥ 30 and the Stirling series.
pub fn lgamma_series(x: f64) -> f64 {
    assert!(x > 0.0);
    let (z, skipped) = shift_up(x);
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut p = inv;
    let mut tail = Vec::new();
    for c in STIRLING {
        tail.push(c * p);
        p *= inv2;
    }
    let head = [
        (z - 0.5) * z.ln(),
        -z,
        0.5 * (2.0 * std::f64::consts::PI).ln(),
    ];
    ksum(head.into_iter().chain(tail).chain(skipped.iter().map(|s| -s.ln())))
}

/// ψ(x) by upward recurrence and the asymptotic series.
pub fn digamma_series(x: f64) -> f64 {
    assert!(x > 0.0);
    let (z, skipped) = shift_up(x);
    let inv2 = 1.0 / (z * z);
    let mut p = inv2;
    let mut tail = Vec::new();
    for c in PSI_SERIES {
        tail.push(-c * p);
        p *= inv2;
    }
    let head = [z.ln(), -0.5 / z];
    ksum(head.into_iter().chain(tail).chain(skipped.iter().map(|s| -1.0 / s)))
}

/// ψ'(x) by upward recurrence and the asymptotic series.
pub fn trigamma_series(x: f64) -> f64 {
    assert!(x > 0.0);
    let (z, skipped) = shift_up(x);
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut p = inv2 * inv;
    let mut tail = Vec::new();
    for b in BERNOULLI {
        tail.push(b * p);
        p *= inv2;
    }
    let head = [inv, 0.5 * inv2];
    ksum(head.into_iter().chain(tail).chain(skipped.iter().map(|s| 1.0 / (s * s))))
}

/// `(x, ln Γ(x), ψ(x), ψ'(x))` from a 40-digit arbitrary-precision
/// evaluation, rounded to 20 significant digits.
pub const FROZEN: [(f64, f64, f64, f64); 13] = [
    (0.001, 6.9071788853838536825, -1000.5755719318103005, 1000001.642533195869),
    (0.01, 4.5994798780420217225, -100.5608854578686745, 10001.62121352831322),
    (0.1, 2.2527126517342059599, -10.423754940411076795, 101.43329915079275882),
    (0.5, 0.57236494292470008707, -1.9635100260214234794, 4.9348022005446793094),
    (1.5, -0.12078223763524522235, 0.036489973978576520559, 0.93480220054467930942),
    (2.5, 0.28468287047291915963, 0.70315664064524318723, 0.49035775610023486497),
    (3.7, 1.4280723266653879219, 1.1671535393615113859, 0.3100378576700383191),
    (10.0, 12.801827480081469611, 2.2517525890667211076, 0.10516633568168574612),
    (33.3, 82.603723581654952928, 3.4904672385202428639, 0.030485444095338885149),
    (100.0, 359.13420536957539878, 4.6001618527380874002, 0.010050166663333571395),
    (1234.5, 7550.5509010778948957, 7.1180162318279978433, 0.0008103727271269666527),
    (1e5, 1051287.7089736568949, 11.512920464961895087, 0.000010000050000166666667),
    (1e6, 12815504.56914761166, 13.815510057964190771, 1.0000005000001666667e-6),
];

/// Positive root of ψ.
pub const DIGAMMA_ROOT: f64 = 1.4616321449683623;

/// `n` points spaced evenly in log between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

// Monte-Carlo divergences

/// Mean and standard error of a sample.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = ksum(v.iter().copied()) / n;
    let var = ksum(v.iter().map(|x| (x - m) * (x - m))) / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `E_q[log q(z) − log p(z)]` for a diagonal Gaussian `q` and `p = N(0, I)`.
pub fn gauss_kl_mc(mean: &[f64], log_var: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut diffs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut d = 0.0;
        for (&m, &lv) in mean.iter().zip(log_var) {
            let e: f64 = StandardNormal.sample(rng);
            let z = m + (0.5 * lv).exp() * e;
            // log q − log p; the 2π terms cancel.
            d += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        diffs.push(d);
    }
    mean_se(&diffs)
}

fn dirichlet_log_norm(alpha: &[f64]) -> f64 {
    lgamma_series(alpha.iter().sum()) - alpha.iter().map(|&a| lgamma_series(a)).sum::<f64>()
}

/// `E_q[log q(π) − log p(π)]` for Dirichlet `q` and `p`, sampling `π` by
/// normalized gamma draws.
pub fn dirichlet_kl_mc(q: &[f64], p: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let gammas: Vec<Gamma<f64>> = q.iter().map(|&a| Gamma::new(a, 1.0).unwrap()).collect();
    let norm = dirichlet_log_norm(q) - dirichlet_log_norm(p);
    let mut logs = vec![0.0; q.len()];
    let mut diffs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut total = 0.0;
        for (l, g) in logs.iter_mut().zip(&gammas) {
            let v = g.sample(rng);
            total += v;
            *l = v.ln();
        }
        let lt = total.ln();
        let d: f64 = logs.iter().zip(q.iter().zip(p)).map(|(l, (a, b))| (a - b) * (l - lt)).sum();
        diffs.push(norm + d);
    }
    mean_se(&diffs)
}

/// Bernoulli log likelihood evaluated directly in probability space.
pub fn bernoulli_ll_naive(logits: &[f64], x: &[f64]) -> f64 {
    logits
        .iter()
        .zip(x)
        .map(|(&l, &xv)| {
            let p = 1.0 / (1.0 + (-l).exp());
            xv * p.ln() + (1.0 - xv) * (1.0 - p).ln()
        })
        .sum()
}

// Finite differences

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so components that are
/// zero up to rounding are compared absolutely.
pub fn grad_rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` with respect to every element of `inputs`.
pub fn fd_gradients(f: &mut dyn FnMut(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let x0 = inputs[t].data()[i];
            work[t].data_mut()[i] = x0 + h;
            let up = f(&work);
            work[t].data_mut()[i] = x0 - h;
            let down = f(&work);
            work[t].data_mut()[i] = x0;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

// Random computation graphs

#[derive(Debug, Clone, Copy)]
pub enum Bin {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
pub enum Form {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug, Clone)]
pub enum Step {
    Binary { op: Bin, leaf: usize, form: Form },
    MatMul { leaf: usize },
    Scale(f64),
    Neg,
    Shift(f64),
    ExpTanh,
    LogSoftplus,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Square,
    Lgamma,
    Digamma,
    Reshape,
    ConcatSlice { leaf: usize, axis: usize, first: bool },
    SumColsBack,
    SumRowsBack,
    LogSumExpBack,
    LogSoftmax,
    ClassMask { labels: Vec<usize>, bias: bool, leaf: usize },
}

impl Step {
    /// Tape operations this step records.
    pub fn ops(&self) -> &'static [&'static str] {
        match self {
            Step::Binary { op: Bin::Add, .. } => &["add"],
            Step::Binary { op: Bin::Sub, .. } => &["sub"],
            Step::Binary { op: Bin::Mul, .. } => &["mul"],
            Step::MatMul { .. } => &["matmul"],
            Step::Scale(_) => &["scale"],
            Step::Neg => &["neg"],
            Step::Shift(_) => &["shift"],
            Step::ExpTanh => &["tanh", "exp"],
            Step::LogSoftplus => &["softplus", "shift", "log"],
            Step::Tanh => &["tanh"],
            Step::Relu => &["relu"],
            Step::Sigmoid => &["sigmoid"],
            Step::Softplus => &["softplus"],
            Step::Square => &["square", "scale"],
            Step::Lgamma => &["softplus", "shift", "lgamma"],
            Step::Digamma => &["softplus", "shift", "digamma"],
            Step::Reshape => &["reshape"],
            Step::ConcatSlice { .. } => &["concat", "slice"],
            Step::SumColsBack => &["sum_cols", "add"],
            Step::SumRowsBack => &["sum_rows", "add"],
            Step::LogSumExpBack => &["log_sum_exp", "sub"],
            Step::LogSoftmax => &["log_softmax"],
            Step::ClassMask { .. } => &["class_mask", "matmul"],
        }
    }
}

pub const ALL_OPS: [&str; 26] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "shift",
    "exp",
    "log",
    "tanh",
    "relu",
    "sigmoid",
    "softplus",
    "square",
    "lgamma",
    "digamma",
    "sum",
    "mean",
    "sum_cols",
    "sum_rows",
    "reshape",
    "concat",
    "slice",
    "log_sum_exp",
    "log_softmax",
    "class_mask",
];

/// A random graph over an `m × n` working value.
#[derive(Debug, Clone)]
pub struct Graph {
    pub rows: usize,
    pub cols: usize,
    pub leaves: Vec<Tensor>,
    pub steps: Vec<Step>,
    pub weights: Tensor,
    pub use_mean: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

impl Graph {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let rows = r.random_range(2..=4);
        let cols = r.random_range(2..=4);
        let mut leaves = vec![uniform(&mut r, &[rows, cols], 1.5)];
        let mut steps = Vec::new();
        let n_steps = r.random_range(5..=9);
        for _ in 0..n_steps {
            let mut leaf = |shape: &[usize], scale: f64, r: &mut ChaCha8Rng| {
                leaves.push(uniform(r, shape, scale));
                leaves.len() - 1
            };
            let step = match r.random_range(0..23) {
                0..=2 => {
                    let op = [Bin::Add, Bin::Sub, Bin::Mul][r.random_range(0..3)];
                    let form = [Form::Same, Form::Scalar, Form::Row, Form::Col][r.random_range(0..4)];
                    let shape = match form {
                        Form::Same => vec![rows, cols],
                        Form::Scalar => vec![1, 1],
                        Form::Row => vec![1, cols],
                        Form::Col => vec![rows, 1],
                    };
                    Step::Binary { op, leaf: leaf(&shape, 1.0, &mut r), form }
                }
                3 => Step::MatMul { leaf: leaf(&[cols, cols], 0.8, &mut r) },
                4 => Step::Scale(r.random_range(-2.0..2.0)),
                5 => Step::Neg,
                6 => Step::Shift(r.random_range(-1.0..1.0)),
                7 => Step::ExpTanh,
                8 => Step::LogSoftplus,
                9 => Step::Tanh,
                10 => Step::Relu,
                11 => Step::Sigmoid,
                12 => Step::Softplus,
                13 => Step::Square,
                14 => Step::Lgamma,
                15 => Step::Digamma,
                16 => Step::Reshape,
                17 => Step::ConcatSlice {
                    leaf: leaf(&[rows, cols], 1.0, &mut r),
                    axis: r.random_range(0..2),
                    first: r.random(),
                },
                18 => Step::SumColsBack,
                19 => Step::SumRowsBack,
                20 => Step::LogSumExpBack,
                21 => Step::LogSoftmax,
                _ => {
                    let bias = r.random();
                    let labels = (0..rows).map(|_| r.random_range(0..cols)).collect();
                    let width = cols * (1 + usize::from(bias));
                    Step::ClassMask { labels, bias, leaf: leaf(&[width, cols], 0.8, &mut r) }
                }
            };
            steps.push(step);
        }
        let weights = uniform(&mut r, &[rows, cols], 1.0);
        let use_mean = r.random_range(0..4) == 0;
        Self { rows, cols, leaves, steps, weights, use_mean }
    }

    pub fn ops(&self) -> BTreeSet<&'static str> {
        let mut s: BTreeSet<&'static str> = self.steps.iter().flat_map(|st| st.ops().iter().copied()).collect();
        s.insert(if self.use_mean { "mean" } else { "sum" });
        if !self.use_mean {
            s.insert("mul");
        }
        s
    }

    /// Records the graph on `tape` with the given leaf values.
    pub fn build(&self, tape: &mut Tape, leaves: &[Tensor]) -> nvae::Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = leaves.iter().map(|t| tape.variable(t.clone())).collect();
        let mut x = vars[0];
        for step in &self.steps {
            x = match step {
                Step::Binary { op, leaf, .. } => match op {
                    Bin::Add => tape.add(x, vars[*leaf])?,
                    Bin::Sub => tape.sub(x, vars[*leaf])?,
                    Bin::Mul => tape.mul(x, vars[*leaf])?,
                },
                Step::MatMul { leaf } => tape.matmul(x, vars[*leaf])?,
                Step::Scale(c) => tape.scale(x, *c)?,
                Step::Neg => tape.neg(x)?,
                Step::Shift(c) => tape.shift(x, *c)?,
                Step::ExpTanh => {
                    let t = tape.tanh(x)?;
                    tape.exp(t)?
                }
                Step::LogSoftplus => {
                    let s = tape.softplus(x)?;
                    let s = tape.shift(s, 0.1)?;
                    tape.log(s)?
                }
                Step::Tanh => tape.tanh(x)?,
                Step::Relu => tape.relu(x)?,
                Step::Sigmoid => tape.sigmoid(x)?,
                Step::Softplus => tape.softplus(x)?,
                Step::Square => {
                    let s = tape.square(x)?;
                    tape.scale(s, 0.5)?
                }
                Step::Lgamma | Step::Digamma => {
                    let s = tape.softplus(x)?;
                    let s = tape.shift(s, 0.5)?;
                    if matches!(step, Step::Lgamma) {
                        tape.lgamma(s)?
                    } else {
                        tape.digamma(s)?
                    }
                }
                Step::Reshape => {
                    let flat = tape.reshape(x, &[1, self.rows * self.cols])?;
                    tape.reshape(flat, &[self.rows, self.cols])?
                }
                Step::ConcatSlice { leaf, axis, first } => {
                    let c = tape.concat(&[x, vars[*leaf]], *axis)?;
                    let (start, end) = match (axis, first) {
                        (0, true) => (0, self.rows),
                        (0, false) => (1, self.rows + 1),
                        (_, true) => (0, self.cols),
                        (_, false) => (1, self.cols + 1),
                    };
                    tape.slice(c, *axis, start, end)?
                }
                Step::SumColsBack => {
                    let s = tape.sum_cols(x)?;
                    tape.add(x, s)?
                }
                Step::SumRowsBack => {
                    let s = tape.sum_rows(x)?;
                    tape.add(x, s)?
                }
                Step::LogSumExpBack => {
                    let s = tape.log_sum_exp(x)?;
                    tape.sub(x, s)?
                }
                Step::LogSoftmax => tape.log_softmax(x)?,
                Step::ClassMask { labels, bias, leaf } => {
                    let m = tape.class_mask(x, labels, self.cols, 1, *bias)?;
                    tape.matmul(m, vars[*leaf])?
                }
            };
        }
        let root = if self.use_mean {
            tape.mean(x)?
        } else {
            let w = tape.constant(self.weights.clone());
            let p = tape.mul(x, w)?;
            tape.sum(p)?
        };
        Ok((root, vars))
    }

    pub fn value(&self, leaves: &[Tensor]) -> f64 {
        let mut tape = Tape::new();
        let (root, _) = self.build(&mut tape, leaves).unwrap();
        tape.value(root).item().unwrap()
    }

    /// Largest elementwise relative error between backward and central
    /// differences.
    pub fn max_grad_error(&self, floor: f64) -> f64 {
        let mut tape = Tape::new();
        let (root, vars) = self.build(&mut tape, &self.leaves).unwrap();
        let grads = tape.backward(root).unwrap();
        let numeric = fd_gradients(&mut |l| self.value(l), &self.leaves, FD_STEP);
        let mut worst: f64 = 0.0;
        for (v, n) in vars.iter().zip(&numeric) {
            let zeros = Tensor::zeros(n.shape());
            let a = grads.get(*v).unwrap_or(&zeros);
            for (&ga, &gn) in a.data().iter().zip(n.data()) {
                worst = worst.max(grad_rel_err(ga, gn, floor));
            }
        }
        worst
    }
}

// Tiny model

/// `D = 6`, `L = 2`, `d_c = 1`, `d_s = 2`.
pub fn tiny_config(bias: bool) -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        layout: LatentLayout::new(2, 1, 2).unwrap(),
        encoder_hidden: vec![5],
        decoder_hidden: vec![5],
        alpha_p: 1.0,
        alpha_q: 10.0,
        beta_c: 2.0,
        beta_s: 1.0,
        bias_enabled: bias,
    }
}

pub fn tiny_model(seed: u64, bias: bool) -> NvaeModel {
    NvaeModel::new(tiny_config(bias), seed).unwrap()
}

/// A batch of `n` inputs in `[0, 1]` with alternating labels.
pub fn tiny_batch(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let x = Tensor::new(&[n, 6], (0..n * 6).map(|_| r.random_range(0.0..=1.0)).collect()).unwrap();
    (x, (0..n).map(|i| i % 2).collect())
}

pub fn normal(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

/// Worst relative error of the parameter gradient of `−mean(objective)` on
/// the tiny model.
pub fn tiny_model_grad_error(objective: Objective, bias: bool, floor: f64) -> f64 {
    let model = tiny_model(7, bias);
    let (x, labels) = tiny_batch(8, 4);
    let noise = vec![normal(9, &[4, model.layout().z_dim()])];
    let (_, g_enc, g_dec) = model.loss_and_grads(&x, &labels, &noise, objective).unwrap();
    let analytic: Vec<Tensor> = g_enc.into_iter().chain(g_dec).collect();

    let n_enc = model.encoder.len();
    let params: Vec<Tensor> = model.encoder.tensors().iter().chain(model.decoder.tensors()).cloned().collect();
    let names: Vec<String> = model
        .encoder
        .iter()
        .chain(model.decoder.iter())
        .map(|(n, _)| n.to_string())
        .collect();
    let loss = |p: &[Tensor]| {
        let mut m: NvaeModel = model.clone();
        for (i, (name, t)) in names.iter().zip(p).enumerate() {
            let store = if i < n_enc { &mut m.encoder } else { &mut m.decoder };
            store.set(name, t.clone()).unwrap();
        }
        let terms = m.evaluate(&x, &labels, &noise, objective).unwrap();
        -terms.objective.iter().sum::<f64>() / terms.len() as f64
    };
    let numeric = fd_gradients(&mut { loss }, &params, FD_STEP);
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&ga, &gn) in a.data().iter().zip(n.data()) {
            worst = worst.max(grad_rel_err(ga, gn, floor));
        }
    }
    worst
}
