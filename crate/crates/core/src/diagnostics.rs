//! Analyses of a trained model: per-dimension KL detectors, the class-KL
//! confusion matrix, traversal grids, the surrogate classification gap and
//! the augmentation-by-substitution experiment.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::{ParamStore, Tape};
use crate::data::Dataset;
use crate::distributions::{self, graph};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::model::{argmax, LatentLayout, LatentTarget, NvaeModel, TraversalSeed, CONCENTRATION_FLOOR};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, label};
use crate::tensor::Tensor;

const CHUNK: usize = 500;

/// Per-example, per-dimension Gaussian KL for every row of `data`, as an
/// `N × z_dim` tensor.
pub fn per_dim_kl(model: &NvaeModel, data: &Dataset) -> Result<Tensor> {
    if data.dim() != model.input_dim() {
        return Err(Error::shape("per_dim_kl", &[model.input_dim()], &[data.dim()]));
    }
    let z_dim = model.layout().z_dim();
    let mut out = Vec::with_capacity(data.len() * z_dim);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, _) = data.batch(chunk)?;
        let enc = model.encode_batch(&x)?;
        out.extend(
            enc.mean
                .data()
                .iter()
                .zip(enc.log_var.data())
                .map(|(&m, &lv)| distributions::gauss_kl_term(m, lv)),
        );
    }
    Tensor::new(&[data.len(), z_dim], out)
}

/// Dataset-mean KL per latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct KlProfile {
    pub layout: LatentLayout,
    /// `d_s` entries.
    pub shared: Vec<f64>,
    /// `L` rows of `d_c` entries, averaged over all examples.
    pub class: Vec<Vec<f64>>,
    /// `d_c` entries: each example's own class block.
    pub z_cy: Vec<f64>,
    /// `d_c` entries: each example's other class blocks.
    pub off_class: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl KlProfile {
    /// Mean over every `z_c` dimension.
    pub fn mean_class(&self) -> f64 {
        mean(&self.class.concat())
    }

    pub fn mean_z_cy(&self) -> f64 {
        mean(&self.z_cy)
    }

    pub fn mean_off_class(&self) -> f64 {
        mean(&self.off_class)
    }

    pub fn mean_shared(&self) -> f64 {
        mean(&self.shared)
    }

    /// Columns `group,class,dim,mean_kl`; `group` is one of `shared`,
    /// `class`, `z_cy`, `off_class` and `class` is empty except for the
    /// `class` group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,class,dim,mean_kl\n");
        for (j, v) in self.shared.iter().enumerate() {
            writeln!(out, "shared,,{j},{v}").unwrap();
        }
        for (i, block) in self.class.iter().enumerate() {
            for (j, v) in block.iter().enumerate() {
                writeln!(out, "class,{i},{j},{v}").unwrap();
            }
        }
        for (name, vals) in [("z_cy", &self.z_cy), ("off_class", &self.off_class)] {
            for (j, v) in vals.iter().enumerate() {
                writeln!(out, "{name},,{j},{v}").unwrap();
            }
        }
        out
    }
}

pub fn kl_profile(model: &NvaeModel, data: &Dataset) -> Result<KlProfile> {
    let layout = *model.layout();
    if data.classes() > layout.classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model has {}",
            data.classes(),
            layout.classes
        )));
    }
    let kl = per_dim_kl(model, data)?;
    let n = data.len().max(1) as f64;
    let dc = layout.class_dim;
    let mut totals = vec![0.0; layout.z_dim()];
    let mut z_cy = vec![0.0; dc];
    let mut off = vec![0.0; dc];
    for (r, &y) in data.labels().iter().enumerate() {
        let row = kl.row_slice(r);
        for (t, v) in totals.iter_mut().zip(row) {
            *t += v;
        }
        for i in 0..layout.classes {
            let block = &row[layout.class_block(i)];
            let acc = if i == y { &mut z_cy } else { &mut off };
            for (a, v) in acc.iter_mut().zip(block) {
                *a += v;
            }
        }
    }
    let means: Vec<f64> = totals.iter().map(|t| t / n).collect();
    let off_count = n * (layout.classes - 1).max(1) as f64;
    Ok(KlProfile {
        layout,
        shared: means[layout.shared_block()].to_vec(),
        class: (0..layout.classes).map(|i| means[layout.class_block(i)].to_vec()).collect(),
        z_cy: z_cy.iter().map(|v| v / n).collect(),
        off_class: off.iter().map(|v| v / off_count).collect(),
    })
}

/// `L × L` matrix: entry `(t, i)` is the mean, over examples of true class
/// `t`, of the mean per-dimension KL of block `z_ci`. Rows for classes with
/// no examples are zero.
pub fn class_kl_confusion(model: &NvaeModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let layout = *model.layout();
    let l = layout.classes;
    let mut m = vec![vec![0.0; l]; l];
    if layout.class_dim == 0 {
        return Ok(m);
    }
    let kl = per_dim_kl(model, data)?;
    let mut counts = vec![0usize; l];
    for (r, &y) in data.labels().iter().enumerate() {
        if y >= l {
            return Err(Error::OutOfRange {
                what: "class label",
                index: y,
                len: l,
            });
        }
        counts[y] += 1;
        let row = kl.row_slice(r);
        for (i, cell) in m[y].iter_mut().enumerate() {
            *cell += mean(&row[layout.class_block(i)]);
        }
    }
    for (row, &c) in m.iter_mut().zip(&counts) {
        if c > 0 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Ok(m)
}

pub fn confusion_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::from("true_class");
    for i in 0..m.len() {
        write!(out, ",block_{i}").unwrap();
    }
    out.push('\n');
    for (t, row) in m.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// One grid row per target, one column per traversal step.
pub fn traversal_grid(
    model: &NvaeModel,
    targets: &[LatentTarget],
    steps: usize,
    seed: &TraversalSeed,
    height: usize,
    width: usize,
) -> Result<ImageGrid> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("traversal grid needs at least one target".into()));
    }
    let mut images = Vec::with_capacity(targets.len() * steps);
    for &t in targets {
        images.extend(model.traverse(seed, t, steps)?);
    }
    ImageGrid::from_images(&images, targets.len(), steps, height, width)
}

/// Every `z_s` coordinate.
pub fn shared_targets(layout: &LatentLayout) -> Vec<LatentTarget> {
    (0..layout.shared_dim).map(LatentTarget::Shared).collect()
}

/// Every coordinate of class `class`'s block.
pub fn class_targets(layout: &LatentLayout, class: usize) -> Vec<LatentTarget> {
    (0..layout.class_dim).map(|dim| LatentTarget::Class { class, dim }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapStats {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl GapStats {
    fn from_values(v: &[f64]) -> Self {
        Self {
            count: v.len(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            mean: mean(v),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn to_csv(&self) -> String {
        format!("count,min,mean,max\n{},{},{},{}\n", self.count, self.min, self.mean, self.max)
    }
}

/// `KL(q(π|x) ‖ p(π|y)) − (−log q(y|x))` for every example.
pub fn surrogate_gaps(model: &NvaeModel, data: &Dataset) -> Result<Vec<f64>> {
    let alpha_p = model.config().alpha_p;
    let classes = model.layout().classes;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let enc = model.encode_batch(&x)?;
        for (r, &yr) in y.iter().enumerate() {
            let q = distributions::DirichletParams::new(enc.alpha.row_slice(r).to_vec())?;
            let p = distributions::dirichlet_posterior(alpha_p, classes, yr)?;
            let probs = distributions::class_prob_from_dirichlet(&q);
            let log_probs: Vec<f64> = probs.iter().map(|v| v.ln()).collect();
            out.push(distributions::dirichlet_kl(&q, &p)? - distributions::categorical_nll(&log_probs, yr)?);
        }
    }
    Ok(out)
}

pub fn surrogate_gap(model: &NvaeModel, data: &Dataset) -> Result<GapStats> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("surrogate gap of an empty dataset".into()));
    }
    Ok(GapStats::from_values(&surrogate_gaps(model, data)?))
}

/// How the gap bound is searched for. Encoder pre-activations `a` are drawn
/// uniformly from `[−radius, radius]^L` and mapped to concentrations exactly
/// as the encoder does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapSearch {
    pub radius: f64,
    pub samples: usize,
    /// Best random draws refined by projected gradient ascent.
    pub polish_starts: usize,
    pub polish_steps: usize,
}

impl Default for GapSearch {
    fn default() -> Self {
        Self {
            radius: 5.0,
            samples: 10_000,
            polish_starts: 16,
            polish_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapBound {
    /// The recorded bound: the largest gap found by search and polish.
    pub k_hat: f64,
    /// Largest gap among the plain random draws.
    pub sample_max: f64,
    /// Largest gap on a fresh draw of the same size.
    pub validation_max: f64,
    /// Fresh draws whose gap exceeds `k_hat`.
    pub validation_exceed: usize,
}

/// Gap values, and optionally their gradient with respect to `a`.
fn gap_batch(a: &Tensor, labels: &[usize], alpha_p: f64, alpha_q: f64, grad: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
    let (_, classes) = a.dims2()?;
    let mut tape = Tape::new();
    let av = tape.variable(a.clone());
    let sp = tape.softplus(av)?;
    let sp = tape.shift(sp, CONCENTRATION_FLOOR)?;
    let alpha = tape.scale(sp, alpha_q)?;
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| distributions::dirichlet_posterior(alpha_p, classes, y).map(|d| d.alpha().to_vec()))
        .collect::<Result<_>>()?;
    let p = Tensor::from_rows(&rows)?;
    let kl = graph::dirichlet_kl(&mut tape, alpha, &p)?;
    let lp = graph::class_log_prob(&mut tape, alpha)?;
    let nll = graph::categorical_nll(&mut tape, lp, labels)?;
    let gap = tape.sub(kl, nll)?;
    let values = tape.value(gap).data().to_vec();
    let g = if grad {
        let total = tape.sum(gap)?;
        tape.backward(total)?.get(av).cloned()
    } else {
        None
    };
    Ok((values, g))
}

fn draw_box(rng: &mut rng::Rng, n: usize, classes: usize, radius: f64) -> (Tensor, Vec<usize>) {
    let data = (0..n * classes).map(|_| rng.random_range(-radius..=radius)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (Tensor::new(&[n, classes], data).expect("length matches"), labels)
}

/// Empirical upper bound `k̂` on the surrogate gap over a box of encoder
/// outputs, checked against a fresh draw.
pub fn surrogate_gap_bound(alpha_p: f64, alpha_q: f64, classes: usize, search: &GapSearch, seed: u64) -> Result<GapBound> {
    if classes < 2 || search.samples == 0 || !(search.radius > 0.0) {
        return Err(Error::InvalidArgument("gap search needs L ≥ 2, samples > 0, radius > 0".into()));
    }
    let mut rng = rng::stream(seed, &[label::SUBSTITUTE, 0]);
    let (a, y) = draw_box(&mut rng, search.samples, classes, search.radius);
    let (gaps, _) = gap_batch(&a, &y, alpha_p, alpha_q, false)?;
    let sample_max = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&i, &j| gaps[j].total_cmp(&gaps[i]));
    order.truncate(search.polish_starts);
    let mut k_hat = sample_max;
    if !order.is_empty() {
        let mut pa = a.gather_rows(&order)?;
        let py: Vec<usize> = order.iter().map(|&i| y[i]).collect();
        let step = 0.05 * search.radius;
        for _ in 0..search.polish_steps {
            let (vals, g) = gap_batch(&pa, &py, alpha_p, alpha_q, true)?;
            k_hat = vals.iter().copied().fold(k_hat, f64::max);
            let g = g.expect("gradient requested");
            let (rows, cols) = pa.dims2()?;
            for r in 0..rows {
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let norm = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                for (p, gv) in pa.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                    *p = (*p + step * gv / norm).clamp(-search.radius, search.radius);
                }
            }
        }
        let (vals, _) = gap_batch(&pa, &py, alpha_p, alpha_q, false)?;
        k_hat = vals.iter().copied().fold(k_hat, f64::max);
    }

    let mut fresh = rng::stream(seed, &[label::SUBSTITUTE, 1]);
    let (va, vy) = draw_box(&mut fresh, search.samples, classes, search.radius);
    let (vgaps, _) = gap_batch(&va, &vy, alpha_p, alpha_q, false)?;
    Ok(GapBound {
        k_hat,
        sample_max,
        validation_max: vgaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        validation_exceed: vgaps.iter().filter(|&&v| v > k_hat).count(),
    })
}

/// The probe classifier used to score augmented training sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
        }
    }
}

/// `D → hidden → L` MLP with a ReLU, trained with softmax cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    params: ParamStore,
}

impl Probe {
    pub fn new(input: usize, hidden: usize, classes: usize, rng: &mut rng::Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, fan_in, fan_out) in [("l0", input, hidden), ("out", hidden, classes)] {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            params.insert(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w)?)?;
            params.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
        }
        Ok(Self { params })
    }

    fn logits(&self, tape: &mut Tape, x: &Tensor) -> Result<(crate::autodiff::BoundParams, crate::autodiff::Var)> {
        let p = self.params.bind(tape);
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, p.var("l0.w")?)?;
        let h = tape.add(h, p.var("l0.b")?)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, p.var("out.w")?)?;
        let o = tape.add(o, p.var("out.b")?)?;
        Ok((p, o))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let (_, o) = self.logits(&mut tape, x)?;
        let o = tape.value(o);
        let rows = o.dims2()?.0;
        Ok((0..rows).map(|r| argmax(o.row_slice(r))).collect())
    }

    pub fn error_rate(&self, data: &Dataset) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut wrong = 0;
        for chunk in idx.chunks(CHUNK) {
            let (x, y) = data.batch(chunk)?;
            wrong += self.predict(&x)?.iter().zip(&y).filter(|(a, b)| a != b).count();
        }
        Ok(wrong as f64 / data.len().max(1) as f64)
    }

    /// Trains in place; `rng` drives only the shuffling.
    pub fn fit(&mut self, data: &Dataset, cfg: &ProbeConfig, rng: &mut rng::Rng) -> Result<()> {
        let adam = AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(&self.params);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        for _ in 0..cfg.epochs {
            idx.shuffle(rng);
            for chunk in idx.chunks(cfg.batch_size.max(1)) {
                let (x, y) = data.batch(chunk)?;
                let mut tape = Tape::new();
                let (p, o) = self.logits(&mut tape, &x)?;
                let lp = tape.log_softmax(o)?;
                let nll = graph::categorical_nll(&mut tape, lp, &y)?;
                let loss = tape.mean(nll)?;
                let grads = tape.backward(loss)?.for_params(&p, &tape);
                adam_step(&mut self.params, &grads, &mut state, &adam)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub p_sub: f64,
    pub sigma: f64,
    pub repetitions: usize,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_sub: 0.4,
            sigma: 1.0,
            repetitions: 3,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationResult {
    pub p_sub: f64,
    pub sigma: f64,
    pub seeds: Vec<u64>,
    /// Test error of each repetition.
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over repetitions.
    pub std: f64,
}

pub const AUGMENT_HEADER: &str = "p_sub,sigma,repetition,seed,test_error";

impl AugmentationResult {
    fn summarize(p_sub: f64, sigma: f64, seeds: Vec<u64>, errors: Vec<f64>) -> Self {
        let m = mean(&errors);
        let std = if errors.len() > 1 {
            (errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (errors.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            p_sub,
            sigma,
            seeds,
            errors,
            mean: m,
            std,
        }
    }

    /// One row per repetition, then rows `mean` and `std` in the
    /// `repetition` column.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{AUGMENT_HEADER}\n");
        for (r, (seed, e)) in self.seeds.iter().zip(&self.errors).enumerate() {
            writeln!(out, "{},{},{r},{seed},{e}", self.p_sub, self.sigma).unwrap();
        }
        writeln!(out, "{},{},mean,,{}", self.p_sub, self.sigma, self.mean).unwrap();
        writeln!(out, "{},{},std,,{}", self.p_sub, self.sigma, self.std).unwrap();
        out
    }
}

/// Replaces each training example with probability `p_sub` by a generated
/// sample of the same class, trains a fresh probe on the result and scores
/// it on `test`. Substitution, generation and the probe draw from separate
/// streams, so `p_sub = 0` reproduces the unaugmented baseline exactly.
pub fn augmentation_experiment(
    model: &NvaeModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &AugmentConfig,
) -> Result<AugmentationResult> {
    if !(0.0..=1.0).contains(&cfg.p_sub) {
        return Err(Error::InvalidArgument(format!("p_sub must lie in [0, 1], got {}", cfg.p_sub)));
    }
    if cfg.repetitions == 0 {
        return Err(Error::InvalidArgument("at least one repetition is required".into()));
    }
    if train.dim() != model.input_dim() || test.dim() != model.input_dim() {
        return Err(Error::shape("augmentation_experiment", &[model.input_dim()], &[train.dim()]));
    }
    let classes = train.classes().max(test.classes()).max(model.layout().classes);
    let mut seeds = Vec::new();
    let mut errors = Vec::new();
    for rep in 0..cfg.repetitions {
        let seed = rng::derive_seed(cfg.seed, &[rep as u64]);
        let mut sub_rng = rng::stream(seed, &[label::SUBSTITUTE]);
        let chosen: Vec<usize> = (0..train.len())
            .filter(|_| sub_rng.random::<f64>() < cfg.p_sub)
            .collect();
        let augmented = if chosen.is_empty() {
            train.clone()
        } else {
            let labels: Vec<usize> = chosen.iter().map(|&i| train.labels()[i]).collect();
            let mut gen_rng = rng::stream(seed, &[label::GENERATE]);
            let generated = model.generate_batch(&labels, cfg.sigma, &mut gen_rng)?;
            let mut images = train.images().clone();
            let d = train.dim();
            for (k, &i) in chosen.iter().enumerate() {
                images.data_mut()[i * d..(i + 1) * d].copy_from_slice(generated.row_slice(k));
            }
            Dataset::new(images, train.labels().to_vec(), train.classes(), train.height(), train.width())?
        };
        seeds.push(seed);
        errors.push(probe_error(seed, &augmented, test, classes, &cfg.probe)?);
    }
    Ok(AugmentationResult::summarize(cfg.p_sub, cfg.sigma, seeds, errors))
}

/// Probe test error without any substitution, using the same per-repetition
/// seeds as [`augmentation_experiment`]. `sigma` is reported as 0.
pub fn probe_baseline(train: &Dataset, test: &Dataset, cfg: &AugmentConfig) -> Result<AugmentationResult> {
    if cfg.repetitions == 0 {
        return Err(Error::InvalidArgument("at least one repetition is required".into()));
    }
    let classes = train.classes().max(test.classes());
    let mut seeds = Vec::new();
    let mut errors = Vec::new();
    for rep in 0..cfg.repetitions {
        let seed = rng::derive_seed(cfg.seed, &[rep as u64]);
        seeds.push(seed);
        errors.push(probe_error(seed, train, test, classes, &cfg.probe)?);
    }
    Ok(AugmentationResult::summarize(0.0, 0.0, seeds, errors))
}

fn probe_error(seed: u64, train: &Dataset, test: &Dataset, classes: usize, cfg: &ProbeConfig) -> Result<f64> {
    let mut probe_rng = rng::stream(seed, &[label::PROBE]);
    let mut probe = Probe::new(train.dim(), cfg.hidden, classes, &mut probe_rng)?;
    probe.fit(train, cfg, &mut probe_rng)?;
    probe.error_rate(test)
}

/// Zeroes the mean and log-variance heads so `q(z|x)` equals the prior for
/// every input.
pub fn prior_matching(model: &NvaeModel) -> Result<NvaeModel> {
    let mut m = model.clone();
    for head in ["enc.mean", "enc.logvar"] {
        for part in ["w", "b"] {
            let name = format!("{head}.{part}");
            let shape = m.encoder.get(&name)?.shape().to_vec();
            m.encoder.set(&name, Tensor::zeros(&shape))?;
        }
    }
    Ok(m)
}
