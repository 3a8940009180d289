//! The N-VAE encoder/decoder pair and its objectives.
//!
//! The latent code is `z = [z_c, z_s]`, where `z_c` holds one block of
//! `class_dim` coordinates per class and `z_s` is shared by all classes.
//! Before decoding, every class block except the one for label `y` is zeroed
//! and (optionally) a one-hot class indicator is prepended to each block; see
//! [`mask_class_latents`].
//!
//! All objectives are per-example lower-bound style quantities to be
//! maximized. Training minimizes the negated batch mean.

use rand::Rng as _;

use crate::autodiff::{class_mask, sigmoid, BoundParams, ParamStore, Tape, Var};
use crate::distributions::{self, graph, DiagGaussian, DirichletParams};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Added to the softplus concentration head so concentrations stay strictly
/// positive even when softplus underflows.
pub const CONCENTRATION_FLOOR: f64 = 1e-6;

/// Sizes of the class-dependent and shared latent blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentLayout {
    pub classes: usize,
    pub class_dim: usize,
    pub shared_dim: usize,
}

impl LatentLayout {
    pub fn new(classes: usize, class_dim: usize, shared_dim: usize) -> Result<Self> {
        if classes == 0 || shared_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "latent layout needs at least one class and one shared dimension \
                 (got classes={classes}, shared_dim={shared_dim})"
            )));
        }
        Ok(Self {
            classes,
            class_dim,
            shared_dim,
        })
    }

    /// `L·d_c`.
    pub fn class_total(&self) -> usize {
        self.classes * self.class_dim
    }

    /// `L·d_c + d_s`.
    pub fn z_dim(&self) -> usize {
        self.class_total() + self.shared_dim
    }

    /// Width of the masked class code, `L·(d_c + 1)` with the bias column and
    /// `L·d_c` without.
    pub fn masked_dim(&self, bias: bool) -> usize {
        self.classes * (self.class_dim + usize::from(bias))
    }

    pub fn decoder_input_dim(&self, bias: bool) -> usize {
        self.masked_dim(bias) + self.shared_dim
    }

    /// Column range of class `i`'s block inside `z`.
    pub fn class_block(&self, i: usize) -> std::ops::Range<usize> {
        i * self.class_dim..(i + 1) * self.class_dim
    }

    /// Column range of `z_s` inside `z`.
    pub fn shared_block(&self) -> std::ops::Range<usize> {
        self.class_total()..self.z_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub layout: LatentLayout,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Symmetric Dirichlet prior concentration.
    pub alpha_p: f64,
    /// Scale of the encoder's concentration head.
    pub alpha_q: f64,
    pub beta_c: f64,
    pub beta_s: f64,
    pub bias_enabled: bool,
}

impl ModelConfig {
    /// Defaults used for MNIST-sized inputs.
    pub fn mnist(input_dim: usize) -> Self {
        Self {
            input_dim,
            layout: LatentLayout {
                classes: 10,
                class_dim: 2,
                shared_dim: 8,
            },
            encoder_hidden: vec![400, 200],
            decoder_hidden: vec![200, 400],
            alpha_p: 1.0,
            alpha_q: 10.0,
            beta_c: 2.0,
            beta_s: 1.0,
            bias_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        LatentLayout::new(self.layout.classes, self.layout.class_dim, self.layout.shared_dim)?;
        if self.encoder_hidden.is_empty() || self.encoder_hidden.contains(&0) {
            return bad(format!("invalid encoder hidden sizes {:?}", self.encoder_hidden));
        }
        if self.decoder_hidden.contains(&0) {
            return bad(format!("invalid decoder hidden sizes {:?}", self.decoder_hidden));
        }
        if !(self.alpha_p > 0.0 && self.alpha_q > 0.0) {
            return bad("alpha_p and alpha_q must be positive".into());
        }
        if !(self.beta_c >= 0.0 && self.beta_s >= 0.0) {
            return bad("beta_c and beta_s must be non-negative".into());
        }
        Ok(())
    }
}

/// Which training objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `recon − KL(z) + log q(y|x)`.
    Lobj,
    /// `recon − KL(z_s) − β_c·KL(z_c) + log q(y|x)`.
    Beta,
    /// Plain (β-)VAE: `recon − β_s·KL(z)`, no classification term.
    Baseline,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Lobj => "lobj",
            Objective::Beta => "beta",
            Objective::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lobj" => Some(Objective::Lobj),
            "beta" => Some(Objective::Beta),
            "baseline" => Some(Objective::Baseline),
            _ => None,
        }
    }
}

/// Posterior parameters for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z_posterior: DiagGaussian,
    pub pi_posterior: DirichletParams,
}

/// Posterior parameters for a batch, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub alpha: Tensor,
}

impl EncodedBatch {
    pub fn row(&self, i: usize) -> Result<EncoderOutput> {
        Ok(EncoderOutput {
            z_posterior: DiagGaussian::new(
                self.mean.row_slice(i).to_vec(),
                self.log_var.row_slice(i).to_vec(),
            )?,
            pi_posterior: DirichletParams::new(self.alpha.row_slice(i).to_vec())?,
        })
    }
}

/// Per-example objective values and their parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Terms {
    pub objective: Vec<f64>,
    pub recon_ll: Vec<f64>,
    pub kl_shared: Vec<f64>,
    pub kl_class: Vec<f64>,
    /// `log q(y|x)`; computed for every objective even when it is not part
    /// of it.
    pub log_q_y: Vec<f64>,
}

impl Terms {
    pub fn kl_total(&self) -> Vec<f64> {
        self.kl_shared.iter().zip(&self.kl_class).map(|(a, b)| a + b).collect()
    }

    pub fn len(&self) -> usize {
        self.objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objective.is_empty()
    }
}

/// A single example's objective with its breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub recon_ll: f64,
    pub kl_shared: f64,
    pub kl_class: f64,
    pub kl_total: f64,
    pub log_q_y: f64,
}

impl ObjectiveValue {
    fn from_terms(t: &Terms, i: usize) -> Self {
        Self {
            value: t.objective[i],
            recon_ll: t.recon_ll[i],
            kl_shared: t.kl_shared[i],
            kl_class: t.kl_class[i],
            kl_total: t.kl_shared[i] + t.kl_class[i],
            log_q_y: t.log_q_y[i],
        }
    }
}

/// What a traversal holds fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum TraversalSeed {
    /// Start from the encoded mean of `x`, decoding under `label` or, when
    /// `None`, the inferred label.
    Input { x: Vec<f64>, label: Option<usize> },
    /// Start from the origin of latent space, decoding under this class.
    Class(usize),
}

/// The latent coordinate a traversal varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentTarget {
    Shared(usize),
    Class { class: usize, dim: usize },
}

impl LatentTarget {
    /// Column of this coordinate inside `z`.
    pub fn z_index(self, layout: &LatentLayout) -> Result<usize> {
        match self {
            LatentTarget::Shared(j) if j < layout.shared_dim => Ok(layout.class_total() + j),
            LatentTarget::Class { class, dim } if class < layout.classes && dim < layout.class_dim => {
                Ok(class * layout.class_dim + dim)
            }
            other => Err(Error::InvalidArgument(format!(
                "latent target {other:?} is outside layout {layout:?}"
            ))),
        }
    }
}

/// `steps` evenly spaced cell midpoints covering the open interval (−3, 3).
pub fn traversal_points(steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|k| -3.0 + 6.0 * (k as f64 + 0.5) / steps as f64)
        .collect()
}

/// Builds the decoder's class code for one example from the `L × d_c`
/// matrix of class blocks: row `y` becomes `[1, z_cy]` (or `z_cy` when the
/// bias column is disabled), all other rows are zero, and the result is
/// flattened row by row.
pub fn mask_class_latents(z_c: &Tensor, y: usize, bias: bool) -> Result<Vec<f64>> {
    let (classes, dim) = z_c.dims2()?;
    let flat = z_c.reshape(&[1, classes * dim])?;
    Ok(class_mask(&flat, &[y], classes, dim, bias)?.into_data())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NvaeModel {
    config: ModelConfig,
    pub encoder: ParamStore,
    pub decoder: ParamStore,
}

struct ForwardVars {
    mean: Var,
    log_var: Var,
    alpha: Var,
    recon_ll: Var,
    kl_shared: Var,
    kl_class: Var,
    log_q_y: Var,
    objective: Var,
}

impl NvaeModel {
    /// Glorot-uniform weights and zero biases, from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::label::INIT]);
        let layout = config.layout;

        let mut encoder = ParamStore::new();
        let mut fan_in = config.input_dim;
        for (i, &h) in config.encoder_hidden.iter().enumerate() {
            add_linear(&mut encoder, &format!("enc.l{i}"), fan_in, h, &mut rng)?;
            fan_in = h;
        }
        add_linear(&mut encoder, "enc.mean", fan_in, layout.z_dim(), &mut rng)?;
        add_linear(&mut encoder, "enc.logvar", fan_in, layout.z_dim(), &mut rng)?;
        add_linear(&mut encoder, "enc.conc", fan_in, layout.classes, &mut rng)?;

        let mut decoder = ParamStore::new();
        let mut fan_in = layout.decoder_input_dim(config.bias_enabled);
        for (i, &h) in config.decoder_hidden.iter().enumerate() {
            add_linear(&mut decoder, &format!("dec.l{i}"), fan_in, h, &mut rng)?;
            fan_in = h;
        }
        add_linear(&mut decoder, "dec.out", fan_in, config.input_dim, &mut rng)?;

        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, encoder: ParamStore, decoder: ParamStore) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        for (store, reference) in [(&encoder, &template.encoder), (&decoder, &template.decoder)] {
            if store.len() != reference.len() {
                return Err(Error::InvalidArgument(format!(
                    "expected {} parameter tensors, found {}",
                    reference.len(),
                    store.len()
                )));
            }
            for (name, t) in reference.iter() {
                let found = store.get(name)?;
                if found.shape() != t.shape() {
                    return Err(Error::shape("NvaeModel::from_parts", t.shape(), found.shape()));
                }
            }
        }
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.config.layout
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn set_betas(&mut self, beta_c: f64, beta_s: f64) {
        self.config.beta_c = beta_c;
        self.config.beta_s = beta_s;
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder.num_elements() + self.decoder.num_elements()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (rows, cols) = x.dims2()?;
        if cols != self.config.input_dim {
            return Err(Error::shape("encode", &[rows, self.config.input_dim], x.shape()));
        }
        Ok(rows)
    }

    fn encode_vars(&self, tape: &mut Tape, enc: &BoundParams, x: Var) -> Result<(Var, Var, Var)> {
        let mut h = x;
        for i in 0..self.config.encoder_hidden.len() {
            h = linear(tape, enc, &format!("enc.l{i}"), h)?;
            h = tape.tanh(h)?;
        }
        let mean = linear(tape, enc, "enc.mean", h)?;
        let log_var = linear(tape, enc, "enc.logvar", h)?;
        let raw = linear(tape, enc, "enc.conc", h)?;
        let pos = tape.softplus(raw)?;
        let pos = tape.shift(pos, CONCENTRATION_FLOOR)?;
        let alpha = tape.scale(pos, self.config.alpha_q)?;
        Ok((mean, log_var, alpha))
    }

    fn decode_vars(&self, tape: &mut Tape, dec: &BoundParams, z_cy: Var, z_s: Var) -> Result<Var> {
        let mut h = if tape.value(z_cy).dims2()?.1 == 0 {
            z_s
        } else {
            tape.concat(&[z_cy, z_s], 1)?
        };
        for i in 0..self.config.decoder_hidden.len() {
            h = linear(tape, dec, &format!("dec.l{i}"), h)?;
            h = tape.tanh(h)?;
        }
        linear(tape, dec, "dec.out", h)
    }

    /// Splits `z` into its class and shared parts, masks the class part by
    /// `labels` and decodes to logits.
    fn decode_z(&self, tape: &mut Tape, dec: &BoundParams, z: Var, labels: &[usize]) -> Result<Var> {
        let layout = self.config.layout;
        let z_c = tape.slice(z, 1, 0, layout.class_total())?;
        let z_s = tape.slice(z, 1, layout.class_total(), layout.z_dim())?;
        let z_cy = tape.class_mask(z_c, labels, layout.classes, layout.class_dim, self.config.bias_enabled)?;
        self.decode_vars(tape, dec, z_cy, z_s)
    }

    fn check_labels(&self, labels: &[usize], rows: usize) -> Result<()> {
        if labels.len() != rows {
            return Err(Error::shape("labels", &[rows], &[labels.len()]));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.config.layout.classes) {
            return Err(Error::OutOfRange {
                what: "class label",
                index: y,
                len: self.config.layout.classes,
            });
        }
        Ok(())
    }

    /// Records the full forward pass for a batch and combines the terms
    /// into `objective`. `noise` holds one `rows × z_dim` tensor per
    /// reconstruction sample.
    fn forward(
        &self,
        tape: &mut Tape,
        enc: &BoundParams,
        dec: &BoundParams,
        x: &Tensor,
        labels: &[usize],
        noise: &[Tensor],
        objective: Objective,
    ) -> Result<ForwardVars> {
        let rows = self.check_input(x)?;
        self.check_labels(labels, rows)?;
        distributions::check_unit_interval(x.data())?;
        let layout = self.config.layout;
        if noise.is_empty() {
            return Err(Error::InvalidArgument("at least one noise sample is required".into()));
        }

        let xv = tape.constant(x.clone());
        let (mean, log_var, alpha) = self.encode_vars(tape, enc, xv)?;

        let mut recon_sum: Option<Var> = None;
        for eps in noise {
            if eps.shape() != [rows, layout.z_dim()] {
                return Err(Error::shape("noise", &[rows, layout.z_dim()], eps.shape()));
            }
            let eps = tape.constant(eps.clone());
            let z = graph::gauss_sample(tape, mean, log_var, eps)?;
            let logits = self.decode_z(tape, dec, z, labels)?;
            let ll = graph::bernoulli_recon_ll(tape, logits, xv)?;
            recon_sum = Some(match recon_sum {
                None => ll,
                Some(acc) => tape.add(acc, ll)?,
            });
        }
        let mut recon_ll = recon_sum.expect("noise is non-empty");
        if noise.len() > 1 {
            recon_ll = tape.scale(recon_ll, 1.0 / noise.len() as f64)?;
        }

        let kl_dims = graph::gauss_kl_std(tape, mean, log_var)?;
        let kl_s_dims = tape.slice(kl_dims, 1, layout.class_total(), layout.z_dim())?;
        let kl_shared = tape.sum_cols(kl_s_dims)?;
        let kl_class = if layout.class_dim > 0 {
            let kl_c_dims = tape.slice(kl_dims, 1, 0, layout.class_total())?;
            tape.sum_cols(kl_c_dims)?
        } else {
            tape.constant(Tensor::zeros(&[rows, 1]))
        };

        let log_probs = graph::class_log_prob(tape, alpha)?;
        let nll = graph::categorical_nll(tape, log_probs, labels)?;
        let log_q_y = tape.neg(nll)?;

        let (w_shared, w_class, w_cls) = match objective {
            Objective::Lobj => (1.0, 1.0, Some(1.0)),
            Objective::Beta => (1.0, self.config.beta_c, Some(1.0)),
            Objective::Baseline => (self.config.beta_s, self.config.beta_s, None),
        };
        let ks = tape.scale(kl_shared, w_shared)?;
        let kc = tape.scale(kl_class, w_class)?;
        let a = tape.sub(recon_ll, ks)?;
        let mut obj = tape.sub(a, kc)?;
        if let Some(w) = w_cls {
            let cls = tape.scale(log_q_y, w)?;
            obj = tape.add(obj, cls)?;
        }

        Ok(ForwardVars {
            mean,
            log_var,
            alpha,
            recon_ll,
            kl_shared,
            kl_class,
            log_q_y,
            objective: obj,
        })
    }

    fn terms(tape: &Tape, f: &ForwardVars) -> Terms {
        let col = |v: Var| tape.value(v).data().to_vec();
        Terms {
            objective: col(f.objective),
            recon_ll: col(f.recon_ll),
            kl_shared: col(f.kl_shared),
            kl_class: col(f.kl_class),
            log_q_y: col(f.log_q_y),
        }
    }

    /// Evaluates an objective for a batch without gradients.
    pub fn evaluate(
        &self,
        x: &Tensor,
        labels: &[usize],
        noise: &[Tensor],
        objective: Objective,
    ) -> Result<Terms> {
        let mut tape = Tape::new();
        let enc = self.encoder.bind(&mut tape);
        let dec = self.decoder.bind(&mut tape);
        let f = self.forward(&mut tape, &enc, &dec, x, labels, noise, objective)?;
        Ok(Self::terms(&tape, &f))
    }

    /// Batch terms plus gradients of the loss `−mean(objective)` for the
    /// encoder and decoder parameters, in store order.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        labels: &[usize],
        noise: &[Tensor],
        objective: Objective,
    ) -> Result<(Terms, Vec<Tensor>, Vec<Tensor>)> {
        self.loss_and_grads_with(Tape::new(), x, labels, noise, objective)
    }

    pub(crate) fn loss_and_grads_with(
        &self,
        mut tape: Tape,
        x: &Tensor,
        labels: &[usize],
        noise: &[Tensor],
        objective: Objective,
    ) -> Result<(Terms, Vec<Tensor>, Vec<Tensor>)> {
        let enc = self.encoder.bind(&mut tape);
        let dec = self.decoder.bind(&mut tape);
        let f = self.forward(&mut tape, &enc, &dec, x, labels, noise, objective)?;
        let mean = tape.mean(f.objective)?;
        let loss = tape.neg(mean)?;
        let grads = tape.backward(loss)?;
        let terms = Self::terms(&tape, &f);
        Ok((terms, grads.for_params(&enc, &tape), grads.for_params(&dec, &tape)))
    }

    /// `recon − KL(z) − KL(q(π|x) ‖ p(π|y))` per example (the bound without
    /// the constant `log p(y)`).
    pub fn exact_elbo_batch(&self, x: &Tensor, labels: &[usize], noise: &[Tensor]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let enc = self.encoder.bind(&mut tape);
        let dec = self.decoder.bind(&mut tape);
        let f = self.forward(&mut tape, &enc, &dec, x, labels, noise, Objective::Lobj)?;
        let posterior = self.posterior_alphas(labels)?;
        let dkl = graph::dirichlet_kl(&mut tape, f.alpha, &posterior)?;
        let kl = tape.add(f.kl_shared, f.kl_class)?;
        let a = tape.sub(f.recon_ll, kl)?;
        let elbo = tape.sub(a, dkl)?;
        let _ = (f.mean, f.log_var);
        Ok(tape.value(elbo).data().to_vec())
    }

    /// Rows of `α_p·1 + onehot(y)`.
    pub fn posterior_alphas(&self, labels: &[usize]) -> Result<Tensor> {
        let rows = labels
            .iter()
            .map(|&y| {
                distributions::dirichlet_posterior(self.config.alpha_p, self.config.layout.classes, y)
                    .map(|d| d.alpha().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Tensor::new(&[0, self.config.layout.classes], Vec::new());
        }
        Tensor::from_rows(&rows)
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<EncodedBatch> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let enc = self.encoder.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (mean, log_var, alpha) = self.encode_vars(&mut tape, &enc, xv)?;
        Ok(EncodedBatch {
            mean: tape.value(mean).clone(),
            log_var: tape.value(log_var).clone(),
            alpha: tape.value(alpha).clone(),
        })
    }

    pub fn encode(&self, x: &[f64]) -> Result<EncoderOutput> {
        distributions::check_unit_interval(x)?;
        self.encode_batch(&Tensor::row(x))?.row(0)
    }

    /// Logits for rows of `[z_cy, z_s]`.
    pub fn decode_batch(&self, z_cy: &Tensor, z_s: &Tensor) -> Result<Tensor> {
        let layout = self.config.layout;
        let (r1, c1) = z_cy.dims2()?;
        let (r2, c2) = z_s.dims2()?;
        if r1 != r2 || c1 != layout.masked_dim(self.config.bias_enabled) || c2 != layout.shared_dim {
            return Err(Error::shape("decode", z_cy.shape(), z_s.shape()));
        }
        let mut tape = Tape::new();
        let dec = self.decoder.bind(&mut tape);
        let a = tape.constant(z_cy.clone());
        let b = tape.constant(z_s.clone());
        let logits = self.decode_vars(&mut tape, &dec, a, b)?;
        Ok(tape.value(logits).clone())
    }

    pub fn decode(&self, z_cy: &[f64], z_s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&Tensor::row(z_cy), &Tensor::row(z_s))?.into_data())
    }

    /// Masks full latent rows by `labels` and decodes to pixel means.
    pub fn decode_latents(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (rows, cols) = z.dims2()?;
        if cols != self.config.layout.z_dim() {
            return Err(Error::shape("decode_latents", &[rows, self.config.layout.z_dim()], z.shape()));
        }
        self.check_labels(labels, rows)?;
        let mut tape = Tape::new();
        let dec = self.decoder.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let logits = self.decode_z(&mut tape, &dec, zv, labels)?;
        Ok(tape.value(logits).map(sigmoid))
    }

    pub fn objective_lobj(&self, x: &[f64], y: usize, noise: &[f64]) -> Result<ObjectiveValue> {
        self.single(x, y, noise, Objective::Lobj)
    }

    pub fn objective_beta(&self, x: &[f64], y: usize, noise: &[f64]) -> Result<ObjectiveValue> {
        self.single(x, y, noise, Objective::Beta)
    }

    pub fn objective_baseline(&self, x: &[f64], y: usize, noise: &[f64]) -> Result<ObjectiveValue> {
        self.single(x, y, noise, Objective::Baseline)
    }

    pub fn exact_elbo(&self, x: &[f64], y: usize, noise: &[f64]) -> Result<f64> {
        let v = self.exact_elbo_batch(&Tensor::row(x), &[y], &[Tensor::row(noise)])?;
        Ok(v[0])
    }

    fn single(&self, x: &[f64], y: usize, noise: &[f64], objective: Objective) -> Result<ObjectiveValue> {
        let t = self.evaluate(&Tensor::row(x), &[y], &[Tensor::row(noise)], objective)?;
        Ok(ObjectiveValue::from_terms(&t, 0))
    }

    /// Argmax of the Dirichlet mean; ties go to the lowest class index.
    pub fn infer_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        let enc = self.encode_batch(x)?;
        let rows = enc.alpha.dims2()?.0;
        Ok((0..rows).map(|r| argmax(enc.alpha.row_slice(r))).collect())
    }

    pub fn infer_label(&self, x: &[f64]) -> Result<usize> {
        Ok(self.infer_labels(&Tensor::row(x))?[0])
    }

    /// Pixel means for `labels.len()` draws with `z ~ N(0, σ²I)`.
    pub fn generate_batch(&self, labels: &[usize], sigma: f64, rng: &mut Rng) -> Result<Tensor> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        let z = rng::normal_tensor(rng, &[labels.len(), self.config.layout.z_dim()]).map(|v| v * sigma);
        self.decode_latents(&z, labels)
    }

    pub fn generate(&self, y: usize, sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.generate_batch(&[y], sigma, rng)?.into_data())
    }

    /// Decodes `steps` points along one latent coordinate, all others held
    /// at the seed's values.
    pub fn traverse(&self, seed: &TraversalSeed, target: LatentTarget, steps: usize) -> Result<Vec<Vec<f64>>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("traversal needs at least one step".into()));
        }
        let layout = self.config.layout;
        let idx = target.z_index(&layout)?;
        let (base, label) = match seed {
            TraversalSeed::Input { x, label } => {
                let enc = self.encode(x)?;
                let y = match label {
                    Some(y) => *y,
                    None => argmax(enc.pi_posterior.alpha()),
                };
                (enc.z_posterior.mean().to_vec(), y)
            }
            TraversalSeed::Class(y) => (vec![0.0; layout.z_dim()], *y),
        };
        let mut rows = Vec::with_capacity(steps);
        for v in traversal_points(steps) {
            let mut z = base.clone();
            z[idx] = v;
            rows.push(z);
        }
        let out = self.decode_latents(&Tensor::from_rows(&rows)?, &vec![label; steps])?;
        Ok((0..steps).map(|r| out.row_slice(r).to_vec()).collect())
    }

    /// Importance-sampled `log p(x|y)` with `q(z|x)` as the proposal, using
    /// `samples` draws. Returns the estimate and its delta-method standard
    /// error.
    pub fn importance_log_likelihood(&self, x: &[f64], y: usize, samples: usize, rng: &mut Rng) -> Result<(f64, f64)> {
        let q = self.encode(x)?.z_posterior;
        let prior = DiagGaussian::standard(q.dim());
        let eps = rng::normal_tensor(rng, &[samples, q.dim()]);
        let mut zs = Vec::with_capacity(samples);
        for r in 0..samples {
            zs.push(distributions::gauss_sample(&q, eps.row_slice(r))?);
        }
        let z = Tensor::from_rows(&zs)?;
        let mut tape = Tape::new();
        let dec = self.decoder.bind(&mut tape);
        let zv = tape.constant(z);
        let logits = self.decode_z(&mut tape, &dec, zv, &vec![y; samples])?;
        let logits = tape.value(logits);
        let mut log_w = Vec::with_capacity(samples);
        for (r, zr) in zs.iter().enumerate() {
            let ll = distributions::bernoulli_recon_ll(logits.row_slice(r), x)?;
            log_w.push(ll + prior.log_density(zr)? - q.log_density(zr)?);
        }
        let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
        let n = samples as f64;
        let mean_w = w.iter().sum::<f64>() / n;
        let var_w = w.iter().map(|v| (v - mean_w).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let estimate = m + mean_w.ln();
        let se = var_w.sqrt() / (mean_w * n.sqrt());
        Ok((estimate, se))
    }
}

fn add_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    store.insert(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w)?)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))
}

fn linear(tape: &mut Tape, params: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = params.var(&format!("{name}.w"))?;
    let b = params.var(&format!("{name}.b"))?;
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

/// Index of the largest element; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
