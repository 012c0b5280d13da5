//! The recurrent step network `k2_next = Phi(k2, x)`.
//!
//! ```text
//! Phi(k2, x) = act(W_h ... relu(W_2 relu(W_1 k2 + U x + b_1) + b_2) ... + b_h)
//! ```
//!
//! `W_1, U` are `m x n`, the hidden `W_i` are `m x m`, and `W_h` is `n x m`.
//! The last activation is the identity when `final_linear` is set and ReLU
//! otherwise. Only the `W_i` are ever constrained; `U` and the biases stay
//! free, so contraction holds in `k2` for every fixed `x`.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Reader, StepSample};
use crate::error::{check_len, Error, Result};
use crate::linalg::max_singular_value;
use crate::projection::{project_network, ProjectionMode};

/// Width and depth of a step network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Nodes per hidden layer (`m`).
    pub width: usize,
    /// Number of hidden layers; the network has `hidden_layers + 1` weight
    /// matrices `W_1 .. W_h`.
    pub hidden_layers: usize,
    #[serde(default = "default_true")]
    pub final_linear: bool,
}

fn default_true() -> bool {
    true
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("arch.width", "must be positive"));
        }
        if self.hidden_layers == 0 {
            return Err(Error::config("arch.hidden_layers", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub n: usize,
    pub m: usize,
    /// `W_1`, `m x n`.
    pub w_in: DMatrix<f64>,
    /// `U`, `m x n`, applied to the anchoring state.
    pub u: DMatrix<f64>,
    /// `W_2 .. W_{h-1}`, each `m x m`.
    pub hidden: Vec<DMatrix<f64>>,
    /// `W_h`, `n x m`.
    pub w_out: DMatrix<f64>,
    /// `b_1 .. b_h`; all length `m` except the last (length `n`).
    pub biases: Vec<DVector<f64>>,
    pub final_linear: bool,
}

impl NetworkParams {
    pub fn zeros(n: usize, arch: Architecture) -> Self {
        let m = arch.width;
        let h = arch.hidden_layers + 1;
        let mut biases = vec![DVector::zeros(m); h - 1];
        biases.push(DVector::zeros(n));
        NetworkParams {
            n,
            m,
            w_in: DMatrix::zeros(m, n),
            u: DMatrix::zeros(m, n),
            hidden: vec![DMatrix::zeros(m, m); h - 2],
            w_out: DMatrix::zeros(n, m),
            biases,
            final_linear: arch.final_linear,
        }
    }

    /// He-style uniform initialization scaled by fan-in; biases start at 0.
    pub fn init(n: usize, arch: Architecture, seed: u64) -> Self {
        let mut p = Self::zeros(n, arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut DMatrix<f64>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        };
        fill(&mut p.w_in, 2 * n);
        fill(&mut p.u, 2 * n);
        for w in &mut p.hidden {
            fill(w, arch.width);
        }
        fill(&mut p.w_out, arch.width);
        p
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { width: self.m, hidden_layers: self.hidden.len() + 1, final_linear: self.final_linear }
    }

    /// Number of weight matrices `h`.
    pub fn layer_count(&self) -> usize {
        self.hidden.len() + 2
    }

    /// The constrained weights `W_1 .. W_h` in order.
    pub fn weights(&self) -> Vec<&DMatrix<f64>> {
        std::iter::once(&self.w_in).chain(self.hidden.iter()).chain(std::iter::once(&self.w_out)).collect()
    }

    pub fn weights_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        std::iter::once(&mut self.w_in).chain(self.hidden.iter_mut()).chain(std::iter::once(&mut self.w_out)).collect()
    }

    /// Every weight matrix in declaration order: `W_1, U, W_2..W_{h-1}, W_h`.
    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        let mut out = vec![&self.w_in, &self.u];
        out.extend(self.hidden.iter());
        out.push(&self.w_out);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w_in.as_mut_slice(), self.u.as_mut_slice()];
        out.extend(self.hidden.iter_mut().map(|w| w.as_mut_slice()));
        out.push(self.w_out.as_mut_slice());
        out.extend(self.biases.iter_mut().map(|b| b.as_mut_slice()));
        out
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.w_in.as_slice(), self.u.as_slice()];
        out.extend(self.hidden.iter().map(|w| w.as_slice()));
        out.push(self.w_out.as_slice());
        out.extend(self.biases.iter().map(|b| b.as_slice()));
        out
    }

    /// All parameters flattened in storage order (weights column-major,
    /// then biases).
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Inverse of [`NetworkParams::to_flat`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        check_len("flat parameter vector", self.parameter_count(), values.len())?;
        let mut rest = values;
        for s in self.slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Checks every shape against `n`, `m` and the layer count.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let shape_err = |what: &str| Error::Argument(format!("bad shape for {what}"));
        if self.w_in.shape() != (m, n) {
            return Err(shape_err("W_1"));
        }
        if self.u.shape() != (m, n) {
            return Err(shape_err("U"));
        }
        if self.hidden.iter().any(|w| w.shape() != (m, m)) {
            return Err(shape_err("hidden W_i"));
        }
        if self.w_out.shape() != (n, m) {
            return Err(shape_err("W_h"));
        }
        let h = self.layer_count();
        if self.biases.len() != h || self.biases[..h - 1].iter().any(|b| b.len() != m) || self.biases[h - 1].len() != n
        {
            return Err(shape_err("biases"));
        }
        if !self.is_finite() {
            return Err(Error::Argument("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Evaluates the network without dimension checks.
    pub fn apply(&self, k2: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let mut a = &self.w_in * k2 + &self.u * x + &self.biases[0];
        relu_in_place(a.as_mut_slice());
        for (w, b) in self.hidden.iter().zip(&self.biases[1..]) {
            a = w * &a + b;
            relu_in_place(a.as_mut_slice());
        }
        let mut out = &self.w_out * &a + &self.biases[self.biases.len() - 1];
        if !self.final_linear {
            relu_in_place(out.as_mut_slice());
        }
        out
    }

    /// Largest singular value of each `W_1 .. W_h`.
    pub fn max_singular_values(&self) -> Vec<f64> {
        self.weights().into_iter().map(max_singular_value).collect()
    }

    /// Product of the per-layer largest singular values: a Lipschitz bound
    /// of `Phi` in `k2`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.max_singular_values().iter().product()
    }
}

/// Elementwise `max(0, v)`.
pub fn relu(v: &DVector<f64>) -> DVector<f64> {
    v.map(|a| a.max(0.0))
}

fn relu_in_place(v: &mut [f64]) {
    for e in v {
        if *e < 0.0 {
            *e = 0.0;
        }
    }
}

/// Free-function form of [`NetworkParams::apply`] with dimension checks.
pub fn forward(p: &NetworkParams, k2: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("network input k2", p.n, k2.len())?;
    check_len("network input x", p.n, x.len())?;
    Ok(p.apply(k2, x))
}

pub fn max_singular_values(p: &NetworkParams) -> Vec<f64> {
    p.max_singular_values()
}

/// Column-stacked training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub k2: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub target: DMatrix<f64>,
}

impl Batch {
    pub fn from_samples(n: usize, samples: &[StepSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        for s in samples {
            check_len("sample x", n, s.x.len())?;
            check_len("sample k2_in", n, s.k2_in.len())?;
            check_len("sample k2_out", n, s.k2_out.len())?;
        }
        let (k2, x, target) = crate::dataset::stack_samples(n, samples.iter());
        Ok(Batch { k2, x, target })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Self::from_samples(ds.n, &ds.samples)
    }

    pub fn len(&self) -> usize {
        self.k2.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn add_bias_columns(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in z.column_iter_mut() {
        col += b;
    }
}

/// Pre-activations of every layer for a batch.
struct Activations {
    /// `Z_1 .. Z_h`.
    pre: Vec<DMatrix<f64>>,
    /// `relu(Z_1) .. relu(Z_{h-1})`.
    post: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

fn forward_batch(p: &NetworkParams, k2: &DMatrix<f64>, x: &DMatrix<f64>) -> Activations {
    let h = p.layer_count();
    let mut pre = Vec::with_capacity(h);
    let mut post = Vec::with_capacity(h - 1);
    let mut z = &p.w_in * k2;
    z.gemm(1.0, &p.u, x, 1.0);
    add_bias_columns(&mut z, &p.biases[0]);
    let mut a = z.clone();
    relu_in_place(a.as_mut_slice());
    pre.push(z);
    post.push(a);
    for (w, b) in p.hidden.iter().zip(&p.biases[1..]) {
        let mut z = w * post.last().expect("first layer pushed");
        add_bias_columns(&mut z, b);
        let mut a = z.clone();
        relu_in_place(a.as_mut_slice());
        pre.push(z);
        post.push(a);
    }
    let mut z = &p.w_out * post.last().expect("hidden output");
    add_bias_columns(&mut z, &p.biases[h - 1]);
    let mut output = z.clone();
    if !p.final_linear {
        relu_in_place(output.as_mut_slice());
    }
    pre.push(z);
    Activations { pre, post, output }
}

fn mse_of(output: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    let count = output.ncols() as f64;
    output.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / count
}

/// Mean over the batch of `||Phi(k2_in, x) - k2_out||_2^2`.
pub fn loss_batch(p: &NetworkParams, batch: &Batch) -> f64 {
    let act = forward_batch(p, &batch.k2, &batch.x);
    mse_of(&act.output, &batch.target)
}

pub fn loss_mse(p: &NetworkParams, samples: &[StepSample]) -> Result<f64> {
    Ok(loss_batch(p, &Batch::from_samples(p.n, samples)?))
}

/// Loss and its exact reverse-mode gradient. The ReLU derivative at 0 is 0.
pub fn loss_and_gradient(p: &NetworkParams, batch: &Batch) -> (f64, NetworkParams) {
    let act = forward_batch(p, &batch.k2, &batch.x);
    let loss = mse_of(&act.output, &batch.target);
    let h = p.layer_count();
    let scale = 2.0 / batch.len() as f64;
    let mut grad = NetworkParams::zeros(p.n, p.architecture());

    let mut delta = (&act.output - &batch.target) * scale;
    if !p.final_linear {
        mask_by_positive(&mut delta, &act.pre[h - 1]);
    }
    grad.w_out = &delta * act.post[h - 2].transpose();
    grad.biases[h - 1] = row_sums(&delta);
    let mut delta_hidden = p.w_out.transpose() * &delta;
    mask_by_positive(&mut delta_hidden, &act.pre[h - 2]);

    for l in (0..p.hidden.len()).rev() {
        // Hidden matrix `hidden[l]` is layer l + 2 with input post[l].
        grad.hidden[l] = &delta_hidden * act.post[l].transpose();
        grad.biases[l + 1] = row_sums(&delta_hidden);
        let mut next = p.hidden[l].transpose() * &delta_hidden;
        mask_by_positive(&mut next, &act.pre[l]);
        delta_hidden = next;
    }
    grad.w_in = &delta_hidden * batch.k2.transpose();
    grad.u = &delta_hidden * batch.x.transpose();
    grad.biases[0] = row_sums(&delta_hidden);
    (loss, grad)
}

pub fn gradient(p: &NetworkParams, samples: &[StepSample]) -> Result<NetworkParams> {
    Ok(loss_and_gradient(p, &Batch::from_samples(p.n, samples)?).1)
}

fn mask_by_positive(delta: &mut DMatrix<f64>, pre: &DMatrix<f64>) {
    for (d, z) in delta.iter_mut().zip(pre.iter()) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        out += col;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(p: &NetworkParams) -> Self {
        AdamState {
            m: NetworkParams::zeros(p.n, p.architecture()),
            v: NetworkParams::zeros(p.n, p.architecture()),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `p` along gradient `g`.
pub fn adam_step(state: &mut AdamState, p: &mut NetworkParams, g: &NetworkParams, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let params = p.slices_mut();
    let grads = g.slices();
    let ms = state.m.slices_mut();
    let vs = state.v.slices_mut();
    for (((pw, gw), mw), vw) in params.into_iter().zip(grads).zip(ms).zip(vs) {
        for i in 0..pw.len() {
            let gi = gw[i];
            mw[i] = cfg.beta1 * mw[i] + (1.0 - cfg.beta1) * gi;
            vw[i] = cfg.beta2 * vw[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = mw[i] / c1;
            let v_hat = vw[i] / c2;
            pw[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub epochs: usize,
    #[serde(default)]
    pub projection_mode: ProjectionMode,
    #[serde(default = "TrainingConfig::default_eps_proj")]
    pub eps_proj: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stop as soon as the full-batch loss is at or below this value.
    #[serde(default)]
    pub loss_target: Option<f64>,
    /// Multiply the learning rate by this factor every `lr_decay_every`
    /// epochs (1.0 disables decay).
    #[serde(default = "TrainingConfig::default_decay")]
    pub lr_decay: f64,
    #[serde(default = "TrainingConfig::default_decay_every")]
    pub lr_decay_every: usize,
    /// Progress logging interval in epochs (0 disables).
    #[serde(default)]
    pub log_every: usize,
}

impl TrainingConfig {
    fn default_eps_proj() -> f64 {
        1e-3
    }
    fn default_decay() -> f64 {
        1.0
    }
    fn default_decay_every() -> usize {
        1000
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::config("train.beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.eps_proj > 0.0 && self.eps_proj <= 0.5) {
            return Err(Error::config("train.eps_proj", "must lie in (0, 0.5]"));
        }
        if let Some(t) = self.loss_target {
            if !(t > 0.0) {
                return Err(Error::config("train.loss_target", "must be positive"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return Err(Error::config("train.lr_decay", "must lie in (0, 1] with a positive interval"));
        }
        Ok(())
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            adam: AdamConfig::default(),
            epochs: 1000,
            projection_mode: ProjectionMode::None,
            eps_proj: 1e-3,
            seed: 0,
            loss_target: None,
            lr_decay: 1.0,
            lr_decay_every: 1000,
            log_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-batch loss at the start of each epoch.
    pub loss_history: Vec<f64>,
    /// Per-epoch largest singular value of each `W_i` after the update.
    pub sv_audit_history: Vec<Vec<f64>>,
    pub wall_time_secs: f64,
    pub final_loss: f64,
    pub reached_target: bool,
}

/// Trains a freshly initialized network of shape `arch` on `ds`.
pub fn train(ds: &Dataset, arch: Architecture, cfg: &TrainingConfig) -> Result<(NetworkParams, TrainReport)> {
    arch.validate()?;
    let mut init = NetworkParams::init(ds.n, arch, cfg.seed);
    if let Some(spec) = cfg.projection_mode.spec(cfg.eps_proj)? {
        project_network(&mut init, &spec)?;
    }
    train_from(init, ds, cfg)
}

/// Full-batch Adam from the given parameters. With a projection mode set,
/// every `W_i` is projected back onto its feasible set after every step.
pub fn train_from(mut p: NetworkParams, ds: &Dataset, cfg: &TrainingConfig) -> Result<(NetworkParams, TrainReport)> {
    cfg.validate()?;
    p.validate()?;
    if ds.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    check_len("dataset dimension", p.n, ds.n)?;
    let batch = Batch::from_dataset(ds)?;
    let spec = cfg.projection_mode.spec(cfg.eps_proj)?;
    let start = Instant::now();
    let mut state = AdamState::new(&p);
    let mut adam = cfg.adam;
    let mut report = TrainReport {
        loss_history: Vec::with_capacity(cfg.epochs),
        sv_audit_history: Vec::with_capacity(cfg.epochs),
        wall_time_secs: 0.0,
        final_loss: f64::NAN,
        reached_target: false,
    };
    for epoch in 0..cfg.epochs {
        let (loss, grad) = loss_and_gradient(&p, &batch);
        if !loss.is_finite() {
            return Err(Error::Training { epoch, loss });
        }
        report.loss_history.push(loss);
        report.final_loss = loss;
        if cfg.loss_target.is_some_and(|t| loss <= t) {
            report.reached_target = true;
            break;
        }
        if cfg.log_every > 0 && epoch % cfg.log_every == 0 {
            log::info!("epoch {epoch}: loss {loss:.6e}");
        }
        if epoch > 0 && epoch % cfg.lr_decay_every == 0 {
            adam.lr *= cfg.lr_decay;
        }
        adam_step(&mut state, &mut p, &grad, &adam);
        if let Some(spec) = &spec {
            project_network(&mut p, spec)?;
        }
        report.sv_audit_history.push(p.max_singular_values());
    }
    if !report.reached_target {
        report.final_loss = loss_batch(&p, &batch);
        if cfg.loss_target.is_some_and(|t| report.final_loss <= t) {
            report.reached_target = true;
        }
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((p, report))
}

/// Optional affine standardization. The same map is applied to `k2` on the
/// way in and inverted on the way out, so fixed points are preserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub k2_shift: Vec<f64>,
    pub k2_scale: Vec<f64>,
    pub x_shift: Vec<f64>,
    pub x_scale: Vec<f64>,
}

impl Standardization {
    /// Per-component shifts for `k2` and `x`; per-component scales for `x`
    /// but one common scale for `k2`, so Lipschitz constants in `k2` are
    /// the same in both coordinate systems.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Argument("cannot fit a standardization to no data".into()));
        }
        let n = ds.n;
        let count = ds.len() as f64;
        let moments = |get: &dyn Fn(&StepSample) -> &DVector<f64>| {
            let mut mean = vec![0.0; n];
            for s in &ds.samples {
                for (m, v) in mean.iter_mut().zip(get(s).iter()) {
                    *m += v / count;
                }
            }
            let mut var = vec![0.0; n];
            for s in &ds.samples {
                for i in 0..n {
                    var[i] += (get(s)[i] - mean[i]).powi(2) / count;
                }
            }
            (mean, var)
        };
        let (k2_shift, k2_var) = moments(&|s| &s.k2_in);
        let (x_shift, x_var) = moments(&|s| &s.x);
        let k2_sd = (k2_var.iter().sum::<f64>() / n as f64).sqrt().max(1e-12);
        Ok(Standardization {
            k2_shift,
            k2_scale: vec![k2_sd; n],
            x_shift,
            x_scale: x_var.iter().map(|v| v.sqrt().max(1e-12)).collect(),
        })
    }

    fn to_net(&self, v: &DVector<f64>, shift: &[f64], scale: &[f64]) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| (v[i] - shift[i]) / scale[i])
    }

    pub fn encode_k2(&self, k2: &DVector<f64>) -> DVector<f64> {
        self.to_net(k2, &self.k2_shift, &self.k2_scale)
    }

    pub fn encode_x(&self, x: &DVector<f64>) -> DVector<f64> {
        self.to_net(x, &self.x_shift, &self.x_scale)
    }

    pub fn decode_k2(&self, k2: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(k2.len(), |i, _| k2[i] * self.k2_scale[i] + self.k2_shift[i])
    }

    /// The dataset expressed in network coordinates.
    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for s in &mut out.samples {
            s.x = self.encode_x(&s.x);
            s.k2_in = self.encode_k2(&s.k2_in);
            s.k2_out = self.encode_k2(&s.k2_out);
        }
        out
    }
}

/// Anything that maps `(k2, x)` to the next `k2` iterate.
pub trait StepMap {
    fn dim(&self) -> usize;

    fn step(&self, k2: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
}

impl StepMap for NetworkParams {
    fn dim(&self) -> usize {
        self.n
    }

    fn step(&self, k2: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        self.apply(k2, x)
    }
}

/// Provenance stored with a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub system: String,
    pub dt: f64,
    pub projection_mode: ProjectionMode,
    pub eps_proj: f64,
    #[serde(default)]
    pub normalization: Option<Standardization>,
}

/// A trained network with the system and step size it emulates.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: NetworkParams,
    pub meta: ModelMeta,
}

impl Model {
    pub fn is_constrained(&self) -> bool {
        self.meta.projection_mode != ProjectionMode::None
    }
}

impl StepMap for Model {
    fn dim(&self) -> usize {
        self.params.n
    }

    fn step(&self, k2: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        match &self.meta.normalization {
            None => self.params.apply(k2, x),
            Some(norm) => norm.decode_k2(&self.params.apply(&norm.encode_k2(k2), &norm.encode_x(x))),
        }
    }
}

const MODEL_MAGIC: &[u8; 4] = b"CNNM";
const MODEL_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    n: usize,
    arch: Architecture,
    #[serde(flatten)]
    meta: ModelMeta,
}

/// Checkpoint layout: magic `CNNM`, version `u16`, header length `u32`,
/// JSON header (architecture and provenance), then every tensor in
/// declaration order as row-major little-endian `f64`.
pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    model.params.validate()?;
    let header = serde_json::to_vec(&ModelHeader {
        n: model.params.n,
        arch: model.params.architecture(),
        meta: model.meta.clone(),
    })?;
    let mut out = Vec::with_capacity(10 + header.len() + 8 * model.params.parameter_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params.tensors() {
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                out.extend_from_slice(&t[(r, c)].to_le_bytes());
            }
        }
    }
    for b in &model.params.biases {
        for v in b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MODEL_MAGIC)?;
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported checkpoint version {version}") });
    }
    let header_len = r.u32()? as usize;
    let header_at = r.offset() as u64;
    let header: ModelHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format { offset: header_at, message: format!("bad header: {e}") })?;
    header.arch.validate().map_err(|e| Error::Format { offset: header_at, message: e.to_string() })?;
    let mut p = NetworkParams::zeros(header.n, header.arch);
    let read_matrix = |r: &mut Reader, w: &mut DMatrix<f64>| -> Result<()> {
        for row in 0..w.nrows() {
            for col in 0..w.ncols() {
                w[(row, col)] = r.f64()?;
            }
        }
        Ok(())
    };
    read_matrix(&mut r, &mut p.w_in)?;
    read_matrix(&mut r, &mut p.u)?;
    for w in &mut p.hidden {
        read_matrix(&mut r, w)?;
    }
    read_matrix(&mut r, &mut p.w_out)?;
    for b in &mut p.biases {
        for v in b.iter_mut() {
            *v = r.f64()?;
        }
    }
    r.finish()?;
    if let Some(norm) = &header.meta.normalization {
        let lens = [&norm.k2_shift, &norm.k2_scale, &norm.x_shift, &norm.x_scale];
        if lens.iter().any(|v| v.len() != header.n) {
            return Err(Error::Format { offset: header_at, message: "normalization length does not match n".into() });
        }
    }
    Ok(Model { params: p, meta: header.meta })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
