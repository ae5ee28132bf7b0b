//! Alternating optimization of the model parameters θ (inner loop, training
//! data) and the transfer ratios λ (outer loop, validation mapping loss).

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{
    derived_rng, multi_task_batches, normalize_labels, swap_train_val, Batch, Part, SplitState,
    TaskDataset,
};
use crate::error::{GateError, Result};
use crate::losses::{
    draw_perturbations, mapping_objective, mse, training_objective, BatchInputs, LossBreakdown,
    PerturbationConfig,
};
use crate::model::{GateParams, ModelConfig, TaskRegistry};

/// Dense `n × n` matrix of ratios `λ[s][t]` for transfer from `s` to `t`.
/// The diagonal is unused and kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRatios {
    n: usize,
    values: Vec<f64>,
    lambda_min: f64,
    symmetric: bool,
}

impl TransferRatios {
    pub fn new(n: usize, init: f64, lambda_min: f64, symmetric: bool) -> Result<Self> {
        if !(lambda_min >= 0.0) || !lambda_min.is_finite() {
            return Err(GateError::InvalidArgument(format!(
                "lambda_min must be >= 0, got {lambda_min}"
            )));
        }
        if !init.is_finite() || init < lambda_min {
            return Err(GateError::InvalidArgument(format!(
                "initial ratio {init} is below lambda_min {lambda_min}"
            )));
        }
        let mut values = vec![init; n * n];
        for i in 0..n {
            values[i * n + i] = 0.0;
        }
        Ok(Self {
            n,
            values,
            lambda_min,
            symmetric,
        })
    }

    /// Rebuild from a flat row-major matrix (source-major).
    pub fn from_values(n: usize, values: Vec<f64>, lambda_min: f64, symmetric: bool) -> Result<Self> {
        if values.len() != n * n {
            return Err(GateError::InvalidArgument(format!(
                "expected {} ratio entries, got {}",
                n * n,
                values.len()
            )));
        }
        let mut r = Self::new(n, lambda_min, lambda_min, symmetric)?;
        for s in 0..n {
            for t in 0..n {
                if s != t {
                    r.set(s, t, values[s * n + t])?;
                }
            }
        }
        Ok(r)
    }

    pub fn num_tasks(&self) -> usize {
        self.n
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    /// Flat source-major matrix, diagonal zero.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check_pair(&self, s: usize, t: usize) -> Result<()> {
        if s == t {
            return Err(GateError::SelfTransfer(s.to_string()));
        }
        if s >= self.n || t >= self.n {
            return Err(GateError::MissingRatio {
                from: s.to_string(),
                to: t.to_string(),
            });
        }
        Ok(())
    }

    pub fn get(&self, s: usize, t: usize) -> Result<f64> {
        self.check_pair(s, t)?;
        Ok(self.values[s * self.n + t])
    }

    /// Set one entry; in symmetric mode its mirror follows.
    pub fn set(&mut self, s: usize, t: usize, value: f64) -> Result<()> {
        self.check_pair(s, t)?;
        if !value.is_finite() || value < self.lambda_min {
            return Err(GateError::InvalidArgument(format!(
                "ratio {value} is below lambda_min {}",
                self.lambda_min
            )));
        }
        self.values[s * self.n + t] = value;
        if self.symmetric {
            self.values[t * self.n + s] = value;
        }
        Ok(())
    }

    /// Ordered pairs `(s, t)`, `s ≠ t`, source-major.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n;
        (0..n)
            .flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t)))
            .collect()
    }

    fn project(&mut self) {
        clamp_lambda(&mut self.values, self.lambda_min);
        if self.symmetric {
            symmetrize(&mut self.values, self.n);
        }
        for i in 0..self.n {
            self.values[i * self.n + i] = 0.0;
        }
    }
}

/// Elementwise `max(entry, lambda_min)`.
pub fn clamp_lambda(values: &mut [f64], lambda_min: f64) {
    for v in values {
        if *v < lambda_min {
            *v = lambda_min;
        }
    }
}

/// Replace each pair and its transpose by their average.
fn symmetrize(values: &mut [f64], n: usize) {
    for s in 0..n {
        for t in s + 1..n {
            let avg = 0.5 * (values[s * n + t] + values[t * n + s]);
            values[s * n + t] = avg;
            values[t * n + s] = avg;
        }
    }
}

/// `Σ_k (λ_{k+1} − λ_k)²` along one pair's trajectory.
pub fn quadratic_variation(trajectory: &[f64]) -> Result<f64> {
    if trajectory.len() < 2 {
        return Err(GateError::InvalidArgument(
            "quadratic variation needs at least 2 points".into(),
        ));
    }
    Ok(trajectory.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum())
}

/// Pairs whose ratio is strictly above `threshold`.
pub fn skip_filter(lambda: &TransferRatios, threshold: f64) -> Result<Vec<(usize, usize)>> {
    if !(threshold >= 0.0) {
        return Err(GateError::InvalidArgument(format!(
            "skip threshold must be >= 0, got {threshold}"
        )));
    }
    Ok(lambda
        .pairs()
        .into_iter()
        .filter(|&(s, t)| lambda.values[s * lambda.n + t] > threshold)
        .collect())
}

/// Adam moments for the transfer ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamLambdaState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta0: f64,
    pub beta1: f64,
    pub eta: f64,
    pub eps: f64,
}

impl AdamLambdaState {
    pub fn new(len: usize, beta0: f64, beta1: f64, eta: f64, eps: f64) -> Result<Self> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(beta0) || !unit(beta1) || !(eta > 0.0) || !(eps > 0.0) {
            return Err(GateError::InvalidArgument(format!(
                "outer Adam needs beta0, beta1 in [0,1), eta > 0, eps > 0; got {beta0}, {beta1}, {eta}, {eps}"
            )));
        }
        Ok(Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta0,
            beta1,
            eta,
            eps,
        })
    }

    /// One raw update of `lambda` by gradient `g` (no clamping).
    pub fn apply(&mut self, lambda: &mut [f64], g: &[f64]) -> Result<()> {
        if lambda.len() != self.m.len() || g.len() != self.m.len() {
            return Err(GateError::ShapeMismatch {
                op: "outer adam",
                left: vec![lambda.len(), g.len()],
                right: vec![self.m.len()],
            });
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(GateError::NonFinite(format!("outer gradient {bad}")));
        }
        self.step += 1;
        let c0 = 1.0 - self.beta0.powi(self.step as i32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        for i in 0..g.len() {
            self.m[i] = self.beta0 * self.m[i] + (1.0 - self.beta0) * g[i];
            self.v[i] = self.beta1 * self.v[i] + (1.0 - self.beta1) * g[i] * g[i];
            let m_hat = self.m[i] / c0;
            let v_hat = self.v[i] / c1;
            lambda[i] -= self.eta * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Apply one outer update to the ratios: Adam, clamp, then symmetrize.
pub fn outer_update(
    lambda: &mut TransferRatios,
    state: &mut AdamLambdaState,
    g: &[f64],
) -> Result<()> {
    state.apply(&mut lambda.values, g)?;
    lambda.project();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InnerOptimizerSpec {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for InnerOptimizerSpec {
    fn default() -> Self {
        InnerOptimizerSpec::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl InnerOptimizerSpec {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            InnerOptimizerSpec::Sgd { lr } => lr > 0.0,
            InnerOptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(GateError::config("train.optimizer", format!("invalid settings {self:?}")))
        }
    }
}

/// Optimizer for θ, with its state.
#[derive(Debug, Clone, PartialEq)]
pub enum InnerOptimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl InnerOptimizer {
    pub fn new(spec: InnerOptimizerSpec, params: &[&Tensor]) -> Self {
        match spec {
            InnerOptimizerSpec::Sgd { lr } => InnerOptimizer::Sgd { lr },
            InnerOptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => InnerOptimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step: 0,
                m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
                v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            },
        }
    }

    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(GateError::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        match self {
            InnerOptimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= *lr * d;
                    }
                }
            }
            InnerOptimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step as i32);
                let c2 = 1.0 - beta2.powi(*step as i32);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (mk, vk) = (&mut m[k], &mut v[k]);
                    for (i, (x, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        mk[i] = *beta1 * mk[i] + (1.0 - *beta1) * d;
                        vk[i] = *beta2 * vk[i] + (1.0 - *beta2) * d * d;
                        *x -= *lr * (mk[i] / c1) / ((vk[i] / c2).sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    32
}
fn default_swap() -> f64 {
    0.2
}
fn default_patience() -> usize {
    20
}
fn default_divergence() -> f64 {
    1e6
}

/// `[train]` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: InnerOptimizerSpec,
    /// cap on inner steps per epoch; batches are reused cyclically if larger
    #[serde(default)]
    pub inner_steps_per_epoch: Option<usize>,
    /// fraction of groups exchanged between train and validation each
    /// epoch; 0 disables the exchange
    #[serde(default = "default_swap")]
    pub swap_fraction: f64,
    /// early stop after this many epochs without a better validation
    /// l_reg; 0 disables early stopping
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            optimizer: InnerOptimizerSpec::default(),
            inner_steps_per_epoch: None,
            swap_fraction: default_swap(),
            patience: default_patience(),
            divergence_threshold: default_divergence(),
            record_wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterCadence {
    /// one λ update per validation batch index
    PerBatch,
    /// one λ update per epoch on the whole validation split
    PerEpoch,
}

fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}
fn default_beta0() -> f64 {
    0.9
}
fn default_eta() -> f64 {
    0.01
}

/// `[bilevel]` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilevelConfig {
    /// when false λ stays at `lambda_init` (fixed-ratio training)
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_one")]
    pub lambda_init: f64,
    #[serde(default)]
    pub lambda_min: f64,
    #[serde(default)]
    pub symmetric: bool,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    #[serde(default = "default_beta2")]
    pub beta1: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_cadence")]
    pub cadence: OuterCadence,
    #[serde(default)]
    pub skip_threshold: Option<f64>,
    /// explicit starting matrix (source-major, diagonal ignored)
    #[serde(default)]
    pub lambda_matrix: Option<Vec<Vec<f64>>>,
}

fn default_cadence() -> OuterCadence {
    OuterCadence::PerBatch
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda_init: 1.0,
            lambda_min: 0.0,
            symmetric: false,
            beta0: 0.9,
            beta1: 0.999,
            eta: 0.01,
            eps: 1e-8,
            cadence: OuterCadence::PerBatch,
            skip_threshold: None,
            lambda_matrix: None,
        }
    }
}

fn default_points() -> usize {
    2
}
fn default_sigma() -> f64 {
    0.1
}

/// `[losses]` settings for the distance loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_points")]
    pub perturb_points: usize,
    #[serde(default = "default_sigma")]
    pub perturb_sigma: f64,
    #[serde(default = "default_one")]
    pub distance_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            perturb_points: default_points(),
            perturb_sigma: default_sigma(),
            distance_weight: 1.0,
        }
    }
}

/// Everything the trainer needs besides data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainerSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bilevel: BilevelConfig,
    pub losses: LossConfig,
}

impl TrainerSettings {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(GateError::config("train.epochs", "must be >= 1"));
        }
        if t.batch_size == 0 {
            return Err(GateError::config("train.batch_size", "must be >= 1"));
        }
        if t.inner_steps_per_epoch == Some(0) {
            return Err(GateError::config("train.inner_steps_per_epoch", "must be >= 1"));
        }
        if !(t.swap_fraction >= 0.0 && t.swap_fraction <= 0.5) {
            return Err(GateError::config("train.swap_fraction", "must be in [0, 0.5]"));
        }
        if !(t.divergence_threshold > 0.0) {
            return Err(GateError::config("train.divergence_threshold", "must be > 0"));
        }
        t.optimizer.validate()?;
        let b = &self.bilevel;
        AdamLambdaState::new(0, b.beta0, b.beta1, b.eta, b.eps)
            .map_err(|e| GateError::config("bilevel", e.to_string()))?;
        if !(b.lambda_min >= 0.0) || !(b.lambda_init >= b.lambda_min) {
            return Err(GateError::config(
                "bilevel.lambda_init",
                "need lambda_init >= lambda_min >= 0",
            ));
        }
        if let Some(th) = b.skip_threshold {
            if !(th >= 0.0) {
                return Err(GateError::config("bilevel.skip_threshold", "must be >= 0"));
            }
        }
        let l = &self.losses;
        PerturbationConfig::uniform(l.perturb_points, l.perturb_sigma, l.distance_weight, 1)
            .map_err(|e| GateError::config("losses", e.to_string()))?;
        Ok(())
    }
}

/// Everything recorded for one finished epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// validation RMSE per task (normalized labels)
    pub val_rmse: Vec<f64>,
    /// mean training breakdown over batches whose target is each task
    pub train_losses: Vec<LossBreakdown>,
    /// ratios after this epoch's outer updates, source-major
    pub lambda: Vec<f64>,
    pub seconds: Option<f64>,
}

impl EpochRecord {
    /// Mean over tasks of validation MSE.
    pub fn mean_val_loss(&self) -> f64 {
        self.val_rmse.iter().map(|r| r * r).sum::<f64>() / self.val_rmse.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Inner,
    Outer,
}

/// Snapshot handed to a [`StepObserver`] around every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepEvent<'a> {
    pub kind: StepKind,
    pub epoch: usize,
    /// false before the update, true after it
    pub done: bool,
    pub params: &'a GateParams,
    pub lambda: &'a TransferRatios,
    /// inner steps report the batch objective once done
    pub losses: Option<&'a LossBreakdown>,
}

pub trait StepObserver {
    fn observe(&mut self, event: StepEvent<'_>);
}

impl<F: FnMut(StepEvent<'_>)> StepObserver for F {
    fn observe(&mut self, event: StepEvent<'_>) {
        self(event)
    }
}

struct NoObserver;

impl StepObserver for NoObserver {
    fn observe(&mut self, _: StepEvent<'_>) {}
}

/// Mutable training state; a checkpoint stores exactly this.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: GateParams,
    pub lambda: TransferRatios,
    pub lambda_opt: AdamLambdaState,
    pub inner_opt: InnerOptimizer,
    pub split: SplitState,
    pub noise_rng: ChaCha8Rng,
    /// epochs completed
    pub epoch: usize,
    pub best_val: f64,
    pub stale_epochs: usize,
    pub stopped: bool,
    pub history: Vec<EpochRecord>,
}

/// Normalize labels with statistics of each task's initial train split.
pub fn prepare_datasets(
    raw: &[TaskDataset],
    split: &SplitState,
) -> Result<Vec<TaskDataset>> {
    if raw.len() != split.tasks.len() {
        return Err(GateError::InvalidArgument(format!(
            "{} datasets but {} splits",
            raw.len(),
            split.tasks.len()
        )));
    }
    raw.iter()
        .zip(&split.tasks)
        .map(|(ds, s)| {
            s.check(ds)?;
            normalize_labels(ds, &s.train)
        })
        .collect()
}

pub struct Trainer {
    settings: TrainerSettings,
    datasets: Vec<TaskDataset>,
    perturb: PerturbationConfig,
    state: TrainerState,
}

impl Trainer {
    /// `datasets` must already be normalized; `split` is the initial split.
    pub fn new(settings: TrainerSettings, datasets: Vec<TaskDataset>, split: SplitState) -> Result<Self> {
        settings.validate()?;
        if datasets.is_empty() {
            return Err(GateError::InvalidArgument("no datasets".into()));
        }
        if datasets.len() != split.tasks.len() {
            return Err(GateError::InvalidArgument("split does not match datasets".into()));
        }
        for (ds, s) in datasets.iter().zip(&split.tasks) {
            if ds.d_x() != settings.model.d_x {
                return Err(GateError::config(
                    "model.d_x",
                    format!("task `{}` has {} features, model expects {}", ds.task, ds.d_x(), settings.model.d_x),
                ));
            }
            s.check(ds)?;
            if s.train.is_empty() || s.val.is_empty() {
                return Err(GateError::InvalidArgument(format!(
                    "task `{}` needs nonempty train and validation splits",
                    ds.task
                )));
            }
        }
        let registry = TaskRegistry::new(datasets.iter().map(|d| d.task.clone()).collect())?;
        let n = registry.len();
        let seed = settings.train.seed;
        let params = GateParams::init(&settings.model, registry, seed)?;
        let b = &settings.bilevel;
        let mut lambda = TransferRatios::new(n, b.lambda_init, b.lambda_min, b.symmetric)?;
        if let Some(rows) = &b.lambda_matrix {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(GateError::config(
                    "bilevel.lambda_matrix",
                    format!("must be {n} x {n}"),
                ));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            lambda = TransferRatios::from_values(n, flat, b.lambda_min, b.symmetric)
                .map_err(|e| GateError::config("bilevel.lambda_matrix", e.to_string()))?;
        }
        let lambda_opt = AdamLambdaState::new(n * n, b.beta0, b.beta1, b.eta, b.eps)?;
        let inner_opt = InnerOptimizer::new(settings.train.optimizer, &params.tensors());
        let l = &settings.losses;
        let perturb = PerturbationConfig::uniform(l.perturb_points, l.perturb_sigma, l.distance_weight, n)?;
        let noise_rng = ChaCha8Rng::from_rng(&mut derived_rng(seed, &[0x0015e]));
        Ok(Self {
            settings,
            datasets,
            perturb,
            state: TrainerState {
                params,
                lambda,
                lambda_opt,
                inner_opt,
                split,
                noise_rng,
                epoch: 0,
                best_val: f64::INFINITY,
                stale_epochs: 0,
                stopped: false,
                history: Vec::new(),
            },
        })
    }

    pub fn settings(&self) -> &TrainerSettings {
        &self.settings
    }

    pub fn datasets(&self) -> &[TaskDataset] {
        &self.datasets
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    /// Replace the state, e.g. with one loaded from a checkpoint.
    pub fn restore(&mut self, state: TrainerState) -> Result<()> {
        if state.params.dims() != self.state.params.dims()
            || state.params.registry() != self.state.params.registry()
            || state.lambda.num_tasks() != self.state.lambda.num_tasks()
        {
            return Err(GateError::CorruptCheckpoint(
                "checkpoint does not match the configured model".into(),
            ));
        }
        self.state = state;
        Ok(())
    }

    pub fn params(&self) -> &GateParams {
        &self.state.params
    }

    pub fn lambda(&self) -> &TransferRatios {
        &self.state.lambda
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    /// True once the epoch budget is spent or early stopping triggered.
    pub fn finished(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.settings.train.epochs
    }

    /// Train until finished.
    pub fn run(&mut self) -> Result<()> {
        self.run_observed(&mut NoObserver)
    }

    pub fn run_observed(&mut self, observer: &mut dyn StepObserver) -> Result<()> {
        while !self.finished() {
            self.run_epoch(observer)?;
        }
        Ok(())
    }

    /// Pairs whose mapping term is evaluated this step.
    fn active_pairs(&self) -> Result<Vec<(usize, usize)>> {
        match self.settings.bilevel.skip_threshold {
            Some(th) => skip_filter(&self.state.lambda, th),
            None => Ok(self.state.lambda.pairs()),
        }
    }

    /// One inner epoch, one outer epoch, then metrics.
    pub fn run_epoch(&mut self, observer: &mut dyn StepObserver) -> Result<()> {
        let clock = Instant::now();
        let epoch = self.state.epoch + 1;
        let seed = self.settings.train.seed;
        let n = self.datasets.len();

        if epoch >= 2 {
            let fraction = self.settings.train.swap_fraction;
            if fraction > 0.0 {
                let tasks = self
                    .state
                    .split
                    .tasks
                    .iter()
                    .zip(&self.datasets)
                    .map(|(s, ds)| swap_train_val(s, ds, fraction, seed, epoch as u64))
                    .collect::<Result<Vec<_>>>()?;
                self.state.split = SplitState { tasks };
            }
        }

        let all: Vec<usize> = (0..n).collect();
        let mut batches = multi_task_batches(
            &self.state.split,
            &all,
            Part::Train,
            self.settings.train.batch_size,
            seed,
            epoch as u64,
        )?;
        if let Some(steps) = self.settings.train.inner_steps_per_epoch {
            batches = batches.iter().cycle().take(steps).cloned().collect();
        }

        let mut sums = vec![LossBreakdown::default(); n];
        let mut counts = vec![0usize; n];
        for batch in &batches {
            observer.observe(StepEvent {
                kind: StepKind::Inner,
                epoch,
                done: false,
                params: &self.state.params,
                lambda: &self.state.lambda,
                losses: None,
            });
            let losses = self.inner_step(batch)?;
            if !losses.is_finite() {
                return Err(GateError::NonFiniteLoss { breakdown: losses });
            }
            if losses.tot > self.settings.train.divergence_threshold {
                return Err(GateError::Divergence {
                    epoch,
                    loss: losses.tot,
                });
            }
            observer.observe(StepEvent {
                kind: StepKind::Inner,
                epoch,
                done: true,
                params: &self.state.params,
                lambda: &self.state.lambda,
                losses: Some(&losses),
            });
            sums[batch.target].accumulate(&losses);
            counts[batch.target] += 1;
        }

        if self.settings.bilevel.enabled && n >= 2 {
            for targets in self.outer_schedule(epoch)? {
                observer.observe(StepEvent {
                    kind: StepKind::Outer,
                    epoch,
                    done: false,
                    params: &self.state.params,
                    lambda: &self.state.lambda,
                    losses: None,
                });
                self.outer_step(&targets)?;
                observer.observe(StepEvent {
                    kind: StepKind::Outer,
                    epoch,
                    done: true,
                    params: &self.state.params,
                    lambda: &self.state.lambda,
                    losses: None,
                });
            }
        }

        let val_rmse = self.validation_rmse()?;
        let train_losses = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { *s } else { s.scaled(1.0 / c as f64) })
            .collect();
        let record = EpochRecord {
            epoch,
            val_rmse,
            train_losses,
            lambda: self.state.lambda.values().to_vec(),
            seconds: self
                .settings
                .train
                .record_wall_clock
                .then(|| clock.elapsed().as_secs_f64()),
        };
        let val_loss = record.mean_val_loss();
        self.state.history.push(record);
        self.state.epoch = epoch;

        if val_loss < self.state.best_val {
            self.state.best_val = val_loss;
            self.state.stale_epochs = 0;
        } else {
            self.state.stale_epochs += 1;
            let p = self.settings.train.patience;
            if p > 0 && self.state.stale_epochs >= p {
                self.state.stopped = true;
            }
        }
        Ok(())
    }

    /// One θ update on a training batch; λ enters as constants.
    pub fn inner_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let t = batch.target;
        let n = self.datasets.len();
        let (x, y) = self.datasets[t].tensors(&batch.indices)?;
        let sources: Vec<usize> = (0..n).filter(|&s| s != t).collect();
        let active = self.active_pairs()?;
        let d_z = self.state.params.dims().1;
        let noise = draw_perturbations(&mut self.state.noise_rng, batch.indices.len(), d_z, &self.perturb);

        let mut tape = Tape::new();
        let gate = self.state.params.bind(&mut tape, true);
        let map_terms: Vec<(usize, Var)> = active
            .iter()
            .filter(|&&(_, tt)| tt == t)
            .map(|&(s, _)| {
                let value = self.state.lambda.values[s * n + t];
                (s, tape.constant(Tensor::scalar(value)))
            })
            .collect();
        let objective = training_objective(
            &mut tape,
            &gate,
            BatchInputs {
                x: &x,
                y: &y,
                target: t,
                sources: &sources,
            },
            &map_terms,
            &self.perturb,
            &noise,
        )?;
        let losses = objective.breakdown(&tape);
        if !losses.is_finite() {
            return Err(GateError::NonFiniteLoss { breakdown: losses });
        }
        let grads = tape.backward(objective.total)?;
        let vars = gate.vars();
        let grad_tensors: Vec<&Tensor> = vars
            .iter()
            .map(|v| grads.get(*v).expect("parameter leaf on tape"))
            .collect();
        let mut params = self.state.params.tensors_mut();
        self.state.inner_opt.apply(&mut params, &grad_tensors)?;
        Ok(losses)
    }

    /// Validation batches for each outer step, as `(target, rows)` lists.
    fn outer_schedule(&self, epoch: usize) -> Result<Vec<Vec<Batch>>> {
        let n = self.datasets.len();
        let all: Vec<usize> = (0..n).collect();
        match self.settings.bilevel.cadence {
            OuterCadence::PerEpoch => Ok(vec![all
                .iter()
                .map(|&t| Batch {
                    target: t,
                    indices: self.state.split.tasks[t].val.clone(),
                })
                .collect()]),
            OuterCadence::PerBatch => {
                let batches = multi_task_batches(
                    &self.state.split,
                    &all,
                    Part::Val,
                    self.settings.train.batch_size,
                    self.settings.train.seed,
                    epoch as u64,
                )?;
                let mut per_task: Vec<Vec<Batch>> = vec![Vec::new(); n];
                for b in batches {
                    per_task[b.target].push(b);
                }
                let steps = per_task.iter().map(Vec::len).max().unwrap_or(0);
                Ok((0..steps)
                    .map(|k| {
                        per_task
                            .iter()
                            .map(|bs| bs[k % bs.len()].clone())
                            .collect()
                    })
                    .collect())
            }
        }
    }

    /// One λ update from validation mapping losses; θ enters as constants.
    /// Each batch contributes the gradient for the pairs targeting its task;
    /// pairs outside the active set get a zero gradient.
    pub fn outer_step(&mut self, batches: &[Batch]) -> Result<()> {
        let n = self.datasets.len();
        if batches.is_empty() || batches.iter().any(|b| b.indices.is_empty()) {
            return Err(GateError::InvalidArgument("empty validation batch".into()));
        }
        let active = self.active_pairs()?;
        let mut tape = Tape::new();
        let gate = self.state.params.bind(&mut tape, false);
        let mut leaves: Vec<((usize, usize), Var)> = Vec::new();
        let mut losses = Vec::with_capacity(batches.len());
        for batch in batches {
            let t = batch.target;
            let terms: Vec<(usize, Var)> = active
                .iter()
                .filter(|&&(_, tt)| tt == t)
                .map(|&(s, _)| {
                    let v = tape.leaf(Tensor::scalar(self.state.lambda.values[s * n + t]));
                    leaves.push(((s, t), v));
                    (s, v)
                })
                .collect();
            if terms.is_empty() {
                continue;
            }
            let (x, y) = self.datasets[t].tensors(&batch.indices)?;
            losses.push(mapping_objective(&mut tape, &gate, &x, &y, t, &terms)?);
        }
        let mut g = vec![0.0; n * n];
        if !losses.is_empty() {
            let total = tape.add_all(&losses)?;
            let grads = tape.backward(total)?;
            for ((s, t), v) in leaves {
                g[s * n + t] += grads.get(v).expect("ratio leaf").data()[0];
            }
        }
        outer_update(&mut self.state.lambda, &mut self.state.lambda_opt, &g)
    }

    /// RMSE of direct predictions on each task's current validation split.
    pub fn validation_rmse(&self) -> Result<Vec<f64>> {
        self.split_rmse(Part::Val)
    }

    pub fn split_rmse(&self, part: Part) -> Result<Vec<f64>> {
        self.datasets
            .iter()
            .zip(&self.state.split.tasks)
            .map(|(ds, s)| {
                let rows = s.part(part);
                if rows.is_empty() {
                    return Err(GateError::InvalidArgument(format!(
                        "task `{}` has an empty {part:?} partition",
                        ds.task
                    )));
                }
                let (x, y) = ds.tensors(rows)?;
                let pred = self.state.params.predict_direct(&x, ds.task.as_str())?;
                Ok(mse(y.data(), &pred)?.sqrt())
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{Record, TaskSplit};
    use crate::model::TaskId;
    use proptest::prelude::*;

    #[test]
    fn clamp_cases() {
        let mut v = vec![0.5, -0.1];
        clamp_lambda(&mut v, 0.0);
        assert_eq!(v, vec![0.5, 0.0]);
        let mut w = vec![0.3, 0.7];
        clamp_lambda(&mut w, 0.1);
        assert_eq!(w, vec![0.3, 0.7]);
        let mut once = vec![-2.0, 0.05, 3.0];
        clamp_lambda(&mut once, 0.1);
        let mut twice = once.clone();
        clamp_lambda(&mut twice, 0.1);
        assert_eq!(once, twice);
    }

    #[test]
    fn quadratic_variation_cases() {
        assert_eq!(quadratic_variation(&[0.4, 0.4, 0.4]).unwrap(), 0.0);
        let qv = quadratic_variation(&[1.0, 0.9, 0.95]).unwrap();
        assert!((qv - 0.0125).abs() < 1e-15);
        let shifted = quadratic_variation(&[4.0, 3.9, 3.95]).unwrap();
        assert!((qv - shifted).abs() < 1e-12);
        assert!(quadratic_variation(&[1.0]).is_err());
    }

    #[test]
    fn skip_filter_cases() {
        let mut r = TransferRatios::new(2, 1.0, 0.0, false).unwrap();
        assert_eq!(skip_filter(&r, 0.0).unwrap().len(), 2);
        r.set(0, 1, 0.05).unwrap();
        r.set(1, 0, 0.5).unwrap();
        assert_eq!(skip_filter(&r, 0.1).unwrap(), vec![(1, 0)]);
        assert!(skip_filter(&r, -1.0).is_err());
    }

    #[test]
    fn ratios_access() {
        let mut r = TransferRatios::new(3, 1.0, 0.0, true).unwrap();
        assert!(matches!(r.get(1, 1), Err(GateError::SelfTransfer(_))));
        assert!(matches!(r.get(0, 5), Err(GateError::MissingRatio { .. })));
        r.set(0, 2, 0.25).unwrap();
        assert_eq!(r.get(2, 0).unwrap(), 0.25);
        assert!(r.set(0, 1, -0.5).is_err());
        assert_eq!(r.pairs().len(), 6);
        assert!(TransferRatios::new(2, 0.0, 0.5, false).is_err());
    }

    #[test]
    fn outer_step_one_hand_case() {
        let mut st = AdamLambdaState::new(1, 0.9, 0.999, 0.001, 1e-8).unwrap();
        let mut lam = vec![1.0];
        st.apply(&mut lam, &[1.0]).unwrap();
        assert!((st.m[0] - 0.1).abs() < 1e-15);
        assert!((st.v[0] - 0.001).abs() < 1e-15);
        assert!((lam[0] - 0.999000000005).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_lambda() {
        let mut r = TransferRatios::new(3, 0.7, 0.0, false).unwrap();
        let before = r.clone();
        let mut st = AdamLambdaState::new(9, 0.9, 0.999, 0.01, 1e-8).unwrap();
        outer_update(&mut r, &mut st, &[0.0; 9]).unwrap();
        assert_eq!(r, before);
        assert!(st.apply(&mut [0.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn outer_update_clamps_and_symmetrizes() {
        let mut r = TransferRatios::new(2, 0.001, 0.0, true).unwrap();
        let mut st = AdamLambdaState::new(4, 0.9, 0.999, 0.01, 1e-8).unwrap();
        outer_update(&mut r, &mut st, &[0.0, 1.0, 0.2, 0.0]).unwrap();
        assert_eq!(r.get(0, 1).unwrap(), 0.0);
        assert_eq!(r.get(0, 1).unwrap(), r.get(1, 0).unwrap());
        assert!(r.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sgd_quadratic_toy() {
        // l(θ) = θ², so one step gives θ - lr * 2θ
        let mut theta = Tensor::scalar(3.0);
        let grad = Tensor::scalar(2.0 * 3.0);
        let mut opt = InnerOptimizer::new(InnerOptimizerSpec::Sgd { lr: 0.1 }, &[&theta]);
        opt.apply(&mut [&mut theta], &[&grad]).unwrap();
        assert!((theta.data()[0] - (3.0 - 0.1 * 6.0)).abs() < 1e-15);
    }

    #[test]
    fn inner_adam_zero_gradient_is_noop() {
        let mut theta = Tensor::vector(vec![1.0, -2.0]);
        let zero = Tensor::zeros(vec![2]);
        let mut opt = InnerOptimizer::new(InnerOptimizerSpec::default(), &[&theta]);
        opt.apply(&mut [&mut theta], &[&zero]).unwrap();
        assert_eq!(theta.data(), &[1.0, -2.0]);
    }

    pub(crate) fn toy_problem(n_tasks: usize, rows: usize) -> (Vec<TaskDataset>, SplitState) {
        let datasets: Vec<TaskDataset> = (0..n_tasks)
            .map(|k| {
                let records = (0..rows)
                    .map(|i| {
                        let a = (i as f64 * 0.37).sin();
                        let b = (i as f64 * 0.11 + k as f64).cos();
                        Record {
                            group: format!("m{i}"),
                            x: vec![a, b, a * b],
                            y: a + 0.5 * b * (k as f64 + 1.0),
                        }
                    })
                    .collect();
                TaskDataset::new(TaskId::new(format!("t{k}")).unwrap(), records).unwrap()
            })
            .collect();
        let cut1 = rows * 6 / 10;
        let cut2 = rows * 8 / 10;
        let split = SplitState {
            tasks: vec![
                TaskSplit {
                    train: (0..cut1).collect(),
                    val: (cut1..cut2).collect(),
                    test: (cut2..rows).collect(),
                };
                n_tasks
            ],
        };
        let datasets = prepare_datasets(&datasets, &split).unwrap();
        (datasets, split)
    }

    pub(crate) fn toy_settings(epochs: usize) -> TrainerSettings {
        TrainerSettings {
            model: ModelConfig {
                d_x: 3,
                d_z: 4,
                d_m: 4,
                embed_hidden: vec![6],
                map_hidden: vec![],
                head_hidden: vec![],
            },
            train: TrainConfig {
                epochs,
                batch_size: 8,
                optimizer: InnerOptimizerSpec::Adam {
                    lr: 0.01,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                patience: 0,
                ..TrainConfig::default()
            },
            bilevel: BilevelConfig::default(),
            losses: LossConfig::default(),
        }
    }

    #[test]
    fn role_separation_small_run() {
        let (ds, split) = toy_problem(3, 30);
        let mut tr = Trainer::new(toy_settings(3), ds, split).unwrap();
        let mut saved: Option<(GateParams, TransferRatios)> = None;
        let (mut inner, mut outer) = (0, 0);
        let mut obs = |e: StepEvent<'_>| {
            if !e.done {
                saved = Some((e.params.clone(), e.lambda.clone()));
                return;
            }
            let (p, l) = saved.take().unwrap();
            match e.kind {
                StepKind::Inner => {
                    inner += 1;
                    assert_eq!(&l, e.lambda);
                    assert_ne!(&p, e.params);
                }
                StepKind::Outer => {
                    outer += 1;
                    assert_eq!(&p, e.params);
                }
            }
        };
        tr.run_observed(&mut obs).unwrap();
        assert!(inner > 0 && outer > 0);
        assert_eq!(tr.history().len(), 3);
        assert_eq!(tr.history()[2].epoch, 3);
    }

    #[test]
    fn single_task_reduces_to_regression() {
        let (ds, split) = toy_problem(1, 40);
        let mut s = toy_settings(30);
        s.train.swap_fraction = 0.0;
        let mut tr = Trainer::new(s, ds, split).unwrap();
        assert!(tr.lambda().pairs().is_empty());
        tr.run().unwrap();
        let h = tr.history();
        assert!(h.last().unwrap().train_losses[0].reg < h[0].train_losses[0].reg);
        assert_eq!(h[0].train_losses[0].map, 0.0);
    }

    #[test]
    fn fixed_mode_keeps_lambda() {
        let (ds, split) = toy_problem(2, 30);
        let mut s = toy_settings(4);
        s.bilevel.enabled = false;
        s.bilevel.lambda_init = 0.6;
        let mut tr = Trainer::new(s, ds, split).unwrap();
        tr.run().unwrap();
        for rec in tr.history() {
            assert_eq!(rec.lambda, vec![0.0, 0.6, 0.6, 0.0]);
        }
    }

    #[test]
    fn bilevel_moves_lambda_down() {
        let (ds, split) = toy_problem(2, 30);
        let mut tr = Trainer::new(toy_settings(3), ds, split).unwrap();
        tr.run().unwrap();
        let l = tr.lambda();
        assert!(l.get(0, 1).unwrap() < 1.0 && l.get(1, 0).unwrap() < 1.0);
    }

    #[test]
    fn early_stopping_halts() {
        let (ds, split) = toy_problem(2, 30);
        let mut s = toy_settings(500);
        s.train.patience = 2;
        s.train.optimizer = InnerOptimizerSpec::Sgd { lr: 1e-9 };
        let mut tr = Trainer::new(s, ds, split).unwrap();
        tr.run().unwrap();
        assert!(tr.epoch() < 500);
    }

    #[test]
    fn divergence_aborts() {
        let (ds, split) = toy_problem(2, 30);
        let mut s = toy_settings(5);
        s.train.divergence_threshold = 1e-6;
        let mut tr = Trainer::new(s, ds, split).unwrap();
        assert!(matches!(tr.run(), Err(GateError::Divergence { epoch: 1, .. })));
    }

    #[test]
    fn settings_validation() {
        let mut s = toy_settings(0);
        assert!(matches!(s.validate(), Err(GateError::Config { .. })));
        s.train.epochs = 1;
        s.bilevel.beta0 = 1.0;
        assert!(s.validate().is_err());
        let mut s = toy_settings(1);
        s.train.swap_fraction = 0.9;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn outer_updates_keep_ratio_invariants(
            n in 2usize..5,
            lambda_min in 0.0f64..0.3,
            symmetric in any::<bool>(),
            grads in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 16), 1..40),
        ) {
            let mut ratios = TransferRatios::new(n, 1.0, lambda_min, symmetric).unwrap();
            let mut state = AdamLambdaState::new(n * n, 0.9, 0.999, 0.05, 1e-8).unwrap();
            for g in &grads {
                outer_update(&mut ratios, &mut state, &g[..n * n]).unwrap();
                for s in 0..n {
                    for t in 0..n {
                        let v = ratios.values()[s * n + t];
                        if s == t {
                            prop_assert_eq!(v, 0.0);
                        } else {
                            prop_assert!(v >= lambda_min);
                            if symmetric {
                                prop_assert_eq!(v, ratios.get(t, s).unwrap());
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn clamp_is_idempotent(mut v in prop::collection::vec(-1.0f64..1.0, 0..20), min in 0.0f64..0.5) {
            clamp_lambda(&mut v, min);
            let once = v.clone();
            clamp_lambda(&mut v, min);
            prop_assert_eq!(&once, &v);
            prop_assert!(v.iter().all(|&x| x >= min));
        }

        #[test]
        fn quadratic_variation_ignores_shifts(
            traj in prop::collection::vec(-2.0f64..2.0, 2..30),
            shift in -5.0f64..5.0,
        ) {
            let qv = quadratic_variation(&traj).unwrap();
            let moved: Vec<f64> = traj.iter().map(|v| v + shift).collect();
            prop_assert!(qv >= 0.0);
            prop_assert!((quadratic_variation(&moved).unwrap() - qv).abs() <= 1e-9 * (1.0 + qv));
        }

        #[test]
        fn skip_filter_shrinks_with_threshold(
            values in prop::collection::vec(0.0f64..1.0, 9),
            lo in 0.0f64..0.5,
            hi in 0.5f64..1.0,
        ) {
            let ratios = TransferRatios::from_values(3, values, 0.0, false).unwrap();
            let wide = skip_filter(&ratios, lo).unwrap();
            let narrow = skip_filter(&ratios, hi).unwrap();
            prop_assert!(narrow.iter().all(|p| wide.contains(p)));
            for (s, t) in wide {
                prop_assert!(ratios.get(s, t).unwrap() > lo);
            }
        }
    }
}
