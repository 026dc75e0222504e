//! Episodic SGD training, transductive evaluation and the ablation runner.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{derive_seed, sample_episode, stream, Dataset, EpisodeShape, Rng, Split};
use crate::error::{Error, Result};
use crate::model::{init_params, GradientBag, ModelConfig, ModelParams, ParamGroup};
use crate::numerics::Metric;
use crate::objective::{forward_backward, predict, LossReport, ObjectiveConfig, ScheduleArm};
use crate::propagation::{string_enum, PropagationConfig};

string_enum! {
    /// Loss schedule over the whole run.
    TrainArm {
        Cooperative => "cooperative",
        PretrainThenFinetune => "pretrain_then_finetune",
        LocalOnly => "local_only",
        GlobalOnly => "global_only",
    }
}

impl TrainArm {
    /// Objective used at iteration `iter`; the pretrain phase covers the
    /// first `⌊max_iters/2⌋` iterations.
    pub fn arm_at(self, iter: usize, max_iters: usize) -> ScheduleArm {
        match self {
            TrainArm::Cooperative => ScheduleArm::Cooperative,
            TrainArm::LocalOnly => ScheduleArm::LocalOnly,
            TrainArm::GlobalOnly => ScheduleArm::GlobalOnly,
            TrainArm::PretrainThenFinetune if iter < max_iters / 2 => ScheduleArm::GlobalOnly,
            TrainArm::PretrainThenFinetune => ScheduleArm::LocalOnly,
        }
    }
}

/// Parameter groups that receive no update under `arm`, weight decay included.
pub fn frozen_groups(arm: ScheduleArm) -> &'static [ParamGroup] {
    match arm {
        ScheduleArm::Cooperative => &[],
        ScheduleArm::LocalOnly => &[ParamGroup::GlobalHead],
        ScheduleArm::GlobalOnly => &[ParamGroup::Projection],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_iters: usize,
    pub shape: EpisodeShape,
    pub arm: TrainArm,
    /// Log every this many iterations (0 disables the log).
    pub log_every: usize,
    /// Validate every this many iterations (0 validates only at the end).
    pub eval_every: usize,
    pub val_episodes: usize,
    /// Rescale the gradient to this global L2 norm when it is larger
    /// (0 disables clipping).
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-3,
            decay_factor: 10.0,
            decay_every: 1000,
            max_iters: 3000,
            shape: EpisodeShape::new(5, 1, 15),
            arm: TrainArm::Cooperative,
            log_every: 10,
            eval_every: 500,
            val_episodes: 100,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config(format!(
                "decay factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!(
                "clip_norm must be non-negative, got {}",
                self.clip_norm
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        self.shape.validate()
    }

    /// `lr0 / decay_factor^⌊iter/decay_every⌋`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr0 / self.decay_factor.powi((iter / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: ModelParams,
    pub iteration: usize,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        Self {
            velocity: params.zeros_like(),
            iteration: 0,
            lr: config.lr_at(0),
        }
    }
}

/// `v ← μv + (g + λp)`, `p ← p − lr·v` on every tensor outside `frozen`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &GradientBag,
    state: &mut OptimizerState,
    config: &TrainConfig,
    frozen: &[ParamGroup],
) -> Result<()> {
    let grad_tensors = grads.tensors();
    if grad_tensors.len() != state.velocity.tensors().len() {
        return Err(Error::Contract {
            op: "sgd_step",
            msg: "gradient and parameter layouts differ".into(),
        });
    }
    for g in &grad_tensors {
        if let Some(v) = g.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {} (value {v})", g.name),
            });
        }
    }
    let lr = state.lr;
    let (mu, wd) = (config.momentum, config.weight_decay);
    let norm = grad_tensors
        .iter()
        .filter(|g| !frozen.contains(&g.group))
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let clip = if config.clip_norm > 0.0 && norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };
    for ((p, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors_mut())
        .zip(&grad_tensors)
    {
        if p.shape != g.shape || p.name != g.name {
            return Err(Error::Contract {
                op: "sgd_step",
                msg: format!("tensor {} does not match gradient {}", p.name, g.name),
            });
        }
        if frozen.contains(&p.group) {
            continue;
        }
        for ((p, v), g) in p.data.iter_mut().zip(v.data.iter_mut()).zip(g.data) {
            *v = mu * *v + (clip * g + wd * *p);
            *p -= lr * *v;
        }
    }
    state.iteration += 1;
    state.lr = config.lr_at(state.iteration);
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub global_loss: f64,
    pub local_loss: f64,
    pub full_loss: f64,
    pub query_acc: f64,
    pub wallclock_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iter: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Parameters with the best validation accuracy (earliest on ties).
    pub best_params: ModelParams,
    pub best_val: Option<ValRecord>,
    pub log: Vec<LogEntry>,
    /// Loss report of every iteration.
    pub history: Vec<LossReport>,
    pub validations: Vec<ValRecord>,
}

/// Everything needed to train and evaluate one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub seed: u64,
    pub model: ModelConfig,
    pub propagation: PropagationConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.propagation.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Fresh parameters for `ds`, drawn from the init sub-stream of the seed.
    pub fn init_params(&self, ds: &Dataset) -> Result<ModelParams> {
        let shape = self
            .model
            .shape(ds.dim, ds.n_train_classes(), self.propagation.max_layers());
        init_params(&shape, &mut Rng::derived(self.seed, stream::INIT))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub shape: EpisodeShape,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 600,
            shape: EpisodeShape::new(5, 1, 15),
            threads: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.shape.validate()
    }
}

fn with_iteration(err: Error, iter: usize, episode_seed: u64) -> Error {
    match err {
        Error::NonFinite { what } => Error::NonFinite {
            what: format!("{what} at iteration {iter} (episode seed {episode_seed})"),
        },
        other => other,
    }
}

/// Validation shape: the eval shape with `n_way` capped by the val classes.
pub fn val_shape(ds: &Dataset, shape: EpisodeShape) -> EpisodeShape {
    let n_val = ds.classes_in(Split::Val).count();
    EpisodeShape {
        n_way: shape.n_way.min(n_val),
        ..shape
    }
}

/// Episodic training from `init`. Episode `i` is drawn with seed
/// `derive_seed(derive_seed(seed, TRAIN), i)`, so a failing iteration can be
/// replayed in isolation.
pub fn train(ds: &Dataset, init: ModelParams, exp: &Experiment) -> Result<TrainOutcome> {
    exp.validate()?;
    let cfg = &exp.train;
    let train_seed = derive_seed(exp.seed, stream::TRAIN);
    let val_seed = derive_seed(exp.seed, stream::VAL);
    let val_shape = val_shape(ds, exp.eval.shape);
    let validate_now = |iter: usize| {
        exp.train.val_episodes > 0
            && val_shape.n_way > 0
            && (iter == cfg.max_iters || (cfg.eval_every > 0 && iter.is_multiple_of(cfg.eval_every) && iter > 0))
    };

    let start = Instant::now();
    let mut params = init;
    let mut state = OptimizerState::new(&params, cfg);
    let mut best_params = params.clone();
    let mut best_val: Option<ValRecord> = None;
    let mut log = Vec::new();
    let mut history = Vec::with_capacity(cfg.max_iters);
    let mut validations = Vec::new();

    for iter in 0..cfg.max_iters {
        let episode_seed = derive_seed(train_seed, iter as u64);
        let episode = sample_episode(ds, Split::Train, cfg.shape, &mut Rng::new(episode_seed))?;
        let arm = cfg.arm.arm_at(iter, cfg.max_iters);
        let lr = state.lr;
        let (report, grads) = forward_backward(&params, &episode, &exp.propagation, &exp.objective, arm)
            .map_err(|e| with_iteration(e, iter, episode_seed))?;
        sgd_step(&mut params, &grads, &mut state, cfg, frozen_groups(arm))
            .map_err(|e| with_iteration(e, iter, episode_seed))?;
        if cfg.log_every > 0 && iter % cfg.log_every == 0 {
            log.push(LogEntry {
                iter,
                lr,
                global_loss: report.global_loss,
                local_loss: report.local_loss,
                full_loss: report.full_loss,
                query_acc: report.query_accuracy_local,
                wallclock_ms: start.elapsed().as_millis() as u64,
            });
        }
        history.push(report);

        if validate_now(iter + 1) {
            let report = evaluate(
                ds,
                &params,
                Split::Val,
                exp.train.val_episodes,
                val_shape,
                &exp.propagation,
                &exp.objective,
                val_seed,
                exp.eval.threads,
            )?;
            let record = ValRecord {
                iter: iter + 1,
                accuracy: report.mean,
            };
            if best_val.as_ref().is_none_or(|b| record.accuracy > b.accuracy) {
                best_params = params.clone();
                best_val = Some(record.clone());
            }
            validations.push(record);
        }
    }
    if best_val.is_none() {
        best_params = params.clone();
    }
    Ok(TrainOutcome {
        params,
        best_params,
        best_val,
        log,
        history,
        validations,
    })
}

/// Per-episode accuracies with summary statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` divisor, 0 when `n = 1`).
    pub std: f64,
    /// `1.96·std/√n`.
    pub ci95: f64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, fingerprint: String) -> Result<Self> {
        let n = accuracies.len();
        if n == 0 {
            return Err(Error::Config("evaluation needs at least one episode".into()));
        }
        let (mean, std) = mean_std(&accuracies);
        Ok(Self {
            n_episodes: n,
            mean,
            std,
            ci95: ci95(std, n),
            accuracies,
            fingerprint,
        })
    }
}

/// Mean and `n − 1` standard deviation; the deviation is 0 for `n < 2`.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn ci95(std: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    1.96 * std / (n as f64).sqrt()
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    params_sha256: String,
    dataset: &'a str,
    split: Split,
    n_episodes: usize,
    shape: EpisodeShape,
    seed: u64,
    propagation: &'a PropagationConfig,
    objective: &'a ObjectiveConfig,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded transductive evaluation on `split`. Episode `i` uses seed
/// `derive_seed(seed, i)`, so the result does not depend on `threads`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    ds: &Dataset,
    params: &ModelParams,
    split: Split,
    n_episodes: usize,
    shape: EpisodeShape,
    prop: &PropagationConfig,
    obj: &ObjectiveConfig,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    prop.validate()?;
    obj.validate()?;
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    if params.input_dim() != ds.dim {
        return Err(Error::Dimension {
            op: "evaluate (checkpoint input dim vs dataset dim)",
            expected: params.input_dim(),
            got: ds.dim,
        });
    }
    let one = |i: usize| -> Result<f64> {
        let episode = sample_episode(ds, split, shape, &mut Rng::new(derive_seed(seed, i as u64)))?;
        Ok(predict(params, &episode, prop, obj)?.accuracy(&episode.query_labels))
    };
    let accuracies = if threads <= 1 {
        (0..n_episodes).map(one).collect::<Result<Vec<_>>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?
            .install(|| (0..n_episodes).into_par_iter().map(one).collect::<Result<Vec<_>>>())?
    };
    let fingerprint = FingerprintInput {
        params_sha256: hex(&Sha256::digest(checkpoint::to_bytes(params))),
        dataset: &ds.name,
        split,
        n_episodes,
        shape,
        seed,
        propagation: prop,
        objective: obj,
    };
    let json = serde_json::to_vec(&fingerprint).expect("fingerprint serializes");
    EvalReport::from_accuracies(accuracies, hex(&Sha256::digest(json)))
}

/// Test-split evaluation with the experiment's eval settings.
pub fn evaluate_test(ds: &Dataset, params: &ModelParams, exp: &Experiment) -> Result<EvalReport> {
    evaluate(
        ds,
        params,
        Split::Test,
        exp.eval.episodes,
        exp.eval.shape,
        &exp.propagation,
        &exp.objective,
        derive_seed(exp.seed, stream::EVAL),
        exp.eval.threads,
    )
}

string_enum! {
    /// Which parameters of a training run get evaluated.
    CheckpointChoice { Best => "best", Last => "last" }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub arm: TrainArm,
    pub global_metric: Metric,
    pub local_metric: Metric,
    pub repulsion: bool,
    pub layers_train: usize,
    pub layers_eval: usize,
    pub best_val: Option<ValRecord>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Fixed-width text table, one arm per line.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>8}  {:>8}\n", "arm", "mean", "ci95");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>8.4}  {:>8.4}\n",
                r.name, r.report.mean, r.report.ci95
            ));
        }
        out
    }
}

/// One ablation arm: a name and the experiment it runs.
pub fn ablation_arms(base: &Experiment, metric_pairs: &[(Metric, Metric)]) -> Vec<(String, Experiment)> {
    let arms = [
        TrainArm::Cooperative,
        TrainArm::PretrainThenFinetune,
        TrainArm::LocalOnly,
        TrainArm::GlobalOnly,
    ];
    let mut out = Vec::new();
    for &(global, local) in metric_pairs {
        for arm in arms {
            let mut exp = base.clone();
            exp.train.arm = arm;
            exp.objective.global_metric = global;
            exp.objective.local_metric = local;
            let name = if metric_pairs.len() == 1 {
                arm.to_string()
            } else {
                format!("{arm}[{global}/{local}]")
            };
            out.push((name, exp));
        }
    }
    let mut exp = base.clone();
    exp.train.arm = TrainArm::Cooperative;
    exp.propagation.repulsion_enabled = false;
    out.push(("no_repulsion".into(), exp));
    let mut exp = base.clone();
    exp.train.arm = TrainArm::Cooperative;
    exp.propagation.layers_train = 0;
    exp.propagation.layers_eval = 0;
    out.push(("inductive".into(), exp));
    out
}

/// Trains every arm from the same initial parameters and evaluates the
/// chosen checkpoint of each on the test split.
pub fn run_ablation(
    ds: &Dataset,
    base: &Experiment,
    metric_pairs: &[(Metric, Metric)],
    checkpoint: CheckpointChoice,
) -> Result<AblationTable> {
    let rows = run_ablation_models(ds, base, metric_pairs, checkpoint)?
        .into_iter()
        .map(|(row, _)| row)
        .collect();
    Ok(AblationTable { rows })
}

/// As [`run_ablation`], also returning the evaluated parameters of each arm.
pub fn run_ablation_models(
    ds: &Dataset,
    base: &Experiment,
    metric_pairs: &[(Metric, Metric)],
    checkpoint: CheckpointChoice,
) -> Result<Vec<(AblationRow, ModelParams)>> {
    if metric_pairs.is_empty() {
        return Err(Error::Config("ablation needs at least one metric pair".into()));
    }
    let init = base.init_params(ds)?;
    let mut rows = Vec::new();
    for (name, exp) in ablation_arms(base, metric_pairs) {
        let outcome = train(ds, init.clone(), &exp)?;
        let params = match checkpoint {
            CheckpointChoice::Best => outcome.best_params,
            CheckpointChoice::Last => outcome.params,
        };
        let report = evaluate_test(ds, &params, &exp)?;
        let row = AblationRow {
            name,
            arm: exp.train.arm,
            global_metric: exp.objective.global_metric,
            local_metric: exp.objective.local_metric,
            repulsion: exp.propagation.repulsion_enabled,
            layers_train: exp.propagation.layers_train,
            layers_eval: exp.propagation.layers_eval,
            best_val: outcome.best_val,
            report,
        };
        rows.push((row, params));
    }
    Ok(rows)
}
