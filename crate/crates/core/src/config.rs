//! Flat `section.key = value` run configuration.
//!
//! Every key has a default. Values are layered: defaults, then a config
//! file, then explicit overrides. Unknown keys are rejected.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{EpisodeShape, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Metric;
use crate::objective::ObjectiveConfig;
use crate::propagation::PropagationConfig;
use crate::train::{CheckpointChoice, EvalConfig, Experiment, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub propagation: PropagationConfig,
    /// Applied to every Euclidean metric in use.
    pub squared: bool,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate_metric_pairs: Vec<(Metric, Metric)>,
    pub ablate_checkpoint: CheckpointChoice,
    /// `None` follows `propagation.layers_eval`.
    pub inspect_layers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("data/synthetic.csv"),
            checkpoint: PathBuf::from("runs/best.ckpt"),
            out_dir: PathBuf::from("runs"),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            propagation: PropagationConfig::default(),
            squared: true,
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate_metric_pairs: vec![(Metric::Cosine, Metric::NegSqEuclidean)],
            ablate_checkpoint: CheckpointChoice::Last,
            inspect_layers: None,
        }
    }
}

/// Every recognised key with a one-line description, in display order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed for every random stream"),
    ("paths.dataset", "dataset CSV (a .meta sidecar sits next to it)"),
    ("paths.checkpoint", "checkpoint read by eval, inspect and export-embeddings"),
    ("paths.out_dir", "directory for checkpoints, logs and reports"),
    ("data.name", "name written to the dataset sidecar"),
    ("data.classes", "number of synthetic classes"),
    ("data.per_class", "samples per synthetic class"),
    ("data.dim", "feature dimension"),
    ("data.spread", "per-coordinate standard deviation within a class"),
    ("data.separation", "class means are uniform in [-separation, separation]^dim"),
    ("data.split_fractions", "train,val,test class fractions"),
    ("model.hidden", "comma-separated hidden layer widths (empty for none)"),
    ("model.embed_dim", "embedding dimension d"),
    ("propagation.layers_train", "propagation layers while training"),
    ("propagation.layers_eval", "propagation layers at evaluation"),
    ("propagation.softmax_axis", "query attention softmax axis: column|row (alias attention.softmax_axis)"),
    ("propagation.metric", "similarity inside attention"),
    ("propagation.projection_relu", "apply ReLU inside the residual projection"),
    ("propagation.share_projection", "one projection for all layers"),
    ("repulsion.enabled", "repulsive masking on/off"),
    ("repulsion.constant", "c in beta_l = c / (N (L - l))"),
    ("repulsion.in_train", "mask while training"),
    ("repulsion.in_eval", "mask at evaluation"),
    ("repulsion.target", "what is thresholded: query_scores|attention"),
    ("repulsion.min_scope", "scope of the fill minimum: global|row"),
    ("metric.squared", "Euclidean metrics use squared distance"),
    ("objective.alpha", "weight of the local loss"),
    ("objective.reduction", "per-query loss reduction: mean|sum (mean, unlike a plain sum, keeps alpha meaningful across query counts)"),
    ("objective.global_metric", "metric of the global likelihood"),
    ("objective.local_metric", "metric of the local likelihood"),
    ("objective.temperature", "divides the similarity logits"),
    ("objective.local_on_raw_prototypes", "train the local loss on unrectified prototypes"),
    ("objective.propagated_queries", "match propagated instead of raw query embeddings"),
    ("train.lr0", "initial learning rate"),
    ("train.momentum", "SGD momentum"),
    ("train.weight_decay", "L2 weight decay"),
    ("train.decay_factor", "learning-rate divisor per decay step"),
    ("train.decay_every", "iterations between learning-rate decays"),
    ("train.max_iters", "training iterations"),
    ("train.n_way", "classes per training episode"),
    ("train.k_shot", "support samples per class"),
    ("train.m_query", "query samples per class"),
    ("train.arm", "cooperative|pretrain_then_finetune|local_only|global_only"),
    ("train.log_every", "iterations between log lines (0 = none)"),
    ("train.eval_every", "iterations between validations (0 = only at the end)"),
    ("train.val_episodes", "validation episodes per check"),
    ("train.clip_norm", "global gradient-norm clip (0 = off)"),
    ("eval.episodes", "test episodes"),
    ("eval.n_way", "classes per test episode"),
    ("eval.k_shot", "support samples per class"),
    ("eval.m_query", "query samples per class"),
    ("eval.threads", "worker threads for evaluation"),
    ("ablate.metric_pairs", "comma-separated global/local metric pairs"),
    ("ablate.checkpoint", "checkpoint evaluated per arm: best|last"),
    ("inspect.layers", "propagation layers for inspect (empty = propagation.layers_eval)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got `{other}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_pair(key: &str, value: &str) -> Result<(Metric, Metric)> {
    let (g, l) = value
        .split_once('/')
        .ok_or_else(|| Error::Config(format!("{key}: expected global/local, got `{value}`")))?;
    Ok((parse(key, g)?, parse(key, l)?))
}

impl RunConfig {
    /// Current value of `key`, formatted as it would be written in a file.
    pub fn get(&self, key: &str) -> Result<String> {
        let p = &self.propagation;
        let o = &self.objective;
        let t = &self.train;
        let e = &self.eval;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "paths.dataset" => self.dataset.display().to_string(),
            "paths.checkpoint" => self.checkpoint.display().to_string(),
            "paths.out_dir" => self.out_dir.display().to_string(),
            "data.name" => self.synth.name.clone(),
            "data.classes" => self.synth.n_classes.to_string(),
            "data.per_class" => self.synth.per_class.to_string(),
            "data.dim" => self.synth.dim.to_string(),
            "data.spread" => self.synth.spread.to_string(),
            "data.separation" => self.synth.separation.to_string(),
            "data.split_fractions" => join(&self.synth.split_fractions),
            "model.hidden" => join(&self.model.hidden),
            "model.embed_dim" => self.model.embed_dim.to_string(),
            "propagation.layers_train" => p.layers_train.to_string(),
            "propagation.layers_eval" => p.layers_eval.to_string(),
            "propagation.softmax_axis" => p.softmax_axis.to_string(),
            "propagation.metric" => p.metric.to_string(),
            "propagation.projection_relu" => p.projection_relu.to_string(),
            "propagation.share_projection" => self.model.share_projection.to_string(),
            "repulsion.enabled" => p.repulsion_enabled.to_string(),
            "repulsion.constant" => p.repulsion_constant.to_string(),
            "repulsion.in_train" => p.repulsion_in_train.to_string(),
            "repulsion.in_eval" => p.repulsion_in_eval.to_string(),
            "repulsion.target" => p.repulsion_target.to_string(),
            "repulsion.min_scope" => p.min_scope.to_string(),
            "metric.squared" => self.squared.to_string(),
            "objective.alpha" => o.alpha.to_string(),
            "objective.reduction" => o.reduction.to_string(),
            "objective.global_metric" => o.global_metric.to_string(),
            "objective.local_metric" => o.local_metric.to_string(),
            "objective.temperature" => o.temperature.to_string(),
            "objective.local_on_raw_prototypes" => o.local_on_raw_prototypes.to_string(),
            "objective.propagated_queries" => o.propagated_queries.to_string(),
            "train.lr0" => t.lr0.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.decay_factor" => t.decay_factor.to_string(),
            "train.decay_every" => t.decay_every.to_string(),
            "train.max_iters" => t.max_iters.to_string(),
            "train.n_way" => t.shape.n_way.to_string(),
            "train.k_shot" => t.shape.k_shot.to_string(),
            "train.m_query" => t.shape.m_query.to_string(),
            "train.arm" => t.arm.to_string(),
            "train.log_every" => t.log_every.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.val_episodes" => t.val_episodes.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "eval.episodes" => e.episodes.to_string(),
            "eval.n_way" => e.shape.n_way.to_string(),
            "eval.k_shot" => e.shape.k_shot.to_string(),
            "eval.m_query" => e.shape.m_query.to_string(),
            "eval.threads" => e.threads.to_string(),
            "ablate.metric_pairs" => self
                .ablate_metric_pairs
                .iter()
                .map(|(g, l)| format!("{g}/{l}"))
                .collect::<Vec<_>>()
                .join(","),
            "ablate.checkpoint" => self.ablate_checkpoint.to_string(),
            "inspect.layers" => self.inspect_layers.map(|l| l.to_string()).unwrap_or_default(),
            _ => return Err(unknown(key)),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let p = &mut self.propagation;
        let o = &mut self.objective;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "paths.dataset" => self.dataset = PathBuf::from(v),
            "paths.checkpoint" => self.checkpoint = PathBuf::from(v),
            "paths.out_dir" => self.out_dir = PathBuf::from(v),
            "data.name" => self.synth.name = v.to_string(),
            "data.classes" => self.synth.n_classes = parse(key, v)?,
            "data.per_class" => self.synth.per_class = parse(key, v)?,
            "data.dim" => self.synth.dim = parse(key, v)?,
            "data.spread" => self.synth.spread = parse(key, v)?,
            "data.separation" => self.synth.separation = parse(key, v)?,
            "data.split_fractions" => {
                let f: Vec<f64> = parse_list(key, v)?;
                self.synth.split_fractions = f
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three fractions, got `{v}`")))?;
            }
            "model.hidden" => self.model.hidden = parse_list(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "propagation.layers_train" => p.layers_train = parse(key, v)?,
            "propagation.layers_eval" => p.layers_eval = parse(key, v)?,
            "propagation.softmax_axis" | "attention.softmax_axis" => p.softmax_axis = parse(key, v)?,
            "propagation.metric" => p.metric = parse(key, v)?,
            "propagation.projection_relu" => p.projection_relu = parse_bool(key, v)?,
            "propagation.share_projection" => self.model.share_projection = parse_bool(key, v)?,
            "repulsion.enabled" => p.repulsion_enabled = parse_bool(key, v)?,
            "repulsion.constant" => p.repulsion_constant = parse(key, v)?,
            "repulsion.in_train" => p.repulsion_in_train = parse_bool(key, v)?,
            "repulsion.in_eval" => p.repulsion_in_eval = parse_bool(key, v)?,
            "repulsion.target" => p.repulsion_target = parse(key, v)?,
            "repulsion.min_scope" => p.min_scope = parse(key, v)?,
            "metric.squared" => self.squared = parse_bool(key, v)?,
            "objective.alpha" => o.alpha = parse(key, v)?,
            "objective.reduction" => o.reduction = parse(key, v)?,
            "objective.global_metric" => o.global_metric = parse(key, v)?,
            "objective.local_metric" => o.local_metric = parse(key, v)?,
            "objective.temperature" => o.temperature = parse(key, v)?,
            "objective.local_on_raw_prototypes" => o.local_on_raw_prototypes = parse_bool(key, v)?,
            "objective.propagated_queries" => o.propagated_queries = parse_bool(key, v)?,
            "train.lr0" => t.lr0 = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.decay_factor" => t.decay_factor = parse(key, v)?,
            "train.decay_every" => t.decay_every = parse(key, v)?,
            "train.max_iters" => t.max_iters = parse(key, v)?,
            "train.n_way" => t.shape.n_way = parse(key, v)?,
            "train.k_shot" => t.shape.k_shot = parse(key, v)?,
            "train.m_query" => t.shape.m_query = parse(key, v)?,
            "train.arm" => t.arm = parse(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.val_episodes" => t.val_episodes = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "eval.episodes" => e.episodes = parse(key, v)?,
            "eval.n_way" => e.shape.n_way = parse(key, v)?,
            "eval.k_shot" => e.shape.k_shot = parse(key, v)?,
            "eval.m_query" => e.shape.m_query = parse(key, v)?,
            "eval.threads" => e.threads = parse(key, v)?,
            "ablate.metric_pairs" => {
                self.ablate_metric_pairs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_pair(key, s))
                    .collect::<Result<_>>()?
            }
            "ablate.checkpoint" => self.ablate_checkpoint = parse(key, v)?,
            "inspect.layers" => {
                self.inspect_layers = if v.is_empty() { None } else { Some(parse(key, v)?) }
            }
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{o}`")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Renders every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed keys are known")))
            .collect()
    }

    pub fn experiment(&self) -> Result<Experiment> {
        let mut propagation = self.propagation.clone();
        propagation.metric = propagation.metric.with_squared(self.squared);
        let mut objective = self.objective.clone();
        objective.global_metric = objective.global_metric.with_squared(self.squared);
        objective.local_metric = objective.local_metric.with_squared(self.squared);
        let exp = Experiment {
            seed: self.seed,
            model: self.model.clone(),
            propagation,
            objective,
            train: self.train.clone(),
            eval: self.eval.clone(),
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn metric_pairs(&self) -> Vec<(Metric, Metric)> {
        self.ablate_metric_pairs
            .iter()
            .map(|&(g, l)| (g.with_squared(self.squared), l.with_squared(self.squared)))
            .collect()
    }

    pub fn eval_shape(&self) -> EpisodeShape {
        self.eval.shape
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key `{key}`"))
}

/// `key = default  # description` for every key.
pub fn describe_keys() -> String {
    let defaults = RunConfig::default();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    KEYS.iter()
        .map(|(k, help)| {
            let v = defaults.get(k).expect("listed keys are known");
            format!("  {k:<width$} = {v:<18} {help}\n")
        })
        .collect()
}
