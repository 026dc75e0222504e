//! Cooperative objective: global matching against learned class weights,
//! local matching against rectified prototypes, and their gradients.

use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::model::{GradientBag, ModelParams};
use crate::numerics::{pairwise_similarity, pairwise_similarity_backward, Matrix, Metric};
use crate::propagation::{propagate_backward, propagate_layers, string_enum, Mode, PropagationConfig, PropagationTrace};

string_enum! {
    /// Which loss terms drive training.
    ScheduleArm {
        Cooperative => "cooperative",
        LocalOnly => "local_only",
        GlobalOnly => "global_only",
    }
}

string_enum! {
    /// How per-query cross-entropies are combined.
    Reduction { Mean => "mean", Sum => "sum" }
}

impl ScheduleArm {
    /// `(global weight, local weight)` of the optimised loss.
    pub fn weights(self, alpha: f64) -> (f64, f64) {
        match self {
            ScheduleArm::Cooperative => (1.0, alpha),
            ScheduleArm::LocalOnly => (0.0, 1.0),
            ScheduleArm::GlobalOnly => (1.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub reduction: Reduction,
    pub global_metric: Metric,
    pub local_metric: Metric,
    /// Divides the similarity logits of both likelihoods.
    pub temperature: f64,
    /// Match queries against the plain support means instead of the
    /// rectified prototypes during training.
    pub local_on_raw_prototypes: bool,
    /// Match the propagated query embeddings `Z_L` instead of `f(x̃)`.
    pub propagated_queries: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            reduction: Reduction::Mean,
            global_metric: Metric::Cosine,
            local_metric: Metric::NegSqEuclidean,
            temperature: 1.0,
            local_on_raw_prototypes: false,
            propagated_queries: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Class probabilities for each query.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution {
    pub probs: Matrix,
    pub log_probs: Matrix,
}

impl PredictionDistribution {
    /// Row-wise softmax of `logits`, keeping log-probabilities for the loss.
    pub fn from_logits(logits: &Matrix) -> Self {
        let mut log_probs = logits.clone();
        for r in 0..log_probs.rows() {
            let row = log_probs.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let mut probs = log_probs.clone();
        for v in probs.data_mut() {
            *v = v.exp();
        }
        Self { probs, log_probs }
    }

    pub fn from_probs(probs: Matrix) -> Self {
        let mut log_probs = probs.clone();
        for v in log_probs.data_mut() {
            *v = v.ln();
        }
        Self { probs, log_probs }
    }

    pub fn n_classes(&self) -> usize {
        self.probs.cols()
    }

    /// Argmax per row, ties to the lowest class index.
    pub fn predicted(&self) -> Vec<usize> {
        (0..self.probs.rows()).map(|r| self.probs.argmax_row(r)).collect()
    }

    /// Fraction of rows whose argmax equals the label.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .predicted()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        hits as f64 / labels.len() as f64
    }
}

fn likelihood(a: &Matrix, b: &Matrix, metric: Metric, temperature: f64) -> Result<PredictionDistribution> {
    let mut logits = pairwise_similarity(a, b, metric)?;
    if temperature != 1.0 {
        logits.scale(1.0 / temperature);
    }
    Ok(PredictionDistribution::from_logits(&logits))
}

/// Softmax over `κ(f(x̃ᵢ), w_k)` for every training class `k`.
pub fn global_likelihood(
    params: &ModelParams,
    z_query: &Matrix,
    metric: Metric,
    temperature: f64,
) -> Result<PredictionDistribution> {
    if z_query.cols() != params.global_head.weights.cols() {
        return Err(Error::dim("global_likelihood", params.global_head.weights.cols(), z_query.cols()));
    }
    likelihood(z_query, &params.global_head.weights, metric, temperature)
}

/// Softmax over `κ(z̃ᵢ, c_n)` for the N episode prototypes.
pub fn local_likelihood(
    z_query: &Matrix,
    prototypes: &Matrix,
    metric: Metric,
    temperature: f64,
) -> Result<PredictionDistribution> {
    if z_query.cols() != prototypes.cols() {
        return Err(Error::dim("local_likelihood", prototypes.cols(), z_query.cols()));
    }
    likelihood(z_query, prototypes, metric, temperature)
}

/// Cross-entropy of `dist` against integer labels.
pub fn cross_entropy(dist: &PredictionDistribution, labels: &[usize], reduction: Reduction) -> Result<f64> {
    if labels.len() != dist.log_probs.rows() {
        return Err(Error::dim("cross_entropy", dist.log_probs.rows(), labels.len()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= dist.n_classes() {
            return Err(Error::Contract {
                op: "cross_entropy",
                msg: format!("label {y} out of range for {} classes", dist.n_classes()),
            });
        }
        total -= dist.log_probs[(i, y)];
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean if labels.is_empty() => 0.0,
        Reduction::Mean => total / labels.len() as f64,
    })
}

/// Global loss over the query set.
pub fn global_loss(dist: &PredictionDistribution, global_labels: &[usize], reduction: Reduction) -> Result<f64> {
    cross_entropy(dist, global_labels, reduction)
}

/// Local loss over the query set.
pub fn local_loss(dist: &PredictionDistribution, local_labels: &[usize], reduction: Reduction) -> Result<f64> {
    cross_entropy(dist, local_labels, reduction)
}

/// `global + α·local`.
pub fn full_loss(global: f64, local: f64, alpha: f64) -> Result<f64> {
    if alpha < 0.0 || alpha.is_nan() {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    Ok(global + alpha * local)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub global_loss: f64,
    pub local_loss: f64,
    /// `global_loss + alpha·local_loss`, whatever the arm.
    pub full_loss: f64,
    /// The loss the arm actually optimises.
    pub objective: f64,
    pub alpha: f64,
    pub query_accuracy_local: f64,
}

/// Intermediate values of a training forward pass.
struct Forward {
    embed_cache: crate::model::EmbedCache,
    n_support: usize,
    z_query0: Matrix,
    trace: PropagationTrace,
    local_query: Matrix,
    local_dist: PredictionDistribution,
    global: Option<(PredictionDistribution, Vec<usize>)>,
    report: LossReport,
    weights: (f64, f64),
}

fn forward(
    params: &ModelParams,
    episode: &Episode,
    prop: &PropagationConfig,
    obj: &ObjectiveConfig,
    arm: ScheduleArm,
) -> Result<Forward> {
    obj.validate()?;
    let shape = episode.shape;
    let n_support = shape.n_support();
    let x = episode.support.vstack(&episode.query)?;
    let (z0, embed_cache) = params.embedder.forward_cached(&x)?;
    let z_support = z0.slice_rows(0, n_support);
    let z_query0 = z0.slice_rows(n_support, z0.rows());

    let (layers, repulsion) = if obj.local_on_raw_prototypes {
        (0, false)
    } else {
        (prop.layers(Mode::Train), prop.repulsion_active(Mode::Train))
    };
    let trace = propagate_layers(
        params,
        &z_support,
        &z_query0,
        shape.n_way,
        shape.k_shot,
        prop,
        layers,
        repulsion,
    )?;
    let local_query = if obj.propagated_queries {
        trace.final_query_embeddings()
    } else {
        z_query0.clone()
    };
    let local_dist = local_likelihood(&local_query, trace.final_prototypes(), obj.local_metric, obj.temperature)?;
    let local = local_loss(&local_dist, &episode.query_labels, obj.reduction)?;

    let weights = arm.weights(obj.alpha);
    let global = match episode.query_global_labels() {
        Some(labels) => Some((
            global_likelihood(params, &z_query0, obj.global_metric, obj.temperature)?,
            labels,
        )),
        None if weights.0 > 0.0 => {
            return Err(Error::Contract {
                op: "forward_backward",
                msg: "the global loss needs an episode drawn from the train split".into(),
            })
        }
        None => None,
    };
    let global_value = match &global {
        Some((dist, labels)) => global_loss(dist, labels, obj.reduction)?,
        None => 0.0,
    };

    let report = LossReport {
        global_loss: global_value,
        local_loss: local,
        full_loss: full_loss(global_value, local, obj.alpha)?,
        objective: weights.0 * global_value + weights.1 * local,
        alpha: obj.alpha,
        query_accuracy_local: local_dist.accuracy(&episode.query_labels),
    };
    if !(report.objective.is_finite() && report.full_loss.is_finite()) {
        return Err(Error::NonFinite {
            what: "episode loss".into(),
        });
    }
    Ok(Forward {
        embed_cache,
        n_support,
        z_query0,
        trace,
        local_query,
        local_dist,
        global,
        report,
        weights,
    })
}

/// `∂L/∂logits` of a softmax cross-entropy, already divided by the
/// temperature so it applies to the raw similarities.
fn cross_entropy_grad(
    dist: &PredictionDistribution,
    labels: &[usize],
    weight: f64,
    reduction: Reduction,
    temperature: f64,
) -> Matrix {
    let mut g = dist.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        g[(i, y)] -= 1.0;
    }
    let denom = match reduction {
        Reduction::Mean => labels.len().max(1) as f64,
        Reduction::Sum => 1.0,
    };
    g.scale(weight / (denom * temperature));
    g
}

/// Loss report of one training episode, without gradients.
pub fn episode_loss(
    params: &ModelParams,
    episode: &Episode,
    prop: &PropagationConfig,
    obj: &ObjectiveConfig,
    arm: ScheduleArm,
) -> Result<LossReport> {
    Ok(forward(params, episode, prop, obj, arm)?.report)
}

/// Losses of `arm` and their gradients w.r.t. every parameter.
///
/// Terms whose weight is zero are skipped entirely, so for example
/// `alpha = 0` reproduces the global-only gradients bit for bit.
pub fn forward_backward(
    params: &ModelParams,
    episode: &Episode,
    prop: &PropagationConfig,
    obj: &ObjectiveConfig,
    arm: ScheduleArm,
) -> Result<(LossReport, GradientBag)> {
    let fwd = forward(params, episode, prop, obj, arm)?;
    let mut grads = GradientBag::zeros_like(params);
    let (w_global, w_local) = fwd.weights;
    let total_rows = fwd.n_support + fwd.z_query0.rows();
    let d = params.embed_dim();

    let mut grad_z0 = if w_local != 0.0 {
        let g_logits = cross_entropy_grad(
            &fwd.local_dist,
            &episode.query_labels,
            w_local,
            obj.reduction,
            obj.temperature,
        );
        let (g_query, g_protos) = pairwise_similarity_backward(
            &fwd.local_query,
            fwd.trace.final_prototypes(),
            obj.local_metric,
            &g_logits,
        );
        let mut g_embed = Matrix::zeros(total_rows, d);
        let mut g_direct = Matrix::zeros(total_rows, d);
        let target = if obj.propagated_queries { &mut g_embed } else { &mut g_direct };
        for i in 0..g_query.rows() {
            target.row_mut(fwd.n_support + i).copy_from_slice(g_query.row(i));
        }
        let mut g = propagate_backward(params, &fwd.trace, prop, &g_protos, &g_embed, &mut grads)?;
        g.add_assign(&g_direct)?;
        g
    } else {
        Matrix::zeros(total_rows, d)
    };

    if w_global != 0.0 {
        let (dist, labels) = fwd.global.as_ref().expect("checked in forward");
        let g_logits = cross_entropy_grad(dist, labels, w_global, obj.reduction, obj.temperature);
        let (g_query, g_weights) = pairwise_similarity_backward(
            &fwd.z_query0,
            &params.global_head.weights,
            obj.global_metric,
            &g_logits,
        );
        grads.global_head.weights.add_assign(&g_weights)?;
        for i in 0..g_query.rows() {
            for (g, v) in grad_z0.row_mut(fwd.n_support + i).iter_mut().zip(g_query.row(i)) {
                *g += v;
            }
        }
    }

    params.embedder.backward(&fwd.embed_cache, &grad_z0, &mut grads.embedder)?;
    for t in grads.tensors() {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", t.name),
            });
        }
    }
    Ok((fwd.report, grads))
}

/// Embeds the episode and propagates with `layers` layers.
pub fn propagate_episode(
    params: &ModelParams,
    episode: &Episode,
    prop: &PropagationConfig,
    layers: usize,
    repulsion: bool,
) -> Result<PropagationTrace> {
    let shape = episode.shape;
    let z_support = params.embedder.forward(&episode.support)?;
    let z_query = params.embedder.forward(&episode.query)?;
    propagate_layers(
        params,
        &z_support,
        &z_query,
        shape.n_way,
        shape.k_shot,
        prop,
        layers,
        repulsion,
    )
}

/// Query embeddings compared with the prototypes: `f(x̃)`, or `Z_L` when
/// `propagated_queries` is set.
pub fn matched_queries(trace: &PropagationTrace, obj: &ObjectiveConfig) -> Matrix {
    if obj.propagated_queries {
        trace.final_query_embeddings()
    } else {
        trace.query_embeddings(0)
    }
}

/// Test-time prediction: local matching against prototypes rectified with
/// `layers_eval` layers. The global head is not consulted.
pub fn predict(
    params: &ModelParams,
    episode: &Episode,
    prop: &PropagationConfig,
    obj: &ObjectiveConfig,
) -> Result<PredictionDistribution> {
    let trace = propagate_episode(
        params,
        episode,
        prop,
        prop.layers(Mode::Eval),
        prop.repulsion_active(Mode::Eval),
    )?;
    local_likelihood(
        &matched_queries(&trace, obj),
        trace.final_prototypes(),
        obj.local_metric,
        obj.temperature,
    )
}
