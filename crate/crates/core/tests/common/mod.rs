//! Shared fixtures: a scalar-loop reference of the prediction path written
//! directly from the definitions, and a finite-difference gradient checker.
#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

use rand::Rng as _;
use rand_distr::StandardNormal;
use remp::data::{Episode, EpisodeShape, Rng};
use remp::model::{init_params, ModelParams, ModelShape};
use remp::numerics::{Matrix, Metric};
use remp::objective::{episode_loss, forward_backward, ObjectiveConfig, ScheduleArm};
use remp::propagation::{MinScope, PropagationConfig, RepulsionTarget, SoftmaxAxis};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Rows, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), (b.rows(), b.cols()));
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b[(r, c)]).abs());
        }
    }
    worst
}

pub fn sim(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Cosine => {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for i in 0..a.len() {
                ab += a[i] * b[i];
                aa += a[i] * a[i];
                bb += b[i] * b[i];
            }
            ab / (aa.sqrt() * bb.sqrt())
        }
        Metric::NegSqEuclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
        Metric::NegEuclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|o| {
            let mut s = b[o];
            for i in 0..x.len() {
                s += w[(o, i)] * x[i];
            }
            s
        })
        .collect()
}

pub fn embed(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let n = params.embedder.layers.len();
    let mut h = x.to_vec();
    for (i, layer) in params.embedder.layers.iter().enumerate() {
        h = affine(&h, &layer.weight, &layer.bias);
        if i + 1 < n {
            for v in &mut h {
                *v = v.max(0.0);
            }
        }
    }
    h
}

/// `h(v) + v` with the projection of layer `l`.
fn residual(params: &ModelParams, l: usize, v: &[f64], relu: bool) -> Vec<f64> {
    let h = &params.projections[if params.projections.len() == 1 { 0 } else { l }];
    let mut y = affine(v, &h.weight, &h.bias);
    if relu {
        for x in &mut y {
            *x = x.max(0.0);
        }
    }
    y.iter().zip(v).map(|(a, b)| a + b).collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub struct ReferenceTrace {
    /// `C_0 ..= C_L`.
    pub prototypes: Vec<Rows>,
    /// Query rows of `Z_0 ..= Z_L`.
    pub queries: Vec<Rows>,
    /// Attention after repulsion, per layer.
    pub attention: Vec<Rows>,
}

pub fn reference_propagate(
    params: &ModelParams,
    ep: &Episode,
    prop: &PropagationConfig,
    layers: usize,
    repulsion: bool,
) -> ReferenceTrace {
    let EpisodeShape { n_way, k_shot, .. } = ep.shape;
    let ns = n_way * k_shot;
    let mut z: Rows = rows(&ep.support)
        .iter()
        .chain(rows(&ep.query).iter())
        .map(|x| embed(params, x))
        .collect();
    let d = z[0].len();
    let mut c: Rows = (0..n_way)
        .map(|n| {
            (0..d)
                .map(|j| (0..k_shot).map(|k| z[n * k_shot + k][j]).sum::<f64>() / k_shot as f64)
                .collect()
        })
        .collect();
    let mut out = ReferenceTrace {
        prototypes: vec![c.clone()],
        queries: vec![z[ns..].to_vec()],
        attention: Vec::new(),
    };
    for l in 0..layers {
        let t = z.len();
        let nq = t - ns;
        let scores: Rows = (0..n_way)
            .map(|i| (0..nq).map(|j| sim(prop.metric, &c[i], &z[ns + j])).collect())
            .collect();
        let mut p = vec![vec![0.0; nq]; n_way];
        match prop.softmax_axis {
            SoftmaxAxis::Column => {
                for j in 0..nq {
                    let col: Vec<f64> = (0..n_way).map(|i| scores[i][j]).collect();
                    for (i, v) in softmax(&col).into_iter().enumerate() {
                        p[i][j] = v;
                    }
                }
            }
            SoftmaxAxis::Row => {
                for i in 0..n_way {
                    p[i] = softmax(&scores[i]);
                }
            }
        }
        let mut a = vec![vec![0.0; t]; n_way];
        for i in 0..n_way {
            for s in 0..ns {
                a[i][s] = if s / k_shot == i { 1.0 } else { 0.0 };
            }
            for j in 0..nq {
                a[i][ns + j] = p[i][j];
            }
            let sum: f64 = a[i].iter().sum();
            for v in &mut a[i] {
                *v /= sum;
            }
        }
        if repulsion {
            let beta = prop.repulsion_constant / (n_way as f64 * (layers - l) as f64);
            let first = match prop.repulsion_target {
                RepulsionTarget::QueryScores => ns,
                RepulsionTarget::Attention => 0,
            };
            let block_min = |rows: std::ops::Range<usize>| {
                let mut m = f64::INFINITY;
                for i in rows {
                    for col in first..t {
                        m = m.min(a[i][col]);
                    }
                }
                m
            };
            let global = block_min(0..n_way);
            let fills: Vec<f64> = (0..n_way)
                .map(|i| match prop.min_scope {
                    MinScope::Global => -global,
                    MinScope::Row => -block_min(i..i + 1),
                })
                .collect();
            let before = a.clone();
            for i in 0..n_way {
                for col in first..t {
                    let score = match prop.repulsion_target {
                        RepulsionTarget::QueryScores => p[i][col - ns],
                        RepulsionTarget::Attention => before[i][col],
                    };
                    if score < beta {
                        a[i][col] = fills[i];
                    }
                }
            }
        }
        let cstar: Rows = (0..n_way)
            .map(|i| (0..d).map(|j| (0..t).map(|col| a[i][col] * z[col][j]).sum()).collect())
            .collect();
        c = cstar.iter().map(|v| residual(params, l, v, prop.projection_relu)).collect();
        z = z.iter().map(|v| residual(params, l, v, prop.projection_relu)).collect();
        out.prototypes.push(c.clone());
        out.queries.push(z[ns..].to_vec());
        out.attention.push(a);
    }
    out
}

/// Class probabilities of the evaluation-mode prediction.
pub fn reference_predict(params: &ModelParams, ep: &Episode, prop: &PropagationConfig, obj: &ObjectiveConfig) -> Rows {
    let layers = prop.layers_eval;
    let repulsion = prop.repulsion_enabled && prop.repulsion_in_eval;
    let tr = reference_propagate(params, ep, prop, layers, repulsion);
    let queries = &tr.queries[if obj.propagated_queries { layers } else { 0 }];
    let protos = &tr.prototypes[layers];
    queries
        .iter()
        .map(|q| {
            let logits: Vec<f64> = protos
                .iter()
                .map(|c| sim(obj.local_metric, q, c) / obj.temperature)
                .collect();
            softmax(&logits)
        })
        .collect()
}

pub fn random_rows(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Overwrites every projection with uniform values in `[-scale, scale]`.
pub fn randomize_projections(params: &mut ModelParams, scale: f64, rng: &mut Rng) {
    for p in &mut params.projections {
        for v in p.weight.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
        for v in &mut p.bias {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Episode with class-offset Gaussian rows; queries and support grouped by class.
pub fn random_episode(shape: EpisodeShape, dim: usize, rng: &mut Rng) -> Episode {
    let means = random_rows(shape.n_way, dim, 1.5, rng);
    let mut block = |per: usize| {
        let mut m = random_rows(shape.n_way * per, dim, 1.0, rng);
        for r in 0..m.rows() {
            for (v, mu) in m.row_mut(r).iter_mut().zip(means.row(r / per.max(1))) {
                *v += mu;
            }
        }
        m
    };
    let support = block(shape.k_shot);
    let query = block(shape.m_query);
    Episode::from_blocks(shape, support, query).unwrap()
}

pub fn random_params(
    input_dim: usize,
    hidden: &[usize],
    embed_dim: usize,
    n_train: usize,
    n_projections: usize,
    rng: &mut Rng,
) -> ModelParams {
    let shape = ModelShape {
        input_dim,
        hidden: hidden.to_vec(),
        embed_dim,
        n_train_classes: n_train,
        n_projections,
    };
    let mut p = init_params(&shape, rng).unwrap();
    randomize_projections(&mut p, 0.3, rng);
    p
}

/// The fixed tiny gradient-check episode: N=2, K=1, M=2, D=3, d=2, with the
/// two local classes mapped to training classes 0 and 2 of three.
pub fn tiny_fixture(seed: u64) -> (ModelParams, Episode) {
    let mut rng = Rng::new(seed);
    let params = random_params(3, &[3], 2, 3, 1, &mut rng);
    let mut ep = random_episode(EpisodeShape::new(2, 1, 2), 3, &mut rng);
    ep.global_map = Some(vec![0, 2]);
    (params, ep)
}

/// Every discrete choice the loss makes: hidden ReLU signs, projection ReLU
/// signs and repulsion masks with their argmins. Finite differences are only
/// meaningful when this stays fixed.
pub fn kink_signature(params: &ModelParams, ep: &Episode, prop: &PropagationConfig, obj: &ObjectiveConfig) -> Option<Vec<u8>> {
    let mut sig = Vec::new();
    for x in rows(&ep.support).iter().chain(rows(&ep.query).iter()) {
        let mut h = x.clone();
        let n = params.embedder.layers.len();
        for layer in &params.embedder.layers[..n - 1] {
            h = affine(&h, &layer.weight, &layer.bias);
            sig.extend(h.iter().map(|&v| (v > 0.0) as u8));
            for v in &mut h {
                *v = v.max(0.0);
            }
        }
    }
    let layers = if obj.local_on_raw_prototypes { 0 } else { prop.layers_train };
    let repulsion = prop.repulsion_enabled && prop.repulsion_in_train;
    let trace = remp::objective::propagate_episode(params, ep, prop, layers, repulsion).ok()?;
    for (l, layer) in trace.layers.iter().enumerate() {
        if let Some(mask) = &layer.step.mask {
            sig.extend(mask.masked.iter().map(|&m| m as u8));
            for am in &mask.argmin {
                let (r, c) = am.unwrap_or((usize::MAX, usize::MAX));
                sig.extend((r as u64).to_le_bytes());
                sig.extend((c as u64).to_le_bytes());
            }
        }
        if prop.projection_relu {
            let h = &params.projections[if params.projections.len() == 1 { 0 } else { l }];
            for m in [&layer.step.rectified, trace.embeddings(l)] {
                for r in 0..m.rows() {
                    sig.extend(affine(m.row(r), &h.weight, &h.bias).iter().map(|&v| (v > 0.0) as u8));
                }
            }
        }
    }
    Some(sig)
}

#[derive(Debug)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / tolerance`; at most 1 means pass.
    pub worst_ratio: f64,
    pub worst_entry: String,
    pub entries: usize,
    /// A perturbation changed the kink signature.
    pub kink: bool,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        !self.kink && self.worst_ratio <= 1.0
    }
}

/// Central differences of the arm objective against the analytic gradient,
/// entry by entry, with tolerance `max(rel·max(|a|, |n|), floor)`.
pub fn gradcheck(
    params: &ModelParams,
    ep: &Episode,
    prop: &PropagationConfig,
    obj: &ObjectiveConfig,
    arm: ScheduleArm,
    eps: f64,
    rel: f64,
    floor: f64,
) -> Option<GradCheck> {
    let base = kink_signature(params, ep, prop, obj)?;
    let (_, grads) = forward_backward(params, ep, prop, obj, arm).ok()?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.data.to_vec()))
        .collect();
    let mut out = GradCheck {
        worst_ratio: 0.0,
        worst_entry: String::new(),
        entries: 0,
        kink: false,
    };
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for (j, &a) in a.iter().enumerate() {
            let mut fx = [0.0; 2];
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut q = params.clone();
                q.tensors_mut()[ti].data[j] += sign * eps;
                if kink_signature(&q, ep, prop, obj).as_ref() != Some(&base) {
                    out.kink = true;
                    return Some(out);
                }
                fx[s] = episode_loss(&q, ep, prop, obj, arm).ok()?.objective;
            }
            let numeric = (fx[0] - fx[1]) / (2.0 * eps);
            let tol = (rel * a.abs().max(numeric.abs())).max(floor);
            let ratio = (a - numeric).abs() / tol;
            out.entries += 1;
            if ratio > out.worst_ratio {
                out.worst_ratio = ratio;
                out.worst_entry = format!("{name}[{j}]: analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    Some(out)
}

/// The metric assignments exercised by gradient checks: the default
/// (cosine global, squared Euclidean local and attention) and its swap.
pub fn metric_settings() -> [(&'static str, Metric, Metric); 2] {
    [
        ("cos/sqeuc", Metric::Cosine, Metric::NegSqEuclidean),
        ("sqeuc/cos", Metric::NegSqEuclidean, Metric::Cosine),
    ]
}

pub fn configs(global: Metric, local: Metric, repulsion: bool) -> (PropagationConfig, ObjectiveConfig) {
    let prop = PropagationConfig {
        repulsion_enabled: repulsion,
        metric: local,
        ..Default::default()
    };
    let obj = ObjectiveConfig {
        global_metric: global,
        local_metric: local,
        ..Default::default()
    };
    (prop, obj)
}
