//! Attentive prototype rectification.
//!
//! Each layer attends from the current prototypes `C` (N×d) to every episode
//! embedding `Z = [Z_S; Z_Q]` (T×d, T = NK + NM):
//!
//! 1. `P = softmax(κ(C, Z_Q))`, by default down each column so every query
//!    spreads one unit of attention over the N prototypes.
//! 2. `A = rownorm([H, P])` where `H` is the fixed support pattern (row `n`
//!    is one on columns `[K·n, K·(n+1))`).
//! 3. Optional repulsion: entries whose score is below `β_l = c / (N(L−l))`
//!    are replaced by `−min`, a small negative weight.
//! 4. `C* = A·Z`, then `C ← h(C*) + C*` and `Z ← h(Z) + Z`.
//!
//! The backward pass through all of the above lives here as well so the
//! objective can differentiate end to end.


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientBag, ModelParams};
use crate::numerics::{
    pairwise_similarity, pairwise_similarity_backward, softmax_cols, softmax_cols_backward, softmax_rows,
    softmax_rows_backward, Matrix, Metric,
};

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, ::serde::Serialize, ::serde::Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::error::Error;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($s => Ok($name::$variant),)+
                    other => Err($crate::error::Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: {})"),
                        other,
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

pub(crate) use string_enum;

string_enum! {
    /// Axis of the query-attention softmax.
    SoftmaxAxis { Column => "column", Row => "row" }
}

string_enum! {
    /// Whether `min(A)` is taken over the whole candidate block or per row.
    MinScope { Global => "global", Row => "row" }
}

string_enum! {
    /// What the repulsion threshold is compared against.
    ///
    /// `QueryScores`: the query-attention softmax scores `P` (before the
    /// support block is attached), masking only query columns; the fill value
    /// is the minimum of the renormalised query block.
    /// `Attention`: the renormalised matrix `A` itself, all columns.
    RepulsionTarget { QueryScores => "query_scores", Attention => "attention" }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, ::serde::Serialize, ::serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub layers_train: usize,
    pub layers_eval: usize,
    /// `c` in `β_l = c / (N(L − l))`.
    pub repulsion_constant: f64,
    pub repulsion_enabled: bool,
    pub repulsion_in_train: bool,
    pub repulsion_in_eval: bool,
    pub repulsion_target: RepulsionTarget,
    pub min_scope: MinScope,
    pub softmax_axis: SoftmaxAxis,
    pub metric: Metric,
    /// Use `max(0, ·)` inside the projection layer.
    pub projection_relu: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            layers_train: 2,
            layers_eval: 10,
            repulsion_constant: 1.5,
            repulsion_enabled: true,
            repulsion_in_train: true,
            repulsion_in_eval: true,
            repulsion_target: RepulsionTarget::QueryScores,
            min_scope: MinScope::Global,
            softmax_axis: SoftmaxAxis::Column,
            metric: Metric::NegSqEuclidean,
            projection_relu: false,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.repulsion_constant > 0.0 && self.repulsion_constant.is_finite()) {
            return Err(Error::Config(format!(
                "repulsion constant must be positive, got {}",
                self.repulsion_constant
            )));
        }
        Ok(())
    }

    pub fn layers(&self, mode: Mode) -> usize {
        match mode {
            Mode::Train => self.layers_train,
            Mode::Eval => self.layers_eval,
        }
    }

    pub fn repulsion_active(&self, mode: Mode) -> bool {
        self.repulsion_enabled
            && match mode {
                Mode::Train => self.repulsion_in_train,
                Mode::Eval => self.repulsion_in_eval,
            }
    }

    /// Number of distinct projection layers a model needs under this config
    /// when projections are not shared.
    pub fn max_layers(&self) -> usize {
        self.layers_train.max(self.layers_eval).max(1)
    }
}

/// `β_l = c / (N(L − l))` for `l ∈ [0, L)`.
pub fn repulsion_threshold(constant: f64, n_way: usize, layers: usize, layer: usize) -> Result<f64> {
    if layer >= layers {
        return Err(Error::Contract {
            op: "attention_step",
            msg: format!("layer index {layer} must be below the layer count {layers}"),
        });
    }
    Ok(constant / (n_way as f64 * (layers - layer) as f64))
}

/// Row `n` is the mean of support rows `[K·n, K·(n+1))`.
///
/// Accumulated as `Σ (1/K)·z` in row order, which is exactly how a
/// renormalised hard-coded support row averages them, so the two agree bit
/// for bit.
pub fn initial_prototypes(z_support: &Matrix, n_way: usize, k_shot: usize) -> Result<Matrix> {
    if z_support.rows() != n_way * k_shot {
        return Err(Error::dim("initial_prototypes", n_way * k_shot, z_support.rows()));
    }
    let d = z_support.cols();
    let w = 1.0 / k_shot as f64;
    let mut out = Matrix::zeros(n_way, d);
    for n in 0..n_way {
        let row = out.row_mut(n);
        for k in 0..k_shot {
            for (o, v) in row.iter_mut().zip(z_support.row(n * k_shot + k)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// The fixed support attention: row `n` is one on `[K·n, K·(n+1))`.
pub fn hardcode_support(n_way: usize, k_shot: usize) -> Matrix {
    let mut out = Matrix::zeros(n_way, n_way * k_shot);
    for n in 0..n_way {
        for k in 0..k_shot {
            out[(n, n * k_shot + k)] = 1.0;
        }
    }
    out
}

/// Entries replaced by the repulsion step of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RepulsionMask {
    pub threshold: f64,
    pub scope: MinScope,
    /// Row-major over the N×T attention matrix.
    pub masked: Vec<bool>,
    /// Location of the minimum for each scope group (one group for
    /// `Global`, one per row for `Row`). `None` for a row without candidates.
    pub argmin: Vec<Option<(usize, usize)>>,
}

impl RepulsionMask {
    fn group(&self, row: usize) -> usize {
        match self.scope {
            MinScope::Global => 0,
            MinScope::Row => row,
        }
    }

    pub fn is_masked(&self, cols: usize, row: usize, col: usize) -> bool {
        self.masked[row * cols + col]
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Everything one attention step computes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStep {
    /// `κ(C, Z_Q)`, N×NM.
    pub scores: Matrix,
    /// Softmax of `scores`, N×NM.
    pub query_attention: Matrix,
    /// Row sums of `[H, P]` used for renormalisation.
    pub row_sums: Vec<f64>,
    /// Renormalised `A` before repulsion, N×T.
    pub attention: Matrix,
    pub mask: Option<RepulsionMask>,
    /// `A` after repulsion (equal to `attention` when no mask applies).
    pub attention_masked: Matrix,
    /// `C* = A·Z`.
    pub rectified: Matrix,
}

/// Settings of one attention step that do not come from the config.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub n_way: usize,
    pub k_shot: usize,
    pub layers: usize,
    pub layer: usize,
    pub repulsion: bool,
}

fn build_mask(
    attention: &Matrix,
    query_attention: &Matrix,
    n_support: usize,
    config: &PropagationConfig,
    threshold: f64,
) -> Option<RepulsionMask> {
    let (rows, cols) = attention.shape();
    let first_col = match config.repulsion_target {
        RepulsionTarget::QueryScores => n_support,
        RepulsionTarget::Attention => 0,
    };
    if first_col >= cols {
        return None;
    }
    let groups = match config.min_scope {
        MinScope::Global => 1,
        MinScope::Row => rows,
    };
    let mut argmin: Vec<Option<(usize, usize)>> = vec![None; groups];
    let mut masked = vec![false; rows * cols];
    for r in 0..rows {
        let g = match config.min_scope {
            MinScope::Global => 0,
            MinScope::Row => r,
        };
        for c in first_col..cols {
            let v = attention[(r, c)];
            // first occurrence wins ties
            match argmin[g] {
                Some((ar, ac)) if attention[(ar, ac)] <= v => {}
                _ => argmin[g] = Some((r, c)),
            }
            let score = match config.repulsion_target {
                RepulsionTarget::QueryScores => query_attention[(r, c - n_support)],
                RepulsionTarget::Attention => v,
            };
            masked[r * cols + c] = score < threshold;
        }
    }
    Some(RepulsionMask {
        threshold,
        scope: config.min_scope,
        masked,
        argmin,
    })
}

/// One rectification step. `z` is `[Z_S; Z_Q]`.
pub fn attention_step(
    prototypes: &Matrix,
    z: &Matrix,
    config: &PropagationConfig,
    ctx: StepContext,
) -> Result<AttentionStep> {
    let StepContext {
        n_way,
        k_shot,
        layers,
        layer,
        repulsion,
    } = ctx;
    let n_support = n_way * k_shot;
    if prototypes.rows() != n_way {
        return Err(Error::dim("attention_step", n_way, prototypes.rows()));
    }
    if prototypes.cols() != z.cols() {
        return Err(Error::dim("attention_step", prototypes.cols(), z.cols()));
    }
    if z.rows() < n_support {
        return Err(Error::dim("attention_step", n_support, z.rows()));
    }
    let threshold = repulsion_threshold(config.repulsion_constant, n_way, layers, layer)?;
    let z_query = z.slice_rows(n_support, z.rows());

    let scores = pairwise_similarity(prototypes, &z_query, config.metric)?;
    let query_attention = match config.softmax_axis {
        SoftmaxAxis::Column => softmax_cols(&scores),
        SoftmaxAxis::Row => softmax_rows(&scores),
    };
    let mut attention = hardcode_support(n_way, k_shot).hstack(&query_attention)?;
    let mut row_sums = Vec::with_capacity(n_way);
    for r in 0..n_way {
        let row = attention.row_mut(r);
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
        row_sums.push(s);
    }

    let mask = if repulsion {
        build_mask(&attention, &query_attention, n_support, config, threshold)
    } else {
        None
    };
    let mut attention_masked = attention.clone();
    if let Some(mask) = &mask {
        let cols = attention.cols();
        let fills: Vec<f64> = mask
            .argmin
            .iter()
            .map(|am| am.map_or(0.0, |(r, c)| -attention[(r, c)]))
            .collect();
        for r in 0..n_way {
            for c in 0..cols {
                if mask.is_masked(cols, r, c) {
                    attention_masked[(r, c)] = fills[mask.group(r)];
                }
            }
        }
    }
    let rectified = attention_masked.matmul(z)?;
    Ok(AttentionStep {
        scores,
        query_attention,
        row_sums,
        attention,
        mask,
        attention_masked,
        rectified,
    })
}

/// Gradients of one attention step w.r.t. its inputs.
fn attention_step_backward(
    step: &AttentionStep,
    prototypes: &Matrix,
    z: &Matrix,
    config: &PropagationConfig,
    n_support: usize,
    grad_rectified: &Matrix,
) -> Result<(Matrix, Matrix)> {
    // C* = Ã·Z
    let grad_masked = grad_rectified.matmul_t(z)?;
    let mut grad_z = step.attention_masked.t_matmul(grad_rectified)?;

    // Ã: surviving entries pass through, masked ones route to their argmin
    let mut grad_attention = grad_masked.clone();
    if let Some(mask) = &step.mask {
        let cols = step.attention.cols();
        let mut routed = vec![0.0; mask.argmin.len()];
        for r in 0..step.attention.rows() {
            for c in 0..cols {
                if mask.is_masked(cols, r, c) {
                    routed[mask.group(r)] += grad_masked[(r, c)];
                    grad_attention[(r, c)] = 0.0;
                }
            }
        }
        for (g, am) in mask.argmin.iter().enumerate() {
            if let Some((r, c)) = *am {
                grad_attention[(r, c)] -= routed[g];
            }
        }
    }

    // A = R / rowsum(R); only the query block of R depends on the inputs
    let n_query = step.query_attention.cols();
    let mut grad_p = Matrix::zeros(step.query_attention.rows(), n_query);
    for r in 0..step.attention.rows() {
        let a = step.attention.row(r);
        let ga = grad_attention.row(r);
        let inner: f64 = a.iter().zip(ga).map(|(x, y)| x * y).sum();
        let s = step.row_sums[r];
        for j in 0..n_query {
            grad_p[(r, j)] = (ga[n_support + j] - inner) / s;
        }
    }

    let grad_scores = match config.softmax_axis {
        SoftmaxAxis::Column => softmax_cols_backward(&step.query_attention, &grad_p),
        SoftmaxAxis::Row => softmax_rows_backward(&step.query_attention, &grad_p),
    };
    let z_query = z.slice_rows(n_support, z.rows());
    let (grad_c, grad_zq) = pairwise_similarity_backward(prototypes, &z_query, config.metric, &grad_scores);
    for j in 0..z_query.rows() {
        for (g, v) in grad_z.row_mut(n_support + j).iter_mut().zip(grad_zq.row(j)) {
            *g += v;
        }
    }
    Ok((grad_c, grad_z))
}

/// Output of one propagation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub step: AttentionStep,
    /// `C_{l+1} = h(C*) + C*`.
    pub prototypes: Matrix,
    /// `Z_{l+1} = h(Z_l) + Z_l`.
    pub embeddings: Matrix,
}

/// Full record of a propagation run.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationTrace {
    pub n_way: usize,
    pub k_shot: usize,
    pub initial_prototypes: Matrix,
    /// `[Z_S; Z_Q]` before the first layer.
    pub initial_embeddings: Matrix,
    pub layers: Vec<LayerTrace>,
}

impl PropagationTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `C_l` for `l ∈ [0, L]`.
    pub fn prototypes(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.initial_prototypes
        } else {
            &self.layers[l - 1].prototypes
        }
    }

    /// `Z_l` for `l ∈ [0, L]`.
    pub fn embeddings(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.initial_embeddings
        } else {
            &self.layers[l - 1].embeddings
        }
    }

    /// Query rows of `Z_l`.
    pub fn query_embeddings(&self, l: usize) -> Matrix {
        let z = self.embeddings(l);
        z.slice_rows(self.n_way * self.k_shot, z.rows())
    }

    pub fn final_prototypes(&self) -> &Matrix {
        self.prototypes(self.n_layers())
    }

    pub fn final_query_embeddings(&self) -> Matrix {
        self.query_embeddings(self.n_layers())
    }
}

/// Runs `L` rectification layers (`L` picked by `mode`).
///
/// Query labels never enter this function.
pub fn propagate(
    params: &ModelParams,
    z_support: &Matrix,
    z_query: &Matrix,
    n_way: usize,
    k_shot: usize,
    config: &PropagationConfig,
    mode: Mode,
) -> Result<PropagationTrace> {
    propagate_layers(params, z_support, z_query, n_way, k_shot, config, config.layers(mode), config.repulsion_active(mode))
}

/// [`propagate`] with an explicit layer count and repulsion switch.
#[allow(clippy::too_many_arguments)]
pub fn propagate_layers(
    params: &ModelParams,
    z_support: &Matrix,
    z_query: &Matrix,
    n_way: usize,
    k_shot: usize,
    config: &PropagationConfig,
    layers: usize,
    repulsion: bool,
) -> Result<PropagationTrace> {
    config.validate()?;
    let c0 = initial_prototypes(z_support, n_way, k_shot)?;
    let z0 = z_support.vstack(z_query)?;
    let mut trace = PropagationTrace {
        n_way,
        k_shot,
        initial_prototypes: c0,
        initial_embeddings: z0,
        layers: Vec::with_capacity(layers),
    };
    for l in 0..layers {
        let h = params.projection(l)?;
        let step = attention_step(
            trace.prototypes(l),
            trace.embeddings(l),
            config,
            StepContext {
                n_way,
                k_shot,
                layers,
                layer: l,
                repulsion,
            },
        )?;
        let prototypes = h.residual(&step.rectified, config.projection_relu)?;
        let embeddings = h.residual(trace.embeddings(l), config.projection_relu)?;
        trace.layers.push(LayerTrace {
            step,
            prototypes,
            embeddings,
        });
    }
    Ok(trace)
}

/// Backpropagates `∂L/∂C_L` and `∂L/∂Z_L` through the whole stack.
///
/// Projection gradients are accumulated into `grads`; the return value is
/// `∂L/∂Z_0` (support and query rows), including the path through the
/// initial prototype means.
pub fn propagate_backward(
    params: &ModelParams,
    trace: &PropagationTrace,
    config: &PropagationConfig,
    grad_prototypes: &Matrix,
    grad_embeddings: &Matrix,
    grads: &mut GradientBag,
) -> Result<Matrix> {
    let n_support = trace.n_way * trace.k_shot;
    let mut grad_c = grad_prototypes.clone();
    let mut grad_z = grad_embeddings.clone();
    for l in (0..trace.n_layers()).rev() {
        let layer = &trace.layers[l];
        let h = params.projection(l)?;
        let relu = config.projection_relu;
        let grad_h = grads.projection_mut(l);
        let grad_rectified = h.residual_backward(&layer.step.rectified, &grad_c, relu, grad_h)?;
        let z_prev = trace.embeddings(l);
        let mut grad_z_prev = h.residual_backward(z_prev, &grad_z, relu, grads.projection_mut(l))?;
        let (grad_c_prev, grad_z_att) = attention_step_backward(
            &layer.step,
            trace.prototypes(l),
            z_prev,
            config,
            n_support,
            &grad_rectified,
        )?;
        grad_z_prev.add_assign(&grad_z_att)?;
        grad_c = grad_c_prev;
        grad_z = grad_z_prev;
    }
    // C_0 is the block mean of Z_S
    let k = trace.k_shot;
    for n in 0..trace.n_way {
        for i in 0..k {
            for (g, v) in grad_z.row_mut(n * k + i).iter_mut().zip(grad_c.row(n)) {
                *g += v / k as f64;
            }
        }
    }
    Ok(grad_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;
    use crate::model::{init_params, ModelShape};
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn params(d: usize, seed: u64) -> ModelParams {
        init_params(
            &ModelShape {
                input_dim: d,
                hidden: vec![],
                embed_dim: d,
                n_train_classes: 3,
                n_projections: 1,
            },
            &mut Rng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn prototypes_are_block_means() {
        let z = Matrix::from_rows(&[[4.0, -1.0], [7.0, 2.0]]);
        assert_eq!(initial_prototypes(&z, 2, 1).unwrap(), z);

        let z = Matrix::from_rows(&[[1.0, 1.0], [3.0, 3.0]]);
        assert_eq!(initial_prototypes(&z, 1, 2).unwrap().data(), &[2.0, 2.0]);

        let mut rng = Rng::new(11);
        let z = random_matrix(12, 3, &mut rng);
        let c = initial_prototypes(&z, 3, 4).unwrap();
        for n in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += z[(n * 4 + k, j)];
                }
                assert!((c[(n, j)] - s / 4.0).abs() < 1e-12);
            }
        }
        assert!(matches!(initial_prototypes(&z, 2, 4), Err(Error::Dimension { .. })));
    }

    #[test]
    fn support_pattern() {
        assert_eq!(
            hardcode_support(2, 2),
            Matrix::from_rows(&[[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
        );
        assert_eq!(hardcode_support(1, 4).data(), &[1.0; 4]);
        assert_eq!(hardcode_support(3, 1), Matrix::identity(3));
    }

    #[test]
    fn threshold_schedule() {
        assert!((repulsion_threshold(1.5, 5, 10, 9).unwrap() - 0.3).abs() < 1e-15);
        assert!((repulsion_threshold(1.5, 5, 10, 0).unwrap() - 0.03).abs() < 1e-15);
        assert!(matches!(
            repulsion_threshold(1.5, 5, 10, 10),
            Err(Error::Contract { .. })
        ));
        let betas: Vec<f64> = (0..10).map(|l| repulsion_threshold(1.5, 5, 10, l).unwrap()).collect();
        assert!(betas.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn no_queries_gives_support_means() {
        let mut rng = Rng::new(4);
        let zs = random_matrix(6, 3, &mut rng);
        let c = random_matrix(3, 3, &mut rng);
        let config = PropagationConfig {
            repulsion_enabled: false,
            ..Default::default()
        };
        let ctx = StepContext {
            n_way: 3,
            k_shot: 2,
            layers: 2,
            layer: 0,
            repulsion: false,
        };
        let step = attention_step(&c, &zs, &config, ctx).unwrap();
        for r in 0..3 {
            for col in 0..6 {
                let expected = if col / 2 == r { 0.5 } else { 0.0 };
                assert_eq!(step.attention[(r, col)], expected);
            }
        }
        let means = initial_prototypes(&zs, 3, 2).unwrap();
        assert_eq!(step.rectified, means);
    }

    #[test]
    fn attention_rows_are_stochastic_and_support_fixed() {
        let mut rng = Rng::new(5);
        for axis in [SoftmaxAxis::Column, SoftmaxAxis::Row] {
            let config = PropagationConfig {
                softmax_axis: axis,
                ..Default::default()
            };
            let z = random_matrix(3 * 2 + 3 * 4, 4, &mut rng);
            let c = random_matrix(3, 4, &mut rng);
            let step = attention_step(
                &c,
                &z,
                &config,
                StepContext {
                    n_way: 3,
                    k_shot: 2,
                    layers: 2,
                    layer: 1,
                    repulsion: true,
                },
            )
            .unwrap();
            let h = hardcode_support(3, 2);
            for r in 0..3 {
                let s: f64 = step.attention.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for col in 0..6 {
                    assert_eq!(step.attention[(r, col)], h[(r, col)] / step.row_sums[r]);
                }
            }
        }
    }

    #[test]
    fn literal_masking_example() {
        // single row [0.5, 0.3, 0.15, 0.05] with β = 0.1
        let attention = Matrix::from_rows(&[[0.5, 0.3, 0.15, 0.05]]);
        let config = PropagationConfig {
            repulsion_target: RepulsionTarget::Attention,
            ..Default::default()
        };
        let mask = build_mask(&attention, &Matrix::zeros(1, 0), 0, &config, 0.1).unwrap();
        assert_eq!(mask.masked, [false, false, false, true]);
        assert_eq!(mask.argmin, [Some((0, 3))]);
        // fill value is −min(A)
        let fill = -attention[mask.argmin[0].unwrap()];
        assert_eq!(fill, -0.05);
    }

    #[test]
    fn masking_only_touches_sub_threshold_entries() {
        let mut rng = Rng::new(6);
        let config = PropagationConfig::default();
        let z = random_matrix(5 + 5 * 3, 4, &mut rng);
        let c = random_matrix(5, 4, &mut rng);
        let step = attention_step(
            &c,
            &z,
            &config,
            StepContext {
                n_way: 5,
                k_shot: 1,
                layers: 2,
                layer: 1,
                repulsion: true,
            },
        )
        .unwrap();
        let mask = step.mask.as_ref().unwrap();
        assert!(mask.count() > 0);
        let (ar, ac) = mask.argmin[0].unwrap();
        let fill = -step.attention[(ar, ac)];
        let cols = step.attention.cols();
        for r in 0..5 {
            for col in 0..cols {
                let got = step.attention_masked[(r, col)];
                if mask.is_masked(cols, r, col) {
                    assert!(col >= 5);
                    assert!(step.query_attention[(r, col - 5)] < mask.threshold);
                    assert_eq!(got, fill);
                } else {
                    assert_eq!(got.to_bits(), step.attention[(r, col)].to_bits());
                }
            }
        }
    }

    #[test]
    fn identity_stack_without_queries() {
        let p = params(3, 1);
        let mut rng = Rng::new(2);
        let zs = random_matrix(4, 3, &mut rng);
        let zq = Matrix::zeros(0, 3);
        let config = PropagationConfig {
            repulsion_enabled: false,
            ..Default::default()
        };
        let c0 = initial_prototypes(&zs, 2, 2).unwrap();
        for layers in [1, 2, 10] {
            let trace = propagate_layers(&p, &zs, &zq, 2, 2, &config, layers, false).unwrap();
            assert_eq!(trace.final_prototypes(), &c0);
        }
    }

    #[test]
    fn single_layer_unrolls() {
        let mut p = params(3, 3);
        let mut rng = Rng::new(3);
        p.projections[0].weight = random_matrix(3, 3, &mut rng);
        p.projections[0].bias = vec![0.1, -0.2, 0.05];
        let zs = random_matrix(2, 3, &mut rng);
        let zq = random_matrix(4, 3, &mut rng);
        let config = PropagationConfig::default();
        let trace = propagate_layers(&p, &zs, &zq, 2, 1, &config, 1, true).unwrap();
        let c0 = initial_prototypes(&zs, 2, 1).unwrap();
        let z0 = zs.vstack(&zq).unwrap();
        let step = attention_step(
            &c0,
            &z0,
            &config,
            StepContext {
                n_way: 2,
                k_shot: 1,
                layers: 1,
                layer: 0,
                repulsion: true,
            },
        )
        .unwrap();
        let h = &p.projections[0];
        assert_eq!(trace.layers[0].step, step);
        assert_eq!(trace.final_prototypes(), &h.residual(&step.rectified, false).unwrap());
        assert_eq!(trace.embeddings(1), &h.residual(&z0, false).unwrap());
    }

    #[test]
    fn unshared_projection_needs_enough_layers() {
        let mut p = params(2, 0);
        p.projections.push(p.projections[0].clone());
        let zs = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let zq = Matrix::from_rows(&[[1.0, 1.0], [0.5, 0.0]]);
        let config = PropagationConfig::default();
        assert!(propagate_layers(&p, &zs, &zq, 2, 1, &config, 2, true).is_ok());
        assert!(matches!(
            propagate_layers(&p, &zs, &zq, 2, 1, &config, 3, true),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences_on_inputs() {
        let mut rng = Rng::new(21);
        let mut p = params(3, 21);
        p.projections[0].weight = random_matrix(3, 3, &mut rng);
        p.projections[0].weight.scale(0.2);
        p.projections[0].bias = vec![0.05, -0.1, 0.02];
        let zs = random_matrix(4, 3, &mut rng);
        let zq = random_matrix(6, 3, &mut rng);
        let up_c = random_matrix(2, 3, &mut rng);
        let up_z = random_matrix(10, 3, &mut rng);
        for metric in [Metric::NegSqEuclidean, Metric::Cosine] {
            for axis in [SoftmaxAxis::Column, SoftmaxAxis::Row] {
                let config = PropagationConfig {
                    metric,
                    softmax_axis: axis,
                    repulsion_enabled: false,
                    ..Default::default()
                };
                let objective = |zs: &Matrix, zq: &Matrix| {
                    let t = propagate_layers(&p, zs, zq, 2, 2, &config, 2, false).unwrap();
                    crate::numerics::dot(t.final_prototypes().data(), up_c.data())
                        + crate::numerics::dot(t.embeddings(2).data(), up_z.data())
                };
                let trace = propagate_layers(&p, &zs, &zq, 2, 2, &config, 2, false).unwrap();
                let mut grads = GradientBag::zeros_like(&p);
                let gz = propagate_backward(&p, &trace, &config, &up_c, &up_z, &mut grads).unwrap();
                let z0 = zs.vstack(&zq).unwrap();
                for idx in 0..z0.data().len() {
                    let mut zp = z0.clone();
                    let mut zm = z0.clone();
                    zp.data_mut()[idx] += 1e-6;
                    zm.data_mut()[idx] -= 1e-6;
                    let fd = (objective(&zp.slice_rows(0, 4), &zp.slice_rows(4, 10))
                        - objective(&zm.slice_rows(0, 4), &zm.slice_rows(4, 10)))
                        / 2e-6;
                    let an = gz.data()[idx];
                    assert!(
                        (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                        "{metric}/{axis} idx {idx}: fd {fd} analytic {an}"
                    );
                }
            }
        }
    }
}
