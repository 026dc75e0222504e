//! Trainable parameters: the MLP feature extractor, the global class
//! weights and the residual projection layer used by propagation.

use std::ops::{Deref, DerefMut};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Fully connected layer computing `x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_t(&self.weight)?;
        out.add_row_vector(&self.bias)?;
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    fn backward(&self, x: &Matrix, grad_out: &Matrix, grad: &mut Dense) -> Result<Matrix> {
        grad.weight.add_assign(&grad_out.t_matmul(x)?)?;
        for (g, s) in grad.bias.iter_mut().zip(grad_out.col_sums()) {
            *g += s;
        }
        grad_out.matmul(&self.weight)
    }
}

/// MLP `f: R^D → R^d`: ReLU on hidden layers, identity on the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    pub layers: Vec<Dense>,
}

/// Activations kept for the backward pass of [`Embedder`].
#[derive(Clone, Debug)]
pub struct EmbedCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Matrix>,
}

impl Embedder {
    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Dense::output_dim));
        s
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, EmbedCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("embed_batch", self.input_dim(), x.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(h);
            if i == last {
                h = z;
            } else {
                let mut a = z.clone();
                for v in a.data_mut() {
                    *v = v.max(0.0);
                }
                pre_activations.push(z);
                h = a;
            }
        }
        Ok((
            h,
            EmbedCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Backpropagates `∂L/∂output` and accumulates into `grad`.
    pub fn backward(&self, cache: &EmbedCache, grad_out: &Matrix, grad: &mut Embedder) -> Result<()> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                let pre = &cache.pre_activations[i];
                for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, &mut grad.layers[i])?;
        }
        Ok(())
    }
}

/// One learnable weight vector per training class, stored as rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalHead {
    pub weights: Matrix,
}

/// Affine map `h(M) = M·Wᵀ + b` on `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ProjectionLayer {
    pub fn zeros(d: usize) -> Self {
        Self {
            weight: Matrix::zeros(d, d),
            bias: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// `h(M)`, before the residual is added. With `relu` the map becomes
    /// `max(0, M·Wᵀ + b)`.
    pub fn apply(&self, m: &Matrix, relu: bool) -> Result<Matrix> {
        if m.cols() != self.dim() {
            return Err(Error::dim("project_residual", self.dim(), m.cols()));
        }
        let mut out = m.matmul_t(&self.weight)?;
        out.add_row_vector(&self.bias)?;
        if relu {
            for v in out.data_mut() {
                *v = v.max(0.0);
            }
        }
        Ok(out)
    }

    /// `h(M) + M`.
    pub fn residual(&self, m: &Matrix, relu: bool) -> Result<Matrix> {
        let mut out = self.apply(m, relu)?;
        out.add_assign(m)?;
        Ok(out)
    }

    /// Backward of [`ProjectionLayer::residual`]; returns `∂L/∂M`.
    pub fn residual_backward(
        &self,
        m: &Matrix,
        grad_out: &Matrix,
        relu: bool,
        grad: &mut ProjectionLayer,
    ) -> Result<Matrix> {
        let mut g_inner = grad_out.clone();
        if relu {
            let pre = self.apply(m, false)?;
            for (g, &p) in g_inner.data_mut().iter_mut().zip(pre.data()) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        grad.weight.add_assign(&g_inner.t_matmul(m)?)?;
        for (b, s) in grad.bias.iter_mut().zip(g_inner.col_sums()) {
            *b += s;
        }
        let mut g_in = g_inner.matmul(&self.weight)?;
        g_in.add_assign(grad_out)?;
        Ok(g_in)
    }
}

/// Which part of the model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedder,
    GlobalHead,
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embedder: Embedder,
    pub global_head: GlobalHead,
    /// A single entry when the projection is shared by every propagation
    /// layer, otherwise one entry per layer.
    pub projections: Vec<ProjectionLayer>,
}

/// Read-only view of one parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Mutable view of one parameter tensor.
#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.embedder.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedder.output_dim()
    }

    pub fn n_train_classes(&self) -> usize {
        self.global_head.weights.rows()
    }

    pub fn shares_projection(&self) -> bool {
        self.projections.len() == 1
    }

    /// Projection used by propagation layer `layer`.
    pub fn projection(&self, layer: usize) -> Result<&ProjectionLayer> {
        if self.shares_projection() {
            return Ok(&self.projections[0]);
        }
        self.projections.get(layer).ok_or_else(|| Error::Contract {
            op: "propagate",
            msg: format!(
                "layer {layer} requested but only {} per-layer projections exist",
                self.projections.len()
            ),
        })
    }

    pub fn projection_mut(&mut self, layer: usize) -> &mut ProjectionLayer {
        if self.shares_projection() {
            &mut self.projections[0]
        } else {
            &mut self.projections[layer]
        }
    }

    /// Every tensor in a fixed order, with stable names.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.embedder.layers.iter().enumerate() {
            out.push(TensorRef {
                name: format!("embedder.{i}.weight"),
                group: ParamGroup::Embedder,
                shape: vec![l.weight.rows(), l.weight.cols()],
                data: l.weight.data(),
            });
            out.push(TensorRef {
                name: format!("embedder.{i}.bias"),
                group: ParamGroup::Embedder,
                shape: vec![l.bias.len()],
                data: &l.bias,
            });
        }
        let w = &self.global_head.weights;
        out.push(TensorRef {
            name: "global_head.weight".into(),
            group: ParamGroup::GlobalHead,
            shape: vec![w.rows(), w.cols()],
            data: w.data(),
        });
        for (i, p) in self.projections.iter().enumerate() {
            out.push(TensorRef {
                name: format!("projection.{i}.weight"),
                group: ParamGroup::Projection,
                shape: vec![p.weight.rows(), p.weight.cols()],
                data: p.weight.data(),
            });
            out.push(TensorRef {
                name: format!("projection.{i}.bias"),
                group: ParamGroup::Projection,
                shape: vec![p.bias.len()],
                data: &p.bias,
            });
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.embedder.layers.iter_mut().enumerate() {
            let shape = vec![l.weight.rows(), l.weight.cols()];
            out.push(TensorMut {
                name: format!("embedder.{i}.weight"),
                group: ParamGroup::Embedder,
                shape,
                data: l.weight.data_mut(),
            });
            let shape = vec![l.bias.len()];
            out.push(TensorMut {
                name: format!("embedder.{i}.bias"),
                group: ParamGroup::Embedder,
                shape,
                data: &mut l.bias,
            });
        }
        let w = &mut self.global_head.weights;
        let shape = vec![w.rows(), w.cols()];
        out.push(TensorMut {
            name: "global_head.weight".into(),
            group: ParamGroup::GlobalHead,
            shape,
            data: w.data_mut(),
        });
        for (i, p) in self.projections.iter_mut().enumerate() {
            let shape = vec![p.weight.rows(), p.weight.cols()];
            out.push(TensorMut {
                name: format!("projection.{i}.weight"),
                group: ParamGroup::Projection,
                shape,
                data: p.weight.data_mut(),
            });
            let shape = vec![p.bias.len()];
            out.push(TensorMut {
                name: format!("projection.{i}.bias"),
                group: ParamGroup::Projection,
                shape,
                data: &mut p.bias,
            });
        }
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Checks the `D → d → d` chain across the members.
    pub fn validate(&self) -> Result<()> {
        if self.embedder.layers.is_empty() {
            return Err(Error::Config("embedder needs at least one layer".into()));
        }
        for pair in self.embedder.layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dim("ModelParams", pair[0].output_dim(), pair[1].input_dim()));
            }
        }
        let d = self.embed_dim();
        if self.global_head.weights.cols() != d {
            return Err(Error::dim("ModelParams", d, self.global_head.weights.cols()));
        }
        if self.projections.is_empty() {
            return Err(Error::Config("at least one projection layer is required".into()));
        }
        for p in &self.projections {
            if p.weight.shape() != (d, d) || p.bias.len() != d {
                return Err(Error::dim("ModelParams", d, p.bias.len()));
            }
        }
        Ok(())
    }
}

/// Gradient buffers mirroring a [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBag(ModelParams);

impl GradientBag {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self(params.zeros_like())
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &GradientBag) {
        for (a, b) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.tensors_mut() {
            for v in t.data.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn as_params(&self) -> &ModelParams {
        &self.0
    }
}

impl Deref for GradientBag {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for GradientBag {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

/// `f` applied to every row of `inputs`.
pub fn embed_batch(params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    params.embedder.forward(inputs)
}

/// `h(M) + M` using the projection of propagation layer `layer`.
pub fn project_residual(params: &ModelParams, m: &Matrix, layer: usize, relu: bool) -> Result<Matrix> {
    params.projection(layer)?.residual(m, relu)
}

/// Half-width of the He-uniform initialiser for a given fan-in.
pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Shapes needed to build a [`ModelParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub n_train_classes: usize,
    /// 1 for a shared projection, otherwise the number of per-layer ones.
    pub n_projections: usize,
}

/// Dataset-independent architecture settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub share_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            embed_dim: 16,
            share_projection: true,
        }
    }
}

impl ModelConfig {
    /// `max_layers` sizes the unshared projection stack.
    pub fn shape(&self, input_dim: usize, n_train_classes: usize, max_layers: usize) -> ModelShape {
        ModelShape {
            input_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            n_train_classes,
            n_projections: if self.share_projection { 1 } else { max_layers.max(1) },
        }
    }
}

/// He-uniform embedder and global head, zero biases, zero projection.
///
/// Draw order: embedder weights layer by layer, then the global head.
pub fn init_params(shape: &ModelShape, rng: &mut Rng) -> Result<ModelParams> {
    let ModelShape {
        input_dim,
        ref hidden,
        embed_dim,
        n_train_classes,
        n_projections,
    } = *shape;
    if input_dim == 0 || embed_dim == 0 || n_train_classes == 0 || n_projections == 0 || hidden.contains(&0) {
        return Err(Error::Config("all model sizes must be at least 1".into()));
    }
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(embed_dim);
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = he_uniform_bound(fan_in);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        layers.push(Dense {
            weight: Matrix::from_vec(fan_out, fan_in, data)?,
            bias: vec![0.0; fan_out],
        });
    }
    let bound = he_uniform_bound(embed_dim);
    let data = (0..n_train_classes * embed_dim)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let params = ModelParams {
        embedder: Embedder { layers },
        global_head: GlobalHead {
            weights: Matrix::from_vec(n_train_classes, embed_dim, data)?,
        },
        projections: (0..n_projections).map(|_| ProjectionLayer::zeros(embed_dim)).collect(),
    };
    params.validate()?;
    Ok(params)
}
