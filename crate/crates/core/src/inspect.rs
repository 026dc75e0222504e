//! Diagnostics: per-layer query/prototype similarity heatmaps and
//! embedding export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{sample_episode, Dataset, Episode, EpisodeShape, Rng, Split};
use crate::error::{Error, Result};
use crate::model::{embed_batch, ModelParams};
use crate::numerics::{pairwise_similarity, Matrix};
use crate::objective::propagate_episode;
use crate::propagation::{Mode, PropagationConfig, PropagationTrace};

/// Similarities `κ(z_q, c_n)` of every query to every prototype, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmaps {
    /// `layers + 1` matrices of shape `NM × N`, index 0 before propagation.
    pub layers: Vec<Matrix>,
    pub query_labels: Vec<usize>,
}

impl Heatmaps {
    /// Queries are `f(x̃)` at every layer unless `propagated_queries` is set.
    pub fn from_trace(
        trace: &PropagationTrace,
        query_labels: &[usize],
        config: &PropagationConfig,
        propagated_queries: bool,
    ) -> Result<Self> {
        let layers = (0..=trace.layers.len())
            .map(|l| {
                let q = trace.query_embeddings(if propagated_queries { l } else { 0 });
                pairwise_similarity(&q, trace.prototypes(l), config.metric)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            query_labels: query_labels.to_vec(),
        })
    }

    /// Fraction of query rows whose most similar prototype is their own class.
    pub fn diagonal_dominance(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|m| {
                let hits = (0..m.rows())
                    .filter(|&r| m.argmax_row(r) == self.query_labels[r])
                    .count();
                hits as f64 / m.rows().max(1) as f64
            })
            .collect()
    }

    /// Writes `heatmap_layer<l>.csv` for every layer and `summary.txt`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (l, m) in self.layers.iter().enumerate() {
            let path = dir.join(format!("heatmap_layer{l}.csv"));
            let mut out = String::from("query,label");
            for n in 0..m.cols() {
                out.push_str(&format!(",c{n}"));
            }
            out.push('\n');
            for r in 0..m.rows() {
                out.push_str(&format!("{r},{}", self.query_labels[r]));
                for v in m.row(r) {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        let path = dir.join("summary.txt");
        let dd = self.diagonal_dominance();
        let mut out = String::from("layer diagonal_dominance\n");
        for (l, v) in dd.iter().enumerate() {
            out.push_str(&format!("{l} {v:.6}\n"));
        }
        out.push_str(&format!("non_decreasing {}\n", is_non_decreasing(&dd)));
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}

pub fn is_non_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0])
}

/// Heatmaps of `episode` under evaluation-mode propagation with `layers` layers.
pub fn inspect_episode(
    params: &ModelParams,
    episode: &Episode,
    config: &PropagationConfig,
    propagated_queries: bool,
    layers: usize,
) -> Result<Heatmaps> {
    let trace = propagate_episode(params, episode, config, layers, config.repulsion_active(Mode::Eval))?;
    Heatmaps::from_trace(&trace, &episode.query_labels, config, propagated_queries)
}

/// Samples one episode from `split` with `rng` and inspects it.
#[allow(clippy::too_many_arguments)]
pub fn inspect(
    ds: &Dataset,
    params: &ModelParams,
    split: Split,
    shape: EpisodeShape,
    config: &PropagationConfig,
    propagated_queries: bool,
    layers: usize,
    rng: &mut Rng,
) -> Result<Heatmaps> {
    if params.input_dim() != ds.dim {
        return Err(Error::Dimension {
            op: "inspect (checkpoint input dim vs dataset dim)",
            expected: params.input_dim(),
            got: ds.dim,
        });
    }
    let episode = sample_episode(ds, split, shape, rng)?;
    inspect_episode(params, &episode, config, propagated_queries, layers)
}

/// Writes `class_id,split,z0..z{d-1}` for every sample of `split`.
pub fn export_embeddings(ds: &Dataset, params: &ModelParams, split: Split, path: &Path) -> Result<usize> {
    if params.input_dim() != ds.dim {
        return Err(Error::Dimension {
            op: "export_embeddings (checkpoint input dim vs dataset dim)",
            expected: params.input_dim(),
            got: ds.dim,
        });
    }
    let (x, ids) = ds.split_rows(split);
    let z = embed_batch(params, &x)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("class_id,split");
    for j in 0..z.cols() {
        header.push_str(&format!(",z{j}"));
    }
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for (r, id) in ids.iter().enumerate() {
        write!(w, "{id},{split}").map_err(io)?;
        for v in z.row(r) {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(ids.len())
}
