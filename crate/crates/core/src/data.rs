//! Datasets with disjoint-label splits, the synthetic Gaussian-cluster
//! generator and the N-way K-shot episode sampler.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Named sub-streams derived from the run seed. Each component draws from
/// its own stream so that, e.g., changing the evaluation episode count never
/// shifts the training episodes.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const VAL: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const INSPECT: u64 = 6;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent seed for sub-stream `stream` of `seed`
/// (two rounds of SplitMix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(stream.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

/// Deterministic generator: ChaCha8 keyed by `seed_from_u64(seed)`.
///
/// ChaCha output is specified bit-for-bit, so the same seed gives the same
/// stream on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for sub-stream `stream` of `seed`.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// All samples of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassData {
    pub id: u32,
    pub split: Split,
    pub rows: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    /// Sorted by class id.
    pub classes: Vec<ClassData>,
}

impl Dataset {
    /// Builds a dataset, sorting classes by id and checking the invariants.
    pub fn new(name: impl Into<String>, dim: usize, mut classes: Vec<ClassData>) -> Result<Self> {
        classes.sort_by_key(|c| c.id);
        let ds = Self {
            name: name.into(),
            dim,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Dataset("feature dimension must be at least 1".into()));
        }
        for pair in self.classes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::SplitViolation {
                    class_id: pair[0].id,
                    first: pair[0].split.to_string(),
                    second: pair[1].split.to_string(),
                });
            }
        }
        for c in &self.classes {
            if c.rows.cols() != self.dim {
                return Err(Error::Dataset(format!(
                    "class {} has {} features, expected {}",
                    c.id,
                    c.rows.cols(),
                    self.dim
                )));
            }
            if !c.rows.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("features of class {}", c.id),
                });
            }
        }
        Ok(())
    }

    pub fn n_train_classes(&self) -> usize {
        self.classes_in(Split::Train).count()
    }

    pub fn classes_in(&self, split: Split) -> impl Iterator<Item = &ClassData> {
        self.classes.iter().filter(move |c| c.split == split)
    }

    pub fn class(&self, id: u32) -> Option<&ClassData> {
        self.classes
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.classes[i])
    }

    /// Global label of a training class: its rank among training class ids.
    pub fn train_index(&self, class_id: u32) -> Option<usize> {
        self.classes_in(Split::Train).position(|c| c.id == class_id)
    }

    /// All rows of `split` stacked, with their class ids.
    pub fn split_rows(&self, split: Split) -> (Matrix, Vec<u32>) {
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for c in self.classes_in(split) {
            data.extend_from_slice(c.rows.data());
            ids.extend(std::iter::repeat_n(c.id, c.rows.rows()));
        }
        let n = ids.len();
        (Matrix::from_vec(n, self.dim, data).expect("consistent widths"), ids)
    }
}

/// Path of the `.meta` sidecar belonging to a dataset CSV.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta")
}

/// Writes the CSV and its `.meta` sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        write!(w, "class_id,split")?;
        for j in 0..ds.dim {
            write!(w, ",f{j}")?;
        }
        writeln!(w)?;
        for c in &ds.classes {
            for row in c.rows.row_iter() {
                write!(w, "{},{}", c.id, c.split)?;
                for v in row {
                    // Display is the shortest representation that round-trips.
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))?;

    let meta = format!(
        "name={}\ndim={}\nn_train_classes={}\n",
        ds.name,
        ds.dim,
        ds.n_train_classes()
    );
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))
}

fn parse_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Reads a dataset CSV, cross-checking it against the `.meta` sidecar.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mp = meta_path(path);
    let meta = parse_meta(&mp)?;
    let meta_field = |key: &str| {
        meta.get(key).ok_or_else(|| Error::Parse {
            path: mp.clone(),
            line: 0,
            msg: format!("missing key `{key}`"),
        })
    };
    let name = meta_field("name")?.clone();
    let meta_dim: usize = meta_field("dim")?.parse().map_err(|_| Error::Parse {
        path: mp.clone(),
        line: 0,
        msg: "`dim` is not an integer".into(),
    })?;
    let meta_train: usize = meta_field("n_train_classes")?
        .parse()
        .map_err(|_| Error::Parse {
            path: mp.clone(),
            line: 0,
            msg: "`n_train_classes` is not an integer".into(),
        })?;

    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "class_id" || cols[1] != "split" {
        return Err(perr(1, "header must start with `class_id,split,f0`".into()));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(perr(1, format!("expected column `f{j}`, found `{c}`")));
        }
    }
    let dim = cols.len() - 2;
    if dim != meta_dim {
        return Err(Error::Dataset(format!(
            "{} declares dim={meta_dim} but the CSV has {dim} feature columns",
            mp.display()
        )));
    }

    let mut by_class: BTreeMap<u32, (Split, Vec<f64>, usize)> = BTreeMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(perr(
                lineno,
                format!("row has {} features, expected {dim}", fields.len().saturating_sub(2)),
            ));
        }
        let id: u32 = fields[0]
            .parse()
            .map_err(|_| perr(lineno, format!("bad class_id `{}`", fields[0])))?;
        let split: Split = fields[1]
            .parse()
            .map_err(|_| perr(lineno, format!("bad split `{}`", fields[1])))?;
        let entry = by_class.entry(id).or_insert((split, Vec::new(), 0));
        if entry.0 != split {
            let (a, b) = if entry.0 < split {
                (entry.0, split)
            } else {
                (split, entry.0)
            };
            return Err(Error::SplitViolation {
                class_id: id,
                first: a.to_string(),
                second: b.to_string(),
            });
        }
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|_| perr(lineno, format!("bad feature value `{f}`")))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("non-finite feature value `{f}`")));
            }
            entry.1.push(v);
        }
        entry.2 += 1;
    }

    let classes = by_class
        .into_iter()
        .map(|(id, (split, data, n))| ClassData {
            id,
            split,
            rows: Matrix::from_vec(n, dim, data).expect("row widths checked"),
        })
        .collect();
    let ds = Dataset::new(name, dim, classes)?;
    if ds.n_train_classes() != meta_train {
        return Err(Error::Dataset(format!(
            "{} declares n_train_classes={meta_train} but the CSV has {}",
            mp.display(),
            ds.n_train_classes()
        )));
    }
    Ok(ds)
}

/// Parameters of the synthetic Gaussian-cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub separation: f64,
    pub split_fractions: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            n_classes: 10,
            per_class: 50,
            dim: 16,
            spread: 1.5,
            separation: 3.0,
            split_fractions: [0.6, 0.2, 0.2],
        }
    }
}

impl SynthConfig {
    /// Number of classes assigned to train, val and test.
    pub fn split_counts(&self) -> Result<[usize; 3]> {
        let [ft, fv, fs] = self.split_fractions;
        if self.n_classes < 3 {
            return Err(Error::Config(format!(
                "need at least 3 classes for three splits, got {}",
                self.n_classes
            )));
        }
        if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1] and sum to 1, got ({ft}, {fv}, {fs})"
            )));
        }
        let n = self.n_classes as f64;
        let train = (n * ft).round() as usize;
        let val = (n * fv).round() as usize;
        let test = self.n_classes.saturating_sub(train + val);
        if train == 0 || val == 0 || test == 0 || train + val + test != self.n_classes {
            return Err(Error::Config(format!(
                "split fractions ({ft}, {fv}, {fs}) of {} classes leave a split empty",
                self.n_classes
            )));
        }
        Ok([train, val, test])
    }
}

/// Generates isotropic Gaussian classes.
///
/// Draw order from `rng`: all class means (uniform in
/// `[−separation, separation]^dim`), then all samples class by class, then a
/// shuffle of class ids that assigns the first block to train, the next to val
/// and the rest to test.
pub fn gen_synthetic(cfg: &SynthConfig, rng: &mut Rng) -> Result<Dataset> {
    let [n_train, n_val, _] = cfg.split_counts()?;
    if cfg.dim == 0 || cfg.per_class == 0 {
        return Err(Error::Config("dim and per_class must be at least 1".into()));
    }
    if !(cfg.spread >= 0.0 && cfg.separation >= 0.0) {
        return Err(Error::Config("spread and separation must be non-negative".into()));
    }
    let means: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| {
                    if cfg.separation > 0.0 {
                        rng.random_range(-cfg.separation..=cfg.separation)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut rows: Vec<Matrix> = Vec::with_capacity(cfg.n_classes);
    for mean in &means {
        let mut data = Vec::with_capacity(cfg.per_class * cfg.dim);
        for _ in 0..cfg.per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + cfg.spread * z);
            }
        }
        rows.push(Matrix::from_vec(cfg.per_class, cfg.dim, data)?);
    }
    let order = index::sample(rng, cfg.n_classes, cfg.n_classes).into_vec();
    let mut split_of = vec![Split::Test; cfg.n_classes];
    for (rank, &class) in order.iter().enumerate() {
        split_of[class] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let classes = rows
        .into_iter()
        .enumerate()
        .map(|(i, rows)| ClassData {
            id: i as u32,
            split: split_of[i],
            rows,
        })
        .collect();
    Dataset::new(cfg.name.clone(), cfg.dim, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
}

impl EpisodeShape {
    pub fn new(n_way: usize, k_shot: usize, m_query: usize) -> Self {
        Self {
            n_way,
            k_shot,
            m_query,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::Config(format!(
                "episodes need n_way >= 1 and k_shot >= 1, got {}-way {}-shot",
                self.n_way, self.k_shot
            )));
        }
        Ok(())
    }

    pub fn n_support(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn n_query(&self) -> usize {
        self.n_way * self.m_query
    }
}

/// One N-way K-shot task.
///
/// Support rows are grouped by local class: local class `n` occupies rows
/// `[K·n, K·(n+1))`. Queries are grouped the same way with `M` per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub shape: EpisodeShape,
    pub support: Matrix,
    pub query: Matrix,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// Local label → dataset class id.
    pub class_map: Vec<u32>,
    /// Local label → global (training-class) label; only for train-split episodes.
    pub global_map: Option<Vec<usize>>,
    /// `(class_id, row index within the class)` of every support sample.
    pub support_ids: Vec<(u32, usize)>,
    pub query_ids: Vec<(u32, usize)>,
}

impl Episode {
    /// Global labels of the queries, when the episode comes from the train split.
    pub fn query_global_labels(&self) -> Option<Vec<usize>> {
        let map = self.global_map.as_ref()?;
        Some(self.query_labels.iter().map(|&l| map[l]).collect())
    }

    /// Builds an episode from explicit blocks. Support and query rows must
    /// already be grouped by local class.
    pub fn from_blocks(shape: EpisodeShape, support: Matrix, query: Matrix) -> Result<Self> {
        if support.rows() != shape.n_support() {
            return Err(Error::dim("Episode::from_blocks", shape.n_support(), support.rows()));
        }
        if query.rows() != shape.n_query() {
            return Err(Error::dim("Episode::from_blocks", shape.n_query(), query.rows()));
        }
        if support.cols() != query.cols() {
            return Err(Error::dim("Episode::from_blocks", support.cols(), query.cols()));
        }
        let n = shape.n_way;
        Ok(Self {
            shape,
            support_labels: (0..shape.n_support()).map(|i| i / shape.k_shot.max(1)).collect(),
            query_labels: (0..shape.n_query())
                .map(|i| i / shape.m_query.max(1))
                .collect(),
            class_map: (0..n as u32).collect(),
            global_map: None,
            support_ids: (0..shape.n_support()).map(|i| (0, i)).collect(),
            query_ids: (0..shape.n_query()).map(|i| (0, shape.n_support() + i)).collect(),
            support,
            query,
        })
    }
}

/// Samples one episode from `split`.
///
/// Draw order: the `n_way` classes (without replacement, in draw order they
/// become local labels 0..N), then for each class `K+M` distinct rows, the
/// first `K` going to the support set.
pub fn sample_episode(ds: &Dataset, split: Split, shape: EpisodeShape, rng: &mut Rng) -> Result<Episode> {
    let EpisodeShape {
        n_way,
        k_shot,
        m_query,
    } = shape;
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Sampling("n_way and k_shot must be at least 1".into()));
    }
    let pool: Vec<&ClassData> = ds.classes_in(split).collect();
    if pool.len() < n_way {
        return Err(Error::Sampling(format!(
            "{split} split has {} classes, a {n_way}-way episode needs {n_way}",
            pool.len()
        )));
    }
    let need = k_shot + m_query;
    let chosen = index::sample(rng, pool.len(), n_way).into_vec();
    let dim = ds.dim;
    let mut support = Vec::with_capacity(n_way * k_shot * dim);
    let mut query = Vec::with_capacity(n_way * m_query * dim);
    let mut support_ids = Vec::with_capacity(n_way * k_shot);
    let mut query_ids = Vec::with_capacity(n_way * m_query);
    let mut class_map = Vec::with_capacity(n_way);
    for &ci in &chosen {
        let class = pool[ci];
        let available = class.rows.rows();
        if available < need {
            return Err(Error::Sampling(format!(
                "class {} has {available} samples, {k_shot}-shot {m_query}-query needs {need}",
                class.id
            )));
        }
        class_map.push(class.id);
        let rows = index::sample(rng, available, need).into_vec();
        for (j, &r) in rows.iter().enumerate() {
            if j < k_shot {
                support.extend_from_slice(class.rows.row(r));
                support_ids.push((class.id, r));
            } else {
                query.extend_from_slice(class.rows.row(r));
                query_ids.push((class.id, r));
            }
        }
    }
    // Supports were pushed class-major, queries likewise.
    let global_map = if split == Split::Train {
        Some(
            class_map
                .iter()
                .map(|&id| ds.train_index(id).expect("train class"))
                .collect(),
        )
    } else {
        None
    };
    Ok(Episode {
        shape,
        support: Matrix::from_vec(n_way * k_shot, dim, support)?,
        query: Matrix::from_vec(n_way * m_query, dim, query)?,
        support_labels: (0..n_way * k_shot).map(|i| i / k_shot).collect(),
        query_labels: (0..n_way * m_query).map(|i| i / m_query.max(1)).collect(),
        class_map,
        global_map,
        support_ids,
        query_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_dataset() -> Dataset {
        let cfg = SynthConfig {
            n_classes: 10,
            per_class: 20,
            dim: 4,
            ..SynthConfig::default()
        };
        gen_synthetic(&cfg, &mut Rng::new(7)).unwrap()
    }

    #[test]
    fn synthetic_split_counts() {
        let cfg = SynthConfig {
            n_classes: 10,
            per_class: 50,
            dim: 16,
            spread: 0.5,
            separation: 5.0,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic(&cfg, &mut Rng::new(7)).unwrap();
        assert_eq!(ds.classes_in(Split::Train).count(), 6);
        assert_eq!(ds.classes_in(Split::Val).count(), 2);
        assert_eq!(ds.classes_in(Split::Test).count(), 2);
        assert!(ds.classes.iter().all(|c| c.rows.shape() == (50, 16)));
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let cfg = SynthConfig {
            spread: 0.0,
            per_class: 5,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic(&cfg, &mut Rng::new(3)).unwrap();
        for c in &ds.classes {
            let first = c.rows.row(0).to_vec();
            assert!(c.rows.row_iter().all(|r| r == first.as_slice()));
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = small_dataset();
        let b = small_dataset();
        assert_eq!(a, b);
        let c = gen_synthetic(
            &SynthConfig {
                n_classes: 10,
                per_class: 20,
                dim: 4,
                ..SynthConfig::default()
            },
            &mut Rng::new(8),
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn infeasible_splits_rejected() {
        let cfg = SynthConfig {
            n_classes: 2,
            ..SynthConfig::default()
        };
        assert!(matches!(gen_synthetic(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
        let cfg = SynthConfig {
            n_classes: 4,
            split_fractions: [0.9, 0.05, 0.05],
            ..SynthConfig::default()
        };
        assert!(cfg.split_counts().is_err());
        let cfg = SynthConfig {
            split_fractions: [0.5, 0.2, 0.2],
            ..SynthConfig::default()
        };
        assert!(cfg.split_counts().is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    fn write_files(dir: &Path, csv: &str, meta: &str) -> PathBuf {
        let path = dir.join("d.csv");
        fs::write(&path, csv).unwrap();
        fs::write(meta_path(&path), meta).unwrap();
        path
    }

    #[test]
    fn load_three_class_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "class_id,split,f0,f1,f2,f3\n\
                   0,train,1,2,3,4\n1,val,0.5,0.5,0.5,0.5\n2,test,-1,0,1e-3,2\n";
        let path = write_files(dir.path(), csv, "name=d\ndim=4\nn_train_classes=1\n");
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.dim, 4);
        assert_eq!(ds.classes.len(), 3);
        assert_eq!(ds.name, "d");
    }

    #[test]
    fn load_rejects_class_in_two_splits() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "class_id,split,f0\n0,train,1\n0,test,2\n1,val,3\n";
        let path = write_files(dir.path(), csv, "name=d\ndim=1\nn_train_classes=1\n");
        match load_dataset(&path) {
            Err(Error::SplitViolation { class_id: 0, first, second }) => {
                assert_eq!((first.as_str(), second.as_str()), ("train", "test"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_short_row_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "class_id,split,f0,f1,f2,f3\n0,train,1,2,3,4\n1,test,1,2,3\n";
        let path = write_files(dir.path(), csv, "name=d\ndim=4\nn_train_classes=1\n");
        match load_dataset(&path) {
            Err(Error::Parse { line: 3, msg, .. }) => assert!(msg.contains("3 features")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_cross_checks_meta() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "class_id,split,f0\n0,train,1\n";
        let path = write_files(dir.path(), csv, "name=d\ndim=2\nn_train_classes=1\n");
        assert!(matches!(load_dataset(&path), Err(Error::Dataset(_))));
        let path = write_files(dir.path(), csv, "name=d\ndim=1\nn_train_classes=3\n");
        assert!(matches!(load_dataset(&path), Err(Error::Dataset(_))));
    }

    #[test]
    fn five_way_one_shot_fifteen_query() {
        let cfg = SynthConfig {
            n_classes: 10,
            per_class: 20,
            dim: 4,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic(&cfg, &mut Rng::new(1)).unwrap();
        let ep = sample_episode(&ds, Split::Train, EpisodeShape::new(5, 1, 15), &mut Rng::new(2)).unwrap();
        assert_eq!(ep.support.rows(), 5);
        assert_eq!(ep.query.rows(), 75);
        let globals = ep.query_global_labels().unwrap();
        for (q, g) in ep.query_labels.iter().zip(globals) {
            assert_eq!(g, ds.train_index(ep.class_map[*q]).unwrap());
        }
    }

    #[test]
    fn all_classes_when_n_way_equals_split_size() {
        let ds = small_dataset();
        let ep = sample_episode(&ds, Split::Test, EpisodeShape::new(2, 2, 3), &mut Rng::new(4)).unwrap();
        let ids: HashSet<u32> = ep.class_map.iter().copied().collect();
        let expected: HashSet<u32> = ds.classes_in(Split::Test).map(|c| c.id).collect();
        assert_eq!(ids, expected);
        assert!(ep.global_map.is_none());
    }

    #[test]
    fn sampling_errors() {
        let ds = small_dataset();
        assert!(matches!(
            sample_episode(&ds, Split::Test, EpisodeShape::new(3, 1, 1), &mut Rng::new(0)),
            Err(Error::Sampling(_))
        ));
        assert!(matches!(
            sample_episode(&ds, Split::Train, EpisodeShape::new(2, 10, 11), &mut Rng::new(0)),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn derived_seeds_differ() {
        let s: HashSet<u64> = (0..6).map(|k| derive_seed(42, k)).collect();
        assert_eq!(s.len(), 6);
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::data::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn episode_invariants(seed in any::<u64>(), n in 1usize..=6, k in 1usize..4, m in 0usize..6) {
                let ds = small_dataset();
                let shape = EpisodeShape::new(n, k, m);
                let ep = sample_episode(&ds, Split::Train, shape, &mut Rng::new(seed)).unwrap();
                prop_assert_eq!(ep.support.rows(), n * k);
                prop_assert_eq!(ep.query.rows(), n * m);
                for (i, &l) in ep.support_labels.iter().enumerate() {
                    prop_assert_eq!(l, i / k);
                    prop_assert_eq!(ep.support_ids[i].0, ep.class_map[l]);
                }
                for (i, &l) in ep.query_labels.iter().enumerate() {
                    prop_assert_eq!(ep.query_ids[i].0, ep.class_map[l]);
                }
                let s: HashSet<_> = ep.support_ids.iter().collect();
                let q: HashSet<_> = ep.query_ids.iter().collect();
                prop_assert!(s.is_disjoint(&q));
                prop_assert_eq!(s.len() + q.len(), n * (k + m));
                let classes: HashSet<_> = ep.class_map.iter().collect();
                prop_assert_eq!(classes.len(), n);
                let again = sample_episode(&ds, Split::Train, shape, &mut Rng::new(seed)).unwrap();
                prop_assert_eq!(ep, again);
            }
        }
    }
}
