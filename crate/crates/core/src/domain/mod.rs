//! Core data types: action schemas, user graphs, temporal samples and the
//! engagement score.

mod io;
mod preprocess;

pub use io::{read_dataset, write_dataset, DatasetManifest, GraphRecord, SampleRecord};
pub use preprocess::{
    fit_and_apply_preprocessing, fit_preprocessing, percentile, winsorize, FeatureStat,
    FeatureStats, PreprocessConfig,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FateError, Result};

/// Feature names of the default 13-category schema.
pub const DEFAULT_ACTIONS: [&str; 13] = [
    "SnapSend",
    "SnapView",
    "SnapCreate",
    "SnapSave",
    "ChatSend",
    "ChatView",
    "StoryPost",
    "StoryView",
    "StoryViewTime",
    "FriendDiscoverView",
    "PublisherDiscoverView",
    "DiscoverViewTime",
    "SessionTime",
];

/// Edge interaction channels of the default schema.
pub const DEFAULT_EDGE_CHANNELS: [&str; 3] = ["chat", "snap", "story"];

/// Node features split into `K` action categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSchema {
    names: Vec<String>,
    dims: Vec<usize>,
    edge_dim: usize,
}

impl ActionSchema {
    pub fn new(names: Vec<String>, dims: Vec<usize>, edge_dim: usize) -> Result<Self> {
        let schema = Self {
            names,
            dims,
            edge_dim,
        };
        schema.check()?;
        Ok(schema)
    }

    /// Uniform schema with `k` single-scalar categories named `a0…`.
    pub fn uniform(k: usize, dim: usize, edge_dim: usize) -> Result<Self> {
        Self::new(
            (0..k).map(|i| format!("a{i}")).collect(),
            vec![dim; k],
            edge_dim,
        )
    }

    pub fn check(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(FateError::Validation("schema needs K ≥ 1".into()));
        }
        if self.names.len() != self.dims.len() {
            return Err(FateError::Validation(format!(
                "{} names for {} categories",
                self.names.len(),
                self.dims.len()
            )));
        }
        if let Some(k) = self.dims.iter().position(|&d| d == 0) {
            return Err(FateError::Validation(format!(
                "category {k} has zero width"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.names {
            if !seen.insert(n) {
                return Err(FateError::Validation(format!(
                    "duplicate category name {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.dims.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    /// Total node-feature width `D = Σ d_k`.
    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Column offset of each category plus the end offset.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dims.len() + 1);
        out.push(0);
        for d in &self.dims {
            out.push(out.last().unwrap() + d);
        }
        out
    }
}

impl Default for ActionSchema {
    fn default() -> Self {
        Self {
            names: DEFAULT_ACTIONS.iter().map(|s| s.to_string()).collect(),
            dims: vec![1; DEFAULT_ACTIONS.len()],
            edge_dim: DEFAULT_EDGE_CHANNELS.len(),
        }
    }
}

/// Ego network of one user during one time interval. Node 0 is the ego;
/// rows `1..` follow `friends`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserGraph {
    pub ego: usize,
    pub friends: Vec<u64>,
    /// Normalized adjacency over `1 + |friends|` nodes.
    pub adjacency: Array2<f64>,
    /// `(1 + |friends|) × D`, columns grouped by category.
    pub node_features: Array2<f64>,
    /// `|friends| × edge_dim`; row `i` belongs to edge ego–`friends[i]`.
    pub edge_features: Array2<f64>,
}

impl UserGraph {
    pub fn node_count(&self) -> usize {
        self.friends.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSample {
    pub user_id: u64,
    pub graphs: Vec<UserGraph>,
    pub label: f64,
}

impl TemporalSample {
    pub fn steps(&self) -> usize {
        self.graphs.len()
    }

    pub fn max_friends(&self) -> usize {
        self.graphs.iter().map(|g| g.friends.len()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementTask {
    pub metric_id: String,
    pub horizon: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl Default for EngagementTask {
    fn default() -> Self {
        Self {
            metric_id: "session_time".into(),
            horizon: 7,
            aggregation: Aggregation::Mean,
        }
    }
}

/// Official engagement score: the window mean of the metric over the
/// `horizon` intervals following the input window.
pub fn engagement_score(future: &[f64], task: &EngagementTask) -> Result<f64> {
    if future.is_empty() {
        return Err(FateError::Empty("engagement window"));
    }
    if task.horizon == 0 {
        return Err(FateError::Config("horizon must be ≥ 1".into()));
    }
    if future.len() != task.horizon {
        return Err(FateError::Validation(format!(
            "window has {} values, horizon is {}",
            future.len(),
            task.horizon
        )));
    }
    match task.aggregation {
        Aggregation::Mean => Ok(future.iter().sum::<f64>() / future.len() as f64),
    }
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` for a 0/1 symmetric adjacency without self loops.
pub fn normalize_adjacency(raw: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = raw.dim();
    if n != m {
        return Err(FateError::Validation(format!(
            "adjacency is {n}×{m}, expected square"
        )));
    }
    for i in 0..n {
        if raw[[i, i]] != 0.0 {
            return Err(FateError::Validation(format!(
                "adjacency diagonal entry {i} is nonzero"
            )));
        }
        for j in 0..i {
            if raw[[i, j]] != raw[[j, i]] {
                return Err(FateError::Validation(format!(
                    "adjacency asymmetric at ({i},{j})"
                )));
            }
            if raw[[i, j]] < 0.0 {
                return Err(FateError::Validation(format!(
                    "negative adjacency entry at ({i},{j})"
                )));
            }
        }
    }
    let mut with_loops = raw.clone();
    for i in 0..n {
        with_loops[[i, i]] = 1.0;
    }
    let inv_sqrt: Vec<f64> = with_loops
        .rows()
        .into_iter()
        .map(|r| 1.0 / r.sum().sqrt())
        .collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        with_loops[[i, j]] * inv_sqrt[i] * inv_sqrt[j]
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Length { expected: usize, found: usize },
    EgoIndex { step: usize, ego: usize },
    NonSquareAdjacency { step: usize },
    AdjacencySize { step: usize, nodes: usize, found: usize },
    Asymmetric { step: usize, row: usize, col: usize },
    AdjacencyRange { step: usize, row: usize, col: usize },
    NodeRows { step: usize, expected: usize, found: usize },
    NodeWidth { step: usize, expected: usize, found: usize },
    EdgeRows { step: usize, expected: usize, found: usize },
    EdgeWidth { step: usize, expected: usize, found: usize },
    NonFinite { step: usize, field: &'static str },
    NonFiniteLabel,
}

const SYMMETRY_TOL: f64 = 1e-6;

/// Every invariant violated by `sample` for a dataset of `steps`-long
/// histories; empty when the sample is well formed.
pub fn validate_sample(
    sample: &TemporalSample,
    schema: &ActionSchema,
    steps: usize,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if sample.graphs.len() != steps || steps == 0 {
        out.push(Violation::Length {
            expected: steps,
            found: sample.graphs.len(),
        });
    }
    if !sample.label.is_finite() {
        out.push(Violation::NonFiniteLabel);
    }
    let width = schema.total_dim();
    for (step, g) in sample.graphs.iter().enumerate() {
        let nodes = g.node_count();
        if g.ego != 0 {
            out.push(Violation::EgoIndex { step, ego: g.ego });
        }
        let (r, c) = g.adjacency.dim();
        if r != c {
            out.push(Violation::NonSquareAdjacency { step });
        } else if r != nodes {
            out.push(Violation::AdjacencySize {
                step,
                nodes,
                found: r,
            });
        } else {
            'outer: for i in 0..r {
                for j in 0..=i {
                    let a = g.adjacency[[i, j]];
                    if !(0.0..=1.0 + SYMMETRY_TOL).contains(&a) {
                        out.push(Violation::AdjacencyRange {
                            step,
                            row: i,
                            col: j,
                        });
                        break 'outer;
                    }
                    if (a - g.adjacency[[j, i]]).abs() > SYMMETRY_TOL {
                        out.push(Violation::Asymmetric {
                            step,
                            row: i,
                            col: j,
                        });
                        break 'outer;
                    }
                }
            }
        }
        if g.node_features.nrows() != nodes {
            out.push(Violation::NodeRows {
                step,
                expected: nodes,
                found: g.node_features.nrows(),
            });
        }
        if g.node_features.ncols() != width {
            out.push(Violation::NodeWidth {
                step,
                expected: width,
                found: g.node_features.ncols(),
            });
        }
        if g.edge_features.nrows() != g.friends.len() {
            out.push(Violation::EdgeRows {
                step,
                expected: g.friends.len(),
                found: g.edge_features.nrows(),
            });
        }
        if g.edge_features.ncols() != schema.edge_dim() {
            out.push(Violation::EdgeWidth {
                step,
                expected: schema.edge_dim(),
                found: g.edge_features.ncols(),
            });
        }
        if g.adjacency.iter().any(|x| !x.is_finite()) {
            out.push(Violation::NonFinite {
                step,
                field: "adjacency",
            });
        }
        if g.node_features.iter().any(|x| !x.is_finite()) {
            out.push(Violation::NonFinite {
                step,
                field: "node_features",
            });
        }
        if g.edge_features.iter().any(|x| !x.is_finite()) {
            out.push(Violation::NonFinite {
                step,
                field: "edge_features",
            });
        }
    }
    out
}

/// A split of temporal samples sharing one schema and history length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<TemporalSample>,
}

impl Dataset {
    pub fn schema(&self) -> &ActionSchema {
        &self.manifest.schema
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All violations, tagged with the offending sample's position.
    pub fn validate(&self) -> Vec<(usize, Violation)> {
        self.samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                validate_sample(s, &self.manifest.schema, self.manifest.steps)
                    .into_iter()
                    .map(move |v| (i, v))
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: self.manifest.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}
