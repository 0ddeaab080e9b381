//! Winsorization and standardization fitted on the training split.

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{FateError, Result};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Upper winsorization percentile; the lower cap uses `100 − p`.
    /// `None` disables clipping.
    pub winsor_percentile: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            winsor_percentile: Some(99.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub cap_low: f64,
    pub cap_high: f64,
    /// Set when the training column was constant and `std` was floored.
    #[serde(default)]
    pub degenerate: bool,
}

impl FeatureStat {
    pub fn apply(&self, x: f64) -> f64 {
        (x.clamp(self.cap_low, self.cap_high) - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Per-feature statistics: node features first, then edge features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub node: Vec<FeatureStat>,
    pub edge: Vec<FeatureStat>,
}

impl FeatureStats {
    /// Transforms every node and edge feature of `dataset` in place.
    pub fn apply(&self, dataset: &mut Dataset) -> Result<()> {
        let schema = dataset.schema();
        if schema.total_dim() != self.node.len() || schema.edge_dim() != self.edge.len() {
            return Err(FateError::Shape(format!(
                "stats cover {} node / {} edge features, dataset has {} / {}",
                self.node.len(),
                self.edge.len(),
                schema.total_dim(),
                schema.edge_dim()
            )));
        }
        for s in &mut dataset.samples {
            for g in &mut s.graphs {
                for mut row in g.node_features.rows_mut() {
                    for (x, st) in row.iter_mut().zip(&self.node) {
                        *x = st.apply(*x);
                    }
                }
                for mut row in g.edge_features.rows_mut() {
                    for (x, st) in row.iter_mut().zip(&self.edge) {
                        *x = st.apply(*x);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn degenerate_features(&self) -> Vec<&str> {
        self.node
            .iter()
            .chain(&self.edge)
            .filter(|s| s.degenerate)
            .map(|s| s.name.as_str())
            .collect()
    }
}

/// Linear-interpolation percentile of `values` (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn winsorize(values: &mut [f64], low: f64, high: f64) {
    for v in values {
        *v = v.clamp(low, high);
    }
}

fn fit_column(name: String, mut values: Vec<f64>, cfg: &PreprocessConfig) -> FeatureStat {
    let (cap_low, cap_high) = match cfg.winsor_percentile {
        Some(p) if !values.is_empty() => (percentile(&values, 100.0 - p), percentile(&values, p)),
        _ => (f64::NEG_INFINITY, f64::INFINITY),
    };
    winsorize(&mut values, cap_low, cap_high);
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let raw_std = var.sqrt();
    let degenerate = raw_std < STD_FLOOR;
    FeatureStat {
        name,
        mean,
        std: if degenerate { STD_FLOOR } else { raw_std },
        cap_low,
        cap_high,
        degenerate,
    }
}

/// Fits caps and moments over every node row and edge row of `train`.
pub fn fit_preprocessing(train: &Dataset, cfg: &PreprocessConfig) -> Result<FeatureStats> {
    if train.is_empty() {
        return Err(FateError::Empty("training split"));
    }
    let schema = train.schema();
    let d = schema.total_dim();
    let e = schema.edge_dim();
    let mut node_cols = vec![Vec::new(); d];
    let mut edge_cols = vec![Vec::new(); e];
    for s in &train.samples {
        for g in &s.graphs {
            for row in g.node_features.rows() {
                for (c, x) in node_cols.iter_mut().zip(row) {
                    c.push(*x);
                }
            }
            for row in g.edge_features.rows() {
                for (c, x) in edge_cols.iter_mut().zip(row) {
                    c.push(*x);
                }
            }
        }
    }
    let mut node_names = Vec::with_capacity(d);
    for (name, &dim) in schema.names().iter().zip(schema.dims()) {
        for j in 0..dim {
            node_names.push(if dim == 1 {
                name.clone()
            } else {
                format!("{name}[{j}]")
            });
        }
    }
    Ok(FeatureStats {
        node: node_names
            .into_iter()
            .zip(node_cols)
            .map(|(n, c)| fit_column(n, c, cfg))
            .collect(),
        edge: edge_cols
            .into_iter()
            .enumerate()
            .map(|(i, c)| fit_column(format!("edge{i}"), c, cfg))
            .collect(),
    })
}

/// Fits on `train`, transforms it, and returns the stats for reuse on
/// other splits.
pub fn fit_and_apply_preprocessing(
    mut train: Dataset,
    cfg: &PreprocessConfig,
) -> Result<(Dataset, FeatureStats)> {
    let stats = fit_preprocessing(&train, cfg)?;
    stats.apply(&mut train)?;
    Ok((train, stats))
}
