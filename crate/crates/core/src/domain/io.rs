//! Newline-delimited JSON dataset files.
//!
//! Line 1 is a [`DatasetManifest`]; every following line is one
//! [`SampleRecord`]. Matrices are stored as `f32`: the adjacency as a dense
//! row-major array, node and edge features as arrays of rows.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ActionSchema, Dataset, EngagementTask, TemporalSample, UserGraph};
use crate::error::{FateError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: ActionSchema,
    /// History length `T`.
    pub steps: usize,
    pub task: EngagementTask,
    pub generator_seed: Option<u64>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub friends: Vec<u64>,
    pub adjacency: Vec<f32>,
    pub node_features: Vec<Vec<f32>>,
    pub edge_features: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub user_id: u64,
    pub label: f64,
    pub graphs: Vec<GraphRecord>,
}

fn rows_to_array(rows: &[Vec<f32>], ncols: usize, what: &str) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), ncols));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(FateError::Format(format!(
                "{what} row {i} has {} values, expected {ncols}",
                r.len()
            )));
        }
        for (j, v) in r.iter().enumerate() {
            out[[i, j]] = *v as f64;
        }
    }
    Ok(out)
}

fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f32>> {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|&x| x as f32).collect())
        .collect()
}

impl GraphRecord {
    pub fn from_graph(g: &UserGraph) -> Self {
        Self {
            friends: g.friends.clone(),
            adjacency: g.adjacency.iter().map(|&x| x as f32).collect(),
            node_features: array_to_rows(&g.node_features),
            edge_features: array_to_rows(&g.edge_features),
        }
    }

    pub fn into_graph(self, schema: &ActionSchema) -> Result<UserGraph> {
        let n = self.friends.len() + 1;
        if self.adjacency.len() != n * n {
            return Err(FateError::Format(format!(
                "adjacency has {} entries for {n} nodes",
                self.adjacency.len()
            )));
        }
        let adjacency =
            Array2::from_shape_vec((n, n), self.adjacency.iter().map(|&x| x as f64).collect())
                .expect("length checked");
        let node_features = rows_to_array(&self.node_features, schema.total_dim(), "node")?;
        let edge_width = self
            .edge_features
            .first()
            .map(|r| r.len())
            .unwrap_or(schema.edge_dim());
        let edge_features = rows_to_array(&self.edge_features, edge_width, "edge")?;
        Ok(UserGraph {
            ego: 0,
            friends: self.friends,
            adjacency,
            node_features,
            edge_features,
        })
    }
}

impl SampleRecord {
    pub fn from_sample(s: &TemporalSample) -> Self {
        Self {
            user_id: s.user_id,
            label: s.label,
            graphs: s.graphs.iter().map(GraphRecord::from_graph).collect(),
        }
    }

    pub fn into_sample(self, schema: &ActionSchema) -> Result<TemporalSample> {
        Ok(TemporalSample {
            user_id: self.user_id,
            label: self.label,
            graphs: self
                .graphs
                .into_iter()
                .map(|g| g.into_graph(schema))
                .collect::<Result<_>>()?,
        })
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    serde_json::to_writer(&mut w, &dataset.manifest)?;
    w.write_all(b"\n")?;
    for s in &dataset.samples {
        serde_json::to_writer(&mut w, &SampleRecord::from_sample(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut lines = BufReader::new(reader).lines();
    let header = lines
        .next()
        .ok_or_else(|| FateError::Format("empty dataset file".into()))??;
    let manifest: DatasetManifest = serde_json::from_str(&header)
        .map_err(|e| FateError::Format(format!("manifest line: {e}")))?;
    manifest.schema.check()?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| FateError::Format(format!("record {}: {e}", i + 1)))?;
        samples.push(rec.into_sample(&manifest.schema)?);
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::test_support::toy_sample;

    #[test]
    fn text_round_trip_preserves_f32_values() {
        let schema = ActionSchema::uniform(2, 2, 3).unwrap();
        let ds = Dataset {
            manifest: DatasetManifest {
                schema: schema.clone(),
                steps: 3,
                task: EngagementTask::default(),
                generator_seed: Some(4),
                split: "train".into(),
            },
            samples: vec![toy_sample(&schema, 3, 4)],
        };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        let (a, b) = (&back.samples[0].graphs[2], &ds.samples[0].graphs[2]);
        for (x, y) in a.adjacency.iter().zip(b.adjacency.iter()) {
            assert_eq!(*x, *y as f32 as f64);
        }
        assert!(back.validate().is_empty());
        let mut again = Vec::new();
        write_dataset(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn malformed_records_are_reported() {
        assert!(read_dataset(&b""[..]).is_err());
        let schema = ActionSchema::uniform(1, 1, 1).unwrap();
        let manifest = DatasetManifest {
            schema,
            steps: 1,
            task: EngagementTask::default(),
            generator_seed: None,
            split: "test".into(),
        };
        let mut text = serde_json::to_string(&manifest).unwrap();
        text.push_str(
            "\n{\"user_id\":1,\"label\":0.0,\"graphs\":[{\"friends\":[2],\"adjacency\":[1.0],\"node_features\":[[0.0],[0.0]],\"edge_features\":[[0.0]]}]}\n",
        );
        let err = read_dataset(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("adjacency"));
    }
}
