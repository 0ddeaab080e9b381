//! Linear maps that are either block-diagonal over action categories or
//! dense across all of them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FateError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockLinear {
    /// One `in_dims[k] × out_dim` matrix per category; no cross-category weights.
    Blocks {
        ids: Vec<ParamId>,
        in_dims: Vec<usize>,
        out_dim: usize,
    },
    /// A single `Σ in_dims × (K·out_dim)` matrix.
    Dense {
        id: ParamId,
        in_dim: usize,
        out_dim: usize,
    },
}

impl BlockLinear {
    pub fn blocks<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dims: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let ids = in_dims
            .iter()
            .enumerate()
            .map(|(k, &d)| store.insert_glorot(format!("{prefix}.{k}"), d, out_dim, rng))
            .collect();
        BlockLinear::Blocks {
            ids,
            in_dims: in_dims.to_vec(),
            out_dim,
        }
    }

    /// Dense map with the same total input and output widths as
    /// [`BlockLinear::blocks`] over `in_dims`.
    pub fn dense<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dims: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let in_dim: usize = in_dims.iter().sum();
        let total_out = out_dim * in_dims.len();
        let id = store.insert_glorot(prefix.to_string(), in_dim, total_out, rng);
        BlockLinear::Dense {
            id,
            in_dim,
            out_dim: total_out,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            BlockLinear::Blocks { in_dims, .. } => in_dims.iter().sum(),
            BlockLinear::Dense { in_dim, .. } => *in_dim,
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            BlockLinear::Blocks { ids, out_dim, .. } => ids.len() * out_dim,
            BlockLinear::Dense { out_dim, .. } => *out_dim,
        }
    }

    pub fn is_blocked(&self) -> bool {
        matches!(self, BlockLinear::Blocks { .. })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            BlockLinear::Blocks { ids, .. } => ids.clone(),
            BlockLinear::Dense { id, .. } => vec![*id],
        }
    }

    /// Scalar count of the tensors backing this map.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|id| store.value(*id).len()).sum()
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = tape.shape(x).1;
        if width != self.input_width() {
            return Err(FateError::Shape(format!(
                "linear map expects {} input columns, got {width}",
                self.input_width()
            )));
        }
        Ok(match self {
            BlockLinear::Blocks { ids, in_dims, .. } => {
                let ws: Vec<Var> = ids.iter().map(|id| tape.param(*id)).collect();
                tape.block_matmul(x, &ws, in_dims)
            }
            BlockLinear::Dense { id, .. } => {
                let w = tape.param(*id);
                tape.matmul(x, w)
            }
        })
    }
}
