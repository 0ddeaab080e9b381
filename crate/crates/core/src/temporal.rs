//! Tensor-based LSTM over the sequence of graph embeddings.
//!
//! Hidden and cell states are `1 × (K·d_h)` rows; with block-diagonal gate
//! weights, block `k` of `h_t` only ever sees block `k` of the inputs.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockLinear;
use crate::error::{FateError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmGate {
    pub input: BlockLinear,
    pub hidden: BlockLinear,
    pub bias: ParamId,
}

/// One recurrent layer: gates in the order forget, input, output, cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlstmParams {
    pub gates: [LstmGate; 4],
    pub k: usize,
    pub hidden_dim: usize,
    pub in_dims: Vec<usize>,
}

const GATE_NAMES: [&str; 4] = ["f", "i", "o", "c"];

impl TlstmParams {
    fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dims: &[usize],
        hidden_dim: usize,
        blocked: bool,
        rng: &mut R,
    ) -> Self {
        let k = in_dims.len();
        let hidden_dims = vec![hidden_dim; k];
        let gates = GATE_NAMES.map(|g| {
            let (input, hidden) = if blocked {
                (
                    BlockLinear::blocks(store, &format!("{prefix}.U_{g}"), in_dims, hidden_dim, rng),
                    BlockLinear::blocks(store, &format!("{prefix}.Uh_{g}"), &hidden_dims, hidden_dim, rng),
                )
            } else {
                (
                    BlockLinear::dense(store, &format!("{prefix}.U_{g}"), in_dims, hidden_dim, rng),
                    BlockLinear::dense(store, &format!("{prefix}.Uh_{g}"), &hidden_dims, hidden_dim, rng),
                )
            };
            let bias = store.insert_zeros(format!("{prefix}.b_{g}"), 1, k * hidden_dim);
            if g == "f" {
                store.value_mut(bias).fill(1.0);
            }
            LstmGate {
                input,
                hidden,
                bias,
            }
        });
        Self {
            gates,
            k,
            hidden_dim,
            in_dims: in_dims.to_vec(),
        }
    }

    /// Block-diagonal layer with per-category input widths `in_dims`.
    pub fn tensor<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dims: &[usize],
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, prefix, in_dims, hidden_dim, true, rng)
    }

    /// Standard LSTM layer of the same total widths.
    pub fn vanilla<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dims: &[usize],
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, prefix, in_dims, hidden_dim, false, rng)
    }

    pub fn state_width(&self) -> usize {
        self.k * self.hidden_dim
    }

    pub fn input_width(&self) -> usize {
        self.in_dims.iter().sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.gates
            .iter()
            .flat_map(|g| {
                let mut ids = g.input.param_ids();
                ids.extend(g.hidden.param_ids());
                ids.push(g.bias);
                ids
            })
            .collect()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|id| store.value(*id).len()).sum()
    }
}

fn gate_update(
    tape: &mut Tape,
    params: &TlstmParams,
    x_proj: [Var; 4],
    h_prev: Option<Var>,
    c_prev: Option<Var>,
) -> Result<(Var, Var)> {
    let mut pre = [x_proj[0]; 4];
    for (g, gate) in params.gates.iter().enumerate() {
        let mut z = x_proj[g];
        if let Some(h) = h_prev {
            let hp = gate.hidden.apply(tape, h)?;
            z = tape.add(z, hp);
        }
        let b = tape.param(gate.bias);
        pre[g] = tape.add_row_bias(z, b);
    }
    let f = tape.sigmoid(pre[0]);
    let i = tape.sigmoid(pre[1]);
    let o = tape.sigmoid(pre[2]);
    let candidate = tape.tanh(pre[3]);
    let fresh = tape.mul(i, candidate);
    let c = match c_prev {
        Some(c_prev) => {
            let kept = tape.mul(f, c_prev);
            tape.add(kept, fresh)
        }
        None => fresh,
    };
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    Ok((h, c))
}

fn check_state(tape: &Tape, v: Var, rows: usize, width: usize, what: &str) -> Result<()> {
    let shape = tape.shape(v);
    if shape != (rows, width) {
        return Err(FateError::Shape(format!(
            "{what} is {}×{}, expected {rows}×{width}",
            shape.0, shape.1
        )));
    }
    Ok(())
}

/// One step of the recurrence. Each row is an independent sequence, so a
/// batch of `B` states is a `B`-row matrix.
pub fn tlstm_cell(
    tape: &mut Tape,
    g_t: Var,
    h_prev: Var,
    c_prev: Var,
    params: &TlstmParams,
) -> Result<(Var, Var)> {
    let rows = tape.shape(g_t).0;
    check_state(tape, g_t, rows, params.input_width(), "input")?;
    check_state(tape, h_prev, rows, params.state_width(), "hidden state")?;
    check_state(tape, c_prev, rows, params.state_width(), "cell state")?;
    let mut x_proj = [g_t; 4];
    for (g, gate) in params.gates.iter().enumerate() {
        x_proj[g] = gate.input.apply(tape, g_t)?;
    }
    gate_update(tape, params, x_proj, Some(h_prev), Some(c_prev))
}

/// Top-layer hidden states of the whole sequence, `T × (K·d_h)`.
#[derive(Debug, Clone, Copy)]
pub struct HiddenStates {
    pub h: Var,
    pub steps: usize,
}

/// Unrolls the stacked layers over `inputs` (`T × Σ in_dims`) from a zero
/// state. `masks`, when given, hold one inverted-dropout mask per layer
/// boundary.
pub fn tlstm_forward(
    tape: &mut Tape,
    inputs: Var,
    layers: &[TlstmParams],
    masks: Option<&[Array2<f64>]>,
) -> Result<HiddenStates> {
    let steps = tape.shape(inputs).0;
    if steps == 0 {
        return Err(FateError::Empty("input sequence"));
    }
    if layers.is_empty() {
        return Err(FateError::Config("at least one recurrent layer".into()));
    }
    let mut x = inputs;
    for (layer_idx, params) in layers.iter().enumerate() {
        if tape.shape(x).1 != params.input_width() {
            return Err(FateError::Shape(format!(
                "layer {layer_idx} expects {} input columns, got {}",
                params.input_width(),
                tape.shape(x).1
            )));
        }
        let mut proj = [x; 4];
        for (g, gate) in params.gates.iter().enumerate() {
            proj[g] = gate.input.apply(tape, x)?;
        }
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut rows = Vec::with_capacity(steps);
        for t in 0..steps {
            let row = proj.map(|p| tape.slice_rows(p, t, 1));
            let (nh, nc) = gate_update(tape, params, row, h, c)?;
            h = Some(nh);
            c = Some(nc);
            rows.push(nh);
        }
        x = tape.concat_rows(&rows);
        if layer_idx + 1 < layers.len() {
            if let Some(m) = masks.and_then(|m| m.get(layer_idx)) {
                let mv = tape.constant(m.clone());
                x = tape.mul(x, mv);
            }
        }
    }
    Ok(HiddenStates { h: x, steps })
}
