//! Temporal attention, action attention and the Gaussian-mixture output.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockLinear;
use crate::domain::TemporalSample;
use crate::error::{FateError, Result};
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use crate::tape::{softmax, softplus, Tape, Var, LN_SQRT_2PI, SD_FLOOR};

/// Per-action linear scorer `φ_k : R^{d_h} → R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalScorer {
    pub w: BlockLinear,
    pub b: ParamId,
}

impl TemporalScorer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, k: usize, hidden_dim: usize, rng: &mut R) -> Self {
        Self {
            w: BlockLinear::blocks(store, &format!("{prefix}.w"), &vec![hidden_dim; k], 1, rng),
            b: store.insert_zeros(format!("{prefix}.b"), 1, k),
        }
    }
}

/// `β_{t,k} = softmax_t φ_k(h_{t,k})` for hidden states `T × (K·d_h)`.
pub fn temporal_attention(tape: &mut Tape, h: Var, scorer: &TemporalScorer) -> Result<Var> {
    if tape.shape(h).0 == 0 {
        return Err(FateError::Empty("hidden state sequence"));
    }
    let s = scorer.w.apply(tape, h)?;
    let b = tape.param(scorer.b);
    let s = tape.add_row_bias(s, b);
    Ok(tape.softmax_cols(s))
}

/// `a_k = Σ_t β_{t,k} h_{t,k}`, returned as a `1 × (K·d_h)` row.
pub fn summarize_action(tape: &mut Tape, beta: Var, h: Var) -> Result<Var> {
    let (bt, _) = tape.shape(beta);
    let (ht, _) = tape.shape(h);
    if bt != ht {
        return Err(FateError::Shape(format!(
            "{bt} attention rows for {ht} hidden states"
        )));
    }
    Ok(tape.block_weighted_sum(beta, h))
}

/// Perceptron shared across actions that scores each action's summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScorer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input_width: usize,
}

impl ActionScorer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input_width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: store.insert_glorot(format!("{prefix}.w1"), input_width, hidden, rng),
            b1: store.insert_zeros(format!("{prefix}.b1"), 1, hidden),
            w2: store.insert_glorot(format!("{prefix}.w2"), hidden, 1, rng),
            b2: store.insert_zeros(format!("{prefix}.b2"), 1, 1),
            input_width,
        }
    }
}

/// Action logits (`K × 1`) from the per-action rows `r_k = a_k ⊕ h_{T,k}`
/// packed as a `1 × (K·w)` row. `softmax` of the result is `p(z_A)`.
pub fn action_attention(tape: &mut Tape, packed: Var, scorer: &ActionScorer, k: usize) -> Result<Var> {
    let width = tape.shape(packed).1;
    if width != k * scorer.input_width {
        return Err(FateError::Shape(format!(
            "action inputs have {width} columns, expected {}×{}",
            k, scorer.input_width
        )));
    }
    let rows = tape.reshape(packed, k, scorer.input_width);
    let w1 = tape.param(scorer.w1);
    let b1 = tape.param(scorer.b1);
    let w2 = tape.param(scorer.w2);
    let b2 = tape.param(scorer.b2);
    let h = tape.matmul(rows, w1);
    let h = tape.add_row_bias(h, b1);
    let h = tape.elu(h);
    let s = tape.matmul(h, w2);
    Ok(tape.add_row_bias(s, b2))
}

/// Per-action networks `ψ_k` mapping `r_k` to `(μ_k, raw_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHeads {
    pub w1: BlockLinear,
    pub b1: ParamId,
    pub w2: BlockLinear,
    pub b2: ParamId,
}

impl GaussianHeads {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        input_width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = BlockLinear::blocks(store, &format!("{prefix}.w1"), &vec![input_width; k], hidden, rng);
        let b1 = store.insert_zeros(format!("{prefix}.b1"), 1, k * hidden);
        let w2 = BlockLinear::blocks(store, &format!("{prefix}.w2"), &vec![hidden; k], 2, rng);
        let b2 = store.insert_zeros(format!("{prefix}.b2"), 1, 2 * k);
        // Start every component at unit standard deviation.
        let unit_raw = (std::f64::consts::E - 1.0).ln();
        for kk in 0..k {
            store.value_mut(b2)[[0, 2 * kk + 1]] = unit_raw;
        }
        Self { w1, b1, w2, b2 }
    }
}

/// `[μ_1, raw_1, …, μ_K, raw_K]` as a `1 × 2K` row.
pub fn gaussian_params(tape: &mut Tape, packed: Var, heads: &GaussianHeads) -> Result<Var> {
    let h = heads.w1.apply(tape, packed)?;
    let b1 = tape.param(heads.b1);
    let h = tape.add_row_bias(h, b1);
    let h = tape.elu(h);
    let o = heads.w2.apply(tape, h)?;
    let b2 = tape.param(heads.b2);
    Ok(tape.add_row_bias(o, b2))
}

/// Positive standard deviation from the raw head output.
pub fn sd_from_raw(raw: f64) -> f64 {
    softplus(raw) + SD_FLOOR
}

/// Affine map between engagement units and the network's standardized
/// output space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub shift: f64,
    pub scale: f64,
}

impl Default for LabelScaler {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

impl LabelScaler {
    pub fn fit(labels: &[f64]) -> Self {
        if labels.is_empty() {
            return Self::default();
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let std = (labels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            shift: mean,
            scale: if std > 1e-8 { std } else { 1.0 },
        }
    }

    pub fn standardize(&self, e: f64) -> f64 {
        (e - self.shift) / self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureOutput {
    pub action_probs: Vec<f64>,
    pub mu: Vec<f64>,
    pub sd: Vec<f64>,
    pub point_estimate: f64,
}

impl MixtureOutput {
    pub fn new(action_probs: Vec<f64>, mu: Vec<f64>, sd: Vec<f64>) -> Self {
        let point_estimate = action_probs.iter().zip(&mu).map(|(p, m)| p * m).sum();
        Self {
            action_probs,
            mu,
            sd,
            point_estimate,
        }
    }

    /// Reads the logits and head outputs off a tape and maps them to
    /// engagement units.
    pub fn from_tape(tape: &Tape, logits: Var, gauss: Var, scaler: &LabelScaler) -> Self {
        let logits: Vec<f64> = tape.value(logits).iter().copied().collect();
        let g = tape.value(gauss);
        let k = logits.len();
        let mu = (0..k).map(|i| scaler.shift + scaler.scale * g[[0, 2 * i]]).collect();
        let sd = (0..k).map(|i| scaler.scale * sd_from_raw(g[[0, 2 * i + 1]])).collect();
        Self::new(softmax(&logits), mu, sd)
    }

    pub fn k(&self) -> usize {
        self.action_probs.len()
    }
}

pub fn gaussian_log_density(e: f64, mu: f64, sd: f64) -> f64 {
    let z = (e - mu) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// `log Σ_k p_k N(e; μ_k, sd_k²)`.
pub fn mixture_log_density(e: f64, out: &MixtureOutput) -> f64 {
    let terms: Vec<f64> = (0..out.k())
        .filter(|&k| out.action_probs[k] > 0.0)
        .map(|k| out.action_probs[k].ln() + gaussian_log_density(e, out.mu[k], out.sd[k]))
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Local explanations of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVectors {
    /// Action importance, length `K`.
    pub action: Vec<f64>,
    /// Temporal importance `T × K`; each column sums to one.
    pub temporal: Vec<Vec<f64>>,
    /// Friendship importance `T × max_friends`; row `t` is a simplex over
    /// that step's friends and zero-padded beyond them.
    pub friendship: Vec<Vec<f64>>,
}

impl ImportanceVectors {
    pub fn temporal_matrix(&self) -> Array2<f64> {
        let t = self.temporal.len();
        let k = self.temporal.first().map(|r| r.len()).unwrap_or(0);
        Array2::from_shape_fn((t, k), |(i, j)| self.temporal[i][j])
    }
}

/// Runs the full model on one sample.
pub fn forward(sample: &TemporalSample, model: &Model) -> Result<(MixtureOutput, ImportanceVectors)> {
    model.forward(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn beta_for_scores(scores: Array2<f64>) -> Array2<f64> {
        // Identity-weight temporal scorer reading the single hidden unit.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = scores.ncols();
        let sc = TemporalScorer::new(&mut store, "phi", k, 1, &mut rng);
        for id in sc.w.param_ids() {
            store.value_mut(id).fill(1.0);
        }
        let mut t = Tape::new(&store);
        let h = t.constant(scores);
        let b = temporal_attention(&mut t, h, &sc).unwrap();
        t.value(b).to_owned()
    }

    #[test]
    fn temporal_attention_examples() {
        assert_eq!(beta_for_scores(array![[0.3]]), array![[1.0]]);
        let uniform = beta_for_scores(Array2::from_elem((4, 1), 0.7));
        assert!(uniform.iter().all(|b| (b - 0.25).abs() < 1e-12));
        let skew = beta_for_scores(array![[0.0], [3f64.ln()]]);
        assert!((skew[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((skew[[1, 0]] - 0.75).abs() < 1e-12);
        let shifted = beta_for_scores(array![[5.0], [5.0 + 3f64.ln()]]);
        assert!((shifted[[1, 0]] - 0.75).abs() < 1e-12);
    }

    fn summarize(beta: Array2<f64>, h: Array2<f64>) -> Array2<f64> {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let b = t.constant(beta);
        let hv = t.constant(h);
        let a = summarize_action(&mut t, b, hv).unwrap();
        t.value(a).to_owned()
    }

    #[test]
    fn summarize_examples() {
        let h = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(summarize(array![[0.0], [1.0], [0.0]], h), array![[3.0, 4.0]]);
        let eq = array![[2.0, -1.0], [2.0, -1.0]];
        assert_eq!(summarize(array![[0.5], [0.5]], eq), array![[2.0, -1.0]]);
        let a = summarize(array![[0.3], [0.7]], array![[1.0, 0.0], [0.0, 2.0]]);
        assert!((a[[0, 0]] - 0.3).abs() < 1e-7 && (a[[0, 1]] - 1.4).abs() < 1e-7);
    }

    #[test]
    fn action_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let sc = ActionScorer::new(&mut store, "act", 1, 1, &mut rng);
        store.value_mut(sc.w1).fill(1.0);
        store.value_mut(sc.w2).fill(1.0);
        let probs = |store: &ParamStore, x: Array2<f64>| {
            let k = x.ncols();
            let mut t = Tape::new(store);
            let v = t.constant(x);
            let l = action_attention(&mut t, v, &sc, k).unwrap();
            softmax(&t.value(l).iter().copied().collect::<Vec<_>>())
        };
        assert_eq!(probs(&store, array![[0.4]]), vec![1.0]);
        let same = probs(&store, array![[0.2, 0.2, 0.2]]);
        assert!(same.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
        let p = probs(&store, array![[0.0, 2f64.ln(), 5f64.ln()]]);
        for (a, b) in p.iter().zip([0.125, 0.25, 0.625]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sd_parameterization() {
        assert!((sd_from_raw(0.0) - (2f64.ln() + 1e-4)).abs() < 1e-12);
        assert!((sd_from_raw(0.0) - 0.6932).abs() < 1e-4);
        assert!((sd_from_raw(-800.0) - 1e-4).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1_000_000 {
            let raw: f64 = rng.random_range(-1e3..1e3);
            assert!(sd_from_raw(raw) > 0.0);
        }
    }

    #[test]
    fn mixture_mean_and_density() {
        let out = MixtureOutput::new(vec![0.5, 0.5], vec![1.0, 3.0], vec![1.0, 1.0]);
        assert_eq!(out.point_estimate, 2.0);
        let std_normal = MixtureOutput::new(vec![1.0], vec![0.0], vec![1.0]);
        assert!((mixture_log_density(0.0, &std_normal) - 0.398_942_280_4f64.ln()).abs() < 1e-9);
        assert!((mixture_log_density(0.0, &std_normal) + 0.9189).abs() < 1e-4);
        let one_hot = MixtureOutput::new(vec![1.0, 0.0], vec![0.5, -9.0], vec![2.0, 0.1]);
        assert_eq!(
            mixture_log_density(1.3, &one_hot),
            gaussian_log_density(1.3, 0.5, 2.0)
        );
    }

    proptest! {
        #[test]
        fn density_is_translation_invariant(
            e in -5.0f64..5.0, c in -10.0f64..10.0,
            m1 in -3.0f64..3.0, m2 in -3.0f64..3.0,
            s1 in 0.1f64..3.0, s2 in 0.1f64..3.0, p in 0.01f64..0.99,
        ) {
            let a = MixtureOutput::new(vec![p, 1.0 - p], vec![m1, m2], vec![s1, s2]);
            let b = MixtureOutput::new(vec![p, 1.0 - p], vec![m1 + c, m2 + c], vec![s1, s2]);
            prop_assert!((mixture_log_density(e, &a) - mixture_log_density(e + c, &b)).abs() < 1e-9);
        }
    }
}
