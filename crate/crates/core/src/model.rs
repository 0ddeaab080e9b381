//! End-to-end model wiring for the full network and its ablations.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockLinear;
use crate::domain::FeatureStats;
use crate::domain::{ActionSchema, TemporalSample};
use crate::error::{FateError, Result};
use crate::friendship::{FriendScorer, FriendshipModule, TgcnLayerParams};
use crate::head::{
    action_attention, gaussian_params, summarize_action, temporal_attention, ActionScorer,
    GaussianHeads, ImportanceVectors, LabelScaler, MixtureOutput, TemporalScorer,
};
use crate::params::{ParamId, ParamStore};
use crate::tape::{softmax, Tape, Var};
use crate::temporal::{tlstm_forward, TlstmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    /// Dense GCN and LSTM weights.
    Ts,
    /// No graph encoder; the recurrence reads raw ego features.
    Fnd,
    /// No recurrence; per-step embeddings are concatenated and mapped affinely.
    Tmp,
    /// Friendship attention ignores edge features.
    Int,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Ts,
        Variant::Fnd,
        Variant::Tmp,
        Variant::Int,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Ts => "ts",
            Variant::Fnd => "fnd",
            Variant::Tmp => "tmp",
            Variant::Int => "int",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = FateError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| FateError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub schema: ActionSchema,
    /// Number of input time steps `T`.
    pub steps: usize,
    /// Per-category node embedding width `d′`.
    pub embed_dim: usize,
    /// Per-category recurrent state width `d_h`.
    pub hidden_dim: usize,
    /// Hidden width of the friendship and action scorers.
    pub scorer_hidden: usize,
    /// Hidden width of each Gaussian head.
    pub head_hidden: usize,
    pub lstm_layers: usize,
    /// Inverted dropout between recurrent layers during training.
    pub lstm_dropout: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            schema: ActionSchema::default(),
            steps: 14,
            embed_dim: 32,
            hidden_dim: 32,
            scorer_hidden: 32,
            head_hidden: 32,
            lstm_layers: 2,
            lstm_dropout: 0.0,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        self.schema.check()?;
        let positive = [
            ("steps", self.steps),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("scorer_hidden", self.scorer_hidden),
            ("head_hidden", self.head_hidden),
            ("lstm_layers", self.lstm_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FateError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.lstm_dropout) {
            return Err(FateError::Config("lstm_dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.schema.k()
    }

    /// Width of the per-action representation fed to the action scorer
    /// and the Gaussian heads.
    pub fn summary_width(&self) -> usize {
        match self.variant {
            Variant::Tmp => self.hidden_dim,
            _ => 2 * self.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TemporalStage {
    Recurrent {
        layers: Vec<TlstmParams>,
        scorer: TemporalScorer,
    },
    Readout {
        map: BlockLinear,
        bias: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub friendship: Option<FriendshipModule>,
    pub temporal: TemporalStage,
    pub action: ActionScorer,
    pub heads: GaussianHeads,
}

impl Layout {
    pub fn build(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.k();
        let d = config.embed_dim;
        let dh = config.hidden_dim;
        let dims = config.schema.dims().to_vec();
        let dense = config.variant == Variant::Ts;

        let friendship = if config.variant == Variant::Fnd {
            None
        } else {
            let layer = |store: &mut ParamStore, name: &str, ins: &[usize], rng: &mut ChaCha8Rng| {
                if dense {
                    TgcnLayerParams::vanilla(store, name, ins, d, rng)
                } else {
                    TgcnLayerParams::tensor(store, name, ins, d, rng)
                }
            };
            let l0 = layer(store, "gcn0", &dims, &mut rng);
            let l1 = layer(store, "gcn1", &vec![d; k], &mut rng);
            let scorer = FriendScorer::new(
                store,
                "friend_att",
                k * d,
                config.schema.edge_dim(),
                config.variant != Variant::Int,
                config.scorer_hidden,
                &mut rng,
            );
            Some(FriendshipModule {
                layers: [l0, l1],
                scorer,
                k,
            })
        };

        let step_dims = if friendship.is_some() {
            vec![2 * d; k]
        } else {
            dims.clone()
        };
        let temporal = if config.variant == Variant::Tmp {
            let in_dims: Vec<usize> = step_dims.iter().map(|w| w * config.steps).collect();
            TemporalStage::Readout {
                map: BlockLinear::blocks(store, "readout", &in_dims, dh, &mut rng),
                bias: store.insert_zeros("readout.b", 1, k * dh),
            }
        } else {
            let mut layers = Vec::with_capacity(config.lstm_layers);
            let mut ins = step_dims;
            for l in 0..config.lstm_layers {
                let name = format!("lstm{l}");
                layers.push(if dense {
                    TlstmParams::vanilla(store, &name, &ins, dh, &mut rng)
                } else {
                    TlstmParams::tensor(store, &name, &ins, dh, &mut rng)
                });
                ins = vec![dh; k];
            }
            TemporalStage::Recurrent {
                layers,
                scorer: TemporalScorer::new(store, "temporal_att", k, dh, &mut rng),
            }
        };
        let width = config.summary_width();
        let action = ActionScorer::new(store, "action_att", width, config.scorer_hidden, &mut rng);
        let heads = GaussianHeads::new(store, "psi", k, width, config.head_hidden, &mut rng);
        Ok(Self {
            friendship,
            temporal,
            action,
            heads,
        })
    }

    pub fn recurrent_layers(&self) -> &[TlstmParams] {
        match &self.temporal {
            TemporalStage::Recurrent { layers, .. } => layers,
            TemporalStage::Readout { .. } => &[],
        }
    }
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `K × 1` action logits.
    pub logits: Var,
    /// `1 × 2K` Gaussian head outputs in standardized units.
    pub gauss: Var,
    /// `T × K` temporal attention; absent when there is no recurrence.
    pub beta: Option<Var>,
    /// Friendship attention per step; absent for steps without friends.
    pub alphas: Vec<Option<Var>>,
}

/// Builds the forward graph of `sample` on `tape`. `masks` carries one
/// dropout mask per recurrent layer boundary.
pub fn forward_vars(
    tape: &mut Tape,
    config: &ModelConfig,
    layout: &Layout,
    sample: &TemporalSample,
    masks: Option<&[Array2<f64>]>,
) -> Result<ForwardVars> {
    let k = config.k();
    let steps = sample.steps();
    if steps == 0 {
        return Err(FateError::Empty("sample has no time steps"));
    }
    if steps != config.steps {
        return Err(FateError::Shape(format!(
            "sample has {steps} steps, model expects {}",
            config.steps
        )));
    }
    let mut alphas = Vec::with_capacity(steps);
    let rows: Vec<Var> = match &layout.friendship {
        Some(module) => sample
            .graphs
            .iter()
            .map(|g| {
                let enc = module.encode(tape, g)?;
                alphas.push(enc.alpha);
                Ok(enc.embedding)
            })
            .collect::<Result<_>>()?,
        None => sample
            .graphs
            .iter()
            .map(|g| {
                alphas.push(None);
                let ego = g.node_features.row(g.ego).to_owned().insert_axis(ndarray::Axis(0));
                tape.constant(ego)
            })
            .collect(),
    };
    let (packed, beta) = match &layout.temporal {
        TemporalStage::Recurrent { layers, scorer } => {
            let inputs = tape.concat_rows(&rows);
            let states = tlstm_forward(tape, inputs, layers, masks)?;
            let beta = temporal_attention(tape, states.h, scorer)?;
            let summary = summarize_action(tape, beta, states.h)?;
            let last = tape.slice_rows(states.h, steps - 1, 1);
            (tape.concat_blocks(&[summary, last], k), Some(beta))
        }
        TemporalStage::Readout { map, bias } => {
            let flat = tape.concat_blocks(&rows, k);
            let r = map.apply(tape, flat)?;
            let b = tape.param(*bias);
            (tape.add_row_bias(r, b), None)
        }
    };
    let logits = action_attention(tape, packed, &layout.action, k)?;
    let gauss = gaussian_params(tape, packed, &layout.heads)?;
    Ok(ForwardVars {
        logits,
        gauss,
        beta,
        alphas,
    })
}

/// Reads the three attentions off a finished forward pass.
pub fn importance(tape: &Tape, vars: &ForwardVars, sample: &TemporalSample) -> ImportanceVectors {
    let logits: Vec<f64> = tape.value(vars.logits).iter().copied().collect();
    let k = logits.len();
    let steps = vars.alphas.len();
    let temporal = match vars.beta {
        Some(b) => tape.value(b).outer_iter().map(|r| r.to_vec()).collect(),
        None => vec![vec![1.0 / steps as f64; k]; steps],
    };
    let width = sample.max_friends();
    let friendship = vars
        .alphas
        .iter()
        .map(|a| {
            let mut row = vec![0.0; width];
            if let Some(a) = a {
                for (slot, v) in row.iter_mut().zip(tape.value(*a).iter()) {
                    *slot = *v;
                }
            }
            row
        })
        .collect();
    ImportanceVectors {
        action: softmax(&logits),
        temporal,
        friendship,
    }
}

/// Trained or freshly initialized parameters with their wiring.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub store: ParamStore,
    pub scaler: LabelScaler,
    pub feature_stats: Option<FeatureStats>,
}

pub type ModelParams = Model;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let layout = Layout::build(&config, &mut store, seed)?;
        Ok(Self {
            config,
            layout,
            store,
            scaler: LabelScaler::default(),
            feature_stats: None,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn forward(&self, sample: &TemporalSample) -> Result<(MixtureOutput, ImportanceVectors)> {
        let mut tape = Tape::new(&self.store);
        let vars = forward_vars(&mut tape, &self.config, &self.layout, sample, None)?;
        let out = MixtureOutput::from_tape(&tape, vars.logits, vars.gauss, &self.scaler);
        let imp = importance(&tape, &vars, sample);
        Ok((out, imp))
    }

    pub fn predict(&self, sample: &TemporalSample) -> Result<f64> {
        Ok(self.forward(sample)?.0.point_estimate)
    }
}
