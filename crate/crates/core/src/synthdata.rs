//! Synthetic temporal ego-networks with planted personas, weekly rhythm and
//! known ground truth.
//!
//! Every user owns an activity series over `T + Δt` days. Inputs are the
//! first `T` days of the user and their friends; the label is a planted
//! function of the ego's series. Each user's random streams are derived from
//! `(seed, user_id)`, so generation order and parallelism do not matter.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{
    normalize_adjacency, ActionSchema, Aggregation, Dataset, DatasetManifest, EngagementTask,
    TemporalSample, UserGraph,
};
use crate::error::{FateError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaSpec {
    pub name: String,
    /// Mean daily activity per action.
    pub base_rates: Vec<f64>,
    /// Relative weekly modulation per action, in `[0, 1]`.
    pub weekly_amplitude: Vec<f64>,
    pub dominant_actions: Vec<usize>,
    /// Mixing weight in the population.
    pub weight: f64,
}

impl PersonaSpec {
    /// Heavy on snap sending, viewing and creation.
    pub fn snapper(weight: f64) -> Self {
        let mut base = vec![1.0; 13];
        base[0] = 8.0;
        base[1] = 10.0;
        base[2] = 6.0;
        Self {
            name: "snapper".into(),
            base_rates: base,
            weekly_amplitude: vec![0.5; 13],
            dominant_actions: vec![0, 1, 2],
            weight,
        }
    }

    /// Heavy on story and discover consumption.
    pub fn viewer(weight: f64) -> Self {
        let mut base = vec![1.0; 13];
        for k in [7, 9, 10, 11] {
            base[k] = 8.0;
        }
        Self {
            name: "viewer".into(),
            base_rates: base,
            weekly_amplitude: vec![0.5; 13],
            dominant_actions: vec![7, 9, 10, 11],
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FriendCount {
    Fixed { count: usize },
    Uniform { min: usize, max: usize },
}

impl FriendCount {
    pub fn max(&self) -> usize {
        match *self {
            FriendCount::Fixed { count } => count,
            FriendCount::Uniform { max, .. } => max,
        }
    }

    fn min(&self) -> usize {
        match *self {
            FriendCount::Fixed { count } => count,
            FriendCount::Uniform { min, .. } => min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    /// Mean of one action over the future window.
    WindowMean { action: usize },
    /// Exponentially recency-weighted mean of one action over the input
    /// days; weights halve every `half_life` days into the past.
    Recency { action: usize, half_life: f64 },
    /// Mean over the future window of the mean of the user's persona
    /// dominant actions.
    PersonaWindowMean,
}

impl LabelRule {
    fn metric_id(&self, schema: &ActionSchema) -> String {
        match self {
            LabelRule::WindowMean { action } => format!("window_mean:{}", schema.names()[*action]),
            LabelRule::Recency { action, .. } => format!("recency:{}", schema.names()[*action]),
            LabelRule::PersonaWindowMean => "window_mean:persona_dominant".into(),
        }
    }

    /// Weight of each input day in the label, normalized to one.
    pub fn temporal_profile(&self, steps: usize) -> Vec<f64> {
        match self {
            LabelRule::Recency { half_life, .. } => {
                let w: Vec<f64> = (0..steps)
                    .map(|t| 0.5f64.powf((steps - 1 - t) as f64 / half_life))
                    .collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            }
            _ => vec![1.0 / steps as f64; steps],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub friends_per_user: FriendCount,
    pub active_friend_fraction: f64,
    /// Input days `T`.
    pub steps: usize,
    /// Future window `Δt` of the label.
    pub horizon: usize,
    pub personas: Vec<PersonaSpec>,
    pub label_rule: LabelRule,
    pub noise_std: f64,
    pub seed: u64,
    /// Share of the label contributed by the active friends' own label
    /// quantity.
    pub friend_influence: f64,
    /// Friends drop out of individual days when set.
    pub dynamic_friends: bool,
    /// Probability of an edge between two friends.
    pub friend_edge_prob: f64,
    /// Daily interaction rate per channel with an active friend.
    pub active_rate: f64,
    /// Daily interaction rate per channel with any other friend.
    pub inactive_rate: f64,
    /// Lognormal sigma of day-level activity noise.
    pub activity_noise: f64,
    /// Lognormal sigma of per-user, per-action activity scale.
    pub user_spread: f64,
    /// AR(1) coefficient and innovation sd of the log-activity drift.
    pub drift_ar: f64,
    pub drift_sd: f64,
    pub test_fraction: f64,
    /// Action names and widths; derived from the personas when unset.
    #[serde(skip)]
    pub schema_override: Option<ActionSchema>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            friends_per_user: FriendCount::Uniform { min: 5, max: 20 },
            active_friend_fraction: 0.15,
            steps: 14,
            horizon: 7,
            personas: vec![PersonaSpec::snapper(0.5), PersonaSpec::viewer(0.5)],
            label_rule: LabelRule::PersonaWindowMean,
            noise_std: 0.1,
            seed: 0,
            friend_influence: 0.0,
            dynamic_friends: false,
            friend_edge_prob: 0.1,
            active_rate: 4.0,
            inactive_rate: 0.05,
            activity_noise: 0.3,
            user_spread: 0.5,
            drift_ar: 0.8,
            drift_sd: 0.1,
            test_fraction: 0.2,
            schema_override: None,
        }
    }
}

impl GeneratorConfig {
    pub fn schema(&self) -> ActionSchema {
        if let Some(s) = &self.schema_override {
            return s.clone();
        }
        let k = self.personas.first().map(|p| p.base_rates.len()).unwrap_or(0);
        if k == crate::domain::DEFAULT_ACTIONS.len() {
            ActionSchema::default()
        } else {
            ActionSchema::uniform(k, 1, crate::domain::DEFAULT_EDGE_CHANNELS.len())
                .unwrap_or_default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let err = |m: String| Err(FateError::Config(m));
        if self.personas.is_empty() {
            return err("at least one persona".into());
        }
        let k = self.personas[0].base_rates.len();
        if k == 0 {
            return err("personas need at least one action".into());
        }
        let schema = self.schema();
        if schema.k() != k || schema.dims().iter().any(|&d| d != 1) {
            return err(format!(
                "generated activity has {k} scalar actions; schema has {} actions of widths {:?}",
                schema.k(),
                schema.dims()
            ));
        }
        for p in &self.personas {
            if p.base_rates.len() != k || p.weekly_amplitude.len() != k {
                return err(format!("persona {} must cover {k} actions", p.name));
            }
            if p.base_rates.iter().any(|r| !(*r >= 0.0)) {
                return err(format!("persona {} has a negative base rate", p.name));
            }
            if p.dominant_actions.is_empty() || p.dominant_actions.iter().any(|&a| a >= k) {
                return err(format!("persona {} needs valid dominant actions", p.name));
            }
            if !(p.weight > 0.0) {
                return err(format!("persona {} needs a positive weight", p.name));
            }
        }
        match &self.label_rule {
            LabelRule::WindowMean { action } | LabelRule::Recency { action, .. } if *action >= k => {
                return err(format!("label action {action} outside {k} actions"));
            }
            LabelRule::Recency { half_life, .. } if !(*half_life > 0.0) => {
                return err("half_life must be positive".into());
            }
            _ => {}
        }
        if !(self.active_friend_fraction > 0.0 && self.active_friend_fraction <= 1.0) {
            return err("active_friend_fraction must lie in (0, 1]".into());
        }
        let (lo, hi) = (self.friends_per_user.min(), self.friends_per_user.max());
        if lo == 0 || lo > hi {
            return err(format!("friend count range {lo}..={hi} is infeasible"));
        }
        if self.n_users <= hi {
            return err(format!(
                "{} users cannot supply {hi} distinct friends each",
                self.n_users
            ));
        }
        if self.steps == 0 || self.horizon == 0 {
            return err("steps and horizon must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return err("test_fraction must lie in (0, 1)".into());
        }
        if self.noise_std < 0.0 || !(0.0..=1.0).contains(&self.friend_edge_prob) {
            return err("noise_std must be nonnegative and friend_edge_prob a probability".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaTruth {
    pub name: String,
    pub weight: f64,
    pub dominant_actions: Vec<usize>,
    pub dominant_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: u64,
    pub persona: usize,
    pub active_friends: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label_rule: LabelRule,
    pub personas: Vec<PersonaTruth>,
    /// Planted analog of the global action importance.
    pub action_importance: Vec<f64>,
    /// Weight of each input day in the label.
    pub temporal_profile: Vec<f64>,
    pub users: Vec<UserTruth>,
}

impl GroundTruth {
    /// Action that the label depends on most.
    pub fn dominant_action(&self) -> usize {
        crate::explain_em::argmax(&self.action_importance)
    }
}

/// JSON summary of the planted structure.
pub fn ground_truth_report(truth: &GroundTruth) -> serde_json::Value {
    let active: BTreeMap<String, &Vec<u64>> = truth
        .users
        .iter()
        .map(|u| (u.user_id.to_string(), &u.active_friends))
        .collect();
    serde_json::json!({
        "label_rule": truth.label_rule,
        "personas": truth.personas,
        "action_importance": truth.action_importance,
        "dominant_action": truth.dominant_action(),
        "temporal_profile": truth.temporal_profile,
        "active_friends": active,
    })
}

/// Per-user random stream for one purpose.
fn stream(seed: u64, user: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user.wrapping_mul(8).wrapping_add(purpose));
    rng
}

const ACTIVITY: u64 = 0;
const GRAPH: u64 = 1;
const EDGES: u64 = 2;
const LABEL: u64 = 3;

fn pick_persona(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Persona index and `(T + Δt) × K` activity of one user.
fn user_activity(cfg: &GeneratorConfig, user: u64) -> (usize, Array2<f64>) {
    let mut rng = stream(cfg.seed, user, ACTIVITY);
    let weights: Vec<f64> = cfg.personas.iter().map(|p| p.weight).collect();
    let persona = pick_persona(&weights, rng.random());
    let spec = &cfg.personas[persona];
    let k = spec.base_rates.len();
    let days = cfg.steps + cfg.horizon;
    let spread = LogNormal::new(-0.5 * cfg.user_spread.powi(2), cfg.user_spread).unwrap();
    let noise = LogNormal::new(-0.5 * cfg.activity_noise.powi(2), cfg.activity_noise).unwrap();
    let drift = Normal::new(0.0, cfg.drift_sd).unwrap();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let scales: Vec<f64> = (0..k).map(|_| spread.sample(&mut rng)).collect();
    let stationary = cfg.drift_sd / (1.0 - cfg.drift_ar * cfg.drift_ar).max(1e-9).sqrt();
    let mut z: Vec<f64> = (0..k)
        .map(|_| Normal::new(0.0, stationary).unwrap().sample(&mut rng))
        .collect();
    let mut out = Array2::zeros((days, k));
    for t in 0..days {
        let season = (std::f64::consts::TAU * t as f64 / 7.0 + phase).sin();
        for a in 0..k {
            let rate = spec.base_rates[a]
                * scales[a]
                * (1.0 + spec.weekly_amplitude[a] * season).max(0.0)
                * z[a].exp();
            out[[t, a]] = rate * noise.sample(&mut rng);
            z[a] = cfg.drift_ar * z[a] + drift.sample(&mut rng);
        }
    }
    (persona, out)
}

/// Noise-free label of a `(T + Δt) × K` activity series.
pub fn planted_label(rule: &LabelRule, activity: &Array2<f64>, steps: usize, dominant: &[usize]) -> f64 {
    let future = activity.slice(ndarray::s![steps.., ..]);
    match rule {
        LabelRule::WindowMean { action } => future.column(*action).mean().unwrap_or(0.0),
        LabelRule::Recency { action, .. } => rule
            .temporal_profile(steps)
            .iter()
            .enumerate()
            .map(|(t, w)| w * activity[[t, *action]])
            .sum(),
        LabelRule::PersonaWindowMean => {
            let per_day: f64 = dominant
                .iter()
                .map(|&a| future.column(a).mean().unwrap_or(0.0))
                .sum();
            per_day / dominant.len() as f64
        }
    }
}

struct UserPlan {
    friends: Vec<u64>,
    active: Vec<bool>,
}

fn user_plan(cfg: &GeneratorConfig, user: u64) -> UserPlan {
    let mut rng = stream(cfg.seed, user, GRAPH);
    let count = match cfg.friends_per_user {
        FriendCount::Fixed { count } => count,
        FriendCount::Uniform { min, max } => rng.random_range(min..=max),
    };
    let others = cfg.n_users - 1;
    let friends: Vec<u64> = sample_indices(&mut rng, others, count)
        .into_iter()
        .map(|i| {
            let i = i as u64;
            if i >= user {
                i + 1
            } else {
                i
            }
        })
        .collect();
    let n_active = ((cfg.active_friend_fraction * count as f64).round() as usize).clamp(1, count);
    let chosen = sample_indices(&mut rng, count, n_active).into_vec();
    let mut active = vec![false; count];
    for c in chosen {
        active[c] = true;
    }
    UserPlan { friends, active }
}

fn build_sample(
    cfg: &GeneratorConfig,
    schema: &ActionSchema,
    user: u64,
    activities: &[(usize, Array2<f64>)],
) -> Result<(TemporalSample, UserTruth)> {
    let plan = user_plan(cfg, user);
    let (persona, own) = &activities[user as usize];
    let f = plan.friends.len();
    let mut rng = stream(cfg.seed, user, EDGES);
    let mut ff = Array2::zeros((f, f));
    for i in 0..f {
        for j in i + 1..f {
            if rng.random::<f64>() < cfg.friend_edge_prob {
                ff[[i, j]] = 1.0;
                ff[[j, i]] = 1.0;
            }
        }
    }
    let active_pois = Poisson::new(cfg.active_rate.max(1e-12)).unwrap();
    let idle_pois = Poisson::new(cfg.inactive_rate.max(1e-12)).unwrap();
    let channels = schema.edge_dim();
    let mut graphs = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let present: Vec<usize> = if cfg.dynamic_friends {
            let mut p: Vec<usize> = (0..f).filter(|_| rng.random::<f64>() < 0.9).collect();
            if p.is_empty() {
                p.push(rng.random_range(0..f));
            }
            p
        } else {
            (0..f).collect()
        };
        let n = present.len() + 1;
        let mut raw = Array2::zeros((n, n));
        for (a, &i) in present.iter().enumerate() {
            raw[[0, a + 1]] = 1.0;
            raw[[a + 1, 0]] = 1.0;
            for (b, &j) in present.iter().enumerate() {
                raw[[a + 1, b + 1]] = ff[[i, j]];
            }
        }
        let mut node = Array2::zeros((n, schema.total_dim()));
        node.row_mut(0).assign(&own.row(t));
        for (a, &i) in present.iter().enumerate() {
            let friend = plan.friends[i] as usize;
            node.row_mut(a + 1).assign(&activities[friend].1.row(t));
        }
        let mut edges = Array2::zeros((present.len(), channels));
        for (a, &i) in present.iter().enumerate() {
            for c in 0..channels {
                let d = if plan.active[i] { &active_pois } else { &idle_pois };
                edges[[a, c]] = d.sample(&mut rng);
            }
        }
        graphs.push(UserGraph {
            ego: 0,
            friends: present.iter().map(|&i| plan.friends[i]).collect(),
            adjacency: normalize_adjacency(&raw)?,
            node_features: node,
            edge_features: edges,
        });
    }
    let dominant = &cfg.personas[*persona].dominant_actions;
    let mut label = planted_label(&cfg.label_rule, own, cfg.steps, dominant);
    let active_ids: Vec<u64> = plan
        .friends
        .iter()
        .zip(&plan.active)
        .filter(|(_, &a)| a)
        .map(|(id, _)| *id)
        .collect();
    if cfg.friend_influence > 0.0 {
        let influence: f64 = active_ids
            .iter()
            .map(|&id| {
                let (p, act) = &activities[id as usize];
                planted_label(&cfg.label_rule, act, cfg.steps, &cfg.personas[*p].dominant_actions)
            })
            .sum::<f64>()
            / active_ids.len() as f64;
        label = (1.0 - cfg.friend_influence) * label + cfg.friend_influence * influence;
    }
    if cfg.noise_std > 0.0 {
        let mut lrng = stream(cfg.seed, user, LABEL);
        label += Normal::new(0.0, cfg.noise_std).unwrap().sample(&mut lrng);
    }
    Ok((
        TemporalSample {
            user_id: user,
            graphs,
            label,
        },
        UserTruth {
            user_id: user,
            persona: *persona,
            active_friends: active_ids,
        },
    ))
}

#[cfg(feature = "parallel")]
fn per_user<T: Send>(n: usize, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n as u64).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn per_user<T>(n: usize, f: impl Fn(u64) -> T) -> Vec<T> {
    (0..n as u64).map(f).collect()
}

/// Train and test datasets plus the planted ground truth.
pub fn generate(cfg: &GeneratorConfig) -> Result<(Dataset, Dataset, GroundTruth)> {
    cfg.check()?;
    let schema = cfg.schema();
    let activities = per_user(cfg.n_users, |u| user_activity(cfg, u));
    let built = per_user(cfg.n_users, |u| build_sample(cfg, &schema, u, &activities));
    let mut samples = Vec::with_capacity(cfg.n_users);
    let mut users = Vec::with_capacity(cfg.n_users);
    for b in built {
        let (s, u) = b?;
        samples.push(s);
        users.push(u);
    }
    let mut split_rng = stream(cfg.seed, u64::MAX / 8, 0);
    let n_test = ((cfg.n_users as f64 * cfg.test_fraction).round() as usize).clamp(1, cfg.n_users - 1);
    let test_ids: std::collections::HashSet<usize> =
        sample_indices(&mut split_rng, cfg.n_users, n_test).into_iter().collect();
    let manifest = |split: &str| DatasetManifest {
        schema: schema.clone(),
        steps: cfg.steps,
        task: EngagementTask {
            metric_id: cfg.label_rule.metric_id(&schema),
            horizon: cfg.horizon,
            aggregation: Aggregation::Mean,
        },
        generator_seed: Some(cfg.seed),
        split: split.into(),
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if test_ids.contains(&i) {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    let k = schema.k();
    let total_weight: f64 = cfg.personas.iter().map(|p| p.weight).sum();
    let action_importance = match &cfg.label_rule {
        LabelRule::WindowMean { action } | LabelRule::Recency { action, .. } => {
            (0..k).map(|a| if a == *action { 1.0 } else { 0.0 }).collect()
        }
        LabelRule::PersonaWindowMean => {
            let mut v = vec![0.0; k];
            for p in &cfg.personas {
                for &a in &p.dominant_actions {
                    v[a] += p.weight / total_weight / p.dominant_actions.len() as f64;
                }
            }
            v
        }
    };
    let truth = GroundTruth {
        label_rule: cfg.label_rule.clone(),
        personas: cfg
            .personas
            .iter()
            .map(|p| PersonaTruth {
                name: p.name.clone(),
                weight: p.weight / total_weight,
                dominant_actions: p.dominant_actions.clone(),
                dominant_names: p
                    .dominant_actions
                    .iter()
                    .map(|&a| schema.names()[a].clone())
                    .collect(),
            })
            .collect(),
        action_importance,
        temporal_profile: cfg.label_rule.temporal_profile(cfg.steps),
        users,
    };
    Ok((
        Dataset {
            manifest: manifest("train"),
            samples: train,
        },
        Dataset {
            manifest: manifest("test"),
            samples: test,
        },
        truth,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::write_dataset;
    use proptest::prelude::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_users: 60,
            friends_per_user: FriendCount::Uniform { min: 3, max: 8 },
            seed,
            ..Default::default()
        }
    }

    fn bytes(d: &Dataset) -> Vec<u8> {
        let mut b = Vec::new();
        write_dataset(d, &mut b).unwrap();
        b
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, at, _) = generate(&small(3)).unwrap();
        let (b, bt, _) = generate(&small(3)).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(bytes(&at), bytes(&bt));
        let (c, _, _) = generate(&small(4)).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn samples_validate_and_split() {
        let cfg = GeneratorConfig {
            dynamic_friends: true,
            ..small(1)
        };
        let (train, test, truth) = generate(&cfg).unwrap();
        assert_eq!(train.len() + test.len(), 60);
        assert_eq!(test.len(), 12);
        assert!(train.validate().is_empty());
        assert!(test.validate().is_empty());
        assert_eq!(truth.users.len(), 60);
    }

    #[test]
    fn window_label_without_noise_is_the_planted_mean() {
        let cfg = GeneratorConfig {
            label_rule: LabelRule::WindowMean { action: 4 },
            noise_std: 0.0,
            ..small(2)
        };
        let (train, _, _) = generate(&cfg).unwrap();
        for s in train.samples.iter().take(10) {
            let (_, act) = user_activity(&cfg, s.user_id);
            let direct: f64 = (cfg.steps..cfg.steps + cfg.horizon).map(|t| act[[t, 4]]).sum::<f64>()
                / cfg.horizon as f64;
            assert!((s.label - direct).abs() < 1e-12);
            // The input days are the first `T` days of that same series.
            assert_eq!(s.graphs[3].node_features[[0, 4]], act[[3, 4]]);
        }
    }

    #[test]
    fn three_of_twenty_friends_carry_the_interactions() {
        let cfg = GeneratorConfig {
            n_users: 50,
            friends_per_user: FriendCount::Fixed { count: 20 },
            ..Default::default()
        };
        let (train, _, truth) = generate(&cfg).unwrap();
        for s in &train.samples {
            let mut mass = vec![0.0; 20];
            for g in &s.graphs {
                for (v, row) in g.edge_features.outer_iter().enumerate() {
                    mass[v] += row.sum();
                }
            }
            let total: f64 = mass.iter().sum();
            let mut order: Vec<usize> = (0..20).collect();
            order.sort_by(|a, b| mass[*b].total_cmp(&mass[*a]));
            let top: f64 = order[..3].iter().map(|&v| mass[v]).sum();
            assert!(top / total >= 0.8, "top-3 share {}", top / total);
            let mut top_ids: Vec<u64> = order[..3].iter().map(|&v| s.graphs[0].friends[v]).collect();
            top_ids.sort_unstable();
            let u = truth.users.iter().find(|u| u.user_id == s.user_id).unwrap();
            let mut planted = u.active_friends.clone();
            planted.sort_unstable();
            assert_eq!(top_ids, planted);
        }
    }

    fn autocorr(x: &[f64], lag: usize) -> f64 {
        let n = x.len();
        let m = x.iter().sum::<f64>() / n as f64;
        let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum::<f64>() / var
    }

    #[test]
    fn weekly_rhythm_shows_in_autocorrelation() {
        let cfg = GeneratorConfig {
            steps: 56,
            horizon: 7,
            ..small(5)
        };
        let (mut l7, mut l3) = (0.0, 0.0);
        for u in 0..cfg.n_users as u64 {
            let (_, act) = user_activity(&cfg, u);
            let col: Vec<f64> = act.column(1).to_vec();
            l7 += autocorr(&col, 7);
            l3 += autocorr(&col, 3);
        }
        assert!(l7 > l3, "lag7 {l7} lag3 {l3}");
    }

    #[test]
    fn ground_truth_report_examples() {
        let single = GeneratorConfig {
            personas: vec![PersonaSpec::snapper(1.0)],
            ..small(0)
        };
        let (_, _, t) = generate(&single).unwrap();
        let r = ground_truth_report(&t);
        assert_eq!(r["personas"].as_array().unwrap().len(), 1);

        let (_, _, t) = generate(&small(0)).unwrap();
        let r = ground_truth_report(&t);
        let weights: Vec<f64> = r["personas"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["weight"].as_f64().unwrap())
            .collect();
        assert_eq!(weights, vec![0.5, 0.5]);

        let profile = LabelRule::Recency { action: 0, half_life: 2.0 }.temporal_profile(14);
        assert!(profile.windows(2).all(|w| w[0] < w[1]));
        assert!((profile.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let too_many = GeneratorConfig {
            n_users: 10,
            friends_per_user: FriendCount::Fixed { count: 10 },
            ..Default::default()
        };
        assert!(matches!(generate(&too_many), Err(FateError::Config(_))));
        let bad_fraction = GeneratorConfig {
            active_friend_fraction: 0.0,
            ..small(0)
        };
        assert!(generate(&bad_fraction).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn label_ignores_non_dominant_actions(user in 0u64..60, rule in 0usize..3) {
            let rule = match rule {
                0 => LabelRule::WindowMean { action: 2 },
                1 => LabelRule::Recency { action: 2, half_life: 3.0 },
                _ => LabelRule::PersonaWindowMean,
            };
            let cfg = GeneratorConfig { label_rule: rule.clone(), noise_std: 0.0, ..small(9) };
            let (p, act) = user_activity(&cfg, user);
            let dominant = match rule {
                LabelRule::PersonaWindowMean => cfg.personas[p].dominant_actions.clone(),
                _ => vec![2],
            };
            let mut zeroed = act.clone();
            for a in 0..act.ncols() {
                if !dominant.contains(&a) {
                    zeroed.column_mut(a).fill(0.0);
                }
            }
            prop_assert_eq!(
                planted_label(&rule, &act, cfg.steps, &cfg.personas[p].dominant_actions),
                planted_label(&rule, &zeroed, cfg.steps, &cfg.personas[p].dominant_actions)
            );
        }
    }
}
